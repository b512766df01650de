#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "test_util.hpp"
#include "vqlogits/inspect/clusters.hpp"

using namespace vqlogits;
using vqlogits::testing::random_ids;

namespace {

// Words w0..w{n-3} with distinct, descending frequencies plus the specials.
Vocabulary make_vocab(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::ostringstream text;
  for (std::size_t w = 0; w + 2 < n; ++w) {
    const std::size_t reps = 1 + rng.below(30);
    for (std::size_t r = 0; r < reps; ++r) text << 'w' << w << ' ';
  }
  text << '\n';
  std::istringstream in(text.str());
  return Vocabulary::build(in, n);
}

}  // namespace

TEST(ClusterMembers, IdentityGivesSingletons) {
  const Vocabulary vocab = make_vocab(40, 1);
  const auto map = VocabMapping::identity(vocab.size());
  for (std::size_t j = 0; j < vocab.size(); ++j) {
    const auto v = cluster_members(map, vocab, j);
    ASSERT_EQ(v.size, 1u);
    EXPECT_EQ(v.members, std::vector<Index>{static_cast<Index>(j)});
    EXPECT_EQ(v.freq_mass, vocab.freq(static_cast<Index>(j)));
  }
}

TEST(ClusterMembers, SingleCodeHoldsWholeVocabulary) {
  const Vocabulary vocab = make_vocab(30, 2);
  const VocabMapping map(std::vector<Index>(vocab.size(), 0), 1);
  const auto v = cluster_members(map, vocab, 0);
  EXPECT_EQ(v.size, vocab.size());
  for (std::size_t i = 1; i < v.members.size(); ++i) {
    const Index a = v.members[i - 1], b = v.members[i];
    ASSERT_TRUE(vocab.freq(a) > vocab.freq(b) || (vocab.freq(a) == vocab.freq(b) && a < b));
  }
  EXPECT_THROW(cluster_members(map, vocab, 1), IndexError);
}

TEST(ClusterMembers, CodesPartitionTheVocabulary) {
  const Vocabulary vocab = make_vocab(200, 3);
  Rng rng(4);
  const VocabMapping map(random_ids(vocab.size(), 17, rng), 17);
  std::set<Index> seen;
  std::size_t total = 0;
  for (std::size_t j = 0; j < 17; ++j) {
    const auto v = cluster_members(map, vocab, j);
    for (Index i : v.members) {
      EXPECT_TRUE(seen.insert(i).second);
      EXPECT_EQ(static_cast<std::size_t>(map.code(static_cast<std::size_t>(i))), j);
    }
    total += v.size;
  }
  EXPECT_EQ(total, vocab.size());
  EXPECT_EQ(seen.size(), vocab.size());
  const auto all = all_clusters(map, vocab);
  for (std::size_t j = 0; j < 17; ++j) EXPECT_EQ(all[j].members, cluster_members(map, vocab, j).members);
}

TEST(ClusterMembers, MismatchedVocabularyIsConfigError) {
  const Vocabulary vocab = make_vocab(20, 5);
  EXPECT_THROW(cluster_members(VocabMapping::identity(21), vocab, 0), ConfigError);
}

TEST(ClusterStats, SizesAndFrequencyMassAddUp) {
  const Vocabulary vocab = make_vocab(300, 6);
  Rng rng(7);
  const VocabMapping map(random_ids(vocab.size(), 40, rng), 40);
  const auto s = cluster_stats(map, vocab, 5);
  std::size_t sizes = 0, codes = 0;
  for (const auto& [size, n] : s.size_histogram) {
    sizes += size * n;
    codes += n;
  }
  EXPECT_EQ(sizes, vocab.size());
  EXPECT_EQ(codes, 40u);
  std::uint64_t mass = 0, corpus = 0;
  for (auto m : s.freq_mass) mass += m;
  for (auto f : vocab.freqs()) corpus += f;
  EXPECT_EQ(mass, corpus);
  ASSERT_EQ(s.largest.size(), 5u);
  for (std::size_t i = 1; i < 5; ++i)
    EXPECT_GE(map.counts()[s.largest[i - 1]], map.counts()[s.largest[i]]);
  EXPECT_EQ(static_cast<std::size_t>(map.counts()[s.largest[0]]), s.max_size);
}

TEST(ClusterStats, EntropyClosedForms) {
  const Vocabulary vocab = make_vocab(64, 8);
  EXPECT_NEAR(cluster_stats(VocabMapping::identity(64), vocab).size_entropy_bits, 6.0, 1e-12);
  EXPECT_EQ(cluster_stats(VocabMapping(std::vector<Index>(64, 0), 3), vocab).size_entropy_bits, 0.0);
  EXPECT_EQ(cluster_stats(VocabMapping(std::vector<Index>(64, 0), 3), vocab).empty_codes, 2u);
}

TEST(ClusterStats, UniformRandomMappingLooksBinomial) {
  // V draws into K codes: sizes follow Binomial(V, 1/K) per code. Compare
  // the empirical histogram with the pmf, pooled into +-1 sd bands.
  const std::size_t k = 400;
  const Vocabulary vocab = make_vocab(40000, 9);
  const std::size_t v = vocab.size();
  Rng rng(10);
  const VocabMapping map(random_ids(v, k, rng), k);
  const auto s = cluster_stats(map, vocab);
  const double p = 1.0 / static_cast<double>(k), n = static_cast<double>(v);
  const double mean = n * p, sd = std::sqrt(n * p * (1 - p));
  auto pmf = [&](std::size_t x) {
    return std::exp(std::lgamma(n + 1) - std::lgamma(x + 1.0) - std::lgamma(n - x + 1) +
                    x * std::log(p) + (n - x) * std::log1p(-p));
  };
  double expected_inside = 0;
  for (std::size_t x = 0; x <= v; ++x)
    if (std::abs(static_cast<double>(x) - mean) <= sd) expected_inside += pmf(x);
  double inside = 0, m1 = 0, m2 = 0;
  for (const auto& [size, count] : s.size_histogram) {
    if (std::abs(static_cast<double>(size) - mean) <= sd) inside += static_cast<double>(count);
    m1 += static_cast<double>(size * count);
    m2 += static_cast<double>(size * size * count);
  }
  inside /= static_cast<double>(k);
  m1 /= static_cast<double>(k);
  const double var = m2 / static_cast<double>(k) - m1 * m1;
  EXPECT_DOUBLE_EQ(m1, mean);
  EXPECT_NEAR(var / (sd * sd), 1.0, 0.2);
  EXPECT_NEAR(inside, expected_inside, 0.08);
}

TEST(ClusterTable, TextAndCsvFormats) {
  std::istringstream corpus("b b b a a c\n");
  const Vocabulary vocab = Vocabulary::build(corpus, 10);
  // b=0 a=1 c=2 <unk>=3 <eos>=4
  const VocabMapping map({0, 0, 1, 1, 0}, 2);
  const auto views = all_clusters(map, vocab);
  std::ostringstream text, csv;
  write_cluster_table(text, views, vocab, 2, false);
  write_cluster_table(csv, views, vocab, 0, true);
  EXPECT_EQ(text.str(), "0\t3\t6\tb\ta\n1\t2\t1\tc\t<unk>\n");
  EXPECT_EQ(csv.str(), "code,size,freq_mass,top_members\n0,3,6,b a <eos>\n1,2,1,c <unk>\n");
}

TEST(ClusterTable, CsvQuotesAwkwardTokens) {
  std::istringstream corpus("x,y \"q\" z\n");
  const Vocabulary vocab = Vocabulary::build(corpus, 10);
  const VocabMapping map(std::vector<Index>(vocab.size(), 0), 1);
  std::ostringstream csv;
  write_cluster_table(csv, all_clusters(map, vocab), vocab, 0, true);
  EXPECT_NE(csv.str().find("\"\"\"q\"\" x,y"), std::string::npos) << csv.str();
}
