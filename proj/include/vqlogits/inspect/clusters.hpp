#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "vqlogits/data/vocabulary.hpp"
#include "vqlogits/errors.hpp"
#include "vqlogits/heads/vocab_mapping.hpp"

namespace vqlogits {

struct CodeClusterView {
  Index code = 0;
  std::vector<Index> members;  // most frequent first, ties by id
  std::size_t size = 0;
  std::uint64_t freq_mass = 0;
};

namespace detail {

inline void check_vocab(const VocabMapping& map, const Vocabulary& vocab) {
  if (map.vocab_size() != vocab.size()) {
    throw ConfigError("mapping covers V=" + std::to_string(map.vocab_size()) +
                      " but the vocabulary has " + std::to_string(vocab.size()) + " tokens");
  }
}

inline CodeClusterView view_from(Index code, std::vector<Index> members, const Vocabulary& vocab) {
  CodeClusterView v;
  v.code = code;
  std::stable_sort(members.begin(), members.end(),
                   [&](Index a, Index b) { return vocab.freq(a) > vocab.freq(b); });
  for (Index i : members) v.freq_mass += vocab.freq(i);
  v.size = members.size();
  v.members = std::move(members);
  return v;
}

}  // namespace detail

inline CodeClusterView cluster_members(const VocabMapping& map, const Vocabulary& vocab,
                                       std::size_t j) {
  detail::check_vocab(map, vocab);
  if (j >= map.num_codes()) {
    throw IndexError("code " + std::to_string(j) + " outside [0, " +
                     std::to_string(map.num_codes()) + ")");
  }
  std::vector<Index> members;
  for (std::size_t i = 0; i < map.vocab_size(); ++i)
    if (static_cast<std::size_t>(map.code(i)) == j) members.push_back(static_cast<Index>(i));
  return detail::view_from(static_cast<Index>(j), std::move(members), vocab);
}

// Every code's view in one pass over the mapping.
inline std::vector<CodeClusterView> all_clusters(const VocabMapping& map, const Vocabulary& vocab) {
  detail::check_vocab(map, vocab);
  std::vector<std::vector<Index>> members(map.num_codes());
  for (std::size_t i = 0; i < map.vocab_size(); ++i)
    members[static_cast<std::size_t>(map.code(i))].push_back(static_cast<Index>(i));
  std::vector<CodeClusterView> out;
  out.reserve(members.size());
  for (std::size_t j = 0; j < members.size(); ++j)
    out.push_back(detail::view_from(static_cast<Index>(j), std::move(members[j]), vocab));
  return out;
}

struct ClusterStats {
  std::size_t vocab = 0;
  std::size_t codes = 0;
  std::size_t empty_codes = 0;
  std::map<std::size_t, std::size_t> size_histogram;  // cluster size -> number of codes
  std::vector<Index> largest;                          // top-N codes by size, ties by index
  std::vector<std::uint64_t> freq_mass;                // per code
  double size_entropy_bits = 0.0;                      // of p_j = size_j / V
  double mean_size = 0.0;
  std::size_t max_size = 0;
};

inline ClusterStats cluster_stats(const VocabMapping& map, const Vocabulary& vocab,
                                  std::size_t top_n = 10) {
  detail::check_vocab(map, vocab);
  ClusterStats s;
  s.vocab = map.vocab_size();
  s.codes = map.num_codes();
  s.freq_mass.assign(s.codes, 0);
  for (std::size_t i = 0; i < s.vocab; ++i)
    s.freq_mass[static_cast<std::size_t>(map.code(i))] += vocab.freq(static_cast<Index>(i));
  std::vector<Index> order(s.codes);
  for (std::size_t j = 0; j < s.codes; ++j) {
    const auto n = static_cast<std::size_t>(map.counts()[j]);
    ++s.size_histogram[n];
    if (n == 0) ++s.empty_codes;
    s.max_size = std::max(s.max_size, n);
    if (n > 0) {
      const double p = static_cast<double>(n) / static_cast<double>(s.vocab);
      s.size_entropy_bits -= p * std::log2(p);
    }
    order[j] = static_cast<Index>(j);
  }
  s.mean_size = static_cast<double>(s.vocab) / static_cast<double>(s.codes);
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return map.counts()[a] > map.counts()[b]; });
  order.resize(std::min(top_n, order.size()));
  s.largest = std::move(order);
  return s;
}

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + '"';
}

}  // namespace detail

// Text: `code<TAB>size<TAB>freq_mass<TAB>member<TAB>member...`.
// CSV: `code,size,freq_mass,top_members` with members space-joined.
// At most max_members members are listed per code (0 = all).
inline void write_cluster_table(std::ostream& out, const std::vector<CodeClusterView>& views,
                                const Vocabulary& vocab, std::size_t max_members, bool csv) {
  if (csv) out << "code,size,freq_mass,top_members\n";
  for (const auto& v : views) {
    const std::size_t shown = max_members == 0 ? v.members.size() : std::min(max_members, v.members.size());
    if (csv) {
      std::string joined;
      for (std::size_t i = 0; i < shown; ++i) joined += (i ? " " : "") + vocab.token(v.members[i]);
      out << v.code << ',' << v.size << ',' << v.freq_mass << ',' << detail::csv_field(joined) << '\n';
    } else {
      out << v.code << '\t' << v.size << '\t' << v.freq_mass;
      for (std::size_t i = 0; i < shown; ++i) out << '\t' << vocab.token(v.members[i]);
      out << '\n';
    }
  }
}

inline void write_cluster_stats(std::ostream& out, const ClusterStats& s) {
  out << "vocab\t" << s.vocab << "\ncodes\t" << s.codes << "\nempty_codes\t" << s.empty_codes
      << "\nmean_size\t" << s.mean_size << "\nmax_size\t" << s.max_size
      << "\nsize_entropy_bits\t" << s.size_entropy_bits << "\nlargest";
  for (Index j : s.largest) out << '\t' << j;
  out << "\nsize_histogram\n";
  for (const auto& [size, n] : s.size_histogram) out << size << '\t' << n << '\n';
}

}  // namespace vqlogits
