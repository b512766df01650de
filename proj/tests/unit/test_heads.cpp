#include <gtest/gtest.h>

#include <Eigen/SVD>
#include <cmath>
#include <numeric>

#include "test_util.hpp"
#include "vqlogits/heads/output_head.hpp"
#include "vqlogits/numerics/gradcheck.hpp"

using namespace vqlogits;
using vqlogits::testing::naive_matmul;
using vqlogits::testing::random_ids;
using vqlogits::testing::random_tensor;

namespace {

// Random mapping that leaves some codes empty: codes are drawn from a random
// subset of [0, K).
VocabMapping sparse_mapping(std::size_t v, std::size_t k, Rng& rng) {
  std::vector<Index> live;
  for (std::size_t j = 0; j < k; ++j)
    if (rng.uniform() < 0.6) live.push_back(static_cast<Index>(j));
  if (live.empty()) live.push_back(static_cast<Index>(rng.below(k)));
  std::vector<Index> codes(v);
  for (Index& c : codes) c = live[rng.below(live.size())];
  return VocabMapping(std::move(codes), k);
}

Codebook<double> random_codebook(std::size_t k, std::size_t d, Rng& rng) {
  return {random_tensor<double>({k, d}, rng), true};
}

std::vector<double> values(const TensorD& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(FullLogits, OneHotSelectsColumnOfWout) {
  Rng rng(1);
  const std::size_t v = 6, d = 4;
  TensorD emb = random_tensor<double>({v, d}, rng, 1.0, false);
  Tape<double> off(false);
  for (std::size_t k = 0; k < d; ++k) {
    TensorD h({1, d});
    h[k] = 1.0;
    TensorD l = full_logits(off, emb, h);
    for (std::size_t i = 0; i < v; ++i) EXPECT_EQ(l[i], emb.at(i, k));
  }
}

TEST(FullLogits, HandInstanceMatchesTripleLoop) {
  // d=2, V=3. W_out = [[1, 2, 3], [4, 5, 6]], stored transposed.
  TensorD emb({3, 2}, {1, 4, 2, 5, 3, 6});
  TensorD w_out({2, 3}, {1, 2, 3, 4, 5, 6});
  TensorD h({2, 2}, {0.5, -1.0, 2.0, 0.25});
  Tape<double> off(false);
  EXPECT_EQ(values(full_logits(off, emb, h)), naive_matmul(h, w_out));
  EXPECT_EQ(values(full_logits(off, emb, h)), (std::vector<double>{-3.5, -4, -4.5, 3, 5.25, 7.5}));
}

TEST(FullLogits, GradientCheck) {
  Rng rng(2);
  TensorD emb = random_tensor<double>({7, 5}, rng), h = random_tensor<double>({3, 5}, rng);
  const auto t = random_ids(3, 7, rng);
  auto report = finite_difference_check(
      [&](Tape<double>& tape) { return cross_entropy_from_logits(tape, full_logits(tape, emb, h), t); },
      {emb, h});
  EXPECT_LE(report.max_rel_error, 1e-6);
}

TEST(CodebookLogits, OrthogonalCodes) {
  // Orthogonal rows with distinct norms.
  TensorD c({3, 3}, {2, 0, 0, 0, 0.5, 0, 0, 0, 3});
  Codebook<double> cb{c, true};
  Tape<double> off(false);
  for (std::size_t j = 0; j < 3; ++j) {
    TensorD h({1, 3});
    double norm2 = 0;
    for (std::size_t k = 0; k < 3; ++k) norm2 += c.at(j, k) * c.at(j, k);
    for (std::size_t k = 0; k < 3; ++k) h[k] = c.at(j, k) / norm2;
    TensorD lc = codebook_logits(off, cb, h);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_DOUBLE_EQ(lc[k], k == j ? 1.0 : 0.0);
  }
}

TEST(CodebookLogits, EqualsFullLogitsAndNaiveOracle) {
  Rng rng(3);
  Tape<double> off(false);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 1 + rng.below(9), k = 1 + rng.below(20), d = 1 + rng.below(12);
    Codebook<double> cb = random_codebook(k, d, rng);
    TensorD h = random_tensor<double>({m, d}, rng);
    TensorD lc = codebook_logits(off, cb, h);
    EXPECT_EQ(values(lc), values(full_logits(off, cb.vectors, h)));
    TensorD ct({d, k});
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t p = 0; p < d; ++p) ct.at(p, j) = cb.vectors.at(j, p);
    const auto ref = naive_matmul(h, ct);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(lc[i], ref[i], 1e-12);
  }
}

TEST(ScatterLogits, IdentityAndDefinitional) {
  Tape<double> off(false);
  TensorD lc({1, 3}, {0.1, 0.2, 0.3});
  EXPECT_EQ(values(scatter_logits(off, lc, VocabMapping::identity(3))), values(lc));
  EXPECT_EQ(values(scatter_logits(off, lc, VocabMapping({0, 1, 1, 2, 0}, 3))),
            (std::vector<double>{0.1, 0.2, 0.2, 0.3, 0.1}));
}

TEST(ScatterLogits, MatchesLoopOracle) {
  Rng rng(4);
  Tape<double> off(false);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 1 + rng.below(6), k = 1 + rng.below(10), v = 1 + rng.below(40);
    TensorD lc = random_tensor<double>({m, k}, rng, 1.0, false);
    VocabMapping map(random_ids(v, k, rng), k);
    TensorD lv = scatter_logits(off, lc, map);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t i = 0; i < v; ++i)
        EXPECT_EQ(lv.at(r, i), lc.at(r, static_cast<std::size_t>(map.code(i))));
  }
}

TEST(ScatterLogits, MappingSizeMismatchIsDimensionError) {
  Tape<double> off(false);
  EXPECT_THROW(scatter_logits(off, TensorD({1, 3}), VocabMapping({0, 1}, 2)), DimensionError);
}

TEST(VqLossFused, MatchesNaiveOnHandInstances) {
  Rng rng(5);
  Tape<double> off(false);
  for (int trial = 0; trial < 50; ++trial) {
    Codebook<double> cb = random_codebook(5, 6, rng);
    VocabMapping map(random_ids(23, 5, rng), 5);
    TensorD h = random_tensor<double>({7, 6}, rng);
    const auto t = random_ids(7, 23, rng);
    EXPECT_NEAR(vq_loss_fused(off, cb, map, h, t).item(), vq_loss_naive(off, cb, map, h, t).item(),
                1e-10);
  }
}

TEST(VqLossFused, IdentityMappingEqualsFullSoftmaxExactly) {
  Rng rng(6);
  Tape<double> off(false);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t v = 2 + rng.below(30), d = 1 + rng.below(8), m = 1 + rng.below(8);
    Codebook<double> cb = random_codebook(v, d, rng);
    TensorD h = random_tensor<double>({m, d}, rng);
    const auto t = random_ids(m, v, rng);
    EXPECT_EQ(vq_loss_fused(off, cb, VocabMapping::identity(v), h, t).item(),
              cross_entropy_from_logits(off, full_logits(off, cb.vectors, h), t).item());
  }
}

TEST(VqLossFused, SingleCodeGivesLogV) {
  Rng rng(7);
  Tape<double> off(false);
  for (std::size_t v : {1u, 2u, 17u, 1000u}) {
    Codebook<double> cb = random_codebook(1, 4, rng);
    VocabMapping map(std::vector<Index>(v, 0), 1);
    TensorD h = random_tensor<double>({5, 4}, rng, 10.0);
    const auto t = random_ids(5, v, rng);
    EXPECT_NEAR(vq_loss_fused(off, cb, map, h, t).item(), std::log(static_cast<double>(v)), 1e-12);
  }
}

TEST(VqLossFused, RandomizedAgreementWithEmptyCodes) {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t m = 1 + rng.below(16), k = 1 + rng.below(32), v = 1 + rng.below(128);
    const std::size_t d = 1 + rng.below(8);
    Codebook<double> cb = random_codebook(k, d, rng);
    VocabMapping map = sparse_mapping(v, k, rng);
    TensorD h = random_tensor<double>({m, d}, rng, 1.0, false);
    const auto t = random_ids(m, v, rng);

    Tape<double> fused;
    TensorD l_fused = vq_loss_fused(fused, cb, map, h, t);
    fused.backward(l_fused);
    const std::vector<double> g_fused(cb.vectors.grad().begin(), cb.vectors.grad().end());
    fused.clear();

    Tape<double> naive;
    TensorD l_naive = vq_loss_naive(naive, cb, map, h, t);
    naive.backward(l_naive);
    EXPECT_NEAR(l_fused.item(), l_naive.item(), 1e-10);
    for (std::size_t i = 0; i < g_fused.size(); ++i)
      EXPECT_NEAR(g_fused[i], cb.vectors.grad()[i], 1e-9);
    naive.clear();
  }
}

TEST(VqLossFused, GradientCheckBothPaths) {
  Rng rng(9);
  Codebook<double> cb = random_codebook(4, 5, rng);
  VocabMapping map({0, 1, 1, 3, 0, 3, 3, 1, 0}, 4);  // code 2 is empty
  TensorD h = random_tensor<double>({6, 5}, rng);
  const auto t = random_ids(6, 9, rng);
  for (bool fused : {true, false}) {
    auto report = finite_difference_check(
        [&](Tape<double>& tape) {
          return fused ? vq_loss_fused(tape, cb, map, h, t) : vq_loss_naive(tape, cb, map, h, t);
        },
        {cb.vectors, h});
    EXPECT_LE(report.max_rel_error, 1e-5) << (fused ? "fused" : "naive");
  }
}

TEST(VqLossFused, CodeGradientIsSumOfMemberGradients) {
  Rng rng(10);
  Codebook<double> cb = random_codebook(5, 4, rng);
  VocabMapping map(random_ids(20, 5, rng), 5);
  TensorD h = random_tensor<double>({3, 4}, rng, 1.0, false);
  const auto t = random_ids(3, 20, rng);
  Tape<double> tape;
  TensorD lc = codebook_logits(tape, cb, h);
  TensorD lv = scatter_logits(tape, lc, map);
  tape.backward(cross_entropy_from_logits(tape, lv, t));
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < 5; ++j) {
      double s = 0;
      for (std::size_t i = 0; i < 20; ++i)
        if (static_cast<std::size_t>(map.code(i)) == j) s += lv.grad()[r * 20 + i];
      EXPECT_NEAR(lc.grad()[r * 5 + j], s, 1e-15);
    }
}

TEST(VqLossFused, TargetOutOfRangeIsIndexError) {
  Tape<double> off(false);
  Codebook<double> cb{TensorD({2, 2}), true};
  const std::vector<Index> bad{3};
  EXPECT_THROW(vq_loss_fused(off, cb, VocabMapping({0, 1, 1}, 2), TensorD({1, 2}), bad), IndexError);
}

TEST(VqProbabilities, SharedCodesHaveEqualProbability) {
  Rng rng(11);
  Codebook<double> cb = random_codebook(4, 3, rng);
  VocabMapping map = sparse_mapping(30, 4, rng);
  TensorD h = random_tensor<double>({5, 3}, rng);
  TensorD p = vq_probabilities(cb, map, h);
  for (std::size_t r = 0; r < 5; ++r) {
    double row = 0;
    for (std::size_t i = 0; i < 30; ++i) {
      row += p.at(r, i);
      for (std::size_t i2 = 0; i2 < 30; ++i2) {
        if (map.code(i) == map.code(i2)) {
          EXPECT_EQ(p.at(r, i), p.at(r, i2));
        }
      }
    }
    EXPECT_NEAR(row, 1.0, 1e-12);
  }
}

TEST(VqProbabilities, ClusterMassMatchesSummationOracle) {
  Rng rng(12);
  Codebook<double> cb = random_codebook(6, 4, rng);
  VocabMapping map(random_ids(40, 6, rng), 6);
  TensorD h = random_tensor<double>({4, 4}, rng);
  TensorD p = vq_probabilities(cb, map, h);
  Tape<double> off(false);
  TensorD lc = codebook_logits(off, cb, h);
  for (std::size_t r = 0; r < 4; ++r) {
    double z = 0;
    for (std::size_t i = 0; i < 40; ++i) z += std::exp(lc.at(r, static_cast<std::size_t>(map.code(i))));
    for (std::size_t j = 0; j < 6; ++j) {
      double mass = 0;
      for (std::size_t i = 0; i < 40; ++i)
        if (static_cast<std::size_t>(map.code(i)) == j) mass += p.at(r, i);
      EXPECT_NEAR(mass, static_cast<double>(map.counts()[j]) * std::exp(lc.at(r, j)) / z, 1e-14);
    }
  }
}

TEST(VqProbabilities, IdentityMappingEqualsFullSoftmax) {
  Rng rng(13);
  Codebook<double> cb = random_codebook(12, 5, rng);
  TensorD h = random_tensor<double>({3, 5}, rng);
  Tape<double> off(false);
  EXPECT_EQ(values(vq_probabilities(cb, VocabMapping::identity(12), h)),
            values(row_softmax(off, codebook_logits(off, cb, h))));
}

TEST(HeadEquivalence, IdentityVqMatchesFullSharingTheMatrix) {
  Rng rng(14);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t v = 2 + rng.below(60), d = 1 + rng.below(16), m = 1 + rng.below(10);
    TensorD e = random_tensor<double>({v, d}, rng);
    TensorD h = random_tensor<double>({m, d}, rng);
    const auto t = random_ids(m, v, rng);
    OutputHead<double> full = FullHead<double>{e};
    OutputHead<double> vq = VQHead<double>{{e, true}, VocabMapping::identity(v), true};
    Tape<double> off(false);
    EXPECT_EQ(values(head_logits(off, full, h)), values(head_logits(off, vq, h)));
    EXPECT_EQ(head_loss(off, full, h, t).item(), head_loss(off, vq, h, t).item());

    OutputHead<float> full_f = FullHead<float>{e.cast<float>()};
    OutputHead<float> vq_f =
        VQHead<float>{{std::get<FullHead<float>>(full_f).embeddings, true}, VocabMapping::identity(v), true};
    Tape<float> off_f(false);
    const TensorF hf = h.cast<float>();
    EXPECT_NEAR(head_loss(off_f, full_f, hf, t).item(), head_loss(off_f, vq_f, hf, t).item(), 1e-6);
  }
}

TEST(LowRank, IdentityW1EqualsFullLogitsOfW2) {
  Rng rng(15);
  const std::size_t d = 4, v = 9;
  LowRankHead<double> head{TensorD({d, d}), random_tensor<double>({d, v}, rng)};
  for (std::size_t i = 0; i < d; ++i) head.w1.at(i, i) = 1.0;
  TensorD emb({v, d});
  for (std::size_t i = 0; i < v; ++i)
    for (std::size_t k = 0; k < d; ++k) emb.at(i, k) = head.w2.at(k, i);
  TensorD h = random_tensor<double>({5, d}, rng);
  Tape<double> off(false);
  TensorD a = lowrank_logits(off, head, h), b = full_logits(off, emb, h);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-14);
}

TEST(LowRank, LogitRankIsAtMostDRank) {
  Rng rng(16);
  Tape<double> off(false);
  for (std::size_t r : {1u, 2u, 3u}) {
    auto head = make_lowrank_head<double>(15, 8, r, rng);
    TensorD h = random_tensor<double>({12, 8}, rng);
    TensorD l = lowrank_logits(off, head, h);
    Eigen::JacobiSVD<RowMatrix<double>> svd(as_matrix(l));
    const auto& s = svd.singularValues();
    EXPECT_GT(s[static_cast<Eigen::Index>(r) - 1], 1e-8 * s[0]);
    for (Eigen::Index i = static_cast<Eigen::Index>(r); i < s.size(); ++i) EXPECT_LT(s[i], 1e-12 * s[0]);
  }
}

TEST(LowRank, GradientCheck) {
  Rng rng(17);
  LowRankHead<double> head{random_tensor<double>({5, 3}, rng), random_tensor<double>({3, 8}, rng)};
  TensorD h = random_tensor<double>({4, 5}, rng);
  const auto t = random_ids(4, 8, rng);
  auto report = finite_difference_check(
      [&](Tape<double>& tape) { return cross_entropy_from_logits(tape, lowrank_logits(tape, head, h), t); },
      {head.w1, head.w2, h});
  EXPECT_LE(report.max_rel_error, 1e-6);
}

TEST(LowRank, RankOutOfRangeIsConfigError) {
  Rng rng(18);
  EXPECT_THROW(make_lowrank_head<double>(10, 4, 5, rng), ConfigError);
  EXPECT_THROW(make_lowrank_head<double>(3, 8, 4, rng), ConfigError);
  EXPECT_THROW(make_lowrank_head<double>(10, 4, 0, rng), ConfigError);
}

TEST(Adaptive, SingleClusterIsFullSoftmax) {
  Rng rng(19);
  auto head = make_adaptive_head<double>(12, 6, {12}, {}, rng);
  TensorD h = random_tensor<double>({5, 6}, rng);
  const auto t = random_ids(5, 12, rng);
  Tape<double> off(false);
  TensorD emb({12, 6});
  for (std::size_t i = 0; i < 12; ++i)
    for (std::size_t k = 0; k < 6; ++k) emb.at(i, k) = head.head_proj.at(k, i);
  EXPECT_NEAR(adaptive_loss(off, head, h, t).item(),
              cross_entropy_from_logits(off, full_logits(off, emb, h), t).item(), 1e-14);
}

TEST(Adaptive, ProbabilitiesSumToOneAndMatchLoss) {
  Rng rng(20);
  auto head = make_adaptive_head<double>(50, 8, {10, 30, 50}, {2, 4}, rng);
  for (auto& w : head_parameters<double>(OutputHead<double>{head}))
    for (double& x : w.tensor.data()) x *= 50.0;  // sharpen away from uniform
  TensorD h = random_tensor<double>({6, 8}, rng);
  TensorD lp = adaptive_log_probs(head, h);
  for (std::size_t r = 0; r < 6; ++r) {
    double s = 0;
    for (std::size_t i = 0; i < 50; ++i) s += std::exp(lp.at(r, i));
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
  const auto t = random_ids(6, 50, rng);
  double nll = 0;
  for (std::size_t r = 0; r < 6; ++r) nll -= lp.at(r, static_cast<std::size_t>(t[r]));
  Tape<double> off(false);
  EXPECT_NEAR(adaptive_loss(off, head, h, t).item(), nll / 6.0, 1e-12);
}

TEST(Adaptive, ParamCountMatchesClosedForm) {
  Rng rng(21);
  auto head = make_adaptive_head<double>(50, 8, {10, 30, 50}, {2, 4}, rng);
  // shortlist 8*(10+2); tail0 8*4 + 4*20; tail1 8*2 + 2*20
  const std::size_t expected = 8 * 12 + (8 * 4 + 4 * 20) + (8 * 2 + 2 * 20);
  EXPECT_EQ(head_param_count(OutputHead<double>{head}), expected);
  EXPECT_EQ(count_elements(head_parameters(OutputHead<double>{head})), expected);
}

TEST(Adaptive, GradientCheck) {
  Rng rng(22);
  auto head = make_adaptive_head<double>(12, 4, {4, 8, 12}, {1, 2}, rng);
  for (auto& w : head_parameters<double>(OutputHead<double>{head}))
    for (double& x : w.tensor.data()) x *= 25.0;
  TensorD h = random_tensor<double>({8, 4}, rng);
  const std::vector<Index> t{0, 5, 11, 3, 9, 6, 2, 10};  // every cluster hit
  std::vector<TensorD> params{h};
  for (auto& w : head_parameters<double>(OutputHead<double>{head})) params.push_back(w.tensor);
  auto report = finite_difference_check(
      [&](Tape<double>& tape) { return adaptive_loss(tape, head, h, t); }, params);
  EXPECT_LE(report.max_rel_error, 1e-5);
}

TEST(Adaptive, BadCutoffsAreConfigErrors) {
  Rng rng(23);
  EXPECT_THROW(make_adaptive_head<double>(50, 8, {10, 30}, {2}, rng), ConfigError);
  EXPECT_THROW(make_adaptive_head<double>(50, 8, {30, 10, 50}, {2, 2}, rng), ConfigError);
  EXPECT_THROW(make_adaptive_head<double>(50, 8, {10, 50}, {2, 2}, rng), ConfigError);
  EXPECT_THROW(make_adaptive_head<double>(50, 8, {10, 50}, {16}, rng), ConfigError);
  EXPECT_THROW(make_adaptive_head<double>(50, 8, {10, 10, 50}, {2, 2}, rng), ConfigError);
}

TEST(HeadParamCount, ReferenceFigures) {
  EXPECT_EQ(vq_param_count(768, 1024), 786432u);
  EXPECT_EQ(vq_param_count(768, 2048), 1572864u);
  EXPECT_EQ(vq_param_count(768, 4096), 3145728u);
  const double full = static_cast<double>(full_param_count(768, 267735));
  EXPECT_EQ(full, 205620480.0);
  EXPECT_LE(std::abs(full / 1e6 - 205.2) / 205.2, 0.01);
  EXPECT_EQ(lowrank_param_count(768, 128, 267735), 768u * 128 + 128u * 267735);
}

TEST(HeadParamCount, VariantDispatch) {
  Rng rng(24);
  EXPECT_EQ(head_param_count(OutputHead<float>{make_full_head<float>(100, 16, rng)}), 1600u);
  EXPECT_EQ(head_param_count(OutputHead<float>{make_vq_head<float>(VocabMapping(random_ids(100, 8, rng), 8), 16, rng)}),
            128u);
  EXPECT_EQ(head_param_count(OutputHead<float>{make_lowrank_head<float>(100, 16, 4, rng)}),
            16u * 4 + 4u * 100);
}
