#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <span>
#include <vector>

#include "vqlogits/bench/cost.hpp"
#include "vqlogits/errors.hpp"
#include "vqlogits/heads/output_head.hpp"
#include "vqlogits/rng.hpp"

namespace vqlogits {

struct LatencyStats {
  double median_ms = 0.0;
  double p10_ms = 0.0;
  double p90_ms = 0.0;
  std::vector<double> samples_ms;  // measured repetitions, warmups excluded

  static LatencyStats from_samples(std::vector<double> ms) {
    if (ms.empty()) throw ConfigError("no latency samples");
    LatencyStats s;
    s.samples_ms = ms;
    std::sort(ms.begin(), ms.end());
    const std::size_t n = ms.size();
    s.median_ms = n % 2 ? ms[n / 2] : 0.5 * (ms[n / 2 - 1] + ms[n / 2]);
    // Nearest-rank percentiles.
    auto rank = [&](double p) {
      const auto r = static_cast<std::size_t>(std::ceil(p * static_cast<double>(n)));
      return ms[std::clamp<std::size_t>(r, 1, n) - 1];
    };
    s.p10_ms = rank(0.10);
    s.p90_ms = rank(0.90);
    return s;
  }
};

// Hidden states shared by every head timed in a session: N(0, 1) entries,
// a pure function of (rows, d_model, seed).
inline TensorF probe_hidden(std::size_t rows, std::size_t d_model, std::uint64_t seed) {
  Rng rng(seed);
  TensorF h({rows, d_model});
  for (float& v : h.data()) v = static_cast<float>(rng.normal(0.0, 1.0));
  return h;
}

// Vocabulary-wide logits written into a caller-owned buffer, so repeated runs
// measure arithmetic and memory traffic rather than allocation. The VQ path
// does both h C^T and the scatter.
class LogitKernel {
 public:
  explicit LogitKernel(OutputHead<float> head) : head_(std::move(head)), spec_(spec_of(head_)) {}

  // Random weights with the given shape.
  static LogitKernel random(const HeadSpec& s, Rng& rng) {
    validate_spec(s);
    switch (s.kind) {
      case HeadKind::kFull: return LogitKernel(make_full_head<float>(s.vocab, s.d_model, rng));
      case HeadKind::kVQ: {
        std::vector<Index> codes(s.vocab);
        for (Index& c : codes) c = static_cast<Index>(rng.below(s.k_or_rank));
        return LogitKernel(
            make_vq_head<float>(VocabMapping(std::move(codes), s.k_or_rank), s.d_model, rng));
      }
      case HeadKind::kLowRank:
        return LogitKernel(make_lowrank_head<float>(s.vocab, s.d_model, s.k_or_rank, rng));
      case HeadKind::kAdaptive:
        return LogitKernel(
            make_adaptive_head<float>(s.vocab, s.d_model, s.cutoffs, s.tail_factors, rng));
    }
    throw ConfigError("unhandled head kind");
  }

  const HeadSpec& spec() const { return spec_; }
  const OutputHead<float>& head() const { return head_; }

  void run(const TensorF& h, std::span<float> out) {
    const std::size_t m = h.rows(), v = spec_.vocab;
    if (h.cols() != spec_.d_model) throw DimensionError("kernel: h width does not match d_model");
    if (out.size() < m * v) throw DimensionError("kernel: output buffer too small");
    const auto em = static_cast<Eigen::Index>(m), ev = static_cast<Eigen::Index>(v);
    MatrixMap<float> o(out.data(), em, ev);
    const auto H = as_matrix(h);
    switch (spec_.kind) {
      case HeadKind::kFull:
        o.noalias() = H * as_matrix(std::get<FullHead<float>>(head_).embeddings).transpose();
        return;
      case HeadKind::kVQ: {
        const auto& vq = std::get<VQHead<float>>(head_);
        const std::size_t k = vq.codebook.size();
        scratch_.resize(m * k);
        MatrixMap<float> lc(scratch_.data(), em, static_cast<Eigen::Index>(k));
        lc.noalias() = H * as_matrix(vq.codebook.vectors).transpose();
        const Index* code = vq.mapping.codes().data();
        for (std::size_t r = 0; r < m; ++r) {
          const float* src = scratch_.data() + r * k;
          float* dst = out.data() + r * v;
          for (std::size_t i = 0; i < v; ++i) dst[i] = src[code[i]];
        }
        return;
      }
      case HeadKind::kLowRank: {
        const auto& lr = std::get<LowRankHead<float>>(head_);
        scratch_.resize(m * lr.rank());
        MatrixMap<float> t(scratch_.data(), em, static_cast<Eigen::Index>(lr.rank()));
        t.noalias() = H * as_matrix(lr.w1);
        o.noalias() = t * as_matrix(lr.w2);
        return;
      }
      case HeadKind::kAdaptive: {
        const TensorF lp = adaptive_log_probs(std::get<AdaptiveHead<float>>(head_), h);
        std::copy(lp.data().begin(), lp.data().end(), out.begin());
        return;
      }
    }
  }

 private:
  OutputHead<float> head_;
  HeadSpec spec_;
  std::vector<float> scratch_;
};

// Times every kernel on the same h. Repetitions are interleaved across
// kernels so drift in machine state hits all of them alike; the first
// `warmup` rounds are discarded.
inline std::vector<LatencyStats> time_kernels(std::vector<LogitKernel*> kernels,
                                              const TensorF& h, std::size_t repetitions,
                                              std::size_t warmup = 3) {
  if (repetitions < 5) throw ConfigError("timing needs at least 5 repetitions");
  std::size_t widest = 0;
  for (auto* k : kernels) widest = std::max(widest, k->spec().vocab);
  std::vector<float> out(h.rows() * widest);
  std::vector<std::vector<double>> samples(kernels.size());
  for (std::size_t rep = 0; rep < warmup + repetitions; ++rep) {
    for (std::size_t i = 0; i < kernels.size(); ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      kernels[i]->run(h, out);
      const auto t1 = std::chrono::steady_clock::now();
      if (rep >= warmup) samples[i].push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
  }
  std::vector<LatencyStats> stats;
  for (auto& s : samples) stats.push_back(LatencyStats::from_samples(std::move(s)));
  return stats;
}

// Single-head convenience: random weights and h drawn from `seed`.
inline LatencyStats time_logits(const HeadSpec& s, std::size_t batch, std::size_t seq,
                                std::size_t repetitions, std::uint64_t seed) {
  Rng rng(seed);
  LogitKernel k = LogitKernel::random(s, rng);
  const TensorF h = probe_hidden(batch * seq, s.d_model, seed);
  return time_kernels({&k}, h, repetitions).front();
}

}  // namespace vqlogits
