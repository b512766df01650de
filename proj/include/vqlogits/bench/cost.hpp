#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "vqlogits/errors.hpp"
#include "vqlogits/heads/output_head.hpp"

namespace vqlogits {

enum class Precision { kFp16, kFp32 };

inline std::size_t bytes_per_element(Precision p) { return p == Precision::kFp16 ? 2 : 4; }

inline std::string precision_name(Precision p) { return p == Precision::kFp16 ? "fp16" : "fp32"; }

inline Precision parse_precision(const std::string& s) {
  if (s == "fp16") return Precision::kFp16;
  if (s == "fp32") return Precision::kFp32;
  throw ConfigError("unknown precision '" + s + "'");
}

// Output-layer shape without the weights, so very large heads (V = 267,735)
// can be costed without allocating them. k_or_rank is K for VQ, d_rank for
// low-rank and the shortlist size for adaptive; Full ignores it.
struct HeadSpec {
  HeadKind kind = HeadKind::kFull;
  std::size_t vocab = 0;
  std::size_t d_model = 0;
  std::size_t k_or_rank = 0;
  std::vector<std::size_t> cutoffs;       // adaptive only
  std::vector<std::size_t> tail_factors;  // adaptive only
};

// Adaptive layout used when only a shortlist size is given: two tail
// clusters, the first a quarter of the remaining ids, projections d/2, d/4.
inline HeadSpec adaptive_spec(std::size_t vocab, std::size_t d_model, std::size_t shortlist) {
  if (shortlist == 0 || shortlist + 2 > vocab) {
    throw ConfigError("adaptive shortlist must leave at least two tail ids");
  }
  const std::size_t mid = shortlist + std::max<std::size_t>(1, (vocab - shortlist) / 4);
  return {HeadKind::kAdaptive, vocab, d_model, shortlist, {shortlist, mid, vocab}, {2, 4}};
}

inline void validate_spec(const HeadSpec& s) {
  if (s.vocab == 0 || s.d_model == 0) throw ConfigError("head spec needs V > 0 and d_model > 0");
  switch (s.kind) {
    case HeadKind::kFull: return;
    case HeadKind::kVQ:
      if (s.k_or_rank == 0) throw ConfigError("VQ head needs K >= 1");
      return;
    case HeadKind::kLowRank:
      if (s.k_or_rank == 0 || s.k_or_rank > std::min(s.d_model, s.vocab)) {
        throw ConfigError("low-rank head needs 1 <= d_rank <= min(d_model, V)");
      }
      return;
    case HeadKind::kAdaptive:
      validate_adaptive(s.cutoffs, s.tail_factors, s.vocab, s.d_model);
      return;
  }
}

template <typename T>
HeadSpec spec_of(const OutputHead<T>& head) {
  HeadSpec s;
  s.kind = head_kind(head);
  s.vocab = head_vocab_size(head);
  std::visit(
      [&](const auto& hd) {
        using H = std::decay_t<decltype(hd)>;
        if constexpr (std::is_same_v<H, FullHead<T>>) {
          s.d_model = hd.embeddings.cols();
        } else if constexpr (std::is_same_v<H, VQHead<T>>) {
          s.d_model = hd.codebook.dim();
          s.k_or_rank = hd.codebook.size();
        } else if constexpr (std::is_same_v<H, LowRankHead<T>>) {
          s.d_model = hd.w1.rows();
          s.k_or_rank = hd.rank();
        } else {
          s.d_model = hd.head_proj.rows();
          s.k_or_rank = hd.shortlist();
          s.cutoffs = hd.cutoffs;
          s.tail_factors = hd.tail_factors;
        }
      },
      head);
  return s;
}

inline std::size_t spec_param_count(const HeadSpec& s) {
  validate_spec(s);
  switch (s.kind) {
    case HeadKind::kFull: return full_param_count(s.d_model, s.vocab);
    case HeadKind::kVQ: return vq_param_count(s.d_model, s.k_or_rank);
    case HeadKind::kLowRank: return lowrank_param_count(s.d_model, s.k_or_rank, s.vocab);
    case HeadKind::kAdaptive: return adaptive_param_count(s.d_model, s.cutoffs, s.tail_factors);
  }
  return 0;
}

// Logit FLOPs for B*S positions, one multiply-add = 2 FLOPs. The VQ scatter
// is a pure copy and counts 0. Adaptive counts every matrix needed to score
// the whole vocabulary.
inline std::uint64_t flops_logits(const HeadSpec& s, std::size_t batch, std::size_t seq) {
  if (batch == 0 || seq == 0) throw ConfigError("flops_logits needs positive B and S");
  const std::uint64_t m = static_cast<std::uint64_t>(batch) * seq;
  const std::uint64_t d = s.d_model, v = s.vocab, k = s.k_or_rank;
  switch (s.kind) {
    case HeadKind::kFull: validate_spec(s); return 2 * m * d * v;
    case HeadKind::kVQ: validate_spec(s); return 2 * m * d * k;
    case HeadKind::kLowRank: validate_spec(s); return 2 * m * k * (d + v);
    case HeadKind::kAdaptive: return 2 * m * spec_param_count(s);
  }
  return 0;
}

struct MemoryReport {
  std::size_t params = 0;
  Precision precision = Precision::kFp16;
  std::uint64_t weight_bytes = 0;
  std::uint64_t mapping_bytes = 0;  // 32-bit codes, VQ only

  double weight_mb() const { return static_cast<double>(weight_bytes) / 1e6; }
  double mapping_mb() const { return static_cast<double>(mapping_bytes) / 1e6; }
  // Footprint as size tables usually quote it: the parameter count cut to
  // 0.01 M first (786,432 -> 0.78 M), then times bytes per element.
  double weight_mb_truncated_params() const {
    return std::floor(static_cast<double>(params) / 1e4) / 100.0 *
           static_cast<double>(bytes_per_element(precision));
  }
};

inline MemoryReport memory_report(const HeadSpec& s, Precision precision) {
  MemoryReport r;
  r.params = spec_param_count(s);
  r.precision = precision;
  r.weight_bytes = static_cast<std::uint64_t>(r.params) * bytes_per_element(precision);
  r.mapping_bytes = s.kind == HeadKind::kVQ ? static_cast<std::uint64_t>(s.vocab) * 4 : 0;
  return r;
}

}  // namespace vqlogits
