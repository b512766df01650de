#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "vqlogits/errors.hpp"
#include "vqlogits/heads/vq.hpp"
#include "vqlogits/numerics/ops.hpp"
#include "vqlogits/numerics/parameter.hpp"
#include "vqlogits/rng.hpp"

namespace vqlogits {

// Standard output layer. Stored as V x d_model output embeddings (rows are
// E_out), so logits are h * embeddings^T and the matrix can be shared with
// the input embedding table or handed to k-means unchanged.
template <typename T>
struct FullHead {
  Tensor<T> embeddings;
};

// W_out ~ W1 W2 through an inner dimension d_rank.
template <typename T>
struct LowRankHead {
  Tensor<T> w1;  // d_model x d_rank
  Tensor<T> w2;  // d_rank x V

  std::size_t rank() const { return w1.cols(); }
};

// Frequency-partitioned softmax: a shortlist over ids [0, cutoffs[0]) plus one
// gate logit per tail cluster; tail cluster t covers
// [cutoffs[t], cutoffs[t+1]) through a d_model / tail_factors[t] projection.
template <typename T>
struct AdaptiveHead {
  std::vector<std::size_t> cutoffs;
  std::vector<std::size_t> tail_factors;
  Tensor<T> head_proj;               // d_model x (cutoffs[0] + n_tails)
  std::vector<Tensor<T>> tail_down;  // d_model x (d_model / factor)
  std::vector<Tensor<T>> tail_out;   // (d_model / factor) x cluster size

  std::size_t num_tails() const { return cutoffs.size() - 1; }
  std::size_t shortlist() const { return cutoffs.front(); }
  std::size_t vocab_size() const { return cutoffs.back(); }
};

template <typename T>
using OutputHead = std::variant<FullHead<T>, VQHead<T>, LowRankHead<T>, AdaptiveHead<T>>;

enum class HeadKind { kFull, kVQ, kLowRank, kAdaptive };

inline std::string head_kind_name(HeadKind kind) {
  switch (kind) {
    case HeadKind::kFull: return "full";
    case HeadKind::kVQ: return "vq";
    case HeadKind::kLowRank: return "lowrank";
    case HeadKind::kAdaptive: return "adaptive";
  }
  return "?";
}

inline HeadKind parse_head_kind(const std::string& name) {
  if (name == "full") return HeadKind::kFull;
  if (name == "vq") return HeadKind::kVQ;
  if (name == "lowrank") return HeadKind::kLowRank;
  if (name == "adaptive") return HeadKind::kAdaptive;
  throw ConfigError("unknown head kind '" + name + "'");
}

template <typename T>
HeadKind head_kind(const OutputHead<T>& head) {
  return static_cast<HeadKind>(head.index());
}

// ---------------------------------------------------------------------------
// Construction

namespace detail {

template <typename T>
Tensor<T> normal_init(Shape shape, Rng& rng, double stddev = 0.02) {
  Tensor<T> t(std::move(shape), true);
  for (T& v : t.data()) v = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

}  // namespace detail

template <typename T>
FullHead<T> make_full_head(std::size_t vocab, std::size_t d_model, Rng& rng) {
  return {detail::normal_init<T>({vocab, d_model}, rng)};
}

template <typename T>
VQHead<T> make_vq_head(VocabMapping mapping, std::size_t d_model, Rng& rng,
                       bool trainable = true) {
  Codebook<T> cb{detail::normal_init<T>({mapping.num_codes(), d_model}, rng), trainable};
  return {std::move(cb), std::move(mapping), true};
}

template <typename T>
LowRankHead<T> make_lowrank_head(std::size_t vocab, std::size_t d_model, std::size_t rank,
                                 Rng& rng) {
  if (rank == 0 || rank > std::min(d_model, vocab)) {
    throw ConfigError("low-rank head needs 1 <= d_rank <= min(d_model, V)");
  }
  return {detail::normal_init<T>({d_model, rank}, rng),
          detail::normal_init<T>({rank, vocab}, rng)};
}

inline void validate_adaptive(const std::vector<std::size_t>& cutoffs,
                              const std::vector<std::size_t>& tail_factors, std::size_t vocab,
                              std::size_t d_model) {
  if (cutoffs.empty() || cutoffs.back() != vocab) {
    throw ConfigError("adaptive cutoffs must end at V=" + std::to_string(vocab));
  }
  for (std::size_t i = 0; i < cutoffs.size(); ++i) {
    if (cutoffs[i] == 0 || (i > 0 && cutoffs[i] <= cutoffs[i - 1])) {
      throw ConfigError("adaptive cutoffs must be positive and strictly ascending");
    }
  }
  if (tail_factors.size() != cutoffs.size() - 1) {
    throw ConfigError("adaptive head needs one projection factor per tail cluster");
  }
  for (std::size_t f : tail_factors) {
    if (f < 1 || d_model / f < 1) throw ConfigError("adaptive projection factor out of range");
  }
}

template <typename T>
AdaptiveHead<T> make_adaptive_head(std::size_t vocab, std::size_t d_model,
                                   std::vector<std::size_t> cutoffs,
                                   std::vector<std::size_t> tail_factors, Rng& rng) {
  validate_adaptive(cutoffs, tail_factors, vocab, d_model);
  AdaptiveHead<T> head;
  head.cutoffs = std::move(cutoffs);
  head.tail_factors = std::move(tail_factors);
  head.head_proj =
      detail::normal_init<T>({d_model, head.shortlist() + head.num_tails()}, rng);
  for (std::size_t t = 0; t < head.num_tails(); ++t) {
    const std::size_t inner = d_model / head.tail_factors[t];
    head.tail_down.push_back(detail::normal_init<T>({d_model, inner}, rng));
    head.tail_out.push_back(
        detail::normal_init<T>({inner, head.cutoffs[t + 1] - head.cutoffs[t]}, rng));
  }
  return head;
}

// ---------------------------------------------------------------------------
// Logits

// L = h W_out with W_out = embeddings^T.
template <typename T>
Tensor<T> full_logits(Tape<T>& tape, const Tensor<T>& embeddings, const Tensor<T>& h) {
  return matmul_bt(tape, h, embeddings);
}

// (h W1) W2, in that association order.
template <typename T>
Tensor<T> lowrank_logits(Tape<T>& tape, const LowRankHead<T>& head, const Tensor<T>& h) {
  return matmul(tape, matmul(tape, h, head.w1), head.w2);
}

// Exact negative log-likelihood of the shortlist + gated-tail distribution.
template <typename T>
Tensor<T> adaptive_loss(Tape<T>& tape, const AdaptiveHead<T>& head, const Tensor<T>& h,
                        std::span<const Index> targets) {
  const std::size_t m = h.rows();
  if (targets.size() != m) throw DimensionError("adaptive_loss: target count mismatch");
  const std::size_t shortlist = head.shortlist();
  std::vector<Index> head_targets(m);
  std::vector<std::vector<Index>> tail_rows(head.num_tails()), tail_targets(head.num_tails());
  for (std::size_t r = 0; r < m; ++r) {
    const auto t = static_cast<std::size_t>(targets[r]);
    if (targets[r] < 0 || t >= head.vocab_size()) {
      throw IndexError("adaptive_loss: target " + std::to_string(targets[r]) + " out of range");
    }
    if (t < shortlist) {
      head_targets[r] = static_cast<Index>(t);
      continue;
    }
    std::size_t c = 0;
    while (t >= head.cutoffs[c + 1]) ++c;
    head_targets[r] = static_cast<Index>(shortlist + c);
    tail_rows[c].push_back(static_cast<Index>(r));
    tail_targets[c].push_back(static_cast<Index>(t - head.cutoffs[c]));
  }
  Tensor<T> total = cross_entropy_from_logits(tape, matmul(tape, h, head.head_proj),
                                              std::span<const Index>(head_targets),
                                              Reduction::kSum);
  for (std::size_t c = 0; c < head.num_tails(); ++c) {
    if (tail_rows[c].empty()) continue;
    Tensor<T> hs = gather_rows(tape, h, std::span<const Index>(tail_rows[c]));
    Tensor<T> logits = matmul(tape, matmul(tape, hs, head.tail_down[c]), head.tail_out[c]);
    total = add(tape, total,
                cross_entropy_from_logits(tape, logits, std::span<const Index>(tail_targets[c]),
                                          Reduction::kSum));
  }
  return scale(tape, total, T(1) / T(m));
}

// Full [m x V] matrix of log-probabilities under the adaptive factorization.
template <typename T>
Tensor<T> adaptive_log_probs(const AdaptiveHead<T>& head, const Tensor<T>& h) {
  Tape<T> off(false);
  const std::size_t m = h.rows(), v = head.vocab_size(), shortlist = head.shortlist();
  Tensor<T> out({m, v});
  auto log_softmax_into = [](const Tensor<T>& logits, std::size_t r, T* dst) {
    const std::size_t n = logits.cols();
    const auto norm = detail::softmax_row(logits.ptr() + r * n, dst, n);
    for (std::size_t c = 0; c < n; ++c) dst[c] = (logits[r * n + c] - norm.max) - norm.rest;
  };
  Tensor<T> head_logits = matmul(off, h, head.head_proj);
  std::vector<T> head_lp(head_logits.cols());
  std::vector<Tensor<T>> tail_logits;
  for (std::size_t c = 0; c < head.num_tails(); ++c) {
    tail_logits.push_back(matmul(off, matmul(off, h, head.tail_down[c]), head.tail_out[c]));
  }
  for (std::size_t r = 0; r < m; ++r) {
    log_softmax_into(head_logits, r, head_lp.data());
    T* row = out.ptr() + r * v;
    std::copy_n(head_lp.begin(), shortlist, row);
    for (std::size_t c = 0; c < head.num_tails(); ++c) {
      T* dst = row + head.cutoffs[c];
      log_softmax_into(tail_logits[c], r, dst);
      const std::size_t n = head.cutoffs[c + 1] - head.cutoffs[c];
      for (std::size_t i = 0; i < n; ++i) dst[i] += head_lp[shortlist + c];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Uniform interface over the variant

template <typename T>
Tensor<T> head_loss(Tape<T>& tape, const OutputHead<T>& head, const Tensor<T>& h,
                    std::span<const Index> targets) {
  return std::visit(
      [&](const auto& hd) -> Tensor<T> {
        using H = std::decay_t<decltype(hd)>;
        if constexpr (std::is_same_v<H, FullHead<T>>) {
          return cross_entropy_from_logits(tape, full_logits(tape, hd.embeddings, h), targets);
        } else if constexpr (std::is_same_v<H, VQHead<T>>) {
          return hd.fused ? vq_loss_fused(tape, hd.codebook, hd.mapping, h, targets)
                          : vq_loss_naive(tape, hd.codebook, hd.mapping, h, targets);
        } else if constexpr (std::is_same_v<H, LowRankHead<T>>) {
          return cross_entropy_from_logits(tape, lowrank_logits(tape, hd, h), targets);
        } else {
          return adaptive_loss(tape, hd, h, targets);
        }
      },
      head);
}

// Vocabulary-wide scores whose softmax is the head's distribution (for the
// adaptive head these are the log-probabilities themselves).
template <typename T>
Tensor<T> head_logits(Tape<T>& tape, const OutputHead<T>& head, const Tensor<T>& h) {
  return std::visit(
      [&](const auto& hd) -> Tensor<T> {
        using H = std::decay_t<decltype(hd)>;
        if constexpr (std::is_same_v<H, FullHead<T>>) {
          return full_logits(tape, hd.embeddings, h);
        } else if constexpr (std::is_same_v<H, VQHead<T>>) {
          return scatter_logits(tape, codebook_logits(tape, hd.codebook, h), hd.mapping);
        } else if constexpr (std::is_same_v<H, LowRankHead<T>>) {
          return lowrank_logits(tape, hd, h);
        } else {
          return adaptive_log_probs(hd, h);
        }
      },
      head);
}

template <typename T>
std::size_t head_vocab_size(const OutputHead<T>& head) {
  return std::visit(
      [](const auto& hd) -> std::size_t {
        using H = std::decay_t<decltype(hd)>;
        if constexpr (std::is_same_v<H, FullHead<T>>) return hd.embeddings.rows();
        else if constexpr (std::is_same_v<H, VQHead<T>>) return hd.mapping.vocab_size();
        else if constexpr (std::is_same_v<H, LowRankHead<T>>) return hd.w2.cols();
        else return hd.vocab_size();
      },
      head);
}

// Every parameter tensor of the head, including frozen ones.
template <typename T>
std::vector<NamedParam<T>> head_parameters(const OutputHead<T>& head) {
  return std::visit(
      [](const auto& hd) -> std::vector<NamedParam<T>> {
        using H = std::decay_t<decltype(hd)>;
        if constexpr (std::is_same_v<H, FullHead<T>>) {
          return {{"head.embeddings", hd.embeddings, true}};
        } else if constexpr (std::is_same_v<H, VQHead<T>>) {
          return {{"head.codebook", hd.codebook.vectors, true}};
        } else if constexpr (std::is_same_v<H, LowRankHead<T>>) {
          return {{"head.w1", hd.w1, true}, {"head.w2", hd.w2, true}};
        } else {
          std::vector<NamedParam<T>> out{{"head.proj", hd.head_proj, true}};
          for (std::size_t t = 0; t < hd.num_tails(); ++t) {
            out.push_back({"head.tail" + std::to_string(t) + ".down", hd.tail_down[t], true});
            out.push_back({"head.tail" + std::to_string(t) + ".out", hd.tail_out[t], true});
          }
          return out;
        }
      },
      head);
}

// ---------------------------------------------------------------------------
// Parameter accounting

inline std::size_t full_param_count(std::size_t d_model, std::size_t vocab) {
  return d_model * vocab;
}

inline std::size_t vq_param_count(std::size_t d_model, std::size_t codes) {
  return d_model * codes;
}

inline std::size_t lowrank_param_count(std::size_t d_model, std::size_t rank, std::size_t vocab) {
  return d_model * rank + rank * vocab;
}

inline std::size_t adaptive_param_count(std::size_t d_model,
                                        const std::vector<std::size_t>& cutoffs,
                                        const std::vector<std::size_t>& tail_factors) {
  const std::size_t tails = cutoffs.size() - 1;
  std::size_t n = d_model * (cutoffs.front() + tails);
  for (std::size_t t = 0; t < tails; ++t) {
    const std::size_t inner = d_model / tail_factors[t];
    n += d_model * inner + inner * (cutoffs[t + 1] - cutoffs[t]);
  }
  return n;
}

// Output-layer parameter count. The VQ mapping is integer metadata and is
// reported separately (see the bench module's memory report).
template <typename T>
std::size_t head_param_count(const OutputHead<T>& head) {
  return std::visit(
      [](const auto& hd) -> std::size_t {
        using H = std::decay_t<decltype(hd)>;
        if constexpr (std::is_same_v<H, FullHead<T>>) {
          return full_param_count(hd.embeddings.cols(), hd.embeddings.rows());
        } else if constexpr (std::is_same_v<H, VQHead<T>>) {
          return vq_param_count(hd.codebook.dim(), hd.codebook.size());
        } else if constexpr (std::is_same_v<H, LowRankHead<T>>) {
          return lowrank_param_count(hd.w1.rows(), hd.rank(), hd.w2.cols());
        } else {
          return adaptive_param_count(hd.head_proj.rows(), hd.cutoffs, hd.tail_factors);
        }
      },
      head);
}

}  // namespace vqlogits
