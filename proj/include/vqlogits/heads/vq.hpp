#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "vqlogits/heads/vocab_mapping.hpp"
#include "vqlogits/numerics/ops.hpp"
#include "vqlogits/numerics/tape.hpp"
#include "vqlogits/numerics/tensor.hpp"

namespace vqlogits {

// K x d_model prototype vectors shared by every token mapped to them.
template <typename T>
struct Codebook {
  Tensor<T> vectors;
  bool trainable = true;

  std::size_t size() const { return vectors.rows(); }
  std::size_t dim() const { return vectors.cols(); }
};

template <typename T>
struct VQHead {
  Codebook<T> codebook;
  VocabMapping mapping;
  // Training/eval loss path. The materializing path stays available for
  // probabilities and as a cross-check.
  bool fused = true;
};

namespace detail {

inline void check_mapping(const VocabMapping& map, std::size_t num_codes) {
  if (map.num_codes() != num_codes) {
    throw DimensionError("mapping has K=" + std::to_string(map.num_codes()) +
                         " but codebook has " + std::to_string(num_codes) + " rows");
  }
}

}  // namespace detail

// L_c = h C^T, [m x K].
template <typename T>
Tensor<T> codebook_logits(Tape<T>& tape, const Codebook<T>& cb, const Tensor<T>& h) {
  return matmul_bt(tape, h, cb.vectors);
}

// L_v[:, i] = L_c[:, M(i)], [m x V].
template <typename T>
Tensor<T> scatter_logits(Tape<T>& tape, const Tensor<T>& code_logits, const VocabMapping& map) {
  detail::check_mapping(map, code_logits.cols());
  return gather_columns(tape, code_logits, std::span<const Index>(map.codes()));
}

// Full-vocabulary cross-entropy evaluated on the K code logits.
//
// With a_j = L_c[j] + ln counts[j] over non-empty codes, the vocabulary
// partition function is logsumexp_j a_j, so each row's loss is
// logsumexp(a) - L_c[M(target)]. The gradient w.r.t. L_c[j] is
// softmax(a)_j - [j == M(target)].
template <typename T>
Tensor<T> code_cross_entropy(Tape<T>& tape, const Tensor<T>& code_logits,
                             const VocabMapping& map, std::span<const Index> targets) {
  detail::check_mapping(map, code_logits.cols());
  detail::require_finite_input(code_logits, "code_cross_entropy");
  const std::size_t m = code_logits.rows(), k = code_logits.cols();
  if (targets.size() != m) {
    throw DimensionError("code_cross_entropy: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(m) + " rows");
  }
  std::vector<Index> target_codes(m);
  for (std::size_t r = 0; r < m; ++r) {
    const Index t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= map.vocab_size()) {
      throw IndexError("code_cross_entropy: target " + std::to_string(t) + " outside [0, " +
                       std::to_string(map.vocab_size()) + ")");
    }
    target_codes[r] = map.code(static_cast<std::size_t>(t));
  }

  std::vector<T> log_counts(k);
  std::vector<std::size_t> live;
  for (std::size_t j = 0; j < k; ++j) {
    if (map.counts()[j] > 0) {
      live.push_back(j);
      log_counts[j] = std::log(static_cast<T>(map.counts()[j]));
    }
  }

  const bool record = tape.should_record(code_logits);
  std::vector<T> probs(record ? m * k : 0, T(0));
  std::vector<T> shifted(live.size()), p(live.size());
  T total = 0;
  for (std::size_t r = 0; r < m; ++r) {
    const T* row = code_logits.ptr() + r * k;
    for (std::size_t q = 0; q < live.size(); ++q) shifted[q] = row[live[q]] + log_counts[live[q]];
    const auto norm_r = detail::softmax_row(shifted.data(), p.data(), live.size());
    if (record) {
      for (std::size_t q = 0; q < live.size(); ++q) probs[r * k + live[q]] = p[q];
    }
    total += (norm_r.max - row[static_cast<std::size_t>(target_codes[r])]) + norm_r.rest;
  }
  const T norm = m > 0 ? T(1) / T(m) : T(1);
  Tensor<T> out = Tensor<T>::scalar(total * norm);
  detail::require_finite(out, "code_cross_entropy");
  if (record) {
    tape.record(out, {code_logits},
                [code_logits, out, probs = std::move(probs),
                 target_codes = std::move(target_codes), m, k, norm] {
                  const T g = out.grad()[0] * norm;
                  auto gl = code_logits.grad();
                  for (std::size_t r = 0; r < m; ++r) {
                    for (std::size_t j = 0; j < k; ++j) gl[r * k + j] += g * probs[r * k + j];
                    gl[r * k + static_cast<std::size_t>(target_codes[r])] -= g;
                  }
                });
  }
  return out;
}

// O(m K d) loss: codebook projection then code-level cross-entropy.
template <typename T>
Tensor<T> vq_loss_fused(Tape<T>& tape, const Codebook<T>& cb, const VocabMapping& map,
                        const Tensor<T>& h, std::span<const Index> targets) {
  return code_cross_entropy(tape, codebook_logits(tape, cb, h), map, targets);
}

// Reference path: materialize L_v and apply the ordinary cross-entropy.
template <typename T>
Tensor<T> vq_loss_naive(Tape<T>& tape, const Codebook<T>& cb, const VocabMapping& map,
                        const Tensor<T>& h, std::span<const Index> targets) {
  return cross_entropy_from_logits(tape, scatter_logits(tape, codebook_logits(tape, cb, h), map),
                                   targets);
}

// P[:, i] = exp(L_c[:, M(i)]) / Z, [m x V], computed as the code mass
// softmax_j(L_c[j] + ln counts[j]) split evenly over the code's members.
// Tokens sharing a code receive bitwise-identical probabilities.
template <typename T>
Tensor<T> vq_probabilities(const Codebook<T>& cb, const VocabMapping& map, const Tensor<T>& h) {
  Tape<T> off(false);
  Tensor<T> lc = codebook_logits(off, cb, h);
  detail::check_mapping(map, lc.cols());
  detail::require_finite_input(lc, "vq_probabilities");
  const std::size_t m = lc.rows(), k = lc.cols(), v = map.vocab_size();
  std::vector<std::size_t> live;
  for (std::size_t j = 0; j < k; ++j)
    if (map.counts()[j] > 0) live.push_back(j);
  Tensor<T> probs({m, v});
  std::vector<T> shifted(live.size()), mass(live.size()), token_prob(k, T(0));
  for (std::size_t r = 0; r < m; ++r) {
    const T* row = lc.ptr() + r * k;
    for (std::size_t q = 0; q < live.size(); ++q)
      shifted[q] = row[live[q]] + std::log(static_cast<T>(map.counts()[live[q]]));
    detail::softmax_row(shifted.data(), mass.data(), live.size());
    for (std::size_t q = 0; q < live.size(); ++q)
      token_prob[live[q]] = mass[q] / static_cast<T>(map.counts()[live[q]]);
    T* out = probs.ptr() + r * v;
    for (std::size_t i = 0; i < v; ++i) out[i] = token_prob[static_cast<std::size_t>(map.codes()[i])];
  }
  detail::require_finite(probs, "vq_probabilities");
  return probs;
}

}  // namespace vqlogits
