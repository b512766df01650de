#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "vqlogits/errors.hpp"
#include "vqlogits/numerics/tape.hpp"
#include "vqlogits/numerics/tensor.hpp"
#include "vqlogits/rng.hpp"

namespace vqlogits {

enum class Reduction { kMean, kSum };

namespace detail {

template <typename T>
void require_finite(const Tensor<T>& t, const char* op) {
  if (!t.all_finite()) throw NumericError(std::string(op) + ": non-finite value in output");
}

template <typename T>
void require_finite_input(const Tensor<T>& t, const char* op) {
  if (!t.all_finite()) throw NumericError(std::string(op) + ": non-finite value in input");
}

inline void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

template <typename T>
void require_matrix(const Tensor<T>& t, const char* op) {
  require(t.rank() == 2, std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

template <typename T>
void add_into(std::span<T> dst, std::span<const T> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

// a[m x k] * b[k x n].
template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  detail::require(a.cols() == b.rows(), "matmul: inner extents differ, " + shape_str(a.shape()) +
                                            " x " + shape_str(b.shape()));
  Tensor<T> out({a.rows(), b.cols()});
  as_matrix(out).noalias() = as_matrix(a) * as_matrix(b);
  detail::require_finite(out, "matmul");
  if (tape.should_record(a, b)) {
    tape.record(out, {a, b}, [a, b, out] {
      auto g = grad_matrix(out);
      if (a.requires_grad()) grad_matrix(a).noalias() += g * as_matrix(b).transpose();
      if (b.requires_grad()) grad_matrix(b).noalias() += as_matrix(a).transpose() * g;
    });
  }
  return out;
}

// a[m x k] * b[n x k]^T without materializing the transpose.
template <typename T>
Tensor<T> matmul_bt(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_matrix(a, "matmul_bt");
  detail::require_matrix(b, "matmul_bt");
  detail::require(a.cols() == b.cols(), "matmul_bt: inner extents differ, " +
                                            shape_str(a.shape()) + " x " +
                                            shape_str(b.shape()) + "^T");
  Tensor<T> out({a.rows(), b.rows()});
  as_matrix(out).noalias() = as_matrix(a) * as_matrix(b).transpose();
  detail::require_finite(out, "matmul_bt");
  if (tape.should_record(a, b)) {
    tape.record(out, {a, b}, [a, b, out] {
      auto g = grad_matrix(out);
      if (a.requires_grad()) grad_matrix(a).noalias() += g * as_matrix(b);
      if (b.requires_grad()) grad_matrix(b).noalias() += g.transpose() * as_matrix(a);
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose(Tape<T>& tape, const Tensor<T>& a) {
  detail::require_matrix(a, "transpose");
  Tensor<T> out({a.cols(), a.rows()});
  as_matrix(out) = as_matrix(a).transpose();
  if (tape.should_record(a)) {
    tape.record(out, {a}, [a, out] { grad_matrix(a) += grad_matrix(out).transpose(); });
  }
  return out;
}

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.size() == b.size() && a.cols() == b.cols(),
                  "add: shapes differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  detail::require_finite(out, "add");
  if (tape.should_record(a, b)) {
    tape.record(out, {a, b}, [a, b, out] {
      std::span<const T> g = out.grad();
      if (a.requires_grad()) detail::add_into(a.grad(), g);
      if (b.requires_grad()) detail::add_into(b.grad(), g);
    });
  }
  return out;
}

// x[m x n] + bias[n], broadcast over rows.
template <typename T>
Tensor<T> add_row(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& bias) {
  detail::require(bias.size() == x.cols(), "add_row: bias " + shape_str(bias.shape()) +
                                               " does not match " + shape_str(x.shape()));
  Tensor<T> out(x.shape());
  const std::size_t m = x.rows(), n = x.cols();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = x[r * n + c] + bias[c];
  detail::require_finite(out, "add_row");
  if (tape.should_record(x, bias)) {
    tape.record(out, {x, bias}, [x, bias, out, m, n] {
      std::span<const T> g = out.grad();
      if (x.requires_grad()) detail::add_into(x.grad(), g);
      if (bias.requires_grad()) {
        auto gb = bias.grad();
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < n; ++c) gb[c] += g[r * n + c];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T factor) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  detail::require_finite(out, "scale");
  if (tape.should_record(x)) {
    tape.record(out, {x}, [x, out, factor] {
      auto gx = x.grad();
      std::span<const T> g = out.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += factor * g[i];
    });
  }
  return out;
}

// Sum of all elements as a one-element tensor.
template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
  T total = 0;
  for (T v : x.data()) total += v;
  Tensor<T> out = Tensor<T>::scalar(total);
  detail::require_finite(out, "sum");
  if (tape.should_record(x)) {
    tape.record(out, {x}, [x, out] {
      const T g = out.grad()[0];
      for (T& gx : x.grad()) gx += g;
    });
  }
  return out;
}

// Column-wise concatenation of matrices with equal row counts.
template <typename T>
Tensor<T> concat_cols(Tape<T>& tape, const std::vector<Tensor<T>>& parts) {
  detail::require(!parts.empty(), "concat_cols: no inputs");
  const std::size_t m = parts.front().rows();
  std::size_t n = 0;
  bool record = false;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_cols");
    detail::require(p.rows() == m, "concat_cols: row counts differ");
    n += p.cols();
    record = record || tape.should_record(p);
  }
  Tensor<T> out({m, n});
  std::size_t offset = 0;
  for (const auto& p : parts) {
    as_matrix(out).middleCols(offset, p.cols()) = as_matrix(p);
    offset += p.cols();
  }
  if (record) {
    tape.record(out, parts, [parts, out] {
      std::size_t off = 0;
      for (const auto& p : parts) {
        if (p.requires_grad()) grad_matrix(p) += grad_matrix(out).middleCols(off, p.cols());
        off += p.cols();
      }
    });
  }
  return out;
}

// Per-row normalization to zero mean / unit variance followed by an affine
// transform with gain[n] and shift[n].
template <typename T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& shift, T eps = T(1e-5)) {
  const std::size_t m = x.rows(), n = x.cols();
  detail::require(gain.size() == n && shift.size() == n,
                  "layer_norm: affine parameters do not match " + shape_str(x.shape()));
  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.size());
  std::vector<T> rstd(m);
  for (std::size_t r = 0; r < m; ++r) {
    const T* row = x.ptr() + r * n;
    T mean = 0;
    for (std::size_t c = 0; c < n; ++c) mean += row[c];
    mean /= T(n);
    T var = 0;
    for (std::size_t c = 0; c < n; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= T(n);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) {
      xhat[r * n + c] = (row[c] - mean) * rstd[r];
      out[r * n + c] = xhat[r * n + c] * gain[c] + shift[c];
    }
  }
  detail::require_finite(out, "layer_norm");
  if (tape.should_record(x, gain, shift)) {
    tape.record(out, {x, gain, shift},
                [x, gain, shift, out, xhat = std::move(xhat), rstd = std::move(rstd), m, n] {
                  std::span<const T> g = out.grad();
                  if (gain.requires_grad() || shift.requires_grad()) {
                    auto gg = gain.grad();
                    auto gs = shift.grad();
                    for (std::size_t r = 0; r < m; ++r)
                      for (std::size_t c = 0; c < n; ++c) {
                        gg[c] += g[r * n + c] * xhat[r * n + c];
                        gs[c] += g[r * n + c];
                      }
                  }
                  if (!x.requires_grad()) return;
                  auto gx = x.grad();
                  for (std::size_t r = 0; r < m; ++r) {
                    T mean_d = 0, mean_dx = 0;
                    for (std::size_t c = 0; c < n; ++c) {
                      const T d = g[r * n + c] * gain[c];
                      mean_d += d;
                      mean_dx += d * xhat[r * n + c];
                    }
                    mean_d /= T(n);
                    mean_dx /= T(n);
                    for (std::size_t c = 0; c < n; ++c) {
                      const T d = g[r * n + c] * gain[c];
                      gx[r * n + c] += rstd[r] * (d - mean_d - xhat[r * n + c] * mean_dx);
                    }
                  }
                });
  }
  return out;
}

// tanh approximation of GELU.
template <typename T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x) {
  constexpr T kAlpha = T(0.7978845608028654);  // sqrt(2 / pi)
  constexpr T kBeta = T(0.044715);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T v = x[i];
    out[i] = T(0.5) * v * (T(1) + std::tanh(kAlpha * (v + kBeta * v * v * v)));
  }
  detail::require_finite(out, "gelu");
  if (tape.should_record(x)) {
    tape.record(out, {x}, [x, out] {
      auto gx = x.grad();
      std::span<const T> g = out.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        const T v = x[i];
        const T t = std::tanh(kAlpha * (v + kBeta * v * v * v));
        const T dt = (T(1) - t * t) * kAlpha * (T(1) + T(3) * kBeta * v * v);
        gx[i] += g[i] * (T(0.5) * (T(1) + t) + T(0.5) * v * dt);
      }
    });
  }
  return out;
}

// Inverted dropout. Identity (and nothing recorded) when rng is null or p == 0.
template <typename T>
Tensor<T> dropout(Tape<T>& tape, const Tensor<T>& x, double p, Rng* rng) {
  if (rng == nullptr || p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError("dropout probability must be < 1");
  const T keep_scale = T(1.0 / (1.0 - p));
  std::vector<T> mask(x.size());
  for (T& v : mask) v = rng->uniform() < p ? T(0) : keep_scale;
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * mask[i];
  if (tape.should_record(x)) {
    tape.record(out, {x}, [x, out, mask = std::move(mask)] {
      auto gx = x.grad();
      std::span<const T> g = out.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * mask[i];
    });
  }
  return out;
}

// Rows table[ids[r]] stacked into [len(ids) x d].
template <typename T>
Tensor<T> embedding_lookup(Tape<T>& tape, const Tensor<T>& table, std::span<const Index> ids) {
  detail::require_matrix(table, "embedding_lookup");
  const std::size_t vocab = table.rows(), d = table.cols();
  for (Index id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw IndexError("embedding_lookup: id " + std::to_string(id) + " outside [0, " +
                       std::to_string(vocab) + ")");
    }
  }
  Tensor<T> out({ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r)
    std::copy_n(table.ptr() + static_cast<std::size_t>(ids[r]) * d, d, out.ptr() + r * d);
  if (tape.should_record(table)) {
    tape.record(out, {table},
                [table, out, ids = std::vector<Index>(ids.begin(), ids.end()), d] {
                  auto gt = table.grad();
                  std::span<const T> g = out.grad();
                  for (std::size_t r = 0; r < ids.size(); ++r) {
                    T* dst = gt.data() + static_cast<std::size_t>(ids[r]) * d;
                    for (std::size_t c = 0; c < d; ++c) dst[c] += g[r * d + c];
                  }
                });
  }
  return out;
}

// out[:, i] = src[:, index[i]]. Backward scatter-adds into the source columns.
template <typename T>
Tensor<T> gather_columns(Tape<T>& tape, const Tensor<T>& src, std::span<const Index> index) {
  detail::require_matrix(src, "gather_columns");
  const std::size_t m = src.rows(), k = src.cols(), v = index.size();
  for (Index j : index) {
    if (j < 0 || static_cast<std::size_t>(j) >= k) {
      throw IndexError("gather_columns: index " + std::to_string(j) + " outside [0, " +
                       std::to_string(k) + ")");
    }
  }
  Tensor<T> out({m, v});
  for (std::size_t r = 0; r < m; ++r) {
    const T* s = src.ptr() + r * k;
    T* o = out.ptr() + r * v;
    for (std::size_t i = 0; i < v; ++i) o[i] = s[index[i]];
  }
  if (tape.should_record(src)) {
    tape.record(out, {src},
                [src, out, index = std::vector<Index>(index.begin(), index.end()), m, k, v] {
                  auto gs = src.grad();
                  std::span<const T> g = out.grad();
                  for (std::size_t r = 0; r < m; ++r) {
                    T* dst = gs.data() + r * k;
                    const T* go = g.data() + r * v;
                    for (std::size_t i = 0; i < v; ++i) dst[index[i]] += go[i];
                  }
                });
  }
  return out;
}

// Selected rows of a matrix, in the given order.
template <typename T>
Tensor<T> gather_rows(Tape<T>& tape, const Tensor<T>& src, std::span<const Index> rows) {
  detail::require_matrix(src, "gather_rows");
  const std::size_t n = src.cols();
  for (Index r : rows) {
    if (r < 0 || static_cast<std::size_t>(r) >= src.rows()) {
      throw IndexError("gather_rows: row " + std::to_string(r) + " out of range");
    }
  }
  Tensor<T> out({rows.size(), n});
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(src.ptr() + static_cast<std::size_t>(rows[i]) * n, n, out.ptr() + i * n);
  if (tape.should_record(src)) {
    tape.record(out, {src}, [src, out, rows = std::vector<Index>(rows.begin(), rows.end()), n] {
      auto gs = src.grad();
      std::span<const T> g = out.grad();
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t c = 0; c < n; ++c)
          gs[static_cast<std::size_t>(rows[i]) * n + c] += g[i * n + c];
    });
  }
  return out;
}

namespace detail {

template <typename T>
struct LogNorm {
  T max;
  T rest;  // log Z - max
  T value() const { return max + rest; }
};

// Stable softmax of one row into dst; returns log of the partition function.
template <typename T>
LogNorm<T> softmax_row(const T* src, T* dst, std::size_t n) {
  std::size_t arg = 0;
  for (std::size_t c = 1; c < n; ++c)
    if (src[c] > src[arg]) arg = c;
  const T mx = src[arg];
  // The max term is exactly 1; summing the rest separately keeps log Z
  // accurate through log1p when the row is dominated by one entry.
  T tail = 0;
  for (std::size_t c = 0; c < n; ++c) {
    dst[c] = c == arg ? T(1) : std::exp(src[c] - mx);
    if (c != arg) tail += dst[c];
  }
  const T inv = T(1) / (T(1) + tail);
  for (std::size_t c = 0; c < n; ++c) dst[c] *= inv;
  return {mx, std::log1p(tail)};
}

}  // namespace detail

template <typename T>
Tensor<T> row_softmax(Tape<T>& tape, const Tensor<T>& x) {
  detail::require_finite_input(x, "row_softmax");
  const std::size_t m = x.rows(), n = x.cols();
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < m; ++r) detail::softmax_row(x.ptr() + r * n, out.ptr() + r * n, n);
  if (tape.should_record(x)) {
    tape.record(out, {x}, [x, out, m, n] {
      auto gx = x.grad();
      std::span<const T> g = out.grad();
      for (std::size_t r = 0; r < m; ++r) {
        T dot = 0;
        for (std::size_t c = 0; c < n; ++c) dot += g[r * n + c] * out[r * n + c];
        for (std::size_t c = 0; c < n; ++c)
          gx[r * n + c] += out[r * n + c] * (g[r * n + c] - dot);
      }
    });
  }
  return out;
}

// Mean (or sum) over rows of logsumexp(row) - row[target].
template <typename T>
Tensor<T> cross_entropy_from_logits(Tape<T>& tape, const Tensor<T>& logits,
                                    std::span<const Index> targets,
                                    Reduction reduction = Reduction::kMean) {
  detail::require_matrix(logits, "cross_entropy_from_logits");
  detail::require_finite_input(logits, "cross_entropy_from_logits");
  const std::size_t m = logits.rows(), n = logits.cols();
  detail::require(targets.size() == m, "cross_entropy_from_logits: " +
                                           std::to_string(targets.size()) + " targets for " +
                                           std::to_string(m) + " rows");
  for (Index t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= n) {
      throw IndexError("cross_entropy_from_logits: target " + std::to_string(t) +
                       " outside [0, " + std::to_string(n) + ")");
    }
  }
  const bool record = tape.should_record(logits);
  std::vector<T> probs(record ? m * n : n);
  T total = 0;
  for (std::size_t r = 0; r < m; ++r) {
    T* p = probs.data() + (record ? r * n : 0);
    const auto norm_r = detail::softmax_row(logits.ptr() + r * n, p, n);
    total += (norm_r.max - logits[r * n + static_cast<std::size_t>(targets[r])]) + norm_r.rest;
  }
  const T norm = reduction == Reduction::kMean && m > 0 ? T(1) / T(m) : T(1);
  Tensor<T> out = Tensor<T>::scalar(total * norm);
  detail::require_finite(out, "cross_entropy_from_logits");
  if (record) {
    tape.record(out, {logits},
                [logits, out, probs = std::move(probs),
                 targets = std::vector<Index>(targets.begin(), targets.end()), m, n, norm] {
                  const T g = out.grad()[0] * norm;
                  auto gl = logits.grad();
                  for (std::size_t r = 0; r < m; ++r) {
                    for (std::size_t c = 0; c < n; ++c) gl[r * n + c] += g * probs[r * n + c];
                    gl[r * n + static_cast<std::size_t>(targets[r])] -= g;
                  }
                });
  }
  return out;
}

// Multi-head causal self-attention over a fused projection.
//
// qkv is [B*S x 3d] holding queries, keys and values side by side; heads
// split d into n_heads slices. Attention weights may be dropped out (inverted
// dropout) when rng is non-null. Output is [B*S x d].
template <typename T>
Tensor<T> causal_self_attention(Tape<T>& tape, const Tensor<T>& qkv, std::size_t batch,
                                std::size_t seq, std::size_t n_heads, double dropout_p = 0.0,
                                Rng* rng = nullptr) {
  detail::require_matrix(qkv, "causal_self_attention");
  detail::require(qkv.rows() == batch * seq && qkv.cols() % 3 == 0,
                  "causal_self_attention: qkv " + shape_str(qkv.shape()) +
                      " does not match batch x seq");
  const std::size_t d = qkv.cols() / 3;
  detail::require(n_heads > 0 && d % n_heads == 0,
                  "causal_self_attention: width not divisible by heads");
  const std::size_t dh = d / n_heads;
  const std::size_t w = 3 * d;
  const T inv_sqrt = T(1) / std::sqrt(T(dh));
  const bool drop = rng != nullptr && dropout_p > 0.0;
  const T keep_scale = drop ? T(1.0 / (1.0 - dropout_p)) : T(1);

  // Attention weights (post-softmax) and dropout multipliers, [B][H][S][S].
  std::vector<T> attn(batch * n_heads * seq * seq, T(0));
  std::vector<T> mask(drop ? attn.size() : 0, T(0));
  Tensor<T> out({batch * seq, d});
  std::vector<T> scores(seq);

  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      T* a = attn.data() + (b * n_heads + h) * seq * seq;
      T* mk = drop ? mask.data() + (b * n_heads + h) * seq * seq : nullptr;
      for (std::size_t i = 0; i < seq; ++i) {
        const T* q = qkv.ptr() + (b * seq + i) * w + h * dh;
        for (std::size_t j = 0; j <= i; ++j) {
          const T* k = qkv.ptr() + (b * seq + j) * w + d + h * dh;
          T s = 0;
          for (std::size_t c = 0; c < dh; ++c) s += q[c] * k[c];
          scores[j] = s * inv_sqrt;
        }
        detail::softmax_row(scores.data(), a + i * seq, i + 1);
        T* o = out.ptr() + (b * seq + i) * d + h * dh;
        for (std::size_t j = 0; j <= i; ++j) {
          T weight = a[i * seq + j];
          if (drop) {
            mk[i * seq + j] = rng->uniform() < dropout_p ? T(0) : keep_scale;
            weight *= mk[i * seq + j];
          }
          const T* v = qkv.ptr() + (b * seq + j) * w + 2 * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) o[c] += weight * v[c];
        }
      }
    }
  }
  detail::require_finite(out, "causal_self_attention");
  if (tape.should_record(qkv)) {
    tape.record(out, {qkv},
                [qkv, out, attn = std::move(attn), mask = std::move(mask), batch, seq, n_heads,
                 d, dh, w, inv_sqrt, drop] {
                  std::span<const T> g = out.grad();
                  auto gq = qkv.grad();
                  std::vector<T> da(seq);
                  for (std::size_t b = 0; b < batch; ++b) {
                    for (std::size_t h = 0; h < n_heads; ++h) {
                      const T* a = attn.data() + (b * n_heads + h) * seq * seq;
                      const T* mk = drop ? mask.data() + (b * n_heads + h) * seq * seq : nullptr;
                      for (std::size_t i = 0; i < seq; ++i) {
                        const T* go = g.data() + (b * seq + i) * d + h * dh;
                        // d(weight) and d(value).
                        for (std::size_t j = 0; j <= i; ++j) {
                          const T* v = qkv.ptr() + (b * seq + j) * w + 2 * d + h * dh;
                          T* gv = gq.data() + (b * seq + j) * w + 2 * d + h * dh;
                          const T mult = drop ? mk[i * seq + j] : T(1);
                          const T weight = a[i * seq + j] * mult;
                          T dot = 0;
                          for (std::size_t c = 0; c < dh; ++c) {
                            dot += go[c] * v[c];
                            gv[c] += weight * go[c];
                          }
                          da[j] = dot * mult;
                        }
                        // Softmax Jacobian.
                        T inner = 0;
                        for (std::size_t j = 0; j <= i; ++j) inner += a[i * seq + j] * da[j];
                        const T* q = qkv.ptr() + (b * seq + i) * w + h * dh;
                        T* gqi = gq.data() + (b * seq + i) * w + h * dh;
                        for (std::size_t j = 0; j <= i; ++j) {
                          const T ds = a[i * seq + j] * (da[j] - inner) * inv_sqrt;
                          if (ds == T(0)) continue;
                          const T* k = qkv.ptr() + (b * seq + j) * w + d + h * dh;
                          T* gk = gq.data() + (b * seq + j) * w + d + h * dh;
                          for (std::size_t c = 0; c < dh; ++c) {
                            gqi[c] += ds * k[c];
                            gk[c] += ds * q[c];
                          }
                        }
                      }
                    }
                  }
                });
  }
  return out;
}

}  // namespace vqlogits
