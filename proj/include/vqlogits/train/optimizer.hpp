#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "vqlogits/errors.hpp"
#include "vqlogits/numerics/parameter.hpp"

namespace vqlogits {

struct Schedule {
  double lr_peak = 3e-4;
  double lr_min = 0.0;
  std::size_t warmup_steps = 200;
  std::size_t total_steps = 5000;
};

// Linear warmup from 0 to lr_peak, then cosine down to lr_min at total_steps.
inline double lr_at(std::size_t step, const Schedule& s) {
  if (step < s.warmup_steps) {
    return s.lr_peak * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  }
  if (step >= s.total_steps) return step == s.warmup_steps ? s.lr_peak : s.lr_min;
  const double progress = static_cast<double>(step - s.warmup_steps) /
                          static_cast<double>(s.total_steps - s.warmup_steps);
  return s.lr_min + 0.5 * (s.lr_peak - s.lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

// Global L2 norm over every gradient.
template <typename T>
double global_grad_norm(const std::vector<NamedParam<T>>& params) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (T g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(sq);
}

// Rescales all gradients by clip_norm / norm when the norm exceeds clip_norm.
// Returns the factor applied (1 when unchanged).
template <typename T>
double clip_global_norm(const std::vector<NamedParam<T>>& params, double clip_norm) {
  const double norm = global_grad_norm(params);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  if (norm <= clip_norm) return 1.0;
  const double factor = clip_norm / norm;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (T& g : p.tensor.grad()) g = static_cast<T>(g * factor);
  }
  return factor;
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Bias-corrected Adam with decoupled weight decay. Moments are kept in double
// per parameter name; only parameters passed to step() ever get state.
template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  std::size_t steps_taken() const { return t_; }
  bool has_state(const std::string& name) const { return state_.count(name) != 0; }

  void step(const std::vector<NamedParam<T>>& params, double lr) {
    for (const auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      for (T g : p.tensor.grad()) {
        if (!std::isfinite(g)) throw NumericError("non-finite gradient in " + p.name);
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (const auto& p : params) {
      Tensor<T> w = p.tensor;
      auto& st = state_[p.name];
      if (st.m.empty()) {
        st.m.assign(w.size(), 0.0);
        st.v.assign(w.size(), 0.0);
      }
      if (st.m.size() != w.size()) throw DimensionError("optimizer state size changed for " + p.name);
      const double shrink = p.decay ? 1.0 - lr * cfg_.weight_decay : 1.0;
      const std::span<const T> grad = w.has_grad() ? std::span<const T>(w.grad()) : std::span<const T>();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double g = grad.empty() ? 0.0 : static_cast<double>(grad[i]);
        st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g;
        st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = st.m[i] / c1, vhat = st.v[i] / c2;
        const double x = static_cast<double>(w[i]) * shrink - lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        w[i] = static_cast<T>(x);
      }
    }
  }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  AdamWConfig cfg_;
  std::size_t t_ = 0;
  std::unordered_map<std::string, Moments> state_;
};

}  // namespace vqlogits
