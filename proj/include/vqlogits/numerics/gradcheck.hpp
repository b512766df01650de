#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "vqlogits/numerics/tape.hpp"
#include "vqlogits/numerics/tensor.hpp"

namespace vqlogits {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
};

// Compares tape gradients of a scalar function against the fourth-order
// central difference
//   (f(x-2e) - 8 f(x-e) + 8 f(x+e) - f(x+2e)) / (12 e)
// at every coordinate of every parameter. The relative error denominator is
// max(|analytic|, |numeric|, floor): rounding leaves the difference quotient
// with ~1e-13 of noise, so gradients that are exactly zero (a key bias under
// softmax shift invariance, say) need a floor well above that.
//
// `loss` builds the scalar on the tape it is handed; it is called once with a
// recording tape and then twice per coordinate with a disabled one.
inline GradCheckReport finite_difference_check(
    const std::function<TensorD(Tape<double>&)>& loss, const std::vector<TensorD>& params,
    double eps = 1e-3, double floor = 1e-6) {
  for (TensorD p : params) p.set_requires_grad(true);
  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    for (const auto& p : params) p.zero_grad();
    TensorD out = loss(tape);
    tape.backward(out);
    for (const auto& p : params) {
      auto g = p.grad();
      analytic.emplace_back(g.begin(), g.end());
    }
    tape.clear();
  }

  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    TensorD p = params[pi];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double saved = p[i];
      Tape<double> off(false);
      auto at = [&](double offset) {
        p[i] = saved + offset;
        return loss(off).item();
      };
      const double outer = at(-2.0 * eps) - at(2.0 * eps);
      const double inner = at(eps) - at(-eps);
      const double numeric = (outer + 8.0 * inner) / (12.0 * eps);
      p[i] = saved;
      const double a = analytic[pi][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      const double rel = std::abs(a - numeric) / denom;
      ++report.coordinates;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = pi;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace vqlogits
