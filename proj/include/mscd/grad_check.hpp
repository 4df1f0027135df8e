#pragma once

#include <cmath>
#include <functional>

#include "mscd/rng.hpp"
#include "mscd/tensor.hpp"

namespace mscd {

// Central-difference check of a scalar-valued function against reverse-mode
// gradients, evaluated in float64. Returns the max relative error with
// denominator max(|analytic|, |numeric|, 1e-8).
inline double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                         const Tensor<double>& x0, double eps = 1e-3) {
  Tensor<double> x = x0.detach();
  x.set_requires_grad(true);
  Tensor<double> y = f(x);
  if (y.numel() != 1) throw UsageError("grad_check: f must be scalar-valued");
  backward(y);
  std::vector<double> analytic(size_t(x.numel()), 0.0);
  if (!x.grad().empty()) analytic = x.grad();

  double worst = 0.0;
  NoGradGuard no_grad;
  for (int64_t i = 0; i < x.numel(); ++i) {
    Tensor<double> xp = x0.detach();
    Tensor<double> xm = x0.detach();
    xp.mutable_data()[size_t(i)] += eps;
    xm.mutable_data()[size_t(i)] -= eps;
    const double fp = f(xp).item();
    const double fm = f(xm).item();
    const double numeric = (fp - fm) / (2.0 * eps);
    const double a = analytic[size_t(i)];
    if (!std::isfinite(numeric) || !std::isfinite(a))
      throw NumericError("grad_check: non-finite value at coordinate " + std::to_string(i));
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

// Directional variant for deep compositions, where per-coordinate FD is
// swamped by roundoff on the smallest gradient entries: compares grad.v
// against (f(x+eps v)-f(x-eps v))/2eps over random unit directions.
inline double grad_check_directional(
    const std::function<Tensor<double>(const Tensor<double>&)>& f, const Tensor<double>& x0,
    Rng& rng, int directions = 8, double eps = 1e-5) {
  Tensor<double> x = x0.detach();
  x.set_requires_grad(true);
  Tensor<double> y = f(x);
  if (y.numel() != 1) throw UsageError("grad_check: f must be scalar-valued");
  backward(y);
  std::vector<double> analytic(size_t(x.numel()), 0.0);
  if (!x.grad().empty()) analytic = x.grad();

  double worst = 0.0;
  NoGradGuard no_grad;
  for (int d = 0; d < directions; ++d) {
    std::vector<double> v(size_t(x.numel()));
    double norm = 0;
    for (auto& c : v) {
      c = rng.normal();
      norm += c * c;
    }
    norm = std::sqrt(norm);
    double a = 0;
    Tensor<double> xp = x0.detach();
    Tensor<double> xm = x0.detach();
    for (size_t i = 0; i < v.size(); ++i) {
      v[i] /= norm;
      a += analytic[i] * v[i];
      xp.mutable_data()[i] += eps * v[i];
      xm.mutable_data()[i] -= eps * v[i];
    }
    const double numeric = (f(xp).item() - f(xm).item()) / (2.0 * eps);
    if (!std::isfinite(numeric) || !std::isfinite(a))
      throw NumericError("grad_check: non-finite directional derivative");
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

}  // namespace mscd
