#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dimlab/errors.hpp"
#include "dimlab/rng.hpp"
#include "dimlab/tensor.hpp"

namespace dimlab {

struct GradCheckOptions {
  double eps = 1e-6;
  /// Coordinates checked per parameter tensor; tensors at or below this size
  /// are checked exhaustively, larger ones on a seeded random subset.
  std::size_t max_coords_per_param = 64;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t coords_checked = 0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` must rebuild its graph from `params` on every call and return a
/// scalar. Relative error uses the denominator max(|analytic|, |numeric|, 1e-8).
template <typename Real>
GradCheckReport finite_difference_report(
    const std::function<BasicTensor<Real>()>& f,
    std::vector<BasicTensor<Real>> params, const GradCheckOptions& opts = {}) {
  if (!(opts.eps > 0.0)) {
    throw ContractError("finite_difference_check: eps must be positive");
  }
  for (auto& p : params) {
    p.clear_grad();
  }
  const auto loss = f();
  if (!std::isfinite(static_cast<double>(loss.item()))) {
    throw NumericError("finite_difference_check: non-finite loss at base point");
  }
  backward(loss);

  auto eval = [&]() {
    const double v = static_cast<double>(f().item());
    if (!std::isfinite(v)) {
      throw NumericError("finite_difference_check: non-finite loss under perturbation");
    }
    return v;
  };

  Rng rng(opts.seed);
  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    const std::size_t n = p.numel();
    std::vector<double> analytic(n, 0.0);
    if (p.has_grad()) {
      for (std::size_t i = 0; i < n; ++i) analytic[i] = static_cast<double>(p.grad()[i]);
    }
    std::vector<std::size_t> coords;
    if (n <= opts.max_coords_per_param) {
      coords.resize(n);
      for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    } else {
      for (std::size_t k = 0; k < opts.max_coords_per_param; ++k) {
        coords.push_back(static_cast<std::size_t>(rng.uniform_index(n)));
      }
    }
    auto values = p.mutable_values();
    for (std::size_t idx : coords) {
      const Real saved = values[idx];
      values[idx] = static_cast<Real>(static_cast<double>(saved) + opts.eps);
      const double up = eval();
      values[idx] = static_cast<Real>(static_cast<double>(saved) - opts.eps);
      const double down = eval();
      values[idx] = saved;
      const double numeric = (up - down) / (2.0 * opts.eps);
      const double a = analytic[idx];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      ++report.coords_checked;
      if (rel > report.max_relative_error || report.coords_checked == 1) {
        report.max_relative_error = std::max(report.max_relative_error, rel);
        if (rel >= report.max_relative_error) {
          report.worst_param = pi;
          report.worst_index = idx;
          report.worst_analytic = a;
          report.worst_numeric = numeric;
        }
      }
    }
  }
  return report;
}

template <typename Real>
double finite_difference_check(const std::function<BasicTensor<Real>()>& f,
                               std::vector<BasicTensor<Real>> params,
                               const GradCheckOptions& opts = {}) {
  return finite_difference_report(f, std::move(params), opts).max_relative_error;
}

}  // namespace dimlab
