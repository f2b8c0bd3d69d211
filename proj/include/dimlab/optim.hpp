#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dimlab/errors.hpp"
#include "dimlab/model.hpp"

namespace dimlab {

namespace detail {

template <typename Real>
void require_grad_present(const NamedParameter<Real>& p) {
  if (!p.tensor.has_grad()) {
    throw ContractError("optimizer: parameter '" + p.name + "' has no gradient");
  }
}

}  // namespace detail

/// SGD with heavy-ball momentum and coupled L2 decay:
///   buffer <- momentum * buffer + grad + weight_decay * param
///   param  <- param - lr * buffer
/// Parameters with decay == false (biases, batch-norm affine) skip the decay term.
template <typename Real>
void sgd_momentum_step(const std::vector<NamedParameter<Real>>& params,
                       std::vector<std::vector<Real>>& buffers, double lr, double momentum,
                       double weight_decay) {
  if (buffers.size() != params.size()) buffers.assign(params.size(), {});
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    detail::require_grad_present(p);
    auto v = p.tensor.mutable_values();
    auto g = p.tensor.grad();
    auto& buf = buffers[i];
    if (buf.empty()) buf.assign(v.size(), Real{0});
    const Real wd = p.decay ? Real(weight_decay) : Real{0};
    for (std::size_t k = 0; k < v.size(); ++k) {
      buf[k] = Real(momentum) * buf[k] + g[k] + wd * v[k];
      v[k] -= Real(lr) * buf[k];
    }
  }
}

template <typename Real>
class SgdMomentum {
 public:
  SgdMomentum(double momentum, double weight_decay)
      : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(const std::vector<NamedParameter<Real>>& params, double lr) {
    sgd_momentum_step(params, buffers_, lr, momentum_, weight_decay_);
  }

 private:
  double momentum_;
  double weight_decay_;
  std::vector<std::vector<Real>> buffers_;
};

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.04;
};

template <typename Real>
struct AdamWState {
  std::vector<std::vector<Real>> m;
  std::vector<std::vector<Real>> v;
};

/// AdamW with decoupled decay, applied before the adaptive update:
///   param <- param * (1 - lr * wd)
///   param <- param - lr * m_hat / (sqrt(v_hat) + eps)
/// step_count is 1-based and drives the bias correction.
template <typename Real>
void adamw_step(const std::vector<NamedParameter<Real>>& params, AdamWState<Real>& state,
                double lr, const AdamWOptions& opts, std::uint64_t step_count) {
  if (step_count < 1) throw ContractError("adamw_step: step_count must be >= 1");
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
  }
  const double c1 = 1.0 - std::pow(opts.beta1, static_cast<double>(step_count));
  const double c2 = 1.0 - std::pow(opts.beta2, static_cast<double>(step_count));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    detail::require_grad_present(p);
    auto w = p.tensor.mutable_values();
    auto g = p.tensor.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.empty()) {
      m.assign(w.size(), Real{0});
      v.assign(w.size(), Real{0});
    }
    const Real decay = p.decay ? Real(1.0 - lr * opts.weight_decay) : Real{1};
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = Real(opts.beta1) * m[k] + Real(1.0 - opts.beta1) * g[k];
      v[k] = Real(opts.beta2) * v[k] + Real(1.0 - opts.beta2) * g[k] * g[k];
      const Real mhat = m[k] / Real(c1);
      const Real vhat = v[k] / Real(c2);
      w[k] = w[k] * decay - Real(lr) * mhat / (std::sqrt(vhat) + Real(opts.eps));
    }
  }
}

template <typename Real>
class AdamW {
 public:
  explicit AdamW(AdamWOptions opts = {}) : opts_(opts) {}

  void step(const std::vector<NamedParameter<Real>>& params, double lr) {
    adamw_step(params, state_, lr, opts_, ++step_count_);
  }

  [[nodiscard]] std::uint64_t step_count() const noexcept { return step_count_; }

 private:
  AdamWOptions opts_;
  AdamWState<Real> state_;
  std::uint64_t step_count_ = 0;
};

}  // namespace dimlab
