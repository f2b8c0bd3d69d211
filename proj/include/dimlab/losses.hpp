#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "dimlab/errors.hpp"
#include "dimlab/tensor.hpp"

namespace dimlab {

struct SimclrParams {
  double temperature = 0.15;

  bool operator==(const SimclrParams&) const = default;
};

struct VicregParams {
  double sim_coeff = 25.0;
  double std_coeff = 25.0;
  double cov_coeff = 1.0;
  double std_epsilon = 1e-4;
  double std_target = 1.0;

  bool operator==(const VicregParams&) const = default;
};

namespace detail {

template <typename Real>
void require_pair(const BasicTensor<Real>& a, const BasicTensor<Real>& b, const char* op) {
  require_matrix(a, op);
  require_same_shape(a, b, op);
}

/// NT-Xent on already-normalized stacked embeddings u[2n,d]; the partner of
/// row i is row (i + n) mod 2n.
template <typename Real>
BasicTensor<Real> ntxent_on_unit_rows(const BasicTensor<Real>& u, double temperature) {
  const std::size_t m = u.shape()[0], d = u.shape()[1];
  const std::size_t n = m / 2;
  const Real inv_tau = Real(1.0 / temperature);
  auto uv = u.values();

  // s = u u^T / tau
  std::vector<Real> s(m * m, Real{0});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t k = i; k < m; ++k) {
      Real acc{0};
      for (std::size_t j = 0; j < d; ++j) acc += uv[i * d + j] * uv[k * d + j];
      s[i * m + k] = s[k * m + i] = acc * inv_tau;
    }

  // Softmax over k != i with log-sum-exp stabilization.
  std::vector<Real> prob(m * m, Real{0});
  Real total{0};
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t partner = (i + n) % m;
    Real mx = -std::numeric_limits<Real>::infinity();
    for (std::size_t k = 0; k < m; ++k)
      if (k != i) mx = std::max(mx, s[i * m + k]);
    Real z{0};
    for (std::size_t k = 0; k < m; ++k)
      if (k != i) {
        prob[i * m + k] = std::exp(s[i * m + k] - mx);
        z += prob[i * m + k];
      }
    for (std::size_t k = 0; k < m; ++k) prob[i * m + k] /= z;
    total += (mx + std::log(z)) - s[i * m + partner];
  }
  const Real loss = total / static_cast<Real>(m);

  auto ui = u.impl();
  return BasicTensor<Real>::make_result(
      Shape{}, {loss}, {u},
      [ui, m, d, n, inv_tau, prob = std::move(prob)](
          std::span<const Real> g, std::span<std::vector<Real>* const> pg) {
        // dL/ds_ik = (p_ik - [k = partner(i)]) / m;  dL/du = (G + G^T) u / tau
        const Real scale = g[0] / static_cast<Real>(m);
        std::vector<Real> sym(m * m, Real{0});
        for (std::size_t i = 0; i < m; ++i) {
          const std::size_t partner = (i + n) % m;
          for (std::size_t k = 0; k < m; ++k) {
            if (k == i) continue;
            Real gik = prob[i * m + k] - (k == partner ? Real{1} : Real{0});
            gik *= scale;
            sym[i * m + k] += gik;
            sym[k * m + i] += gik;
          }
        }
        const auto& uvals = ui->values;
        auto& gu = *pg[0];
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t k = 0; k < m; ++k) {
            const Real c = sym[i * m + k] * inv_tau;
            if (c == Real{0}) continue;
            for (std::size_t j = 0; j < d; ++j) gu[i * d + j] += c * uvals[k * d + j];
          }
      });
}

}  // namespace detail

/// SimCLR NT-Xent over paired views; row i of zA and zB come from the same source.
///
/// Both batches are stacked to 2n rows and L2-normalized. For each anchor the
/// positive is its partner row; the denominator runs over every row except
/// the anchor itself. Returns the mean over all 2n anchors.
template <typename Real>
BasicTensor<Real> ntxent_loss(const BasicTensor<Real>& za, const BasicTensor<Real>& zb,
                              const SimclrParams& params = {}) {
  detail::require_pair(za, zb, "ntxent_loss");
  if (!(params.temperature > 0.0)) {
    throw ContractError("ntxent_loss: temperature must be positive");
  }
  if (za.shape()[0] == 0) {
    throw ContractError("ntxent_loss: empty batch");
  }
  return detail::ntxent_on_unit_rows(l2_normalize(concat_rows(za, zb)), params.temperature);
}

/// Individual VICReg terms, unweighted. Useful for reporting.
struct VicregTerms {
  double invariance = 0.0;
  double variance_a = 0.0;
  double variance_b = 0.0;
  double covariance_a = 0.0;
  double covariance_b = 0.0;
};

namespace detail {

template <typename Real>
struct BranchStats {
  std::vector<Real> centered;  // n x d
  std::vector<Real> std;       // d
  std::vector<Real> cov;       // d x d, 1/(n-1) normalized
  Real variance_term{0};
  Real covariance_term{0};
};

template <typename Real>
BranchStats<Real> branch_stats(std::span<const Real> z, std::size_t n, std::size_t d,
                               const VicregParams& p) {
  BranchStats<Real> b;
  b.centered.assign(z.begin(), z.end());
  std::vector<Real> mu(d, Real{0});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mu[j] += z[i * d + j];
  for (auto& v : mu) v /= static_cast<Real>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) b.centered[i * d + j] -= mu[j];

  const Real denom = static_cast<Real>(n - 1);
  b.cov.assign(d * d, Real{0});
  for (std::size_t i = 0; i < n; ++i) {
    const Real* row = b.centered.data() + i * d;
    for (std::size_t j = 0; j < d; ++j) {
      const Real rj = row[j];
      for (std::size_t k = j; k < d; ++k) b.cov[j * d + k] += rj * row[k];
    }
  }
  for (std::size_t j = 0; j < d; ++j)
    for (std::size_t k = j; k < d; ++k) {
      b.cov[j * d + k] /= denom;
      b.cov[k * d + j] = b.cov[j * d + k];
    }

  b.std.resize(d);
  Real hinge{0};
  for (std::size_t j = 0; j < d; ++j) {
    b.std[j] = std::sqrt(b.cov[j * d + j] + Real(p.std_epsilon));
    hinge += std::max(Real{0}, Real(p.std_target) - b.std[j]);
  }
  b.variance_term = hinge / static_cast<Real>(d);

  Real off{0};
  for (std::size_t j = 0; j < d; ++j)
    for (std::size_t k = 0; k < d; ++k)
      if (j != k) off += b.cov[j * d + k] * b.cov[j * d + k];
  b.covariance_term = off / static_cast<Real>(d);
  return b;
}

/// Gradient of mu * v(Z) + nu * c(Z) with respect to Z, accumulated into out.
template <typename Real>
void branch_backward(const BranchStats<Real>& b, std::size_t n, std::size_t d,
                     const VicregParams& p, Real upstream, std::vector<Real>& out) {
  const Real nm1 = static_cast<Real>(n - 1);
  const Real fd = static_cast<Real>(d);
  const Real mu_w = Real(p.std_coeff) * upstream;
  const Real nu_w = Real(p.cov_coeff) * upstream;

  // variance hinge: d/dz_ij = -(1/d) * (z_ij - m_j) / ((n-1) * std_j) where active
  std::vector<Real> var_coef(d, Real{0});
  for (std::size_t j = 0; j < d; ++j) {
    if (Real(p.std_target) - b.std[j] > Real{0}) {
      var_coef[j] = -mu_w / (fd * nm1 * b.std[j]);
    }
  }
  // covariance: dL/dXc = (2/(n-1)) Xc M with M = (2/d) offdiag(C)
  std::vector<Real> m(d * d, Real{0});
  for (std::size_t j = 0; j < d; ++j)
    for (std::size_t k = 0; k < d; ++k)
      if (j != k) m[j * d + k] = Real{2} / fd * b.cov[j * d + k];
  const Real cov_scale = nu_w * Real{2} / nm1;

  std::vector<Real> gc(n * d, Real{0});
  for (std::size_t i = 0; i < n; ++i) {
    const Real* row = b.centered.data() + i * d;
    Real* grow = gc.data() + i * d;
    for (std::size_t k = 0; k < d; ++k) {
      const Real rk = row[k];
      if (rk == Real{0}) continue;
      const Real* mrow = m.data() + k * d;
      for (std::size_t j = 0; j < d; ++j) grow[j] += rk * mrow[j];
    }
    for (std::size_t j = 0; j < d; ++j) {
      grow[j] = cov_scale * grow[j] + var_coef[j] * row[j];
    }
  }
  // Back through centering: subtract the column mean of the gradient.
  std::vector<Real> colmean(d, Real{0});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) colmean[j] += gc[i * d + j];
  for (auto& c : colmean) c /= static_cast<Real>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] += gc[i * d + j] - colmean[j];
}

}  // namespace detail

/// Unweighted VICReg terms for reporting; same definitions as vicreg_loss.
template <typename Real>
VicregTerms vicreg_terms(const BasicTensor<Real>& za, const BasicTensor<Real>& zb,
                         const VicregParams& params = {}) {
  detail::require_pair(za, zb, "vicreg_terms");
  const std::size_t n = za.shape()[0], d = za.shape()[1];
  if (n < 2) {
    throw BatchTooSmallError("vicreg: need at least 2 rows, got " + std::to_string(n));
  }
  auto av = za.values();
  auto bv = zb.values();
  Real inv{0};
  for (std::size_t i = 0; i < n * d; ++i) inv += (av[i] - bv[i]) * (av[i] - bv[i]);
  const auto sa = detail::branch_stats(av, n, d, params);
  const auto sb = detail::branch_stats(bv, n, d, params);
  return {static_cast<double>(inv / static_cast<Real>(n * d)),
          static_cast<double>(sa.variance_term), static_cast<double>(sb.variance_term),
          static_cast<double>(sa.covariance_term), static_cast<double>(sb.covariance_term)};
}

/// VICReg: sim_coeff * invariance + std_coeff * (v(zA) + v(zB)) + cov_coeff * (c(zA) + c(zB)).
///
/// invariance is the squared difference averaged over batch and dimensions;
/// v is the mean std hinge with unbiased variance; c is the sum of squared
/// off-diagonal covariances divided by d.
template <typename Real>
BasicTensor<Real> vicreg_loss(const BasicTensor<Real>& za, const BasicTensor<Real>& zb,
                              const VicregParams& params = {}) {
  detail::require_pair(za, zb, "vicreg_loss");
  const std::size_t n = za.shape()[0], d = za.shape()[1];
  if (n < 2) {
    throw BatchTooSmallError("vicreg_loss: need at least 2 rows, got " + std::to_string(n));
  }
  if (params.sim_coeff < 0 || params.std_coeff < 0 || params.cov_coeff < 0) {
    throw ContractError("vicreg_loss: coefficients must be non-negative");
  }
  auto av = za.values();
  auto bv = zb.values();
  Real inv{0};
  for (std::size_t i = 0; i < n * d; ++i) inv += (av[i] - bv[i]) * (av[i] - bv[i]);
  inv /= static_cast<Real>(n * d);
  auto sa = detail::branch_stats(av, n, d, params);
  auto sb = detail::branch_stats(bv, n, d, params);
  const Real total = Real(params.sim_coeff) * inv +
                     Real(params.std_coeff) * (sa.variance_term + sb.variance_term) +
                     Real(params.cov_coeff) * (sa.covariance_term + sb.covariance_term);

  auto ai = za.impl();
  auto bi = zb.impl();
  return BasicTensor<Real>::make_result(
      Shape{}, {total}, {za, zb},
      [ai, bi, n, d, params, sa = std::move(sa), sb = std::move(sb)](
          std::span<const Real> g, std::span<std::vector<Real>* const> pg) {
        const Real inv_w = Real(params.sim_coeff) * g[0] * Real{2} / static_cast<Real>(n * d);
        const auto& a = ai->values;
        const auto& b = bi->values;
        if (pg[0]) {
          for (std::size_t i = 0; i < n * d; ++i) (*pg[0])[i] += inv_w * (a[i] - b[i]);
          detail::branch_backward(sa, n, d, params, g[0], *pg[0]);
        }
        if (pg[1]) {
          for (std::size_t i = 0; i < n * d; ++i) (*pg[1])[i] -= inv_w * (a[i] - b[i]);
          detail::branch_backward(sb, n, d, params, g[0], *pg[1]);
        }
      });
}

/// Mean softmax cross-entropy of logits[n,c] against integer labels.
template <typename Real>
BasicTensor<Real> cross_entropy(const BasicTensor<Real>& logits,
                                std::span<const std::int32_t> labels) {
  detail::require_matrix(logits, "cross_entropy");
  const std::size_t n = logits.shape()[0], c = logits.shape()[1];
  if (labels.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(n) + " rows");
  }
  if (n == 0) {
    throw ContractError("cross_entropy: empty batch");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw ContractError("cross_entropy: label " + std::to_string(labels[i]) +
                          " out of range [0, " + std::to_string(c) + ")");
    }
  }
  auto lv = logits.values();
  std::vector<Real> prob(n * c);
  Real total{0};
  for (std::size_t i = 0; i < n; ++i) {
    const Real* row = lv.data() + i * c;
    const Real mx = *std::max_element(row, row + c);
    Real z{0};
    for (std::size_t k = 0; k < c; ++k) {
      prob[i * c + k] = std::exp(row[k] - mx);
      z += prob[i * c + k];
    }
    for (std::size_t k = 0; k < c; ++k) prob[i * c + k] /= z;
    total += mx + std::log(z) - row[labels[i]];
  }
  std::vector<std::int32_t> lab(labels.begin(), labels.end());
  return BasicTensor<Real>::make_result(
      Shape{}, {total / static_cast<Real>(n)}, {logits},
      [n, c, prob = std::move(prob), lab = std::move(lab)](
          std::span<const Real> g, std::span<std::vector<Real>* const> pg) {
        const Real s = g[0] / static_cast<Real>(n);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t k = 0; k < c; ++k) {
            const Real onehot = static_cast<std::size_t>(lab[i]) == k ? Real{1} : Real{0};
            (*pg[0])[i * c + k] += s * (prob[i * c + k] - onehot);
          }
      });
}

}  // namespace dimlab
