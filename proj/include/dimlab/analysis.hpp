#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <set>
#include <string>
#include <vector>

#include "dimlab/data.hpp"
#include "dimlab/errors.hpp"
#include "dimlab/evaluation.hpp"
#include "dimlab/model.hpp"
#include "dimlab/rng.hpp"
#include "dimlab/tensor.hpp"

namespace dimlab {

// ---------------------------------------------------------------------------
// Sparsity and binarization
// ---------------------------------------------------------------------------

struct SparsitySummary {
  double median = 0.0;
  double mean = 0.0;
  double frac_at_least_half = 0.0;
};

struct SparsityProfile {
  std::vector<double> per_example_zero_fraction;
  std::vector<double> sorted_curve;
  std::vector<std::size_t> per_dimension_zero_count;
  SparsitySummary summary;
};

inline SparsitySummary summarize_zero_fractions(std::vector<double> sorted) {
  std::sort(sorted.begin(), sorted.end());
  SparsitySummary s;
  const std::size_t n = sorted.size();
  if (n == 0) return s;
  s.median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  double total = 0.0;
  std::size_t half = 0;
  for (double v : sorted) {
    total += v;
    if (v >= 0.5) ++half;
  }
  s.mean = total / static_cast<double>(n);
  s.frac_at_least_half = static_cast<double>(half) / static_cast<double>(n);
  return s;
}

/// Counts exact zeros (post-ReLU units emit exact 0.0; no threshold).
inline SparsityProfile sparsity_profile(const RepresentationMatrix& reps) {
  if (reps.n == 0 || reps.d == 0) {
    throw ContractError("sparsity_profile: empty representation matrix");
  }
  SparsityProfile p;
  p.per_example_zero_fraction.resize(reps.n);
  p.per_dimension_zero_count.assign(reps.d, 0);
  for (std::size_t i = 0; i < reps.n; ++i) {
    std::size_t zeros = 0;
    for (std::size_t j = 0; j < reps.d; ++j) {
      if (reps.at(i, j) == 0.0) {
        ++zeros;
        ++p.per_dimension_zero_count[j];
      }
    }
    p.per_example_zero_fraction[i] = static_cast<double>(zeros) / static_cast<double>(reps.d);
  }
  p.sorted_curve = p.per_example_zero_fraction;
  std::sort(p.sorted_curve.begin(), p.sorted_curve.end());
  p.summary = summarize_zero_fractions(p.sorted_curve);
  return p;
}

/// Maps every strictly positive entry to 1 and zeros to 0.
inline RepresentationMatrix binarize(const RepresentationMatrix& reps) {
  RepresentationMatrix out = reps;
  for (std::size_t k = 0; k < out.values.size(); ++k) {
    const double v = out.values[k];
    if (v < 0.0 || std::isnan(v)) {
      throw ContractError("binarize: entry " + std::to_string(k) +
                          " is negative; input is not a post-ReLU representation");
    }
    out.values[k] = v > 0.0 ? 1.0 : 0.0;
  }
  out.source = reps.source + "#binarized";
  return out;
}

inline std::size_t count_distinct_rows(const RepresentationMatrix& reps) {
  std::set<std::vector<double>> rows;
  for (std::size_t i = 0; i < reps.n; ++i) {
    auto r = reps.row(i);
    rows.emplace(r.begin(), r.end());
  }
  return rows.size();
}

// ---------------------------------------------------------------------------
// Sign-quantization collisions under the symmetric independent model
// ---------------------------------------------------------------------------

struct CollisionEstimate {
  std::size_t k = 0;
  std::size_t n_pairs = 0;
  double empirical_rate = 0.0;
  double analytic_rate = 0.0;
  double std_error = 0.0;
};

/// Draws pairs of independent standard-Gaussian K-vectors and counts pairs
/// whose sign patterns agree in every coordinate. Analytic rate is 0.5^K.
inline CollisionEstimate collision_probability_mc(std::size_t k, std::size_t n_pairs, Rng& rng) {
  if (k < 1 || n_pairs < 1) {
    throw ContractError("collision_probability_mc: K and n_pairs must be >= 1");
  }
  std::size_t collisions = 0;
  for (std::size_t p = 0; p < n_pairs; ++p) {
    bool same = true;
    for (std::size_t j = 0; j < k; ++j) {
      const double a = rng.normal();
      const double b = rng.normal();
      if ((a > 0.0) != (b > 0.0)) same = false;
    }
    if (same) ++collisions;
  }
  CollisionEstimate e;
  e.k = k;
  e.n_pairs = n_pairs;
  e.empirical_rate = static_cast<double>(collisions) / static_cast<double>(n_pairs);
  e.analytic_rate = std::pow(0.5, static_cast<double>(k));
  e.std_error = std::sqrt(e.analytic_rate * (1.0 - e.analytic_rate) / static_cast<double>(n_pairs));
  return e;
}

// ---------------------------------------------------------------------------
// Per-dimension Jacobian norms of the backbone
// ---------------------------------------------------------------------------

struct JacobianNorms {
  std::vector<double> per_dimension;  // D entries, each averaged over the batch
  double mean = 0.0;
};

/// For each representation dimension j, backpropagates the j-th unit
/// covector from every row at once; row s of the input gradient is then
/// d h_{s,j} / d x_s, whose L2 norm is averaged over the batch.
template <typename Real>
JacobianNorms jacobian_dim_norms(const Network<Real>& net, const BasicTensor<Real>& inputs) {
  if (inputs.dim() != 2 || inputs.shape()[1] != net.config.input_dim) {
    throw DimensionError("jacobian_dim_norms: input shape " + shape_str(inputs.shape()) +
                         " does not match input_dim " + std::to_string(net.config.input_dim));
  }
  const std::size_t n = inputs.shape()[0];
  if (n == 0) throw ContractError("jacobian_dim_norms: empty batch");
  Network<Real> frozen = net.clone();
  for (auto& p : frozen.parameters()) p.tensor.set_requires_grad(false);
  auto x = inputs.detach();
  x.set_requires_grad(true);
  const auto h = backbone_forward(frozen, x, Mode::eval);
  const std::size_t d = h.shape()[1];
  const std::size_t in = x.shape()[1];

  JacobianNorms out;
  out.per_dimension.assign(d, 0.0);
  std::vector<Real> seed(n * d, Real{0});
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t s = 0; s < n; ++s) seed[s * d + j] = Real{1};
    x.clear_grad();
    backward_from(h, std::span<const Real>(seed));
    for (std::size_t s = 0; s < n; ++s) seed[s * d + j] = Real{0};
    double acc = 0.0;
    if (x.has_grad()) {
      const auto g = x.grad();
      for (std::size_t s = 0; s < n; ++s) {
        double ss = 0.0;
        for (std::size_t c = 0; c < in; ++c) {
          const double v = static_cast<double>(g[s * in + c]);
          ss += v * v;
        }
        acc += std::sqrt(ss);
      }
    }
    out.per_dimension[j] = acc / static_cast<double>(n);
  }
  double total = 0.0;
  for (double v : out.per_dimension) total += v;
  out.mean = total / static_cast<double>(d);
  return out;
}

// ---------------------------------------------------------------------------
// Gradient-subspace confinement for a linear backbone under a frozen linear projector
// ---------------------------------------------------------------------------

/// Orthonormal basis (columns, row-major [rows, rank]) of the column space of
/// a [rows, cols] matrix, via Householder QR. Columns whose diagonal falls
/// below tol * max diagonal are treated as dependent.
inline std::vector<double> orthonormal_column_basis(std::span<const double> a, std::size_t rows,
                                                    std::size_t cols, std::size_t& rank,
                                                    double tol = 1e-12) {
  std::vector<double> r(a.begin(), a.end());
  const std::size_t steps = std::min(rows, cols);
  std::vector<std::vector<double>> reflectors;
  std::vector<double> diag;
  for (std::size_t k = 0; k < steps; ++k) {
    std::vector<double> v(rows, 0.0);
    double norm = 0.0;
    for (std::size_t i = k; i < rows; ++i) {
      v[i] = r[i * cols + k];
      norm += v[i] * v[i];
    }
    norm = std::sqrt(norm);
    const double alpha = v[k] > 0 ? -norm : norm;
    v[k] -= alpha;
    double vnorm = 0.0;
    for (std::size_t i = k; i < rows; ++i) vnorm += v[i] * v[i];
    if (vnorm > 0.0) {
      for (std::size_t c = k; c < cols; ++c) {
        double dot = 0.0;
        for (std::size_t i = k; i < rows; ++i) dot += v[i] * r[i * cols + c];
        const double f = 2.0 * dot / vnorm;
        for (std::size_t i = k; i < rows; ++i) r[i * cols + c] -= f * v[i];
      }
    }
    reflectors.push_back(std::move(v));
    diag.push_back(std::abs(r[k * cols + k]));
  }
  const double dmax = diag.empty() ? 0.0 : *std::max_element(diag.begin(), diag.end());
  rank = 0;
  for (double dv : diag) {
    if (dv > tol * dmax && dv > 0.0) ++rank;
  }
  // Q's leading columns: apply reflectors in reverse to unit vectors.
  std::vector<double> q(rows * rank, 0.0);
  std::size_t col = 0;
  for (std::size_t k = 0; k < steps && col < rank; ++k) {
    if (!(diag[k] > tol * dmax && diag[k] > 0.0)) continue;
    std::vector<double> e(rows, 0.0);
    e[k] = 1.0;
    for (std::size_t t = reflectors.size(); t-- > 0;) {
      const auto& v = reflectors[t];
      double vnorm = 0.0, dot = 0.0;
      for (std::size_t i = t; i < rows; ++i) {
        vnorm += v[i] * v[i];
        dot += v[i] * e[i];
      }
      if (vnorm == 0.0) continue;
      const double f = 2.0 * dot / vnorm;
      for (std::size_t i = t; i < rows; ++i) e[i] -= f * v[i];
    }
    for (std::size_t i = 0; i < rows; ++i) q[i * rank + col] = e[i];
    ++col;
  }
  return q;
}

/// Projects every column of m[rows, cols] onto the orthogonal complement of
/// the span of basis q[rows, rank]: m - q (q^T m).
inline std::vector<double> project_out(std::span<const double> m, std::size_t rows,
                                       std::size_t cols, std::span<const double> q,
                                       std::size_t rank) {
  std::vector<double> out(m.begin(), m.end());
  for (std::size_t c = 0; c < cols; ++c) {
    for (std::size_t k = 0; k < rank; ++k) {
      double dot = 0.0;
      for (std::size_t i = 0; i < rows; ++i) dot += q[i * rank + k] * m[i * cols + c];
      for (std::size_t i = 0; i < rows; ++i) out[i * cols + c] -= dot * q[i * rank + k];
    }
  }
  return out;
}

/// Loss over embeddings, one [n, K] tensor per view.
template <typename Real>
using EmbeddingLoss = std::function<BasicTensor<Real>(const std::vector<BasicTensor<Real>>&)>;

/// Embeds each view as X V^T W^T for a linear backbone V[D, d_in] and a
/// frozen linear projector W[K, D].
template <typename Real>
BasicTensor<Real> linear_embedding_loss(const BasicTensor<Real>& v, const BasicTensor<Real>& w,
                                        const std::vector<BasicTensor<Real>>& views,
                                        const EmbeddingLoss<Real>& loss) {
  const auto wt = transpose(w.detach());
  const auto vt = transpose(v);
  std::vector<BasicTensor<Real>> z;
  z.reserve(views.size());
  for (const auto& x : views) z.push_back(matmul(matmul(x, vt), wt));
  return loss(z);
}

template <typename Real>
void require_confinement_shapes(const BasicTensor<Real>& v, const BasicTensor<Real>& w) {
  if (v.dim() != 2 || w.dim() != 2 || w.shape()[1] != v.shape()[0]) {
    throw DimensionError("gradient_confinement_check: V " + shape_str(v.shape()) + " and W " +
                         shape_str(w.shape()) + " are incompatible (need V[D,d], W[K,D])");
  }
  if (w.shape()[0] >= v.shape()[0]) {
    throw ConfigError("gradient_confinement_check: needs K < D (K = " +
                      std::to_string(w.shape()[0]) + ", D = " + std::to_string(v.shape()[0]) +
                      "); otherwise the complement of span(W^T) may be trivial");
  }
}

/// ||G_perp||_F / max(||G||_F, 1e-30) where G = dloss/dV and G_perp is G with
/// every column projected onto the orthogonal complement of span(W^T).
template <typename Real>
double gradient_confinement_check(const BasicTensor<Real>& v, const BasicTensor<Real>& w,
                                  const std::vector<BasicTensor<Real>>& views,
                                  const EmbeddingLoss<Real>& loss) {
  require_confinement_shapes(v, w);
  const std::size_t dd = v.shape()[0], din = v.shape()[1], k = w.shape()[0];
  auto vv = v.detach();
  vv.set_requires_grad(true);
  backward(linear_embedding_loss(vv, w, views, loss));
  std::vector<double> g(dd * din, 0.0);
  if (vv.has_grad()) {
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<double>(vv.grad()[i]);
  }
  // span(W^T): W^T is [D, K]
  std::vector<double> wt(dd * k);
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t c = 0; c < dd; ++c) wt[c * k + r] = static_cast<double>(w.values()[r * dd + c]);
  std::size_t rank = 0;
  const auto q = orthonormal_column_basis(wt, dd, k, rank);
  const auto perp = project_out(g, dd, din, q, rank);
  double gn = 0.0, pn = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    gn += g[i] * g[i];
    pn += perp[i] * perp[i];
  }
  return std::sqrt(pn) / std::max(std::sqrt(gn), 1e-30);
}

/// Largest |entry| of (V_now - V_init) projected onto the complement of span(W^T).
template <typename Real>
double confinement_drift(const BasicTensor<Real>& v_init, const BasicTensor<Real>& v_now,
                         const BasicTensor<Real>& w) {
  require_confinement_shapes(v_init, w);
  detail::require_same_shape(v_init, v_now, "confinement_drift");
  const std::size_t dd = v_init.shape()[0], din = v_init.shape()[1], k = w.shape()[0];
  std::vector<double> delta(dd * din);
  for (std::size_t i = 0; i < delta.size(); ++i) {
    delta[i] = static_cast<double>(v_now.values()[i]) - static_cast<double>(v_init.values()[i]);
  }
  std::vector<double> wt(dd * k);
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t c = 0; c < dd; ++c) wt[c * k + r] = static_cast<double>(w.values()[r * dd + c]);
  std::size_t rank = 0;
  const auto q = orthonormal_column_basis(wt, dd, k, rank);
  const auto perp = project_out(delta, dd, din, q, rank);
  double worst = 0.0;
  for (double x : perp) worst = std::max(worst, std::abs(x));
  return worst;
}

// ---------------------------------------------------------------------------
// CSV emission
// ---------------------------------------------------------------------------

/// One row per example: index, label, zero_fraction, sorted_zero_fraction.
inline void write_sparsity_examples_csv(const SparsityProfile& p, const RepresentationMatrix& reps,
                                        const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open " + path);
  os << std::setprecision(17);
  os << "index,label,zero_fraction,sorted_zero_fraction\n";
  for (std::size_t i = 0; i < p.per_example_zero_fraction.size(); ++i) {
    os << i << ',' << reps.labels[i] << ',' << p.per_example_zero_fraction[i] << ','
       << p.sorted_curve[i] << '\n';
  }
}

/// One row per dimension: dim, zero_count, zero_rate.
inline void write_sparsity_dimensions_csv(const SparsityProfile& p, std::size_t n,
                                          const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open " + path);
  os << std::setprecision(17);
  os << "dim,zero_count,zero_rate\n";
  for (std::size_t j = 0; j < p.per_dimension_zero_count.size(); ++j) {
    os << j << ',' << p.per_dimension_zero_count[j] << ','
       << static_cast<double>(p.per_dimension_zero_count[j]) / static_cast<double>(n) << '\n';
  }
}

}  // namespace dimlab
