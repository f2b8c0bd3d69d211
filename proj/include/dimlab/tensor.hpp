#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dimlab/errors.hpp"

namespace dimlab {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    os << (i ? "," : "") << shape[i];
  }
  os << ']';
  return os.str();
}

enum class Mode { train, eval };

/// Dense row-major tensor participating in a define-by-run reverse-mode graph.
///
/// BasicTensor is a cheap handle: copies share storage, gradient, and graph
/// node. Use clone() for an independent leaf copy. Operations record a node
/// only when at least one operand requires a gradient.
template <typename Real>
class BasicTensor {
 public:
  using value_type = Real;

  /// Receives the upstream gradient and one scratch buffer per parent
  /// (nullptr when the parent does not require a gradient). Buffers are
  /// pre-sized and must be accumulated into, never overwritten.
  using BackwardFn =
      std::function<void(std::span<const Real>, std::span<std::vector<Real>* const>)>;

  struct Impl;
  struct Node {
    std::vector<std::shared_ptr<Impl>> parents;
    BackwardFn backward;
  };
  struct Impl {
    Shape shape;
    std::vector<Real> values;
    std::vector<Real> grad;
    bool requires_grad = false;
    std::shared_ptr<Node> node;
  };

  BasicTensor() : impl_(std::make_shared<Impl>()) { impl_->shape = {0}; }

  BasicTensor(Shape shape, std::vector<Real> values, bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("tensor shape " + shape_str(shape) + " needs " +
                           std::to_string(shape_numel(shape)) +
                           " values, got " + std::to_string(values.size()));
    }
    impl_->shape = std::move(shape);
    impl_->values = std::move(values);
    impl_->requires_grad = requires_grad;
  }

  static BasicTensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return BasicTensor(std::move(shape), std::vector<Real>(n, Real{0}),
                       requires_grad);
  }

  static BasicTensor filled(Shape shape, Real value, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return BasicTensor(std::move(shape), std::vector<Real>(n, value),
                       requires_grad);
  }

  static BasicTensor scalar(Real value, bool requires_grad = false) {
    return BasicTensor(Shape{}, std::vector<Real>{value}, requires_grad);
  }

  /// Builds a [rows.size(), cols] matrix from nested rows.
  static BasicTensor matrix(const std::vector<std::vector<Real>>& rows,
                            bool requires_grad = false) {
    const std::size_t cols = rows.empty() ? 0 : rows.front().size();
    std::vector<Real> v;
    v.reserve(rows.size() * cols);
    for (const auto& r : rows) {
      if (r.size() != cols) {
        throw DimensionError("ragged rows in matrix literal");
      }
      v.insert(v.end(), r.begin(), r.end());
    }
    return BasicTensor({rows.size(), cols}, std::move(v), requires_grad);
  }

  [[nodiscard]] const Shape& shape() const noexcept { return impl_->shape; }
  [[nodiscard]] std::size_t dim() const noexcept { return impl_->shape.size(); }
  [[nodiscard]] std::size_t numel() const noexcept { return impl_->values.size(); }
  [[nodiscard]] bool is_scalar() const noexcept { return numel() == 1 && dim() <= 1; }
  [[nodiscard]] std::size_t rows() const { return require_matrix(), impl_->shape[0]; }
  [[nodiscard]] std::size_t cols() const { return require_matrix(), impl_->shape[1]; }

  [[nodiscard]] std::span<const Real> values() const noexcept { return impl_->values; }
  /// Mutable access for optimizers and perturbation checks. Does not touch the graph.
  [[nodiscard]] std::span<Real> mutable_values() noexcept { return impl_->values; }
  [[nodiscard]] std::span<Real> mutable_values() const noexcept { return impl_->values; }

  [[nodiscard]] Real item() const {
    if (numel() != 1) {
      throw ContractError("item() on tensor of shape " + shape_str(shape()));
    }
    return impl_->values[0];
  }
  [[nodiscard]] Real at(std::size_t i, std::size_t j) const {
    return impl_->values[i * cols() + j];
  }
  [[nodiscard]] Real operator[](std::size_t i) const { return impl_->values[i]; }

  [[nodiscard]] bool requires_grad() const noexcept { return impl_->requires_grad; }
  void set_requires_grad(bool on) noexcept { impl_->requires_grad = on; }
  [[nodiscard]] bool has_grad() const noexcept { return !impl_->grad.empty(); }
  [[nodiscard]] std::span<const Real> grad() const noexcept { return impl_->grad; }
  [[nodiscard]] std::span<Real> mutable_grad() noexcept { return impl_->grad; }
  void zero_grad() noexcept { std::fill(impl_->grad.begin(), impl_->grad.end(), Real{0}); }
  void clear_grad() noexcept { impl_->grad.clear(); }
  [[nodiscard]] bool is_leaf() const noexcept { return impl_->node == nullptr; }

  /// Leaf copy of the values with no graph history and no gradient.
  [[nodiscard]] BasicTensor detach() const {
    return BasicTensor(impl_->shape, impl_->values, false);
  }
  [[nodiscard]] BasicTensor clone() const {
    return BasicTensor(impl_->shape, impl_->values, impl_->requires_grad);
  }

  [[nodiscard]] const std::shared_ptr<Impl>& impl() const noexcept { return impl_; }
  [[nodiscard]] bool same_storage(const BasicTensor& other) const noexcept {
    return impl_ == other.impl_;
  }

  /// Creates the result of an operation. A node is attached only when some
  /// parent requires a gradient.
  static BasicTensor make_result(Shape shape, std::vector<Real> values,
                                 std::vector<BasicTensor> parents,
                                 BackwardFn backward) {
    BasicTensor out(std::move(shape), std::move(values), false);
    const bool needs = std::any_of(parents.begin(), parents.end(),
                                   [](const BasicTensor& p) { return p.requires_grad(); });
    if (needs) {
      auto node = std::make_shared<Node>();
      node->parents.reserve(parents.size());
      for (auto& p : parents) {
        node->parents.push_back(p.impl_);
      }
      node->backward = std::move(backward);
      out.impl_->node = std::move(node);
      out.impl_->requires_grad = true;
    }
    return out;
  }

 private:
  void require_matrix() const {
    if (impl_->shape.size() != 2) {
      throw DimensionError("expected a matrix, got shape " + shape_str(impl_->shape));
    }
  }

  std::shared_ptr<Impl> impl_;
};

using Tensor = BasicTensor<double>;
using TensorF = BasicTensor<float>;

namespace detail {

template <typename Real>
void require_same_shape(const BasicTensor<Real>& a, const BasicTensor<Real>& b,
                        const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <typename Real>
void require_matrix(const BasicTensor<Real>& a, const char* op) {
  if (a.dim() != 2) {
    throw DimensionError(std::string(op) + ": expected matrix, got " +
                         shape_str(a.shape()));
  }
}

}  // namespace detail

/// Propagates `seed` (same shape as `root`) backwards through the graph.
/// Every requires_grad ancestor accumulates its derivative into grad().
template <typename Real>
void backward_from(const BasicTensor<Real>& root, std::span<const Real> seed) {
  using Impl = typename BasicTensor<Real>::Impl;
  if (seed.size() != root.numel()) {
    throw DimensionError("backward seed has " + std::to_string(seed.size()) +
                         " entries for tensor of shape " + shape_str(root.shape()));
  }
  if (!root.requires_grad()) {
    return;
  }

  // Reverse post-order DFS gives consumers before producers.
  std::vector<Impl*> order;
  std::unordered_map<Impl*, int> state;
  std::vector<std::pair<Impl*, std::size_t>> stack;
  stack.emplace_back(root.impl().get(), 0);
  state[root.impl().get()] = 1;
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    if (impl->node && next < impl->node->parents.size()) {
      Impl* parent = impl->node->parents[next++].get();
      if (parent->requires_grad && state[parent] == 0) {
        state[parent] = 1;
        stack.emplace_back(parent, 0);
      }
      continue;
    }
    order.push_back(impl);
    stack.pop_back();
  }

  std::unordered_map<Impl*, std::vector<Real>> scratch;
  scratch[root.impl().get()].assign(seed.begin(), seed.end());
  std::vector<std::vector<Real>*> parent_bufs;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* impl = *it;
    auto found = scratch.find(impl);
    if (found == scratch.end()) {
      continue;
    }
    const std::vector<Real> g = std::move(found->second);
    scratch.erase(found);
    if (impl->grad.empty()) {
      impl->grad.assign(impl->values.size(), Real{0});
    }
    for (std::size_t i = 0; i < g.size(); ++i) {
      impl->grad[i] += g[i];
    }
    if (!impl->node) {
      continue;
    }
    parent_bufs.clear();
    for (auto& p : impl->node->parents) {
      if (p->requires_grad) {
        auto& buf = scratch[p.get()];
        if (buf.empty()) {
          buf.assign(p->values.size(), Real{0});
        }
        parent_bufs.push_back(&buf);
      } else {
        parent_bufs.push_back(nullptr);
      }
    }
    impl->node->backward(g, parent_bufs);
  }
}

/// Backpropagates a scalar loss. Gradients accumulate across calls.
template <typename Real>
void backward(const BasicTensor<Real>& loss) {
  if (!loss.is_scalar()) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        shape_str(loss.shape()));
  }
  const Real one{1};
  backward_from(loss, std::span<const Real>(&one, 1));
}

// ---------------------------------------------------------------------------
// Elementwise and reduction operations
// ---------------------------------------------------------------------------

template <typename Real>
BasicTensor<Real> add(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<Real> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return BasicTensor<Real>::make_result(
      a.shape(), std::move(out), {a, b},
      [](std::span<const Real> g, std::span<std::vector<Real>* const> pg) {
        for (auto* buf : pg) {
          if (!buf) continue;
          for (std::size_t i = 0; i < g.size(); ++i) (*buf)[i] += g[i];
        }
      });
}

template <typename Real>
BasicTensor<Real> sub(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<Real> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return BasicTensor<Real>::make_result(
      a.shape(), std::move(out), {a, b},
      [](std::span<const Real> g, std::span<std::vector<Real>* const> pg) {
        if (pg[0]) for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
        if (pg[1]) for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] -= g[i];
      });
}

template <typename Real>
BasicTensor<Real> mul(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  detail::require_same_shape(a, b, "mul");
  auto av = a.values();
  auto bv = b.values();
  std::vector<Real> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto ai = a.impl();
  auto bi = b.impl();
  return BasicTensor<Real>::make_result(
      a.shape(), std::move(out), {a, b},
      [ai, bi](std::span<const Real> g, std::span<std::vector<Real>* const> pg) {
        if (pg[0]) for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * bi->values[i];
        if (pg[1]) for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] += g[i] * ai->values[i];
      });
}

template <typename Real>
BasicTensor<Real> scale(const BasicTensor<Real>& a, Real factor) {
  std::vector<Real> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= factor;
  return BasicTensor<Real>::make_result(
      a.shape(), std::move(out), {a},
      [factor](std::span<const Real> g, std::span<std::vector<Real>* const> pg) {
        for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += factor * g[i];
      });
}

template <typename Real>
BasicTensor<Real> square(const BasicTensor<Real>& a) {
  return mul(a, a);
}

template <typename Real>
BasicTensor<Real> sum(const BasicTensor<Real>& a) {
  Real total{0};
  for (Real v : a.values()) total += v;
  const std::size_t n = a.numel();
  return BasicTensor<Real>::make_result(
      Shape{}, {total}, {a},
      [n](std::span<const Real> g, std::span<std::vector<Real>* const> pg) {
        for (std::size_t i = 0; i < n; ++i) (*pg[0])[i] += g[0];
      });
}

template <typename Real>
BasicTensor<Real> mean(const BasicTensor<Real>& a) {
  if (a.numel() == 0) {
    throw ContractError("mean of empty tensor");
  }
  return scale(sum(a), Real{1} / static_cast<Real>(a.numel()));
}

/// Elementwise max(0, x). The subgradient at exactly 0 is 0.
template <typename Real>
BasicTensor<Real> relu(const BasicTensor<Real>& x) {
  std::vector<Real> out(x.values().begin(), x.values().end());
  for (auto& v : out) v = v > Real{0} ? v : Real{0};
  auto xi = x.impl();
  return BasicTensor<Real>::make_result(
      x.shape(), std::move(out), {x},
      [xi](std::span<const Real> g, std::span<std::vector<Real>* const> pg) {
        const auto& xv = xi->values;
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (xv[i] > Real{0}) (*pg[0])[i] += g[i];
        }
      });
}

// ---------------------------------------------------------------------------
// Matrix operations
// ---------------------------------------------------------------------------

namespace detail {

/// out[n,m] += a[n,p] * b[p,m]
template <typename Real>
void gemm_nn(std::size_t n, std::size_t p, std::size_t m, const Real* a,
             const Real* b, Real* out) {
  for (std::size_t i = 0; i < n; ++i) {
    Real* orow = out + i * m;
    const Real* arow = a + i * p;
    for (std::size_t k = 0; k < p; ++k) {
      const Real aik = arow[k];
      if (aik == Real{0}) continue;
      const Real* brow = b + k * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += aik * brow[j];
    }
  }
}

/// out[n,p] += g[n,m] * b[p,m]^T
template <typename Real>
void gemm_nt(std::size_t n, std::size_t m, std::size_t p, const Real* g,
             const Real* b, Real* out) {
  for (std::size_t i = 0; i < n; ++i) {
    const Real* grow = g + i * m;
    Real* orow = out + i * p;
    for (std::size_t k = 0; k < p; ++k) {
      const Real* brow = b + k * m;
      Real acc{0};
      for (std::size_t j = 0; j < m; ++j) acc += grow[j] * brow[j];
      orow[k] += acc;
    }
  }
}

/// out[p,m] += a[n,p]^T * g[n,m]
template <typename Real>
void gemm_tn(std::size_t n, std::size_t p, std::size_t m, const Real* a,
             const Real* g, Real* out) {
  for (std::size_t i = 0; i < n; ++i) {
    const Real* arow = a + i * p;
    const Real* grow = g + i * m;
    for (std::size_t k = 0; k < p; ++k) {
      const Real aik = arow[k];
      if (aik == Real{0}) continue;
      Real* orow = out + k * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += aik * grow[j];
    }
  }
}

}  // namespace detail

template <typename Real>
BasicTensor<Real> matmul(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  if (a.dim() != 2 || b.dim() != 2 || a.shape()[1] != b.shape()[0]) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  const std::size_t n = a.shape()[0], p = a.shape()[1], m = b.shape()[1];
  std::vector<Real> out(n * m, Real{0});
  detail::gemm_nn(n, p, m, a.values().data(), b.values().data(), out.data());
  auto ai = a.impl();
  auto bi = b.impl();
  return BasicTensor<Real>::make_result(
      {n, m}, std::move(out), {a, b},
      [ai, bi, n, p, m](std::span<const Real> g, std::span<std::vector<Real>* const> pg) {
        if (pg[0]) detail::gemm_nt(n, m, p, g.data(), bi->values.data(), pg[0]->data());
        if (pg[1]) detail::gemm_tn(n, p, m, ai->values.data(), g.data(), pg[1]->data());
      });
}

template <typename Real>
BasicTensor<Real> transpose(const BasicTensor<Real>& a) {
  detail::require_matrix(a, "transpose");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  std::vector<Real> out(r * c);
  auto av = a.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  return BasicTensor<Real>::make_result(
      {c, r}, std::move(out), {a},
      [r, c](std::span<const Real> g, std::span<std::vector<Real>* const> pg) {
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) (*pg[0])[i * c + j] += g[j * r + i];
      });
}

/// Row-wise broadcast x[n,d] + bias[d].
template <typename Real>
BasicTensor<Real> add_bias(const BasicTensor<Real>& x, const BasicTensor<Real>& bias) {
  detail::require_matrix(x, "add_bias");
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  if (bias.numel() != d || bias.dim() != 1) {
    throw DimensionError("add_bias: bias shape " + shape_str(bias.shape()) +
                         " does not match " + shape_str(x.shape()));
  }
  std::vector<Real> out(x.values().begin(), x.values().end());
  auto bv = bias.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] += bv[j];
  return BasicTensor<Real>::make_result(
      x.shape(), std::move(out), {x, bias},
      [n, d](std::span<const Real> g, std::span<std::vector<Real>* const> pg) {
        if (pg[0]) for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
        if (pg[1]) {
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) (*pg[1])[j] += g[i * d + j];
        }
      });
}

/// x[n,p] * weight[p,m] + bias[m]
template <typename Real>
BasicTensor<Real> affine(const BasicTensor<Real>& x, const BasicTensor<Real>& weight,
                         const BasicTensor<Real>& bias) {
  return add_bias(matmul(x, weight), bias);
}

/// Stacks a[n1,d] over b[n2,d].
template <typename Real>
BasicTensor<Real> concat_rows(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
  detail::require_matrix(a, "concat_rows");
  detail::require_matrix(b, "concat_rows");
  if (a.shape()[1] != b.shape()[1]) {
    throw DimensionError("concat_rows: column mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
  const std::size_t na = a.numel();
  std::vector<Real> out;
  out.reserve(a.numel() + b.numel());
  out.insert(out.end(), a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  return BasicTensor<Real>::make_result(
      {a.shape()[0] + b.shape()[0], a.shape()[1]}, std::move(out), {a, b},
      [na](std::span<const Real> g, std::span<std::vector<Real>* const> pg) {
        if (pg[0]) for (std::size_t i = 0; i < na; ++i) (*pg[0])[i] += g[i];
        if (pg[1]) for (std::size_t i = na; i < g.size(); ++i) (*pg[1])[i - na] += g[i];
      });
}

/// Divides each row by max(||row||_2, 1e-12).
template <typename Real>
BasicTensor<Real> l2_normalize(const BasicTensor<Real>& x) {
  detail::require_matrix(x, "l2_normalize");
  constexpr Real floor_norm = Real(1e-12);
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  std::vector<Real> out(x.values().begin(), x.values().end());
  std::vector<Real> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    Real ss{0};
    for (std::size_t j = 0; j < d; ++j) ss += out[i * d + j] * out[i * d + j];
    const Real r = std::max(std::sqrt(ss), floor_norm);
    norms[i] = r;
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] /= r;
  }
  std::vector<Real> unit = out;
  return BasicTensor<Real>::make_result(
      x.shape(), std::move(out), {x},
      [n, d, unit = std::move(unit), norms = std::move(norms), floor_norm](
          std::span<const Real> g, std::span<std::vector<Real>* const> pg) {
        auto& gx = *pg[0];
        for (std::size_t i = 0; i < n; ++i) {
          const Real r = norms[i];
          const Real* u = unit.data() + i * d;
          const Real* gi = g.data() + i * d;
          if (r > floor_norm) {
            Real ug{0};
            for (std::size_t j = 0; j < d; ++j) ug += u[j] * gi[j];
            for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += (gi[j] - u[j] * ug) / r;
          } else {
            for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += gi[j] / r;
          }
        }
      });
}

/// Batch-norm running statistics, owned by the network.
template <typename Real>
struct RunningStats {
  BasicTensor<Real> mean;
  BasicTensor<Real> var;
};

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Batch normalization over rows of x[n,d] with per-column affine.
///
/// Train mode normalizes with the batch mean and biased (1/n) variance and
/// moves the running statistics by momentum 0.1; the running variance is
/// fed the unbiased batch variance. Eval mode uses the running statistics.
template <typename Real>
BasicTensor<Real> batch_norm(const BasicTensor<Real>& x, const BasicTensor<Real>& gamma,
                             const BasicTensor<Real>& beta, Mode mode,
                             RunningStats<Real>& stats) {
  detail::require_matrix(x, "batch_norm");
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  if (gamma.numel() != d || beta.numel() != d || stats.mean.numel() != d ||
      stats.var.numel() != d) {
    throw DimensionError("batch_norm: parameter width does not match input " +
                         shape_str(x.shape()));
  }
  const Real eps = Real(kBatchNormEpsilon);
  auto xv = x.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  std::vector<Real> out(n * d);

  if (mode == Mode::eval) {
    std::vector<Real> inv_std(d);
    auto rm = stats.mean.values();
    auto rv = stats.var.values();
    std::vector<Real> xhat(n * d);
    for (std::size_t j = 0; j < d; ++j) inv_std[j] = Real{1} / std::sqrt(rv[j] + eps);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        xhat[i * d + j] = (xv[i * d + j] - rm[j]) * inv_std[j];
        out[i * d + j] = gv[j] * xhat[i * d + j] + bv[j];
      }
    auto gi = gamma.impl();
    return BasicTensor<Real>::make_result(
        x.shape(), std::move(out), {x, gamma, beta},
        [n, d, gi, inv_std = std::move(inv_std), xhat = std::move(xhat)](
            std::span<const Real> g, std::span<std::vector<Real>* const> pg) {
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) {
              const Real gij = g[i * d + j];
              if (pg[0]) (*pg[0])[i * d + j] += gij * gi->values[j] * inv_std[j];
              if (pg[1]) (*pg[1])[j] += gij * xhat[i * d + j];
              if (pg[2]) (*pg[2])[j] += gij;
            }
        });
  }

  if (n < 2) {
    throw BatchTooSmallError("batch_norm in train mode needs at least 2 rows, got " +
                             std::to_string(n));
  }
  std::vector<Real> mu(d, Real{0}), var(d, Real{0}), inv_std(d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mu[j] += xv[i * d + j];
  for (auto& m : mu) m /= static_cast<Real>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const Real c = xv[i * d + j] - mu[j];
      var[j] += c * c;
    }
  for (auto& v : var) v /= static_cast<Real>(n);
  for (std::size_t j = 0; j < d; ++j) inv_std[j] = Real{1} / std::sqrt(var[j] + eps);

  std::vector<Real> xhat(n * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (xv[i * d + j] - mu[j]) * inv_std[j];
      out[i * d + j] = gv[j] * xhat[i * d + j] + bv[j];
    }

  {
    const Real mom = Real(kBatchNormMomentum);
    const Real unbias = static_cast<Real>(n) / static_cast<Real>(n - 1);
    auto rm = stats.mean.mutable_values();
    auto rv = stats.var.mutable_values();
    for (std::size_t j = 0; j < d; ++j) {
      rm[j] = (Real{1} - mom) * rm[j] + mom * mu[j];
      rv[j] = (Real{1} - mom) * rv[j] + mom * var[j] * unbias;
    }
  }

  auto gi = gamma.impl();
  return BasicTensor<Real>::make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [n, d, gi, inv_std = std::move(inv_std), xhat = std::move(xhat)](
          std::span<const Real> g, std::span<std::vector<Real>* const> pg) {
        std::vector<Real> sum_g(d, Real{0}), sum_gx(d, Real{0});
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) {
            sum_g[j] += g[i * d + j];
            sum_gx[j] += g[i * d + j] * xhat[i * d + j];
          }
        if (pg[1]) for (std::size_t j = 0; j < d; ++j) (*pg[1])[j] += sum_gx[j];
        if (pg[2]) for (std::size_t j = 0; j < d; ++j) (*pg[2])[j] += sum_g[j];
        if (pg[0]) {
          const Real inv_n = Real{1} / static_cast<Real>(n);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) {
              const Real k = gi->values[j] * inv_std[j];
              (*pg[0])[i * d + j] +=
                  k * (g[i * d + j] - inv_n * sum_g[j] - xhat[i * d + j] * inv_n * sum_gx[j]);
            }
        }
      });
}

}  // namespace dimlab
