#pragma once

// Plain scalar-loop reference implementations. They share no code with the
// tensor library and exist only to cross-check it (tests and `verify`).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

namespace dimlab::oracle {

/// Row-major [rows, cols] matrix of doubles.
struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> v;

  double operator()(std::size_t i, std::size_t j) const { return v[i * cols + j]; }
  double& operator()(std::size_t i, std::size_t j) { return v[i * cols + j]; }
};

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat c{a.rows, b.cols, std::vector<double>(a.rows * b.cols, 0.0)};
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < b.cols; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

inline double ntxent(const Mat& za, const Mat& zb, double tau) {
  const std::size_t n = za.rows, d = za.cols, m = 2 * n;
  std::vector<std::vector<double>> u(m, std::vector<double>(d));
  for (std::size_t i = 0; i < m; ++i) {
    const Mat& src = i < n ? za : zb;
    const std::size_t r = i < n ? i : i - n;
    double nn = 0.0;
    for (std::size_t j = 0; j < d; ++j) nn += src(r, j) * src(r, j);
    nn = std::max(std::sqrt(nn), 1e-12);
    for (std::size_t j = 0; j < d; ++j) u[i][j] = src(r, j) / nn;
  }
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t pos = i < n ? i + n : i - n;
    std::vector<double> s(m);
    double top = -1e300;
    for (std::size_t k = 0; k < m; ++k) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += u[i][j] * u[k][j];
      s[k] = dot / tau;
      if (k != i) top = std::max(top, s[k]);
    }
    double denom = 0.0;
    for (std::size_t k = 0; k < m; ++k)
      if (k != i) denom += std::exp(s[k] - top);
    total += -(s[pos] - top - std::log(denom));
  }
  return total / static_cast<double>(m);
}

struct VicregParts {
  double invariance = 0.0;
  double variance = 0.0;
  double covariance = 0.0;
  double total = 0.0;
};

inline VicregParts vicreg(const Mat& za, const Mat& zb, double sim, double std_coeff,
                          double cov, double eps, double target) {
  const std::size_t n = za.rows, d = za.cols;
  VicregParts out;
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = za(i, j) - zb(i, j);
      row += diff * diff;
    }
    out.invariance += row / static_cast<double>(d);
  }
  out.invariance /= static_cast<double>(n);

  for (const Mat* z : {&za, &zb}) {
    std::vector<double> mean(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) mean[j] += (*z)(i, j);
    for (auto& x : mean) x /= static_cast<double>(n);
    double var_term = 0.0, cov_term = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      for (std::size_t k = 0; k < d; ++k) {
        double c = 0.0;
        for (std::size_t i = 0; i < n; ++i) c += ((*z)(i, j) - mean[j]) * ((*z)(i, k) - mean[k]);
        c /= static_cast<double>(n - 1);
        if (j == k) {
          var_term += std::max(0.0, target - std::sqrt(c + eps));
        } else {
          cov_term += c * c;
        }
      }
    }
    out.variance += var_term / static_cast<double>(d);
    out.covariance += cov_term / static_cast<double>(d);
  }
  out.total = sim * out.invariance + std_coeff * out.variance + cov * out.covariance;
  return out;
}

inline double cross_entropy(const Mat& logits, std::span<const std::int32_t> labels) {
  double total = 0.0;
  for (std::size_t i = 0; i < logits.rows; ++i) {
    double top = logits(i, 0);
    for (std::size_t j = 1; j < logits.cols; ++j) top = std::max(top, logits(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < logits.cols; ++j) s += std::exp(logits(i, j) - top);
    total += top + std::log(s) - logits(i, static_cast<std::size_t>(labels[i]));
  }
  return total / static_cast<double>(logits.rows);
}

}  // namespace dimlab::oracle
