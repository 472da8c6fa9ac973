#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "flexspike/ops.hpp"
#include "flexspike/tensor.hpp"

namespace flexspike {

// ||features^T (features*coeffs - targets)|| — zero when the residual is
// orthogonal to the column space.
inline double least_squares_normal_residual(const Tensor& features, const Tensor& coeffs,
                                            const Tensor& targets) {
  const std::size_t m = features.dim(0), p = features.dim(1);
  Tensor resid({m});
  for (std::size_t i = 0; i < m; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < p; ++j) acc += features.at2(i, j) * coeffs[j];
    resid[i] = acc - targets[i];
  }
  double out = 0.0;
  for (std::size_t j = 0; j < p; ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < m; ++i) acc += features.at2(i, j) * resid[i];
    out += acc * acc;
  }
  return std::sqrt(out);
}

// Minimises ||features*coeffs - targets||^2 via the normal equations. The
// systems fitted here are small and well conditioned; a ridge term (1e-8 on
// the Gram diagonal) is retried once if plain elimination breaks down, and a
// genuinely rank-deficient system is reported together with its residual.
inline Tensor least_squares_fit(const Tensor& features, const Tensor& targets) {
  if (features.ndim() != 2) throw ConfigError("least_squares_fit: features must be [m, p]");
  const std::size_t m = features.dim(0), p = features.dim(1);
  if (targets.size() != m)
    throw ConfigError("least_squares_fit: target length " + std::to_string(targets.size()) +
                      " != row count " + std::to_string(m));
  if (m < p) throw ConfigError("least_squares_fit: need at least as many samples as parameters");

  Tensor gram = matmul(transpose2(features), features);  // [p, p]
  Tensor rhs({p});
  for (std::size_t j = 0; j < p; ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < m; ++i) acc += features.at2(i, j) * targets[i];
    rhs[j] = acc;
  }

  auto solve = [&](double ridge) -> std::pair<bool, Tensor> {
    // Gaussian elimination with partial pivoting on a copy.
    Tensor a = gram;
    for (std::size_t i = 0; i < p; ++i) a.at2(i, i) += ridge;
    Tensor x = rhs;
    std::vector<std::size_t> perm(p);
    for (std::size_t i = 0; i < p; ++i) perm[i] = i;
    for (std::size_t col = 0; col < p; ++col) {
      std::size_t piv = col;
      for (std::size_t r = col + 1; r < p; ++r)
        if (std::fabs(a.at2(r, col)) > std::fabs(a.at2(piv, col))) piv = r;
      if (std::fabs(a.at2(piv, col)) < 1e-14) return {false, Tensor()};
      if (piv != col) {
        for (std::size_t j = 0; j < p; ++j) std::swap(a.at2(piv, j), a.at2(col, j));
        std::swap(x[piv], x[col]);
      }
      for (std::size_t r = col + 1; r < p; ++r) {
        const double f = a.at2(r, col) / a.at2(col, col);
        if (f == 0.0) continue;
        for (std::size_t j = col; j < p; ++j) a.at2(r, j) -= f * a.at2(col, j);
        x[r] -= f * x[col];
      }
    }
    for (std::size_t col = p; col-- > 0;) {
      for (std::size_t j = col + 1; j < p; ++j) x[col] -= a.at2(col, j) * x[j];
      x[col] /= a.at2(col, col);
    }
    return {x.all_finite(), std::move(x)};
  };

  auto [ok, coeffs] = solve(0.0);
  if (!ok) {
    auto [ok2, coeffs2] = solve(1e-8);
    coeffs = std::move(coeffs2);
    double normal_resid = ok2 ? least_squares_normal_residual(features, coeffs, targets)
                              : std::numeric_limits<double>::infinity();
    if (!ok2 || normal_resid > 1e-6 * std::max(1.0, targets.norm2()))
      throw NumericError("least_squares_fit: rank-deficient system (m=" + std::to_string(m) +
                         ", p=" + std::to_string(p) + ", ||targets||=" +
                         std::to_string(targets.norm2()) + ", normal residual=" +
                         std::to_string(normal_resid) + "); ridge retry did not recover it");
  }
  return coeffs;
}

}  // namespace flexspike
