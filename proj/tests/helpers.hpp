#pragma once

#include <functional>
#include <vector>

#include "flexspike/rng.hpp"
#include "flexspike/tensor.hpp"

namespace test_helpers {

using flexspike::RngStream;
using flexspike::Shape;
using flexspike::Tensor;

inline Tensor random_tensor(Shape shape, RngStream& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = lo + (hi - lo) * rng.uniform();
  return t;
}

// Central finite differences of a scalar functional w.r.t. one input tensor.
inline Tensor finite_diff(const std::function<double(const std::vector<Tensor>&)>& f,
                          std::vector<Tensor> inputs, std::size_t which, double step = 1e-5) {
  Tensor grad(inputs[which].shape());
  for (std::size_t i = 0; i < grad.size(); ++i) {
    const double orig = inputs[which][i];
    inputs[which][i] = orig + step;
    const double up = f(inputs);
    inputs[which][i] = orig - step;
    const double down = f(inputs);
    inputs[which][i] = orig;
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

inline double rel_error(const Tensor& a, const Tensor& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  if (den == 0.0) return std::sqrt(num);
  return std::sqrt(num / den);
}

}  // namespace test_helpers
