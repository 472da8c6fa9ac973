#pragma once

#include <cmath>

#include "flexspike/tensor.hpp"

namespace flexspike {

struct SgdConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0005;
};

// m' = momentum*m + grad + weight_decay*w ; w' = w - lr*m'
// `state` is the momentum buffer, zero-initialised on first use.
inline void sgd_step(Tensor& w, const Tensor& grad, double lr, double momentum,
                     double weight_decay, Tensor& state) {
  if (lr < 0.0) throw ConfigError("sgd_step: negative learning rate");
  if (!w.same_shape(grad))
    throw ConfigError("sgd_step: weight/gradient shape mismatch " + shape_str(w.shape()) +
                      " vs " + shape_str(grad.shape()));
  if (state.empty()) state = Tensor(w.shape());
  if (!state.same_shape(w)) throw ConfigError("sgd_step: state shape mismatch");
  for (std::size_t i = 0; i < w.size(); ++i) {
    state[i] = momentum * state[i] + grad[i] + weight_decay * w[i];
    w[i] -= lr * state[i];
  }
}

// lr0 * (1 + cos(pi * step / total)) / 2, decaying to 0 at step == total.
inline double cosine_lr(std::size_t step, std::size_t total, double lr0) {
  if (total == 0) throw ConfigError("cosine_lr: total must be positive");
  if (step > total) throw ConfigError("cosine_lr: step exceeds total");
  return lr0 * (1.0 + std::cos(M_PI * static_cast<double>(step) / static_cast<double>(total))) / 2.0;
}

}  // namespace flexspike
