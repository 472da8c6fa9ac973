#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "flexspike/tensor.hpp"

namespace flexspike {

enum class ResetMode { hard, soft };

struct NeuronParams {
  double v_th = 1.0;
  double tau = 0.5;  // decay factor in (0, 1]; tau == 1 is the IF neuron
  ResetMode reset_mode = ResetMode::hard;
  bool multi_spike = false;
  std::optional<double> tau0;  // membrane time constant, event-driven replay only

  bool is_if() const { return tau == 1.0; }

  void validate() const {
    if (!(v_th > 0.0)) throw ConfigError("neuron: v_th must be positive");
    if (!(tau > 0.0) || tau > 1.0) throw ConfigError("neuron: tau must be in (0, 1]");
    if (multi_spike && reset_mode != ResetMode::soft)
      throw ConfigError("neuron: multi_spike requires soft reset");
    if (tau0 && !(*tau0 > 0.0)) throw ConfigError("neuron: tau0 must be positive");
  }
};

enum class SurrogateKind { triangular, single_exponential };

struct SurrogateSpec {
  SurrogateKind kind = SurrogateKind::triangular;
  double h = 1.0;      // triangular width
  double alpha = 1.0;  // exponential scale
  double beta = 5.0;   // exponential decay

  void validate() const {
    if (kind == SurrogateKind::triangular && !(h > 0.0))
      throw ConfigError("surrogate: h must be positive");
    if (kind == SurrogateKind::single_exponential && (!(alpha > 0.0) || !(beta > 0.0)))
      throw ConfigError("surrogate: alpha and beta must be positive");
  }
};

// Stand-in for the Heaviside derivative at pre-reset potential v.
inline double surrogate(double v, const SurrogateSpec& spec, double v_th) {
  switch (spec.kind) {
    case SurrogateKind::triangular: {
      const double d = spec.h - std::fabs(v_th - v);
      return d > 0.0 ? d / (spec.h * spec.h) : 0.0;
    }
    case SurrogateKind::single_exponential:
      return spec.alpha * std::exp(-spec.beta * std::fabs(v - v_th));
  }
  return 0.0;
}

struct LifState {
  Tensor u;  // membrane potential, one entry per neuron slot

  static LifState zeros(const Shape& shape) { return LifState{Tensor(shape)}; }
};

// One synchronous update: v = tau*u + I, fire, reset.
// Single-spike: s = step(v - v_th), hard reset u'=0 / soft u'=v-v_th.
// Multi-spike (soft only): s = max(0, floor(v / v_th)), u' = v - s*v_th.
inline std::pair<Tensor, LifState> lif_step(const LifState& state, const Tensor& input,
                                            const NeuronParams& p) {
  p.validate();
  if (!state.u.same_shape(input))
    throw ConfigError("lif_step: state/input shape mismatch " + shape_str(state.u.shape()) +
                      " vs " + shape_str(input.shape()));
  input.require_finite("lif_step input");
  Tensor spikes(input.shape());
  Tensor u_next(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) {
    const double v = p.tau * state.u[i] + input[i];
    if (p.multi_spike) {
      const double s = v >= p.v_th ? std::floor(v / p.v_th) : 0.0;
      spikes[i] = s;
      u_next[i] = v - s * p.v_th;
    } else if (v >= p.v_th) {
      spikes[i] = 1.0;
      u_next[i] = p.reset_mode == ResetMode::hard ? 0.0 : v - p.v_th;
    } else {
      spikes[i] = 0.0;
      u_next[i] = v;
    }
  }
  return {std::move(spikes), LifState{std::move(u_next)}};
}

struct LifTrace {
  std::vector<Tensor> v;  // pre-reset potential per step
  std::vector<Tensor> s;  // emitted spikes per step
};

// Runs the per-step update over inputs[T x ...] from a zero state.
// `trace`, when given, captures (v, s) per step for backward passes.
inline Tensor lif_forward_seq(const Tensor& inputs, const NeuronParams& p,
                              LifTrace* trace = nullptr) {
  p.validate();
  if (inputs.ndim() < 2) throw ConfigError("lif_forward_seq: expected [T, ...]");
  const std::size_t t_steps = inputs.dim(0);
  if (t_steps == 0) throw ConfigError("lif_forward_seq: T must be >= 1");
  inputs.require_finite("lif_forward_seq input");
  Shape step_shape(inputs.shape().begin() + 1, inputs.shape().end());
  const std::size_t step_n = shape_numel(step_shape);
  Tensor out(inputs.shape());
  Tensor u(step_shape);
  for (std::size_t t = 0; t < t_steps; ++t) {
    Tensor v(step_shape), s(step_shape);
    const double* in_t = inputs.data() + t * step_n;
    for (std::size_t i = 0; i < step_n; ++i) {
      const double vi = p.tau * u[i] + in_t[i];
      v[i] = vi;
      double si, ui;
      if (p.multi_spike) {
        si = vi >= p.v_th ? std::floor(vi / p.v_th) : 0.0;
        ui = vi - si * p.v_th;
      } else if (vi >= p.v_th) {
        si = 1.0;
        ui = p.reset_mode == ResetMode::hard ? 0.0 : vi - p.v_th;
      } else {
        si = 0.0;
        ui = vi;
      }
      s[i] = si;
      u[i] = ui;
    }
    std::copy(s.data(), s.data() + step_n, out.data() + t * step_n);
    if (trace) {
      trace->v.push_back(std::move(v));
      trace->s.push_back(std::move(s));
    }
  }
  return out;
}

// Direct evaluation of the unrolled hard-reset gradient
//   ds(t)/dI(t-n) = SG(v(t)) * tau^n * prod_{i=t-n}^{t-1} [(1 - s(i)) - v(i)*SG(v(i))]
// accumulated over every (t, n) pair. Deliberately the O(T^2) double sum, so
// it stays an independent cross-check for the recurrence the tape uses.
// Soft reset has no published closed form here and is rejected.
inline std::vector<Tensor> lif_backward_analytic(const LifTrace& saved, const NeuronParams& p,
                                                 const SurrogateSpec& spec,
                                                 const std::vector<Tensor>& upstream) {
  p.validate();
  spec.validate();
  if (p.reset_mode != ResetMode::hard || p.multi_spike)
    throw ConfigError("lif_backward_analytic: formula covers hard reset only; use the tape path");
  const std::size_t t_steps = saved.v.size();
  if (t_steps == 0 || saved.s.size() != t_steps)
    throw ConfigError("lif_backward_analytic: trace must cover all steps");
  if (upstream.size() != t_steps)
    throw ConfigError("lif_backward_analytic: upstream length mismatch");
  const Shape& shape = saved.v[0].shape();
  const std::size_t n_elems = shape_numel(shape);

  std::vector<Tensor> grads(t_steps, Tensor(shape));
  for (std::size_t t = 0; t < t_steps; ++t) {
    for (std::size_t e = 0; e < n_elems; ++e) {
      const double g_up = upstream[t][e];
      if (g_up == 0.0) continue;
      const double sg_t = surrogate(saved.v[t][e], spec, p.v_th);
      // n = 0 term, then walk backwards extending the product.
      double factor = sg_t;
      grads[t][e] += g_up * factor;
      for (std::size_t back = 1; back <= t; ++back) {
        const std::size_t i = t - back;  // index entering the product
        const double bracket =
            (1.0 - saved.s[i][e]) - saved.v[i][e] * surrogate(saved.v[i][e], spec, p.v_th);
        factor *= p.tau * bracket;
        grads[i][e] += g_up * factor;
      }
    }
  }
  return grads;
}

}  // namespace flexspike
