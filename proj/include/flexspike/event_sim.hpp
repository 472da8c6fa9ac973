#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "flexspike/dataset.hpp"
#include "flexspike/network.hpp"
#include "flexspike/runtime.hpp"

namespace flexspike {

// --- spike difference (normalised L1 on output counts) --------------------

inline double spike_difference(const std::vector<double>& s0, const std::vector<double>& s) {
  if (s0.size() != s.size()) throw ConfigError("spike_difference: length mismatch");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < s0.size(); ++i) {
    num += std::fabs(s0[i] - s[i]);
    den += s0[i];
  }
  if (den <= 0.0) throw NumericError("spike_difference: reference spike count is zero");
  return num / den;
}

struct SdReport {
  std::vector<double> s0;  // reference counts
  std::vector<double> s;   // compared counts
  double sd = 0.0;
};

inline SdReport make_sd_report(std::vector<double> s0, std::vector<double> s) {
  SdReport r{std::move(s0), std::move(s), 0.0};
  r.sd = spike_difference(r.s0, r.s);
  return r;
}

// --- asynchronous network ---------------------------------------------------

// Sparse fan-out from one spiking population (or the input grid) to the next,
// with every interleaved linear layer (pool / flatten / conv / dense) folded
// into the synapse weights.
struct Projection {
  std::vector<std::vector<std::pair<std::uint32_t, double>>> fan_out;  // per source neuron
  std::size_t n_targets = 0;
};

struct AsyncNet {
  std::vector<Projection> projections;     // projections[i]: population i -> i+1
  std::vector<std::size_t> population;     // population sizes; [0] is the input grid
  std::vector<NeuronParams> neuron;        // per spiking population (aligned with projections)
  Shape input_shape;                       // {C, H, W}
  std::size_t n_classes = 0;

  std::size_t input_size() const { return population.empty() ? 0 : population[0]; }
};

namespace detail {

// Applies one linear layer to a set of (index, weight) contributions.
inline std::vector<std::pair<std::uint32_t, double>> apply_linear_layer(
    const Layer& l, const std::vector<std::pair<std::uint32_t, double>>& in) {
  const std::size_t out_n = shape_numel(l.out_shape);
  std::vector<double> acc(out_n, 0.0);
  auto deposit = [&](std::size_t idx, double w) { acc[idx] += w; };
  switch (l.spec.kind) {
    case LayerKind::conv2d: {
      const std::size_t in_c = l.in_shape[0], in_h = l.in_shape[1], in_w = l.in_shape[2];
      const std::size_t out_c = l.out_shape[0], out_h = l.out_shape[1], out_w = l.out_shape[2];
      const std::size_t kh = l.spec.kernel, kw = l.spec.kernel;
      const std::size_t stride = l.spec.stride, pad = l.spec.pad;
      for (auto [src, wgt] : in) {
        const std::size_t c = src / (in_h * in_w);
        const std::size_t y = (src / in_w) % in_h;
        const std::size_t x = src % in_w;
        for (std::size_t f = 0; f < out_c; ++f) {
          const double* wf = l.w.data() + ((f * in_c) + c) * kh * kw;
          for (std::size_t ki = 0; ki < kh; ++ki) {
            const std::ptrdiff_t num_h =
                static_cast<std::ptrdiff_t>(y + pad) - static_cast<std::ptrdiff_t>(ki);
            if (num_h < 0 || num_h % static_cast<std::ptrdiff_t>(stride)) continue;
            const std::size_t oh = static_cast<std::size_t>(num_h) / stride;
            if (oh >= out_h) continue;
            for (std::size_t kj = 0; kj < kw; ++kj) {
              const std::ptrdiff_t num_w =
                  static_cast<std::ptrdiff_t>(x + pad) - static_cast<std::ptrdiff_t>(kj);
              if (num_w < 0 || num_w % static_cast<std::ptrdiff_t>(stride)) continue;
              const std::size_t ow = static_cast<std::size_t>(num_w) / stride;
              if (ow >= out_w) continue;
              deposit((f * out_h + oh) * out_w + ow, wgt * wf[ki * kw + kj]);
            }
          }
        }
      }
      break;
    }
    case LayerKind::dense: {
      const std::size_t out_f = l.out_shape[0];
      for (auto [src, wgt] : in)
        for (std::size_t o = 0; o < out_f; ++o)
          deposit(o, wgt * l.w[o * l.in_shape[0] + src]);
      break;
    }
    case LayerKind::avg_pool: {
      const std::size_t ch = l.in_shape[0], in_h = l.in_shape[1], in_w = l.in_shape[2];
      const std::size_t out_h = l.out_shape[1], out_w = l.out_shape[2];
      const std::size_t k = l.spec.pool_k;
      const std::size_t stride = l.spec.pool_stride ? l.spec.pool_stride : k;
      const double inv = 1.0 / static_cast<double>(k * k);
      for (auto [src, wgt] : in) {
        const std::size_t c = src / (in_h * in_w);
        const std::size_t y = (src / in_w) % in_h;
        const std::size_t x = src % in_w;
        for (std::size_t oh = 0; oh < out_h; ++oh) {
          if (y < oh * stride || y >= oh * stride + k) continue;
          for (std::size_t ow = 0; ow < out_w; ++ow) {
            if (x < ow * stride || x >= ow * stride + k) continue;
            deposit((c * out_h + oh) * out_w + ow, wgt * inv);
          }
        }
      }
      break;
    }
    case LayerKind::flatten:
      for (auto [src, wgt] : in) deposit(src, wgt);
      break;
    default:
      throw GateError(std::string("event import: layer kind '") + layer_kind_name(l.spec.kind) +
                      "' has no event-driven form");
  }
  std::vector<std::pair<std::uint32_t, double>> out;
  for (std::size_t i = 0; i < out_n; ++i)
    if (acc[i] != 0.0) out.emplace_back(static_cast<std::uint32_t>(i), acc[i]);
  return out;
}

}  // namespace detail

// Validates the deployment constraints and compiles the layer graph into
// synapse fan-outs. Requirements: bias-free, BN-free, every spiking layer a
// soft-reset multi-spike IF (tau == 1 or tau0 == +inf), terminal IF voting.
inline AsyncNet import_weights(const StagedNetwork& net) {
  std::vector<std::string> violations;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const Layer& l = net.layers[i];
    if (!l.bias.empty())
      violations.push_back("layer " + std::to_string(i) + " (" + layer_kind_name(l.spec.kind) +
                           ") carries a bias");
    if (l.spec.kind == LayerKind::batchnorm)
      violations.push_back("layer " + std::to_string(i) + " is batchnorm");
    if (l.spec.kind == LayerKind::lif || l.spec.kind == LayerKind::voting_if) {
      const NeuronParams& np = l.spec.neuron ? *l.spec.neuron : net.default_neuron;
      const bool is_if = np.tau == 1.0 || (np.tau0 && std::isinf(*np.tau0));
      if (!is_if)
        violations.push_back("layer " + std::to_string(i) +
                             " is not IF (tau=" + std::to_string(np.tau) +
                             (np.tau0 ? ", finite tau0" : ", no tau0") + ")");
      if (np.reset_mode != ResetMode::soft || !np.multi_spike)
        violations.push_back("layer " + std::to_string(i) +
                             " must use soft reset with multi-spike emission");
    }
    if (l.spec.kind == LayerKind::voting_membrane)
      violations.push_back("layer " + std::to_string(i) +
                           " is membrane voting; event-driven output needs IF voting spikes");
  }
  if (net.layers.empty() || net.layers.back().spec.kind != LayerKind::voting_if)
    violations.push_back("terminal layer must be voting_if");
  if (!violations.empty()) {
    std::string msg = "event import rejected:";
    for (const auto& v : violations) msg += "\n  - " + v;
    throw GateError(msg);
  }

  AsyncNet anet;
  anet.input_shape = net.input_shape;
  anet.population.push_back(shape_numel(net.input_shape));

  // Segment the layer list at spiking populations.
  std::vector<std::vector<const Layer*>> segments;
  std::vector<const Layer*> pending;
  std::vector<const NeuronParams*> seg_neuron;
  for (const Layer& l : net.layers) {
    if (l.spec.kind == LayerKind::lif || l.spec.kind == LayerKind::voting_if) {
      segments.push_back(pending);
      pending.clear();
      seg_neuron.push_back(l.spec.neuron ? &*l.spec.neuron : &net.default_neuron);
      anet.population.push_back(shape_numel(l.out_shape));
      anet.neuron.push_back(*seg_neuron.back());
    } else {
      pending.push_back(&l);
    }
  }
  if (!pending.empty())
    throw GateError("event import rejected: trailing non-spiking layers after the voting layer");

  for (std::size_t s = 0; s < segments.size(); ++s) {
    Projection proj;
    proj.n_targets = anet.population[s + 1];
    const std::size_t n_src = anet.population[s];
    proj.fan_out.resize(n_src);
    for (std::size_t src = 0; src < n_src; ++src) {
      std::vector<std::pair<std::uint32_t, double>> cur{
          {static_cast<std::uint32_t>(src), 1.0}};
      for (const Layer* l : segments[s]) cur = detail::apply_linear_layer(*l, cur);
      proj.fan_out[src] = std::move(cur);
    }
    anet.projections.push_back(std::move(proj));
  }
  anet.n_classes = anet.population.back();
  return anet;
}

struct SpikeTraceEntry {
  std::uint64_t tick;
  std::uint32_t layer;   // spiking population index, 1-based (0 = input)
  std::uint32_t neuron;
  std::uint64_t count;
};

// Zero-delay event-driven replay. External events are taken in stream order
// (sorted by tick; same-tick order is the caller's tie order). Each firing
// first deposits its whole fan-out, then fires newly super-threshold targets
// in ascending index order, depth-first. The deposit phase is what the
// multi-worker mode parallelises; target sets are disjoint, so worker count
// never changes the result.
class EventSimulator {
 public:
  explicit EventSimulator(const AsyncNet& net) : net_(net) { reset(); }

  void reset() {
    u_.assign(net_.projections.size(), {});
    last_tick_.assign(net_.projections.size(), {});
    for (std::size_t p = 0; p < net_.projections.size(); ++p) {
      u_[p].assign(net_.population[p + 1], 0.0);
      last_tick_[p].assign(net_.population[p + 1], 0);
    }
    class_counts_.assign(net_.n_classes, 0.0);
  }

  std::vector<double> run(const EventStream& stream,
                          std::vector<SpikeTraceEntry>* trace = nullptr) {
    reset();
    trace_ = trace;
    std::uint64_t prev_tick = 0;
    for (std::size_t i = 0; i < stream.size(); ++i) {
      const Event& e = stream[i];
      if (i > 0 && e.tick < prev_tick)
        throw ConfigError("simulate: event stream is not sorted by tick (record " +
                          std::to_string(i) + ")");
      prev_tick = e.tick;
      const std::uint64_t idx = event_input_index(e, net_.input_shape[1], net_.input_shape[2]);
      if (idx >= net_.input_size())
        throw ConfigError("simulate: event coordinate outside the input grid (record " +
                          std::to_string(i) + ")");
      deliver(0, static_cast<std::size_t>(idx), 1.0, e.tick);
    }
    return class_counts_;
  }

  // Per-neuron potentials after a run; population p in [0, #spiking).
  const std::vector<double>& potentials(std::size_t p) const { return u_[p]; }

 private:
  void decay(std::size_t pop, std::size_t n, std::uint64_t tick) {
    const NeuronParams& np = net_.neuron[pop];
    if (!np.tau0 || std::isinf(*np.tau0)) return;  // IF: no decay between events
    const std::uint64_t last = last_tick_[pop][n];
    if (tick > last && u_[pop][n] != 0.0)
      u_[pop][n] *= std::exp(-static_cast<double>(tick - last) / *np.tau0);
    last_tick_[pop][n] = tick;
  }

  // Source neuron `src` of population `pop` emits `count` spikes at `tick`.
  void deliver(std::size_t pop, std::size_t src, double count, std::uint64_t tick) {
    const Projection& proj = net_.projections[pop];
    const auto& fan = proj.fan_out[src];
    // Phase 1: deposit charge into all targets (parallel-safe, disjoint).
    parallel_for(fan.size(), [&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) {
        decay(pop, fan[i].first, tick);
        u_[pop][fan[i].first] += count * fan[i].second;
      }
    });
    // Phase 2: fire in ascending target order, depth-first.
    const NeuronParams& np = net_.neuron[pop];
    for (const auto& [tgt, w] : fan) {
      double& u = u_[pop][tgt];
      if (u < np.v_th) continue;
      const double s = std::floor(u / np.v_th);
      u -= s * np.v_th;
      if (trace_)
        trace_->push_back({tick, static_cast<std::uint32_t>(pop + 1),
                           static_cast<std::uint32_t>(tgt), static_cast<std::uint64_t>(s)});
      if (pop + 1 == net_.projections.size()) {
        class_counts_[tgt] += s;
      } else {
        deliver(pop + 1, tgt, s, tick);
      }
    }
  }

  const AsyncNet& net_;
  std::vector<std::vector<double>> u_;
  std::vector<std::vector<std::uint64_t>> last_tick_;
  std::vector<double> class_counts_;
  std::vector<SpikeTraceEntry>* trace_ = nullptr;
};

inline std::vector<double> simulate(const AsyncNet& net, const EventStream& stream,
                                    std::vector<SpikeTraceEntry>* trace = nullptr) {
  EventSimulator sim(net);
  return sim.run(stream, trace);
}

// Clock-driven reference: bins the stream into T frames and runs the
// time-stepped forward; voting_if logits are exactly the per-class spike
// counts.
inline std::vector<double> timestep_reference(const StagedNetwork& net, const EventStream& stream,
                                              std::size_t t_bins) {
  FrameSpec spec;
  spec.t_bins = t_bins;
  if (net.input_shape.size() != 3)
    throw ConfigError("timestep_reference: network input must be [C, H, W]");
  spec.channels = net.input_shape[0];
  spec.h = net.input_shape[1];
  spec.w = net.input_shape[2];
  Tensor frames = frame_events(stream, spec);
  Shape batched{t_bins, 1};
  batched.insert(batched.end(), net.input_shape.begin(), net.input_shape.end());
  Tensor logits = forward_eval(net, frames.reshaped(batched),
                               TemporalConfig::uniform(net.num_stages(), t_bins));
  std::vector<double> counts(logits.size());
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] = logits[i];
  return counts;
}

inline void write_trace_csv(const std::vector<SpikeTraceEntry>& trace, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw ConfigError("write_trace_csv: cannot open " + path);
  os << "tick,layer,neuron,count\n";
  for (const auto& t : trace)
    os << t.tick << ',' << t.layer << ',' << t.neuron << ',' << t.count << '\n';
}

}  // namespace flexspike
