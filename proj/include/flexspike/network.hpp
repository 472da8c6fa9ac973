#pragma once

#include <cctype>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "flexspike/rng.hpp"
#include "flexspike/tape.hpp"

namespace flexspike {

enum class LayerKind {
  conv2d,
  dense,
  batchnorm,
  lif,
  avg_pool,
  flatten,
  voting_if,
  voting_membrane,
};

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::dense: return "dense";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::lif: return "lif";
    case LayerKind::avg_pool: return "avg_pool";
    case LayerKind::flatten: return "flatten";
    case LayerKind::voting_if: return "voting_if";
    case LayerKind::voting_membrane: return "voting_membrane";
  }
  return "?";
}

struct LayerSpec {
  LayerKind kind = LayerKind::lif;
  std::size_t out_channels = 0;  // conv2d
  std::size_t kernel = 3, stride = 1, pad = 1;
  std::size_t out_features = 0;  // dense
  bool with_bias = false;
  std::size_t pool_k = 2, pool_stride = 0;  // 0 means == pool_k
  double bn_eps = 1e-5, bn_momentum = 0.1;
  std::optional<NeuronParams> neuron;      // lif / voting layers
  std::optional<SurrogateSpec> surrogate;  // lif / voting_if
};

// One concrete layer: spec + parameters + shape bookkeeping. Feature shapes
// exclude the leading time and batch axes.
struct Layer {
  LayerSpec spec;
  Tensor w;
  Tensor bias;                              // empty when bias-free
  Tensor gamma, beta, run_mean, run_var;    // batchnorm state
  Shape in_shape, out_shape;

  bool has_params() const { return !w.empty() || !bias.empty() || !gamma.empty(); }
};

struct TemporalConfig {
  std::vector<std::size_t> t;
  std::size_t t_min = 1, t_max = 1;

  static TemporalConfig uniform(std::size_t stages, std::size_t steps) {
    TemporalConfig c;
    c.t.assign(stages, steps);
    c.t_min = c.t_max = steps;
    return c;
  }
  void validate() const {
    if (t.empty()) throw ConfigError("temporal config: empty");
    if (t_min < 1) throw ConfigError("temporal config: t_min must be >= 1");
    for (auto v : t)
      if (v < t_min || v > t_max)
        throw ConfigError("temporal config: step " + std::to_string(v) + " outside [" +
                          std::to_string(t_min) + ", " + std::to_string(t_max) + "]");
  }
};

// Layered SNN partitioned into stages of whole blocks. A block is the run of
// layers from one conv/dense up to (not including) the next, so batch norm is
// never separated from the layer it normalises.
struct StagedNetwork {
  std::vector<Layer> layers;
  std::vector<std::size_t> block_starts;               // layer index per block
  std::vector<std::pair<std::size_t, std::size_t>> stages;  // [begin, end) layer ranges
  std::size_t granularity = 0;                         // blocks per stage (0: unpartitioned)
  std::size_t t_min = 1, t_max = 6;                    // training bounds, kept with the weights
  bool bias_free = false;
  Shape input_shape;                                   // per-sample, e.g. {C, H, W}
  NeuronParams default_neuron;
  SurrogateSpec default_surrogate;

  std::size_t num_blocks() const { return block_starts.size(); }
  std::size_t num_stages() const { return stages.size(); }
  std::size_t num_classes() const {
    for (auto it = layers.rbegin(); it != layers.rend(); ++it)
      if (!it->out_shape.empty()) return it->out_shape.back();
    return 0;
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& l : layers)
      n += l.w.size() + l.bias.size() + l.gamma.size() + l.beta.size();
    return n;
  }

  // Deterministic parameter ordering shared by the trainer, the optimizer
  // state, and the checkpoint format.
  std::vector<Tensor*> trainable_params() {
    std::vector<Tensor*> out;
    for (auto& l : layers) {
      if (!l.w.empty()) out.push_back(&l.w);
      if (!l.bias.empty()) out.push_back(&l.bias);
      if (!l.gamma.empty()) out.push_back(&l.gamma);
      if (!l.beta.empty()) out.push_back(&l.beta);
    }
    return out;
  }

  bool has_batchnorm() const {
    for (const auto& l : layers)
      if (l.spec.kind == LayerKind::batchnorm) return true;
    return false;
  }
  bool has_bias() const {
    for (const auto& l : layers)
      if (!l.bias.empty()) return true;
    return false;
  }
};

namespace detail {

inline Shape infer_out_shape(const LayerSpec& s, const Shape& in) {
  switch (s.kind) {
    case LayerKind::conv2d: {
      if (in.size() != 3) throw ConfigError("conv2d layer expects [C, H, W] input");
      Tensor probe({1, in[0], in[1], in[2]});
      Tensor kern({s.out_channels, in[0], s.kernel, s.kernel});
      Conv2dDims d = conv2d_dims(probe, kern, s.stride, s.pad);
      return {s.out_channels, d.out_h, d.out_w};
    }
    case LayerKind::dense: {
      if (in.size() != 1) throw ConfigError("dense layer expects flattened [F] input");
      return {s.out_features};
    }
    case LayerKind::avg_pool: {
      if (in.size() != 3) throw ConfigError("avg_pool layer expects [C, H, W] input");
      const std::size_t st = s.pool_stride ? s.pool_stride : s.pool_k;
      Tensor probe({1, in[0], in[1], in[2]});
      Pool2dDims d = avg_pool2d_dims(probe, s.pool_k, st);
      return {in[0], d.out_h, d.out_w};
    }
    case LayerKind::flatten:
      return {shape_numel(in)};
    case LayerKind::batchnorm:
    case LayerKind::lif:
    case LayerKind::voting_if:
    case LayerKind::voting_membrane:
      return in;
  }
  return in;
}

inline Tensor kaiming_uniform(const Shape& shape, std::size_t fan_in, RngStream& rng) {
  Tensor t(shape);
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = (rng.uniform() * 2.0 - 1.0) * bound;
  return t;
}

}  // namespace detail

struct BuildOptions {
  NeuronParams neuron;        // default for lif / voting layers
  SurrogateSpec surrogate;    // default surrogate
  // Spike-count inputs to the voting layer are nonnegative, so a class
  // neuron whose row drifts negative sits below threshold with no gradient
  // under a narrow surrogate. The voting layer therefore gets a wider
  // triangular support by default.
  double vote_surrogate_h = 3.0;
  std::size_t t_min = 1, t_max = 6;
  std::uint64_t seed = 1;
};

// Builds a single-stage network; call partition() to split it into stages.
inline StagedNetwork build_network(const std::vector<LayerSpec>& specs, const Shape& input_shape,
                                   const BuildOptions& opt = {}) {
  if (specs.empty()) throw ConfigError("build_network: empty layer spec");
  opt.neuron.validate();
  opt.surrogate.validate();
  StagedNetwork net;
  net.input_shape = input_shape;
  net.default_neuron = opt.neuron;
  net.default_surrogate = opt.surrogate;
  net.t_min = opt.t_min;
  net.t_max = opt.t_max;
  RngStream rng = RngStream(opt.seed).fork("init");

  Shape cur = input_shape;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const LayerSpec& s = specs[i];
    if ((s.kind == LayerKind::voting_if || s.kind == LayerKind::voting_membrane) &&
        i + 1 != specs.size())
      throw ConfigError("build_network: voting layer must be terminal");
    if (s.kind == LayerKind::batchnorm &&
        (i == 0 || (specs[i - 1].kind != LayerKind::conv2d && specs[i - 1].kind != LayerKind::dense)))
      throw ConfigError("build_network: batchnorm must directly follow conv2d or dense");
    Layer layer;
    layer.spec = s;
    if (s.kind == LayerKind::voting_if && !s.surrogate &&
        opt.surrogate.kind == SurrogateKind::triangular) {
      SurrogateSpec wide = opt.surrogate;
      wide.h = opt.vote_surrogate_h;
      layer.spec.surrogate = wide;
    }
    layer.in_shape = cur;
    layer.out_shape = detail::infer_out_shape(s, cur);
    switch (s.kind) {
      case LayerKind::conv2d: {
        const std::size_t fan_in = cur[0] * s.kernel * s.kernel;
        layer.w = detail::kaiming_uniform({s.out_channels, cur[0], s.kernel, s.kernel}, fan_in, rng);
        if (s.with_bias) layer.bias = Tensor({s.out_channels});
        break;
      }
      case LayerKind::dense: {
        const std::size_t fan_in = cur[0];
        layer.w = detail::kaiming_uniform({s.out_features, cur[0]}, fan_in, rng);
        if (s.with_bias) layer.bias = Tensor({s.out_features});
        break;
      }
      case LayerKind::batchnorm: {
        const std::size_t ch = cur[0];
        layer.gamma = Tensor({ch}, 1.0);
        layer.beta = Tensor({ch});
        layer.run_mean = Tensor({ch});
        layer.run_var = Tensor({ch}, 1.0);
        break;
      }
      default:
        break;
    }
    cur = layer.out_shape;
    net.layers.push_back(std::move(layer));
  }

  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const LayerKind k = net.layers[i].spec.kind;
    if (k == LayerKind::conv2d || k == LayerKind::dense) net.block_starts.push_back(i);
  }
  if (net.block_starts.empty())
    throw ConfigError("build_network: network needs at least one conv2d or dense layer");
  net.block_starts[0] = 0;  // leading reshape layers join the first block
  net.stages = {{0, net.layers.size()}};
  net.granularity = 0;
  net.bias_free = !net.has_bias() && !net.has_batchnorm();
  return net;
}

// Regroups blocks into stages of g consecutive blocks (last stage may be
// smaller). g >= block count collapses to a single stage.
inline StagedNetwork partition(StagedNetwork net, std::size_t g) {
  if (g < 1) throw ConfigError("partition: g must be >= 1");
  const std::size_t blocks = net.num_blocks();
  net.stages.clear();
  for (std::size_t b = 0; b < blocks; b += g) {
    const std::size_t first_layer = net.block_starts[b];
    const std::size_t last_layer =
        (b + g < blocks) ? net.block_starts[b + g] : net.layers.size();
    net.stages.emplace_back(first_layer, last_layer);
  }
  net.granularity = g;
  return net;
}

// --- voting readouts ---------------------------------------------------

// Sum of spike counts per class over time: spikes [T, N, C] -> [N, C].
inline Tensor voting_if_readout(const Tensor& spikes) {
  const std::size_t t = spikes.dim(0), step = spikes.size() / t;
  Tensor out(Shape(spikes.shape().begin() + 1, spikes.shape().end()));
  for (std::size_t i = 0; i < t; ++i) {
    const double* src = spikes.data() + i * step;
    for (std::size_t j = 0; j < step; ++j) out[j] += src[j];
  }
  return out;
}

inline Tensor membrane_vote_coeffs(std::size_t t_steps, double tau) {
  Tensor c({t_steps});
  for (std::size_t i = 0; i < t_steps; ++i)
    c[i] = std::pow(tau, static_cast<double>(t_steps - 1 - i)) / static_cast<double>(t_steps);
  return c;
}

// Final membrane of a never-firing accumulator, averaged over T:
// logits = (sum_t tau^(T-t) I(t)) / T. Currents [T, N, C] -> [N, C].
inline Tensor voting_membrane_readout(const Tensor& currents, double tau) {
  const std::size_t t = currents.dim(0), step = currents.size() / t;
  Tensor coeffs = membrane_vote_coeffs(t, tau);
  Tensor out(Shape(currents.shape().begin() + 1, currents.shape().end()));
  for (std::size_t i = 0; i < t; ++i) {
    const double* src = currents.data() + i * step;
    for (std::size_t j = 0; j < step; ++j) out[j] += coeffs[i] * src[j];
  }
  return out;
}

// Repeats a static input as constant current on every step: [N, ...] -> [T, N, ...].
inline Tensor static_encode(const Tensor& image, std::size_t t_steps) {
  if (t_steps == 0) throw ConfigError("static_encode: T must be >= 1");
  Shape s = image.shape();
  s.insert(s.begin(), t_steps);
  Tensor out(s);
  for (std::size_t i = 0; i < t_steps; ++i)
    std::copy(image.data(), image.data() + image.size(), out.data() + i * image.size());
  return out;
}

// --- evaluation-mode forward -------------------------------------------

namespace detail {

inline Tensor fold_time_into_batch(const Tensor& x) {
  Shape s = x.shape();
  Shape folded{s[0] * s[1]};
  folded.insert(folded.end(), s.begin() + 2, s.end());
  return x.reshaped(folded);
}

inline Tensor unfold_time(const Tensor& x, std::size_t t, const Shape& feature) {
  Shape s{t, x.dim(0) / t};
  s.insert(s.end(), feature.begin(), feature.end());
  return x.reshaped(s);
}

inline void bias_add_channel(Tensor& x, const Tensor& b) {
  // x [B, C, ...] with bias per channel
  const std::size_t ch = x.dim(1);
  const std::size_t inner = x.size() / (x.dim(0) * ch);
  for (std::size_t n = 0; n < x.dim(0); ++n)
    for (std::size_t c = 0; c < ch; ++c) {
      double* p = x.data() + (n * ch + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) p[i] += b[c];
    }
}

}  // namespace detail

struct EvalStats {
  // spikes emitted / neuron-steps, one entry per layer (lif and voting_if only)
  std::vector<double> layer_spike_sums;
  std::vector<double> layer_neuron_steps;
};

// Pooled-moment accumulator for BN recalibration: one slot per layer index,
// filled only at batchnorm layers. When passed to forward_eval, BN layers
// normalise with the current batch's statistics (as in training) instead of
// the stored running ones, so repeated calibration over the same batches is
// a fixed point.
struct BnCalibAccum {
  struct Slot {
    double count = 0.0;
    std::vector<double> sum, sumsq;
  };
  std::vector<Slot> slots;
};

// Clock-driven forward with running BN statistics. x is [t_1, N, ...feature].
// Stage i runs at cfg.t[i] steps; frames are resampled between stages.
inline Tensor forward_eval(const StagedNetwork& net, const Tensor& x, const TemporalConfig& cfg,
                           EvalStats* stats = nullptr, BnCalibAccum* calib = nullptr) {
  cfg.validate();
  if (cfg.t.size() != net.num_stages())
    throw ConfigError("forward: config length " + std::to_string(cfg.t.size()) +
                      " != stage count " + std::to_string(net.num_stages()));
  if (x.dim(0) != cfg.t[0])
    throw ConfigError("forward: input has " + std::to_string(x.dim(0)) + " frames, config t_1=" +
                      std::to_string(cfg.t[0]));
  if (stats) {
    stats->layer_spike_sums.assign(net.layers.size(), 0.0);
    stats->layer_neuron_steps.assign(net.layers.size(), 0.0);
  }
  if (calib && calib->slots.size() != net.layers.size()) calib->slots.resize(net.layers.size());
  Tensor cur = x;
  const std::size_t batch = x.dim(1);
  for (std::size_t si = 0; si < net.num_stages(); ++si) {
    cur = ttm_apply(cur, cfg.t[si]);
    const std::size_t t_i = cfg.t[si];
    for (std::size_t li = net.stages[si].first; li < net.stages[si].second; ++li) {
      const Layer& l = net.layers[li];
      switch (l.spec.kind) {
        case LayerKind::conv2d: {
          Tensor folded = detail::fold_time_into_batch(cur);
          Tensor y = conv2d(folded, l.w, l.spec.stride, l.spec.pad);
          if (!l.bias.empty()) detail::bias_add_channel(y, l.bias);
          cur = detail::unfold_time(y, t_i, l.out_shape);
          break;
        }
        case LayerKind::dense: {
          Tensor folded = detail::fold_time_into_batch(cur);
          Tensor y = dense_forward(folded, l.w);
          if (!l.bias.empty()) detail::bias_add_channel(y, l.bias);
          cur = detail::unfold_time(y, t_i, l.out_shape);
          break;
        }
        case LayerKind::batchnorm: {
          Tensor y = cur;
          const std::size_t ch = l.gamma.size();
          const std::size_t inner = shape_numel(l.out_shape) / ch;
          const std::size_t outer = y.size() / (ch * inner);
          for (std::size_t c = 0; c < ch; ++c) {
            double mean = l.run_mean[c], var = l.run_var[c];
            if (calib) {
              // Batch statistics pooled over time x batch x spatial.
              double s = 0.0, q = 0.0;
              for (std::size_t o = 0; o < outer; ++o) {
                const double* p = cur.data() + (o * ch + c) * inner;
                for (std::size_t i = 0; i < inner; ++i) s += p[i];
              }
              const double n = static_cast<double>(outer * inner);
              mean = s / n;
              for (std::size_t o = 0; o < outer; ++o) {
                const double* p = cur.data() + (o * ch + c) * inner;
                for (std::size_t i = 0; i < inner; ++i) q += (p[i] - mean) * (p[i] - mean);
              }
              var = q / n;
              auto& slot = calib->slots[li];
              if (slot.sum.empty()) {
                slot.sum.assign(ch, 0.0);
                slot.sumsq.assign(ch, 0.0);
              }
              if (c == 0) slot.count += n;
              slot.sum[c] += s;
              slot.sumsq[c] += q + n * mean * mean;
            }
            const double scale = l.gamma[c] / std::sqrt(var + l.spec.bn_eps);
            const double shift = l.beta[c] - mean * scale;
            for (std::size_t o = 0; o < outer; ++o) {
              double* p = y.data() + (o * ch + c) * inner;
              for (std::size_t i = 0; i < inner; ++i) p[i] = p[i] * scale + shift;
            }
          }
          cur = std::move(y);
          break;
        }
        case LayerKind::lif: {
          const NeuronParams& np = l.spec.neuron ? *l.spec.neuron : net.default_neuron;
          cur = lif_forward_seq(cur, np);
          if (stats) {
            stats->layer_spike_sums[li] = cur.sum();
            stats->layer_neuron_steps[li] =
                static_cast<double>(cur.size());
          }
          break;
        }
        case LayerKind::avg_pool: {
          const std::size_t st = l.spec.pool_stride ? l.spec.pool_stride : l.spec.pool_k;
          Tensor folded = detail::fold_time_into_batch(cur);
          cur = detail::unfold_time(avg_pool2d(folded, l.spec.pool_k, st), t_i, l.out_shape);
          break;
        }
        case LayerKind::flatten:
          cur = cur.reshaped({t_i, batch, shape_numel(l.out_shape)});
          break;
        case LayerKind::voting_if: {
          const NeuronParams& np = l.spec.neuron ? *l.spec.neuron : net.default_neuron;
          Tensor spikes = lif_forward_seq(cur, np);
          if (stats) {
            stats->layer_spike_sums[li] = spikes.sum();
            stats->layer_neuron_steps[li] = static_cast<double>(spikes.size());
          }
          cur = voting_if_readout(spikes);
          break;
        }
        case LayerKind::voting_membrane: {
          const NeuronParams& np = l.spec.neuron ? *l.spec.neuron : net.default_neuron;
          cur = voting_membrane_readout(cur, np.tau);
          break;
        }
      }
    }
  }
  if (cur.ndim() != 2)
    throw ConfigError("forward: network must end in a voting layer producing [N, classes]");
  return cur;
}

// --- training-mode forward (records onto a tape) ------------------------

// Tape handles for one training forward; param_ids[i] matches
// net.trainable_params()[i].
struct TapedForward {
  GradTape tape;
  std::vector<int> param_ids;
  int input_id = -1;
  int logits_id = -1;
  int loss_id = -1;
};

// Records one forward at `cfg` onto a fresh tape. When `update_running`
// is set, BN running statistics absorb this batch (momentum update). With
// `bn_batch_stats` off, BN layers apply the stored running statistics as a
// constant affine map (used for gradient diagnostics on a frozen model).
inline void forward_train(TapedForward& tf, StagedNetwork& net, const Tensor& x,
                          const TemporalConfig& cfg, bool update_running = true,
                          bool input_requires_grad = false, bool bn_batch_stats = true) {
  cfg.validate();
  if (cfg.t.size() != net.num_stages())
    throw ConfigError("forward: config length != stage count");
  if (x.dim(0) != cfg.t[0])
    throw ConfigError("forward: input frames != t_1");
  GradTape& tape = tf.tape;
  auto params = net.trainable_params();
  std::map<const Tensor*, int> param_id;
  tf.param_ids.clear();
  for (Tensor* p : params) {
    int id = tape.leaf(*p, true);
    tf.param_ids.push_back(id);
    param_id[p] = id;
  }
  tf.input_id = tape.leaf(x, input_requires_grad);

  int cur = tf.input_id;
  const std::size_t batch = x.dim(1);
  for (std::size_t si = 0; si < net.num_stages(); ++si) {
    cur = tape.ttm(cur, cfg.t[si]);
    const std::size_t t_i = cfg.t[si];
    for (std::size_t li = net.stages[si].first; li < net.stages[si].second; ++li) {
      Layer& l = net.layers[li];
      switch (l.spec.kind) {
        case LayerKind::conv2d:
        case LayerKind::dense: {
          Shape folded{t_i * batch};
          folded.insert(folded.end(), l.in_shape.begin(), l.in_shape.end());
          int xin = tape.reshape(cur, folded);
          int y = l.spec.kind == LayerKind::conv2d
                      ? tape.conv(xin, param_id.at(&l.w), l.spec.stride, l.spec.pad)
                      : tape.dense(xin, param_id.at(&l.w));
          if (!l.bias.empty()) y = tape.bias_add(y, param_id.at(&l.bias), 1);
          Shape unfolded{t_i, batch};
          unfolded.insert(unfolded.end(), l.out_shape.begin(), l.out_shape.end());
          cur = tape.reshape(y, unfolded);
          break;
        }
        case LayerKind::batchnorm: {
          if (!bn_batch_stats) {
            const std::size_t ch = l.gamma.size();
            Tensor scale({ch}), shift({ch});
            for (std::size_t c = 0; c < ch; ++c) {
              scale[c] = l.gamma[c] / std::sqrt(l.run_var[c] + l.spec.bn_eps);
              shift[c] = l.beta[c] - l.run_mean[c] * scale[c];
            }
            cur = tape.channel_affine(cur, std::move(scale), std::move(shift), 2);
            break;
          }
          Tensor bmean, bvar;
          cur = tape.batchnorm(cur, param_id.at(&l.gamma), param_id.at(&l.beta), 2,
                               l.spec.bn_eps, &bmean, &bvar);
          if (update_running) {
            const double m = l.spec.bn_momentum;
            for (std::size_t c = 0; c < bmean.size(); ++c) {
              l.run_mean[c] = (1.0 - m) * l.run_mean[c] + m * bmean[c];
              l.run_var[c] = (1.0 - m) * l.run_var[c] + m * bvar[c];
            }
          }
          break;
        }
        case LayerKind::lif: {
          const NeuronParams& np = l.spec.neuron ? *l.spec.neuron : net.default_neuron;
          const SurrogateSpec& sg = l.spec.surrogate ? *l.spec.surrogate : net.default_surrogate;
          cur = tape.lif_seq(cur, np, sg);
          break;
        }
        case LayerKind::avg_pool: {
          const std::size_t st = l.spec.pool_stride ? l.spec.pool_stride : l.spec.pool_k;
          Shape folded{t_i * batch};
          folded.insert(folded.end(), l.in_shape.begin(), l.in_shape.end());
          int xin = tape.reshape(cur, folded);
          int y = tape.avg_pool(xin, l.spec.pool_k, st);
          Shape unfolded{t_i, batch};
          unfolded.insert(unfolded.end(), l.out_shape.begin(), l.out_shape.end());
          cur = tape.reshape(y, unfolded);
          break;
        }
        case LayerKind::flatten:
          cur = tape.reshape(cur, {t_i, batch, shape_numel(l.out_shape)});
          break;
        case LayerKind::voting_if: {
          const NeuronParams& np = l.spec.neuron ? *l.spec.neuron : net.default_neuron;
          const SurrogateSpec& sg = l.spec.surrogate ? *l.spec.surrogate : net.default_surrogate;
          int spikes = tape.lif_seq(cur, np, sg);
          cur = tape.sum_axis0(spikes);
          break;
        }
        case LayerKind::voting_membrane: {
          const NeuronParams& np = l.spec.neuron ? *l.spec.neuron : net.default_neuron;
          cur = tape.time_weighted_sum(cur, membrane_vote_coeffs(t_i, np.tau));
          break;
        }
      }
    }
  }
  tf.logits_id = cur;
}

// --- BN folding / bias removal ------------------------------------------

struct FoldReport {
  struct Entry {
    std::size_t layer_index;       // index of the absorbed BN (pre-fold numbering)
    double dropped_bias_l2 = 0.0;
    double dropped_bias_max = 0.0;
  };
  std::vector<Entry> entries;
};

// Rescales each conv/dense by its following BN, drops the bias the folding
// would introduce (and any existing bias), removes the BN layers, and marks
// the result bias-free.
inline std::pair<StagedNetwork, FoldReport> fold_bn_remove_bias(const StagedNetwork& src) {
  StagedNetwork net = src;
  FoldReport report;
  // Validate every BN follows a conv/dense.
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    if (net.layers[i].spec.kind != LayerKind::batchnorm) continue;
    if (i == 0 || (net.layers[i - 1].spec.kind != LayerKind::conv2d &&
                   net.layers[i - 1].spec.kind != LayerKind::dense))
      throw GateError("fold_bn_remove_bias: batchnorm at layer " + std::to_string(i) +
                      " has no preceding conv/dense");
  }
  std::vector<Layer> folded;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    Layer l = net.layers[i];
    const bool followed_by_bn = i + 1 < net.layers.size() &&
                                net.layers[i + 1].spec.kind == LayerKind::batchnorm;
    if ((l.spec.kind == LayerKind::conv2d || l.spec.kind == LayerKind::dense) && followed_by_bn) {
      const Layer& bn = net.layers[i + 1];
      const std::size_t ch = bn.gamma.size();
      const std::size_t per = l.w.size() / ch;
      FoldReport::Entry entry;
      entry.layer_index = i + 1;
      for (std::size_t c = 0; c < ch; ++c) {
        const double scale = bn.gamma[c] / std::sqrt(bn.run_var[c] + bn.spec.bn_eps);
        double* wc = l.w.data() + c * per;
        for (std::size_t j = 0; j < per; ++j) wc[j] *= scale;
        const double old_bias = l.bias.empty() ? 0.0 : l.bias[c];
        const double dropped = bn.beta[c] + (old_bias - bn.run_mean[c]) * scale;
        entry.dropped_bias_l2 += dropped * dropped;
        entry.dropped_bias_max = std::max(entry.dropped_bias_max, std::fabs(dropped));
      }
      entry.dropped_bias_l2 = std::sqrt(entry.dropped_bias_l2);
      report.entries.push_back(entry);
      l.bias = Tensor();
      l.spec.with_bias = false;
      folded.push_back(std::move(l));
      ++i;  // skip the absorbed BN
    } else if (l.spec.kind == LayerKind::batchnorm) {
      continue;  // unreachable after validation, kept for safety
    } else {
      if (!l.bias.empty()) {
        FoldReport::Entry entry;
        entry.layer_index = i;
        entry.dropped_bias_l2 = l.bias.norm2();
        entry.dropped_bias_max = l.bias.max_abs();
        report.entries.push_back(entry);
        l.bias = Tensor();
        l.spec.with_bias = false;
      }
      folded.push_back(std::move(l));
    }
  }
  net.layers = std::move(folded);
  net.block_starts.clear();
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const LayerKind k = net.layers[i].spec.kind;
    if (k == LayerKind::conv2d || k == LayerKind::dense) net.block_starts.push_back(i);
  }
  if (!net.block_starts.empty()) net.block_starts[0] = 0;
  net.bias_free = true;
  if (src.granularity == 0) {
    net.stages = {{0, net.layers.size()}};
  } else {
    net = partition(std::move(net), src.granularity);
  }
  return {std::move(net), std::move(report)};
}

// --- layer DSL -----------------------------------------------------------
//
// Blocks separated by ';', layers by ','. Examples:
//   conv:8k3s1p1 | conv:16b (bias) | bn | lif | pool:2 | flatten |
//   dense:10 | dense:10b | vote:if | vote:mem
// Block boundaries from ';' are advisory for readability; partitioning is
// re-derived from conv/dense positions, which matches them for the presets.
inline std::vector<LayerSpec> parse_layer_dsl(const std::string& dsl) {
  std::vector<LayerSpec> out;
  std::string token;
  auto flush = [&]() {
    std::string t;
    for (char c : token)
      if (!std::isspace(static_cast<unsigned char>(c))) t += c;
    token.clear();
    if (t.empty()) return;
    LayerSpec s;
    auto colon = t.find(':');
    const std::string head = t.substr(0, colon);
    const std::string arg = colon == std::string::npos ? "" : t.substr(colon + 1);
    auto parse_conv = [&](const std::string& a) {
      // F [kK] [sS] [pP] [b]
      std::size_t i = 0;
      auto read_num = [&]() {
        std::size_t v = 0;
        while (i < a.size() && std::isdigit(static_cast<unsigned char>(a[i])))
          v = v * 10 + static_cast<std::size_t>(a[i++] - '0');
        return v;
      };
      s.out_channels = read_num();
      while (i < a.size()) {
        const char c = a[i++];
        if (c == 'k') s.kernel = read_num();
        else if (c == 's') s.stride = read_num();
        else if (c == 'p') s.pad = read_num();
        else if (c == 'b') s.with_bias = true;
        else throw ConfigError(std::string("layer dsl: bad conv option '") + c + "'");
      }
      if (s.out_channels == 0) throw ConfigError("layer dsl: conv needs a channel count");
    };
    if (head == "conv") {
      s.kind = LayerKind::conv2d;
      parse_conv(arg);
    } else if (head == "dense") {
      s.kind = LayerKind::dense;
      std::string a = arg;
      if (!a.empty() && a.back() == 'b') {
        s.with_bias = true;
        a.pop_back();
      }
      s.out_features = a.empty() ? 0 : static_cast<std::size_t>(std::stoul(a));
      if (s.out_features == 0) throw ConfigError("layer dsl: dense needs a feature count");
    } else if (head == "bn") {
      s.kind = LayerKind::batchnorm;
      if (!arg.empty()) s.bn_eps = std::stod(arg);
    } else if (head == "lif") {
      s.kind = LayerKind::lif;
    } else if (head == "pool") {
      s.kind = LayerKind::avg_pool;
      std::string a = arg;
      auto spos = a.find('s');
      if (spos != std::string::npos) {
        s.pool_stride = static_cast<std::size_t>(std::stoul(a.substr(spos + 1)));
        a = a.substr(0, spos);
      }
      s.pool_k = a.empty() ? 2 : static_cast<std::size_t>(std::stoul(a));
    } else if (head == "flatten") {
      s.kind = LayerKind::flatten;
    } else if (head == "vote") {
      if (arg == "if") s.kind = LayerKind::voting_if;
      else if (arg == "mem") s.kind = LayerKind::voting_membrane;
      else throw ConfigError("layer dsl: vote must be 'if' or 'mem'");
    } else {
      throw ConfigError("layer dsl: unknown layer '" + head + "'");
    }
    out.push_back(s);
  };
  for (char c : dsl) {
    if (c == ',' || c == ';') flush();
    else token += c;
  }
  flush();
  if (out.empty()) throw ConfigError("layer dsl: no layers");
  return out;
}

// Named topologies used by the tools and tests.
inline std::string network_preset(const std::string& name) {
  static const std::map<std::string, std::string> presets = {
      // VGG-like 3-conv 1-fc net, max width 16, bias-free (6160 weights at 2x34x34 input).
      {"3c1fc_w16",
       "conv:8k3s1p1,lif,pool:2;conv:16k3s1p1,lif,pool:2;conv:16k3s1p1,lif,pool:2;"
       "flatten,dense:10,vote:if"},
      // Small two-conv net with BN, for fold + fine-tune pipelines (2 classes).
      {"2c1fc_w8",
       "conv:8k3s1p1,bn,lif,pool:2;conv:8k3s1p1,bn,lif,pool:2;flatten,dense:2,vote:if"},
      // Dense-only net for quick experiments.
      {"mlp_small", "dense:32,bn,lif;dense:10,vote:if"},
  };
  auto it = presets.find(name);
  if (it == presets.end()) throw ConfigError("unknown network preset '" + name + "'");
  return it->second;
}

inline std::vector<LayerSpec> resolve_network_spec(const std::string& name_or_dsl) {
  if (name_or_dsl.find(':') == std::string::npos &&
      name_or_dsl.find(',') == std::string::npos)
    return parse_layer_dsl(network_preset(name_or_dsl));
  return parse_layer_dsl(name_or_dsl);
}

}  // namespace flexspike
