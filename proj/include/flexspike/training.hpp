#pragma once

#include <chrono>
#include <fstream>
#include <string>
#include <vector>

#include "flexspike/dataset.hpp"
#include "flexspike/network.hpp"
#include "flexspike/optim.hpp"

namespace flexspike {

enum class TrainMethod { SDT, NMT, MTT };
enum class SamplerMode { iid_uniform, monotone_nonincreasing };

inline TrainMethod train_method_from_string(const std::string& s) {
  if (s == "SDT" || s == "sdt") return TrainMethod::SDT;
  if (s == "NMT" || s == "nmt") return TrainMethod::NMT;
  if (s == "MTT" || s == "mtt") return TrainMethod::MTT;
  throw ConfigError("unknown training method '" + s + "'");
}
inline const char* train_method_name(TrainMethod m) {
  switch (m) {
    case TrainMethod::SDT: return "SDT";
    case TrainMethod::NMT: return "NMT";
    case TrainMethod::MTT: return "MTT";
  }
  return "?";
}

struct TrainConfig {
  TrainMethod method = TrainMethod::MTT;
  std::size_t s = 3;  // sampled configs per iteration
  std::size_t t_min = 1, t_max = 6;
  std::size_t epochs = 10;
  std::size_t batch_size = 20;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  bool cosine = true;
  SamplerMode sampler_mode = SamplerMode::iid_uniform;
  std::uint64_t seed = 1;
  std::size_t calibration_batches = 10;

  std::size_t samples_per_iteration() const { return method == TrainMethod::SDT ? 1 : s; }

  void validate() const {
    if (s < 1) throw ConfigError("train: s must be >= 1");
    if (t_min < 1 || t_min > t_max) throw ConfigError("train: need 1 <= t_min <= t_max");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  }
};

// --- dataset view used by the trainer ---------------------------------------

// Events are framed once at t_max and sliced per sampled config; static
// images are encoded as constant current at the sampled t_1.
struct Dataset {
  enum class Kind { events, images };
  Kind kind = Kind::events;
  EventDataset events;
  ImageDataset images;

  std::size_t size() const {
    return kind == Kind::events ? events.samples.size() : images.images.size();
  }
  int label(std::size_t i) const {
    return kind == Kind::events ? events.samples[i].label : images.labels[i];
  }
  Shape feature_shape() const {
    if (kind == Kind::events) return {2, events.h, events.w};
    return images.images.empty() ? Shape{} : images.images[0].shape();
  }

  static Dataset from_events(EventDataset ds) {
    Dataset d;
    d.kind = Kind::events;
    d.events = std::move(ds);
    return d;
  }
  static Dataset from_images(ImageDataset ds) {
    Dataset d;
    d.kind = Kind::images;
    d.images = std::move(ds);
    return d;
  }
};

// Frames cached at the training t_max; the first t_1 frames feed the input
// stage of each sampled config.
struct FramedCache {
  std::vector<Tensor> frames;  // events only, each [t_max, C, H, W]
  std::size_t t_max = 0;

  static FramedCache build(const Dataset& ds, std::size_t t_max) {
    FramedCache c;
    c.t_max = t_max;
    if (ds.kind != Dataset::Kind::events) return c;
    FrameSpec spec;
    spec.t_bins = t_max;
    spec.channels = 2;
    spec.h = ds.events.h;
    spec.w = ds.events.w;
    c.frames.reserve(ds.events.samples.size());
    for (const auto& s : ds.events.samples) c.frames.push_back(frame_events(s.stream, spec));
    return c;
  }
};

namespace detail {

inline Tensor stack_first_frames(const std::vector<Tensor>& frames,
                                 const std::vector<std::size_t>& idx, std::size_t t1) {
  const Tensor& first = frames[idx[0]];
  Shape feature(first.shape().begin() + 1, first.shape().end());
  const std::size_t step = shape_numel(feature);
  Shape out_shape{t1, idx.size()};
  out_shape.insert(out_shape.end(), feature.begin(), feature.end());
  Tensor out(out_shape);
  for (std::size_t t = 0; t < t1; ++t)
    for (std::size_t i = 0; i < idx.size(); ++i)
      std::copy(frames[idx[i]].data() + t * step, frames[idx[i]].data() + (t + 1) * step,
                out.data() + (t * idx.size() + i) * step);
  return out;
}

inline Tensor stack_images(const std::vector<Tensor>& images, const std::vector<std::size_t>& idx,
                           std::size_t t1) {
  const Tensor& first = images[idx[0]];
  const std::size_t step = first.size();
  Shape out_shape{t1, idx.size()};
  out_shape.insert(out_shape.end(), first.shape().begin(), first.shape().end());
  Tensor out(out_shape);
  for (std::size_t t = 0; t < t1; ++t)
    for (std::size_t i = 0; i < idx.size(); ++i)
      std::copy(images[idx[i]].data(), images[idx[i]].data() + step,
                out.data() + (t * idx.size() + i) * step);
  return out;
}

}  // namespace detail

// Assembles a batch at t1 input frames for the sampled config.
inline Tensor make_batch(const Dataset& ds, const FramedCache& cache,
                         const std::vector<std::size_t>& idx, std::size_t t1) {
  if (ds.kind == Dataset::Kind::events) {
    if (t1 > cache.t_max) throw ConfigError("make_batch: t1 exceeds framed t_max");
    return detail::stack_first_frames(cache.frames, idx, t1);
  }
  return detail::stack_images(ds.images.images, idx, t1);
}

// --- temporal-config sampling ------------------------------------------------

inline TemporalConfig sample_config(std::size_t stages, std::size_t t_min, std::size_t t_max,
                                    SamplerMode mode, RngStream& rng) {
  if (t_min < 1 || t_min > t_max) throw ConfigError("sample_config: bad bounds");
  TemporalConfig cfg;
  cfg.t_min = t_min;
  cfg.t_max = t_max;
  cfg.t.resize(stages);
  for (auto& v : cfg.t)
    v = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(t_min),
                                                 static_cast<std::int64_t>(t_max)));
  if (mode == SamplerMode::monotone_nonincreasing)
    std::sort(cfg.t.begin(), cfg.t.end(), std::greater<>());
  return cfg;
}

// --- evaluation ----------------------------------------------------------------

// Accuracy at a uniform time step. Event streams are re-framed into T bins
// over their own span; images are repeated for T steps.
inline double evaluate(const StagedNetwork& net, const Dataset& ds, std::size_t t_steps,
                       std::size_t batch_size = 64, EvalStats* stats_total = nullptr) {
  if (ds.size() == 0) throw ConfigError("evaluate: empty dataset");
  std::size_t correct = 0;
  if (stats_total) {
    stats_total->layer_spike_sums.assign(net.layers.size(), 0.0);
    stats_total->layer_neuron_steps.assign(net.layers.size(), 0.0);
  }
  for (std::size_t begin = 0; begin < ds.size(); begin += batch_size) {
    const std::size_t end = std::min(ds.size(), begin + batch_size);
    std::vector<std::size_t> idx(end - begin);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
    Tensor x;
    if (ds.kind == Dataset::Kind::events) {
      FrameSpec spec;
      spec.t_bins = t_steps;
      spec.channels = 2;
      spec.h = ds.events.h;
      spec.w = ds.events.w;
      std::vector<Tensor> framed(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i)
        framed[i] = frame_events(ds.events.samples[idx[i]].stream, spec);
      std::vector<std::size_t> all(idx.size());
      for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
      x = detail::stack_first_frames(framed, all, t_steps);
    } else {
      x = detail::stack_images(ds.images.images, idx, t_steps);
    }
    EvalStats stats;
    Tensor logits = forward_eval(net, x, TemporalConfig::uniform(net.num_stages(), t_steps),
                                 stats_total ? &stats : nullptr);
    if (stats_total)
      for (std::size_t li = 0; li < stats.layer_spike_sums.size(); ++li) {
        stats_total->layer_spike_sums[li] += stats.layer_spike_sums[li];
        stats_total->layer_neuron_steps[li] += stats.layer_neuron_steps[li];
      }
    const std::size_t classes = logits.dim(1);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < classes; ++c)
        if (logits.at2(i, c) > logits.at2(i, best)) best = c;
      if (static_cast<int>(best) == ds.label(idx[i])) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

// Accuracy under an arbitrary temporal configuration; the input is framed at
// cfg.t[0] bins (events) or repeated cfg.t[0] times (images).
inline double evaluate_config(const StagedNetwork& net, const Dataset& ds,
                              const TemporalConfig& cfg, std::size_t batch_size = 64) {
  if (ds.size() == 0) throw ConfigError("evaluate_config: empty dataset");
  std::size_t correct = 0;
  const std::size_t t1 = cfg.t.at(0);
  for (std::size_t begin = 0; begin < ds.size(); begin += batch_size) {
    const std::size_t end = std::min(ds.size(), begin + batch_size);
    std::vector<std::size_t> idx(end - begin);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
    Tensor x;
    if (ds.kind == Dataset::Kind::events) {
      FrameSpec spec;
      spec.t_bins = t1;
      spec.channels = 2;
      spec.h = ds.events.h;
      spec.w = ds.events.w;
      std::vector<Tensor> framed(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i)
        framed[i] = frame_events(ds.events.samples[idx[i]].stream, spec);
      std::vector<std::size_t> all(idx.size());
      for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
      x = detail::stack_first_frames(framed, all, t1);
    } else {
      x = detail::stack_images(ds.images.images, idx, t1);
    }
    Tensor logits = forward_eval(net, x, cfg);
    const std::size_t classes = logits.dim(1);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < classes; ++c)
        if (logits.at2(i, c) > logits.at2(i, best)) best = c;
      if (static_cast<int>(best) == ds.label(idx[i])) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

// --- one training iteration -----------------------------------------------------

struct IterationResult {
  std::vector<double> losses;           // one per sampled config
  std::vector<TemporalConfig> configs;  // the sampled configs
  std::size_t peak_tape_bytes = 0;
};

struct OptimizerState {
  std::vector<Tensor> momentum;  // aligned with net.trainable_params()
};

// One iteration: sample `s` configs, accumulate the gradients of the summed
// losses, then take a single optimizer step on the collected gradients.
inline IterationResult mtt_iteration(StagedNetwork& net, const Dataset& ds,
                                     const FramedCache& cache,
                                     const std::vector<std::size_t>& batch_idx,
                                     const TrainConfig& cfg, double lr, RngStream& config_rng,
                                     OptimizerState& opt) {
  cfg.validate();
  auto params = net.trainable_params();
  if (opt.momentum.size() != params.size()) opt.momentum.assign(params.size(), Tensor());
  std::vector<Tensor> grad_accum(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) grad_accum[i] = Tensor(params[i]->shape());

  std::vector<int> labels(batch_idx.size());
  for (std::size_t i = 0; i < batch_idx.size(); ++i)
    labels[i] = ds.label(batch_idx[i]);

  IterationResult result;
  const std::size_t n_samples = cfg.samples_per_iteration();
  for (std::size_t j = 0; j < n_samples; ++j) {
    TemporalConfig tc;
    switch (cfg.method) {
      case TrainMethod::SDT:
        tc = TemporalConfig::uniform(net.num_stages(), cfg.t_max);
        break;
      case TrainMethod::NMT: {
        const std::size_t t = static_cast<std::size_t>(config_rng.uniform_int(
            static_cast<std::int64_t>(cfg.t_min), static_cast<std::int64_t>(cfg.t_max)));
        tc = TemporalConfig::uniform(net.num_stages(), t);
        tc.t_min = cfg.t_min;
        tc.t_max = cfg.t_max;
        break;
      }
      case TrainMethod::MTT:
        tc = sample_config(net.num_stages(), cfg.t_min, cfg.t_max, cfg.sampler_mode, config_rng);
        break;
    }
    Tensor x = make_batch(ds, cache, batch_idx, tc.t[0]);
    TapedForward tf;
    forward_train(tf, net, x, tc);
    tf.loss_id = tf.tape.softmax_cross_entropy(tf.logits_id, labels);
    const double loss = tf.tape.value(tf.loss_id)[0];
    if (!std::isfinite(loss)) {
      std::string cfg_str;
      for (auto t : tc.t) cfg_str += (cfg_str.empty() ? "" : ",") + std::to_string(t);
      throw NumericError("training: non-finite loss at sample " + std::to_string(j) +
                         " (config " + cfg_str + ")");
    }
    tf.tape.backward(tf.loss_id);
    for (std::size_t p = 0; p < params.size(); ++p) grad_accum[p] += tf.tape.grad(tf.param_ids[p]);
    result.losses.push_back(loss);
    result.configs.push_back(tc);
    result.peak_tape_bytes = std::max(result.peak_tape_bytes, tf.tape.bytes_peak());
  }
  for (std::size_t p = 0; p < params.size(); ++p)
    sgd_step(*params[p], grad_accum[p], lr, cfg.momentum, cfg.weight_decay, opt.momentum[p]);
  return result;
}

// --- BN calibration ---------------------------------------------------------

struct CalibrationReport {
  std::size_t batches_used = 0;
  TemporalConfig config;
  struct LayerDelta {
    std::size_t layer_index;
    double mean_delta_l2, var_delta_l2;
  };
  std::vector<LayerDelta> deltas;
};

// Replaces BN running statistics by the pooled statistics of `n_batches`
// forwards at cfg_t. Batches are the first n_batches of the dataset in
// order, so repeating the call is idempotent.
inline CalibrationReport bn_calibrate(StagedNetwork& net, const Dataset& ds,
                                      std::size_t n_batches, const TemporalConfig& cfg_t,
                                      std::size_t batch_size = 32) {
  if (n_batches == 0) throw ConfigError("bn_calibrate: n_batches must be >= 1");
  if (!net.has_batchnorm())
    throw ConfigError("bn_calibrate: network has no batchnorm layers");
  FramedCache cache;  // frame only what calibration touches
  BnCalibAccum accum;
  const std::size_t t1 = cfg_t.t.at(0);
  std::size_t used = 0;
  for (std::size_t b = 0; b < n_batches; ++b) {
    const std::size_t begin = b * batch_size;
    if (begin >= ds.size()) break;
    const std::size_t end = std::min(ds.size(), begin + batch_size);
    std::vector<std::size_t> idx(end - begin);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
    Tensor x;
    if (ds.kind == Dataset::Kind::events) {
      FrameSpec spec;
      spec.t_bins = t1;
      spec.channels = 2;
      spec.h = ds.events.h;
      spec.w = ds.events.w;
      std::vector<Tensor> framed(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i)
        framed[i] = frame_events(ds.events.samples[idx[i]].stream, spec);
      std::vector<std::size_t> all(idx.size());
      for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
      x = detail::stack_first_frames(framed, all, t1);
    } else {
      x = detail::stack_images(ds.images.images, idx, t1);
    }
    forward_eval(net, x, cfg_t, nullptr, &accum);
    ++used;
  }
  CalibrationReport report;
  report.batches_used = used;
  report.config = cfg_t;
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    Layer& l = net.layers[li];
    if (l.spec.kind != LayerKind::batchnorm) continue;
    const auto& slot = accum.slots.at(li);
    if (slot.sum.empty()) continue;
    CalibrationReport::LayerDelta delta{li, 0.0, 0.0};
    for (std::size_t c = 0; c < l.run_mean.size(); ++c) {
      const double mean = slot.sum[c] / slot.count;
      const double var = slot.sumsq[c] / slot.count - mean * mean;
      delta.mean_delta_l2 += (mean - l.run_mean[c]) * (mean - l.run_mean[c]);
      delta.var_delta_l2 += (var - l.run_var[c]) * (var - l.run_var[c]);
      l.run_mean[c] = mean;
      l.run_var[c] = var;
    }
    delta.mean_delta_l2 = std::sqrt(delta.mean_delta_l2);
    delta.var_delta_l2 = std::sqrt(delta.var_delta_l2);
    report.deltas.push_back(delta);
  }
  return report;
}

// --- full training loop -------------------------------------------------------

struct EpochMetrics {
  std::size_t epoch = 0;
  std::vector<double> mean_loss_per_sample;  // indexed by sample slot j
  double train_accuracy = 0.0;
  double wall_seconds = 0.0;
};

struct TrainResult {
  std::vector<EpochMetrics> epochs;
  std::size_t peak_tape_bytes = 0;
};

inline void write_metrics_csv(const TrainResult& r, std::size_t s, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw ConfigError("write_metrics_csv: cannot open " + path);
  os << "epoch";
  for (std::size_t j = 0; j < s; ++j) os << ",mean_loss_s" << j;
  os << ",train_acc,wall_seconds\n";
  os.precision(17);
  for (const auto& e : r.epochs) {
    os << e.epoch;
    for (double l : e.mean_loss_per_sample) os << ',' << l;
    os << ',' << e.train_accuracy << ',' << e.wall_seconds << '\n';
  }
}

// Method dispatch is inside mtt_iteration: SDT runs one fixed-T sample per
// iteration, NMT draws one uniform T for the whole net, MTT draws per-stage
// steps. Determinism: config draws, batch shuffling and init use independent
// streams derived from the seed.
inline TrainResult train(StagedNetwork& net, const Dataset& ds, const TrainConfig& cfg) {
  cfg.validate();
  if (ds.size() == 0) throw ConfigError("train: empty dataset");
  FramedCache cache = FramedCache::build(ds, cfg.t_max);
  RngStream config_rng = RngStream(cfg.seed).fork("config");
  RngStream data_rng = RngStream(cfg.seed).fork("data");
  OptimizerState opt;
  TrainResult result;

  const std::size_t iters_per_epoch = (ds.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_iters = iters_per_epoch * cfg.epochs;
  std::size_t global_iter = 0;

  std::vector<std::size_t> order(ds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t_begin = std::chrono::steady_clock::now();
    data_rng.shuffle(order);
    std::vector<double> loss_sums(cfg.samples_per_iteration(), 0.0);
    for (std::size_t it = 0; it < iters_per_epoch; ++it) {
      const std::size_t begin = it * cfg.batch_size;
      const std::size_t end = std::min(ds.size(), begin + cfg.batch_size);
      std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                     order.begin() + static_cast<std::ptrdiff_t>(end));
      const double lr = cfg.cosine ? cosine_lr(global_iter, total_iters, cfg.lr) : cfg.lr;
      IterationResult ir = mtt_iteration(net, ds, cache, batch, cfg, lr, config_rng, opt);
      for (std::size_t j = 0; j < ir.losses.size(); ++j) loss_sums[j] += ir.losses[j];
      result.peak_tape_bytes = std::max(result.peak_tape_bytes, ir.peak_tape_bytes);
      ++global_iter;
    }
    EpochMetrics m;
    m.epoch = epoch;
    for (double s : loss_sums)
      m.mean_loss_per_sample.push_back(s / static_cast<double>(iters_per_epoch));
    m.train_accuracy = evaluate(net, ds, cfg.t_max, cfg.batch_size);
    m.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_begin).count();
    result.epochs.push_back(std::move(m));
  }
  return result;
}

// MTT fine-tuning of a folded network; BN locking is realised by the absence
// of BN layers after fold_bn_remove_bias.
inline TrainResult finetune_bias_free(StagedNetwork& net, const Dataset& ds,
                                      const TrainConfig& cfg) {
  if (net.has_batchnorm())
    throw GateError("finetune_bias_free: network still has batchnorm layers; fold first");
  if (net.has_bias())
    throw GateError("finetune_bias_free: network still has bias parameters");
  if (!net.bias_free)
    throw GateError("finetune_bias_free: network is not flagged bias-free");
  return train(net, ds, cfg);
}

}  // namespace flexspike
