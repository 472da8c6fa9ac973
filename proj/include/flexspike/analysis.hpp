#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "flexspike/lstsq.hpp"
#include "flexspike/training.hpp"

namespace flexspike {

// --- accuracy estimation: ACC(t) = sum_i K_i * sqrt(log2 t_i) + c -----------

struct EstimatorModel {
  std::vector<double> k;  // per-stage contribution
  double c = 0.0;
};

inline double predict_acc(const EstimatorModel& model, const std::vector<std::size_t>& t) {
  if (t.size() != model.k.size())
    throw ConfigError("predict_acc: config length != model size");
  double acc = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i] < 1) throw ConfigError("predict_acc: time steps must be >= 1");
    acc += model.k[i] * std::sqrt(std::log2(static_cast<double>(t[i])));
  }
  return acc + model.c;
}

struct EstimatorSample {
  std::vector<std::size_t> t;
  double accuracy = 0.0;
};

inline EstimatorModel fit_estimator(const std::vector<EstimatorSample>& samples) {
  if (samples.empty()) throw ConfigError("fit_estimator: no samples");
  const std::size_t stages = samples[0].t.size();
  if (samples.size() < stages + 1)
    throw ConfigError("fit_estimator: need at least " + std::to_string(stages + 1) +
                      " samples for " + std::to_string(stages) + " stages");
  Tensor features({samples.size(), stages + 1});
  Tensor targets({samples.size()});
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].t.size() != stages)
      throw ConfigError("fit_estimator: inconsistent config lengths");
    for (std::size_t j = 0; j < stages; ++j)
      features.at2(i, j) = std::sqrt(std::log2(static_cast<double>(samples[i].t[j])));
    features.at2(i, stages) = 1.0;
    targets[i] = samples[i].accuracy;
  }
  Tensor coeffs = least_squares_fit(features, targets);
  EstimatorModel model;
  model.k.assign(coeffs.data(), coeffs.data() + stages);
  model.c = coeffs[stages];
  return model;
}

// --- energy model and config search -----------------------------------------

struct EnergyModel {
  std::vector<double> rates;  // mean firing rate per stage
  double budget = 0.0;        // upper bound on sum_i t_i * R_i

  void validate() const {
    for (double r : rates)
      if (r < 0.0) throw ConfigError("energy model: rates must be nonnegative");
  }
};

// Mean spikes per neuron per step for each stage, measured at uniform T.
inline std::vector<double> estimate_firing_rates(const StagedNetwork& net, const Dataset& ds,
                                                 std::size_t t_steps) {
  if (ds.size() == 0) throw ConfigError("estimate_firing_rates: empty dataset");
  EvalStats stats;
  evaluate(net, ds, t_steps, 64, &stats);
  std::vector<double> rates(net.num_stages(), 0.0);
  for (std::size_t si = 0; si < net.num_stages(); ++si) {
    double spikes = 0.0, steps = 0.0;
    for (std::size_t li = net.stages[si].first; li < net.stages[si].second; ++li) {
      spikes += stats.layer_spike_sums[li];
      steps += stats.layer_neuron_steps[li];
    }
    rates[si] = steps > 0.0 ? spikes / steps : 0.0;
  }
  return rates;
}

struct SearchResult {
  std::vector<std::size_t> config;
  double predicted_accuracy = 0.0;
  double energy = 0.0;
  std::size_t nodes_visited = 0;
};

// Exact DFS over {t_min..t_max}^G maximising predicted accuracy subject to
// sum_i t_i*R_i <= budget. Prunes with an admissible bound (best remaining
// contribution per stage, inflated by 1e-9 so rounding can never prune the
// true optimum); ties resolve to the lexicographically smallest config
// because candidates are visited in ascending order and only strict
// improvements replace the incumbent.
inline SearchResult search_optimal(const EstimatorModel& model, const EnergyModel& energy,
                                   std::size_t t_min, std::size_t t_max) {
  if (t_min < 1 || t_min > t_max) throw ConfigError("search_optimal: bad bounds");
  const std::size_t stages = model.k.size();
  if (energy.rates.size() != stages)
    throw ConfigError("search_optimal: rate vector length != stage count");
  energy.validate();

  double min_cost = 0.0;
  for (double r : energy.rates) min_cost += static_cast<double>(t_min) * r;
  if (min_cost > energy.budget)
    throw ConfigError("search_optimal: infeasible budget (all-t_min config costs " +
                      std::to_string(min_cost) + " > " + std::to_string(energy.budget) + ")");

  const double feat_min = std::sqrt(std::log2(static_cast<double>(t_min)));
  const double feat_max = std::sqrt(std::log2(static_cast<double>(t_max)));
  std::vector<double> best_suffix(stages + 1, 0.0);  // max attainable value of stages i..G-1
  std::vector<double> min_cost_suffix(stages + 1, 0.0);
  for (std::size_t i = stages; i-- > 0;) {
    const double best_feat = model.k[i] >= 0.0 ? feat_max : feat_min;
    best_suffix[i] = best_suffix[i + 1] + model.k[i] * best_feat;
    min_cost_suffix[i] = min_cost_suffix[i + 1] + static_cast<double>(t_min) * energy.rates[i];
  }

  SearchResult result;
  result.config.assign(stages, t_min);
  result.predicted_accuracy = -1e300;
  std::vector<std::size_t> cur(stages, t_min);

  std::function<void(std::size_t, double, double)> dfs = [&](std::size_t depth, double value,
                                                             double cost) {
    ++result.nodes_visited;
    if (depth == stages) {
      const double exact = predict_acc(model, cur);
      if (exact > result.predicted_accuracy) {
        result.predicted_accuracy = exact;
        result.config = cur;
        result.energy = cost;
      }
      return;
    }
    if (value + best_suffix[depth] + model.c + 1e-9 <= result.predicted_accuracy) return;
    for (std::size_t t = t_min; t <= t_max; ++t) {
      const double c2 = cost + static_cast<double>(t) * energy.rates[depth];
      if (c2 + min_cost_suffix[depth + 1] > energy.budget + 1e-12) {
        break;  // cost is nondecreasing in t, so larger t cannot become feasible
      }
      cur[depth] = t;
      dfs(depth + 1,
          value + model.k[depth] * std::sqrt(std::log2(static_cast<double>(t))), c2);
    }
    cur[depth] = t_min;
  };
  dfs(0, 0.0, 0.0);
  return result;
}

// Expected epoch-time ratio of mixed-step training over fixed-step training:
// s * (t_min + t_max) / (2 T).
inline double cost_ratio(std::size_t s, std::size_t t_min, std::size_t t_max, std::size_t t_ref) {
  if (t_ref < 1) throw ConfigError("cost_ratio: T must be >= 1");
  return static_cast<double>(s) * static_cast<double>(t_min + t_max) /
         (2.0 * static_cast<double>(t_ref));
}

// --- noise-injection robustness -----------------------------------------------

struct NoiseSpec {
  std::vector<double> sigma2;  // noise variances
  enum class Target { weights, inputs } target = Target::weights;
  std::size_t repeats = 5;

  void validate() const {
    for (double v : sigma2)
      if (v < 0.0) throw ConfigError("noise spec: sigma^2 must be nonnegative");
    if (repeats < 1) throw ConfigError("noise spec: repeats must be >= 1");
  }
};

struct NoisePoint {
  double sigma2 = 0.0;
  double mean = 0.0, min = 1.0, max = 0.0;
};

namespace detail {

inline double evaluate_with_input_noise(const StagedNetwork& net, const Dataset& ds,
                                        std::size_t t_steps, double stddev, RngStream& rng,
                                        std::size_t batch_size = 64) {
  std::size_t correct = 0;
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
    if (stddev > 0.0)
      for (std::size_t i = 0; i < x.size(); ++i) x[i] += rng.normal(0.0, stddev);
    Tensor logits = forward_eval(net, x, TemporalConfig::uniform(net.num_stages(), t_steps));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < logits.dim(1); ++c)
        if (logits.at2(i, c) > logits.at2(i, best)) best = c;
      if (static_cast<int>(best) == ds.label(idx[i])) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

}  // namespace detail

// Perturb-evaluate-restore sweep; the network is bit-identical afterwards.
inline std::vector<NoisePoint> noise_robustness(StagedNetwork& net, const NoiseSpec& spec,
                                                const Dataset& ds, RngStream rng,
                                                std::size_t t_steps = 0) {
  spec.validate();
  if (t_steps == 0) t_steps = net.t_max;
  std::vector<Tensor*> weights;
  for (auto& l : net.layers)
    if ((l.spec.kind == LayerKind::conv2d || l.spec.kind == LayerKind::dense) && !l.w.empty())
      weights.push_back(&l.w);
  std::vector<Tensor> pristine;
  for (Tensor* w : weights) pristine.push_back(*w);

  std::vector<NoisePoint> out;
  for (double sigma2 : spec.sigma2) {
    NoisePoint point;
    point.sigma2 = sigma2;
    point.min = 1.0;
    point.max = 0.0;
    const double stddev = std::sqrt(sigma2);
    for (std::size_t rep = 0; rep < spec.repeats; ++rep) {
      double acc;
      if (spec.target == NoiseSpec::Target::weights) {
        if (stddev > 0.0)
          for (Tensor* w : weights)
            for (std::size_t i = 0; i < w->size(); ++i) (*w)[i] += rng.normal(0.0, stddev);
        acc = evaluate(net, ds, t_steps);
        for (std::size_t wi = 0; wi < weights.size(); ++wi) *weights[wi] = pristine[wi];
      } else {
        acc = detail::evaluate_with_input_noise(net, ds, t_steps, stddev, rng);
      }
      point.mean += acc;
      point.min = std::min(point.min, acc);
      point.max = std::max(point.max, acc);
    }
    point.mean /= static_cast<double>(spec.repeats);
    out.push_back(point);
  }
  return out;
}

// --- gradient-norm generalisation metrics ---------------------------------------

struct GradientMetrics {
  double grad_norm_w = 0.0;       // || d(mean loss over the set) / dW || over conv/dense weights
  double mean_grad_norm_x = 0.0;  // mean_i || dL_i / dx_i ||
};

// Gradients of the frozen model (running BN statistics), evaluated at the
// model's own t_max on the whole set.
inline GradientMetrics gradient_metrics(StagedNetwork& net, const Dataset& ds,
                                        std::size_t batch_size = 32) {
  if (ds.size() == 0) throw ConfigError("gradient_metrics: empty dataset");
  const std::size_t t_steps = net.t_max;
  FramedCache cache = FramedCache::build(ds, t_steps);
  auto params = net.trainable_params();
  std::vector<bool> is_weight(params.size(), false);
  {
    std::size_t pi = 0;
    for (auto& l : net.layers) {
      if (!l.w.empty()) {
        if (l.spec.kind == LayerKind::conv2d || l.spec.kind == LayerKind::dense)
          is_weight[pi] = true;
        ++pi;
      }
      if (!l.bias.empty()) ++pi;
      if (!l.gamma.empty()) pi += 2;
    }
  }
  std::vector<Tensor> grad_w(params.size());
  double sum_input_norms = 0.0;
  const double n_total = static_cast<double>(ds.size());

  for (std::size_t begin = 0; begin < ds.size(); begin += batch_size) {
    const std::size_t end = std::min(ds.size(), begin + batch_size);
    std::vector<std::size_t> idx(end - begin);
    std::vector<int> labels(end - begin);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      idx[i] = begin + i;
      labels[i] = ds.label(begin + i);
    }
    Tensor x = make_batch(ds, cache, idx, t_steps);
    TapedForward tf;
    forward_train(tf, net, x, TemporalConfig::uniform(net.num_stages(), t_steps),
                  /*update_running=*/false, /*input_requires_grad=*/true,
                  /*bn_batch_stats=*/false);
    tf.loss_id = tf.tape.softmax_cross_entropy(tf.logits_id, labels);
    tf.tape.backward(tf.loss_id);
    const double scale = static_cast<double>(idx.size()) / n_total;
    for (std::size_t p = 0; p < params.size(); ++p) {
      if (!is_weight[p]) continue;
      Tensor g = tf.tape.grad(tf.param_ids[p]);
      g *= scale;
      if (grad_w[p].empty())
        grad_w[p] = std::move(g);
      else
        grad_w[p] += g;
    }
    // Per-sample input gradients: batch-mean loss puts a 1/n factor on each
    // sample's slice, undone here.
    const Tensor& gx = tf.tape.grad(tf.input_id);
    const std::size_t batch_n = idx.size();
    const std::size_t feat = gx.size() / (t_steps * batch_n);
    for (std::size_t i = 0; i < batch_n; ++i) {
      double sq = 0.0;
      for (std::size_t t = 0; t < t_steps; ++t) {
        const double* p = gx.data() + (t * batch_n + i) * feat;
        for (std::size_t f = 0; f < feat; ++f) sq += p[f] * p[f];
      }
      sum_input_norms += std::sqrt(sq) * static_cast<double>(batch_n);
    }
  }
  GradientMetrics m;
  double sq = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p)
    if (!grad_w[p].empty())
      for (std::size_t i = 0; i < grad_w[p].size(); ++i) sq += grad_w[p][i] * grad_w[p][i];
  m.grad_norm_w = std::sqrt(sq);
  m.mean_grad_norm_x = sum_input_norms / n_total;
  return m;
}

// --- confidence-threshold early exit ---------------------------------------------

struct EarlyExitResult {
  std::size_t predicted_class = 0;
  std::size_t steps_used = 0;
};

// Runs a uniform single-stage inference step by step, accumulating voting
// logits, and exits once the softmax confidence reaches the threshold
// (falling through to t_max otherwise).
inline EarlyExitResult early_exit_infer(const StagedNetwork& net, const Tensor& frames,
                                        double confidence_threshold, std::size_t t_max) {
  if (frames.dim(0) < t_max) throw ConfigError("early_exit_infer: fewer frames than t_max");
  const std::size_t batch = frames.dim(1);
  if (batch != 1) throw ConfigError("early_exit_infer: one sample at a time");

  // Persistent per-layer membrane state across steps.
  std::vector<LifState> states;
  for (const auto& l : net.layers)
    if (l.spec.kind == LayerKind::lif || l.spec.kind == LayerKind::voting_if ||
        l.spec.kind == LayerKind::voting_membrane) {
      Shape s{batch};
      s.insert(s.end(), l.out_shape.begin(), l.out_shape.end());
      states.push_back(LifState::zeros(s));
    }

  const std::size_t feat = frames.size() / frames.dim(0);
  Tensor logits;  // accumulated voting logits
  EarlyExitResult result;
  for (std::size_t t = 0; t < t_max; ++t) {
    Tensor cur(Shape{batch, feat});
    std::copy(frames.data() + t * feat, frames.data() + (t + 1) * feat, cur.data());
    Shape in_s{batch};
    in_s.insert(in_s.end(), net.input_shape.begin(), net.input_shape.end());
    cur = cur.reshaped(in_s);
    std::size_t lif_i = 0;
    for (const auto& l : net.layers) {
      switch (l.spec.kind) {
        case LayerKind::conv2d: {
          Tensor y = conv2d(cur, l.w, l.spec.stride, l.spec.pad);
          if (!l.bias.empty()) detail::bias_add_channel(y, l.bias);
          cur = std::move(y);
          break;
        }
        case LayerKind::dense: {
          Tensor y = dense_forward(cur, l.w);
          if (!l.bias.empty()) detail::bias_add_channel(y, l.bias);
          cur = std::move(y);
          break;
        }
        case LayerKind::batchnorm: {
          const std::size_t ch = l.gamma.size();
          const std::size_t inner = shape_numel(l.out_shape) / ch;
          for (std::size_t c = 0; c < ch; ++c) {
            const double scale = l.gamma[c] / std::sqrt(l.run_var[c] + l.spec.bn_eps);
            const double shift = l.beta[c] - l.run_mean[c] * scale;
            double* p = cur.data() + c * inner;
            for (std::size_t i = 0; i < inner; ++i) p[i] = p[i] * scale + shift;
          }
          break;
        }
        case LayerKind::avg_pool: {
          const std::size_t st = l.spec.pool_stride ? l.spec.pool_stride : l.spec.pool_k;
          cur = avg_pool2d(cur, l.spec.pool_k, st);
          break;
        }
        case LayerKind::flatten:
          cur = cur.reshaped({batch, shape_numel(l.out_shape)});
          break;
        case LayerKind::lif:
        case LayerKind::voting_if: {
          const NeuronParams& np = l.spec.neuron ? *l.spec.neuron : net.default_neuron;
          auto [spikes, next] = lif_step(states[lif_i], cur, np);
          states[lif_i] = std::move(next);
          ++lif_i;
          if (l.spec.kind == LayerKind::voting_if) {
            if (logits.empty()) logits = Tensor(spikes.shape());
            logits += spikes;
            cur = logits;
          } else {
            cur = std::move(spikes);
          }
          break;
        }
        case LayerKind::voting_membrane: {
          const NeuronParams& np = l.spec.neuron ? *l.spec.neuron : net.default_neuron;
          LifState& st = states[lif_i];
          ++lif_i;
          for (std::size_t i = 0; i < st.u.size(); ++i) st.u[i] = np.tau * st.u[i] + cur[i];
          Tensor avg = st.u;
          avg *= 1.0 / static_cast<double>(t + 1);
          logits = avg;
          cur = logits;
          break;
        }
      }
    }
    result.steps_used = t + 1;
    // Softmax confidence on the accumulated logits.
    double zmax = logits[0];
    for (std::size_t c = 1; c < logits.size(); ++c) zmax = std::max(zmax, logits[c]);
    double denom = 0.0;
    for (std::size_t c = 0; c < logits.size(); ++c) denom += std::exp(logits[c] - zmax);
    double best_p = 0.0;
    std::size_t best_c = 0;
    for (std::size_t c = 0; c < logits.size(); ++c) {
      const double p = std::exp(logits[c] - zmax) / denom;
      if (p > best_p) {
        best_p = p;
        best_c = c;
      }
    }
    result.predicted_class = best_c;
    if (best_p >= confidence_threshold) break;
  }
  return result;
}

}  // namespace flexspike
