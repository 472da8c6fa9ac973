#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>

#include "flexspike/analysis.hpp"
#include "flexspike/training.hpp"

namespace flexspike {

// Flat key=value experiment configuration ('#' starts a comment). Unknown
// keys are rejected; every key has the documented default.
struct RunConfig {
  // dataset
  std::string dataset_kind = "synthetic_bar";  // synthetic_bar | synthetic_poisson | events_dir | images_idx
  std::string data_dir;                        // events_dir root (train/ and test/ subdirs)
  std::string images_train, labels_train, images_test, labels_test;
  std::size_t downsample = 1;
  std::size_t synth_h = 12, synth_w = 12;
  std::uint64_t synth_span = 256;
  double synth_rate_high = 0.05, synth_rate_low = 0.002;
  std::size_t synth_train_per_class = 64, synth_test_per_class = 32;
  std::uint64_t data_seed = 7;

  // network
  std::string network = "2c1fc_w8";
  double tau = 0.5, v_th = 1.0;
  std::string reset = "hard";
  bool multi_spike = false;
  double tau0 = 0.0;  // 0 disables; "inf" accepted
  std::string surrogate = "triangular";
  double surrogate_h = 1.0, surrogate_alpha = 1.0, surrogate_beta = 5.0;
  double vote_surrogate_h = 3.0;

  // training
  std::string method = "MTT";
  std::size_t s = 3;
  std::size_t t_min = 1, t_max = 6;
  std::size_t g = 1;
  std::size_t epochs = 10, batch_size = 20;
  double lr = 0.1, momentum = 0.9, weight_decay = 0.0005;
  bool cosine = true;
  std::string sampler_mode = "iid_uniform";
  std::uint64_t seed = 1;
  std::size_t calibration_batches = 10;

  // analysis
  double epsilon = kGroupingEpsilon;
  std::size_t repeats = 5;

  // run
  std::string output_dir = "out";
  int threads = 1;
  bool deterministic = false;

  NeuronParams neuron_params() const {
    NeuronParams p;
    p.tau = tau;
    p.v_th = v_th;
    p.reset_mode = reset == "soft" ? ResetMode::soft : ResetMode::hard;
    p.multi_spike = multi_spike;
    if (std::isinf(tau0))
      p.tau0 = tau0;
    else if (tau0 > 0.0)
      p.tau0 = tau0;
    p.validate();
    return p;
  }
  SurrogateSpec surrogate_spec() const {
    SurrogateSpec sg;
    sg.kind = surrogate == "single_exponential" ? SurrogateKind::single_exponential
                                                : SurrogateKind::triangular;
    sg.h = surrogate_h;
    sg.alpha = surrogate_alpha;
    sg.beta = surrogate_beta;
    sg.validate();
    return sg;
  }
  TrainConfig train_config() const {
    TrainConfig tc;
    tc.method = train_method_from_string(method);
    tc.s = s;
    tc.t_min = t_min;
    tc.t_max = t_max;
    tc.epochs = epochs;
    tc.batch_size = batch_size;
    tc.lr = lr;
    tc.momentum = momentum;
    tc.weight_decay = weight_decay;
    tc.cosine = cosine;
    tc.sampler_mode = sampler_mode == "monotone_nonincreasing"
                          ? SamplerMode::monotone_nonincreasing
                          : SamplerMode::iid_uniform;
    tc.seed = seed;
    tc.calibration_batches = calibration_batches;
    tc.validate();
    return tc;
  }
};

inline RunConfig parse_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open " + path);
  RunConfig cfg;
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: line " + std::to_string(lineno) + " is not key=value");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }

  auto take_str = [&](const char* key, std::string& out) {
    auto it = kv.find(key);
    if (it != kv.end()) {
      out = it->second;
      kv.erase(it);
    }
  };
  auto take_size = [&](const char* key, std::size_t& out) {
    auto it = kv.find(key);
    if (it != kv.end()) {
      out = static_cast<std::size_t>(std::stoull(it->second));
      kv.erase(it);
    }
  };
  auto take_u64 = [&](const char* key, std::uint64_t& out) {
    auto it = kv.find(key);
    if (it != kv.end()) {
      out = std::stoull(it->second);
      kv.erase(it);
    }
  };
  auto take_double = [&](const char* key, double& out) {
    auto it = kv.find(key);
    if (it != kv.end()) {
      out = it->second == "inf" ? std::numeric_limits<double>::infinity() : std::stod(it->second);
      kv.erase(it);
    }
  };
  auto take_bool = [&](const char* key, bool& out) {
    auto it = kv.find(key);
    if (it != kv.end()) {
      out = it->second == "1" || it->second == "true" || it->second == "yes";
      kv.erase(it);
    }
  };
  auto take_int = [&](const char* key, int& out) {
    auto it = kv.find(key);
    if (it != kv.end()) {
      out = std::stoi(it->second);
      kv.erase(it);
    }
  };

  take_str("dataset_kind", cfg.dataset_kind);
  take_str("data_dir", cfg.data_dir);
  take_str("images_train", cfg.images_train);
  take_str("labels_train", cfg.labels_train);
  take_str("images_test", cfg.images_test);
  take_str("labels_test", cfg.labels_test);
  take_size("downsample", cfg.downsample);
  take_size("synth_h", cfg.synth_h);
  take_size("synth_w", cfg.synth_w);
  take_u64("synth_span", cfg.synth_span);
  take_double("synth_rate_high", cfg.synth_rate_high);
  take_double("synth_rate_low", cfg.synth_rate_low);
  take_size("synth_train_per_class", cfg.synth_train_per_class);
  take_size("synth_test_per_class", cfg.synth_test_per_class);
  take_u64("data_seed", cfg.data_seed);
  take_str("network", cfg.network);
  take_double("tau", cfg.tau);
  take_double("v_th", cfg.v_th);
  take_str("reset", cfg.reset);
  take_bool("multi_spike", cfg.multi_spike);
  take_double("tau0", cfg.tau0);
  take_str("surrogate", cfg.surrogate);
  take_double("surrogate_h", cfg.surrogate_h);
  take_double("surrogate_alpha", cfg.surrogate_alpha);
  take_double("surrogate_beta", cfg.surrogate_beta);
  take_double("vote_surrogate_h", cfg.vote_surrogate_h);
  take_str("method", cfg.method);
  take_size("s", cfg.s);
  take_size("t_min", cfg.t_min);
  take_size("t_max", cfg.t_max);
  take_size("g", cfg.g);
  take_size("epochs", cfg.epochs);
  take_size("batch_size", cfg.batch_size);
  take_double("lr", cfg.lr);
  take_double("momentum", cfg.momentum);
  take_double("weight_decay", cfg.weight_decay);
  take_bool("cosine", cfg.cosine);
  take_str("sampler_mode", cfg.sampler_mode);
  take_u64("seed", cfg.seed);
  take_size("calibration_batches", cfg.calibration_batches);
  take_double("epsilon", cfg.epsilon);
  take_size("repeats", cfg.repeats);
  take_str("output_dir", cfg.output_dir);
  take_int("threads", cfg.threads);
  take_bool("deterministic", cfg.deterministic);

  if (!kv.empty()) {
    std::string msg = "config: unknown keys:";
    for (const auto& [k, v] : kv) msg += " " + k;
    throw ConfigError(msg);
  }

  auto must_exist = [&](const std::string& p, const char* what) {
    if (!p.empty() && !std::filesystem::exists(p))
      throw ConfigError(std::string("config: ") + what + " '" + p + "' does not exist");
  };
  if (cfg.dataset_kind == "events_dir") must_exist(cfg.data_dir, "data_dir");
  if (cfg.dataset_kind == "images_idx") {
    must_exist(cfg.images_train, "images_train");
    must_exist(cfg.labels_train, "labels_train");
    must_exist(cfg.images_test, "images_test");
    must_exist(cfg.labels_test, "labels_test");
  }
  return cfg;
}

// Materialises the train or test split described by the config.
inline Dataset load_split(const RunConfig& cfg, const std::string& split) {
  if (cfg.dataset_kind == "synthetic_bar" || cfg.dataset_kind == "synthetic_poisson") {
    SyntheticParams p;
    p.h = cfg.synth_h;
    p.w = cfg.synth_w;
    p.span = cfg.synth_span;
    p.rate_high = cfg.synth_rate_high;
    p.rate_low = cfg.synth_rate_low;
    p.samples_per_class =
        split == "train" ? cfg.synth_train_per_class : cfg.synth_test_per_class;
    const std::string kind =
        cfg.dataset_kind == "synthetic_bar" ? "moving_bar" : "poisson_twoclass";
    return Dataset::from_events(
        gen_synthetic(kind, p, RngStream(cfg.data_seed).fork(split)));
  }
  if (cfg.dataset_kind == "events_dir")
    return Dataset::from_events(load_event_dataset(cfg.data_dir + "/" + split));
  if (cfg.dataset_kind == "images_idx") {
    ImageDataset ds = split == "train" ? load_images_idx(cfg.images_train, cfg.labels_train)
                                       : load_images_idx(cfg.images_test, cfg.labels_test);
    ds.images = downsample_images(ds.images, cfg.downsample);
    return Dataset::from_images(std::move(ds));
  }
  throw ConfigError("config: unknown dataset_kind '" + cfg.dataset_kind + "'");
}

inline StagedNetwork build_from_config(const RunConfig& cfg, const Shape& input_shape) {
  BuildOptions opt;
  opt.neuron = cfg.neuron_params();
  opt.surrogate = cfg.surrogate_spec();
  opt.vote_surrogate_h = cfg.vote_surrogate_h;
  opt.t_min = cfg.t_min;
  opt.t_max = cfg.t_max;
  opt.seed = cfg.seed;
  StagedNetwork net = build_network(resolve_network_spec(cfg.network), input_shape, opt);
  return partition(std::move(net), cfg.g ? cfg.g : net.num_blocks());
}

}  // namespace flexspike
