#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "flexspike/network.hpp"

namespace flexspike {

// Checkpoint container, version 1:
//   magic "FSNC" | u32 version | u64 json length | json (utf-8) | blob
// The blob holds every parameter/state array in layer order (w, bias, gamma,
// beta, run_mean, run_var where present) as little-endian f64, each preceded
// by a u64 element count. A ".json" sidecar mirrors the header for
// inspection.
namespace ckpt {

using json = nlohmann::ordered_json;

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}
inline void put_f64(std::ostream& os, double d) {
  std::uint64_t v;
  std::memcpy(&v, &d, 8);
  put_u64(os, v);
}
inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}
inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}
inline double get_f64(std::istream& is) {
  std::uint64_t v = get_u64(is);
  double d;
  std::memcpy(&d, &v, 8);
  return d;
}

inline json neuron_to_json(const NeuronParams& p) {
  json j;
  j["v_th"] = p.v_th;
  j["tau"] = p.tau;
  j["reset"] = p.reset_mode == ResetMode::hard ? "hard" : "soft";
  j["multi_spike"] = p.multi_spike;
  if (p.tau0) j["tau0"] = *p.tau0;
  return j;
}
inline NeuronParams neuron_from_json(const json& j) {
  NeuronParams p;
  p.v_th = j.at("v_th").get<double>();
  p.tau = j.at("tau").get<double>();
  p.reset_mode = j.at("reset").get<std::string>() == "hard" ? ResetMode::hard : ResetMode::soft;
  p.multi_spike = j.at("multi_spike").get<bool>();
  if (j.contains("tau0")) p.tau0 = j.at("tau0").get<double>();
  return p;
}

inline json surrogate_to_json(const SurrogateSpec& s) {
  json j;
  j["kind"] = s.kind == SurrogateKind::triangular ? "triangular" : "single_exponential";
  j["h"] = s.h;
  j["alpha"] = s.alpha;
  j["beta"] = s.beta;
  return j;
}
inline SurrogateSpec surrogate_from_json(const json& j) {
  SurrogateSpec s;
  s.kind = j.at("kind").get<std::string>() == "triangular" ? SurrogateKind::triangular
                                                           : SurrogateKind::single_exponential;
  s.h = j.at("h").get<double>();
  s.alpha = j.at("alpha").get<double>();
  s.beta = j.at("beta").get<double>();
  return s;
}

inline json layer_to_json(const Layer& l) {
  json j;
  j["kind"] = layer_kind_name(l.spec.kind);
  switch (l.spec.kind) {
    case LayerKind::conv2d:
      j["out_channels"] = l.spec.out_channels;
      j["kernel"] = l.spec.kernel;
      j["stride"] = l.spec.stride;
      j["pad"] = l.spec.pad;
      j["with_bias"] = l.spec.with_bias;
      break;
    case LayerKind::dense:
      j["out_features"] = l.spec.out_features;
      j["with_bias"] = l.spec.with_bias;
      break;
    case LayerKind::batchnorm:
      j["eps"] = l.spec.bn_eps;
      j["momentum"] = l.spec.bn_momentum;
      break;
    case LayerKind::avg_pool:
      j["k"] = l.spec.pool_k;
      j["stride"] = l.spec.pool_stride;
      break;
    default:
      break;
  }
  if (l.spec.neuron) j["neuron"] = neuron_to_json(*l.spec.neuron);
  if (l.spec.surrogate) j["surrogate"] = surrogate_to_json(*l.spec.surrogate);
  j["in_shape"] = l.in_shape;
  j["out_shape"] = l.out_shape;
  json arrays = json::array();
  auto add = [&](const char* name, const Tensor& t) {
    if (!t.empty()) arrays.push_back({{"name", name}, {"shape", t.shape()}});
  };
  add("w", l.w);
  add("bias", l.bias);
  add("gamma", l.gamma);
  add("beta", l.beta);
  add("run_mean", l.run_mean);
  add("run_var", l.run_var);
  j["arrays"] = arrays;
  return j;
}

inline LayerKind kind_from_name(const std::string& name) {
  for (LayerKind k : {LayerKind::conv2d, LayerKind::dense, LayerKind::batchnorm, LayerKind::lif,
                      LayerKind::avg_pool, LayerKind::flatten, LayerKind::voting_if,
                      LayerKind::voting_membrane})
    if (name == layer_kind_name(k)) return k;
  throw ConfigError("checkpoint: unknown layer kind '" + name + "'");
}

}  // namespace ckpt

inline ckpt::json checkpoint_header(const StagedNetwork& net) {
  ckpt::json j;
  j["format"] = "FSNC";
  j["version"] = 1;
  j["input_shape"] = net.input_shape;
  j["t_min"] = net.t_min;
  j["t_max"] = net.t_max;
  j["granularity"] = net.granularity;
  j["bias_free"] = net.bias_free;
  j["default_neuron"] = ckpt::neuron_to_json(net.default_neuron);
  j["default_surrogate"] = ckpt::surrogate_to_json(net.default_surrogate);
  ckpt::json layers = ckpt::json::array();
  for (const auto& l : net.layers) layers.push_back(ckpt::layer_to_json(l));
  j["layers"] = layers;
  return j;
}

inline void save_checkpoint(const StagedNetwork& net, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("save_checkpoint: cannot open " + path);
  const std::string header = checkpoint_header(net).dump(2);
  os.write("FSNC", 4);
  ckpt::put_u32(os, 1);
  ckpt::put_u64(os, header.size());
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  auto put_tensor = [&](const Tensor& t) {
    if (t.empty()) return;
    ckpt::put_u64(os, t.size());
    for (std::size_t i = 0; i < t.size(); ++i) ckpt::put_f64(os, t[i]);
  };
  for (const auto& l : net.layers) {
    put_tensor(l.w);
    put_tensor(l.bias);
    put_tensor(l.gamma);
    put_tensor(l.beta);
    put_tensor(l.run_mean);
    put_tensor(l.run_var);
  }
  if (!os) throw ConfigError("save_checkpoint: write failed for " + path);
  os.close();
  std::ofstream sidecar(path + ".json");
  sidecar << header << "\n";
}

inline StagedNetwork load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("load_checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "FSNC")
    throw ConfigError("load_checkpoint: bad magic in " + path);
  const std::uint32_t version = ckpt::get_u32(is);
  if (version != 1)
    throw ConfigError("load_checkpoint: unsupported version " + std::to_string(version));
  const std::uint64_t hlen = ckpt::get_u64(is);
  std::string header(hlen, '\0');
  is.read(header.data(), static_cast<std::streamsize>(hlen));
  if (!is) throw ConfigError("load_checkpoint: truncated header");
  ckpt::json j = ckpt::json::parse(header);

  StagedNetwork net;
  net.input_shape = j.at("input_shape").get<Shape>();
  net.t_min = j.at("t_min").get<std::size_t>();
  net.t_max = j.at("t_max").get<std::size_t>();
  net.granularity = j.at("granularity").get<std::size_t>();
  net.bias_free = j.at("bias_free").get<bool>();
  net.default_neuron = ckpt::neuron_from_json(j.at("default_neuron"));
  net.default_surrogate = ckpt::surrogate_from_json(j.at("default_surrogate"));

  auto get_tensor = [&](const Shape& shape) {
    const std::uint64_t n = ckpt::get_u64(is);
    if (n != shape_numel(shape)) throw ConfigError("load_checkpoint: array size mismatch");
    Tensor t(shape);
    for (std::size_t i = 0; i < n; ++i) t[i] = ckpt::get_f64(is);
    return t;
  };

  for (const auto& lj : j.at("layers")) {
    Layer l;
    l.spec.kind = ckpt::kind_from_name(lj.at("kind").get<std::string>());
    switch (l.spec.kind) {
      case LayerKind::conv2d:
        l.spec.out_channels = lj.at("out_channels").get<std::size_t>();
        l.spec.kernel = lj.at("kernel").get<std::size_t>();
        l.spec.stride = lj.at("stride").get<std::size_t>();
        l.spec.pad = lj.at("pad").get<std::size_t>();
        l.spec.with_bias = lj.at("with_bias").get<bool>();
        break;
      case LayerKind::dense:
        l.spec.out_features = lj.at("out_features").get<std::size_t>();
        l.spec.with_bias = lj.at("with_bias").get<bool>();
        break;
      case LayerKind::batchnorm:
        l.spec.bn_eps = lj.at("eps").get<double>();
        l.spec.bn_momentum = lj.at("momentum").get<double>();
        break;
      case LayerKind::avg_pool:
        l.spec.pool_k = lj.at("k").get<std::size_t>();
        l.spec.pool_stride = lj.at("stride").get<std::size_t>();
        break;
      default:
        break;
    }
    if (lj.contains("neuron")) l.spec.neuron = ckpt::neuron_from_json(lj.at("neuron"));
    if (lj.contains("surrogate")) l.spec.surrogate = ckpt::surrogate_from_json(lj.at("surrogate"));
    l.in_shape = lj.at("in_shape").get<Shape>();
    l.out_shape = lj.at("out_shape").get<Shape>();
    for (const auto& aj : lj.at("arrays")) {
      const std::string name = aj.at("name").get<std::string>();
      const Shape shape = aj.at("shape").get<Shape>();
      Tensor t = get_tensor(shape);
      if (name == "w") l.w = std::move(t);
      else if (name == "bias") l.bias = std::move(t);
      else if (name == "gamma") l.gamma = std::move(t);
      else if (name == "beta") l.beta = std::move(t);
      else if (name == "run_mean") l.run_mean = std::move(t);
      else if (name == "run_var") l.run_var = std::move(t);
      else throw ConfigError("load_checkpoint: unknown array '" + name + "'");
    }
    net.layers.push_back(std::move(l));
  }
  if (!is) throw ConfigError("load_checkpoint: truncated blob");

  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const LayerKind k = net.layers[i].spec.kind;
    if (k == LayerKind::conv2d || k == LayerKind::dense) net.block_starts.push_back(i);
  }
  if (!net.block_starts.empty()) net.block_starts[0] = 0;
  if (net.granularity == 0) {
    net.stages = {{0, net.layers.size()}};
  } else {
    net = partition(std::move(net), net.granularity);
  }
  return net;
}

}  // namespace flexspike
