#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "flexspike/ops.hpp"
#include "flexspike/rng.hpp"
#include "flexspike/tensor.hpp"

namespace flexspike {

// One sensor event. Streams are kept sorted by tick, ties by the
// channel-major input index (polarity, y, x).
struct Event {
  std::uint64_t tick = 0;
  std::uint16_t x = 0, y = 0;
  std::uint8_t polarity = 0;
};

using EventStream = std::vector<Event>;

inline std::uint64_t event_input_index(const Event& e, std::size_t h, std::size_t w) {
  return (static_cast<std::uint64_t>(e.polarity) * h + e.y) * w + e.x;
}

inline void sort_events(EventStream& s, std::size_t h, std::size_t w) {
  std::stable_sort(s.begin(), s.end(), [&](const Event& a, const Event& b) {
    if (a.tick != b.tick) return a.tick < b.tick;
    return event_input_index(a, h, w) < event_input_index(b, h, w);
  });
}

// --- event file formats ---------------------------------------------------
// CSV: header "t,x,y,p", decimal fields.
// Packed: magic "EVS1", u32 count, then (u32 tick, u16 x, u16 y, u8 p), all
// little-endian.

inline void save_events_csv(const EventStream& s, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw ConfigError("save_events_csv: cannot open " + path);
  os << "t,x,y,p\n";
  for (const auto& e : s)
    os << e.tick << ',' << e.x << ',' << e.y << ',' << static_cast<int>(e.polarity) << '\n';
}

inline EventStream load_events_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("load_events_csv: cannot open " + path);
  std::string line;
  if (!std::getline(is, line) || line.rfind("t,x,y,p", 0) != 0)
    throw ConfigError("load_events_csv: missing 't,x,y,p' header in " + path);
  EventStream out;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    long long t = -1, x = -1, y = -1, p = -1;
    char c1 = 0, c2 = 0, c3 = 0;
    ls >> t >> c1 >> x >> c2 >> y >> c3 >> p;
    if (!ls || c1 != ',' || c2 != ',' || c3 != ',' || t < 0 || x < 0 || y < 0)
      throw ConfigError("load_events_csv: malformed line " + std::to_string(lineno) + " in " +
                        path);
    if (p != 0 && p != 1)
      throw ConfigError("load_events_csv: polarity out of range at line " +
                        std::to_string(lineno) + " in " + path);
    out.push_back(Event{static_cast<std::uint64_t>(t), static_cast<std::uint16_t>(x),
                        static_cast<std::uint16_t>(y), static_cast<std::uint8_t>(p)});
  }
  return out;
}

inline void save_events_packed(const EventStream& s, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("save_events_packed: cannot open " + path);
  os.write("EVS1", 4);
  auto put32 = [&](std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
  };
  auto put16 = [&](std::uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>(v >> 8)};
    os.write(reinterpret_cast<const char*>(b), 2);
  };
  put32(static_cast<std::uint32_t>(s.size()));
  for (const auto& e : s) {
    put32(static_cast<std::uint32_t>(e.tick));
    put16(e.x);
    put16(e.y);
    os.put(static_cast<char>(e.polarity));
  }
}

inline EventStream load_events_packed(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("load_events_packed: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "EVS1")
    throw ConfigError("load_events_packed: bad magic in " + path);
  auto get32 = [&]() {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  };
  auto get16 = [&]() {
    unsigned char b[2];
    is.read(reinterpret_cast<char*>(b), 2);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
  };
  const std::uint32_t count = get32();
  EventStream out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Event e;
    e.tick = get32();
    e.x = get16();
    e.y = get16();
    int p = is.get();
    if (!is) throw ConfigError("load_events_packed: truncated record " + std::to_string(i) +
                               " in " + path);
    if (p != 0 && p != 1)
      throw ConfigError("load_events_packed: polarity out of range in record " +
                        std::to_string(i) + " of " + path);
    e.polarity = static_cast<std::uint8_t>(p);
    out.push_back(e);
  }
  return out;
}

inline EventStream load_events(const std::string& path, const std::string& format) {
  if (format == "csv") return load_events_csv(path);
  if (format == "packed") return load_events_packed(path);
  throw ConfigError("load_events: unknown format '" + format + "'");
}

// --- framing ---------------------------------------------------------------

struct FrameSpec {
  std::size_t t_bins = 1;
  std::size_t h = 0, w = 0;
  std::size_t channels = 2;
  // Window [t0, t1); when t1 == 0 the window is [first_tick, last_tick + 1).
  std::uint64_t t0 = 0, t1 = 0;

  void validate() const {
    if (t_bins < 1) throw ConfigError("frame spec: T must be >= 1");
    if (h == 0 || w == 0) throw ConfigError("frame spec: H and W must be positive");
  }
};

// Splits a sorted stream into T equal-duration bins of per-pixel counts.
// Last bin is closed on the right (ticks at the window edge clamp into it).
inline Tensor frame_events(const EventStream& stream, FrameSpec spec) {
  spec.validate();
  Tensor out({spec.t_bins, spec.channels, spec.h, spec.w});
  if (stream.empty()) {
    std::fprintf(stderr, "warning: framing an empty event stream, returning zeros\n");
    return out;
  }
  std::uint64_t t0 = spec.t0, t1 = spec.t1;
  if (t1 == 0) {
    t0 = stream.front().tick;
    t1 = stream.back().tick + 1;
  }
  if (t1 <= t0) throw ConfigError("frame_events: empty time window");
  const std::uint64_t span = t1 - t0;
  for (std::size_t i = 0; i < stream.size(); ++i) {
    const Event& e = stream[i];
    if (e.x >= spec.w || e.y >= spec.h || e.polarity >= spec.channels)
      throw ConfigError("frame_events: event " + std::to_string(i) + " at (" +
                        std::to_string(e.x) + "," + std::to_string(e.y) + ",p=" +
                        std::to_string(int(e.polarity)) + ") outside " + std::to_string(spec.w) +
                        "x" + std::to_string(spec.h));
    if (e.tick < t0 || e.tick >= t1) continue;  // outside a fixed window
    std::uint64_t bin = (e.tick - t0) * spec.t_bins / span;
    if (bin >= spec.t_bins) bin = spec.t_bins - 1;
    const std::size_t idx =
        ((bin * spec.channels + e.polarity) * spec.h + e.y) * spec.w + e.x;
    out[idx] += 1.0;
  }
  return out;
}

inline Tensor take_first_frames(const Tensor& x, std::size_t t) {
  if (x.ndim() < 1) throw ConfigError("take_first_frames: empty tensor");
  const std::size_t t_total = x.dim(0);
  if (t > t_total)
    throw ConfigError("take_first_frames: t=" + std::to_string(t) + " exceeds T=" +
                      std::to_string(t_total));
  if (t == t_total) return x;
  Shape s = x.shape();
  s[0] = t;
  Tensor out(s);
  std::copy(x.data(), x.data() + out.size(), out.data());
  return out;
}

// --- synthetic generators ---------------------------------------------------

struct SyntheticParams {
  std::size_t h = 12, w = 12;
  std::uint64_t span = 256;          // ticks per sample
  double rate_high = 0.05;           // events / pixel / tick where active
  double rate_low = 0.002;           // background rate
  std::size_t samples_per_class = 64;
};

struct EventSample {
  EventStream stream;
  int label = 0;
};

struct EventDataset {
  std::vector<EventSample> samples;
  std::size_t h = 0, w = 0;
};

namespace detail {

inline void emit_poisson_pixel(EventStream& out, RngStream& rng, std::uint16_t x, std::uint16_t y,
                               double rate, std::uint64_t t_begin, std::uint64_t t_end) {
  if (t_end <= t_begin || rate <= 0.0) return;
  const double lambda = rate * static_cast<double>(t_end - t_begin);
  const std::uint64_t n = rng.poisson(lambda);
  for (std::uint64_t i = 0; i < n; ++i) {
    Event e;
    e.tick = static_cast<std::uint64_t>(
        rng.uniform_int(static_cast<std::int64_t>(t_begin), static_cast<std::int64_t>(t_end) - 1));
    e.x = x;
    e.y = y;
    e.polarity = static_cast<std::uint8_t>(rng.uniform_int(0, 1));
    out.push_back(e);
  }
}

}  // namespace detail

// Two classes with disjoint high-rate regions (left vs right half).
inline EventDataset gen_poisson_twoclass(const SyntheticParams& p, RngStream rng) {
  if (p.rate_high <= 0.0) throw ConfigError("gen_poisson_twoclass: rate must be positive");
  EventDataset ds;
  ds.h = p.h;
  ds.w = p.w;
  for (int label = 0; label < 2; ++label) {
    for (std::size_t s = 0; s < p.samples_per_class; ++s) {
      EventStream stream;
      for (std::uint16_t y = 0; y < p.h; ++y)
        for (std::uint16_t x = 0; x < p.w; ++x) {
          const bool left = x < p.w / 2;
          const bool active = (label == 0) ? left : !left;
          detail::emit_poisson_pixel(stream, rng, x, y, active ? p.rate_high : p.rate_low, 0,
                                     p.span);
        }
      sort_events(stream, p.h, p.w);
      ds.samples.push_back({std::move(stream), label});
    }
  }
  return ds;
}

// A one-pixel-wide vertical bar sweeping left-to-right (class 0) or
// right-to-left (class 1), wrapping around from a random starting column,
// plus background noise. The random phase means direction is only decodable
// from event timing (local motion), never from total counts or any single
// frame.
inline EventDataset gen_moving_bar(const SyntheticParams& p, RngStream rng) {
  if (p.rate_high <= 0.0) throw ConfigError("gen_moving_bar: rate must be positive");
  EventDataset ds;
  ds.h = p.h;
  ds.w = p.w;
  for (int label = 0; label < 2; ++label) {
    for (std::size_t s = 0; s < p.samples_per_class; ++s) {
      EventStream stream;
      const std::size_t phase =
          static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(p.w) - 1));
      for (std::size_t step = 0; step < p.w; ++step) {
        const std::uint64_t t_begin = p.span * step / p.w;
        const std::uint64_t t_end = p.span * (step + 1) / p.w;
        const std::size_t col = label == 0 ? (phase + step) % p.w
                                           : (phase + p.w - step) % p.w;
        const std::uint16_t x = static_cast<std::uint16_t>(col);
        for (std::uint16_t y = 0; y < p.h; ++y)
          detail::emit_poisson_pixel(stream, rng, x, y, p.rate_high, t_begin, t_end);
      }
      for (std::uint16_t y = 0; y < p.h; ++y)
        for (std::uint16_t x = 0; x < p.w; ++x)
          detail::emit_poisson_pixel(stream, rng, x, y, p.rate_low, 0, p.span);
      sort_events(stream, p.h, p.w);
      ds.samples.push_back({std::move(stream), label});
    }
  }
  return ds;
}

inline EventDataset gen_synthetic(const std::string& kind, const SyntheticParams& p,
                                  RngStream rng) {
  if (kind == "poisson_twoclass") return gen_poisson_twoclass(p, std::move(rng));
  if (kind == "moving_bar") return gen_moving_bar(p, std::move(rng));
  throw ConfigError("gen_synthetic: unknown kind '" + kind + "'");
}

// --- labeled event sets on disk ---------------------------------------------
// A dataset directory holds manifest.csv ("path,label" per line) plus one
// packed event file per sample.

inline void save_event_dataset(const EventDataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream manifest(dir + "/manifest.csv");
  if (!manifest) throw ConfigError("save_event_dataset: cannot write manifest in " + dir);
  manifest << "path,label\n";
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "sample_%05zu.evs", i);
    save_events_packed(ds.samples[i].stream, dir + "/" + name);
    manifest << name << ',' << ds.samples[i].label << '\n';
  }
  std::ofstream meta(dir + "/meta.csv");
  meta << "h,w\n" << ds.h << ',' << ds.w << '\n';
}

inline EventDataset load_event_dataset(const std::string& dir) {
  std::ifstream manifest(dir + "/manifest.csv");
  if (!manifest) throw ConfigError("load_event_dataset: no manifest.csv in " + dir);
  std::string line;
  std::getline(manifest, line);  // header
  EventDataset ds;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    const auto comma = line.rfind(',');
    if (comma == std::string::npos)
      throw ConfigError("load_event_dataset: malformed manifest line '" + line + "'");
    EventSample s;
    const std::string rel = line.substr(0, comma);
    s.label = std::stoi(line.substr(comma + 1));
    s.stream = rel.size() > 4 && rel.substr(rel.size() - 4) == ".csv"
                   ? load_events_csv(dir + "/" + rel)
                   : load_events_packed(dir + "/" + rel);
    ds.samples.push_back(std::move(s));
  }
  std::ifstream meta(dir + "/meta.csv");
  if (meta) {
    std::getline(meta, line);
    char comma;
    meta >> ds.h >> comma >> ds.w;
  }
  if (ds.h == 0 || ds.w == 0) {
    for (const auto& s : ds.samples)
      for (const auto& e : s.stream) {
        ds.w = std::max<std::size_t>(ds.w, e.x + 1);
        ds.h = std::max<std::size_t>(ds.h, e.y + 1);
      }
  }
  return ds;
}

// --- idx image container ------------------------------------------------

namespace detail {

inline std::uint32_t read_be32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}
inline void write_be32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace detail

struct ImageDataset {
  std::vector<Tensor> images;  // each [1, H, W], values in [0, 1]
  std::vector<int> labels;
};

inline std::vector<Tensor> load_idx_images(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("load_idx_images: cannot open " + path);
  const std::uint32_t magic = detail::read_be32(is);
  if (magic != 0x00000803)
    throw ConfigError("load_idx_images: magic-number mismatch in " + path);
  const std::uint32_t n = detail::read_be32(is);
  const std::uint32_t rows = detail::read_be32(is);
  const std::uint32_t cols = detail::read_be32(is);
  std::vector<Tensor> out;
  out.reserve(n);
  std::vector<unsigned char> buf(static_cast<std::size_t>(rows) * cols);
  for (std::uint32_t i = 0; i < n; ++i) {
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!is) throw ConfigError("load_idx_images: truncated image " + std::to_string(i));
    Tensor t({1, rows, cols});
    for (std::size_t j = 0; j < buf.size(); ++j) t[j] = buf[j] / 255.0;
    out.push_back(std::move(t));
  }
  return out;
}

inline std::vector<int> load_idx_labels(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("load_idx_labels: cannot open " + path);
  const std::uint32_t magic = detail::read_be32(is);
  if (magic != 0x00000801)
    throw ConfigError("load_idx_labels: magic-number mismatch in " + path);
  const std::uint32_t n = detail::read_be32(is);
  std::vector<int> out(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    const int c = is.get();
    if (c < 0) throw ConfigError("load_idx_labels: truncated label " + std::to_string(i));
    out[i] = c;
  }
  return out;
}

inline ImageDataset load_images_idx(const std::string& images_path,
                                    const std::string& labels_path) {
  ImageDataset ds;
  ds.images = load_idx_images(images_path);
  ds.labels = load_idx_labels(labels_path);
  if (ds.images.size() != ds.labels.size())
    throw ConfigError("load_images_idx: image/label count mismatch");
  return ds;
}

inline void save_idx_images(const std::vector<Tensor>& images, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("save_idx_images: cannot open " + path);
  detail::write_be32(os, 0x00000803);
  detail::write_be32(os, static_cast<std::uint32_t>(images.size()));
  const std::uint32_t rows = images.empty() ? 0 : static_cast<std::uint32_t>(images[0].dim(1));
  const std::uint32_t cols = images.empty() ? 0 : static_cast<std::uint32_t>(images[0].dim(2));
  detail::write_be32(os, rows);
  detail::write_be32(os, cols);
  for (const auto& t : images)
    for (std::size_t j = 0; j < t.size(); ++j) {
      const double v = std::clamp(t[j], 0.0, 1.0);
      os.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
}

inline void save_idx_labels(const std::vector<int>& labels, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("save_idx_labels: cannot open " + path);
  detail::write_be32(os, 0x00000801);
  detail::write_be32(os, static_cast<std::uint32_t>(labels.size()));
  for (int l : labels) os.put(static_cast<char>(static_cast<unsigned char>(l)));
}

// Mean-pool each image by `factor` (1 = identity).
inline std::vector<Tensor> downsample_images(const std::vector<Tensor>& images,
                                             std::size_t factor) {
  if (factor == 0) throw ConfigError("downsample_images: factor must be >= 1");
  if (factor == 1) return images;
  std::vector<Tensor> out;
  out.reserve(images.size());
  for (const auto& img : images) {
    Tensor batched = img.reshaped({1, img.dim(0), img.dim(1), img.dim(2)});
    Tensor pooled = avg_pool2d(batched, factor, factor);
    out.push_back(pooled.reshaped({pooled.dim(1), pooled.dim(2), pooled.dim(3)}));
  }
  return out;
}

}  // namespace flexspike
