#include <catch2/catch_amalgamated.hpp>
#include <filesystem>

#include "flexspike/dataset.hpp"
#include "helpers.hpp"

using namespace flexspike;

TEST_CASE("csv event files round-trip and reject malformed rows") {
  EventStream s{{0, 1, 2, 0}, {4, 3, 1, 1}, {9, 0, 0, 1}};
  const std::string path = "/tmp/flexspike_events.csv";
  save_events_csv(s, path);
  EventStream back = load_events_csv(path);
  REQUIRE(back.size() == 3);
  CHECK(back[1].tick == 4);
  CHECK(back[1].x == 3);
  CHECK(back[2].polarity == 1);

  {
    std::ofstream os(path);
    os << "t,x,y,p\n1,2,3,0\noops\n";
  }
  try {
    load_events_csv(path);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }

  {
    std::ofstream os(path);
    os << "t,x,y,p\n1,2,3,7\n";
  }
  try {
    load_events_csv(path);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("polarity") != std::string::npos);
  }
}

TEST_CASE("packed event files round-trip with csv byte-for-byte") {
  RngStream rng(5);
  EventStream s;
  for (int i = 0; i < 200; ++i)
    s.push_back({static_cast<std::uint64_t>(rng.uniform_int(0, 10000)),
                 static_cast<std::uint16_t>(rng.uniform_int(0, 63)),
                 static_cast<std::uint16_t>(rng.uniform_int(0, 63)),
                 static_cast<std::uint8_t>(rng.uniform_int(0, 1))});
  sort_events(s, 64, 64);
  const std::string p1 = "/tmp/flexspike_events.evs";
  const std::string p2 = "/tmp/flexspike_events2.evs";
  save_events_packed(s, p1);
  EventStream via_packed = load_events_packed(p1);
  const std::string pc = "/tmp/flexspike_events_rt.csv";
  save_events_csv(via_packed, pc);
  EventStream via_csv = load_events_csv(pc);
  save_events_packed(via_csv, p2);
  // Round trip through both formats is byte-identical.
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  REQUIRE(b1 == b2);

  // magic check
  {
    std::ofstream os(p1, std::ios::binary);
    os << "NOPE";
  }
  CHECK_THROWS_AS(load_events_packed(p1), ConfigError);
}

TEST_CASE("frame_events: totals, boundary rule, conservation") {
  EventStream s{{0, 0, 0, 0}, {49, 1, 0, 0}, {50, 0, 1, 1}, {99, 1, 1, 1}};
  FrameSpec spec;
  spec.t_bins = 2;
  spec.h = 2;
  spec.w = 2;
  spec.t0 = 0;
  spec.t1 = 100;
  Tensor frames = frame_events(s, spec);
  REQUIRE(frames.shape() == Shape{2, 2, 2, 2});
  double bin0 = 0.0, bin1 = 0.0;
  for (std::size_t i = 0; i < 8; ++i) bin0 += frames[i];
  for (std::size_t i = 8; i < 16; ++i) bin1 += frames[i];
  CHECK(bin0 == 2.0);  // ticks 0 and 49
  CHECK(bin1 == 2.0);  // boundary tick 50 goes right, plus 99
  CHECK(frames.sum() == static_cast<double>(s.size()));

  // T=1 accumulates total per-pixel counts.
  spec.t_bins = 1;
  Tensor total = frame_events(s, spec);
  CHECK(total.sum() == 4.0);
  CHECK(total[0] == 1.0);  // (p0,y0,x0)

  // conservation at many T
  for (std::size_t t : {1, 2, 3, 5, 8}) {
    spec.t_bins = t;
    CHECK(frame_events(s, spec).sum() == 4.0);
  }

  // out-of-range coordinate
  EventStream bad{{0, 7, 0, 0}};
  spec.t_bins = 1;
  CHECK_THROWS_AS(frame_events(bad, spec), ConfigError);

  // empty stream returns zeros
  Tensor zeros = frame_events({}, spec);
  CHECK(zeros.max_abs() == 0.0);
}

TEST_CASE("take_first_frames slices the time prefix") {
  Tensor x({3, 2}, std::vector<double>{1, 2, 3, 4, 5, 6});
  CHECK(max_abs_diff(take_first_frames(x, 3), x) == 0.0);
  Tensor one = take_first_frames(x, 1);
  REQUIRE(one.shape() == Shape{1, 2});
  CHECK(one[0] == 1.0);
  Tensor two = take_first_frames(x, 2);
  CHECK(two[3] == 4.0);
  CHECK_THROWS_AS(take_first_frames(x, 4), ConfigError);
}

TEST_CASE("framing at T then slicing t equals framing the first t/T of the span") {
  RngStream rng(9);
  EventStream s;
  const std::uint64_t span = 240;
  for (int i = 0; i < 300; ++i)
    s.push_back({static_cast<std::uint64_t>(rng.uniform_int(0, static_cast<std::int64_t>(span) - 1)),
                 static_cast<std::uint16_t>(rng.uniform_int(0, 3)),
                 static_cast<std::uint16_t>(rng.uniform_int(0, 3)),
                 static_cast<std::uint8_t>(rng.uniform_int(0, 1))});
  sort_events(s, 4, 4);
  FrameSpec spec;
  spec.h = spec.w = 4;
  spec.t0 = 0;
  spec.t1 = span;
  for (std::size_t t_total : {6, 8}) {
    for (std::size_t t = 1; t <= t_total; ++t) {
      spec.t_bins = t_total;
      Tensor sliced = take_first_frames(frame_events(s, spec), t);
      FrameSpec prefix = spec;
      prefix.t_bins = t;
      prefix.t1 = span * t / t_total;  // same fraction of the span
      if (prefix.t1 == 0) continue;
      Tensor direct = frame_events(s, prefix);
      REQUIRE(max_abs_diff(sliced, direct) == 0.0);
    }
  }
}

TEST_CASE("synthetic generators are deterministic and class-separable") {
  SyntheticParams p;
  p.h = 8;
  p.w = 8;
  p.span = 128;
  p.rate_high = 0.2;
  p.rate_low = 0.0;
  p.samples_per_class = 4;
  EventDataset a = gen_synthetic("poisson_twoclass", p, RngStream(11));
  EventDataset b = gen_synthetic("poisson_twoclass", p, RngStream(11));
  REQUIRE(a.samples.size() == b.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    REQUIRE(a.samples[i].stream.size() == b.samples[i].stream.size());
    for (std::size_t j = 0; j < a.samples[i].stream.size(); ++j) {
      CHECK(a.samples[i].stream[j].tick == b.samples[i].stream[j].tick);
      CHECK(a.samples[i].stream[j].x == b.samples[i].stream[j].x);
    }
  }
  // With zero background, class regions are disjoint: total counts on the
  // left half separate the classes perfectly at T=1.
  for (const auto& sample : a.samples) {
    std::size_t left = 0;
    for (const auto& e : sample.stream)
      if (e.x < p.w / 2) ++left;
    const bool looks_class0 = left * 2 > sample.stream.size();
    CHECK(looks_class0 == (sample.label == 0));
  }
  CHECK_THROWS_AS(gen_synthetic("nope", p, RngStream(1)), ConfigError);
  SyntheticParams bad = p;
  bad.rate_high = 0.0;
  CHECK_THROWS_AS(gen_synthetic("poisson_twoclass", bad, RngStream(1)), ConfigError);
}

TEST_CASE("poisson pixel rates land within 3 sigma of the target") {
  SyntheticParams p;
  p.h = 2;
  p.w = 2;
  p.span = 10000;
  p.rate_high = 0.05;
  p.rate_low = 0.0;
  p.samples_per_class = 1;
  EventDataset ds = gen_poisson_twoclass(p, RngStream(21));
  // Class 0 concentrates on the left column pair: 2 pixels * 2 polarities.
  const auto& s = ds.samples[0].stream;
  const double lambda = p.rate_high * static_cast<double>(p.span) * 2.0;  // per column of 2 px
  std::size_t left = 0;
  for (const auto& e : s)
    if (e.x == 0) ++left;
  CHECK(std::fabs(static_cast<double>(left) - lambda) <= 3.0 * std::sqrt(lambda));
}

TEST_CASE("moving bar direction is temporal, not spatial") {
  SyntheticParams p;
  p.h = 6;
  p.w = 6;
  p.span = 120;
  p.rate_high = 0.5;
  p.rate_low = 0.0;
  p.samples_per_class = 6;
  EventDataset ds = gen_moving_bar(p, RngStream(33));
  // Framed at T = w with no background noise, the active column advances by
  // +1 (mod w) per frame for class 0 and by -1 for class 1.
  FrameSpec spec;
  spec.h = spec.w = 6;
  spec.t_bins = 6;
  spec.t0 = 0;
  spec.t1 = p.span;
  for (const auto& sample : ds.samples) {
    Tensor frames = frame_events(sample.stream, spec);
    std::vector<std::size_t> peak(6, 0);
    for (std::size_t t = 0; t < 6; ++t) {
      std::vector<double> col_mass(6, 0.0);
      for (std::size_t pol = 0; pol < 2; ++pol)
        for (std::size_t y = 0; y < 6; ++y)
          for (std::size_t x = 0; x < 6; ++x)
            col_mass[x] += frames[((t * 2 + pol) * 6 + y) * 6 + x];
      peak[t] = static_cast<std::size_t>(
          std::max_element(col_mass.begin(), col_mass.end()) - col_mass.begin());
    }
    const std::size_t step = sample.label == 0 ? 1 : 5;  // -1 mod 6
    for (std::size_t t = 1; t < 6; ++t) REQUIRE(peak[t] == (peak[t - 1] + step) % 6);
  }
}

TEST_CASE("event dataset directories round-trip through the manifest") {
  SyntheticParams p;
  p.h = 4;
  p.w = 4;
  p.span = 50;
  p.rate_high = 0.2;
  p.samples_per_class = 3;
  EventDataset ds = gen_poisson_twoclass(p, RngStream(3));
  const std::string dir = "/tmp/flexspike_ds_test";
  std::filesystem::remove_all(dir);
  save_event_dataset(ds, dir);
  EventDataset back = load_event_dataset(dir);
  REQUIRE(back.samples.size() == ds.samples.size());
  CHECK(back.h == 4);
  CHECK(back.w == 4);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    CHECK(back.samples[i].label == ds.samples[i].label);
    REQUIRE(back.samples[i].stream.size() == ds.samples[i].stream.size());
  }
}

TEST_CASE("idx images round-trip, scale to [0,1], and downsample by mean pooling") {
  RngStream rng(7);
  std::vector<Tensor> images;
  for (int i = 0; i < 5; ++i) images.push_back(test_helpers::random_tensor({1, 28, 28}, rng, 0.0, 1.0));
  std::vector<int> labels{0, 1, 2, 1, 0};
  const std::string ip = "/tmp/flexspike_imgs.idx3", lp = "/tmp/flexspike_lbls.idx1";
  save_idx_images(images, ip);
  save_idx_labels(labels, lp);
  ImageDataset ds = load_images_idx(ip, lp);
  REQUIRE(ds.images.size() == 5);
  CHECK(ds.labels == labels);
  for (const auto& img : ds.images)
    for (std::size_t i = 0; i < img.size(); ++i) {
      CHECK(img[i] >= 0.0);
      CHECK(img[i] <= 1.0);
    }
  // 8-bit quantisation round trip
  CHECK(max_abs_diff(ds.images[0], images[0]) <= 0.5 / 255.0 + 1e-12);

  CHECK(max_abs_diff(downsample_images(ds.images, 1)[0], ds.images[0]) == 0.0);
  auto half = downsample_images(ds.images, 2);
  REQUIRE(half[0].shape() == Shape{1, 14, 14});
  Tensor constant({1, 4, 4}, 0.7);
  auto down = downsample_images({constant}, 2);
  for (std::size_t i = 0; i < down[0].size(); ++i) CHECK(down[0][i] == Catch::Approx(0.7));

  // magic mismatch
  {
    std::ofstream os(ip, std::ios::binary);
    os << "garbage";
  }
  CHECK_THROWS_AS(load_idx_images(ip), ConfigError);
}
