#include <catch2/catch_amalgamated.hpp>

#include "flexspike/analysis.hpp"
#include "helpers.hpp"

using namespace flexspike;
using test_helpers::random_tensor;

TEST_CASE("predict_acc: vanishing features and direct evaluation") {
  EstimatorModel m;
  m.k = {1.0, 2.0};
  m.c = 0.0;
  CHECK(predict_acc(m, {1, 1}) == 0.0);  // log2(1) = 0
  CHECK(predict_acc(m, {2, 4}) == Catch::Approx(1.0 + 2.0 * std::sqrt(2.0)).epsilon(1e-12));
  m.k = {0.0, 0.0};
  m.c = 5.5;
  CHECK(predict_acc(m, {3, 6}) == 5.5);
  m.k = {1.0};
  CHECK_THROWS_AS(predict_acc(m, {1, 2}), ConfigError);
  CHECK_THROWS_AS(predict_acc(m, {0}), ConfigError);
}

TEST_CASE("the published 8-stage fit predicts the uniform t=3 config") {
  EstimatorModel m;
  m.k = {0.93, 0.53, 0.59, 0.67, 1.22, 0.48, 1.36, 0.18};
  m.c = 67.11;
  const double predicted = predict_acc(m, std::vector<std::size_t>(8, 3));
  // sum(K) = 5.96; 5.96 * sqrt(log2 3) + 67.11
  CHECK(predicted == Catch::Approx(5.96 * std::sqrt(std::log2(3.0)) + 67.11).epsilon(1e-12));
  CHECK(predicted == Catch::Approx(74.61).margin(0.005));
}

TEST_CASE("fit_estimator recovers synthetic coefficients to 1e-8") {
  RngStream rng(3);
  for (int rep = 0; rep < 10; ++rep) {
    const std::size_t stages = 1 + static_cast<std::size_t>(rng.uniform_int(0, 7));
    EstimatorModel truth;
    for (std::size_t i = 0; i < stages; ++i) truth.k.push_back(rng.uniform() * 2.0 - 0.5);
    truth.c = rng.uniform() * 100.0;
    std::vector<EstimatorSample> samples;
    for (std::size_t i = 0; i < 2 * stages + 4; ++i) {
      EstimatorSample s;
      for (std::size_t j = 0; j < stages; ++j)
        s.t.push_back(1 + static_cast<std::size_t>(rng.uniform_int(0, 5)));
      s.accuracy = predict_acc(truth, s.t);
      samples.push_back(std::move(s));
    }
    EstimatorModel fit = fit_estimator(samples);
    for (std::size_t i = 0; i < stages; ++i)
      REQUIRE(std::fabs(fit.k[i] - truth.k[i]) < 1e-8);
    REQUIRE(std::fabs(fit.c - truth.c) < 1e-8);
  }
}

TEST_CASE("fit_estimator with G=1 and two distinct samples interpolates") {
  std::vector<EstimatorSample> samples{{{2}, 3.0}, {{4}, 5.0}};
  EstimatorModel m = fit_estimator(samples);
  CHECK(predict_acc(m, {2}) == Catch::Approx(3.0).epsilon(1e-9));
  CHECK(predict_acc(m, {4}) == Catch::Approx(5.0).epsilon(1e-9));
  CHECK_THROWS_AS(fit_estimator({{{2}, 3.0}}), ConfigError);
}

TEST_CASE("search_optimal: worked example, unconstrained, pinned budgets") {
  EstimatorModel m;
  m.k = {1.0, 2.0};
  m.c = 0.0;
  EnergyModel e;
  e.rates = {1.0, 1.0};
  e.budget = 4.0;
  SearchResult r = search_optimal(m, e, 1, 3);
  CHECK(r.config == std::vector<std::size_t>{2, 2});
  CHECK(r.predicted_accuracy == Catch::Approx(3.0).epsilon(1e-12));

  e.budget = 100.0;  // unconstrained: everything at t_max
  CHECK(search_optimal(m, e, 1, 3).config == std::vector<std::size_t>{3, 3});

  e.budget = 2.0;  // only the all-t_min point is feasible
  CHECK(search_optimal(m, e, 1, 3).config == std::vector<std::size_t>{1, 1});

  e.budget = 1.0;  // not even all-t_min fits
  CHECK_THROWS_AS(search_optimal(m, e, 1, 3), ConfigError);
}

namespace {

struct BruteResult {
  std::vector<std::size_t> config;
  double value = -1e300;
};

void brute(const EstimatorModel& m, const EnergyModel& e, std::size_t t_min, std::size_t t_max,
           std::vector<std::size_t>& cur, std::size_t depth, BruteResult& best) {
  if (depth == m.k.size()) {
    double cost = 0.0;
    for (std::size_t i = 0; i < cur.size(); ++i) cost += static_cast<double>(cur[i]) * e.rates[i];
    if (cost > e.budget + 1e-12) return;
    const double v = predict_acc(m, cur);
    if (v > best.value) {
      best.value = v;
      best.config = cur;
    }
    return;
  }
  for (std::size_t t = t_min; t <= t_max; ++t) {
    cur[depth] = t;
    brute(m, e, t_min, t_max, cur, depth + 1, best);
  }
}

}  // namespace

TEST_CASE("search_optimal equals exhaustive enumeration on random instances") {
  RngStream rng(77);
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t stages = 2 + static_cast<std::size_t>(rng.uniform_int(0, 2));
    std::size_t t_min = 1 + static_cast<std::size_t>(rng.uniform_int(0, 1));
    std::size_t span = 2 + static_cast<std::size_t>(rng.uniform_int(0, 8));
    while (std::pow(static_cast<double>(span + 1), static_cast<double>(stages)) > 1e5) --span;
    const std::size_t t_max = t_min + span;
    EstimatorModel m;
    for (std::size_t i = 0; i < stages; ++i) m.k.push_back(rng.uniform() * 3.0 - 1.0);
    m.c = rng.uniform() * 10.0;
    EnergyModel e;
    double min_cost = 0.0;
    for (std::size_t i = 0; i < stages; ++i) {
      e.rates.push_back(rng.uniform());
      min_cost += static_cast<double>(t_min) * e.rates[i];
    }
    e.budget = min_cost + rng.uniform() * static_cast<double>(t_max) * static_cast<double>(stages);

    SearchResult fast = search_optimal(m, e, t_min, t_max);
    BruteResult slow;
    std::vector<std::size_t> cur(stages, t_min);
    brute(m, e, t_min, t_max, cur, 0, slow);
    REQUIRE(fast.config == slow.config);
    REQUIRE(fast.predicted_accuracy == slow.value);
  }
}

TEST_CASE("cost_ratio reproduces the published theory values") {
  CHECK(cost_ratio(3, 1, 6, 6) == Catch::Approx(1.75));
  CHECK(cost_ratio(3, 1, 10, 10) == Catch::Approx(1.65));
  CHECK(cost_ratio(1, 4, 4, 4) == Catch::Approx(1.0));
  CHECK_THROWS_AS(cost_ratio(3, 1, 6, 0), ConfigError);
}

namespace {

Dataset tiny_images() {
  ImageDataset ds;
  ds.images.push_back(Tensor({1, 1, 2}, std::vector<double>{1.0, 0.0}));
  ds.images.push_back(Tensor({1, 1, 2}, std::vector<double>{0.0, 1.0}));
  ds.labels = {0, 1};
  return Dataset::from_images(std::move(ds));
}

StagedNetwork linear_membrane_net() {
  BuildOptions opt;
  opt.neuron.tau = 1.0;
  opt.neuron.reset_mode = ResetMode::soft;
  opt.t_max = 4;
  StagedNetwork net = build_network(parse_layer_dsl("flatten,dense:2,vote:mem"), {1, 1, 2}, opt);
  net.layers[1].w = Tensor({2, 2}, std::vector<double>{1.0, -1.0, -1.0, 1.0});
  return net;
}

}  // namespace

TEST_CASE("firing-rate estimation: dead, saturated, and hand-counted stages") {
  BuildOptions opt;
  opt.neuron.tau = 1.0;
  opt.neuron.reset_mode = ResetMode::soft;
  opt.neuron.multi_spike = false;
  opt.t_max = 3;
  StagedNetwork net =
      build_network(parse_layer_dsl("flatten,dense:1,lif;dense:1,vote:mem"), {1, 1, 1}, opt);
  net = partition(std::move(net), 1);
  ImageDataset imgs;
  imgs.images.push_back(Tensor({1, 1, 1}, std::vector<double>{2.0}));
  imgs.labels = {0};
  Dataset ds = Dataset::from_images(std::move(imgs));

  // Weight 1: v = 2 every step, fires every step (soft reset keeps v above).
  net.layers[1].w = Tensor({1, 1}, std::vector<double>{1.0});
  auto rates = estimate_firing_rates(net, ds, 3);
  REQUIRE(rates.size() == 2);
  CHECK(rates[0] == 1.0);
  CHECK(rates[1] == 0.0);  // membrane voting never spikes

  // Zero weights: nothing ever reaches threshold.
  net.layers[1].w = Tensor({1, 1});
  rates = estimate_firing_rates(net, ds, 3);
  CHECK(rates[0] == 0.0);

  // Hand-counted: v accumulates 0.6 per step (soft reset IF), spikes at
  // steps 2 — pattern 0,1,0 over T=3 gives rate 1/3.
  net.layers[1].w = Tensor({1, 1}, std::vector<double>{0.3});
  rates = estimate_firing_rates(net, ds, 3);
  CHECK(rates[0] == Catch::Approx(1.0 / 3.0));
}

TEST_CASE("noise sweep: sigma=0 is a bit-identical no-op with zero spread") {
  StagedNetwork net = linear_membrane_net();
  Dataset ds = tiny_images();
  std::vector<double> before;
  for (Tensor* p : net.trainable_params())
    before.insert(before.end(), p->data(), p->data() + p->size());
  NoiseSpec spec;
  spec.sigma2 = {0.0};
  CHECK(spec.repeats == 5);  // documented default
  auto points = noise_robustness(net, spec, ds, RngStream(5), 2);
  REQUIRE(points.size() == 1);
  CHECK(points[0].mean == 1.0);
  CHECK(points[0].min == points[0].max);
  std::vector<double> after;
  for (Tensor* p : net.trainable_params())
    after.insert(after.end(), p->data(), p->data() + p->size());
  REQUIRE(before == after);
}

TEST_CASE("noise sweep degrades accuracy as the variance grows") {
  StagedNetwork net = linear_membrane_net();
  Dataset ds = tiny_images();
  NoiseSpec spec;
  spec.sigma2 = {0.0, 0.04, 4.0};
  spec.repeats = 20;
  auto points = noise_robustness(net, spec, ds, RngStream(9), 2);
  CHECK(points[0].mean == 1.0);
  CHECK(points[2].mean < 1.0);  // heavy noise flips some runs
  CHECK(points[0].mean >= points[2].mean);
}

TEST_CASE("input-target noise perturbs inputs, not the network") {
  StagedNetwork net = linear_membrane_net();
  Dataset ds = tiny_images();
  NoiseSpec spec;
  spec.sigma2 = {25.0};
  spec.target = NoiseSpec::Target::inputs;
  spec.repeats = 10;
  std::vector<double> before;
  for (Tensor* p : net.trainable_params())
    before.insert(before.end(), p->data(), p->data() + p->size());
  auto points = noise_robustness(net, spec, ds, RngStream(13), 2);
  CHECK(points[0].mean < 1.0);
  std::vector<double> after;
  for (Tensor* p : net.trainable_params())
    after.insert(after.end(), p->data(), p->data() + p->size());
  REQUIRE(before == after);
}

TEST_CASE("gradient metrics: closed form on a linear two-sample model") {
  StagedNetwork net = linear_membrane_net();
  Dataset ds = tiny_images();
  GradientMetrics m = gradient_metrics(net, ds, 2);

  // Membrane voting with IF and constant drive reads logits = W x.
  // Sample 1: x=(1,0), y=0, z=(1,-1); sample 2: x=(0,1), y=1, z=(-1,1).
  // dL/dz = (softmax(z) - onehot)/2 per sample; dL/dW = sum dz x^T.
  const double p_hi = std::exp(1.0) / (std::exp(1.0) + std::exp(-1.0));
  const double d = (p_hi - 1.0) / 2.0;   // correct-class slot, both samples
  const double d2 = (1.0 - p_hi) / 2.0;  // other slot
  // By symmetry dW = [[d, d2],[d2, d]] ... with x one-hot each sample fills one column.
  const double expected_norm = std::sqrt(2.0 * d * d + 2.0 * d2 * d2);
  CHECK(m.grad_norm_w == Catch::Approx(expected_norm).epsilon(1e-9));

  // Input gradient per sample: the model input is the T-frame encoding, and
  // the membrane vote hands each frame 1/T of the logit gradient, so
  // || dL_i/dx_i || = || W^T dz_i * N || / sqrt(T) with T = t_max = 4.
  Tensor dz({2}, std::vector<double>{d * 2.0, d2 * 2.0});
  const double gx0 = 1.0 * dz[0] + (-1.0) * dz[1];
  const double gx1 = (-1.0) * dz[0] + 1.0 * dz[1];
  const double expected_x_norm = std::sqrt(gx0 * gx0 + gx1 * gx1) / 2.0;
  CHECK(m.mean_grad_norm_x == Catch::Approx(expected_x_norm).epsilon(1e-9));

  // A perfectly fit model has (numerically) vanishing gradients.
  StagedNetwork sharp = net;
  sharp.layers[1].w *= 50.0;  // saturate the softmax
  GradientMetrics m2 = gradient_metrics(sharp, ds, 2);
  CHECK(m2.grad_norm_w < 1e-8);
  CHECK(m2.mean_grad_norm_x < 1e-8);
}

TEST_CASE("early exit: threshold boundaries and step bound") {
  StagedNetwork net = linear_membrane_net();
  Tensor frames = static_encode(Tensor({1, 1, 1, 2}, std::vector<double>{1.0, 0.0}), 4);
  EarlyExitResult r0 = early_exit_infer(net, frames, 0.0, 4);
  CHECK(r0.steps_used == 1);
  EarlyExitResult r1 = early_exit_infer(net, frames, 1.0 + 1e-9, 4);
  CHECK(r1.steps_used == 4);
  CHECK(r1.predicted_class == 0);
  EarlyExitResult rmid = early_exit_infer(net, frames, 0.7, 4);
  CHECK(rmid.steps_used <= 4);
  CHECK(rmid.predicted_class == 0);
}
