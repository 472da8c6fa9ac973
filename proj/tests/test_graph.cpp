#include <catch2/catch_amalgamated.hpp>

#include "flexspike/checkpoint.hpp"
#include "flexspike/network.hpp"
#include "helpers.hpp"

using namespace flexspike;
using test_helpers::random_tensor;

TEST_CASE("build_network: dense + lif is one block with 8 weights") {
  auto net = build_network(parse_layer_dsl("dense:2,lif"), {4});
  CHECK(net.num_blocks() == 1);
  CHECK(net.param_count() == 8);
  CHECK(net.num_stages() == 1);
}

TEST_CASE("the 3C1FC(W16) topology at 2x34x34 input has 6160 parameters") {
  auto net = build_network(resolve_network_spec("3c1fc_w16"), {2, 34, 34});
  CHECK(net.param_count() == 6160);
  CHECK(net.bias_free);
  CHECK(net.num_blocks() == 4);
}

TEST_CASE("empty or malformed specs are rejected") {
  CHECK_THROWS_AS(build_network({}, {4}), ConfigError);
  CHECK_THROWS_AS(parse_layer_dsl(""), ConfigError);
  CHECK_THROWS_AS(parse_layer_dsl("frobnicate:3"), ConfigError);
  // voting layer must be terminal
  CHECK_THROWS_AS(build_network(parse_layer_dsl("dense:2,vote:if,dense:2"), {4}), ConfigError);
  // bn must directly follow conv/dense
  CHECK_THROWS_AS(build_network(parse_layer_dsl("dense:2,lif,bn"), {4}), ConfigError);
}

TEST_CASE("partition groups blocks into stages of g blocks") {
  // 8 dense blocks
  std::string dsl;
  for (int i = 0; i < 8; ++i) dsl += (i ? ";" : "") + std::string("dense:4,lif");
  auto net = build_network(parse_layer_dsl(dsl), {4});
  REQUIRE(net.num_blocks() == 8);

  CHECK(partition(net, 8).num_stages() == 1);   // whole-net mixture
  CHECK(partition(net, 12).num_stages() == 1);  // g beyond the block count collapses
  CHECK(partition(net, 1).num_stages() == 8);
  auto p3 = partition(net, 3);
  REQUIRE(p3.num_stages() == 3);  // sizes 3, 3, 2
  CHECK(p3.stages[0].second - p3.stages[0].first == 6);
  CHECK(p3.stages[1].second - p3.stages[1].first == 6);
  CHECK(p3.stages[2].second - p3.stages[2].first == 4);
  CHECK_THROWS_AS(partition(net, 0), ConfigError);
}

TEST_CASE("partition never separates a bn from its conv") {
  auto net = build_network(parse_layer_dsl("conv:4,bn,lif;conv:4,bn,lif;flatten,dense:2,vote:if"),
                           {2, 8, 8});
  for (std::size_t g = 1; g <= net.num_blocks(); ++g) {
    auto pn = partition(net, g);
    for (const auto& [begin, end] : pn.stages) {
      // a stage never begins at a bn layer
      CHECK(pn.layers[begin].spec.kind != LayerKind::batchnorm);
    }
  }
}

TEST_CASE("static_encode repeats the image as constant current") {
  RngStream rng(3);
  Tensor img = random_tensor({2, 1, 3, 3}, rng);
  Tensor enc = static_encode(img, 4);
  REQUIRE(enc.dim(0) == 4);
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t i = 0; i < img.size(); ++i) CHECK(enc[t * img.size() + i] == img[i]);
  CHECK(max_abs_diff(static_encode(img, 1).reshaped(img.shape()), img) == 0.0);
  CHECK(static_encode(Tensor({1, 2}), 3).max_abs() == 0.0);
  CHECK_THROWS_AS(static_encode(img, 0), ConfigError);
}

TEST_CASE("voting readouts") {
  // IF voting sums spike counts per class over time.
  Tensor spikes({2, 1, 2}, std::vector<double>{2, 1, 1, 0});
  Tensor logits = voting_if_readout(spikes);
  CHECK(logits.at2(0, 0) == 3.0);
  CHECK(logits.at2(0, 1) == 1.0);

  // Membrane voting with constant drive c and an IF accumulator reads c, and
  // the running accumulation follows the T(T+1)/2 law.
  const double drive = 0.37;
  const std::size_t t_steps = 6;
  Tensor currents({t_steps, 1, 1}, drive);
  Tensor out = voting_membrane_readout(currents, 1.0);
  CHECK(out[0] == Catch::Approx(drive).epsilon(1e-12));
  double acc = 0.0, u = 0.0;
  for (std::size_t t = 1; t <= t_steps; ++t) {
    u += drive;
    acc += u;
  }
  CHECK(acc == Catch::Approx(drive * t_steps * (t_steps + 1) / 2.0).epsilon(1e-12));

  // At T=1 both readouts agree on subthreshold input up to reset semantics:
  // the IF vote emits no spike while the membrane vote reports the potential.
  Tensor sub({1, 1, 1}, std::vector<double>{0.4});
  NeuronParams p;
  p.tau = 1.0;
  Tensor vspikes = lif_forward_seq(sub, p);
  CHECK(voting_if_readout(vspikes)[0] == 0.0);
  CHECK(voting_membrane_readout(sub, 1.0)[0] == Catch::Approx(0.4));
}

TEST_CASE("uniform config equals the unpartitioned forward bit for bit") {
  RngStream rng(11);
  auto base = build_network(parse_layer_dsl("conv:4,bn,lif,pool:2;conv:4,bn,lif;flatten,dense:3,vote:if"),
                            {2, 8, 8}, {});
  Tensor x = random_tensor({3, 2, 2, 8, 8}, rng, 0.0, 1.0);
  Tensor plain = forward_eval(base, x, TemporalConfig::uniform(1, 3));
  for (std::size_t g = 1; g <= base.num_blocks(); ++g) {
    auto pn = partition(base, g);
    Tensor staged = forward_eval(pn, x, TemporalConfig::uniform(pn.num_stages(), 3));
    REQUIRE(max_abs_diff(staged, plain) == 0.0);
  }
}

TEST_CASE("a 4 -> 2 config inserts exactly one downsampling module") {
  auto net = build_network(parse_layer_dsl("dense:4,lif;dense:2,vote:if"), {4});
  auto pn = partition(net, 1);
  REQUIRE(pn.num_stages() == 2);
  RngStream rng(5);
  Tensor x = random_tensor({4, 2, 4}, rng, 0.0, 1.0);
  TemporalConfig cfg;
  cfg.t = {4, 2};
  cfg.t_min = 1;
  cfg.t_max = 4;
  TapedForward tf;
  forward_train(tf, pn, x, cfg);
  CHECK(tf.tape.op_count(GradTape::Node::Op::ttm_down) == 1);
  CHECK(tf.tape.op_count(GradTape::Node::Op::ttm_up) == 0);

  // degenerate single-stage config records no resampling at all
  TapedForward tf2;
  forward_train(tf2, net, x, TemporalConfig::uniform(1, 4));
  CHECK(tf2.tape.op_count(GradTape::Node::Op::ttm_down) == 0);
  CHECK(tf2.tape.op_count(GradTape::Node::Op::ttm_up) == 0);

  // mismatched input frames or config length are rejected
  CHECK_THROWS_AS(forward_eval(pn, x, TemporalConfig::uniform(1, 4)), ConfigError);
  TemporalConfig bad;
  bad.t = {3, 2};
  bad.t_min = 1;
  bad.t_max = 4;
  CHECK_THROWS_AS(forward_eval(pn, x, bad), ConfigError);
}

TEST_CASE("every parameter receives a gradient under any temporal config") {
  auto net = build_network(
      parse_layer_dsl("conv:4,bn,lif,pool:2;conv:4,bn,lif;flatten,dense:2,vote:if"), {2, 8, 8});
  auto pn = partition(net, 1);
  RngStream rng(6);
  for (auto cfg_t : {std::vector<std::size_t>{4, 2, 1}, std::vector<std::size_t>{1, 3, 4},
                     std::vector<std::size_t>{2, 2, 2}}) {
    TemporalConfig cfg;
    cfg.t = cfg_t;
    cfg.t_min = 1;
    cfg.t_max = 4;
    Tensor x = random_tensor({cfg_t[0], 2, 2, 8, 8}, rng, 0.0, 1.0);
    TapedForward tf;
    forward_train(tf, pn, x, cfg);
    tf.loss_id = tf.tape.softmax_cross_entropy(tf.logits_id, {0, 1});
    tf.tape.backward(tf.loss_id);
    auto params = pn.trainable_params();
    REQUIRE(tf.param_ids.size() == params.size());
    for (std::size_t p = 0; p < params.size(); ++p)
      REQUIRE(tf.tape.grad(tf.param_ids[p]).same_shape(*params[p]));
  }
}

TEST_CASE("bn folding: identity, scaling, and bias drop reporting") {
  auto net = build_network(parse_layer_dsl("conv:2,bn,lif;flatten,dense:2,vote:if"), {1, 4, 4});
  // Identity BN: mean 0, var 1, gamma 1, beta 0, eps 0.
  StagedNetwork id_net = net;
  id_net.layers[1].spec.bn_eps = 0.0;
  Tensor w_before = id_net.layers[0].w;
  auto [folded, report] = fold_bn_remove_bias(id_net);
  CHECK(max_abs_diff(folded.layers[0].w, w_before) == 0.0);
  CHECK(folded.bias_free);
  CHECK_FALSE(folded.has_batchnorm());
  REQUIRE(report.entries.size() == 1);
  CHECK(report.entries[0].dropped_bias_l2 == 0.0);

  // gamma=2, var=1, eps=0 doubles the weights.
  StagedNetwork s2 = net;
  s2.layers[1].spec.bn_eps = 0.0;
  for (std::size_t c = 0; c < s2.layers[1].gamma.size(); ++c) s2.layers[1].gamma[c] = 2.0;
  auto [folded2, report2] = fold_bn_remove_bias(s2);
  for (std::size_t i = 0; i < w_before.size(); ++i)
    CHECK(folded2.layers[0].w[i] == 2.0 * w_before[i]);

  // Nonzero shift would create a bias; it is dropped and the drop reported.
  StagedNetwork s3 = net;
  for (std::size_t c = 0; c < s3.layers[1].beta.size(); ++c) s3.layers[1].beta[c] = 0.25;
  auto [folded3, report3] = fold_bn_remove_bias(s3);
  REQUIRE(report3.entries.size() == 1);
  CHECK(report3.entries[0].dropped_bias_l2 ==
        Catch::Approx(0.25 * std::sqrt(2.0)).epsilon(1e-12));
  CHECK(folded3.bias_free);
  (void)report2;
}

TEST_CASE("checkpoint round-trips the network, stats and flags") {
  auto net = build_network(
      parse_layer_dsl("conv:4b,bn,lif,pool:2;conv:4,bn,lif;flatten,dense:2b,vote:mem"), {2, 8, 8});
  auto pn = partition(net, 1);
  pn.t_min = 2;
  pn.t_max = 5;
  RngStream rng(19);
  for (auto& l : pn.layers) {
    for (std::size_t i = 0; i < l.run_mean.size(); ++i) l.run_mean[i] = rng.uniform();
    for (std::size_t i = 0; i < l.run_var.size(); ++i) l.run_var[i] = 1.0 + rng.uniform();
  }
  const std::string path = "/tmp/flexspike_test_ckpt.fsnc";
  save_checkpoint(pn, path);
  StagedNetwork back = load_checkpoint(path);
  REQUIRE(back.layers.size() == pn.layers.size());
  CHECK(back.t_min == 2);
  CHECK(back.t_max == 5);
  CHECK(back.granularity == pn.granularity);
  CHECK(back.num_stages() == pn.num_stages());
  CHECK(back.bias_free == pn.bias_free);
  for (std::size_t i = 0; i < back.layers.size(); ++i) {
    CHECK(back.layers[i].spec.kind == pn.layers[i].spec.kind);
    if (!pn.layers[i].w.empty())
      CHECK(max_abs_diff(back.layers[i].w, pn.layers[i].w) == 0.0);
    if (!pn.layers[i].run_mean.empty())
      CHECK(max_abs_diff(back.layers[i].run_mean, pn.layers[i].run_mean) == 0.0);
  }
  // Same forward behaviour after the round trip.
  Tensor x = random_tensor({3, 2, 2, 8, 8}, rng, 0.0, 1.0);
  Tensor a = forward_eval(pn, x, TemporalConfig::uniform(pn.num_stages(), 3));
  Tensor b = forward_eval(back, x, TemporalConfig::uniform(back.num_stages(), 3));
  CHECK(max_abs_diff(a, b) == 0.0);
  // JSON sidecar exists and mirrors the header.
  std::ifstream sidecar(path + ".json");
  REQUIRE(sidecar.good());
}
