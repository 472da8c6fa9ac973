// Command-line front end: training, sweeps, event-driven validation and the
// analysis reports, all driven by a flat key=value config file.

#include <filesystem>
#include <iostream>
#include <set>

#include <CLI11.hpp>
#include <json.hpp>

#include "flexspike/checkpoint.hpp"
#include "flexspike/event_sim.hpp"
#include "flexspike/runconfig.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace flexspike;

namespace {

struct GlobalOpts {
  int threads = 0;          // 0: take from config
  bool deterministic = false;
};

void apply_runtime(const GlobalOpts& g, const RunConfig& cfg) {
  int threads = g.threads > 0 ? g.threads : cfg.threads;
  if (g.deterministic || cfg.deterministic) threads = 1;
  set_thread_count(threads);
}

std::vector<std::size_t> parse_t_list(const std::string& csv) {
  std::vector<std::size_t> out;
  std::set<std::size_t> seen;
  std::string tok;
  auto flush = [&]() {
    if (tok.empty()) return;
    const std::size_t t = std::stoull(tok);
    tok.clear();
    if (seen.insert(t).second) out.push_back(t);
  };
  for (char c : csv) {
    if (c == ',') flush();
    else tok += c;
  }
  flush();
  if (out.empty()) throw ConfigError("empty T list");
  return out;
}

json sd_report_json(const SdReport& r) {
  json j;
  j["s0"] = r.s0;
  j["s"] = r.s;
  j["sd"] = r.sd;
  return j;
}

void write_json(const json& j, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot open " + path);
  os << j.dump(2) << "\n";
}

int cmd_train(const std::string& config_path, const GlobalOpts& gopts,
              const std::string& out_override) {
  RunConfig cfg = parse_run_config(config_path);
  if (!out_override.empty()) cfg.output_dir = out_override;
  apply_runtime(gopts, cfg);
  Dataset train_ds = load_split(cfg, "train");
  Dataset test_ds = load_split(cfg, "test");
  StagedNetwork net = build_from_config(cfg, train_ds.feature_shape());
  TrainConfig tc = cfg.train_config();

  std::cout << "training " << cfg.method << " (" << net.num_stages() << " stages, "
            << net.param_count() << " params) for " << tc.epochs << " epochs\n";
  TrainResult result = train(net, train_ds, tc);
  fs::create_directories(cfg.output_dir);
  write_metrics_csv(result, tc.samples_per_iteration(), cfg.output_dir + "/metrics.csv");
  save_checkpoint(net, cfg.output_dir + "/checkpoint.fsnc");
  if (net.has_batchnorm()) {
    bn_calibrate(net, train_ds, tc.calibration_batches,
                 TemporalConfig::uniform(net.num_stages(), tc.t_max), tc.batch_size);
    save_checkpoint(net, cfg.output_dir + "/checkpoint_calibrated.fsnc");
  }
  const double test_acc = evaluate(net, test_ds, tc.t_max, tc.batch_size);
  std::cout << "final train acc " << result.epochs.back().train_accuracy << ", test acc at T="
            << tc.t_max << ": " << test_acc << "\n";
  std::cout << "wrote " << cfg.output_dir << "/checkpoint.fsnc\n";
  return 0;
}

int cmd_sweep(const std::string& config_path, const GlobalOpts& gopts,
              const std::string& checkpoint, const std::string& t_list_csv, bool recalibrate,
              const std::string& out_csv) {
  RunConfig cfg = parse_run_config(config_path);
  apply_runtime(gopts, cfg);
  Dataset test_ds = load_split(cfg, "test");
  Dataset train_ds = recalibrate ? load_split(cfg, "train") : Dataset{};
  std::vector<std::size_t> t_list = parse_t_list(t_list_csv);
  StagedNetwork base = load_checkpoint(checkpoint);

  std::ofstream os(out_csv);
  if (!os) throw ConfigError("cannot open " + out_csv);
  os << "T,accuracy\n";
  for (std::size_t t : t_list) {
    StagedNetwork net = base;
    if (recalibrate && net.has_batchnorm())
      bn_calibrate(net, train_ds, cfg.calibration_batches,
                   TemporalConfig::uniform(net.num_stages(), t), cfg.batch_size);
    const double acc = evaluate(net, test_ds, t, cfg.batch_size);
    os << t << ',' << acc << '\n';
    std::cout << "T=" << t << " accuracy " << acc << "\n";
  }
  return 0;
}

int cmd_simulate(const std::string& config_path, const GlobalOpts& gopts,
                 const std::string& checkpoint, int reference_t, const std::string& out_json,
                 const std::string& trace_csv, std::size_t limit) {
  RunConfig cfg = parse_run_config(config_path);
  apply_runtime(gopts, cfg);
  Dataset test_ds = load_split(cfg, "test");
  if (test_ds.kind != Dataset::Kind::events)
    throw ConfigError("simulate: needs an event dataset");
  StagedNetwork net = load_checkpoint(checkpoint);
  AsyncNet anet = import_weights(net);

  const std::size_t n = limit ? std::min(limit, test_ds.size()) : test_ds.size();
  std::size_t correct = 0;
  double sd_num = 0.0, sd_den = 0.0;
  std::size_t ref_correct = 0;
  std::vector<SpikeTraceEntry> trace;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& sample = test_ds.events.samples[i];
    std::vector<double> counts =
        simulate(anet, sample.stream, (!trace_csv.empty() && i == 0) ? &trace : nullptr);
    std::size_t best = 0;
    for (std::size_t c = 1; c < counts.size(); ++c)
      if (counts[c] > counts[best]) best = c;
    if (static_cast<int>(best) == sample.label) ++correct;
    if (reference_t > 0) {
      std::vector<double> ref =
          timestep_reference(net, sample.stream, static_cast<std::size_t>(reference_t));
      std::size_t rbest = 0;
      for (std::size_t c = 1; c < ref.size(); ++c)
        if (ref[c] > ref[rbest]) rbest = c;
      if (static_cast<int>(rbest) == sample.label) ++ref_correct;
      for (std::size_t c = 0; c < ref.size(); ++c) {
        sd_num += std::fabs(ref[c] - counts[c]);
        sd_den += ref[c];
      }
    }
  }
  json j;
  j["samples"] = n;
  j["event_accuracy"] = static_cast<double>(correct) / static_cast<double>(n);
  if (reference_t > 0) {
    j["reference_T"] = reference_t;
    j["reference_accuracy"] = static_cast<double>(ref_correct) / static_cast<double>(n);
    j["sd"] = sd_den > 0.0 ? sd_num / sd_den : 0.0;
  }
  std::cout << j.dump(2) << "\n";
  if (!out_json.empty()) write_json(j, out_json);
  if (!trace_csv.empty()) write_trace_csv(trace, trace_csv);
  return 0;
}

int cmd_calibrate(const std::string& config_path, const GlobalOpts& gopts,
                  const std::string& checkpoint, int t_steps, const std::string& out_ckpt) {
  RunConfig cfg = parse_run_config(config_path);
  apply_runtime(gopts, cfg);
  Dataset train_ds = load_split(cfg, "train");
  StagedNetwork net = load_checkpoint(checkpoint);
  const std::size_t t = t_steps > 0 ? static_cast<std::size_t>(t_steps) : net.t_max;
  CalibrationReport report = bn_calibrate(net, train_ds, cfg.calibration_batches,
                                          TemporalConfig::uniform(net.num_stages(), t),
                                          cfg.batch_size);
  save_checkpoint(net, out_ckpt);
  json j;
  j["batches_used"] = report.batches_used;
  j["T"] = t;
  json deltas = json::array();
  for (const auto& d : report.deltas)
    deltas.push_back({{"layer", d.layer_index},
                      {"mean_delta_l2", d.mean_delta_l2},
                      {"var_delta_l2", d.var_delta_l2}});
  j["layer_deltas"] = deltas;
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_fit(const std::string& config_path, const GlobalOpts& gopts,
            const std::string& samples_csv, const std::string& checkpoint,
            std::size_t num_samples, bool recalibrate, const std::string& out_json) {
  std::vector<EstimatorSample> samples;
  if (!samples_csv.empty()) {
    std::ifstream is(samples_csv);
    if (!is) throw ConfigError("cannot open " + samples_csv);
    std::string line;
    std::getline(is, line);  // header: t_1,...,t_G,accuracy
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      EstimatorSample s;
      std::istringstream ls(line);
      std::string tok;
      std::vector<double> vals;
      while (std::getline(ls, tok, ',')) vals.push_back(std::stod(tok));
      if (vals.size() < 2) throw ConfigError("fit: malformed sample line '" + line + "'");
      s.accuracy = vals.back();
      for (std::size_t i = 0; i + 1 < vals.size(); ++i)
        s.t.push_back(static_cast<std::size_t>(vals[i]));
      samples.push_back(std::move(s));
    }
  } else {
    if (checkpoint.empty())
      throw ConfigError("fit: need --samples or --checkpoint");
    RunConfig cfg = parse_run_config(config_path);
    apply_runtime(gopts, cfg);
    Dataset test_ds = load_split(cfg, "test");
    Dataset train_ds = load_split(cfg, "train");
    StagedNetwork base = load_checkpoint(checkpoint);
    RngStream rng = RngStream(cfg.seed).fork("fit");
    for (std::size_t i = 0; i < num_samples; ++i) {
      TemporalConfig tc =
          sample_config(base.num_stages(), cfg.t_min, cfg.t_max, SamplerMode::iid_uniform, rng);
      StagedNetwork net = base;
      if (recalibrate && net.has_batchnorm())
        bn_calibrate(net, train_ds, cfg.calibration_batches, tc, cfg.batch_size);
      EstimatorSample s;
      s.t = tc.t;
      s.accuracy = evaluate_config(net, test_ds, tc, cfg.batch_size) * 100.0;
      samples.push_back(std::move(s));
      std::cout << "sampled config " << i + 1 << "/" << num_samples << " acc " << s.accuracy
                << "\n";
    }
  }
  EstimatorModel model = fit_estimator(samples);
  json j;
  j["K"] = model.k;
  j["c"] = model.c;
  std::cout << j.dump(2) << "\n";
  if (!out_json.empty()) write_json(j, out_json);
  return 0;
}

int cmd_search(const std::string& config_path, const GlobalOpts& gopts,
               const std::string& estimator_json, const std::string& rates_json,
               const std::string& checkpoint, int rates_t, double budget, double budget_t,
               std::size_t t_min, std::size_t t_max, const std::string& out_json) {
  EstimatorModel model;
  {
    std::ifstream is(estimator_json);
    if (!is) throw ConfigError("cannot open " + estimator_json);
    json j = json::parse(is);
    model.k = j.at("K").get<std::vector<double>>();
    model.c = j.at("c").get<double>();
  }
  EnergyModel energy;
  if (!rates_json.empty()) {
    std::ifstream is(rates_json);
    if (!is) throw ConfigError("cannot open " + rates_json);
    json j = json::parse(is);
    energy.rates = j.at("R").get<std::vector<double>>();
  } else if (!checkpoint.empty()) {
    RunConfig cfg = parse_run_config(config_path);
    apply_runtime(gopts, cfg);
    Dataset test_ds = load_split(cfg, "test");
    StagedNetwork net = load_checkpoint(checkpoint);
    energy.rates = estimate_firing_rates(net, test_ds,
                                         rates_t > 0 ? static_cast<std::size_t>(rates_t)
                                                     : net.t_max);
  } else {
    throw ConfigError("search: need --rates or --checkpoint for firing rates");
  }
  if (budget > 0.0) {
    energy.budget = budget;
  } else if (budget_t > 0.0) {
    energy.budget = 0.0;
    for (double r : energy.rates) energy.budget += budget_t * r;
  } else {
    throw ConfigError("search: need --budget or --budget-T");
  }
  SearchResult res = search_optimal(model, energy, t_min, t_max);
  json j;
  j["K"] = model.k;
  j["c"] = model.c;
  j["R"] = energy.rates;
  j["budget"] = energy.budget;
  j["config"] = res.config;
  j["predicted_accuracy"] = res.predicted_accuracy;
  j["energy"] = res.energy;
  std::cout << j.dump(2) << "\n";
  if (!out_json.empty()) write_json(j, out_json);
  return 0;
}

int cmd_noise(const std::string& config_path, const GlobalOpts& gopts,
              const std::string& checkpoint, const std::string& sigma2_csv,
              const std::string& target, std::size_t repeats_override,
              const std::string& out_csv) {
  RunConfig cfg = parse_run_config(config_path);
  apply_runtime(gopts, cfg);
  Dataset test_ds = load_split(cfg, "test");
  StagedNetwork net = load_checkpoint(checkpoint);
  NoiseSpec spec;
  for (const auto& tok : [&] {
         std::vector<std::string> v;
         std::string t;
         for (char c : sigma2_csv) {
           if (c == ',') {
             v.push_back(t);
             t.clear();
           } else {
             t += c;
           }
         }
         if (!t.empty()) v.push_back(t);
         return v;
       }())
    spec.sigma2.push_back(std::stod(tok));
  spec.target = target == "inputs" ? NoiseSpec::Target::inputs : NoiseSpec::Target::weights;
  spec.repeats = repeats_override ? repeats_override : cfg.repeats;
  auto points = noise_robustness(net, spec, test_ds, RngStream(cfg.seed).fork("noise"));
  std::ofstream os(out_csv);
  if (!os) throw ConfigError("cannot open " + out_csv);
  os << "sigma2,mean,min,max\n";
  for (const auto& p : points) {
    os << p.sigma2 << ',' << p.mean << ',' << p.min << ',' << p.max << '\n';
    std::cout << "sigma2=" << p.sigma2 << " mean " << p.mean << " min " << p.min << " max "
              << p.max << "\n";
  }
  return 0;
}

int cmd_gradnorm(const std::string& config_path, const GlobalOpts& gopts,
                 const std::string& checkpoint, const std::string& out_json) {
  RunConfig cfg = parse_run_config(config_path);
  apply_runtime(gopts, cfg);
  Dataset train_ds = load_split(cfg, "train");
  StagedNetwork net = load_checkpoint(checkpoint);
  GradientMetrics m = gradient_metrics(net, train_ds, cfg.batch_size);
  json j;
  j["grad_norm_w"] = m.grad_norm_w;
  j["mean_grad_norm_x"] = m.mean_grad_norm_x;
  std::cout << j.dump(2) << "\n";
  if (!out_json.empty()) write_json(j, out_json);
  return 0;
}

int cmd_gen_data(const std::string& config_path, const GlobalOpts& gopts,
                 const std::string& out_dir) {
  RunConfig cfg = parse_run_config(config_path);
  apply_runtime(gopts, cfg);
  if (cfg.dataset_kind != "synthetic_bar" && cfg.dataset_kind != "synthetic_poisson")
    throw ConfigError("gen-data: dataset_kind must be synthetic_bar or synthetic_poisson");
  const std::string dir = out_dir.empty() ? cfg.output_dir : out_dir;
  for (const char* split : {"train", "test"}) {
    Dataset ds = load_split(cfg, split);
    save_event_dataset(ds.events, dir + "/" + split);
    std::cout << "wrote " << ds.size() << " samples to " << dir << "/" << split << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"temporally flexible spiking network toolkit"};
  app.require_subcommand(1);
  GlobalOpts gopts;
  app.add_option("--threads", gopts.threads, "worker threads (overrides config)");
  app.add_flag("--deterministic", gopts.deterministic, "force single-threaded execution");

  std::string config_path = "run.cfg";
  std::string checkpoint, out_path, t_list = "1,2,3,4,5,6";
  std::string samples_csv, estimator_json, rates_json, target = "weights", trace_csv;
  std::string sigma2 = "0,0.0001,0.0004";
  int reference_t = 0, t_steps = 0, rates_t = 0;
  std::size_t num_samples = 18, repeats = 0, limit = 0;
  std::size_t s_arg = 3, tmin_arg = 1, tmax_arg = 6, tref_arg = 6;
  double budget = 0.0, budget_t = 0.0;
  bool recalibrate = false;

  auto* c_train = app.add_subcommand("train", "train a model per the config file");
  c_train->add_option("--config", config_path)->required();
  c_train->add_option("--output", out_path, "override output_dir");

  auto* c_sweep = app.add_subcommand("sweep", "accuracy across inference time steps");
  c_sweep->add_option("--config", config_path)->required();
  c_sweep->add_option("--checkpoint", checkpoint)->required();
  c_sweep->add_option("--t-list", t_list, "comma-separated time steps");
  c_sweep->add_flag("--recalibrate", recalibrate, "recalibrate BN per T");
  c_sweep->add_option("--out", out_path, "output CSV")->required();

  auto* c_sim = app.add_subcommand("simulate", "event-driven replay of a checkpoint");
  c_sim->add_option("--config", config_path)->required();
  c_sim->add_option("--checkpoint", checkpoint)->required();
  c_sim->add_option("--reference", reference_t, "also run the T-step clock-driven reference");
  c_sim->add_option("--out", out_path, "report JSON path");
  c_sim->add_option("--trace", trace_csv, "dump first-sample event trace CSV");
  c_sim->add_option("--limit", limit, "evaluate at most N samples");

  auto* c_cal = app.add_subcommand("calibrate", "recompute BN statistics from training batches");
  c_cal->add_option("--config", config_path)->required();
  c_cal->add_option("--checkpoint", checkpoint)->required();
  c_cal->add_option("--T", t_steps, "uniform time step (default: checkpoint t_max)");
  c_cal->add_option("--out", out_path, "output checkpoint path")->required();

  auto* c_fit = app.add_subcommand("fit", "fit the per-stage accuracy estimator");
  c_fit->add_option("--config", config_path);
  c_fit->add_option("--samples", samples_csv, "CSV of t_1..t_G,accuracy rows");
  c_fit->add_option("--checkpoint", checkpoint, "measure samples from this model");
  c_fit->add_option("--num-samples", num_samples);
  c_fit->add_flag("--recalibrate", recalibrate);
  c_fit->add_option("--out", out_path, "output JSON");

  auto* c_search = app.add_subcommand("search", "budgeted search over temporal configurations");
  c_search->add_option("--config", config_path);
  c_search->add_option("--estimator", estimator_json)->required();
  c_search->add_option("--rates", rates_json, "JSON with per-stage rates R");
  c_search->add_option("--checkpoint", checkpoint, "estimate rates from this model");
  c_search->add_option("--rates-T", rates_t, "uniform T for rate estimation");
  c_search->add_option("--budget", budget, "energy budget");
  c_search->add_option("--budget-T", budget_t, "budget of a uniform-T run");
  c_search->add_option("--t-min", tmin_arg);
  c_search->add_option("--t-max", tmax_arg);
  c_search->add_option("--out", out_path, "output JSON");

  auto* c_cost = app.add_subcommand("cost", "expected mixed/fixed training time ratio");
  c_cost->add_option("--s", s_arg);
  c_cost->add_option("--t-min", tmin_arg);
  c_cost->add_option("--t-max", tmax_arg);
  c_cost->add_option("--T", tref_arg);

  auto* c_noise = app.add_subcommand("noise", "noise-injection robustness sweep");
  c_noise->add_option("--config", config_path)->required();
  c_noise->add_option("--checkpoint", checkpoint)->required();
  c_noise->add_option("--sigma2", sigma2, "comma-separated variances");
  c_noise->add_option("--target", target, "weights|inputs");
  c_noise->add_option("--repeats", repeats);
  c_noise->add_option("--out", out_path, "output CSV")->required();

  auto* c_grad = app.add_subcommand("gradnorm", "weight/input gradient norms");
  c_grad->add_option("--config", config_path)->required();
  c_grad->add_option("--checkpoint", checkpoint)->required();
  c_grad->add_option("--out", out_path, "output JSON");

  auto* c_gen = app.add_subcommand("gen-data", "write a synthetic event dataset to disk");
  c_gen->add_option("--config", config_path)->required();
  c_gen->add_option("--out", out_path, "output directory (default: output_dir)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (c_train->parsed()) return cmd_train(config_path, gopts, out_path);
    if (c_sweep->parsed())
      return cmd_sweep(config_path, gopts, checkpoint, t_list, recalibrate, out_path);
    if (c_sim->parsed())
      return cmd_simulate(config_path, gopts, checkpoint, reference_t, out_path, trace_csv, limit);
    if (c_cal->parsed()) return cmd_calibrate(config_path, gopts, checkpoint, t_steps, out_path);
    if (c_fit->parsed())
      return cmd_fit(config_path, gopts, samples_csv, checkpoint, num_samples, recalibrate,
                     out_path);
    if (c_search->parsed())
      return cmd_search(config_path, gopts, estimator_json, rates_json, checkpoint, rates_t,
                        budget, budget_t, tmin_arg, tmax_arg, out_path);
    if (c_cost->parsed()) {
      std::cout << cost_ratio(s_arg, tmin_arg, tmax_arg, tref_arg) << "\n";
      return 0;
    }
    if (c_noise->parsed())
      return cmd_noise(config_path, gopts, checkpoint, sigma2, target, repeats, out_path);
    if (c_grad->parsed()) return cmd_gradnorm(config_path, gopts, checkpoint, out_path);
    if (c_gen->parsed()) return cmd_gen_data(config_path, gopts, out_path);
  } catch (const GateError& e) {
    std::cerr << "validation gate: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
