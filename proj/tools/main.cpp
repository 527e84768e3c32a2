// fedgmm command-line driver.
//
// Subcommands: gen-data, pretrain, finetune, sample, verify, sweep.
// Every invocation writes a self-describing output directory named by
// timestamp + seed under --out, holding a run_manifest.json (config echo +
// seed + code version) next to the command's artifacts.
//
// Exit status: 0 success, 1 verification-check failure, 2 usage/config error.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedgmm/estimators.hpp"
#include "fedgmm/fed.hpp"
#include "fedgmm/io.hpp"
#include "fedgmm/metrics.hpp"
#include "fedgmm/mixture.hpp"
#include "fedgmm/personalize.hpp"
#include "fedgmm/sampler.hpp"
#include "fedgmm/verify.hpp"

namespace fs = std::filesystem;
using namespace fedgmm;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_dir = "runs";
  std::uint64_t seed = 0;
  bool seed_set = false;
  int threads = 1;
};

fs::path make_run_dir(const CommonArgs& args, std::uint64_t seed) {
  const auto now = std::chrono::system_clock::now();
  const std::time_t tt = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y%m%d-%H%M%S", &tm);
  fs::path base = fs::path(args.out_dir);
  fs::create_directories(base);
  fs::path dir = base / (std::string(stamp) + "-seed" + std::to_string(seed));
  for (int k = 2; fs::exists(dir); ++k)
    dir = base / (std::string(stamp) + "-seed" + std::to_string(seed) + "-" +
                  std::to_string(k));
  fs::create_directories(dir);
  return dir;
}

std::uint64_t resolve_seed(const CommonArgs& args, ConfigMap& cfg) {
  if (args.seed_set) {
    (void)cfg.get_u64("seed", 0);  // consume the key if present
    return args.seed;
  }
  return cfg.get_u64("seed", 0);
}

std::vector<double> parse_mu(ConfigMap& cfg) {
  if (cfg.has("mu")) return cfg.get_double_list("mu");
  const double norm = cfg.get_double("mu_norm");
  const std::size_t d = static_cast<std::size_t>(cfg.get_u64("d"));
  if (d < 1) throw ConfigError("d must be >= 1");
  return std::vector<double>(d, norm / std::sqrt(static_cast<double>(d)));
}

WeightsSpec parse_weights(ConfigMap& cfg) {
  const std::string spec = cfg.get_string("weights");
  if (spec.rfind("uniform:", 0) == 0) {
    const auto comma = spec.find(',', 8);
    if (comma == std::string::npos)
      throw ConfigError("weights = uniform:<lo>,<hi>");
    return WeightsSpec::uniform(std::stod(spec.substr(8, comma - 8)),
                                std::stod(spec.substr(comma + 1)));
  }
  std::vector<double> values;
  std::istringstream in(spec);
  std::string item;
  while (std::getline(in, item, ',')) values.push_back(std::stod(item));
  if (values.empty()) throw ConfigError("weights must not be empty");
  if (values.size() == 1) return WeightsSpec::constant(values[0]);
  return WeightsSpec::explicit_list(values);
}

DiffusionSchedule parse_schedule(ConfigMap& cfg) {
  DiffusionSchedule s;
  s.t_min = cfg.get_double("t_min", s.t_min);
  s.t_max = cfg.get_double("t_max", s.t_max);
  s.validate();
  return s;
}

FedConfig parse_fed_config(ConfigMap& cfg, std::uint64_t seed, int threads) {
  FedConfig fc;
  fc.seed = seed;
  fc.threads = threads;
  fc.m = cfg.get_u64("m", 1);
  fc.n = cfg.get_u64("n", 1000);
  fc.K = cfg.get_u64("K", 1000);
  fc.tau_sync = cfg.get_u64("tau_sync", 50);
  fc.batch = cfg.get_u64("batch", 32);
  fc.eta_mu = cfg.get_double("eta_mu", 1e-2);
  fc.eta_logit = cfg.get_double("eta_logit", 1e-2);
  fc.schedule = parse_schedule(cfg);
  fc.weights = parse_weights(cfg);
  const std::string opt = cfg.get_string("optimizer", "sgd");
  if (opt == "adam") fc.optimizer = OptimizerKind::adam;
  else if (opt == "sgd") fc.optimizer = OptimizerKind::sgd;
  else throw ConfigError("optimizer must be sgd or adam");
  fc.adam.beta1 = cfg.get_double("adam_beta1", fc.adam.beta1);
  fc.adam.beta2 = cfg.get_double("adam_beta2", fc.adam.beta2);
  fc.adam.eps = cfg.get_double("adam_eps", fc.adam.eps);
  fc.init_mu_sd = cfg.get_double("init_mu_sd", fc.init_mu_sd);
  fc.polyak_tail_frac = cfg.get_double("polyak_tail_frac", 0.0);
  fc.participation = cfg.get_double("participation", 1.0);
  return fc;
}

int cmd_gen_data(const CommonArgs& args) {
  ConfigMap cfg = ConfigMap::parse_file(args.config_path);
  const std::uint64_t seed = resolve_seed(args, cfg);
  const std::size_t m = cfg.get_u64("m", 1);
  const std::size_t n = cfg.get_u64("n", 1000);
  const std::vector<double> mu = parse_mu(cfg);
  const WeightsSpec weights = parse_weights(cfg);
  cfg.finalize();

  const fs::path dir = make_run_dir(args, seed);
  json manifest = make_manifest("gen-data", seed, args.threads, cfg);
  manifest["m"] = m;
  manifest["n"] = n;
  manifest["d"] = mu.size();
  manifest["mu"] = mu;
  json weights_json = json::array();
  json files = json::array();
  for (std::size_t j = 0; j < m; ++j) {
    const double w = weights.weight_for(j, seed);
    weights_json.push_back(w);
    MixtureParams truth{mu, w};
    RngStream rng = keyed_stream(seed, StreamKind::client_data, j);
    const LabeledSamples data = sample_data(truth, n, rng);
    char name[32];
    std::snprintf(name, sizeof(name), "client_%03zu.csv", j);
    write_samples_csv(dir / name, data.x, &data.label);
    files.push_back(name);
  }
  manifest["weights"] = weights_json;
  manifest["files"] = files;
  write_json_file(dir / "manifest.json", manifest);
  std::printf("wrote %zu client dataset(s) under %s\n", m, dir.c_str());
  return 0;
}

// Per-round score-error hook: mean over clients of L_est between each
// client's truth and its current (backbone, logit) estimate.
ScoreErrorHook make_score_error_hook(std::vector<double> mu_true,
                                     std::size_t mc, std::uint64_t seed) {
  return [mu_true = std::move(mu_true), mc, seed](
             std::span<const double> backbone,
             const std::vector<ClientState>& clients) {
    const std::vector<double> grid = default_t_grid();
    double acc = 0.0;
    for (const ClientState& c : clients) {
      MixtureParams truth{mu_true, c.true_w};
      ScoreParams est;
      est.mu_hat.assign(backbone.begin(), backbone.end());
      est.logit_hat = c.params.logit_hat;
      acc += score_error(truth, est, grid, mc,
                         derive_seed(seed, StreamKind::score_error_mc,
                                     c.client_id))
                 .value;
    }
    return acc / static_cast<double>(clients.size());
  };
}

int cmd_pretrain(const CommonArgs& args) {
  ConfigMap cfg = ConfigMap::parse_file(args.config_path);
  const std::uint64_t seed = resolve_seed(args, cfg);
  const std::string resume = cfg.get_string("resume", "");
  const bool record_score_error = cfg.get_bool("record_score_error", false);
  const std::size_t score_error_mc = cfg.get_u64("score_error_mc", 2000);
  const fs::path dir = make_run_dir(args, seed);

  std::vector<RunRecord> records;
  json checkpoint;
  if (!resume.empty()) {
    cfg.finalize();  // resume takes everything from the checkpoint
    FedEngine engine = engine_from_checkpoint(read_json_file(resume), args.threads);
    if (record_score_error)
      engine.set_score_error_hook(make_score_error_hook(
          engine.mu_true(), score_error_mc, engine.config().seed));
    engine.run();
    records = engine.result().records;
    checkpoint = checkpoint_to_json(engine);
  } else {
    const std::vector<double> mu = parse_mu(cfg);
    const FedConfig fc = parse_fed_config(cfg, seed, args.threads);
    cfg.finalize();
    FedEngine engine(fc, mu);
    if (record_score_error)
      engine.set_score_error_hook(
          make_score_error_hook(mu, score_error_mc, seed));
    engine.run();
    records = engine.result().records;
    checkpoint = checkpoint_to_json(engine);
  }

  write_json_file(dir / "run_manifest.json",
                  make_manifest("pretrain", seed, args.threads, cfg));
  write_metrics_csv(dir / "metrics.csv", records);
  write_json_file(dir / "params.json", checkpoint);
  std::printf("pretraining done: %zu metric row(s) under %s\n", records.size(),
              dir.c_str());
  return 0;
}

int cmd_finetune(const CommonArgs& args) {
  ConfigMap cfg = ConfigMap::parse_file(args.config_path);
  const std::uint64_t seed = resolve_seed(args, cfg);

  std::vector<double> backbone;
  if (cfg.has("backbone_from")) {
    const json ckpt = read_json_file(cfg.get_string("backbone_from"));
    backbone = hex_json_to_vector(ckpt.at("backbone_hex"));
  } else if (cfg.has("backbone")) {
    backbone = cfg.get_double_list("backbone");
  } else {
    throw ConfigError("finetune needs `backbone` or `backbone_from`");
  }

  Matrix data;
  const double w_new = cfg.get_double("w_new");
  if (cfg.has("data_from")) {
    data = read_samples_csv(cfg.get_string("data_from"));
  } else {
    const std::size_t n_ft = cfg.get_u64("n_ft", 100);
    MixtureParams truth{backbone, w_new};
    if (cfg.has("mu")) truth.mu = cfg.get_double_list("mu");
    RngStream rng = keyed_stream(seed, StreamKind::client_data, 0);
    data = sample_data(truth, n_ft, rng).x;
  }

  FinetuneConfig fc;
  fc.K_ft = cfg.get_u64("K_ft", 500);
  fc.eta_ft = cfg.get_double("eta_ft", 5e-2);
  fc.batch = cfg.get_u64("batch_ft", 0);
  fc.schedule = parse_schedule(cfg);
  fc.seed = seed;
  if (cfg.get_string("optimizer", "sgd") == "adam")
    fc.optimizer = OptimizerKind::adam;
  cfg.finalize();

  const FinetuneResult res = finetune_new_client(backbone, data, fc);

  const fs::path dir = make_run_dir(args, seed);
  write_json_file(dir / "run_manifest.json",
                  make_manifest("finetune", seed, args.threads, cfg));
  {
    CsvWriter csv(dir / "trajectory.csv", {"step", "logit", "w", "loss"});
    for (std::size_t k = 0; k < res.logit_trajectory.size(); ++k) {
      const double loss = k == 0 ? std::numeric_limits<double>::quiet_NaN()
                                 : res.loss_trajectory[k - 1];
      csv.write_row(std::vector<double>{
          static_cast<double>(k), res.logit_trajectory[k],
          logit_to_weight(res.logit_trajectory[k]), loss});
    }
  }
  json est;
  est["format_version"] = kFormatVersion;
  est["mu_hat_hex"] = vector_to_hex_json(backbone);
  est["logit_hex"] = double_to_hex(res.final_logit);
  est["w_hat"] = res.final_w;
  est["w_new"] = w_new;
  write_json_file(dir / "estimated_params.json", est);
  std::printf("finetune done: w_hat = %.6f under %s\n", res.final_w, dir.c_str());
  return 0;
}

int cmd_sample(const CommonArgs& args) {
  ConfigMap cfg = ConfigMap::parse_file(args.config_path);
  const std::uint64_t seed = resolve_seed(args, cfg);
  SamplerConfig sc;
  sc.n_steps = cfg.get_u64("n_steps", 500);
  sc.t_start = cfg.get_double("t_start", 5.0);
  sc.t_end = cfg.get_double("t_end", 1e-3);
  sc.validate();
  const std::size_t n = cfg.get_u64("n_samples", 10000);

  const std::string mode = cfg.get_string("score", "true");
  Matrix samples;
  if (mode == "true") {
    MixtureParams p{parse_mu(cfg), cfg.get_double("w")};
    p.validate();
    cfg.finalize();
    samples = reverse_sample(
        [&p](double t, std::span<const double> x, std::span<double> out) {
          true_score_into(p, t, x, out);
        },
        p.dim(), sc, n, seed, args.threads);
  } else if (mode == "file") {
    const json est = read_json_file(cfg.get_string("params_file"));
    ScoreParams p;
    p.mu_hat = hex_json_to_vector(est.at("mu_hat_hex"));
    p.logit_hat = hex_to_double(est.at("logit_hex").get<std::string>());
    cfg.finalize();
    samples = reverse_sample(
        [&p](double t, std::span<const double> x, std::span<double> out) {
          predict_score_into(p, t, x, out);
        },
        p.dim(), sc, n, seed, args.threads);
  } else {
    throw ConfigError("score must be `true` or `file`");
  }

  const fs::path dir = make_run_dir(args, seed);
  write_json_file(dir / "run_manifest.json",
                  make_manifest("sample", seed, args.threads, cfg));
  write_samples_csv(dir / "samples.csv", samples, nullptr);
  std::printf("wrote %zu sample(s) under %s\n", n, dir.c_str());
  return 0;
}

int cmd_verify(const CommonArgs& args) {
  verify::VerifyOptions opt;
  opt.threads = args.threads;
  ConfigMap cfg = args.config_path.empty()
                      ? ConfigMap::parse_string("", "<default>")
                      : ConfigMap::parse_file(args.config_path);
  if (args.seed_set) {
    (void)cfg.get_u64("seed", 0);
    opt.seed = args.seed;
  } else {
    opt.seed = cfg.get_u64("seed", verify::kDefaultSeed);
  }
  const std::string checks = cfg.get_string("checks", "all");
  if (checks != "all") {
    std::istringstream in(checks);
    std::string item;
    while (std::getline(in, item, ',')) opt.only.push_back(std::stoi(item));
  }
  cfg.finalize();

  const auto results = verify::run_checks(opt);
  bool all = true;
  for (const auto& r : results) {
    all = all && r.pass;
    std::printf("[%s] criterion %2d: %s (%.1f s)\n", r.pass ? "PASS" : "FAIL",
                r.id, r.name.c_str(), r.seconds);
  }
  const fs::path dir = make_run_dir(args, opt.seed);
  write_json_file(dir / "run_manifest.json",
                  make_manifest("verify", opt.seed, args.threads, cfg));
  write_json_file(dir / "verify_report.json",
                  verify::report_json(results, opt.seed, opt.threads));
  // per-cell CSV for the bound grid when it ran
  for (const auto& r : results) {
    if (r.id != 2) continue;
    CsvWriter csv(dir / "bound_cells.csv",
                  {"d", "n", "w", "t", "trials", "empirical_mse", "exact_mse",
                   "upper_bound"});
    for (const auto& cell : r.details.at("cells"))
      csv.write_row(std::vector<double>{
          cell.at("d").get<double>(), cell.at("n").get<double>(), 0.7, 0.1,
          10000.0, cell.at("empirical_mse").get<double>(),
          cell.at("exact_mse").get<double>(),
          cell.at("upper_bound").get<double>()});
  }
  std::printf("%s — report under %s\n",
              all ? "all checks passed" : "CHECKS FAILED", dir.c_str());
  return all ? 0 : 1;
}

int cmd_sweep(const CommonArgs& args) {
  ConfigMap cfg = ConfigMap::parse_file(args.config_path);
  const std::uint64_t seed = resolve_seed(args, cfg);
  const std::string kind = cfg.get_string("kind");

  if (kind == "robustness") {
    const std::vector<double> backbone = parse_mu(cfg);
    const double w_new = cfg.get_double("w_new");
    const std::size_t n_ft = cfg.get_u64("n_ft", 100);
    std::vector<std::size_t> epochs;
    for (std::uint64_t e : cfg.get_u64_list("epochs"))
      epochs.push_back(static_cast<std::size_t>(e));
    const std::vector<double> lrs = cfg.get_double_list("lrs");
    const std::size_t n_seeds = cfg.get_u64("n_seeds", 10);
    const DiffusionSchedule schedule = parse_schedule(cfg);
    cfg.finalize();

    MixtureParams truth{backbone, w_new};
    RngStream data_rng = keyed_stream(seed, StreamKind::client_data, 0);
    const Matrix data = sample_data(truth, n_ft, data_rng).x;
    std::vector<std::uint64_t> seeds;
    for (std::uint64_t i = 0; i < n_seeds; ++i)
      seeds.push_back(derive_seed(seed, StreamKind::generic, i));
    const auto rows =
        robustness_sweep(backbone, data, w_new, epochs, lrs, seeds, schedule);

    const fs::path dir = make_run_dir(args, seed);
    write_json_file(dir / "run_manifest.json",
                    make_manifest("sweep", seed, args.threads, cfg));
    CsvWriter csv(dir / "sweep.csv",
                  {"epochs", "lr", "seed", "weight_error", "backbone_drift"});
    for (const SweepRow& row : rows)
      csv.write_row(std::vector<double>{
          static_cast<double>(row.epochs), row.lr, static_cast<double>(row.seed),
          row.weight_error, row.backbone_drift});
    std::printf("robustness sweep: %zu row(s) under %s\n", rows.size(),
                dir.c_str());
    return 0;
  }

  if (kind == "scaling") {
    ScalingStudyConfig sc;
    sc.mu_true = parse_mu(cfg);
    sc.seed = seed;
    sc.threads = args.threads;
    if (cfg.has("m_grid")) {
      sc.m_grid.clear();
      for (std::uint64_t v : cfg.get_u64_list("m_grid"))
        sc.m_grid.push_back(static_cast<std::size_t>(v));
    }
    if (cfg.has("n_grid")) {
      sc.n_grid.clear();
      for (std::uint64_t v : cfg.get_u64_list("n_grid"))
        sc.n_grid.push_back(static_cast<std::size_t>(v));
    }
    sc.w_new = cfg.get_double("w_new", sc.w_new);
    sc.K = cfg.get_u64("K", sc.K);
    sc.tau_sync = cfg.get_u64("tau_sync", sc.tau_sync);
    sc.batch = cfg.get_u64("batch", sc.batch);
    sc.eta_mu = cfg.get_double("eta_mu", sc.eta_mu);
    sc.eta_logit = cfg.get_double("eta_logit", sc.eta_logit);
    sc.K_ft = cfg.get_u64("K_ft", sc.K_ft);
    sc.eta_ft = cfg.get_double("eta_ft", sc.eta_ft);
    sc.mc_samples = cfg.get_u64("mc_samples", sc.mc_samples);
    sc.n_seeds = cfg.get_u64("n_seeds", sc.n_seeds);
    sc.schedule = parse_schedule(cfg);
    cfg.finalize();

    const ScalingStudy study = score_error_scaling_study(sc);
    const fs::path dir = make_run_dir(args, seed);
    write_json_file(dir / "run_manifest.json",
                    make_manifest("sweep", seed, args.threads, cfg));
    CsvWriter csv(dir / "scaling.csv",
                  {"m", "n", "d", "seed", "l_est", "std_error"});
    for (const ScalingCell& c : study.rows)
      csv.write_row(std::vector<double>{
          static_cast<double>(c.m), static_cast<double>(c.n),
          static_cast<double>(c.d), static_cast<double>(c.seed), c.l_est,
          c.std_error});
    json slopes;
    slopes["slope_in_n"] = study.slope_in_n;
    slopes["slope_in_m"] = study.slope_in_m;
    slopes["median_slope_in_n"] = study.median_slope_in_n;
    slopes["median_slope_in_m"] = study.median_slope_in_m;
    write_json_file(dir / "slopes.json", slopes);
    std::printf("scaling sweep: %zu cell-run(s) under %s\n", study.rows.size(),
                dir.c_str());
    return 0;
  }

  throw ConfigError("sweep kind must be `robustness` or `scaling`");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"federated two-component Gaussian-mixture diffusion toolkit"};
  app.require_subcommand(1);

  CommonArgs args;
  std::string command;
  for (const std::string name :
       {"gen-data", "pretrain", "finetune", "sample", "verify", "sweep"}) {
    CLI::App* sub = app.add_subcommand(
        name, name == "verify" ? "run the verification suite" : "run " + name);
    sub->add_option("--config", args.config_path, "flat key=value config file");
    sub->add_option("--out", args.out_dir, "parent directory for run outputs");
    CLI::Option* seed_opt =
        sub->add_option("--seed", args.seed, "master seed (overrides config)");
    sub->add_option("--threads", args.threads, "internal parallelism cap");
    sub->callback([&command, &args, name, seed_opt] {
      command = name;
      args.seed_set = seed_opt->count() > 0;
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (command == "gen-data") return cmd_gen_data(args);
    if (command == "pretrain") return cmd_pretrain(args);
    if (command == "finetune") return cmd_finetune(args);
    if (command == "sample") return cmd_sample(args);
    if (command == "verify") return cmd_verify(args);
    if (command == "sweep") return cmd_sweep(args);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 2;
}
