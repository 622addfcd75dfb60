// flowstream command-line tool: data generation, training, rollouts,
// benchmarks and closed-form timing tables.
//
// Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.

#include <openssl/evp.h>

#include <cstdlib>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "flowstream/flowstream.hpp"

extern char** environ;

namespace fs = std::filesystem;
using namespace flowstream;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;
constexpr std::string_view kEnvPrefix = "FLOWSTREAM_";

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string sha256_hex(const fs::path& p) {
  const std::vector<std::uint8_t> bytes = io::read_file_bytes(p);
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw Error(ErrorCode::kIo, "sha256 failed for " + p.string());
  }
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
  if (!out) throw Error(ErrorCode::kIo, "failed writing " + p.string());
}

/// manifest.json: command, resolved configuration and artifact hashes.
void write_manifest(const fs::path& dir, const std::string& command, const nlohmann::json& config,
                    const std::vector<std::string>& artifacts) {
  nlohmann::json m;
  m["tool"] = "flowstream";
  m["command"] = command;
  m["config"] = config;
  nlohmann::json hashes = nlohmann::json::object();
  for (const std::string& a : artifacts) hashes[a] = sha256_hex(dir / a);
  m["artifacts"] = hashes;
  write_text(dir / "manifest.json", m.dump(2) + "\n");
}

void require_input(const std::string& path, const char* what) {
  if (path.empty() || !fs::is_regular_file(path)) {
    throw UsageError(std::string(what) + " not found: '" + path + "'");
  }
}

fs::path prepare_out(const std::string& out) {
  if (out.empty()) throw UsageError("--out is required");
  fs::create_directories(out);
  return out;
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<int> parse_widths(const std::string& s) {
  std::vector<int> out;
  for (const std::string& w : split_csv(s)) {
    try {
      out.push_back(std::stoi(w));
    } catch (const std::exception&) {
      throw UsageError("bad layer width '" + w + "'");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shared option groups

struct EnvOptions {
  std::string variant = "direct";
  double saturation = 0.3;
  int episode_cap = 120;

  void add(CLI::App* app) {
    app->add_option("--env", variant, "environment: direct | controller")
        ->check(CLI::IsMember({"direct", "controller"}))
        ->capture_default_str();
    app->add_option("--saturation", saturation, "controller saturation c")->capture_default_str();
    app->add_option("--episode-cap", episode_cap, "step cap per episode")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
  }

  EnvKind kind() const {
    EnvKind k = parse_env_variant(variant) == EnvVariant::kDirect ? EnvKind::direct() : EnvKind::controller(saturation);
    k.episode_cap = episode_cap;
    k.validate();
    return k;
  }
};

struct LatencyOptions {
  StageLatency lat = StageLatency::paper_profile();

  void add(CLI::App* app) {
    app->add_option("--t-obs", lat.t_obs, "observation latency, ms")->capture_default_str();
    app->add_option("--t-gen", lat.t_gen, "per-action generation latency, ms")->capture_default_str();
    app->add_option("--t-exec", lat.t_exec, "per-action execution period, ms")->capture_default_str();
    app->add_option("--t-pred", lat.t_pred, "saliency predictor latency, ms")->capture_default_str();
  }
};

// ---------------------------------------------------------------------------
// gen-data

struct GenData {
  EnvOptions env;
  int n = 200;
  std::uint64_t seed = 0;
  std::string out;

  void add(CLI::App& app) {
    CLI::App* c = app.add_subcommand("gen-data", "generate scripted demonstrations");
    env.add(c);
    c->add_option("--n", n, "number of episodes")->check(CLI::PositiveNumber)->capture_default_str();
    c->add_option("--seed", seed, "random seed")->capture_default_str();
    c->add_option("--out", out, "output directory")->required();
    c->callback([this] { run(); });
  }

  void run() {
    const fs::path dir = prepare_out(out);
    const EnvKind kind = env.kind();
    Dataset ds;
    ds.episodes = generate_demos(kind, static_cast<std::size_t>(n), seed);
    ds.metadata = {{"env", to_json(kind)}, {"seed", seed}, {"episodes", n}};
    save_dataset(ds, dir / "dataset.fsd");
    load_dataset(dir / "dataset.fsd");  // re-validates the prefix-sum invariant
    write_manifest(dir, "gen-data", {{"env", to_json(kind)}, {"n", n}, {"seed", seed}}, {"dataset.fsd"});
    std::cout << "wrote " << n << " episodes to " << (dir / "dataset.fsd").string() << "\n";
  }
};

// ---------------------------------------------------------------------------
// train-policy

struct TrainPolicy {
  std::string dataset;
  std::string resume;
  std::string out;
  std::string hidden = "128,128";
  TrainConfig cfg;
  bool no_state_alignment = false;
  bool legacy_norm = false;
  int eval_episodes = 0;
  EnvOptions env;

  void add(CLI::App& app) {
    CLI::App* c = app.add_subcommand("train-policy", "train the flow policy on a demonstration dataset");
    c->add_option("--dataset", dataset, "dataset file from gen-data")->required();
    c->add_option("--iterations", cfg.iterations, "total optimizer steps")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    c->add_option("--batch-size", cfg.batch_size)->check(CLI::PositiveNumber)->capture_default_str();
    c->add_option("--lr", cfg.learning_rate, "learning rate")->capture_default_str();
    c->add_option("--seed", cfg.seed)->capture_default_str();
    c->add_option("--h", cfg.flow.h, "actions per observation")->check(CLI::PositiveNumber)->capture_default_str();
    c->add_option("--k", cfg.flow.k, "flow stabilizing factor")->capture_default_str();
    c->add_option("--sigma0", cfg.flow.sigma0, "initial noise std (normalized)")->capture_default_str();
    c->add_option("--hidden", hidden, "hidden widths, comma separated")->capture_default_str();
    c->add_option("--log-every", cfg.log_every)->check(CLI::PositiveNumber)->capture_default_str();
    c->add_flag("--no-state-alignment", no_state_alignment, "anchor every window at zero instead of the dataset state");
    c->add_flag("--legacy-norm", legacy_norm, "use offset normalization instead of scale-only");
    c->add_option("--resume", resume, "continue from a policy checkpoint");
    c->add_option("--eval-episodes", eval_episodes, "zero-latency evaluation episodes after training")
        ->check(CLI::NonNegativeNumber);
    env.add(c);
    c->add_option("--out", out, "output directory")->required();
    c->callback([this] { run(); });
  }

  void run() {
    require_input(dataset, "dataset");
    if (!resume.empty()) require_input(resume, "resume checkpoint");
    cfg.hidden = parse_widths(hidden);
    cfg.use_state_alignment = !no_state_alignment;
    cfg.use_modified_norm = !legacy_norm;
    try {
      cfg.validate();
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
    const fs::path dir = prepare_out(out);
    const Dataset ds = load_dataset(dataset);
    std::optional<LoadedPolicy> from;
    if (!resume.empty()) from = load_policy(resume);

    std::vector<TrainLogRow> rows;
    TrainResult r;
    try {
      r = train(ds, cfg, from ? &*from : nullptr, [&](const TrainLogRow& row) {
        rows.push_back(row);
        std::cout << "iter " << row.iteration << " loss " << row.loss << "\n";
      });
    } catch (const Error& e) {
      if (e.code() == ErrorCode::kNonFiniteLoss) {
        write_text(dir / "train_log.csv", train_log_csv(rows));
        std::cerr << "training collapsed: " << e.what() << "\n";
        if (!rows.empty()) {
          std::cerr << "last finite logged loss " << rows.back().loss << " at iteration " << rows.back().iteration
                    << "\n";
        }
      }
      throw;
    }
    save_policy(r.policy, dir / "policy.fsp", r.state);
    write_text(dir / "train_log.csv", train_log_csv(r.log));
    nlohmann::json config = to_json(cfg);
    config["dataset"] = dataset;
    config["dataset_sha256"] = sha256_hex(dataset);
    if (!resume.empty()) config["resume"] = resume;
    if (eval_episodes > 0) {
      const EvalSummary ev = evaluate(r.policy, env.kind(), eval_episodes, cfg.seed);
      std::cout << "success rate " << ev.success_rate << " over " << eval_episodes << " episodes, mean endpoint error "
                << ev.mean_endpoint_error << "\n";
      config["eval"] = {{"env", to_json(env.kind())}, {"episodes", eval_episodes}, {"success_rate", ev.success_rate}};
    }
    write_manifest(dir, "train-policy", config, {"policy.fsp", "train_log.csv"});
  }
};

// ---------------------------------------------------------------------------
// train-predictor

struct TrainPredictor {
  std::string rollouts;
  std::string out;
  std::string hidden = "64,64";
  PredictorTrainConfig cfg;

  void add(CLI::App& app) {
    CLI::App* c = app.add_subcommand("train-predictor", "train the action-saliency predictor on rollouts");
    c->add_option("--rollouts", rollouts, "dataset file of rollouts")->required();
    c->add_option("--iterations", cfg.iterations)->check(CLI::PositiveNumber)->capture_default_str();
    c->add_option("--batch-size", cfg.batch_size)->check(CLI::PositiveNumber)->capture_default_str();
    c->add_option("--lr", cfg.learning_rate, "initial learning rate (cosine decay)")->capture_default_str();
    c->add_option("--seed", cfg.seed)->capture_default_str();
    c->add_option("--max-gap", cfg.max_gap, "largest frame gap in actions")->check(CLI::PositiveNumber)->capture_default_str();
    c->add_option("--max-actions", cfg.model.max_actions, "pending actions accepted by the predictor")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    c->add_option("--hidden", hidden, "hidden widths, comma separated")->capture_default_str();
    c->add_option("--out", out, "output directory")->required();
    c->callback([this] { run(); });
  }

  void run() {
    require_input(rollouts, "rollouts dataset");
    cfg.model.hidden = parse_widths(hidden);
    if (cfg.max_gap > cfg.model.max_actions) throw UsageError("--max-gap exceeds --max-actions");
    const fs::path dir = prepare_out(out);
    const Dataset ds = load_dataset(rollouts);
    const PredictorTrainResult r = train_predictor(ds.episodes, cfg);
    save_predictor(r.model, dir / "predictor.fsp");
    std::ostringstream log;
    log << "iteration,loss\n" << std::setprecision(10);
    for (const auto& [it, loss] : r.loss_log) log << it << ',' << loss << '\n';
    write_text(dir / "predictor_log.csv", log.str());
    std::cout << "final loss " << r.loss_log.back().second << "\n";
    write_manifest(dir, "train-predictor",
                   {{"rollouts", rollouts},
                    {"rollouts_sha256", sha256_hex(rollouts)},
                    {"iterations", cfg.iterations},
                    {"batch_size", cfg.batch_size},
                    {"learning_rate", cfg.learning_rate},
                    {"seed", cfg.seed},
                    {"min_gap", cfg.min_gap},
                    {"max_gap", cfg.max_gap},
                    {"max_actions", cfg.model.max_actions},
                    {"hidden", cfg.model.hidden}},
                   {"predictor.fsp", "predictor_log.csv"});
  }
};

// ---------------------------------------------------------------------------
// rollout / bench

struct BenchCommand {
  bool single = false;  // rollout: one configuration
  std::string policy;
  std::string predictor;
  std::string out;
  std::string modes = "sync,none,naive,random,anao,adaptive";
  std::string mode = "streaming";
  std::string eo = "none";
  std::string clock = "simulated";
  std::string baseline;
  double eta = std::numeric_limits<double>::quiet_NaN();
  double p = std::numeric_limits<double>::quiet_NaN();
  bool traces = false;
  EnvOptions env;
  LatencyOptions latency;
  BenchConfig b;

  void add(CLI::App& app, bool rollout) {
    single = rollout;
    CLI::App* c = rollout ? app.add_subcommand("rollout", "run episodes of one scheduler configuration")
                          : app.add_subcommand("bench", "run the scheduler / early-observation matrix");
    c->add_option("--policy", policy, "policy checkpoint")->required();
    c->add_option("--predictor", predictor, "saliency predictor checkpoint");
    env.add(c);
    latency.add(c);
    c->add_option("--episodes", b.episodes)->check(CLI::PositiveNumber)->capture_default_str();
    c->add_option("--seed", b.seed)->capture_default_str();
    if (rollout) {
      c->add_option("--mode", mode, "sync | streaming")->check(CLI::IsMember({"sync", "streaming"}))->capture_default_str();
      c->add_option("--eo", eo, "none | naive | random | anao | adaptive")
          ->check(CLI::IsMember({"none", "naive", "random", "anao", "adaptive"}))
          ->capture_default_str();
    } else {
      c->add_option("--modes", modes, "comma separated subset of " + modes)->capture_default_str();
      c->add_option("--baseline", baseline, "configuration the speedups are relative to (default: first mode)");
    }
    c->add_option("--eo-rate", b.eo_rate, "target early-observation rate for threshold calibration")
        ->check(CLI::Range(0.0, 1.0))
        ->capture_default_str();
    c->add_option("--eta", eta, "fixed indicator threshold (skips calibration)");
    c->add_option("--p", p, "fixed random firing probability")->check(CLI::Range(0.0, 1.0));
    c->add_option("--n-eo", b.n_eo, "actions left when early observation may start")->capture_default_str();
    c->add_option("--n-replan", b.n_replan, "sync: executed actions per chunk")->capture_default_str();
    c->add_option("--calibration-episodes", b.calibration_episodes)->check(CLI::PositiveNumber)->capture_default_str();
    c->add_option("--calibration-refinements", b.calibration_refinements, "closed-loop threshold re-calibration passes")
        ->check(CLI::NonNegativeNumber)
        ->capture_default_str();
    c->add_option("--clock", clock, "simulated | wall")->check(CLI::IsMember({"simulated", "wall"}))->capture_default_str();
    c->add_flag("--traces", traces, "write csv and trace-json timelines of the first episode per configuration");
    c->add_option("--out", out, "output directory")->required();
    c->callback([this] { run(); });
  }

  void run() {
    require_input(policy, "policy checkpoint");
    if (!predictor.empty()) require_input(predictor, "predictor checkpoint");
    b.env = env.kind();
    b.latency = latency.lat;
    b.clock = parse_clock_mode(clock);
    if (!std::isnan(eta)) b.eta = eta;
    if (!std::isnan(p)) b.p = p;
    if (single) {
      b.modes = {mode == "sync" ? "sync" : (eo == "none" ? "none" : eo)};
      if (mode == "sync" && eo != "none") throw UsageError("early observation needs --mode streaming");
    } else {
      b.modes = split_csv(modes);
    }
    const bool adaptive = std::find(b.modes.begin(), b.modes.end(), "adaptive") != b.modes.end();
    if (adaptive && predictor.empty()) throw UsageError("adaptive early observation needs --predictor");

    const LoadedPolicy lp = load_policy(policy);
    b.h = lp.policy.horizon();
    try {
      b.validate();
      for (const std::string& m : b.modes) scheduler_for(m, b).validate();
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
    std::optional<PredictorModel> pred;
    if (!predictor.empty()) pred = load_predictor(predictor);
    const fs::path dir = prepare_out(out);

    const std::vector<ModeOutcome> outcomes = run_bench(lp.policy, pred ? &*pred : nullptr, b);
    std::vector<ConfigReports> reports;
    std::vector<std::string> artifacts = {"episodes.csv", "aggregate.csv", "aggregate.txt"};
    nlohmann::json thresholds = nlohmann::json::object();
    for (const ModeOutcome& o : outcomes) {
      reports.push_back(o.reports);
      if (o.scheduler.eo.mode == EoMode::kAdaptive || o.scheduler.eo.mode == EoMode::kActionNorm) {
        thresholds[o.name] = {{"eta", o.scheduler.eo.eta}};
      } else if (o.scheduler.eo.mode == EoMode::kRandom) {
        thresholds[o.name] = {{"p", o.scheduler.eo.p}};
      }
      for (const EpisodeResult& e : o.episodes) {
        if (!e.diagnostic.empty()) std::cerr << o.name << ": episode aborted: " << e.diagnostic << "\n";
      }
      if (traces && !o.episodes.empty()) {
        export_trace(o.episodes.front().events, dir / ("trace_" + o.name + ".csv"), TraceFormat::kCsv);
        export_trace(o.episodes.front().events, dir / ("trace_" + o.name + ".json"), TraceFormat::kTraceJson);
        artifacts.push_back("trace_" + o.name + ".csv");
        artifacts.push_back("trace_" + o.name + ".json");
      }
    }
    const std::string base = baseline.empty() ? b.modes.front() : baseline;
    ComparisonTable table;
    try {
      table = aggregate(reports, base);
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
    write_text(dir / "episodes.csv", render_episode_csv(reports));
    write_text(dir / "aggregate.csv", render_csv(table));
    const std::string text = render_text(table);
    write_text(dir / "aggregate.txt", text);
    std::cout << text;

    nlohmann::json config = to_json(b);
    config["policy"] = policy;
    config["policy_sha256"] = sha256_hex(policy);
    if (!predictor.empty()) {
      config["predictor"] = predictor;
      config["predictor_sha256"] = sha256_hex(predictor);
    }
    config["baseline"] = base;
    config["resolved_indicators"] = thresholds;
    if (b.clock == ClockMode::kWall) config["note"] = "wall-clock timings are not reproducible byte-for-byte";
    write_manifest(dir, single ? "rollout" : "bench", config, artifacts);
  }
};

// ---------------------------------------------------------------------------
// predict-timing

struct PredictTiming {
  LatencyOptions latency;
  int h = 10;
  int n_replan = 5;
  double n_eo_avg = 1.54;

  void add(CLI::App& app) {
    CLI::App* c = app.add_subcommand("predict-timing", "closed-form timing table for sync-chunk and streaming");
    latency.add(c);
    c->add_option("--h", h)->check(CLI::PositiveNumber)->capture_default_str();
    c->add_option("--n-replan", n_replan)->check(CLI::PositiveNumber)->capture_default_str();
    c->add_option("--n-eo-avg", n_eo_avg, "mean early-observed actions per horizon")->capture_default_str();
    c->callback([this] { run(); });
  }

  void run() {
    TimingPrediction sync, stream;
    try {
      sync = closed_form(latency.lat, h, n_replan, SchedulerMode::kSyncChunk, n_eo_avg);
      stream = closed_form(latency.lat, h, n_replan, SchedulerMode::kStreaming, n_eo_avg);
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
    std::cout << std::fixed << std::setprecision(2);
    std::cout << std::left << std::setw(12) << "mode" << std::right << std::setw(13) << "T_action_ms" << std::setw(12)
              << "T_halt_ms" << std::setw(10) << "O_ge_ms" << std::setw(10) << "O_oe_ms" << "\n";
    for (const auto& [name, t] : {std::pair{"sync", sync}, std::pair{"streaming", stream}}) {
      std::cout << std::left << std::setw(12) << name << std::right << std::setw(13) << t.T_action << std::setw(12)
                << t.T_halt << std::setw(10) << t.O_ge << std::setw(10) << t.O_oe << "\n";
    }
    std::cout << "speedup T_action " << ratio(sync.T_action, stream.T_action) << "x, T_halt "
              << ratio(sync.T_halt, stream.T_halt) << "x\n";
  }
};

/// Turns FLOWSTREAM_<NAME>=value into "--<name>=value" for options the chosen
/// subcommand defines, placed right after the subcommand so explicit flags
/// (which come later) win. Config-file values only fill options left unset.
std::vector<std::string> with_env_overrides(const CLI::App& app, std::vector<std::string> args) {
  std::size_t pos = 0;
  const CLI::App* sub = nullptr;
  for (; pos < args.size(); ++pos) {
    if (args[pos] == "--config") {
      ++pos;
      continue;
    }
    if (!args[pos].starts_with("-")) {
      try {
        sub = app.get_subcommand(args[pos]);
      } catch (const CLI::OptionNotFound&) {
        sub = nullptr;
      }
      break;
    }
  }
  if (sub == nullptr) return args;
  std::vector<std::string> injected;
  for (char** e = environ; *e != nullptr; ++e) {
    const std::string kv(*e);
    if (!kv.starts_with(kEnvPrefix)) continue;
    const auto eq = kv.find('=');
    if (eq == std::string::npos) continue;
    std::string name = kv.substr(kEnvPrefix.size(), eq - kEnvPrefix.size());
    for (char& ch : name) ch = ch == '_' ? '-' : static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if (sub->get_option_no_throw("--" + name) == nullptr) continue;
    injected.push_back("--" + name + "=" + kv.substr(eq + 1));
  }
  std::sort(injected.begin(), injected.end());
  args.insert(args.begin() + static_cast<std::ptrdiff_t>(pos) + 1, injected.begin(), injected.end());
  return args;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flowstream: streaming flow-matching policies and their runtime"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.set_config("--config", "", "INI/TOML file with per-subcommand sections, e.g. [bench]");
  app.set_help_flag("--help", "print help and exit");
  app.require_subcommand(1);

  GenData gen;
  TrainPolicy train_policy;
  TrainPredictor train_pred;
  BenchCommand rollout, bench;
  PredictTiming timing;
  gen.add(app);
  train_policy.add(app);
  train_pred.add(app);
  rollout.add(app, true);
  bench.add(app, false);
  timing.add(app);

  std::vector<std::string> args(argv + 1, argv + argc);
  args = with_env_overrides(app, std::move(args));
  std::reverse(args.begin(), args.end());  // CLI11 consumes vectors from the back
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code() == ErrorCode::kInvalidArgument ? kExitUsage : kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
