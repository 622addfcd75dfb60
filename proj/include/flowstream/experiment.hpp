#pragma once

// Benchmark matrix over scheduler / early-observation modes.

#include "flowstream/metrics.hpp"
#include "flowstream/trainer.hpp"

namespace flowstream {

inline const std::vector<std::string>& all_bench_modes() {
  static const std::vector<std::string> modes = {"sync", "none", "naive", "random", "anao", "adaptive"};
  return modes;
}

struct BenchConfig {
  EnvKind env;
  StageLatency latency = StageLatency::paper_profile();
  int episodes = 50;
  std::uint64_t seed = 0;
  std::vector<std::string> modes = all_bench_modes();
  double eo_rate = 0.85;  // target firing rate for threshold calibration
  int n_eo = 2;
  int h = 10;
  int n_replan = 5;
  ClockMode clock = ClockMode::kSimulated;
  int calibration_episodes = 20;
  int calibration_refinements = 2;
  std::optional<double> eta;  // fixed threshold instead of calibration
  std::optional<double> p;    // fixed random firing probability instead of matching

  void validate() const {
    require(episodes >= 1, ErrorCode::kInvalidArgument, "episodes must be >= 1");
    require(!modes.empty(), ErrorCode::kInvalidArgument, "no bench modes given");
    require(eo_rate >= 0.0 && eo_rate <= 1.0, ErrorCode::kInvalidArgument, "eo rate must lie in [0, 1]");
    require(calibration_episodes >= 1, ErrorCode::kInvalidArgument, "calibration episodes must be >= 1");
    require(calibration_refinements >= 0, ErrorCode::kInvalidArgument, "calibration refinements must be >= 0");
    std::set<std::string> seen;
    for (const std::string& m : modes) {
      require(std::find(all_bench_modes().begin(), all_bench_modes().end(), m) != all_bench_modes().end(),
              ErrorCode::kInvalidArgument, "unknown bench mode '" + m + "'");
      require(seen.insert(m).second, ErrorCode::kInvalidArgument, "bench mode '" + m + "' listed twice");
    }
    latency.validate();
  }
};

inline nlohmann::json to_json(const BenchConfig& c) {
  nlohmann::json j = {{"env", to_json(c.env)},
                      {"latency", {{"t_obs", c.latency.t_obs}, {"t_gen", c.latency.t_gen},
                                   {"t_exec", c.latency.t_exec}, {"t_pred", c.latency.t_pred}}},
                      {"episodes", c.episodes},
                      {"seed", c.seed},
                      {"modes", c.modes},
                      {"eo_rate", c.eo_rate},
                      {"n_eo", c.n_eo},
                      {"h", c.h},
                      {"n_replan", c.n_replan},
                      {"clock", to_string(c.clock)},
                      {"calibration_episodes", c.calibration_episodes},
                      {"calibration_refinements", c.calibration_refinements}};
  if (c.eta) j["eta"] = *c.eta;
  if (c.p) j["p"] = *c.p;
  return j;
}

inline SchedulerConfig scheduler_for(const std::string& mode, const BenchConfig& b) {
  SchedulerConfig s;
  s.h = b.h;
  s.n_replan = b.n_replan;
  s.n_eo = b.n_eo;
  s.seed = b.seed;
  if (mode == "sync") {
    s.mode = SchedulerMode::kSyncChunk;
  } else if (mode != "none") {
    s.eo.mode = parse_eo_mode(mode);
  }
  return s;
}

struct ModeOutcome {
  std::string name;
  SchedulerConfig scheduler;
  std::vector<EpisodeResult> episodes;
  ConfigReports reports;
  double success_rate = 0.0;
  double eo_rate = 0.0;  // fired / decisions, pooled over episodes
};

inline double pooled_eo_rate(std::span<const EpisodeResult> eps) {
  long dec = 0, fired = 0;
  for (const EpisodeResult& e : eps) {
    dec += e.eo_decisions;
    fired += e.eo_fired;
  }
  return dec == 0 ? 0.0 : static_cast<double>(fired) / static_cast<double>(dec);
}

/// Threshold reaching `rate` on decision-point scores. The first pass uses
/// non-firing episodes; later passes re-collect scores with the current
/// threshold active, since firing shifts the states seen at later decisions.
/// Calibration episodes are seeded apart from the evaluation episodes.
template <class Policy>
double calibrate_eta(const Policy& policy, const PredictorModel* predictor, const BenchConfig& b, EoMode mode) {
  SchedulerConfig s = scheduler_for(to_string(mode), b);
  s.eo.eta = -1.0;  // scores are never negative, so nothing fires
  const std::uint64_t cal_seed = Rng(b.seed, 0xca1).next_u64();
  for (int pass = 0; pass <= b.calibration_refinements; ++pass) {
    const EvalSummary cal =
        evaluate(policy, b.env, b.calibration_episodes, cal_seed, b.latency, s, predictor, ClockMode::kSimulated);
    std::vector<double> scores;
    for (const EpisodeResult& e : cal.episodes) scores.insert(scores.end(), e.eo_scores.begin(), e.eo_scores.end());
    require(!scores.empty(), ErrorCode::kEmptyInput, "calibration episodes produced no decision points");
    s.eo.eta = calibrate_threshold(std::move(scores), b.eo_rate);
  }
  return s.eo.eta;
}

template <class Policy>
ModeOutcome run_mode(const Policy& policy, const PredictorModel* predictor, const BenchConfig& b,
                     const std::string& name, const SchedulerConfig& sched) {
  ModeOutcome out;
  out.name = name;
  out.scheduler = sched;
  EvalSummary ev = evaluate(policy, b.env, b.episodes, b.seed, b.latency, sched, predictor, b.clock);
  out.episodes = std::move(ev.episodes);
  out.success_rate = ev.success_rate;
  out.eo_rate = pooled_eo_rate(out.episodes);
  out.reports.name = name;
  for (const EpisodeResult& e : out.episodes) out.reports.reports.push_back(measure(e));
  return out;
}

/// Runs every requested mode. Thresholds for anao/adaptive are calibrated to
/// the target rate; random fires with the rate adaptive actually achieved
/// (or the target rate when adaptive is not part of the run).
template <class Policy>
std::vector<ModeOutcome> run_bench(const Policy& policy, const PredictorModel* predictor, const BenchConfig& b) {
  b.validate();
  const bool wants_adaptive = std::find(b.modes.begin(), b.modes.end(), "adaptive") != b.modes.end();
  require(!wants_adaptive || predictor != nullptr, ErrorCode::kInvalidArgument,
          "adaptive early observation needs a predictor");
  std::map<std::string, ModeOutcome> done;
  auto run_named = [&](const std::string& m) {
    SchedulerConfig s = scheduler_for(m, b);
    if (m == "anao" || m == "adaptive") {
      s.eo.eta = b.eta ? *b.eta : calibrate_eta(policy, predictor, b, s.eo.mode);
    }
    if (m == "random") {
      s.eo.p = b.p ? *b.p : (done.contains("adaptive") ? done.at("adaptive").eo_rate : b.eo_rate);
    }
    done.emplace(m, run_mode(policy, predictor, b, m, s));
  };
  if (wants_adaptive) run_named("adaptive");
  for (const std::string& m : b.modes) {
    if (!done.contains(m)) run_named(m);
  }
  std::vector<ModeOutcome> out;
  for (const std::string& m : b.modes) out.push_back(std::move(done.at(m)));
  return out;
}

}  // namespace flowstream
