// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>

#include "test_support.hpp"

using namespace flowstream;

namespace {

int failures = 0;

void report(int id, bool ok, const std::string& detail) {
  std::printf("%s criterion %d: %s\n", ok ? "PASS" : "FAIL", id, detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

bool near(double a, double b, double tol) { return std::abs(a - b) <= tol; }

bool within_rel(double measured, double expected, double rel) {
  return expected == 0.0 ? measured == 0.0 : std::abs(measured - expected) <= rel * std::abs(expected);
}

// ---------------------------------------------------------------------------

void closed_forms() {
  const StageLatency s = StageLatency::paper_profile();
  const TimingPrediction sync = closed_form(s, 10, 5, SchedulerMode::kSyncChunk, 0.0);
  const TimingPrediction st = closed_form(s, 10, 5, SchedulerMode::kStreaming, 1.54);
  const bool ok = near(sync.T_action, 74.6, 0.05) && near(sync.T_halt, 238.0, 0.05) && near(st.O_ge, 162.0, 0.05) &&
                  near(st.O_oe, 41.58, 0.05) && near(st.T_action, 30.44, 0.05) && near(st.T_halt, 34.42, 0.05);
  report(1, ok,
         fmt("sync T_action=%.3f T_halt=%.3f; streaming O_ge=%.3f O_oe=%.3f T_action=%.3f T_halt=%.3f; "
             "speedups %.2fx / %.2fx",
             sync.T_action, sync.T_halt, st.O_ge, st.O_oe, st.T_action, st.T_halt, sync.T_action / st.T_action,
             sync.T_halt / st.T_halt));
}

void simulated_fidelity() {
  const auto t0 = std::chrono::steady_clock::now();
  const StageLatency s = StageLatency::paper_profile();
  const fstest::ConstantPolicy policy;
  EnvKind kind = EnvKind::direct();
  kind.episode_cap = 200;  // 20 horizons
  EnvState init;
  init.position = Vec2(-3.0, -3.0);
  init.goal = Vec2(1.5, 2.5);
  bool ok = true;
  std::string detail;
  for (const auto& [eo, n_eo_avg] : {std::pair{EoMode::kNone, 0.0}, std::pair{EoMode::kNaive, 2.0}}) {
    SchedulerConfig cfg;
    cfg.eo.mode = eo;
    const EpisodeResult r = run_episode(policy, nullptr, kind, init, s, cfg);
    const MetricsReport m = measure(r);
    const TimingPrediction p = closed_form(s, 10, 5, SchedulerMode::kStreaming, n_eo_avg);
    const bool this_ok = m.num_horizons == 20 && near(m.steady_T_action, p.T_action, s.t_exec) &&
                         near(m.T_halt, p.T_halt, s.t_exec) && within_rel(m.O_ge, p.O_ge, 0.05) &&
                         within_rel(m.O_oe, p.O_oe, 0.05);
    ok = ok && this_ok;
    detail += fmt("[eo=%s: T_action %.2f vs %.2f, T_halt %.2f vs %.2f, O_ge %.2f vs %.2f, O_oe %.2f vs %.2f] ",
                  to_string(eo), m.steady_T_action, p.T_action, m.T_halt, p.T_halt, m.O_ge, p.O_ge, m.O_oe, p.O_oe);
  }
  const double secs = seconds_since(t0);
  report(2, ok && secs < 1.0, detail + fmt("runtime %.3fs", secs));
}

void marginal_contraction() {
  const FlowParams fp;  // k = 5, sigma0^2 = 0.16
  const int n = 10000, steps = 10000;
  const double dt = 1.0 / steps;
  auto xi = [](double t) { return 0.5 * std::sin(4.0 * t) + t; };
  auto xi_dot = [](double t) { return 2.0 * std::cos(4.0 * t) + 1.0; };
  Rng rng(2024);
  std::vector<double> x(n);
  for (double& v : x) v = xi(0.0) + fp.sigma0 * rng.normal();
  bool ok = true;
  std::string detail;
  const std::vector<int> checkpoints = {steps / 4, steps / 2, steps};
  std::size_t next = 0;
  for (int s = 1; s <= steps; ++s) {
    const double t = (s - 1) * dt;
    const double drift_xi = xi_dot(t), at = xi(t);
    for (double& v : x) v += (drift_xi - fp.k * (v - at)) * dt;
    if (next < checkpoints.size() && s == checkpoints[next]) {
      double mean = 0.0, sq = 0.0;
      for (double v : x) mean += v;
      mean /= n;
      for (double v : x) sq += (v - mean) * (v - mean);
      const double var = sq / (n - 1);
      const double expect = fp.sigma0 * fp.sigma0 * std::exp(-2.0 * fp.k * s * dt);
      const double rel = std::abs(var / expect - 1.0);
      ok = ok && rel <= 0.05;
      detail += fmt("t=%.2f var=%.4e expected=%.4e rel=%.4f; ", s * dt, var, expect, rel);
      ++next;
    }
  }
  report(3, ok, detail);
}

// Rounding gap in units of the last place of the largest operand, so cancellation near zero is not inflated.
double scaled_ulps(double lhs, double rhs, double magnitude) {
  const double m = std::max({std::abs(lhs), std::abs(rhs), magnitude});
  return std::abs(lhs - rhs) / (std::nextafter(m, INFINITY) - m);
}

void additivity() {
  Rng rng(77);
  double worst = 0;
  for (int i = 0; i < 100000; ++i) {
    const NormStats s = NormStats::from_extrema(Vec2(rng.uniform(-6, 0), rng.uniform(-6, 0)),
                                                Vec2(rng.uniform(0.1, 6), rng.uniform(0.1, 6)));
    const Vec x = Vec2(rng.uniform(-5, 5), rng.uniform(-5, 5));
    const Vec a = Vec2(rng.uniform(-1, 1), rng.uniform(-1, 1));
    const Vec lhs = normalize(x, s) + normalize(a, s);
    const Vec rhs = normalize(Vec(x + a), s);
    const Vec nx = normalize(x, s), na = normalize(a, s);
    for (int d = 0; d < 2; ++d)
      worst = std::max(worst, scaled_ulps(lhs[d], rhs[d], std::max(std::abs(nx[d]), std::abs(na[d]))));
  }
  const NormStats asym = NormStats::from_extrema(Vec::Constant(1, 0.0), Vec::Constant(1, 2.0));
  const double legacy_gap = std::abs(normalize_legacy(Vec::Constant(1, 0.2), asym)[0] +
                                     normalize_legacy(Vec::Constant(1, 0.3), asym)[0] -
                                     normalize_legacy(Vec::Constant(1, 0.5), asym)[0]);
  report(4, worst <= 4 && legacy_gap > 0.1,
         fmt("scale-only worst %.2f ulp over 1e5 cases; legacy violation %.3f on range [0,2]", worst, legacy_gap));
}

void gradient_checks() {
  Rng rng(5);
  VelocityModel vm = VelocityModel::create(2, 7, {16, 12}, rng);
  for (Eigen::Index i = 0; i < vm.params.size(); ++i) vm.params[i] = 0.5 * rng.normal();
  std::vector<FlowSample> fb;
  for (int i = 0; i < 8; ++i) {
    FlowSample s;
    s.x = ActionState{rng.normal(), rng.normal()};
    s.t = rng.uniform();
    s.obs_feat = Vec(7);
    for (int j = 0; j < 7; ++j) s.obs_feat[j] = rng.normal();
    s.target = Velocity{rng.normal(), rng.normal()};
    fb.push_back(s);
  }
  const double e1 = fstest::max_relative_error(
      loss_and_grad(vm, fb).grads, fstest::numeric_gradient(
                                       [&](const Vec& p) {
                                         VelocityModel q = vm;
                                         q.params = p;
                                         return loss_and_grad(q, fb).loss;
                                       },
                                       vm.params));

  PredictorModel::Options opt;
  opt.hidden = {16, 12};
  opt.cond_hidden = 8;
  opt.embed_dim = 8;
  PredictorModel pm = PredictorModel::create(opt, rng);
  for (Eigen::Index i = 0; i < pm.params.size(); ++i) pm.params[i] = 0.4 * rng.normal();
  std::vector<SaliencySample> sb;
  for (int i = 0; i < 6; ++i) {
    Observation a, b;
    for (int j = 0; j < 7; ++j) {
      a.raw_features.push_back(rng.uniform(-4, 4));
      b.raw_features.push_back(rng.uniform(-4, 4));
    }
    SaliencySample s;
    s.early = encode(pm, a);
    s.late = encode(pm, b);
    for (int g = 0; g <= i % 3; ++g) s.actions.push_back(Vec2(0.2 * rng.normal(), 0.2 * rng.normal()));
    sb.push_back(s);
  }
  const double e2 = fstest::max_relative_error(
      predictor_loss_and_grad(pm, sb).grads, fstest::numeric_gradient(
                                                 [&](const Vec& p) {
                                                   PredictorModel q = pm;
                                                   q.params = p;
                                                   return predictor_loss_and_grad(q, sb).loss;
                                                 },
                                                 pm.params));
  report(5, e1 < 1e-4 && e2 < 1e-4,
         fmt("velocity net max rel err %.2e (%zu params); saliency predictor %.2e (%zu params)", e1,
             static_cast<std::size_t>(vm.params.size()), e2, static_cast<std::size_t>(pm.params.size())));
}

// ---------------------------------------------------------------------------
// Trained-policy criteria

constexpr int kPolicyIterations = 6000;
constexpr int kEvalEpisodes = 100;
constexpr std::uint64_t kEvalSeed = 1000;

struct Trained {
  FlowPolicy policy;
  double success = 0.0;
  double secs = 0.0;
};

Trained train_and_eval(const Dataset& ds, const EnvKind& kind, bool aligned) {
  const auto t0 = std::chrono::steady_clock::now();
  TrainConfig cfg;
  cfg.iterations = kPolicyIterations;
  cfg.use_state_alignment = aligned;
  Trained t;
  t.policy = train(ds, cfg).policy;
  t.secs = seconds_since(t0);
  t.success = evaluate(t.policy, kind, kEvalEpisodes, kEvalSeed).success_rate;
  return t;
}

struct BenchResult {
  std::map<std::string, ModeOutcome> modes;
  const ModeOutcome& at(const std::string& m) const { return modes.at(m); }
};

BenchResult bench(const FlowPolicy& policy, const PredictorModel* predictor, BenchConfig b) {
  BenchResult r;
  for (ModeOutcome& o : run_bench(policy, predictor, b)) r.modes.emplace(o.name, std::move(o));
  return r;
}

double mean_T_halt(const ModeOutcome& o) {
  double s = 0.0;
  for (const MetricsReport& m : o.reports.reports) s += m.T_halt;
  return s / static_cast<double>(o.reports.reports.size());
}

bool ledger_holds(const EpisodeResult& e) {
  ActionState acc = e.alpha0;
  for (const ActionVector& a : e.executed) acc = acc + a;
  return acc == e.final_alpha;
}

bool executes_disjoint(const EpisodeResult& e) {
  std::vector<std::pair<double, double>> ex;
  for (const TimelineEvent& ev : e.events) {
    if (ev.stage == Stage::kExecute) ex.emplace_back(ev.start, ev.end);
  }
  std::sort(ex.begin(), ex.end());
  for (std::size_t i = 1; i < ex.size(); ++i) {
    if (ex[i].first < ex[i - 1].second) return false;
  }
  return ex.size() == e.executed.size();
}

}  // namespace

int main() {
  const auto start = std::chrono::steady_clock::now();
  closed_forms();
  simulated_fidelity();
  marginal_contraction();
  additivity();
  gradient_checks();

  const Dataset direct_ds = fstest::demo_dataset(EnvKind::direct(), 200, 1);
  const Dataset controller_ds = fstest::demo_dataset(EnvKind::controller(), 200, 2);
  const Trained direct = train_and_eval(direct_ds, EnvKind::direct(), true);
  const Trained controller = train_and_eval(controller_ds, EnvKind::controller(), true);
  report(6, direct.success >= 0.95 && controller.success >= 0.90,
         fmt("Direct %.0f%%, Controller %.0f%% over %d zero-latency episodes after %d iterations (%.0fs, %.0fs)",
             100 * direct.success, 100 * controller.success, kEvalEpisodes, kPolicyIterations, direct.secs,
             controller.secs));

  const Trained unaligned = train_and_eval(controller_ds, EnvKind::controller(), false);
  const double drop = 100.0 * (controller.success - unaligned.success);
  report(7, drop >= 15.0,
         fmt("Controller aligned %.0f%% vs without alignment %.0f%% (drop %.0f points)", 100 * controller.success,
             100 * unaligned.success, drop));

  // Early-observation ordering on a tight step budget: at the default cap
  // every mode finishes the task and the comparison is uninformative.
  PredictorTrainConfig pcfg;
  const PredictorModel predictor = train_predictor(direct_ds.episodes, pcfg).model;
  BenchConfig eo;
  eo.env = EnvKind::direct();
  eo.env.episode_cap = 45;
  eo.episodes = 200;
  eo.seed = 4242;
  eo.modes = {"none", "naive", "random", "adaptive"};
  const BenchResult eo_run = bench(direct.policy, &predictor, eo);
  const double s_ad = 100 * eo_run.at("adaptive").success_rate, s_rand = 100 * eo_run.at("random").success_rate,
               s_naive = 100 * eo_run.at("naive").success_rate;
  const double halt_none = mean_T_halt(eo_run.at("none")), halt_ad = mean_T_halt(eo_run.at("adaptive"));
  report(8, s_ad >= s_rand - 2.0 && s_rand >= s_naive - 2.0 && halt_ad <= 0.5 * halt_none,
         fmt("success adaptive %.1f, random %.1f, naive %.1f (none %.1f) at EO rates %.3f / %.3f / 1; "
             "T_halt adaptive %.2f vs no-EO %.2f (ratio %.3f)",
             s_ad, s_rand, s_naive, 100 * eo_run.at("none").success_rate, eo_run.at("adaptive").eo_rate,
             eo_run.at("random").eo_rate, halt_ad, halt_none, halt_ad / halt_none));

  BenchConfig fl;
  fl.env = EnvKind::direct();
  fl.episodes = 50;
  fl.seed = 99;
  fl.modes = {"sync", "none"};
  const BenchResult fl_run = bench(direct.policy, nullptr, fl);
  const double halt_sync = mean_T_halt(fl_run.at("sync")), halt_stream = mean_T_halt(fl_run.at("none"));
  report(9, halt_sync >= 3.0 * halt_stream,
         fmt("T_halt sync %.2f ms vs streaming %.2f ms (%.2fx)", halt_sync, halt_stream, halt_sync / halt_stream));

  // Ledger: every simulated episode above plus wall-clock episodes.
  std::size_t sim_eps = 0, sim_bad = 0;
  for (const BenchResult* br : {&eo_run, &fl_run}) {
    for (const auto& [name, o] : br->modes) {
      for (const EpisodeResult& e : o.episodes) {
        ++sim_eps;
        sim_bad += !ledger_holds(e) || !executes_disjoint(e);
      }
    }
  }
  BenchConfig wall;
  wall.env = EnvKind::direct();
  wall.env.episode_cap = 60;
  wall.episodes = 3;
  wall.seed = 7;
  wall.clock = ClockMode::kWall;
  wall.latency = StageLatency{5.8, 1.8, 2.7, 0.1};
  wall.calibration_episodes = 3;
  wall.modes = {"sync", "none", "naive", "adaptive"};
  const BenchResult wall_run = bench(direct.policy, &predictor, wall);
  std::size_t wall_eps = 0, wall_bad = 0;
  for (const auto& [name, o] : wall_run.modes) {
    for (const EpisodeResult& e : o.episodes) {
      ++wall_eps;
      wall_bad += !ledger_holds(e) || !executes_disjoint(e) || !e.diagnostic.empty();
    }
  }
  report(10, sim_bad == 0 && wall_bad == 0 && wall_eps > 0,
         fmt("simulated %zu episodes, %zu violations; wall-clock %zu episodes, %zu violations", sim_eps, sim_bad,
             wall_eps, wall_bad));

  std::printf("%d of 10 criteria failed (%.0fs total)\n", failures, seconds_since(start));
  return failures == 0 ? 0 : 1;
}
