#pragma once

// Flow-matching training on demonstration windows of h actions, each anchored
// at the dataset's accumulated action state for its start index, plus
// closed-loop evaluation of the resulting policy.

#include <chrono>
#include <functional>
#include <iomanip>
#include <sstream>

#include "flowstream/streamexec.hpp"
#include "flowstream/velocitynet.hpp"

namespace flowstream {

struct TrainConfig {
  FlowParams flow;
  int iterations = 20000;
  int batch_size = 64;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  bool use_modified_norm = true;
  bool use_state_alignment = true;
  std::vector<int> hidden = {128, 128};
  int log_every = 100;
  double obs_scale = 0.2;

  void validate() const {
    flow.validate();
    require(iterations >= 1, ErrorCode::kInvalidArgument, "iterations must be >= 1");
    require(batch_size >= 1, ErrorCode::kInvalidArgument, "batch size must be >= 1");
    require(learning_rate > 0.0 && std::isfinite(learning_rate), ErrorCode::kInvalidArgument,
            "learning rate must be positive");
    require(log_every >= 1, ErrorCode::kInvalidArgument, "log interval must be >= 1");
    require(!hidden.empty(), ErrorCode::kInvalidArgument, "need at least one hidden layer");
    for (int w : hidden) require(w >= 1, ErrorCode::kInvalidArgument, "hidden widths must be >= 1");
  }

  NormScheme scheme() const { return use_modified_norm ? NormScheme::kScaleOnly : NormScheme::kLegacy; }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"h", c.flow.h},
          {"k", c.flow.k},
          {"sigma0", c.flow.sigma0},
          {"iterations", c.iterations},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"seed", c.seed},
          {"use_modified_norm", c.use_modified_norm},
          {"use_state_alignment", c.use_state_alignment},
          {"hidden", c.hidden},
          {"log_every", c.log_every},
          {"obs_scale", c.obs_scale}};
}

/// h consecutive demonstrated actions with the observation and action state
/// (physical units) at their start.
struct Window {
  std::size_t episode = 0;
  std::size_t start = 0;
  Observation observation;
  ActionState alpha;
  std::vector<ActionVector> actions;
};

/// Uniform sampler over (episode, start) among episodes with at least h actions.
class WindowSampler {
 public:
  WindowSampler(std::span<const Trajectory> data, int h, bool use_state_alignment)
      : data_(data), h_(h), aligned_(use_state_alignment) {
    require(h >= 1, ErrorCode::kInvalidArgument, "h must be >= 1");
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (data[i].actions.size() >= static_cast<std::size_t>(h)) eligible_.push_back(i);
    }
    require(!eligible_.empty(), ErrorCode::kEmptyInput,
            "no trajectory has at least h=" + std::to_string(h) + " actions");
  }

  Window operator()(Rng& rng) const {
    const std::size_t ep = eligible_[rng.uniform_int(eligible_.size())];
    const Trajectory& t = data_[ep];
    const std::size_t s = rng.uniform_int(t.actions.size() - static_cast<std::size_t>(h_) + 1);
    Window w;
    w.episode = ep;
    w.start = s;
    w.observation = t.observations[s];
    w.alpha = aligned_ ? t.action_states[s] : ActionState::zero(t.action_states[s].size());
    w.actions.assign(t.actions.begin() + static_cast<std::ptrdiff_t>(s),
                     t.actions.begin() + static_cast<std::ptrdiff_t>(s) + h_);
    return w;
  }

 private:
  std::span<const Trajectory> data_;
  int h_;
  bool aligned_;
  std::vector<std::size_t> eligible_;
};

inline Window sample_subtrajectory(std::span<const Trajectory> data, int h, Rng& rng, bool use_state_alignment = true) {
  return WindowSampler(data, h, use_state_alignment)(rng);
}

/// Normalized action states along the window: the first is the normalized
/// window anchor (zero without alignment), then one exact step per action.
inline SubTrajectory window_states(const Window& w, const NormStats& stats, NormScheme scheme, bool aligned) {
  SubTrajectory sub;
  sub.observation = w.observation;
  sub.start_index = w.start;
  sub.states.reserve(w.actions.size() + 1);
  sub.states.push_back(aligned ? ActionState(to_normalized(w.alpha.values(), stats, scheme))
                               : ActionState::zero(w.alpha.size()));
  for (const ActionVector& a : w.actions) {
    sub.states.push_back(sub.states.back() + ActionVector(to_normalized(a.values(), stats, scheme)));
  }
  return sub;
}

/// Noisy regression sample for one window: t ~ U[0, 1), T = floor(t h).
inline FlowSample make_flow_sample(const SubTrajectory& sub, const FlowParams& fp, const Vec& obs_feat, Rng& rng) {
  const double t = rng.uniform();
  const int T = std::min(static_cast<int>(std::floor(t * fp.h)), fp.h - 1);
  const double tau = static_cast<double>(T) / fp.h;
  const ActionState& mean = sub.states[static_cast<std::size_t>(T)];
  FlowSample s;
  s.x = marginal_sample(mean, fp, tau, rng);
  s.t = tau;
  s.obs_feat = obs_feat;
  s.target = target_velocity(mean, discrete_xi_dot(sub, T, fp.h), s.x, fp.k);
  return s;
}

struct TrainLogRow {
  int iteration = 0;
  double loss = 0.0;  // mean over the logging interval
  double wall_ms = 0.0;
};

struct TrainResult {
  FlowPolicy policy;
  TrainingState state;
  std::vector<TrainLogRow> log;
};

/// Policy shell for `data`: normalization fitted on the union of actions and
/// action states, fresh network.
inline FlowPolicy make_policy(std::span<const Trajectory> data, const TrainConfig& cfg, AlphaInit alpha_init) {
  require(!data.empty(), ErrorCode::kEmptyInput, "empty dataset");
  FlowPolicy p;
  p.stats = fit_stats(data);
  p.flow = cfg.flow;
  p.scheme = cfg.scheme();
  p.alpha_init = alpha_init;
  p.obs_scale = cfg.obs_scale;
  const int dim = static_cast<int>(data.front().actions.front().size());
  const int obs_dim = static_cast<int>(data.front().observations.front().raw_features.size());
  Rng rng(cfg.seed, 0x1417);
  p.model = VelocityModel::create(dim, obs_dim, cfg.hidden, rng);
  return p;
}

/// One optimizer step on a batch of windows. Returns the batch loss.
inline double training_step(FlowPolicy& policy, OptimizerState& opt, std::span<const Window> batch,
                            const TrainConfig& cfg, Rng& rng) {
  std::vector<FlowSample> samples;
  samples.reserve(batch.size());
  for (const Window& w : batch) {
    const SubTrajectory sub = window_states(w, policy.stats, policy.scheme, cfg.use_state_alignment);
    samples.push_back(make_flow_sample(sub, policy.flow, policy.features(w.observation), rng));
  }
  LossGrad lg = loss_and_grad(policy.model, samples);
  if (!std::isfinite(lg.loss) || !lg.grads.allFinite()) {
    throw Error(ErrorCode::kNonFiniteLoss, "non-finite loss or gradient at optimizer step " +
                                               std::to_string(opt.step + 1));
  }
  adam_step(policy.model.params, lg.grads, opt);
  return lg.loss;
}

inline AlphaInit alpha_init_of(const Dataset& ds) {
  const auto env = ds.metadata.find("env");
  if (env != ds.metadata.end() && env->contains("alpha_init") &&
      (*env)["alpha_init"] == to_string(AlphaInit::kInitialPosition)) {
    return AlphaInit::kInitialPosition;
  }
  return AlphaInit::kZero;
}

using TrainProgress = std::function<void(const TrainLogRow&)>;

/// Runs until `cfg.iterations` optimizer steps have been taken in total. With
/// `resume`, continues from its parameters and optimizer state; every
/// iteration draws from its own substream, so a resumed run matches an
/// uninterrupted one exactly.
inline TrainResult train(const Dataset& ds, const TrainConfig& cfg, const LoadedPolicy* resume = nullptr,
                         const TrainProgress& progress = {}) {
  cfg.validate();
  require(!ds.episodes.empty(), ErrorCode::kEmptyInput, "dataset has no episodes");
  const WindowSampler sampler(ds.episodes, cfg.flow.h, cfg.use_state_alignment);
  TrainResult r;
  r.policy = make_policy(ds.episodes, cfg, alpha_init_of(ds));
  r.state.seed = cfg.seed;
  r.state.optimizer = OptimizerState::for_params(r.policy.model.net.num_params(), cfg.learning_rate);
  if (resume) {
    require(resume->training.has_value(), ErrorCode::kInvalidArgument, "checkpoint has no optimizer state to resume");
    require(resume->training->seed == cfg.seed, ErrorCode::kInvalidArgument, "resume seed differs from checkpoint");
    require(resume->policy.stats == r.policy.stats, ErrorCode::kInvalidArgument,
            "dataset normalization differs from the checkpoint");
    require(resume->policy.model.net.hidden() == cfg.hidden && resume->policy.flow == cfg.flow &&
                resume->policy.scheme == cfg.scheme(),
            ErrorCode::kInvalidArgument, "checkpoint architecture or flow settings differ from the config");
    r.policy = resume->policy;
    r.state = *resume->training;
  }
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<Window> batch(static_cast<std::size_t>(cfg.batch_size));
  double acc = 0.0;
  int acc_n = 0;
  const Rng base(cfg.seed, 0x7a11);
  for (auto it = static_cast<int>(r.state.optimizer.step); it < cfg.iterations; ++it) {
    Rng rng = base.derive(static_cast<std::uint64_t>(it));
    for (Window& w : batch) w = sampler(rng);
    acc += training_step(r.policy, r.state.optimizer, batch, cfg, rng);
    ++acc_n;
    if ((it + 1) % cfg.log_every == 0 || it + 1 == cfg.iterations) {
      const TrainLogRow row{
          it + 1, acc / acc_n,
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count()};
      r.log.push_back(row);
      if (progress) progress(row);
      acc = 0.0;
      acc_n = 0;
    }
  }
  return r;
}

inline std::string train_log_csv(std::span<const TrainLogRow> log) {
  std::ostringstream os;
  os << "iteration,loss,wall_ms\n" << std::setprecision(10);
  for (const TrainLogRow& r : log) os << r.iteration << ',' << r.loss << ',' << r.wall_ms << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalSummary {
  double success_rate = 0.0;
  double mean_endpoint_error = 0.0;
  std::vector<EpisodeResult> episodes;
};

/// Closed-loop rollouts. Defaults to zero latency and streaming without early
/// observation, which measures policy quality alone.
template <class Policy>
EvalSummary evaluate(const Policy& policy, const EnvKind& kind, int episodes, std::uint64_t seed,
                     const StageLatency& latency = StageLatency::zero(), std::optional<SchedulerConfig> sched = {},
                     const PredictorModel* predictor = nullptr, ClockMode clock = ClockMode::kSimulated) {
  require(episodes >= 1, ErrorCode::kInvalidArgument, "need at least one evaluation episode");
  SchedulerConfig cfg = sched.value_or(SchedulerConfig{});
  if (!sched) cfg.h = policy.horizon();
  EvalSummary s;
  for (int e = 0; e < episodes; ++e) {
    const auto ue = static_cast<std::uint64_t>(e);
    EpisodeResult r = run_episode(policy, predictor, kind, episode_initial_state(kind, seed, ue), latency,
                                  for_episode(cfg, ue), clock);
    s.success_rate += r.success ? 1.0 : 0.0;
    s.mean_endpoint_error += r.endpoint_error();
    s.episodes.push_back(std::move(r));
  }
  s.success_rate /= episodes;
  s.mean_endpoint_error /= episodes;
  return s;
}

}  // namespace flowstream
