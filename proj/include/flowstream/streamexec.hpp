#pragma once

// Episode runtime. Three stages (observe, generate, execute) run either as a
// deterministic discrete-event simulation or as real threads with sleeps
// standing in for stage latency. Both produce the same kind of event log.
//
// Streaming mode keeps one running action-space state for the whole episode,
// generates one action per flow step and lets generation run ahead of
// execution. Sync-chunk mode observes, generates a full chunk, then executes
// its first n_replan actions before observing again.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <map>
#include <mutex>
#include <optional>
#include <queue>
#include <set>
#include <thread>
#include <tuple>

#include "flowstream/envsim.hpp"
#include "flowstream/saliency.hpp"

namespace flowstream {

struct StageLatency {
  double t_obs = 0.0;   // observation processing, ms
  double t_gen = 0.0;   // per generated action, ms
  double t_exec = 0.0;  // per executed action, ms
  double t_pred = 0.0;  // one saliency-predictor call, ms

  /// Stage durations consistent with the published runtime breakdown.
  static StageLatency paper_profile() { return {58.0, 18.0, 27.0, 1.0}; }
  static StageLatency zero() { return {}; }

  void validate() const {
    for (double v : {t_obs, t_gen, t_exec, t_pred}) {
      require(std::isfinite(v) && v >= 0.0, ErrorCode::kInvalidArgument, "stage latencies must be finite and >= 0");
    }
  }
};

enum class SchedulerMode : std::uint8_t { kSyncChunk, kStreaming };

inline const char* to_string(SchedulerMode m) { return m == SchedulerMode::kSyncChunk ? "sync" : "streaming"; }

inline SchedulerMode parse_scheduler_mode(const std::string& s) {
  if (s == "sync") return SchedulerMode::kSyncChunk;
  if (s == "streaming") return SchedulerMode::kStreaming;
  throw Error(ErrorCode::kInvalidArgument, "unknown scheduler mode '" + s + "'");
}

struct SchedulerConfig {
  SchedulerMode mode = SchedulerMode::kStreaming;
  int h = 10;
  int n_replan = 5;  // sync-chunk only
  Indicator eo;      // EoMode::kNone disables early observation
  int n_eo = 2;      // actions left in the horizon when the early observation may start
  std::uint64_t seed = 0;

  bool eo_active() const { return eo.mode != EoMode::kNone; }

  void validate() const {
    require(h >= 1, ErrorCode::kInvalidArgument, "h must be >= 1");
    require(n_replan >= 1 && n_replan <= h, ErrorCode::kInvalidArgument, "n_replan must lie in [1, h]");
    if (eo_active()) {
      require(mode == SchedulerMode::kStreaming, ErrorCode::kInvalidArgument,
              "early observation needs the streaming scheduler");
      require(n_eo >= 1 && n_eo < h, ErrorCode::kInvalidArgument, "n_eo must lie in [1, h)");
      eo.validate();
    }
  }
};

enum class Stage : std::uint8_t { kObserve = 0, kGenerate = 1, kExecute = 2, kPredict = 3 };

inline const char* to_string(Stage s) {
  switch (s) {
    case Stage::kObserve: return "Observe";
    case Stage::kGenerate: return "Generate";
    case Stage::kExecute: return "Execute";
    case Stage::kPredict: return "Predict";
  }
  return "?";
}

inline Stage parse_stage(const std::string& s) {
  for (Stage st : {Stage::kObserve, Stage::kGenerate, Stage::kExecute, Stage::kPredict}) {
    if (s == to_string(st)) return st;
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown stage '" + s + "'");
}

struct TimelineEvent {
  Stage stage = Stage::kObserve;
  std::int64_t action_index = 0;
  std::int64_t horizon_index = 0;
  double start = 0.0;  // ms
  double end = 0.0;

  friend bool operator==(const TimelineEvent&, const TimelineEvent&) = default;
};

inline bool event_order(const TimelineEvent& a, const TimelineEvent& b) {
  return std::tie(a.start, a.stage, a.action_index, a.end) < std::tie(b.start, b.stage, b.action_index, b.end);
}

enum class ClockMode : std::uint8_t { kSimulated, kWall };

inline const char* to_string(ClockMode c) { return c == ClockMode::kSimulated ? "simulated" : "wall"; }

inline ClockMode parse_clock_mode(const std::string& s) {
  if (s == "simulated") return ClockMode::kSimulated;
  if (s == "wall") return ClockMode::kWall;
  throw Error(ErrorCode::kInvalidArgument, "unknown clock mode '" + s + "'");
}

struct EpisodeResult {
  bool success = false;
  std::string diagnostic;  // set when the episode was aborted
  std::vector<TimelineEvent> events;
  std::vector<ActionVector> executed;  // normalized, in execution order
  ActionState alpha0;
  ActionState final_alpha;  // alpha0 plus every executed action, left to right
  EnvState final_state;
  int eo_decisions = 0;
  int eo_fired = 0;
  std::vector<double> eo_scores;  // indicator scores (anao / adaptive)

  double endpoint_error() const { return (final_state.position - final_state.goal).norm(); }
  double eo_rate() const { return eo_decisions == 0 ? 0.0 : static_cast<double>(eo_fired) / eo_decisions; }
};

struct EoDecision {
  bool fire = false;
  std::optional<double> score;
};

/// Applies the indicator to the pending actions (physical units) at a decision point.
inline EoDecision decide_early_observation(const Indicator& ind, const PredictorModel* predictor,
                                           const Observation& now, std::span<const Vec> remaining, Rng& coin) {
  switch (ind.mode) {
    case EoMode::kNone: return {false, std::nullopt};
    case EoMode::kNaive: return {true, std::nullopt};
    case EoMode::kRandom: return {coin.uniform() < ind.p, std::nullopt};
    case EoMode::kActionNorm: {
      const double s = action_norm_score(remaining);
      return {s <= ind.eta, s};
    }
    case EoMode::kAdaptive: {
      require(predictor != nullptr, ErrorCode::kInvalidArgument, "adaptive early observation needs a predictor");
      const double s = saliency_score(*predictor, now, remaining);
      return {s <= ind.eta, s};
    }
  }
  return {false, std::nullopt};
}

/// Episode ends on success, on the step cap, or at the workspace boundary.
inline bool episode_over(const EnvKind& kind, const EnvState& s) {
  return success(s) || s.step_count >= kind.episode_cap || at_workspace_edge(s);
}

namespace detail {

template <class Policy>
void check_episode_args(const Policy& policy, const PredictorModel* predictor, const StageLatency& lat,
                        const SchedulerConfig& cfg) {
  lat.validate();
  cfg.validate();
  require(policy.dim() == 2, ErrorCode::kDimensionMismatch, "policy action dimension must match the environment (2)");
  require(policy.horizon() == cfg.h, ErrorCode::kInvalidArgument,
          "scheduler h=" + std::to_string(cfg.h) + " differs from policy h=" + std::to_string(policy.horizon()));
  require(cfg.eo.mode != EoMode::kAdaptive || predictor != nullptr, ErrorCode::kInvalidArgument,
          "adaptive early observation needs a predictor");
}

struct Generated {
  std::int64_t index = 0;
  std::int64_t horizon = 0;
  ActionVector action;  // normalized
  Vec physical;
};

// ---------------------------------------------------------------------------
// Discrete-event simulation

template <class Policy>
class SimulatedEpisode {
 public:
  SimulatedEpisode(const Policy& policy, const PredictorModel* predictor, const EnvKind& kind, const EnvState& init,
                   const StageLatency& lat, const SchedulerConfig& cfg)
      : policy_(policy), predictor_(predictor), kind_(kind), lat_(lat), cfg_(cfg), env_(init),
        coin_(cfg.seed, 0xc0171) {}

  EpisodeResult run() {
    obs_request_ = 0;
    dispatch();
    while (!done_ && !pending_.empty()) {
      const PendingEnd e = pending_.top();
      pending_.pop();
      now_ = e.time;
      switch (e.stage) {
        case Stage::kObserve: on_observe_end(); break;
        case Stage::kGenerate: on_generate_end(); break;
        case Stage::kExecute: on_execute_end(); break;
        case Stage::kPredict: on_predict_end(); break;
      }
      if (!done_) dispatch();
    }
    if (!done_) fail("scheduler stalled with no pending work");
    result_.final_alpha = alpha_exec_;
    result_.final_state = env_;
    std::stable_sort(result_.events.begin(), result_.events.end(), event_order);
    return std::move(result_);
  }

 private:
  struct PendingEnd {
    double time;
    Stage stage;
    std::int64_t index;
    std::uint64_t seq;
  };
  struct Later {
    bool operator()(const PendingEnd& a, const PendingEnd& b) const {
      return std::tie(a.time, a.stage, a.index, a.seq) > std::tie(b.time, b.stage, b.index, b.seq);
    }
  };

  bool streaming() const { return cfg_.mode == SchedulerMode::kStreaming; }

  void schedule(Stage stage, std::int64_t index, double duration, std::int64_t horizon) {
    in_flight_[static_cast<int>(stage)] = TimelineEvent{stage, index, horizon, now_, now_ + duration};
    pending_.push({now_ + duration, stage, index, seq_++});
  }

  void log_end(Stage stage) { result_.events.push_back(in_flight_[static_cast<int>(stage)]); }

  void fail(std::string why) {
    result_.success = false;
    result_.diagnostic = std::move(why);
    done_ = true;
  }

  void dispatch() {
    // Early-observation decision, ahead of the stages so an early observation
    // can start in the same instant.
    if (decision_horizon_ && !gen_busy_ && !predicting_ && next_gen_ >= (*decision_horizon_ + 1) * cfg_.h) {
      const std::int64_t H = *decision_horizon_;
      decision_horizon_.reset();
      decide(H);
    }
    // Observe
    if (!obs_busy_ && obs_request_) {
      obs_busy_ = true;
      obs_horizon_ = *obs_request_;
      obs_request_.reset();
      capture_ = observe(env_, executed_, now_);
      if (obs_horizon_ == 0) {
        result_.alpha0 = policy_.initial_alpha(capture_);
        alpha_exec_ = result_.alpha0;
        alpha_gen_ = result_.alpha0;
      }
      schedule(Stage::kObserve, executed_, lat_.t_obs, obs_horizon_);
    }
    // Generate
    if (!gen_busy_ && !predicting_ && can_generate()) {
      const int T = streaming() ? static_cast<int>(next_gen_ % cfg_.h) : chunk_generated_;
      const std::int64_t index = streaming() ? next_gen_ : chunk_ * cfg_.n_replan + T;
      const std::int64_t horizon = streaming() ? next_gen_ / cfg_.h : chunk_;
      ActionVector a = policy_.act(alpha_gen_, T, ready_obs_.at(horizon));
      if (!a.all_finite()) {
        fail("non-finite action generated at index " + std::to_string(index));
        return;
      }
      Vec phys = policy_.to_physical(a);
      generating_ = Generated{index, horizon, std::move(a), std::move(phys)};
      gen_busy_ = true;
      schedule(Stage::kGenerate, index, lat_.t_gen, horizon);
    }
    // Execute
    if (!exec_busy_ && can_execute()) {
      executing_ = std::move(buffer_.front());
      buffer_.pop_front();
      exec_busy_ = true;
      ++exec_started_;
      schedule(Stage::kExecute, executing_.index, lat_.t_exec, executing_.horizon);
    }
  }

  bool can_generate() const {
    if (streaming()) {
      return ready_obs_.contains(next_gen_ / cfg_.h) && next_gen_ - exec_started_ < cfg_.h;
    }
    return ready_obs_.contains(chunk_) && chunk_generated_ < cfg_.h;
  }

  bool can_execute() const {
    if (buffer_.empty()) return false;
    if (streaming()) return true;
    return chunk_generated_ == cfg_.h && chunk_executed_ < cfg_.n_replan;
  }

  std::vector<Vec> remaining_in_horizon(std::int64_t H) const {
    std::vector<Vec> out;
    if (exec_busy_ && executing_.horizon == H) out.push_back(executing_.physical);
    for (const Generated& g : buffer_) {
      if (g.horizon == H) out.push_back(g.physical);
    }
    return out;
  }

  void decide(std::int64_t H) {
    const std::vector<Vec> remaining = remaining_in_horizon(H);
    if (remaining.empty()) return;  // horizon already finished
    ++result_.eo_decisions;
    const EoDecision d =
        decide_early_observation(cfg_.eo, predictor_, observe(env_, executed_, now_), remaining, coin_);
    if (d.score) result_.eo_scores.push_back(*d.score);
    if (cfg_.eo.mode == EoMode::kAdaptive) {
      predicting_ = true;
      predict_horizon_ = H;
      predict_fire_ = d.fire;
      schedule(Stage::kPredict, executed_, lat_.t_pred, H);
      return;
    }
    if (d.fire) fire_early(H);
  }

  void fire_early(std::int64_t H) {
    ++result_.eo_fired;
    eo_fired_.insert(H + 1);
    obs_request_ = H + 1;
  }

  void on_observe_end() {
    log_end(Stage::kObserve);
    obs_busy_ = false;
    ready_obs_.erase(ready_obs_.begin(), ready_obs_.lower_bound(obs_horizon_ - 1));
    ready_obs_[obs_horizon_] = capture_;
    if (!streaming()) {
      chunk_ = obs_horizon_;
      chunk_generated_ = 0;
      chunk_executed_ = 0;
      alpha_gen_ = alpha_exec_;
    }
  }

  void on_generate_end() {
    log_end(Stage::kGenerate);
    gen_busy_ = false;
    alpha_gen_ = alpha_gen_ + generating_.action;
    if (streaming()) {
      ++next_gen_;
      buffer_.push_back(std::move(generating_));
    } else {
      // Only the first n_replan actions of a chunk are ever executed.
      if (chunk_generated_ < cfg_.n_replan) buffer_.push_back(std::move(generating_));
      ++chunk_generated_;
    }
  }

  void on_execute_end() {
    log_end(Stage::kExecute);
    exec_busy_ = false;
    env_ = step(kind_, env_, Vec2(executing_.physical[0], executing_.physical[1]));
    alpha_exec_ = alpha_exec_ + executing_.action;
    result_.executed.push_back(executing_.action);
    ++executed_;
    if (episode_over(kind_, env_)) {
      result_.success = success(env_);
      done_ = true;
      return;
    }
    if (streaming()) {
      if (executed_ % cfg_.h == 0) {
        const std::int64_t H = executed_ / cfg_.h - 1;
        if (decision_horizon_ == H) decision_horizon_.reset();
        if (predicting_ && predict_horizon_ == H) {
          boundary_waits_on_predict_ = true;
        } else if (!eo_fired_.contains(H + 1)) {
          obs_request_ = H + 1;
        }
      }
      if (cfg_.eo_active() && executed_ % cfg_.h == cfg_.h - cfg_.n_eo) decision_horizon_ = executed_ / cfg_.h;
    } else {
      ++chunk_executed_;
      if (chunk_executed_ == cfg_.n_replan) obs_request_ = chunk_ + 1;
    }
  }

  void on_predict_end() {
    log_end(Stage::kPredict);
    predicting_ = false;
    if (boundary_waits_on_predict_) {
      // The horizon ran out while scoring; observe at the boundary instead.
      boundary_waits_on_predict_ = false;
      obs_request_ = predict_horizon_ + 1;
      return;
    }
    if (predict_fire_) fire_early(predict_horizon_);
  }

  const Policy& policy_;
  const PredictorModel* predictor_;
  const EnvKind& kind_;
  StageLatency lat_;
  SchedulerConfig cfg_;
  EnvState env_;
  Rng coin_;
  EpisodeResult result_;

  double now_ = 0.0;
  bool done_ = false;
  std::priority_queue<PendingEnd, std::vector<PendingEnd>, Later> pending_;
  std::uint64_t seq_ = 0;
  TimelineEvent in_flight_[4];

  ActionState alpha_exec_;
  ActionState alpha_gen_;
  std::int64_t executed_ = 0;
  std::int64_t exec_started_ = 0;

  bool obs_busy_ = false;
  std::optional<std::int64_t> obs_request_;
  std::int64_t obs_horizon_ = 0;
  Observation capture_;
  std::map<std::int64_t, Observation> ready_obs_;  // by horizon

  bool gen_busy_ = false;
  std::int64_t next_gen_ = 0;
  Generated generating_;
  std::deque<Generated> buffer_;

  bool exec_busy_ = false;
  Generated executing_;

  std::optional<std::int64_t> decision_horizon_;
  std::set<std::int64_t> eo_fired_;
  bool predicting_ = false;
  std::int64_t predict_horizon_ = 0;
  bool predict_fire_ = false;
  bool boundary_waits_on_predict_ = false;

  std::int64_t chunk_ = 0;
  int chunk_generated_ = 0;
  int chunk_executed_ = 0;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Threaded runner plumbing

/// Blocking FIFO with a fixed capacity. close() wakes every waiter; after it,
/// push fails and pop returns nothing. Items still queued are dropped.
template <class T>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity) : capacity_(capacity) {
    require(capacity >= 1, ErrorCode::kInvalidArgument, "queue capacity must be >= 1");
  }

  bool push(T item) {
    std::unique_lock lock(mu_);
    not_full_.wait(lock, [&] { return closed_ || items_.size() < capacity_; });
    if (closed_) return false;
    items_.push_back(std::move(item));
    not_empty_.notify_one();
    return true;
  }

  std::optional<T> pop() {
    std::unique_lock lock(mu_);
    not_empty_.wait(lock, [&] { return closed_ || !items_.empty(); });
    if (closed_) return std::nullopt;
    T item = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return item;
  }

  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    items_.clear();
    not_full_.notify_all();
    not_empty_.notify_all();
  }

  std::vector<T> snapshot() const {
    std::lock_guard lock(mu_);
    return {items_.begin(), items_.end()};
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return items_.size();
  }

  std::size_t capacity() const { return capacity_; }

 private:
  const std::size_t capacity_;
  mutable std::mutex mu_;
  std::condition_variable not_full_;
  std::condition_variable not_empty_;
  std::deque<T> items_;
  bool closed_ = false;
};

class EventSink {
 public:
  void add(const TimelineEvent& e) {
    std::lock_guard lock(mu_);
    events_.push_back(e);
  }

  std::vector<TimelineEvent> take() {
    std::lock_guard lock(mu_);
    std::vector<TimelineEvent> out = std::move(events_);
    std::stable_sort(out.begin(), out.end(), event_order);
    return out;
  }

 private:
  std::mutex mu_;
  std::vector<TimelineEvent> events_;
};

namespace detail {

template <class Policy>
class WallEpisode {
 public:
  WallEpisode(const Policy& policy, const PredictorModel* predictor, const EnvKind& kind, const EnvState& init,
              const StageLatency& lat, const SchedulerConfig& cfg)
      : policy_(policy), predictor_(predictor), kind_(kind), lat_(lat), cfg_(cfg), init_(init),
        actions_(static_cast<std::size_t>(cfg.h)), latent_(1), requests_(4) {}

  EpisodeResult run() {
    t0_ = Clock::now();
    std::thread observer([this] { guarded("observer", [this] { observer_loop(); }); });
    std::thread generator([this] { guarded("generator", [this] { generator_loop(); }); });
    guarded("executor", [this] { executor_loop(); });
    shutdown();
    observer.join();
    generator.join();

    EpisodeResult r = std::move(exec_result_);
    r.events = sink_.take();
    r.eo_decisions = eo_decisions_;
    r.eo_fired = eo_fired_;
    r.eo_scores = std::move(eo_scores_);
    {
      std::lock_guard lock(fail_mu_);
      if (!failure_.empty()) {
        r.success = false;
        r.diagnostic = failure_;
      }
    }
    return r;
  }

 private:
  using Clock = std::chrono::steady_clock;

  struct ObsRequest {
    std::int64_t target = 0;  // horizon the observation will serve
    bool decision = false;     // early-observation decision point
    Observation obs;           // environment snapshot taken by the executor
    std::vector<Vec> remaining;
  };

  double now_ms() const { return std::chrono::duration<double, std::milli>(Clock::now() - t0_).count(); }

  void sleep_until_ms(double t) const {
    std::this_thread::sleep_until(t0_ + std::chrono::duration_cast<Clock::duration>(
                                            std::chrono::duration<double, std::milli>(t)));
  }

  void shutdown() {
    actions_.close();
    latent_.close();
    requests_.close();
  }

  template <class Fn>
  void guarded(const char* who, Fn&& fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      {
        std::lock_guard lock(fail_mu_);
        if (failure_.empty()) failure_ = std::string(who) + ": " + e.what();
      }
      shutdown();
    }
  }

  bool streaming() const { return cfg_.mode == SchedulerMode::kStreaming; }

  void executor_loop() {
    EnvState env = init_;
    EpisodeResult& r = exec_result_;
    const Observation first = observe(env, 0, 0.0);
    r.alpha0 = policy_.initial_alpha(first);
    r.final_alpha = r.alpha0;
    r.final_state = env;
    std::int64_t executed = 0;
    if (!requests_.push(ObsRequest{0, false, first, {}})) return;
    const std::int64_t period = streaming() ? cfg_.h : cfg_.n_replan;
    while (auto item = actions_.pop()) {
      const double start = now_ms();
      sleep_until_ms(start + lat_.t_exec);
      env = step(kind_, env, Vec2(item->physical[0], item->physical[1]));
      r.final_alpha = r.final_alpha + item->action;
      r.executed.push_back(item->action);
      r.final_state = env;
      ++executed;
      sink_.add({Stage::kExecute, item->index, item->horizon, start, now_ms()});
      if (episode_over(kind_, env)) {
        r.success = success(env);
        break;
      }
      if (streaming() && cfg_.eo_active() && executed % cfg_.h == cfg_.h - cfg_.n_eo) {
        const std::int64_t H = executed / cfg_.h;
        ObsRequest req{H + 1, true, observe(env, executed, now_ms()), {}};
        for (const Generated& g : actions_.snapshot()) {
          if (g.horizon == H) req.remaining.push_back(g.physical);
        }
        if (!requests_.push(std::move(req))) break;
      }
      if (executed % period == 0) {
        if (!requests_.push(ObsRequest{executed / period, false, observe(env, executed, now_ms()), {}})) break;
      }
    }
  }

  void observer_loop() {
    Rng coin(cfg_.seed, 0xc0171);
    std::int64_t last_target = -1;
    while (auto req = requests_.pop()) {
      if (req->target <= last_target) continue;  // already observed early for this horizon
      if (req->decision) {
        if (req->remaining.empty()) continue;
        ++eo_decisions_;
        const double pred_start = now_ms();
        const EoDecision d = decide_early_observation(cfg_.eo, predictor_, req->obs, req->remaining, coin);
        if (d.score) eo_scores_.push_back(*d.score);
        if (cfg_.eo.mode == EoMode::kAdaptive) {
          sleep_until_ms(pred_start + lat_.t_pred);
          sink_.add({Stage::kPredict, req->obs.frame_id, req->target - 1, pred_start, now_ms()});
        }
        if (!d.fire) continue;
        ++eo_fired_;
      }
      last_target = req->target;
      const double start = now_ms();
      Observation obs = std::move(req->obs);
      obs.capture_time = start;
      const std::int64_t frame = obs.frame_id;
      sleep_until_ms(start + lat_.t_obs);
      sink_.add({Stage::kObserve, frame, req->target, start, now_ms()});
      if (!latent_.push({req->target, std::move(obs)})) return;
    }
  }

  void generator_loop() {
    ActionState alpha;
    while (auto latent = latent_.pop()) {
      const auto& [H, obs] = *latent;
      if (H == 0) alpha = policy_.initial_alpha(obs);
      if (streaming()) {
        for (int T = 0; T < cfg_.h; ++T) {
          Generated g = generate(alpha, T, obs, H * cfg_.h + T, H);
          alpha = alpha + g.action;
          if (!actions_.push(std::move(g))) return;
        }
      } else {
        std::vector<Generated> chunk;
        ActionState provisional = alpha;
        for (int T = 0; T < cfg_.h; ++T) {
          chunk.push_back(generate(provisional, T, obs, H * cfg_.n_replan + T, H));
          provisional = provisional + chunk.back().action;
        }
        for (int T = 0; T < cfg_.n_replan; ++T) {
          alpha = alpha + chunk[T].action;
          if (!actions_.push(std::move(chunk[T]))) return;
        }
      }
    }
  }

  Generated generate(const ActionState& alpha, int T, const Observation& obs, std::int64_t index, std::int64_t H) {
    const double start = now_ms();
    ActionVector a = policy_.act(alpha, T, obs);
    if (!a.all_finite()) throw Error(ErrorCode::kInvalidArgument, "non-finite action generated at index " + std::to_string(index));
    Vec phys = policy_.to_physical(a);
    sleep_until_ms(start + lat_.t_gen);
    sink_.add({Stage::kGenerate, index, H, start, now_ms()});
    return Generated{index, H, std::move(a), std::move(phys)};
  }

  const Policy& policy_;
  const PredictorModel* predictor_;
  const EnvKind& kind_;
  StageLatency lat_;
  SchedulerConfig cfg_;
  EnvState init_;
  Clock::time_point t0_;

  BoundedQueue<Generated> actions_;
  BoundedQueue<std::pair<std::int64_t, Observation>> latent_;
  BoundedQueue<ObsRequest> requests_;
  EventSink sink_;

  EpisodeResult exec_result_;  // executor-owned until join
  int eo_decisions_ = 0;       // observer-owned until join
  int eo_fired_ = 0;
  std::vector<double> eo_scores_;

  std::mutex fail_mu_;
  std::string failure_;
};

}  // namespace detail

/// Runs one closed-loop episode from `init`. `predictor` may be null unless the
/// indicator is adaptive.
template <class Policy>
EpisodeResult run_episode(const Policy& policy, const PredictorModel* predictor, const EnvKind& kind,
                          const EnvState& init, const StageLatency& latency, const SchedulerConfig& cfg,
                          ClockMode clock = ClockMode::kSimulated) {
  detail::check_episode_args(policy, predictor, latency, cfg);
  kind.validate();
  if (clock == ClockMode::kSimulated) {
    return detail::SimulatedEpisode<Policy>(policy, predictor, kind, init, latency, cfg).run();
  }
  return detail::WallEpisode<Policy>(policy, predictor, kind, init, latency, cfg).run();
}

/// Initial state of evaluation episode `e` under `seed`.
inline EnvState episode_initial_state(const EnvKind& kind, std::uint64_t seed, std::uint64_t e) {
  Rng rng = Rng(seed, 0x5eed).derive(e);
  return sample_initial_state(kind, rng);
}

/// Scheduler seed for episode `e`, so random indicators differ across episodes.
inline SchedulerConfig for_episode(SchedulerConfig cfg, std::uint64_t e) {
  cfg.seed = Rng(cfg.seed, 0xe9).derive(e).next_u64();
  return cfg;
}

}  // namespace flowstream
