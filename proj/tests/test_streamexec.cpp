#include <gtest/gtest.h>

#include <thread>

#include "test_support.hpp"

using namespace flowstream;

namespace {

struct RecordingPolicy : fstest::ConstantPolicy {
  mutable std::vector<double> seen_x;  // position x of every observation the generator used, per action
  ActionVector act(const ActionState& a, int T, const Observation& o) const {
    seen_x.push_back(o.raw_features[0]);
    return ConstantPolicy::act(a, T, o);
  }
};

EnvKind long_env(int cap) {
  EnvKind k = EnvKind::direct();
  k.episode_cap = cap;
  return k;
}

EnvState origin() {
  EnvState s;
  s.position = Vec2(-3.0, -3.0);
  s.goal = Vec2(1.0, 2.0);
  return s;
}

SchedulerConfig streaming(EoMode eo = EoMode::kNone) {
  SchedulerConfig c;
  c.eo.mode = eo;
  return c;
}

SchedulerConfig sync_chunk() {
  SchedulerConfig c;
  c.mode = SchedulerMode::kSyncChunk;
  return c;
}

std::vector<const TimelineEvent*> of_stage(const EpisodeResult& r, Stage s) {
  std::vector<const TimelineEvent*> out;
  for (const TimelineEvent& e : r.events) {
    if (e.stage == s) out.push_back(&e);
  }
  return out;
}

FlowPolicy random_flow_policy() {
  Rng rng(4);
  FlowPolicy p;
  p.model = VelocityModel::create(2, 7, {16}, rng);
  p.stats = NormStats::from_extrema(Vec2(-4.3, -3.9), Vec2(3.1, 3.7));
  p.alpha_init = AlphaInit::kInitialPosition;
  return p;
}

}  // namespace

TEST(SchedulerConfig, EarlyObservationNeedsStreaming) {
  SchedulerConfig c = sync_chunk();
  c.eo.mode = EoMode::kNaive;
  EXPECT_THROW(c.validate(), Error);
  SchedulerConfig s = streaming(EoMode::kNaive);
  s.n_eo = 10;
  EXPECT_THROW(s.validate(), Error);
}

TEST(RunEpisode, HorizonMismatchIsRejected) {
  fstest::ConstantPolicy p;
  p.h = 8;
  EXPECT_THROW(run_episode(p, nullptr, long_env(20), origin(), StageLatency::paper_profile(), streaming()), Error);
}

TEST(SimulatedClock, ZeroLatencySchedulersAgree) {
  const fstest::WaypointPolicy p;
  SchedulerConfig sync = sync_chunk();
  sync.n_replan = sync.h;
  for (std::uint64_t e = 0; e < 10; ++e) {
    const EnvState init = episode_initial_state(EnvKind::direct(), 5, e);
    const EpisodeResult a = run_episode(p, nullptr, EnvKind::direct(), init, StageLatency::zero(), streaming());
    const EpisodeResult b = run_episode(p, nullptr, EnvKind::direct(), init, StageLatency::zero(), sync);
    EXPECT_EQ(a.executed, b.executed);
    EXPECT_EQ(a.success, b.success);
  }
}

TEST(SimulatedClock, LedgerIsExactOrderedSum) {
  const FlowPolicy p = random_flow_policy();
  for (const SchedulerConfig& cfg : {streaming(), sync_chunk(), streaming(EoMode::kNaive)}) {
    const EpisodeResult r = run_episode(p, nullptr, long_env(60), origin(), StageLatency::paper_profile(), cfg);
    ActionState acc = r.alpha0;
    for (const ActionVector& a : r.executed) acc = acc + a;
    EXPECT_EQ(r.final_alpha, acc);
    EXPECT_FALSE(r.executed.empty());
  }
}

TEST(SimulatedClock, SameSeedSameLog) {
  const fstest::WaypointPolicy p;
  SchedulerConfig cfg = streaming(EoMode::kRandom);
  cfg.eo.p = 0.5;
  cfg.seed = 3;
  const auto a = run_episode(p, nullptr, EnvKind::direct(), origin(), StageLatency::paper_profile(), cfg);
  const auto b = run_episode(p, nullptr, EnvKind::direct(), origin(), StageLatency::paper_profile(), cfg);
  EXPECT_EQ(a.events, b.events);
  EXPECT_EQ(a.eo_fired, b.eo_fired);
}

TEST(SimulatedClock, EventsRespectCausality) {
  const fstest::WaypointPolicy p;
  for (const SchedulerConfig& cfg : {streaming(), sync_chunk(), streaming(EoMode::kNaive)}) {
    const EpisodeResult r = run_episode(p, nullptr, EnvKind::direct(), origin(), StageLatency::paper_profile(), cfg);
    std::map<std::int64_t, const TimelineEvent*> gen, exe, obs;
    for (const TimelineEvent& e : r.events) {
      if (e.stage == Stage::kGenerate) gen[e.action_index] = &e;
      if (e.stage == Stage::kExecute) exe[e.action_index] = &e;
      if (e.stage == Stage::kObserve) obs[e.horizon_index] = &e;
    }
    const TimelineEvent* prev = nullptr;
    for (const auto& [i, e] : exe) {
      ASSERT_TRUE(gen.contains(i));
      EXPECT_GE(e->start, gen.at(i)->end);
      if (prev) EXPECT_GE(e->start, prev->end);
      prev = e;
    }
    for (const auto& [i, g] : gen) {
      ASSERT_TRUE(obs.contains(g->horizon_index));
      EXPECT_GE(g->start, obs.at(g->horizon_index)->end);
    }
  }
}

TEST(SimulatedClock, StreamingStallsOnlyForObservationAndFirstAction) {
  const fstest::ConstantPolicy p;
  const StageLatency lat = StageLatency::paper_profile();
  const EpisodeResult r = run_episode(p, nullptr, long_env(200), origin(), lat, streaming());
  const MetricsReport m = measure(r);
  EXPECT_EQ(m.num_actions, 200);
  EXPECT_DOUBLE_EQ(m.T_halt, lat.t_obs + lat.t_gen);
  EXPECT_NEAR(m.O_ge, 9 * 18.0, 1e-9);
  EXPECT_EQ(m.O_oe, 0.0);
}

TEST(SimulatedClock, NaiveEarlyObservationHidesTwoActions) {
  const fstest::ConstantPolicy p;
  const StageLatency lat = StageLatency::paper_profile();
  const EpisodeResult r = run_episode(p, nullptr, long_env(200), origin(), lat, streaming(EoMode::kNaive));
  const MetricsReport m = measure(r);
  EXPECT_EQ(r.eo_fired, r.eo_decisions);
  // Observe overlaps the last two executions of each horizon: 2 * 27 = 54.
  EXPECT_NEAR(m.O_oe, 54.0, 1e-9);
  EXPECT_NEAR(m.T_halt, 58.0 + 18.0 - 54.0, 1e-9);
}

TEST(SimulatedClock, EarlyObservationSeesStateBeforeRemainingActions) {
  RecordingPolicy p;
  p.action = Vec2(0.01, 0.0);
  const EnvState init = origin();
  run_episode(p, nullptr, long_env(40), init, StageLatency::paper_profile(), streaming(EoMode::kNaive));
  ASSERT_GE(p.seen_x.size(), 30u);
  for (std::size_t i = 10; i < 30; ++i) {
    const double steps = std::round((p.seen_x[i] - init.position.x()) / 0.01);
    // Horizon H >= 1 was generated from the state after 10H - 2 executed actions.
    EXPECT_EQ(steps, 10.0 * static_cast<double>(i / 10) - 2.0) << "action " << i;
  }
}

TEST(SimulatedClock, AdaptivePredictsBeforeObserving) {
  const fstest::ConstantPolicy p;
  Rng rng(1);
  PredictorModel::Options opt;
  opt.zero_output = true;  // every score is 0, so every decision fires
  const PredictorModel pred = PredictorModel::create(opt, rng);
  SchedulerConfig cfg = streaming(EoMode::kAdaptive);
  cfg.eo.eta = 0.5;
  const EpisodeResult r = run_episode(p, &pred, long_env(100), origin(), StageLatency::paper_profile(), cfg);
  const auto predicts = of_stage(r, Stage::kPredict);
  const auto observes = of_stage(r, Stage::kObserve);
  ASSERT_EQ(static_cast<int>(predicts.size()), r.eo_decisions);
  EXPECT_EQ(r.eo_fired, r.eo_decisions);
  for (const TimelineEvent* pr : predicts) {
    EXPECT_DOUBLE_EQ(pr->end - pr->start, 1.0);
    if (pr->horizon_index == 9) continue;  // the cap ends the episode mid-observation
    const auto next = std::find_if(observes.begin(), observes.end(),
                                   [&](const TimelineEvent* o) { return o->horizon_index == pr->horizon_index + 1; });
    ASSERT_NE(next, observes.end());
    EXPECT_DOUBLE_EQ((*next)->start, pr->end);
  }
  const MetricsReport m = measure(r);
  EXPECT_NEAR(m.O_oe, 54.0 - 1.0, 1e-9);
}

TEST(SimulatedClock, SyncChunkTiming) {
  const fstest::ConstantPolicy p;
  const EpisodeResult r = run_episode(p, nullptr, long_env(100), origin(), StageLatency::paper_profile(), sync_chunk());
  const MetricsReport m = measure(r);
  EXPECT_NEAR(m.T_halt, 58.0 + 180.0, 1e-9);
  EXPECT_NEAR(m.T_action, (58.0 + 180.0 + 5 * 27.0) / 5.0, 1e-9);
  EXPECT_EQ(m.O_ge, 0.0);
  EXPECT_EQ(m.O_oe, 0.0);
}

TEST(SimulatedClock, NonFiniteActionAborts) {
  fstest::ConstantPolicy p;
  p.action = Vec2(std::nan(""), 0.0);
  const EpisodeResult r = run_episode(p, nullptr, long_env(20), origin(), StageLatency::paper_profile(), streaming());
  EXPECT_FALSE(r.success);
  EXPECT_FALSE(r.diagnostic.empty());
  EXPECT_TRUE(r.executed.empty());
}

TEST(SimulatedClock, EndsAtWorkspaceEdge) {
  fstest::ConstantPolicy p;
  p.action = Vec2(1.0, 0.0);
  const EpisodeResult r = run_episode(p, nullptr, long_env(100), origin(), StageLatency::zero(), streaming());
  EXPECT_TRUE(at_workspace_edge(r.final_state));
  EXPECT_EQ(r.executed.size(), 8u);
}

TEST(WallClock, ExecutionsNeverOverlapAndLedgerHolds) {
  const FlowPolicy p = random_flow_policy();
  const StageLatency lat{2.0, 0.5, 1.0, 0.2};
  for (SchedulerConfig cfg : {streaming(), sync_chunk(), streaming(EoMode::kNaive)}) {
    const EpisodeResult r = run_episode(p, nullptr, long_env(40), origin(), lat, cfg, ClockMode::kWall);
    EXPECT_TRUE(r.diagnostic.empty()) << r.diagnostic;
    auto execs = of_stage(r, Stage::kExecute);
    ASSERT_EQ(execs.size(), r.executed.size());
    std::sort(execs.begin(), execs.end(), [](auto* a, auto* b) { return a->start < b->start; });
    for (std::size_t i = 1; i < execs.size(); ++i) EXPECT_GE(execs[i]->start, execs[i - 1]->end);
    ActionState acc = r.alpha0;
    for (const ActionVector& a : r.executed) acc = acc + a;
    EXPECT_EQ(r.final_alpha, acc);
    EXPECT_EQ(r.executed.size(), 40u);
  }
}

TEST(WallClock, NoExecutionAfterEpisodeEnd) {
  fstest::ConstantPolicy p;
  p.action = Vec2(1.0, 0.0);
  const EpisodeResult r =
      run_episode(p, nullptr, long_env(100), origin(), StageLatency{1.0, 0.2, 0.5, 0.0}, streaming(), ClockMode::kWall);
  EXPECT_EQ(r.executed.size(), 8u);
  EXPECT_EQ(of_stage(r, Stage::kExecute).size(), 8u);
}

TEST(BoundedQueue, FifoWithCapacity) {
  BoundedQueue<int> q(2);
  EXPECT_TRUE(q.push(1));
  EXPECT_TRUE(q.push(2));
  EXPECT_EQ(q.size(), 2u);
  EXPECT_EQ(q.pop(), 1);
  EXPECT_EQ(q.pop(), 2);
}

TEST(BoundedQueue, CloseWakesBlockedConsumer) {
  BoundedQueue<int> q(1);
  std::optional<int> got = 5;
  std::thread t([&] { got = q.pop(); });
  std::this_thread::sleep_for(std::chrono::milliseconds(20));
  q.close();
  t.join();
  EXPECT_FALSE(got.has_value());
  EXPECT_FALSE(q.push(3));
}

TEST(BoundedQueue, BlocksProducerWhenFull) {
  BoundedQueue<int> q(1);
  q.push(1);
  std::atomic<bool> pushed{false};
  std::thread t([&] {
    q.push(2);
    pushed = true;
  });
  std::this_thread::sleep_for(std::chrono::milliseconds(20));
  EXPECT_FALSE(pushed.load());
  EXPECT_EQ(q.pop(), 1);
  t.join();
  EXPECT_TRUE(pushed.load());
  EXPECT_EQ(q.pop(), 2);
}
