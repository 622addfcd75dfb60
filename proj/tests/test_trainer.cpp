#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace flowstream;

namespace {

const Dataset& direct_demos() {
  static const Dataset ds = fstest::demo_dataset(EnvKind::direct(), 40, 21);
  return ds;
}

}  // namespace

TEST(WindowSampler, AnchorsAtDatasetState) {
  const Dataset& ds = direct_demos();
  Rng rng(1);
  const WindowSampler sampler(ds.episodes, 10, true);
  for (int i = 0; i < 200; ++i) {
    const Window w = sampler(rng);
    const Trajectory& t = ds.episodes[w.episode];
    // Oracle: left fold over the full prefix from the episode's initial state.
    ActionState oracle = t.action_states[0];
    for (std::size_t n = 0; n < w.start; ++n) oracle = oracle + t.actions[n];
    EXPECT_EQ(w.alpha, oracle);
    EXPECT_EQ(w.observation, t.observations[w.start]);
    ASSERT_EQ(w.actions.size(), 10u);
    for (std::size_t j = 0; j < 10; ++j) EXPECT_EQ(w.actions[j], t.actions[w.start + j]);
  }
}

TEST(WindowSampler, StartZeroGivesInitialState) {
  Trajectory t = direct_demos().episodes[0];
  t.actions.resize(10);
  t.action_states.resize(11);
  t.observations.resize(11);
  Rng rng(2);
  const Window w = sample_subtrajectory(std::vector<Trajectory>{t}, 10, rng);
  EXPECT_EQ(w.start, 0u);
  EXPECT_EQ(w.alpha, t.action_states[0]);
}

TEST(WindowSampler, AblationAnchorsAtZero) {
  Rng rng(3);
  const WindowSampler sampler(direct_demos().episodes, 10, false);
  for (int i = 0; i < 50; ++i) EXPECT_EQ(sampler(rng).alpha, ActionState::zero(2));
}

TEST(WindowSampler, NeedsLongEnoughEpisode) {
  Trajectory t = direct_demos().episodes[0];
  t.actions.resize(5);
  t.action_states.resize(6);
  t.observations.resize(6);
  EXPECT_THROW(WindowSampler(std::vector<Trajectory>{t}, 10, true), Error);
}

TEST(WindowStates, ExactPrefixInNormalizedSpace) {
  const Dataset& ds = direct_demos();
  const NormStats stats = fit_stats(ds.episodes);
  Rng rng(4);
  const Window w = sample_subtrajectory(ds.episodes, 10, rng);
  const SubTrajectory sub = window_states(w, stats, NormScheme::kScaleOnly, true);
  ASSERT_EQ(sub.states.size(), 11u);
  Vec acc = normalize(w.alpha.values(), stats);
  EXPECT_TRUE((sub.states[0].values().array() == acc.array()).all());
  for (std::size_t j = 0; j < 10; ++j) {
    acc += normalize(w.actions[j].values(), stats);
    EXPECT_TRUE((sub.states[j + 1].values().array() == acc.array()).all());
  }
  const SubTrajectory zero = window_states(w, stats, NormScheme::kScaleOnly, false);
  EXPECT_EQ(zero.states[0], ActionState::zero(2));
}

TEST(FlowSample, TimeIsOnTheActionGrid) {
  const Dataset& ds = direct_demos();
  const NormStats stats = fit_stats(ds.episodes);
  Rng rng(5);
  const FlowParams fp;
  std::set<int> seen;
  for (int i = 0; i < 500; ++i) {
    const Window w = sample_subtrajectory(ds.episodes, 10, rng);
    const FlowSample s = make_flow_sample(window_states(w, stats, NormScheme::kScaleOnly, true), fp, Vec::Zero(7), rng);
    const double Th = s.t * fp.h;
    EXPECT_EQ(Th, std::floor(Th));
    seen.insert(static_cast<int>(Th));
  }
  EXPECT_EQ(seen.size(), 10u);
  EXPECT_EQ(*seen.rbegin(), 9);
}

TEST(FlowSample, NoiselessTargetIsRecordedVelocity) {
  const Dataset& ds = direct_demos();
  const NormStats stats = fit_stats(ds.episodes);
  Rng rng(6);
  FlowParams fp;
  fp.sigma0 = 1e-300;
  for (int i = 0; i < 50; ++i) {
    const Window w = sample_subtrajectory(ds.episodes, 10, rng);
    const SubTrajectory sub = window_states(w, stats, NormScheme::kScaleOnly, true);
    const FlowSample s = make_flow_sample(sub, fp, Vec::Zero(7), rng);
    const int T = static_cast<int>(std::lround(s.t * fp.h));
    EXPECT_EQ(s.x, sub.states[T]);
    EXPECT_EQ(s.target, discrete_xi_dot(sub, T, fp.h));
  }
}

TEST(Train, LossDecreases) {
  TrainConfig cfg = fstest::small_train_config(600);
  cfg.hidden = {32, 32};
  cfg.log_every = 100;
  const TrainResult r = train(direct_demos(), cfg);
  ASSERT_EQ(r.log.size(), 6u);
  EXPECT_LT(r.log.back().loss, 0.3 * r.log.front().loss);
  EXPECT_EQ(r.state.optimizer.step, 600u);
}

TEST(Train, SameSeedSameResult) {
  const TrainConfig cfg = fstest::small_train_config(30);
  const TrainResult a = train(direct_demos(), cfg);
  const TrainResult b = train(direct_demos(), cfg);
  EXPECT_TRUE((a.policy.model.params.array() == b.policy.model.params.array()).all());
  ASSERT_EQ(a.log.size(), b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(a.log[i].loss, b.log[i].loss);
}

TEST(Train, ResumeMatchesUninterruptedRun) {
  TrainConfig cfg = fstest::small_train_config(40);
  const TrainResult full = train(direct_demos(), cfg);
  cfg.iterations = 15;
  const TrainResult first = train(direct_demos(), cfg);
  const LoadedPolicy mid = decode_policy(encode_policy(first.policy, first.state));
  cfg.iterations = 40;
  const TrainResult rest = train(direct_demos(), cfg, &mid);
  EXPECT_TRUE((rest.policy.model.params.array() == full.policy.model.params.array()).all());
}

TEST(Train, ResumeRejectsDifferentSeed) {
  TrainConfig cfg = fstest::small_train_config(5);
  const TrainResult first = train(direct_demos(), cfg);
  const LoadedPolicy mid{first.policy, first.state};
  cfg.seed = 1;
  cfg.iterations = 10;
  EXPECT_THROW(train(direct_demos(), cfg, &mid), Error);
}

TEST(Train, NonFiniteLossIsSurfaced) {
  const TrainConfig cfg = fstest::small_train_config(5);
  FlowPolicy p = make_policy(direct_demos().episodes, cfg, AlphaInit::kInitialPosition);
  p.model.params.setConstant(std::numeric_limits<double>::quiet_NaN());
  OptimizerState opt = OptimizerState::for_params(p.model.net.num_params(), 1e-3);
  Rng rng(1);
  const WindowSampler sampler(direct_demos().episodes, 10, true);
  std::vector<Window> batch = {sampler(rng), sampler(rng)};
  try {
    training_step(p, opt, batch, cfg, rng);
    FAIL() << "expected throw";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNonFiniteLoss);
  }
}

TEST(Train, StatsAndAlphaInitComeFromDataset) {
  const TrainConfig cfg = fstest::small_train_config(1);
  const TrainResult r = train(direct_demos(), cfg);
  EXPECT_EQ(r.policy.stats, fit_stats(direct_demos().episodes));
  EXPECT_EQ(r.policy.alpha_init, AlphaInit::kInitialPosition);
  Dataset controller = fstest::demo_dataset(EnvKind::controller(), 5, 1);
  EXPECT_EQ(alpha_init_of(controller), AlphaInit::kZero);
}

TEST(Evaluate, NullPolicyNeverSucceeds) {
  TrainConfig cfg = fstest::small_train_config(1);
  FlowPolicy p = make_policy(direct_demos().episodes, cfg, AlphaInit::kInitialPosition);
  Rng rng(1);
  p.model = VelocityModel::create(2, 7, {8}, rng, true);
  const EvalSummary s = evaluate(p, EnvKind::direct(), 20, 3);
  EXPECT_EQ(s.success_rate, 0.0);
  for (const EpisodeResult& e : s.episodes) EXPECT_EQ(static_cast<int>(e.executed.size()), EnvKind::direct().episode_cap);
}

TEST(Evaluate, ReproducibleAndBounded) {
  const fstest::WaypointPolicy scripted;
  const EvalSummary a = evaluate(scripted, EnvKind::direct(), 30, 8);
  const EvalSummary b = evaluate(scripted, EnvKind::direct(), 30, 8);
  EXPECT_GE(a.success_rate, 0.0);
  EXPECT_LE(a.success_rate, 1.0);
  EXPECT_EQ(a.success_rate, b.success_rate);
  EXPECT_EQ(a.mean_endpoint_error, b.mean_endpoint_error);
  EXPECT_GT(a.success_rate, 0.9);  // closed-loop expert at zero latency
}
