#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "gtest/gtest.h"
#include "test_util.hpp"
#include "upliftlab/datagen.hpp"
#include "upliftlab/icepkd.hpp"

namespace upliftlab {
namespace {

DrcfrConfig tiny_config() {
  DrcfrConfig c;
  c.input_dim = 2;
  c.num_arms = 3;
  c.gamma_net = {{2, 6, 4}, HiddenActivation::relu, OutputActivation::identity};
  c.delta_net = c.gamma_net;
  c.upsilon_net = c.gamma_net;
  c.classifier_net = {{8, 3}, HiddenActivation::relu, OutputActivation::softmax};
  c.propensity_net = {{4, 3}, HiddenActivation::relu, OutputActivation::softmax};
  c.trunk_net = {{8, 6}, HiddenActivation::relu, OutputActivation::identity};
  c.head_net = {{6, 4, 1}, HiddenActivation::relu, OutputActivation::sigmoid};
  return c;
}

// Rows whose first coordinate identifies them and whose second tags the
// batch they came from; arms cycle so every arm is present.
ObservationBatch marker_batch(std::size_t n, double tag) {
  ObservationBatch b;
  b.covariates = Matrix(n, 2);
  b.treatments.resize(n);
  b.outcomes.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    b.covariates(i, 0) = (static_cast<double>(i) + 0.5) / static_cast<double>(n);
    b.covariates(i, 1) = tag;
    b.treatments[i] = static_cast<int>(i % 3);
    b.outcomes[i] = static_cast<int>((i / 3) % 2);
  }
  return b;
}

Matrix random_inputs(std::size_t n, std::size_t d, std::uint64_t seed) {
  Matrix x(n, d);
  Rng rng(seed);
  for (double& v : x.data) v = rng.uniform01();
  return x;
}

std::vector<double> sorted_markers(const ObservationBatch& b) {
  std::vector<double> out;
  for (std::size_t i = 0; i < b.size(); ++i) out.push_back(b.covariates(i, 0));
  std::sort(out.begin(), out.end());
  return out;
}

// Fresh correctors carry zero biases, which parks some ReLU units exactly on
// their kink; a central difference straddles it while the analytic gradient
// takes the zero subgradient. Shifting the biases makes the check well-posed.
void jitter_biases(ParamStore& params, std::uint64_t seed) {
  Rng rng(seed);
  for (Param& p : params)
    if (!p.name.empty() && p.name[0] == 'b')
      for (double& v : p.value.data) v = rng.uniform(-0.2, 0.2);
}

StageState initial_state(std::uint64_t model_seed, std::uint64_t buffer_seed) {
  const PeriodDataset d0 = gen_period(0, 800, 10, 3);
  StageState s;
  s.model = DrcfrModel::init(tiny_config(), model_seed);
  s.buffer = init_replay(d0.train, buffer_seed);
  s.stage = 0;
  return s;
}

TEST(ReplaySplit, SpotValueAndExactTotal) {
  const auto [keep, fresh] = replay_split(1000, 100000, 14000);
  EXPECT_EQ(keep, 877u);
  EXPECT_EQ(fresh, 123u);

  Rng rng(5);
  for (int it = 0; it < 1000; ++it) {
    const std::size_t prev = 100 + rng.uniform_index(1000000);
    const std::size_t cap = 1 + rng.uniform_index(std::min<std::size_t>(prev, 2000));
    const std::size_t add = rng.uniform_index(200000);
    const auto [k, f] = replay_split(cap, prev, add);
    EXPECT_EQ(k + f, cap) << cap << " " << prev << " " << add;
    EXPECT_LE(f, add == 0 ? 0u : add);
  }
}

TEST(ReplayBuffer, InitHoldsOnePercentDistinctRows) {
  const ObservationBatch d0 = marker_batch(10000, 0.0);
  const ReplayBuffer buf = init_replay(d0, 11);
  EXPECT_EQ(buf.capacity, 100u);
  EXPECT_EQ(buf.cumulative, 10000u);
  ASSERT_EQ(buf.samples.size(), 100u);
  const std::vector<double> ids = sorted_markers(buf.samples);
  for (std::size_t i = 1; i < ids.size(); ++i) EXPECT_LT(ids[i - 1], ids[i]);

  EXPECT_EQ(init_replay(marker_batch(100000, 0.0), 11).capacity, 1000u);
  EXPECT_THROW(init_replay(marker_batch(99, 0.0), 11), std::invalid_argument);
}

TEST(ReplayBuffer, UpdateMixesOldAndNewPerCounters) {
  const ObservationBatch d0 = marker_batch(10000, 0.0);
  const ReplayBuffer buf0 = init_replay(d0, 7);
  const ObservationBatch dk = marker_batch(1400, 1.0);
  const ReplayBuffer buf1 = update_replay(buf0, dk, 9);

  EXPECT_EQ(buf1.capacity, 100u);
  EXPECT_EQ(buf1.cumulative, 11400u);
  ASSERT_EQ(buf1.samples.size(), 100u);
  std::size_t old_rows = 0, new_rows = 0;
  for (std::size_t i = 0; i < buf1.samples.size(); ++i)
    (buf1.samples.covariates(i, 1) == 0.0 ? old_rows : new_rows) += 1;
  // floor(100*10000/11400) kept, ceil(100*1400/11400) fresh
  EXPECT_EQ(old_rows, 87u);
  EXPECT_EQ(new_rows, 13u);
}

TEST(ReplayBuffer, EmptyIncrementOnlyReranks) {
  const ReplayBuffer buf0 = init_replay(marker_batch(2000, 0.0), 13);
  ObservationBatch empty;
  empty.covariates = Matrix(0, 2);
  const ReplayBuffer buf1 = update_replay(buf0, empty, 17);
  EXPECT_EQ(buf1.capacity, buf0.capacity);
  EXPECT_EQ(buf1.cumulative, buf0.cumulative);
  EXPECT_EQ(sorted_markers(buf1.samples), sorted_markers(buf0.samples));
}

TEST(Corrector, StartsSmallBoundedAndRightSized) {
  const Corrector c2 = make_corrector(2, 3, 0, 77);
  EXPECT_EQ(c2.spec.widths, (std::vector<int>{2, 20, 20, 3}));
  EXPECT_EQ(c2.params.scalar_count(), 543u);
  const Corrector c10 = make_corrector(10, 3, 0, 78);
  EXPECT_EQ(c10.spec.widths, (std::vector<int>{10, 40, 40, 3}));
  EXPECT_EQ(c10.params.scalar_count(), 2203u);

  const Matrix x = random_inputs(1000, 2, 5);
  const Matrix h = mlp_forward(c2.spec, c2.params, x);
  double mean_abs = 0.0;
  for (double v : h.data) {
    EXPECT_GT(v, -1.0);
    EXPECT_LT(v, 1.0);
    mean_abs += std::abs(v);
  }
  mean_abs /= static_cast<double>(h.size());
  EXPECT_LT(mean_abs, 0.05);
}

TEST(Distill, BernoulliKlOracle) {
  Matrix tp(1, 1), sp(1, 1);
  tp(0, 0) = 0.8;
  sp(0, 0) = 0.5;
  EXPECT_NEAR(detail::distill_terms(tp, nullptr, sp).value, 0.19274, 1e-5);

  sp(0, 0) = 0.8;
  EXPECT_EQ(detail::distill_terms(tp, nullptr, sp).value, 0.0);

  // summed over arms, averaged over rows
  Matrix tp2(2, 2), sp2(2, 2);
  tp2.fill(0.8);
  sp2.fill(0.5);
  EXPECT_NEAR(detail::distill_terms(tp2, nullptr, sp2).value, 2.0 * 0.1927448, 1e-6);
}

TEST(Distill, IdenticalModelsGiveZero) {
  DrcfrModel teacher = DrcfrModel::init(tiny_config(), 21);
  const DrcfrModel student = teacher;
  EXPECT_EQ(kd_loss(teacher, student, random_inputs(16, 2, 6)), 0.0);
}

TEST(Distill, ZeroCorrectorMatchesRawTeacher) {
  const DrcfrModel teacher = DrcfrModel::init(tiny_config(), 21);
  const DrcfrModel student = DrcfrModel::init(tiny_config(), 22);
  Corrector c = make_corrector(2, 3, 4, 77);
  for (Param& p : c.params) p.value.fill(0.0);
  const Matrix x = random_inputs(16, 2, 6);
  EXPECT_EQ(proxy_kd_loss(teacher, c, student, x), kd_loss(teacher, student, x));
}

TEST(Distill, MatchedProxyEntryIsZero) {
  Matrix tp(1, 1), h(1, 1), sp(1, 1);
  tp(0, 0) = 0.6;
  h(0, 0) = 0.2;
  sp(0, 0) = 0.8;
  EXPECT_NEAR(detail::distill_terms(tp, &h, sp).value, 0.0, 1e-12);
}

TEST(Distill, ClampedProxyIsFiniteAndStopsCorrectorGradient) {
  Matrix tp(1, 1), h(1, 1), sp(1, 1);
  tp(0, 0) = 0.9;
  h(0, 0) = 0.5;  // proxy target 1.4, clamped just below one
  sp(0, 0) = 0.4;
  const detail::DistillTerms terms = detail::distill_terms(tp, &h, sp);
  EXPECT_TRUE(std::isfinite(terms.value));
  EXPECT_GT(terms.value, 0.0);
  EXPECT_EQ(terms.d_corrector(0, 0), 0.0);
  EXPECT_TRUE(std::isfinite(terms.d_student(0, 0)));
  EXPECT_NE(terms.d_student(0, 0), 0.0);
}

TEST(DistillGrads, RawTeacherPathMatchesFiniteDifferences) {
  const DrcfrModel teacher = DrcfrModel::init(tiny_config(), 21);
  DrcfrModel student = DrcfrModel::init(tiny_config(), 22);
  const Matrix x = random_inputs(6, 2, 9);
  const Matrix tp = predict_all(teacher, x);
  student.zero_grads();
  accumulate_distill_grads(tp, student, nullptr, x, 1.0);
  auto loss = [&] { return kd_loss(teacher, student, x); };
  student.for_each_store([&](ParamStore& s) { testutil::check_all_grads(loss, s); });
}

TEST(DistillGrads, ProxyPathMatchesFiniteDifferences) {
  const DrcfrModel teacher = DrcfrModel::init(tiny_config(), 31);
  DrcfrModel student = DrcfrModel::init(tiny_config(), 32);
  Corrector corr = make_corrector(2, 3, 4, 33);
  jitter_biases(corr.params, 34);
  const Matrix x = random_inputs(6, 2, 10);
  const Matrix tp = predict_all(teacher, x);
  student.zero_grads();
  corr.params.zero_grads();
  accumulate_distill_grads(tp, student, &corr, x, 1.0, 0.0);
  auto loss = [&] { return proxy_kd_loss(teacher, corr, student, x); };
  student.for_each_store([&](ParamStore& s) { testutil::check_all_grads(loss, s); });
  testutil::check_all_grads(loss, corr.params);
}

TEST(DistillGrads, StudentScalesWithMuCorrectorDoesNot) {
  const DrcfrModel teacher = DrcfrModel::init(tiny_config(), 41);
  DrcfrModel student = DrcfrModel::init(tiny_config(), 42);
  Corrector corr = make_corrector(2, 3, 4, 43);
  const Matrix x = random_inputs(8, 2, 11);
  const Matrix tp = predict_all(teacher, x);

  student.zero_grads();
  corr.params.zero_grads();
  accumulate_distill_grads(tp, student, &corr, x, 1.0, 0.0);
  const Matrix s_ref = student.gamma.at(0).grad;
  const Matrix c_ref = corr.params.at(0).grad;

  student.zero_grads();
  corr.params.zero_grads();
  accumulate_distill_grads(tp, student, &corr, x, 3.0, 0.0);
  for (std::size_t j = 0; j < s_ref.size(); ++j)
    EXPECT_NEAR(student.gamma.at(0).grad.data[j], 3.0 * s_ref.data[j],
                1e-12 * std::max(1.0, std::abs(s_ref.data[j])));
  for (std::size_t j = 0; j < c_ref.size(); ++j)
    EXPECT_DOUBLE_EQ(corr.params.at(0).grad.data[j], c_ref.data[j]);
}

TEST(DistillGrads, CorrectorWeightDecayMatchesFiniteDifferences) {
  const DrcfrModel teacher = DrcfrModel::init(tiny_config(), 51);
  DrcfrModel student = DrcfrModel::init(tiny_config(), 52);
  Corrector corr = make_corrector(2, 3, 4, 53);
  jitter_biases(corr.params, 54);
  const Matrix x = random_inputs(6, 2, 12);
  const Matrix tp = predict_all(teacher, x);
  student.zero_grads();
  corr.params.zero_grads();
  accumulate_distill_grads(tp, student, &corr, x, 1.0, 0.01);
  auto loss = [&] {
    return proxy_kd_loss(teacher, corr, student, x) + 0.01 * corr.params.sum_squared_weights();
  };
  testutil::check_all_grads(loss, corr.params);
}

TEST(Stage, EpochsZeroInheritsParamsButUpdatesBuffer) {
  const StageState s0 = initial_state(31, 41);
  const ObservationBatch dk = gen_period(1, 300, 10, 5).train;
  IcepkdConfig cfg;
  cfg.epochs = 0;
  cfg.seed = 7;
  const StageResult res = incremental_stage(s0, dk, cfg);
  EXPECT_TRUE(res.state.model.same_values(s0.model));
  EXPECT_EQ(res.state.stage, 1);
  EXPECT_EQ(res.state.buffer.cumulative, 1100u);
  EXPECT_EQ(res.state.buffer.samples.size(), s0.buffer.capacity);
  EXPECT_TRUE(res.history.epoch_loss.empty());

  ObservationBatch empty;
  empty.covariates = Matrix(0, 2);
  EXPECT_THROW(incremental_stage(s0, empty, cfg), std::invalid_argument);
}

TEST(Stage, MuZeroMatchesPlainTrainingTrajectory) {
  const StageState s0 = initial_state(31, 41);
  const DrcfrModel teacher_copy = s0.model;
  const ObservationBatch dk = gen_period(1, 800, 10, 5).train;

  IcepkdConfig cfg;
  cfg.mu = 0.0;
  cfg.epochs = 2;
  cfg.lr = 1e-3;
  cfg.seed = 9;
  const StageResult res = incremental_stage(s0, dk, cfg);

  DrcfrModel ref = s0.model;
  train_drcfr(ref, dk, cfg.epochs, cfg.lr, stage_train_seed(cfg, 1));
  EXPECT_TRUE(res.state.model.same_values(ref));

  // dropping the distillation term entirely gives the same trajectory
  IcepkdConfig cfg2 = cfg;
  cfg2.mu = 1.0;
  cfg2.use_kd = false;
  const StageResult res2 = incremental_stage(s0, dk, cfg2);
  EXPECT_TRUE(res2.state.model.same_values(ref));

  EXPECT_TRUE(s0.model.same_values(teacher_copy));
}

TEST(Stage, FullStageTrainsStudentLeavesTeacherFillsBuffer) {
  const StageState s0 = initial_state(61, 62);
  const DrcfrModel teacher_copy = s0.model;
  const ObservationBatch dk = gen_period(1, 400, 10, 6).train;

  IcepkdConfig cfg;
  cfg.epochs = 1;
  cfg.seed = 13;
  const StageResult res = incremental_stage(s0, dk, cfg);

  EXPECT_FALSE(res.state.model.same_values(s0.model));
  EXPECT_TRUE(s0.model.same_values(teacher_copy));
  EXPECT_EQ(res.state.buffer.samples.size(), s0.buffer.capacity);
  EXPECT_EQ(res.replay_kept + res.replay_fresh, s0.buffer.capacity);
  ASSERT_EQ(res.history.epoch_loss.size(), 1u);
  EXPECT_TRUE(std::isfinite(res.history.epoch_loss[0]));

  IcepkdConfig ab = cfg;
  ab.use_proxy = false;
  EXPECT_TRUE(std::isfinite(incremental_stage(s0, dk, ab).history.epoch_loss[0]));
  ab = cfg;
  ab.use_replay = false;
  EXPECT_TRUE(std::isfinite(incremental_stage(s0, dk, ab).history.epoch_loss[0]));
}

TEST(SelectInitial, DeterministicAndPicksBestScore) {
  DrcfrConfig c = tiny_config();
  c.epochs = 1;
  const ObservationBatch d0 = gen_period(0, 500, 10, 7).train;

  const InitialSelection a = select_initial_model(d0, c, 3, 99);
  const InitialSelection b = select_initial_model(d0, c, 3, 99);
  ASSERT_EQ(a.scores.size(), 3u);
  EXPECT_EQ(a.chosen, b.chosen);
  for (std::size_t r = 0; r < 3; ++r) EXPECT_DOUBLE_EQ(a.scores[r], b.scores[r]);
  EXPECT_TRUE(a.model.same_values(b.model));

  ASSERT_TRUE(std::isfinite(a.scores[a.chosen]));
  for (double s : a.scores)
    if (std::isfinite(s)) EXPECT_GE(a.scores[a.chosen], s);

  const InitialSelection single = select_initial_model(d0, c, 1, 99);
  EXPECT_EQ(single.chosen, 0u);
  EXPECT_EQ(single.scores.size(), 1u);

  EXPECT_THROW(select_initial_model(d0, c, 0, 99), std::invalid_argument);
}

TEST(Stream, CountersArtifactsAndDeterminism) {
  namespace fs = std::filesystem;
  const ObservationBatch d0 = gen_period(0, 800, 10, 3).train;
  const std::vector<ObservationBatch> stream = {gen_period(1, 400, 10, 4).train,
                                                gen_period(2, 300, 10, 5).train};
  DrcfrConfig c = tiny_config();
  c.epochs = 1;
  IcepkdConfig cfg;
  cfg.restarts = 1;
  cfg.epochs = 1;
  cfg.lr = 1e-3;
  cfg.seed = 17;

  const std::string dir1 = testing::TempDir() + "stream_a";
  const StreamResult r1 = run_stream(d0, stream, c, cfg, dir1);
  ASSERT_EQ(r1.stages.size(), 2u);
  EXPECT_EQ(r1.stages[0].state.buffer.cumulative, 1200u);
  EXPECT_EQ(r1.stages[1].state.buffer.cumulative, 1500u);
  EXPECT_EQ(r1.stages[1].state.buffer.samples.size(), 8u);

  for (const char* name : {"stage_000_model.json", "stage_000_buffer.json",
                           "stage_001_model.json", "stage_001_buffer.json",
                           "stage_001_manifest.json", "stage_002_model.json",
                           "stage_002_buffer.json", "stage_002_manifest.json"})
    EXPECT_TRUE(fs::exists(fs::path(dir1) / name)) << name;

  const DrcfrModel loaded = load_model((fs::path(dir1) / "stage_002_model.json").string());
  EXPECT_TRUE(loaded.same_values(r1.stages[1].state.model));
  const ReplayBuffer rb = load_buffer((fs::path(dir1) / "stage_002_buffer.json").string());
  EXPECT_EQ(rb.capacity, r1.stages[1].state.buffer.capacity);
  EXPECT_EQ(rb.cumulative, r1.stages[1].state.buffer.cumulative);
  EXPECT_EQ(rb.samples.covariates.data, r1.stages[1].state.buffer.samples.covariates.data);

  // same seed, different directory: identical results and artifact bytes
  const std::string dir2 = testing::TempDir() + "stream_b";
  const StreamResult r2 = run_stream(d0, stream, c, cfg, dir2);
  EXPECT_TRUE(r2.stages[1].state.model.same_values(r1.stages[1].state.model));
  for (const char* name : {"stage_002_model.json", "stage_002_manifest.json"}) {
    std::ifstream f1(fs::path(dir1) / name), f2(fs::path(dir2) / name);
    const std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    const std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    EXPECT_FALSE(b1.empty());
    EXPECT_EQ(b1, b2) << name;
  }

  const StreamResult one = run_stream(d0, {stream[0]}, c, cfg);
  EXPECT_EQ(one.stages.size(), 1u);
  EXPECT_THROW(run_stream(d0, {}, c, cfg), std::invalid_argument);
}

}  // namespace
}  // namespace upliftlab
