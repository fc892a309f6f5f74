#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "gtest/gtest.h"
#include "test_util.hpp"
#include "upliftlab/datagen.hpp"
#include "upliftlab/drcfr.hpp"

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
  c.sinkhorn.max_iters = 5000;
  c.sinkhorn.tol = 1e-12;
  return c;
}

// A small batch containing eight rows of every arm.
ObservationBatch balanced_batch(std::uint64_t seed = 3) {
  const PeriodDataset ds = gen_period(0, 800, 10, seed);
  std::vector<std::size_t> take;
  int want[3] = {8, 8, 8};
  for (std::size_t i = 0; i < ds.train.size() && take.size() < 24; ++i) {
    const int t = ds.train.treatments[i];
    if (want[t] > 0) {
      --want[t];
      take.push_back(i);
    }
  }
  return ds.train.subset(take);
}

void zero_store(ParamStore& s) {
  for (Param& p : s) p.value.fill(0.0);
}

TEST(Drcfr, InitShapesAndParamCounts) {
  const DrcfrConfig c2 = DrcfrConfig::defaults(2);
  DrcfrModel m2 = DrcfrModel::init(c2, 1);
  EXPECT_GT(m2.total_params(), 7000u);
  EXPECT_LT(m2.total_params(), 10000u);
  const DrcfrConfig c10 = DrcfrConfig::defaults(10);
  DrcfrModel m10 = DrcfrModel::init(c10, 1);
  EXPECT_GT(m10.total_params(), 40000u);
  EXPECT_LT(m10.total_params(), 56000u);
  DrcfrModel again = DrcfrModel::init(c2, 1);
  EXPECT_TRUE(m2.same_values(again));
}

TEST(Drcfr, PredictAllRangeAndZeroHeads) {
  DrcfrModel m = DrcfrModel::init(tiny_config(), 11);
  const ObservationBatch batch = balanced_batch();
  const Matrix preds = predict_all(m, batch.covariates);
  ASSERT_EQ(preds.rows, batch.size());
  ASSERT_EQ(preds.cols, 3u);
  for (double v : preds.data) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  for (ParamStore& h : m.heads) zero_store(h);
  const Matrix mid = predict_all(m, batch.covariates);
  for (double v : mid.data) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(Drcfr, UpliftIsPairwiseDifference) {
  DrcfrModel m = DrcfrModel::init(tiny_config(), 13);
  const ObservationBatch batch = balanced_batch();
  const Matrix preds = predict_all(m, batch.covariates);
  const Matrix tau = uplift(m, batch.covariates);
  ASSERT_EQ(tau.cols, 2u);
  for (std::size_t i = 0; i < tau.rows; ++i)
    for (std::size_t t = 1; t < 3; ++t) {
      EXPECT_DOUBLE_EQ(tau(i, t - 1), preds(i, t) - preds(i, 0));
      EXPECT_GT(tau(i, t - 1), -1.0);
      EXPECT_LT(tau(i, t - 1), 1.0);
    }
}

TEST(Reweight, SpecArithmetic) {
  Matrix prop(1, 3);
  prop.data = {0.6, 0.3, 0.1};
  const std::vector<double> w =
      reweight_from_propensities(prop, {0}, {0.5, 0.3, 0.2});
  // 1 + (0.5/0.3)(0.3/0.6) + (0.5/0.2)(0.1/0.6)
  EXPECT_NEAR(w[0], 2.25, 1e-12);
}

TEST(Reweight, SymmetricCaseGivesArmCount) {
  DrcfrModel m = DrcfrModel::init(tiny_config(), 17);
  zero_store(m.propensity);  // uniform propensities
  ObservationBatch batch = balanced_batch();
  const std::vector<double> w = reweight(m, batch);
  for (double v : w) EXPECT_NEAR(v, 3.0, 1e-9);
}

TEST(Reweight, CertainPropensityGivesOne) {
  Matrix prop(1, 3);
  prop.data = {1.0, 0.0, 0.0};
  const std::vector<double> w = reweight_from_propensities(prop, {0}, {1.0 / 3, 1.0 / 3, 1.0 / 3});
  EXPECT_NEAR(w[0], 1.0, 1e-5);
  EXPECT_GE(w[0], 1.0);
}

TEST(Reweight, MissingArmThrows) {
  ObservationBatch batch = balanced_batch();
  for (int& t : batch.treatments)
    if (t == 2) t = 1;
  EXPECT_THROW(arm_frequencies(batch, 3), std::runtime_error);
}

TEST(Losses, FactualKnownValues) {
  DrcfrConfig cfg = tiny_config();
  cfg.alpha_ce = cfg.beta_im = cfg.gamma_ate = cfg.delta_mono = cfg.lambda_reg = 0.0;
  DrcfrModel m = DrcfrModel::init(cfg, 19);
  for (ParamStore& h : m.heads) zero_store(h);  // all predictions 0.5
  ObservationBatch batch = balanced_batch();
  for (int& y : batch.outcomes) y = 1;
  std::vector<double> ones(batch.size(), 1.0);
  const LossBreakdown b = loss_base(m, batch, false, &ones);
  EXPECT_NEAR(b.factual, std::log(2.0), 1e-12);
  EXPECT_NEAR(b.total, b.factual, 1e-12);  // degenerate composite
  std::vector<double> twos(batch.size(), 2.0);
  const LossBreakdown b2 = loss_base(m, batch, false, &twos);
  EXPECT_NEAR(b2.factual, 2.0 * std::log(2.0), 1e-12);
}

TEST(Losses, CeUniformClassifier) {
  DrcfrModel m = DrcfrModel::init(tiny_config(), 23);
  zero_store(m.classifier);
  const ObservationBatch batch = balanced_batch();
  const LossBreakdown b = loss_base(m, batch, false);
  EXPECT_NEAR(b.ce, std::log(3.0), 1e-12);
}

TEST(Losses, MonoStandaloneExamples) {
  Matrix preds(1, 3);
  preds.data = {0.2, 0.3, 0.5};
  EXPECT_DOUBLE_EQ(loss_mono_value(preds), 0.0);
  preds.data = {0.5, 0.3, 0.4};
  EXPECT_NEAR(loss_mono_value(preds), 0.2, 1e-12);
  Matrix many(4, 3);
  for (std::size_t i = 0; i < 4; ++i) {
    many(i, 0) = 0.1;
    many(i, 1) = 0.2;
    many(i, 2) = 0.3;
  }
  EXPECT_DOUBLE_EQ(loss_mono_value(many), 0.0);
}

TEST(Losses, AteStandaloneExample) {
  // Two arms; treated group-mean prediction 0.6 vs truth 0.5, control 0.4 both.
  Matrix preds(7, 2);
  std::vector<int> t = {0, 0, 0, 0, 0, 1, 1};
  std::vector<int> y = {0, 0, 0, 1, 1, 1, 0};
  for (std::size_t i = 0; i < 5; ++i) preds(i, 0) = 0.4;
  preds(5, 1) = 0.6;
  preds(6, 1) = 0.6;
  EXPECT_NEAR(loss_ate_value(preds, t, y), 0.1, 1e-12);
  // Permuting rows leaves the aggregate unchanged.
  Matrix perm(7, 2);
  std::vector<int> tp(7), yp(7);
  const std::size_t order[7] = {6, 0, 5, 1, 4, 2, 3};
  for (std::size_t i = 0; i < 7; ++i) {
    perm(i, 0) = preds(order[i], 0);
    perm(i, 1) = preds(order[i], 1);
    tp[i] = t[order[i]];
    yp[i] = y[order[i]];
  }
  EXPECT_NEAR(loss_ate_value(perm, tp, yp), 0.1, 1e-12);
}

double sqdist1d(double a, double b) { return (a - b) * (a - b); }

double brute_force_ot_1d(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<std::size_t> perm(a.size());
  std::iota(perm.begin(), perm.end(), 0u);
  double best = std::numeric_limits<double>::infinity();
  do {
    double c = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) c += sqdist1d(a[i], b[perm[i]]);
    best = std::min(best, c / static_cast<double>(a.size()));
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

TEST(Losses, ImbalanceMatchesAssignmentOracle) {
  // Identity representation on 1-d toy groups.
  Matrix rep(9, 1);
  rep.data = {0.0, 1.0, 2.0, 5.0, 6.0, 9.0, 12.0, 15.0, 20.0};
  const std::vector<int> t = {0, 0, 0, 1, 1, 1, 2, 2, 2};
  SinkhornOptions opt;
  opt.reg_units = 0.01;
  opt.max_iters = 2000;
  const double got = loss_imbalance_value(rep, t, 3, opt);
  const double exact = brute_force_ot_1d({0, 1, 2}, {5, 6, 9}) +
                       brute_force_ot_1d({0, 1, 2}, {12, 15, 20});
  EXPECT_NEAR(got, exact, 0.05 * exact);
  EXPECT_GE(got, 0.0);
}

TEST(Losses, ImbalanceZeroForIdenticalReps) {
  DrcfrModel m = DrcfrModel::init(tiny_config(), 29);
  zero_store(m.upsilon);  // every adjustment representation identical
  const ObservationBatch batch = balanced_batch();
  const LossBreakdown b = loss_base(m, batch, false);
  EXPECT_DOUBLE_EQ(b.imbalance, 0.0);
}

TEST(Losses, BreakdownMatchesStandaloneHelpers) {
  DrcfrModel m = DrcfrModel::init(tiny_config(), 31);
  const ObservationBatch batch = balanced_batch();
  const std::vector<double> freq = arm_frequencies(batch, 3);
  DrcfrTape tape = drcfr_forward(m, batch.covariates);
  const std::vector<double> w =
      reweight_from_propensities(tape.prop_probs, batch.treatments, freq);
  const LossBreakdown b = loss_base(m, batch, false);
  EXPECT_NEAR(b.factual, loss_factual_value(tape.preds, batch.treatments, batch.outcomes, w),
              1e-12);
  EXPECT_NEAR(b.ce, loss_ce_value(tape.class_probs, batch.treatments), 1e-12);
  EXPECT_NEAR(b.prop_ce, loss_ce_value(tape.prop_probs, batch.treatments), 1e-12);
  EXPECT_NEAR(b.mono, loss_mono_value(tape.preds), 1e-12);
  EXPECT_NEAR(b.ate, loss_ate_value(tape.preds, batch.treatments, batch.outcomes), 1e-12);
  EXPECT_NEAR(b.imbalance,
              loss_imbalance_value(tape.rep_upsilon, batch.treatments, 3, m.config.sinkhorn),
              1e-9);
  EXPECT_NEAR(b.reg, model_weight_norm(m), 1e-12);
}

TEST(Losses, EmptyArmInMinibatchWarnsInsteadOfThrowing) {
  DrcfrModel m = DrcfrModel::init(tiny_config(), 37);
  ObservationBatch full = balanced_batch();
  const std::vector<double> freq = arm_frequencies(full, 3);
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < full.size(); ++i)
    if (full.treatments[i] != 1) keep.push_back(i);
  const ObservationBatch mini = full.subset(keep);
  const LossBreakdown b = loss_base(m, mini, freq, false);
  EXPECT_FALSE(b.warnings.empty());
  EXPECT_TRUE(std::isfinite(b.total));
}

// Finite-difference verification of the composite gradient, term by term.
class DrcfrGradCheck : public ::testing::Test {
 protected:
  void run_check(DrcfrConfig cfg) {
    cfg.sinkhorn.max_iters = 5000;
    cfg.sinkhorn.tol = 1e-12;
    DrcfrModel model = DrcfrModel::init(cfg, 41);
    const ObservationBatch batch = balanced_batch(7);
    const std::vector<double> freq = arm_frequencies(batch, 3);
    // Freeze the factual re-weighting at its base-point values: the weights
    // are constants for gradient purposes.
    DrcfrTape tape = drcfr_forward(model, batch.covariates);
    const std::vector<double> w =
        reweight_from_propensities(tape.prop_probs, batch.treatments, freq);

    const auto loss = [&]() { return loss_base(model, batch, freq, false, &w).total; };
    model.zero_grads();
    loss_base(model, batch, freq, true, &w);
    model.for_each_store([&](ParamStore& s) { testutil::check_all_grads(loss, s); });
  }
};

TEST_F(DrcfrGradCheck, FactualOnly) {
  DrcfrConfig c = tiny_config();
  c.alpha_ce = c.beta_im = c.gamma_ate = c.delta_mono = c.lambda_reg = 0.0;
  run_check(c);
}

TEST_F(DrcfrGradCheck, CrossEntropyTerm) {
  DrcfrConfig c = tiny_config();
  c.alpha_ce = 1.0;
  c.beta_im = c.gamma_ate = c.delta_mono = c.lambda_reg = 0.0;
  run_check(c);
}

TEST_F(DrcfrGradCheck, ImbalanceTerm) {
  DrcfrConfig c = tiny_config();
  c.beta_im = 1.0;
  c.alpha_ce = c.gamma_ate = c.delta_mono = c.lambda_reg = 0.0;
  run_check(c);
}

TEST_F(DrcfrGradCheck, AteTerm) {
  DrcfrConfig c = tiny_config();
  c.gamma_ate = 1.0;
  c.alpha_ce = c.beta_im = c.delta_mono = c.lambda_reg = 0.0;
  run_check(c);
}

TEST_F(DrcfrGradCheck, MonoTerm) {
  DrcfrConfig c = tiny_config();
  c.delta_mono = 1.0;
  c.alpha_ce = c.beta_im = c.gamma_ate = c.lambda_reg = 0.0;
  run_check(c);
}

TEST_F(DrcfrGradCheck, RegTerm) {
  DrcfrConfig c = tiny_config();
  c.lambda_reg = 0.01;
  c.alpha_ce = c.beta_im = c.gamma_ate = c.delta_mono = 0.0;
  run_check(c);
}

TEST_F(DrcfrGradCheck, FullComposite) { run_check(tiny_config()); }

TEST(Losses, CompositeGradientIsSumOfTermGradients) {
  const ObservationBatch batch = balanced_batch(7);
  const std::vector<double> freq = arm_frequencies(batch, 3);

  const auto grads_for = [&](double a, double b, double g, double d, double l) {
    DrcfrConfig cfg = tiny_config();
    cfg.alpha_ce = a;
    cfg.beta_im = b;
    cfg.gamma_ate = g;
    cfg.delta_mono = d;
    cfg.lambda_reg = l;
    DrcfrModel model = DrcfrModel::init(cfg, 43);
    DrcfrTape tape = drcfr_forward(model, batch.covariates);
    const std::vector<double> w =
        reweight_from_propensities(tape.prop_probs, batch.treatments, freq);
    model.zero_grads();
    loss_base(model, batch, freq, true, &w);
    std::vector<double> flat;
    model.for_each_store([&](ParamStore& s) {
      for (Param& p : s) flat.insert(flat.end(), p.grad.data.begin(), p.grad.data.end());
    });
    return flat;
  };

  const std::vector<double> full = grads_for(1, 1, 1, 1, 0.01);
  const std::vector<double> fac = grads_for(0, 0, 0, 0, 0);
  const std::vector<double> parts[5] = {grads_for(1, 0, 0, 0, 0), grads_for(0, 1, 0, 0, 0),
                                        grads_for(0, 0, 1, 0, 0), grads_for(0, 0, 0, 1, 0),
                                        grads_for(0, 0, 0, 0, 0.01)};
  for (std::size_t j = 0; j < full.size(); ++j) {
    double want = -4.0 * fac[j];
    for (const std::vector<double>& p : parts) want += p[j];
    EXPECT_NEAR(full[j], want, 1e-9 * std::max(1.0, std::abs(full[j])));
  }
}

TEST(Train, LossDecreasesAndDeterministic) {
  DrcfrConfig cfg = tiny_config();
  cfg.batch_size = 64;
  const PeriodDataset ds = gen_period(0, 500, 10, 47);
  DrcfrModel m1 = DrcfrModel::init(cfg, 51);
  DrcfrModel m2 = DrcfrModel::init(cfg, 51);
  const TrainHistory h1 = train_drcfr(m1, ds.train, 20, 1e-3, 9);
  const TrainHistory h2 = train_drcfr(m2, ds.train, 20, 1e-3, 9);
  ASSERT_EQ(h1.epoch_loss.size(), 20u);
  EXPECT_LT(h1.epoch_loss.back(), h1.epoch_loss.front());
  EXPECT_EQ(h1.epoch_loss, h2.epoch_loss);
  EXPECT_TRUE(m1.same_values(m2));
}

TEST(Train, ZeroEpochsLeavesModelUntouched) {
  DrcfrConfig cfg = tiny_config();
  const PeriodDataset ds = gen_period(0, 300, 10, 53);
  DrcfrModel m = DrcfrModel::init(cfg, 55);
  const DrcfrModel before = m;
  const TrainHistory h = train_drcfr(m, ds.train, 0, 1e-3, 1);
  EXPECT_TRUE(h.epoch_loss.empty());
  EXPECT_TRUE(m.same_values(before));
}

}  // namespace
}  // namespace upliftlab
