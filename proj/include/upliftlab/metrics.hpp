#pragma once

// Evaluation on randomized test data: ATE error, PEHE (printed-formula form,
// mean squared effect error), multi-arm QINI curves and coefficient, the
// budget-allocation cost/reward curve with its normalized area (RAS-AUCC),
// and the period-stability summary statistics.

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "upliftlab/dataset.hpp"
#include "upliftlab/matrix.hpp"

namespace upliftlab {

struct CostModel {
  std::vector<double> amount;  // coupon amount per arm, paid on conversion

  static CostModel linear(int num_arms) {
    CostModel cm;
    for (int t = 0; t < num_arms; ++t) cm.amount.push_back(static_cast<double>(t));
    return cm;
  }

  void validate() const {
    if (amount.size() < 2) throw std::invalid_argument("CostModel: need at least two arms");
    for (std::size_t t = 1; t < amount.size(); ++t)
      if (amount[t] < amount[t - 1])
        throw std::invalid_argument("CostModel: amounts must be non-decreasing");
  }

  double cost(int arm, int outcome) const {
    return amount[static_cast<std::size_t>(arm)] * static_cast<double>(outcome);
  }
};

inline Matrix uplift_from_probs(const Matrix& probs) {
  if (probs.cols < 2) throw std::invalid_argument("uplift_from_probs: need at least two arms");
  Matrix tau(probs.rows, probs.cols - 1);
  for (std::size_t i = 0; i < probs.rows; ++i)
    for (std::size_t t = 1; t < probs.cols; ++t) tau(i, t - 1) = probs(i, t) - probs(i, 0);
  return tau;
}

// Mean absolute gap between estimated and true per-arm average effects.
// Truth comes from ground-truth probabilities when present, otherwise from
// empirical group means on the randomized test assignment.
inline double ate_error(const Matrix& preds, const ObservationBatch& batch) {
  const std::size_t n = preds.rows;
  const std::size_t arms = preds.cols;
  if (n != batch.size()) throw std::invalid_argument("ate_error: row count mismatch");
  double err = 0.0;
  if (batch.has_true_probs()) {
    if (batch.true_probs.cols != arms)
      throw std::invalid_argument("ate_error: true_probs arm count mismatch");
    for (std::size_t t = 1; t < arms; ++t) {
      double est = 0.0, truth = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        est += preds(i, t) - preds(i, 0);
        truth += batch.true_probs(i, t) - batch.true_probs(i, 0);
      }
      err += std::abs(est - truth) / static_cast<double>(n);
    }
  } else {
    std::vector<double> sum(arms, 0.0), cnt(arms, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      sum[static_cast<std::size_t>(batch.treatments[i])] += batch.outcomes[i];
      cnt[static_cast<std::size_t>(batch.treatments[i])] += 1.0;
    }
    for (std::size_t t = 0; t < arms; ++t)
      if (cnt[t] == 0.0)
        throw std::runtime_error("ate_error: arm " + std::to_string(t) +
                                 " missing and no ground truth available");
    for (std::size_t t = 1; t < arms; ++t) {
      double est = 0.0;
      for (std::size_t i = 0; i < n; ++i) est += preds(i, t) - preds(i, 0);
      est /= static_cast<double>(n);
      const double truth = sum[t] / cnt[t] - sum[0] / cnt[0];
      err += std::abs(est - truth);
    }
  }
  return err / static_cast<double>(arms - 1);
}

// Mean squared error between estimated and true individual effects, averaged
// over samples and arms (the formula form; no square root is applied).
inline double pehe(const Matrix& pred_tau, const Matrix& true_tau) {
  if (!pred_tau.same_shape(true_tau)) throw std::invalid_argument("pehe: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < pred_tau.size(); ++i) {
    const double d = pred_tau.data[i] - true_tau.data[i];
    s += d * d;
  }
  return s / static_cast<double>(pred_tau.size());
}

struct QiniCurve {
  std::vector<double> m;  // evaluated population fractions
  std::vector<double> v;  // V(m) values
  std::size_t universe = 0;
  double v_full = 0.0;  // V(1)
};

// QINI values for one treated arm versus control, over a uniform fraction
// grid. Rows outside {arm, control} are ignored; ranking is by descending
// estimated effect with ties broken by sample index.
inline QiniCurve qini_values(const Matrix& preds, const ObservationBatch& batch, int arm,
                             int grid = 100) {
  if (arm < 1 || static_cast<std::size_t>(arm) >= preds.cols)
    throw std::invalid_argument("qini_values: arm must be a treated arm index");
  if (preds.rows != batch.size()) throw std::invalid_argument("qini_values: row mismatch");
  std::vector<std::size_t> universe;
  for (std::size_t i = 0; i < batch.size(); ++i)
    if (batch.treatments[i] == arm || batch.treatments[i] == 0) universe.push_back(i);
  QiniCurve curve;
  curve.universe = universe.size();
  if (universe.empty()) return curve;

  std::stable_sort(universe.begin(), universe.end(), [&](std::size_t a, std::size_t b) {
    const double ua = preds(a, static_cast<std::size_t>(arm)) - preds(a, 0);
    const double ub = preds(b, static_cast<std::size_t>(arm)) - preds(b, 0);
    if (ua != ub) return ua > ub;
    return a < b;
  });

  // Prefix counts along the ranking.
  const std::size_t n = universe.size();
  std::vector<double> treated_pos(n + 1, 0.0), control_pos(n + 1, 0.0), treated_cnt(n + 1, 0.0),
      control_cnt(n + 1, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t i = universe[r];
    treated_pos[r + 1] = treated_pos[r] + (batch.treatments[i] == arm && batch.outcomes[i] == 1);
    control_pos[r + 1] = control_pos[r] + (batch.treatments[i] == 0 && batch.outcomes[i] == 1);
    treated_cnt[r + 1] = treated_cnt[r] + (batch.treatments[i] == arm);
    control_cnt[r + 1] = control_cnt[r] + (batch.treatments[i] == 0);
  }
  for (int j = 1; j <= grid; ++j) {
    const double frac = static_cast<double>(j) / static_cast<double>(grid);
    const std::size_t take = static_cast<std::size_t>(
        std::ceil(frac * static_cast<double>(n) - 1e-12));
    if (control_cnt[take] == 0.0) continue;  // grid starts at first control presence
    const double value =
        treated_pos[take] - control_pos[take] * treated_cnt[take] / control_cnt[take];
    curve.m.push_back(frac);
    curve.v.push_back(value);
  }
  if (!curve.v.empty()) curve.v_full = curve.v.back();
  return curve;
}

// Per-arm baseline-adjusted area under the QINI curve, normalized by the
// arm's universe size and averaged across treated arms.
inline double qini_coefficient(const Matrix& preds, const ObservationBatch& batch,
                               std::vector<std::string>* warnings = nullptr) {
  double total = 0.0;
  int used = 0;
  for (std::size_t arm = 1; arm < preds.cols; ++arm) {
    const QiniCurve curve = qini_values(preds, batch, static_cast<int>(arm));
    if (curve.m.empty()) {
      if (warnings)
        warnings->push_back("qini: arm " + std::to_string(arm) + " has no usable grid point");
      continue;
    }
    double area = 0.0, prev_m = 0.0, prev_v = 0.0;
    for (std::size_t p = 0; p < curve.m.size(); ++p) {
      area += 0.5 * (prev_v + curve.v[p]) * (curve.m[p] - prev_m);
      prev_m = curve.m[p];
      prev_v = curve.v[p];
    }
    total += (area - 0.5 * curve.v_full) / static_cast<double>(curve.universe);
    ++used;
  }
  if (used == 0) throw std::runtime_error("qini_coefficient: no arm/control pair available");
  return total / static_cast<double>(used);
}

// Greedy budget allocation: candidate upgrades ranked by marginal ROI, walked
// in order, applied while the running expected cost stays within the budget;
// the walk stops at the first candidate that would overflow. Everyone starts
// at control. Candidates with non-positive expected incremental cost are
// excluded.
inline std::vector<int> greedy_allocate(const Matrix& preds, const CostModel& cm, double budget) {
  cm.validate();
  if (preds.cols != cm.amount.size())
    throw std::invalid_argument("greedy_allocate: arm count mismatch");
  if (budget < 0.0) throw std::invalid_argument("greedy_allocate: negative budget");
  struct Candidate {
    double roi;
    std::size_t i;
    int t;
    double dcost;
  };
  std::vector<Candidate> cands;
  cands.reserve(preds.rows * (preds.cols - 1));
  for (std::size_t i = 0; i < preds.rows; ++i)
    for (std::size_t t = 1; t < preds.cols; ++t) {
      const double dcost = cm.amount[t] * preds(i, t) - cm.amount[0] * preds(i, 0);
      if (dcost <= 0.0) continue;
      const double droi = (preds(i, t) - preds(i, 0)) / dcost;
      cands.push_back({droi, i, static_cast<int>(t), dcost});
    }
  std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    if (a.roi != b.roi) return a.roi > b.roi;
    if (a.i != b.i) return a.i < b.i;
    return a.t < b.t;
  });
  std::vector<int> alloc(preds.rows, 0);
  double spent = 0.0;
  for (const Candidate& c : cands) {
    if (alloc[c.i] != 0) continue;  // keep the highest-ROI upgrade per individual
    if (spent + c.dcost > budget * (1.0 + 1e-12) + 1e-12) break;
    alloc[c.i] = c.t;
    spent += c.dcost;
  }
  return alloc;
}

struct RasPoint {
  double cost = 0.0;
  double reward = 0.0;
};

// Incremental cost and reward of an allocation, estimated on randomized data
// by matching: treated rows whose factual arm equals the allocated arm
// against all control rows, both scaled to the full population.
inline std::optional<RasPoint> ras_delta(const ObservationBatch& batch,
                                         const std::vector<int>& alloc, const CostModel& cm,
                                         std::vector<std::string>* warnings = nullptr) {
  if (alloc.size() != batch.size()) throw std::invalid_argument("ras_delta: length mismatch");
  double m_cost = 0.0, m_reward = 0.0, c_cost = 0.0, c_reward = 0.0;
  double m_cnt = 0.0, c_cnt = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const int t = batch.treatments[i];
    if (t > 0 && t == alloc[i]) {
      m_cost += cm.cost(t, batch.outcomes[i]);
      m_reward += batch.outcomes[i];
      m_cnt += 1.0;
    } else if (t == 0) {
      c_cost += cm.cost(0, batch.outcomes[i]);
      c_reward += batch.outcomes[i];
      c_cnt += 1.0;
    }
  }
  if (m_cnt == 0.0 || c_cnt == 0.0) {
    if (warnings)
      warnings->push_back(m_cnt == 0.0 ? "ras: no treated row matches the allocation"
                                       : "ras: no control rows");
    return std::nullopt;
  }
  const double n = static_cast<double>(batch.size());
  return RasPoint{n * (m_cost / m_cnt - c_cost / c_cnt),
                  n * (m_reward / m_cnt - c_reward / c_cnt)};
}

struct RasCurve {
  std::vector<RasPoint> points;  // sorted by cost, starting at the origin
  RasPoint endpoint;             // everyone at the largest arm
  double area_curve = 0.0;
  double area_line = 0.0;
  double aucc = 0.0;
  std::vector<std::string> warnings;
};

namespace detail {

// Incremental cost/reward of a partial allocation, estimated within the
// targeted subpopulation only: treated rows whose factual arm matches the
// allocation against control rows that the allocation also targets, scaled
// by the targeted count. At full coverage this equals ras_delta; restricting
// the control mean to the targeted rows removes the baseline-selection bias
// that a global control mean would add to mid-budget points.
inline std::optional<RasPoint> targeted_delta(const ObservationBatch& batch,
                                              const std::vector<int>& alloc,
                                              const CostModel& cm) {
  double m_cost = 0.0, m_reward = 0.0, c_cost = 0.0, c_reward = 0.0;
  double m_cnt = 0.0, c_cnt = 0.0, targeted = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (alloc[i] == 0) continue;
    targeted += 1.0;
    const int t = batch.treatments[i];
    if (t == alloc[i]) {
      m_cost += cm.cost(t, batch.outcomes[i]);
      m_reward += batch.outcomes[i];
      m_cnt += 1.0;
    } else if (t == 0) {
      c_cost += cm.cost(0, batch.outcomes[i]);
      c_reward += batch.outcomes[i];
      c_cnt += 1.0;
    }
  }
  if (m_cnt == 0.0 || c_cnt == 0.0) return std::nullopt;
  return RasPoint{targeted * (m_cost / m_cnt - c_cost / c_cnt),
                  targeted * (m_reward / m_cnt - c_reward / c_cnt)};
}

}  // namespace detail

// Sweeps the expected-cost budget from zero to the everyone-at-largest-arm
// level, evaluates the realized (cost, reward) point per budget, and
// normalizes the curve area against the straight line to the forced
// largest-arm endpoint.
inline RasCurve ras_curve(const Matrix& preds, const ObservationBatch& batch,
                          const CostModel& cm, int levels = 50) {
  if (preds.rows != batch.size()) throw std::invalid_argument("ras_curve: row mismatch");
  cm.validate();
  RasCurve curve;
  const std::size_t arms = preds.cols;
  double max_budget = 0.0;
  for (std::size_t i = 0; i < preds.rows; ++i) {
    const double dc = cm.amount[arms - 1] * preds(i, arms - 1) - cm.amount[0] * preds(i, 0);
    if (dc > 0.0) max_budget += dc;
  }
  const std::vector<int> max_alloc(batch.size(), static_cast<int>(arms - 1));
  const std::optional<RasPoint> end = ras_delta(batch, max_alloc, cm, &curve.warnings);
  if (!end) throw std::runtime_error("ras_curve: largest-arm endpoint undefined");
  curve.endpoint = *end;

  curve.points.push_back(RasPoint{0.0, 0.0});
  for (int j = 1; j <= levels; ++j) {
    const double b = max_budget * static_cast<double>(j) / static_cast<double>(levels);
    const std::vector<int> alloc = greedy_allocate(preds, cm, b);
    const std::optional<RasPoint> pt = detail::targeted_delta(batch, alloc, cm);
    if (pt)
      curve.points.push_back(*pt);
    else if (std::count(alloc.begin(), alloc.end(), 0) < static_cast<long>(alloc.size()))
      curve.warnings.push_back("ras: budget point undefined, skipped");
  }
  curve.points.push_back(curve.endpoint);
  std::sort(curve.points.begin(), curve.points.end(), [](const RasPoint& a, const RasPoint& b) {
    if (a.cost != b.cost) return a.cost < b.cost;
    return a.reward < b.reward;
  });

  for (std::size_t p = 1; p < curve.points.size(); ++p)
    curve.area_curve += 0.5 * (curve.points[p - 1].reward + curve.points[p].reward) *
                        (curve.points[p].cost - curve.points[p - 1].cost);
  curve.area_line = 0.5 * curve.endpoint.cost * curve.endpoint.reward;
  if (curve.area_line == 0.0) throw std::runtime_error("ras_curve: straight-line area is zero");
  curve.aucc = (curve.area_curve - curve.area_line) / curve.area_line;
  return curve;
}

inline double ras_aucc(const Matrix& preds, const ObservationBatch& batch, const CostModel& cm,
                       int levels = 50) {
  return ras_curve(preds, batch, cm, levels).aucc;
}

// Signed percent improvement of `value` over `baseline`; the sign flips for
// smaller-is-better metrics so positive always means better.
inline double improvement(double value, double baseline, bool larger_better) {
  if (baseline == 0.0) throw std::invalid_argument("improvement: zero baseline");
  const double raw = (value - baseline) / std::abs(baseline) * 100.0;
  return larger_better ? raw : -raw;
}

inline double prio10(const std::vector<double>& improvements) {
  if (improvements.empty()) throw std::invalid_argument("prio10: empty series");
  double c = 0.0;
  for (double v : improvements) c += v > 10.0 ? 1.0 : 0.0;
  return 100.0 * c / static_cast<double>(improvements.size());
}

inline double prdu5(const std::vector<double>& improvements) {
  if (improvements.empty()) throw std::invalid_argument("prdu5: empty series");
  double c = 0.0;
  for (double v : improvements) c += v > -5.0 ? 1.0 : 0.0;
  return 100.0 * c / static_cast<double>(improvements.size());
}

inline double ad(const std::vector<double>& series, const std::vector<double>& baseline) {
  if (series.empty() || series.size() != baseline.size())
    throw std::invalid_argument("ad: series lengths must match and be non-empty");
  double s = 0.0;
  for (std::size_t i = 0; i < series.size(); ++i) s += series[i] - baseline[i];
  return s / static_cast<double>(series.size());
}

}  // namespace upliftlab
