#pragma once

// Drifting synthetic streams. Seven periods, three arms. Response surfaces
// are fixed polynomials in (x1, x2) whose coefficients move with a piecewise
// drift schedule. Training covariates cluster in four truncated normals
// whose parameters are redrawn every period, so the region the model learns
// from keeps moving; test covariates are uniform over the unit box with
// randomized arms, probing the whole domain each period. A 10-d variant
// reuses the same surfaces on the first two coordinates and adds a small
// linear term, common to all arms, over the remaining ones.

#include <cstdint>
#include <stdexcept>

#include "upliftlab/dataset.hpp"
#include "upliftlab/matrix.hpp"
#include "upliftlab/prob.hpp"
#include "upliftlab/rng.hpp"

namespace upliftlab {

constexpr int kSyntheticArms = 3;
constexpr int kSyntheticPeriods = 7;  // k in 0..6

inline double drift(int i, int k) {
  if (i < 0 || i > 2) throw std::out_of_range("drift: treatment index must be 0..2");
  if (k < 0 || k > 6) throw std::out_of_range("drift: period must be 0..6");
  if (k <= 3) return 0.1 * i * k + 0.2 * k;
  return -0.1 * i * k + 0.65 * i - 0.2 * k + 1.3;
}

inline double response_logit(int k, int t, double x1, double x2) {
  const double d = drift(t, k);
  switch (t) {
    case 0:
      return 0.6 * x1 * x1 + x1 * x2 * x2 - (0.5 - d) * x1 - (0.6 - 0.5 * d) * x2 + 0.2 * d;
    case 1:
      return 0.7 * x1 * x1 + 0.1 * x2 * x2 + x1 * x2 * x2 - (0.5 - d) * x1 -
             (0.5 - 0.5 * d) * x2 + 0.2 * d;
    case 2:
      return 0.9 * x1 * x1 + 0.15 * x2 * x2 + x1 * x2 * x2 - (0.5 - d) * x1 -
             (0.5 - 0.5 * d) * x2 + 0.2 * d;
    default:
      throw std::out_of_range("response_logit: treatment must be 0..2");
  }
}

inline double response_prob(int k, int t, double x1, double x2, double noise = 0.0) {
  return sigmoid(response_logit(k, t, x1, x2) + noise);
}

constexpr double kNoiseStdev = 0.01;           // epsilon ~ N(0, 0.0001), variance reading
constexpr double kHighdimLinearCoeff = 0.1;    // shared extra-dimension term

// Extra-dimension contribution for d > 2 rows; identical for every arm so the
// arm ordering of the 2-d surfaces is preserved.
inline double highdim_shift(const Matrix& x, std::size_t row) {
  double s = 0.0;
  for (std::size_t j = 2; j < x.cols; ++j) s += x(row, j) - 0.5;
  return kHighdimLinearCoeff * s;
}

// Noise-off ground-truth probabilities for every arm; rows may have d >= 2.
inline Matrix true_prob_matrix(int k, const Matrix& x) {
  if (x.cols < 2) throw std::invalid_argument("true_prob_matrix: need at least 2 covariates");
  Matrix probs(x.rows, kSyntheticArms);
  for (std::size_t i = 0; i < x.rows; ++i) {
    const double shift = x.cols > 2 ? highdim_shift(x, i) : 0.0;
    for (int t = 0; t < kSyntheticArms; ++t)
      probs(i, t) = sigmoid(response_logit(k, t, x(i, 0), x(i, 1)) + shift);
  }
  return probs;
}

struct CovariateMixture {
  struct Component {
    std::vector<double> mean;
    std::vector<double> stdev;
  };
  std::size_t dim = 2;
  std::vector<Component> normals;  // truncated to [0,1]^d by clipping
  std::vector<double> weights;     // normals first, uniform component last

  // Per-period training clusters: means U[0.2,0.8], stdevs U[0.01,0.1] per
  // dim, equal weights over the four normals. The trailing weight slot is
  // the uniform component the sampler expects; it carries no mass here.
  static CovariateMixture draw(std::size_t dim, Rng& rng) {
    CovariateMixture mix;
    mix.dim = dim;
    mix.normals.resize(4);
    for (Component& c : mix.normals) {
      c.mean.resize(dim);
      c.stdev.resize(dim);
      for (std::size_t d = 0; d < dim; ++d) {
        c.mean[d] = rng.uniform(0.2, 0.8);
        c.stdev[d] = rng.uniform(0.01, 0.1);
      }
    }
    mix.weights.assign(4, 0.25);
    mix.weights.push_back(0.0);
    return mix;
  }

  static CovariateMixture uniform_only(std::size_t dim) {
    CovariateMixture mix;
    mix.dim = dim;
    mix.weights.assign(1, 1.0);
    return mix;
  }
};

inline Matrix sample_covariates(const CovariateMixture& mix, std::size_t n, Rng& rng) {
  if (n == 0) throw std::invalid_argument("sample_covariates: n must be positive");
  if (mix.weights.size() != mix.normals.size() + 1)
    throw std::invalid_argument("sample_covariates: weights must cover normals plus uniform");
  Matrix x(n, mix.dim);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = rng.uniform01();
    double acc = 0.0;
    std::size_t comp = mix.weights.size() - 1;
    for (std::size_t c = 0; c < mix.weights.size(); ++c) {
      acc += mix.weights[c];
      if (u < acc) {
        comp = c;
        break;
      }
    }
    if (comp < mix.normals.size()) {
      const CovariateMixture::Component& nc = mix.normals[comp];
      for (std::size_t d = 0; d < mix.dim; ++d) {
        const double v = rng.normal(nc.mean[d], nc.stdev[d]);
        x(i, d) = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
      }
    } else {
      for (std::size_t d = 0; d < mix.dim; ++d) x(i, d) = rng.uniform01();
    }
  }
  return x;
}

inline Matrix sample_covariates(const CovariateMixture& mix, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  return sample_covariates(mix, n, rng);
}

// Region-preferred assignment: the preferred arm wins a Bernoulli(0.6) test,
// otherwise a Bernoulli(0.5) splits the remaining arms in index order.
inline int assign_treatment_train(double x1, double x2, Rng& rng) {
  const double s = x1 + x2;
  int preferred;
  if (s < 0.8)
    preferred = 0;
  else if (s > 1.2)
    preferred = 1;
  else
    preferred = 2;
  int second = -1, third = -1;
  for (int t = 0; t < kSyntheticArms; ++t) {
    if (t == preferred) continue;
    (second < 0 ? second : third) = t;
  }
  if (rng.bernoulli(0.6)) return preferred;
  return rng.bernoulli(0.5) ? second : third;
}

namespace detail {

inline PeriodDataset gen_period_dim(int k, std::size_t n_train, std::size_t n_test,
                                    std::uint64_t seed, std::size_t dim) {
  if (k < 0 || k >= kSyntheticPeriods) throw std::out_of_range("gen_period: period must be 0..6");
  Rng base(derive_seed(seed, static_cast<std::uint64_t>(k)));
  Rng mix_rng = base.child(1);
  Rng train_x_rng = base.child(2);
  Rng train_t_rng = base.child(3);
  Rng train_y_rng = base.child(4);
  Rng test_x_rng = base.child(5);
  Rng test_t_rng = base.child(6);
  Rng test_y_rng = base.child(7);

  const CovariateMixture train_mix = CovariateMixture::draw(dim, mix_rng);
  const CovariateMixture test_mix = CovariateMixture::uniform_only(dim);

  const auto fill_batch = [&](std::size_t n, Rng& x_rng, Rng& t_rng, Rng& y_rng, bool rct) {
    ObservationBatch batch;
    batch.period = k;
    batch.covariates = sample_covariates(rct ? test_mix : train_mix, n, x_rng);
    batch.true_probs = true_prob_matrix(k, batch.covariates);
    batch.treatments.resize(n);
    batch.outcomes.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const int t = rct ? static_cast<int>(t_rng.uniform_index(kSyntheticArms))
                        : assign_treatment_train(batch.covariates(i, 0), batch.covariates(i, 1),
                                                 t_rng);
      batch.treatments[i] = t;
      const double shift = dim > 2 ? highdim_shift(batch.covariates, i) : 0.0;
      const double noise = y_rng.normal(0.0, kNoiseStdev);
      const double p =
          sigmoid(response_logit(k, t, batch.covariates(i, 0), batch.covariates(i, 1)) + shift +
                  noise);
      batch.outcomes[i] = y_rng.bernoulli(p) ? 1 : 0;
    }
    return batch;
  };

  PeriodDataset ds;
  ds.period = k;
  ds.train = fill_batch(n_train, train_x_rng, train_t_rng, train_y_rng, false);
  ds.test = fill_batch(n_test, test_x_rng, test_t_rng, test_y_rng, true);
  ds.rct_test = true;
  return ds;
}

}  // namespace detail

inline PeriodDataset gen_period(int k, std::size_t n_train, std::size_t n_test,
                                std::uint64_t seed) {
  return detail::gen_period_dim(k, n_train, n_test, seed, 2);
}

inline PeriodDataset gen_highdim_period(int k, std::size_t n_train, std::size_t n_test,
                                        std::uint64_t seed) {
  return detail::gen_period_dim(k, n_train, n_test, seed, 10);
}

}  // namespace upliftlab
