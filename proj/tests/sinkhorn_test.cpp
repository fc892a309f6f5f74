#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "gtest/gtest.h"
#include "test_util.hpp"
#include "upliftlab/matrix.hpp"
#include "upliftlab/rng.hpp"
#include "upliftlab/sinkhorn.hpp"

namespace upliftlab {
namespace {

double sqdist(const Matrix& a, std::size_t i, const Matrix& b, std::size_t j) {
  double s = 0.0;
  for (std::size_t d = 0; d < a.cols; ++d) {
    const double diff = a(i, d) - b(j, d);
    s += diff * diff;
  }
  return s;
}

// Exact OT between equal-size uniform point sets: best matching over all
// permutations (Birkhoff: extreme points of the polytope are permutations).
double brute_force_ot(const Matrix& a, const Matrix& b) {
  const std::size_t n = a.rows;
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0u);
  double best = std::numeric_limits<double>::infinity();
  do {
    double c = 0.0;
    for (std::size_t i = 0; i < n; ++i) c += sqdist(a, i, b, perm[i]);
    best = std::min(best, c / static_cast<double>(n));
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

Matrix points(std::initializer_list<double> xs) {
  Matrix m(xs.size(), 1);
  std::copy(xs.begin(), xs.end(), m.data.begin());
  return m;
}

TEST(Sinkhorn, MatchesBruteForceOn1d) {
  const Matrix a = points({0.0, 1.0, 2.0});
  const Matrix b = points({3.0, 5.0, 9.0});
  const double exact = brute_force_ot(a, b);
  SinkhornOptions opt;
  opt.reg_units = 0.01;
  opt.max_iters = 2000;
  const SinkhornResult res = sinkhorn_transport(a, b, opt);
  EXPECT_NEAR(res.value, exact, 0.05 * exact);
}

TEST(Sinkhorn, MatchesBruteForceOn2d) {
  Rng rng(101);
  Matrix a(5, 2), b(5, 2);
  for (double& v : a.data) v = rng.uniform(0.0, 4.0);
  for (double& v : b.data) v = rng.uniform(1.0, 6.0);
  const double exact = brute_force_ot(a, b);
  SinkhornOptions opt;
  opt.reg_units = 0.01;
  opt.max_iters = 2000;
  const SinkhornResult res = sinkhorn_transport(a, b, opt);
  EXPECT_NEAR(res.value, exact, 0.05 * exact);
}

TEST(Sinkhorn, ExactlySymmetric) {
  Rng rng(7);
  Matrix a(4, 3), b(6, 3);
  for (double& v : a.data) v = rng.normal();
  for (double& v : b.data) v = rng.normal();
  EXPECT_EQ(sinkhorn_distance(a, b), sinkhorn_distance(b, a));
  SinkhornOptions opt;  // also at non-default settings
  opt.reg_units = 0.3;
  opt.max_iters = 7;
  EXPECT_EQ(sinkhorn_transport(a, b, opt).value, sinkhorn_transport(b, a, opt).value);
}

TEST(Sinkhorn, IdenticalSetsNearZero) {
  Rng rng(13);
  Matrix a(6, 2);
  for (double& v : a.data) v = rng.uniform01();
  const SinkhornResult res = sinkhorn_transport(a, a);
  EXPECT_GE(res.value, 0.0);
  // The optimum can pay at most the entropic price of the diagonal plan.
  EXPECT_LE(res.value, res.eps * std::log(6.0) + 1e-6);
}

TEST(Sinkhorn, NonNegativeAndFinite) {
  Rng rng(29);
  for (int trial = 0; trial < 5; ++trial) {
    Matrix a(3 + trial, 2), b(5, 2);
    for (double& v : a.data) v = rng.normal(0.0, 2.0);
    for (double& v : b.data) v = rng.normal(1.0, 2.0);
    const double w = sinkhorn_distance(a, b);
    EXPECT_GE(w, 0.0);
    EXPECT_TRUE(std::isfinite(w));
  }
}

TEST(Sinkhorn, DegenerateInputs) {
  Matrix a(0, 2), b(3, 2);
  EXPECT_THROW(sinkhorn_transport(a, b), std::invalid_argument);
  EXPECT_THROW(sinkhorn_transport(b, a), std::invalid_argument);
  Matrix c(3, 1);
  EXPECT_THROW(sinkhorn_transport(b, c), std::invalid_argument);
  // Coincident singletons: zero distance exactly.
  Matrix p(1, 2), q(1, 2);
  p.data = {0.4, 0.6};
  q.data = {0.4, 0.6};
  EXPECT_DOUBLE_EQ(sinkhorn_transport(p, q).value, 0.0);
  // Separated singletons: squared distance plus no entropic freedom.
  q.data = {1.4, 0.6};
  EXPECT_NEAR(sinkhorn_transport(p, q).value, 1.0, 1e-9);
}

TEST(Sinkhorn, PlanMarginalsUniform) {
  Rng rng(55);
  Matrix a(4, 2), b(7, 2);
  for (double& v : a.data) v = rng.uniform01();
  for (double& v : b.data) v = rng.uniform01();
  SinkhornOptions opt;
  opt.max_iters = 2000;
  opt.tol = 1e-12;
  const SinkhornResult res = sinkhorn_transport(a, b, opt);
  ASSERT_TRUE(res.converged);
  for (std::size_t i = 0; i < 4; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < 7; ++j) row += res.plan(i, j);
    EXPECT_NEAR(row, 0.25, 1e-9);
  }
  for (std::size_t j = 0; j < 7; ++j) {
    double col = 0.0;
    for (std::size_t i = 0; i < 4; ++i) col += res.plan(i, j);
    EXPECT_NEAR(col, 1.0 / 7.0, 1e-9);
  }
}

TEST(Sinkhorn, PointGradientsMatchFiniteDifference) {
  Rng rng(71);
  Matrix a(4, 2), b(5, 2);
  for (double& v : a.data) v = rng.uniform(0.0, 2.0);
  for (double& v : b.data) v = rng.uniform(0.5, 2.5);
  SinkhornOptions opt;
  opt.reg_units = 0.1;
  opt.max_iters = 5000;
  opt.tol = 1e-12;
  const SinkhornResult res = sinkhorn_transport(a, b, opt);
  ASSERT_TRUE(res.converged);
  Matrix da(a.rows, a.cols), db(b.rows, b.cols);
  sinkhorn_backward(a, b, res, opt.reg_units, 1.0, da, db);

  const auto value_at = [&](Matrix& which, std::size_t idx, double v) {
    const double saved = which.data[idx];
    which.data[idx] = v;
    const double out = sinkhorn_transport(a, b, opt).value;
    which.data[idx] = saved;
    return out;
  };
  const double h = 1e-5;
  for (std::size_t idx = 0; idx < a.size(); ++idx) {
    const double num =
        (value_at(a, idx, a.data[idx] + h) - value_at(a, idx, a.data[idx] - h)) / (2 * h);
    EXPECT_LT(testutil::rel_err(da.data[idx], num), 1e-4) << "a[" << idx << "]";
  }
  for (std::size_t idx = 0; idx < b.size(); ++idx) {
    const double num =
        (value_at(b, idx, b.data[idx] + h) - value_at(b, idx, b.data[idx] - h)) / (2 * h);
    EXPECT_LT(testutil::rel_err(db.data[idx], num), 1e-4) << "b[" << idx << "]";
  }
}

}  // namespace
}  // namespace upliftlab
