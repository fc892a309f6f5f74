#pragma once

// Entropic optimal transport between two point sets with uniform weights and
// squared-Euclidean ground cost. The regularizer is expressed in units of the
// mean pairwise cost so one setting works across scales. Inputs are
// canonically ordered before solving, which makes the distance exactly
// symmetric in (a, b).

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "upliftlab/matrix.hpp"

namespace upliftlab {

struct SinkhornOptions {
  double reg_units = 0.1;  // epsilon = reg_units * mean(cost)
  int max_iters = 50;
  double tol = 1e-9;  // L1 marginal violation target
};

struct SinkhornResult {
  double value = 0.0;  // transport cost + eps * KL(plan || uniform product)
  Matrix plan;         // rows follow `a`, cols follow `b` (caller order)
  double eps = 0.0;
  double kl = 0.0;  // KL(plan || u x v)
  int iterations = 0;
  bool converged = false;
};

namespace detail {

inline bool lex_less(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows) return a.rows < b.rows;
  if (a.cols != b.cols) return a.cols < b.cols;
  return std::lexicographical_compare(a.data.begin(), a.data.end(), b.data.begin(),
                                      b.data.end());
}

inline double logsumexp(const std::vector<double>& v) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : v) mx = std::max(mx, x);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

// Solves with rows = a, cols = b; caller handles canonical ordering.
inline SinkhornResult sinkhorn_core(const Matrix& a, const Matrix& b,
                                    const SinkhornOptions& opt) {
  const std::size_t n = a.rows, m = b.rows;
  Matrix cost(n, m);
  double cost_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double c = 0.0;
      for (std::size_t d = 0; d < a.cols; ++d) {
        const double diff = a(i, d) - b(j, d);
        c += diff * diff;
      }
      cost(i, j) = c;
      cost_sum += c;
    }
  const double mean_cost = cost_sum / static_cast<double>(n * m);

  SinkhornResult res;
  res.plan = Matrix(n, m);
  if (mean_cost <= 0.0) {  // all points coincide: zero cost, product plan
    res.plan.fill(1.0 / static_cast<double>(n * m));
    res.converged = true;
    return res;
  }
  const double eps = opt.reg_units * mean_cost;
  res.eps = eps;

  const double log_u = -std::log(static_cast<double>(n));
  const double log_v = -std::log(static_cast<double>(m));
  std::vector<double> f(n, 0.0), g(m, 0.0), scratch(std::max(n, m));

  const double un = 1.0 / static_cast<double>(n);
  for (int it = 0; it < opt.max_iters; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      scratch.resize(m);
      for (std::size_t j = 0; j < m; ++j) scratch[j] = (g[j] - cost(i, j)) / eps + log_v;
      f[i] = -eps * logsumexp(scratch);
    }
    for (std::size_t j = 0; j < m; ++j) {
      scratch.resize(n);
      for (std::size_t i = 0; i < n; ++i) scratch[i] = (f[i] - cost(i, j)) / eps + log_u;
      g[j] = -eps * logsumexp(scratch);
    }
    res.iterations = it + 1;
    double err = 0.0;  // columns are exact after the g-update; check rows
    for (std::size_t i = 0; i < n; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < m; ++j)
        row += std::exp((f[i] + g[j] - cost(i, j)) / eps + log_u + log_v);
      err += std::abs(row - un);
    }
    if (err < opt.tol) {
      res.converged = true;
      break;
    }
  }

  double transport = 0.0, kl = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      const double log_p = (f[i] + g[j] - cost(i, j)) / eps + log_u + log_v;
      const double p = std::exp(log_p);
      res.plan(i, j) = p;
      transport += p * cost(i, j);
      kl += p * (log_p - log_u - log_v);
    }
  res.kl = std::max(0.0, kl);
  res.value = transport + eps * res.kl;
  return res;
}

}  // namespace detail

inline SinkhornResult sinkhorn_transport(const Matrix& a, const Matrix& b,
                                         const SinkhornOptions& opt = {}) {
  if (a.rows == 0 || b.rows == 0)
    throw std::invalid_argument("sinkhorn_transport: empty point set");
  if (a.cols != b.cols) throw std::invalid_argument("sinkhorn_transport: dimension mismatch");
  if (detail::lex_less(b, a)) {
    SinkhornResult r = detail::sinkhorn_core(b, a, opt);
    SinkhornResult out = r;
    out.plan = Matrix(a.rows, b.rows);
    for (std::size_t i = 0; i < a.rows; ++i)
      for (std::size_t j = 0; j < b.rows; ++j) out.plan(i, j) = r.plan(j, i);
    return out;
  }
  return detail::sinkhorn_core(a, b, opt);
}

inline double sinkhorn_distance(const Matrix& a, const Matrix& b, double reg = 0.1,
                                int iters = 50) {
  SinkhornOptions opt;
  opt.reg_units = reg;
  opt.max_iters = iters;
  return sinkhorn_transport(a, b, opt).value;
}

// Accumulates upstream * dW/da and upstream * dW/db into da/db. Uses the
// envelope form: dW/dC_ij = P_ij + reg_units*KL/(n*m), the second term coming
// from the cost-dependent epsilon, chained through C_ij = ||a_i - b_j||^2.
inline void sinkhorn_backward(const Matrix& a, const Matrix& b, const SinkhornResult& res,
                              double reg_units, double upstream, Matrix& da, Matrix& db) {
  check_shape(da, a.rows, a.cols, "sinkhorn_backward da");
  check_shape(db, b.rows, b.cols, "sinkhorn_backward db");
  const double corr =
      reg_units * res.kl / static_cast<double>(a.rows * b.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < b.rows; ++j) {
      const double w = upstream * (res.plan(i, j) + corr);
      for (std::size_t d = 0; d < a.cols; ++d) {
        const double diff = 2.0 * (a(i, d) - b(j, d));
        da(i, d) += w * diff;
        db(j, d) -= w * diff;
      }
    }
}

}  // namespace upliftlab
