#pragma once

// Probability helpers shared by the losses: sigmoid/softmax, clamped logs and
// the Bernoulli KL divergence.

#include <algorithm>
#include <cmath>

namespace upliftlab {

// Clamp applied before every log/KL term.
inline constexpr double kProbClamp = 1e-7;

inline double sigmoid(double z) {
  if (z >= 0.0) {
    const double e = std::exp(-z);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double clamp_prob(double p) { return std::clamp(p, kProbClamp, 1.0 - kProbClamp); }

// D_KL(p || q) for Bernoulli distributions; both arguments clamped.
inline double kl_bernoulli(double p, double q) {
  p = clamp_prob(p);
  q = clamp_prob(q);
  return p * std::log(p / q) + (1.0 - p) * std::log((1.0 - p) / (1.0 - q));
}

// d/dq D_KL(p || q) at clamped arguments; zero when q sits on a clamp bound.
inline double kl_bernoulli_dq(double p, double q) {
  p = clamp_prob(p);
  if (q <= kProbClamp || q >= 1.0 - kProbClamp) return 0.0;
  return -p / q + (1.0 - p) / (1.0 - q);
}

// d/dp D_KL(p || q); zero when p sits on a clamp bound.
inline double kl_bernoulli_dp(double p, double q) {
  q = clamp_prob(q);
  if (p <= kProbClamp || p >= 1.0 - kProbClamp) return 0.0;
  return std::log(p / q) - std::log((1.0 - p) / (1.0 - q));
}

inline void softmax_row(const double* z, double* out, std::size_t n) {
  double zmax = z[0];
  for (std::size_t i = 1; i < n; ++i) zmax = std::max(zmax, z[i]);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = std::exp(z[i] - zmax);
    sum += out[i];
  }
  for (std::size_t i = 0; i < n; ++i) out[i] /= sum;
}

}  // namespace upliftlab
