#pragma once

// Adam optimizer over a ParamStore. Keeps first/second moment estimates per
// parameter and applies the bias-corrected update in place.

#include <cmath>
#include <stdexcept>
#include <vector>

#include "upliftlab/matrix.hpp"
#include "upliftlab/mlp.hpp"

namespace upliftlab {

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  long step = 0;
  std::vector<Matrix> m;
  std::vector<Matrix> v;

  explicit AdamState(const ParamStore& params) {
    m.reserve(params.size());
    v.reserve(params.size());
    for (const Param& p : params) {
      m.emplace_back(p.value.rows, p.value.cols);
      v.emplace_back(p.value.rows, p.value.cols);
    }
  }
};

inline void adam_step(ParamStore& params, AdamState& state, double lr) {
  if (state.m.size() != params.size())
    throw std::invalid_argument("adam_step: state does not match parameter store");
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param& p = params.at(i);
    if (!p.grad.all_finite())
      throw std::runtime_error("adam_step: non-finite gradient in " + p.name);
    Matrix& m = state.m[i];
    Matrix& v = state.v[i];
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = p.grad.data[j];
      m.data[j] = state.beta1 * m.data[j] + (1.0 - state.beta1) * g;
      v.data[j] = state.beta2 * v.data[j] + (1.0 - state.beta2) * g * g;
      const double mhat = m.data[j] / bc1;
      const double vhat = v.data[j] / bc2;
      p.value.data[j] -= lr * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

}  // namespace upliftlab
