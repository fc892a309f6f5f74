#pragma once

// Small dense-network engine: layer specs, Xavier initialization, tape-based
// forward/backward and a named parameter store. Gradients accumulate until
// zero_grads() is called.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "upliftlab/matrix.hpp"
#include "upliftlab/prob.hpp"
#include "upliftlab/rng.hpp"

namespace upliftlab {

enum class HiddenActivation { relu, tanh };
enum class OutputActivation { identity, sigmoid, tanh, softmax };

struct MlpSpec {
  std::vector<int> widths;  // [input, hidden..., output]
  HiddenActivation hidden = HiddenActivation::relu;
  OutputActivation output = OutputActivation::identity;

  int layer_count() const { return static_cast<int>(widths.size()) - 1; }
  int input_width() const { return widths.front(); }
  int output_width() const { return widths.back(); }

  void validate() const {
    if (widths.size() < 2) throw std::invalid_argument("MlpSpec: need at least one layer");
    for (int w : widths)
      if (w <= 0) throw std::invalid_argument("MlpSpec: widths must be positive");
  }
};

struct Param {
  std::string name;
  Matrix value;
  Matrix grad;
};

class ParamStore {
 public:
  void add(std::string name, std::size_t rows, std::size_t cols) {
    for (const Param& p : params_)
      if (p.name == name) throw std::invalid_argument("ParamStore: duplicate name " + name);
    params_.push_back(Param{std::move(name), Matrix(rows, cols), Matrix(rows, cols)});
  }

  Param& at(std::size_t i) { return params_[i]; }
  const Param& at(std::size_t i) const { return params_[i]; }

  Param& by_name(std::string_view name) {
    for (Param& p : params_)
      if (p.name == name) return p;
    throw std::invalid_argument("ParamStore: unknown name " + std::string(name));
  }
  const Param& by_name(std::string_view name) const {
    return const_cast<ParamStore*>(this)->by_name(name);
  }

  std::size_t size() const { return params_.size(); }

  void zero_grads() {
    for (Param& p : params_) p.grad.fill(0.0);
  }

  bool same_layout(const ParamStore& o) const {
    if (params_.size() != o.params_.size()) return false;
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (params_[i].name != o.params_[i].name || !params_[i].value.same_shape(o.params_[i].value))
        return false;
    return true;
  }

  // Sum of squared weight entries; bias vectors excluded.
  double sum_squared_weights() const {
    double s = 0.0;
    for (const Param& p : params_) {
      if (p.name.empty() || p.name[0] != 'W') continue;
      for (double v : p.value.data) s += v * v;
    }
    return s;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const Param& p : params_) n += p.value.size();
    return n;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<Param> params_;
};

// Weights ~ N(0, 2/(fan_in+fan_out)), biases zero. Layer l stores W{l} with
// shape (in, out) and b{l} with shape (1, out).
inline ParamStore xavier_init(const MlpSpec& spec, std::uint64_t seed) {
  spec.validate();
  ParamStore store;
  Rng rng(seed);
  for (int l = 0; l < spec.layer_count(); ++l) {
    const std::size_t in = static_cast<std::size_t>(spec.widths[l]);
    const std::size_t out = static_cast<std::size_t>(spec.widths[l + 1]);
    store.add("W" + std::to_string(l), in, out);
    store.add("b" + std::to_string(l), 1, out);
    Matrix& w = store.by_name("W" + std::to_string(l)).value;
    const double stdev = std::sqrt(2.0 / static_cast<double>(in + out));
    for (double& v : w.data) v = rng.normal(0.0, stdev);
  }
  return store;
}

struct MlpTape {
  Matrix input;
  std::vector<Matrix> pre;   // pre-activation z per layer
  std::vector<Matrix> post;  // post-activation output per layer
};

namespace detail {

inline void apply_hidden(Matrix& m, HiddenActivation act) {
  if (act == HiddenActivation::relu) {
    for (double& v : m.data) v = v > 0.0 ? v : 0.0;
  } else {
    for (double& v : m.data) v = std::tanh(v);
  }
}

inline void apply_output(const Matrix& z, Matrix& out, OutputActivation act) {
  out = z;
  switch (act) {
    case OutputActivation::identity:
      break;
    case OutputActivation::sigmoid:
      for (double& v : out.data) v = sigmoid(v);
      break;
    case OutputActivation::tanh:
      for (double& v : out.data) v = std::tanh(v);
      break;
    case OutputActivation::softmax:
      for (std::size_t i = 0; i < z.rows; ++i) softmax_row(z.row(i), out.row(i), z.cols);
      break;
  }
}

}  // namespace detail

// Forward pass; fills `tape` (when given) for a later backward pass.
inline Matrix mlp_forward(const MlpSpec& spec, const ParamStore& params, const Matrix& input,
                          MlpTape* tape = nullptr) {
  spec.validate();
  if (static_cast<int>(input.cols) != spec.input_width())
    throw std::invalid_argument("mlp_forward: input width mismatch");
  if (tape) {
    tape->input = input;
    tape->pre.clear();
    tape->post.clear();
  }
  Matrix cur = input;
  const int layers = spec.layer_count();
  for (int l = 0; l < layers; ++l) {
    const Matrix& w = params.by_name("W" + std::to_string(l)).value;
    const Matrix& b = params.by_name("b" + std::to_string(l)).value;
    Matrix z = matmul(cur, w);
    for (std::size_t i = 0; i < z.rows; ++i) {
      double* zr = z.row(i);
      for (std::size_t j = 0; j < z.cols; ++j) zr[j] += b(0, j);
    }
    Matrix out;
    if (l + 1 == layers) {
      detail::apply_output(z, out, spec.output);
    } else {
      out = z;
      detail::apply_hidden(out, spec.hidden);
    }
    if (tape) {
      tape->pre.push_back(z);
      tape->post.push_back(out);
    }
    cur = std::move(out);
  }
  return cur;
}

// Backward pass for a tape produced by mlp_forward. Accumulates parameter
// gradients in `params` and returns the gradient w.r.t. the input matrix.
inline Matrix mlp_backward(const MlpSpec& spec, ParamStore& params, const MlpTape& tape,
                           const Matrix& output_grad) {
  const int layers = spec.layer_count();
  if (static_cast<int>(tape.pre.size()) != layers)
    throw std::invalid_argument("mlp_backward: tape does not match spec");
  if (!output_grad.same_shape(tape.post.back()))
    throw std::invalid_argument("mlp_backward: output gradient shape mismatch");

  Matrix delta;  // gradient w.r.t. pre-activation of the current layer
  {
    const Matrix& z = tape.pre.back();
    const Matrix& y = tape.post.back();
    delta = Matrix(z.rows, z.cols);
    switch (spec.output) {
      case OutputActivation::identity:
        delta = output_grad;
        break;
      case OutputActivation::sigmoid:
        for (std::size_t i = 0; i < z.size(); ++i)
          delta.data[i] = output_grad.data[i] * y.data[i] * (1.0 - y.data[i]);
        break;
      case OutputActivation::tanh:
        for (std::size_t i = 0; i < z.size(); ++i)
          delta.data[i] = output_grad.data[i] * (1.0 - y.data[i] * y.data[i]);
        break;
      case OutputActivation::softmax:
        for (std::size_t i = 0; i < z.rows; ++i) {
          const double* yr = y.row(i);
          const double* gr = output_grad.row(i);
          double dot = 0.0;
          for (std::size_t j = 0; j < z.cols; ++j) dot += gr[j] * yr[j];
          double* dr = delta.row(i);
          for (std::size_t j = 0; j < z.cols; ++j) dr[j] = yr[j] * (gr[j] - dot);
        }
        break;
    }
  }

  for (int l = layers - 1; l >= 0; --l) {
    const Matrix& below = (l == 0) ? tape.input : tape.post[static_cast<std::size_t>(l) - 1];
    Param& w = params.by_name("W" + std::to_string(l));
    Param& b = params.by_name("b" + std::to_string(l));
    add_in_place(w.grad, matmul_at_b(below, delta));
    for (std::size_t i = 0; i < delta.rows; ++i) {
      const double* dr = delta.row(i);
      for (std::size_t j = 0; j < delta.cols; ++j) b.grad(0, j) += dr[j];
    }
    Matrix dbelow = matmul_a_bt(delta, w.value);
    if (l == 0) return dbelow;
    const Matrix& z = tape.pre[static_cast<std::size_t>(l) - 1];
    if (spec.hidden == HiddenActivation::relu) {
      for (std::size_t i = 0; i < z.size(); ++i)
        dbelow.data[i] = z.data[i] > 0.0 ? dbelow.data[i] : 0.0;
    } else {
      const Matrix& a = tape.post[static_cast<std::size_t>(l) - 1];
      for (std::size_t i = 0; i < z.size(); ++i)
        dbelow.data[i] *= (1.0 - a.data[i] * a.data[i]);
    }
    delta = std::move(dbelow);
  }
  return Matrix();  // unreachable
}

}  // namespace upliftlab
