#pragma once

// Multi-treatment counterfactual regression with disentangled
// representations. Three encoders split the covariates into an instrumental
// part (feeds the treatment classifier), a confounding part (feeds both the
// classifier and the outcome path) and an adjustment part (outcome path
// only). Outcome heads share a trunk over the confounding+adjustment
// concatenation. Training combines a re-weighted factual loss with treatment
// cross-entropy, a transport-based imbalance penalty on the adjustment
// representation, ATE and monotonicity penalties, and weight decay.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "upliftlab/adam.hpp"
#include "upliftlab/dataset.hpp"
#include "upliftlab/matrix.hpp"
#include "upliftlab/mlp.hpp"
#include "upliftlab/prob.hpp"
#include "upliftlab/rng.hpp"
#include "upliftlab/sinkhorn.hpp"

namespace upliftlab {

struct DrcfrConfig {
  int num_arms = 3;
  int input_dim = 2;
  MlpSpec gamma_net;       // instrumental representation
  MlpSpec delta_net;       // confounding representation
  MlpSpec upsilon_net;     // adjustment representation
  MlpSpec classifier_net;  // softmax over arms from (gamma, delta)
  MlpSpec propensity_net;  // softmax over arms from delta alone
  MlpSpec trunk_net;       // shared outcome trunk from (delta, upsilon)
  MlpSpec head_net;        // per-arm sigmoid head on the trunk output

  double alpha_ce = 1.0;
  double beta_im = 1.0;
  double gamma_ate = 1.0;
  double delta_mono = 1.0;
  double lambda_reg = 0.01;

  double lr = 1e-3;
  int epochs = 20;
  int batch_size = 256;
  SinkhornOptions sinkhorn;

  static DrcfrConfig defaults(int input_dim, int num_arms = 3) {
    DrcfrConfig c;
    c.input_dim = input_dim;
    c.num_arms = num_arms;
    const int rep = input_dim <= 2 ? 20 : 56;
    const int head_hidden = input_dim <= 2 ? 32 : 40;
    c.gamma_net = {{input_dim, rep, rep}, HiddenActivation::relu, OutputActivation::identity};
    c.delta_net = c.gamma_net;
    c.upsilon_net = c.gamma_net;
    c.classifier_net = {{2 * rep, rep, num_arms}, HiddenActivation::relu,
                        OutputActivation::softmax};
    c.propensity_net = {{rep, num_arms}, HiddenActivation::relu, OutputActivation::softmax};
    c.trunk_net = {{2 * rep, 2 * rep}, HiddenActivation::relu, OutputActivation::identity};
    c.head_net = {{2 * rep, head_hidden, 1}, HiddenActivation::relu, OutputActivation::sigmoid};
    return c;
  }

  void validate() const {
    if (num_arms < 2) throw std::invalid_argument("DrcfrConfig: need at least two arms");
    if (alpha_ce < 0 || beta_im < 0 || gamma_ate < 0 || delta_mono < 0 || lambda_reg < 0)
      throw std::invalid_argument("DrcfrConfig: loss weights must be non-negative");
    gamma_net.validate();
    delta_net.validate();
    upsilon_net.validate();
    classifier_net.validate();
    propensity_net.validate();
    trunk_net.validate();
    head_net.validate();
    if (gamma_net.input_width() != input_dim || delta_net.input_width() != input_dim ||
        upsilon_net.input_width() != input_dim)
      throw std::invalid_argument("DrcfrConfig: representation input widths must match input_dim");
    if (classifier_net.input_width() != gamma_net.output_width() + delta_net.output_width())
      throw std::invalid_argument("DrcfrConfig: classifier input width mismatch");
    if (propensity_net.input_width() != delta_net.output_width())
      throw std::invalid_argument("DrcfrConfig: propensity input width mismatch");
    if (trunk_net.input_width() != delta_net.output_width() + upsilon_net.output_width())
      throw std::invalid_argument("DrcfrConfig: trunk input width mismatch");
    if (head_net.input_width() != trunk_net.output_width())
      throw std::invalid_argument("DrcfrConfig: head input width mismatch");
    if (classifier_net.output_width() != num_arms || propensity_net.output_width() != num_arms)
      throw std::invalid_argument("DrcfrConfig: classifier/propensity must output one column "
                                  "per arm");
    if (head_net.output_width() != 1)
      throw std::invalid_argument("DrcfrConfig: heads must output one column");
    if (classifier_net.output != OutputActivation::softmax ||
        propensity_net.output != OutputActivation::softmax)
      throw std::invalid_argument("DrcfrConfig: classifier/propensity need softmax outputs");
    if (head_net.output != OutputActivation::sigmoid)
      throw std::invalid_argument("DrcfrConfig: heads need sigmoid outputs");
  }
};

struct DrcfrModel {
  DrcfrConfig config;
  ParamStore gamma, delta, upsilon, classifier, propensity, trunk;
  std::vector<ParamStore> heads;

  static DrcfrModel init(const DrcfrConfig& config, std::uint64_t seed) {
    config.validate();
    DrcfrModel m;
    m.config = config;
    m.gamma = xavier_init(config.gamma_net, derive_seed(seed, 1));
    m.delta = xavier_init(config.delta_net, derive_seed(seed, 2));
    m.upsilon = xavier_init(config.upsilon_net, derive_seed(seed, 3));
    m.classifier = xavier_init(config.classifier_net, derive_seed(seed, 4));
    m.propensity = xavier_init(config.propensity_net, derive_seed(seed, 5));
    m.trunk = xavier_init(config.trunk_net, derive_seed(seed, 6));
    for (int t = 0; t < config.num_arms; ++t)
      m.heads.push_back(xavier_init(config.head_net, derive_seed(seed, 7 + t)));
    return m;
  }

  template <typename Fn>
  void for_each_store(Fn&& fn) {
    fn(gamma);
    fn(delta);
    fn(upsilon);
    fn(classifier);
    fn(propensity);
    fn(trunk);
    for (ParamStore& h : heads) fn(h);
  }
  template <typename Fn>
  void for_each_store(Fn&& fn) const {
    fn(gamma);
    fn(delta);
    fn(upsilon);
    fn(classifier);
    fn(propensity);
    fn(trunk);
    for (const ParamStore& h : heads) fn(h);
  }

  void zero_grads() {
    for_each_store([](ParamStore& s) { s.zero_grads(); });
  }

  std::size_t total_params() const {
    std::size_t n = 0;
    for_each_store([&](const ParamStore& s) { n += s.scalar_count(); });
    return n;
  }

  bool same_values(const DrcfrModel& o) const {
    bool eq = o.heads.size() == heads.size();
    if (!eq) return false;
    const ParamStore* mine[6] = {&gamma, &delta, &upsilon, &classifier, &propensity, &trunk};
    const ParamStore* theirs[6] = {&o.gamma, &o.delta, &o.upsilon, &o.classifier, &o.propensity,
                                   &o.trunk};
    for (int s = 0; s < 6; ++s) {
      if (!mine[s]->same_layout(*theirs[s])) return false;
      for (std::size_t p = 0; p < mine[s]->size(); ++p)
        if (mine[s]->at(p).value.data != theirs[s]->at(p).value.data) return false;
    }
    for (std::size_t h = 0; h < heads.size(); ++h) {
      if (!heads[h].same_layout(o.heads[h])) return false;
      for (std::size_t p = 0; p < heads[h].size(); ++p)
        if (heads[h].at(p).value.data != o.heads[h].at(p).value.data) return false;
    }
    return true;
  }
};

struct DrcfrTape {
  MlpTape gamma, delta, upsilon, classifier, propensity, trunk;
  std::vector<MlpTape> heads;
  Matrix rep_gamma, rep_delta, rep_upsilon;  // N x rep widths
  Matrix class_probs, prop_probs;            // N x arms
  Matrix trunk_out;                          // N x trunk width
  Matrix preds;                              // N x arms
};

inline DrcfrTape drcfr_forward(const DrcfrModel& model, const Matrix& x) {
  DrcfrTape tape;
  const DrcfrConfig& c = model.config;
  tape.rep_gamma = mlp_forward(c.gamma_net, model.gamma, x, &tape.gamma);
  tape.rep_delta = mlp_forward(c.delta_net, model.delta, x, &tape.delta);
  tape.rep_upsilon = mlp_forward(c.upsilon_net, model.upsilon, x, &tape.upsilon);
  tape.class_probs = mlp_forward(c.classifier_net, model.classifier,
                                 concat_cols(tape.rep_gamma, tape.rep_delta), &tape.classifier);
  tape.prop_probs =
      mlp_forward(c.propensity_net, model.propensity, tape.rep_delta, &tape.propensity);
  tape.trunk_out = mlp_forward(c.trunk_net, model.trunk,
                               concat_cols(tape.rep_delta, tape.rep_upsilon), &tape.trunk);
  tape.preds = Matrix(x.rows, static_cast<std::size_t>(c.num_arms));
  tape.heads.resize(model.heads.size());
  for (int t = 0; t < c.num_arms; ++t) {
    const Matrix out = mlp_forward(c.head_net, model.heads[static_cast<std::size_t>(t)],
                                   tape.trunk_out, &tape.heads[static_cast<std::size_t>(t)]);
    for (std::size_t i = 0; i < x.rows; ++i) tape.preds(i, static_cast<std::size_t>(t)) =
        out(i, 0);
  }
  return tape;
}

// Routes gradients w.r.t. the tape outputs back through every sub-network.
// Pass empty matrices (size 0) for terms that do not contribute.
inline void drcfr_backward(DrcfrModel& model, const DrcfrTape& tape, const Matrix& d_preds,
                           const Matrix& d_class, const Matrix& d_prop,
                           const Matrix& d_upsilon_extra) {
  const DrcfrConfig& c = model.config;
  const std::size_t n = tape.preds.rows;
  Matrix d_trunk_out(tape.trunk_out.rows, tape.trunk_out.cols);
  if (d_preds.size() > 0) {
    check_shape(d_preds, n, static_cast<std::size_t>(c.num_arms), "drcfr_backward d_preds");
    for (int t = 0; t < c.num_arms; ++t) {
      Matrix dy(n, 1);
      for (std::size_t i = 0; i < n; ++i) dy(i, 0) = d_preds(i, static_cast<std::size_t>(t));
      add_in_place(d_trunk_out,
                   mlp_backward(c.head_net, model.heads[static_cast<std::size_t>(t)],
                                tape.heads[static_cast<std::size_t>(t)], dy));
    }
  }
  Matrix d_delta_total(tape.rep_delta.rows, tape.rep_delta.cols);
  Matrix d_upsilon_total(tape.rep_upsilon.rows, tape.rep_upsilon.cols);
  if (d_upsilon_extra.size() > 0) add_in_place(d_upsilon_total, d_upsilon_extra);
  {
    const Matrix d_du = mlp_backward(c.trunk_net, model.trunk, tape.trunk, d_trunk_out);
    Matrix dd, du;
    split_cols(d_du, tape.rep_delta.cols, dd, du);
    add_in_place(d_delta_total, dd);
    add_in_place(d_upsilon_total, du);
  }
  Matrix d_gamma_total(tape.rep_gamma.rows, tape.rep_gamma.cols);
  if (d_class.size() > 0) {
    const Matrix d_gd = mlp_backward(c.classifier_net, model.classifier, tape.classifier, d_class);
    Matrix dg, dd;
    split_cols(d_gd, tape.rep_gamma.cols, dg, dd);
    add_in_place(d_gamma_total, dg);
    add_in_place(d_delta_total, dd);
  }
  if (d_prop.size() > 0)
    add_in_place(d_delta_total,
                 mlp_backward(c.propensity_net, model.propensity, tape.propensity, d_prop));
  mlp_backward(c.gamma_net, model.gamma, tape.gamma, d_gamma_total);
  mlp_backward(c.delta_net, model.delta, tape.delta, d_delta_total);
  mlp_backward(c.upsilon_net, model.upsilon, tape.upsilon, d_upsilon_total);
}

inline Matrix predict_all(const DrcfrModel& model, const Matrix& x) {
  DrcfrTape tape = drcfr_forward(model, x);
  return tape.preds;
}

// Column t-1 holds the estimated effect of arm t versus control.
inline Matrix uplift(const DrcfrModel& model, const Matrix& x) {
  const Matrix preds = predict_all(model, x);
  Matrix out(preds.rows, preds.cols - 1);
  for (std::size_t i = 0; i < preds.rows; ++i)
    for (std::size_t t = 1; t < preds.cols; ++t) out(i, t - 1) = preds(i, t) - preds(i, 0);
  return out;
}

// Arm shares of a full training set; reweighting needs every arm present.
inline std::vector<double> arm_frequencies(const ObservationBatch& batch, int num_arms) {
  std::vector<double> freq(static_cast<std::size_t>(num_arms), 0.0);
  for (int t : batch.treatments) {
    if (t < 0 || t >= num_arms)
      throw std::invalid_argument("arm_frequencies: treatment out of range");
    freq[static_cast<std::size_t>(t)] += 1.0;
  }
  for (int t = 0; t < num_arms; ++t) {
    if (freq[static_cast<std::size_t>(t)] == 0.0)
      throw std::runtime_error("arm_frequencies: arm " + std::to_string(t) +
                               " absent from training set");
    freq[static_cast<std::size_t>(t)] /= static_cast<double>(batch.size());
  }
  return freq;
}

// w(t_i, delta(x_i)) = 1 + sum_{t_j != t_i} [p(t_i)/p(t_j)] *
// [pi(t_j|delta)/pi(t_i|delta)]. Treated as constants during backprop.
inline std::vector<double> reweight_from_propensities(const Matrix& prop_probs,
                                                      const std::vector<int>& treatments,
                                                      const std::vector<double>& arm_freq) {
  const std::size_t n = prop_probs.rows;
  const std::size_t arms = prop_probs.cols;
  std::vector<double> w(n, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t ti = static_cast<std::size_t>(treatments[i]);
    const double pi_own = clamp_prob(prop_probs(i, ti));
    for (std::size_t tj = 0; tj < arms; ++tj) {
      if (tj == ti) continue;
      w[i] += (arm_freq[ti] / arm_freq[tj]) * (clamp_prob(prop_probs(i, tj)) / pi_own);
    }
  }
  return w;
}

inline std::vector<double> reweight(const DrcfrModel& model, const ObservationBatch& batch) {
  const std::vector<double> freq = arm_frequencies(batch, model.config.num_arms);
  const Matrix prop =
      mlp_forward(model.config.propensity_net, model.propensity,
                  mlp_forward(model.config.delta_net, model.delta, batch.covariates));
  return reweight_from_propensities(prop, batch.treatments, freq);
}

// Standalone value forms of the individual loss terms. loss_base reports the
// same quantities in its breakdown; these exist for direct use and testing.

inline double loss_factual_value(const Matrix& preds, const std::vector<int>& treatments,
                                 const std::vector<int>& outcomes,
                                 const std::vector<double>& weights) {
  const std::size_t n = preds.rows;
  if (treatments.size() != n || outcomes.size() != n || weights.size() != n)
    throw std::invalid_argument("loss_factual_value: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = clamp_prob(preds(i, static_cast<std::size_t>(treatments[i])));
    const double y = static_cast<double>(outcomes[i]);
    s += weights[i] * -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
  }
  return s / static_cast<double>(n);
}

inline double loss_ce_value(const Matrix& probs, const std::vector<int>& treatments) {
  const std::size_t n = probs.rows;
  if (treatments.size() != n) throw std::invalid_argument("loss_ce_value: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    s += -std::log(clamp_prob(probs(i, static_cast<std::size_t>(treatments[i]))));
  return s / static_cast<double>(n);
}

inline double loss_mono_value(const Matrix& preds) {
  double s = 0.0;
  for (std::size_t i = 0; i < preds.rows; ++i)
    for (std::size_t t = 1; t < preds.cols; ++t) {
      const double diff = preds(i, t - 1) - preds(i, t);
      if (diff > 0.0) s += diff;
    }
  return s / static_cast<double>(preds.rows);
}

inline double loss_ate_value(const Matrix& preds, const std::vector<int>& treatments,
                             const std::vector<int>& outcomes,
                             std::vector<std::string>* warnings = nullptr) {
  const std::size_t n = preds.rows;
  const std::size_t arms = preds.cols;
  std::vector<std::vector<std::size_t>> groups(arms);
  for (std::size_t i = 0; i < n; ++i)
    groups[static_cast<std::size_t>(treatments[i])].push_back(i);
  if (groups[0].empty()) {
    if (warnings) warnings->push_back("ate: control arm empty, term skipped");
    return 0.0;
  }
  double pred_c = 0.0, true_c = 0.0;
  for (std::size_t i : groups[0]) {
    pred_c += preds(i, 0);
    true_c += outcomes[i];
  }
  pred_c /= static_cast<double>(groups[0].size());
  true_c /= static_cast<double>(groups[0].size());
  double s = 0.0;
  for (std::size_t t = 1; t < arms; ++t) {
    if (groups[t].empty()) {
      if (warnings)
        warnings->push_back("ate: arm " + std::to_string(t) + " empty, term skipped");
      continue;
    }
    double pred_t = 0.0, true_t = 0.0;
    for (std::size_t i : groups[t]) {
      pred_t += preds(i, t);
      true_t += outcomes[i];
    }
    pred_t /= static_cast<double>(groups[t].size());
    true_t /= static_cast<double>(groups[t].size());
    s += std::abs((pred_t - pred_c) - (true_t - true_c));
  }
  return s / static_cast<double>(arms - 1);
}

inline double loss_imbalance_value(const Matrix& rep, const std::vector<int>& treatments,
                                   int num_arms, const SinkhornOptions& opt,
                                   std::vector<std::string>* warnings = nullptr) {
  std::vector<std::vector<std::size_t>> groups(static_cast<std::size_t>(num_arms));
  for (std::size_t i = 0; i < rep.rows; ++i)
    groups[static_cast<std::size_t>(treatments[i])].push_back(i);
  if (groups[0].empty()) {
    if (warnings) warnings->push_back("imbalance: control arm empty, term skipped");
    return 0.0;
  }
  const Matrix control = select_rows(rep, groups[0]);
  double s = 0.0;
  for (std::size_t t = 1; t < groups.size(); ++t) {
    if (groups[t].empty()) {
      if (warnings)
        warnings->push_back("imbalance: arm " + std::to_string(t) + " empty, term skipped");
      continue;
    }
    s += sinkhorn_transport(control, select_rows(rep, groups[t]), opt).value;
  }
  return s;
}

struct LossBreakdown {
  double total = 0.0;
  double factual = 0.0;    // weighted, mean over samples
  double ce = 0.0;         // treatment classifier cross-entropy
  double prop_ce = 0.0;    // propensity-head cross-entropy (shares alpha_ce)
  double imbalance = 0.0;  // sum of per-arm transport distances
  double ate = 0.0;
  double mono = 0.0;
  double reg = 0.0;  // sum of squared weights over all sub-networks
  std::vector<std::string> warnings;
};

inline double model_weight_norm(const DrcfrModel& model) {
  double s = 0.0;
  model.for_each_store([&](const ParamStore& st) { s += st.sum_squared_weights(); });
  return s;
}

namespace detail {

inline void add_weight_decay_grads(DrcfrModel& model, double coeff) {
  if (coeff == 0.0) return;
  model.for_each_store([&](ParamStore& st) {
    for (Param& p : st) {
      if (p.name.empty() || p.name[0] != 'W') continue;
      for (std::size_t j = 0; j < p.value.size(); ++j)
        p.grad.data[j] += 2.0 * coeff * p.value.data[j];
    }
  });
}

}  // namespace detail

// Composite training loss on one batch. Computes the scalar breakdown and,
// when `accumulate_grads` is set, adds d(total)/d(theta) into the model's
// gradient arrays. `fixed_weights` freezes the factual re-weighting at given
// values (used by trainers to reuse full-set weights and by gradient tests).
inline LossBreakdown loss_base(DrcfrModel& model, const ObservationBatch& batch,
                               const std::vector<double>& arm_freq, bool accumulate_grads,
                               const std::vector<double>* fixed_weights = nullptr) {
  const DrcfrConfig& c = model.config;
  const std::size_t n = batch.size();
  if (n == 0) throw std::invalid_argument("loss_base: empty batch");
  const std::size_t arms = static_cast<std::size_t>(c.num_arms);
  const double dn = static_cast<double>(n);

  DrcfrTape tape = drcfr_forward(model, batch.covariates);
  LossBreakdown out;

  const std::vector<double> weights =
      fixed_weights ? *fixed_weights
                    : reweight_from_propensities(tape.prop_probs, batch.treatments, arm_freq);
  if (weights.size() != n) throw std::invalid_argument("loss_base: weight length mismatch");

  Matrix d_preds(n, arms);
  Matrix d_class(n, arms);
  Matrix d_prop(n, arms);

  // Weighted factual likelihood on the assigned arm.
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t ti = static_cast<std::size_t>(batch.treatments[i]);
    const double y = static_cast<double>(batch.outcomes[i]);
    const double p = clamp_prob(tape.preds(i, ti));
    out.factual += weights[i] * -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
    const double raw = tape.preds(i, ti);
    if (raw > kProbClamp && raw < 1.0 - kProbClamp)
      d_preds(i, ti) += weights[i] * (p - y) / (p * (1.0 - p) * dn);
  }
  out.factual /= dn;

  // Cross-entropies for the joint classifier and the propensity head.
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t ti = static_cast<std::size_t>(batch.treatments[i]);
    const double cp = clamp_prob(tape.class_probs(i, ti));
    const double pp = clamp_prob(tape.prop_probs(i, ti));
    out.ce += -std::log(cp);
    out.prop_ce += -std::log(pp);
    if (tape.class_probs(i, ti) > kProbClamp) d_class(i, ti) += -c.alpha_ce / (cp * dn);
    if (tape.prop_probs(i, ti) > kProbClamp) d_prop(i, ti) += -c.alpha_ce / (pp * dn);
  }
  out.ce /= dn;
  out.prop_ce /= dn;

  // Group the batch by arm once for the distribution terms.
  std::vector<std::vector<std::size_t>> groups(arms);
  for (std::size_t i = 0; i < n; ++i)
    groups[static_cast<std::size_t>(batch.treatments[i])].push_back(i);

  // Imbalance: transport distance between the control and each treated arm's
  // adjustment representation.
  Matrix d_upsilon(tape.rep_upsilon.rows, tape.rep_upsilon.cols);
  if (c.beta_im > 0.0 || !accumulate_grads) {
    if (groups[0].empty()) {
      out.warnings.push_back("imbalance: control arm empty in batch, term skipped");
    } else {
      const Matrix u_control = select_rows(tape.rep_upsilon, groups[0]);
      for (std::size_t t = 1; t < arms; ++t) {
        if (groups[t].empty()) {
          out.warnings.push_back("imbalance: arm " + std::to_string(t) +
                                 " empty in batch, term skipped");
          continue;
        }
        const Matrix u_t = select_rows(tape.rep_upsilon, groups[t]);
        const SinkhornResult res = sinkhorn_transport(u_control, u_t, c.sinkhorn);
        out.imbalance += res.value;
        if (accumulate_grads && c.beta_im > 0.0) {
          Matrix da(u_control.rows, u_control.cols), db(u_t.rows, u_t.cols);
          sinkhorn_backward(u_control, u_t, res, c.sinkhorn.reg_units, c.beta_im, da, db);
          for (std::size_t r = 0; r < groups[0].size(); ++r)
            for (std::size_t d = 0; d < da.cols; ++d) d_upsilon(groups[0][r], d) += da(r, d);
          for (std::size_t r = 0; r < groups[t].size(); ++r)
            for (std::size_t d = 0; d < db.cols; ++d) d_upsilon(groups[t][r], d) += db(r, d);
        }
      }
    }
  }

  // ATE: per-arm absolute gap between predicted and observed group-mean
  // effects, averaged over treated arms.
  const double num_effects = static_cast<double>(arms - 1);
  if (groups[0].empty()) {
    out.warnings.push_back("ate: control arm empty in batch, term skipped");
  } else {
    double pred_c = 0.0, true_c = 0.0;
    for (std::size_t i : groups[0]) {
      pred_c += tape.preds(i, 0);
      true_c += batch.outcomes[i];
    }
    const double n0 = static_cast<double>(groups[0].size());
    pred_c /= n0;
    true_c /= n0;
    for (std::size_t t = 1; t < arms; ++t) {
      if (groups[t].empty()) {
        out.warnings.push_back("ate: arm " + std::to_string(t) + " empty in batch, term skipped");
        continue;
      }
      double pred_t = 0.0, true_t = 0.0;
      for (std::size_t i : groups[t]) {
        pred_t += tape.preds(i, t);
        true_t += batch.outcomes[i];
      }
      const double nt = static_cast<double>(groups[t].size());
      pred_t /= nt;
      true_t /= nt;
      const double gap = (pred_t - pred_c) - (true_t - true_c);
      out.ate += std::abs(gap) / num_effects;
      if (gap != 0.0) {
        const double sign = gap > 0.0 ? 1.0 : -1.0;
        const double scale = c.gamma_ate * sign / num_effects;
        for (std::size_t i : groups[t]) d_preds(i, t) += scale / nt;
        for (std::size_t i : groups[0]) d_preds(i, 0) -= scale / n0;
      }
    }
  }

  // Monotonicity: penalize any decrease along the arm ordering.
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 1; t < arms; ++t) {
      const double diff = tape.preds(i, t - 1) - tape.preds(i, t);
      if (diff > 0.0) {
        out.mono += diff / dn;
        d_preds(i, t - 1) += c.delta_mono / dn;
        d_preds(i, t) -= c.delta_mono / dn;
      }
    }

  out.reg = model_weight_norm(model);
  out.total = out.factual + c.alpha_ce * (out.ce + out.prop_ce) + c.beta_im * out.imbalance +
              c.gamma_ate * out.ate + c.delta_mono * out.mono + c.lambda_reg * out.reg;

  if (accumulate_grads) {
    drcfr_backward(model, tape, d_preds, c.alpha_ce > 0.0 ? d_class : Matrix(),
                   c.alpha_ce > 0.0 ? d_prop : Matrix(), d_upsilon);
    detail::add_weight_decay_grads(model, c.lambda_reg);
  }
  return out;
}

inline LossBreakdown loss_base(DrcfrModel& model, const ObservationBatch& batch,
                               bool accumulate_grads = false,
                               const std::vector<double>* fixed_weights = nullptr) {
  return loss_base(model, batch, arm_frequencies(batch, model.config.num_arms),
                   accumulate_grads, fixed_weights);
}

struct TrainHistory {
  std::vector<double> epoch_loss;  // mean composite loss per epoch
  std::vector<std::string> warnings;
};

// Minibatch Adam over the composite loss. Arm shares for the re-weighting
// come from the full batch; the propensities are re-evaluated per minibatch.
inline TrainHistory train_drcfr(DrcfrModel& model, const ObservationBatch& batch, int epochs,
                                double lr, std::uint64_t seed) {
  if (batch.size() == 0) throw std::invalid_argument("train_drcfr: empty batch");
  batch.validate(model.config.num_arms);
  TrainHistory history;
  if (epochs == 0) return history;
  const std::vector<double> arm_freq = arm_frequencies(batch, model.config.num_arms);

  std::vector<AdamState> states;
  model.for_each_store([&](ParamStore& s) { states.emplace_back(s); });

  Rng order_rng(derive_seed(seed, 0xd5));
  std::vector<std::size_t> idx(batch.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const std::size_t bs = static_cast<std::size_t>(
      std::max(1, std::min<int>(model.config.batch_size, static_cast<int>(batch.size()))));

  for (int epoch = 0; epoch < epochs; ++epoch) {
    order_rng.shuffle(idx);
    double epoch_sum = 0.0;
    std::size_t num_batches = 0;
    for (std::size_t start = 0; start < idx.size(); start += bs) {
      const std::size_t stop = std::min(idx.size(), start + bs);
      const std::vector<std::size_t> take(idx.begin() + static_cast<std::ptrdiff_t>(start),
                                          idx.begin() + static_cast<std::ptrdiff_t>(stop));
      const ObservationBatch mini = batch.subset(take);
      model.zero_grads();
      const LossBreakdown loss = loss_base(model, mini, arm_freq, true);
      if (!std::isfinite(loss.total))
        throw std::runtime_error("train_drcfr: non-finite loss at epoch " +
                                 std::to_string(epoch));
      for (const std::string& w : loss.warnings) history.warnings.push_back(w);
      std::size_t si = 0;
      model.for_each_store([&](ParamStore& s) { adam_step(s, states[si++], lr); });
      epoch_sum += loss.total;
      ++num_batches;
    }
    history.epoch_loss.push_back(epoch_sum / static_cast<double>(num_batches));
  }
  return history;
}

inline TrainHistory train_drcfr(DrcfrModel& model, const ObservationBatch& batch,
                                std::uint64_t seed) {
  return train_drcfr(model, batch, model.config.epochs, model.config.lr, seed);
}

}  // namespace upliftlab
