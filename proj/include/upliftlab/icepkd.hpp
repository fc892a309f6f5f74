#pragma once

// Incremental training over a stream of observation batches. Each stage
// inherits the previous parameters, fits the composite loss on the newest
// data while distilling against the frozen previous model (optionally
// through a small corrector net that turns it into a proxy teacher on
// replayed samples), then refreshes a fixed-size replay buffer whose old/new
// split follows the cumulative sample counters.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "upliftlab/adam.hpp"
#include "upliftlab/checkpoint.hpp"
#include "upliftlab/dataset.hpp"
#include "upliftlab/drcfr.hpp"
#include "upliftlab/matrix.hpp"
#include "upliftlab/metrics.hpp"
#include "upliftlab/mlp.hpp"
#include "upliftlab/prob.hpp"
#include "upliftlab/rng.hpp"

namespace upliftlab {

// Fixed-size reservoir of past observations. `capacity` is one percent of
// the initial pool and never changes; `cumulative` counts every observation
// seen up to and including the owning stage.
struct ReplayBuffer {
  ObservationBatch samples;
  std::size_t capacity = 0;
  std::size_t cumulative = 0;
};

inline ReplayBuffer init_replay(const ObservationBatch& d0, std::uint64_t seed) {
  if (d0.size() < 100)
    throw std::invalid_argument("init_replay: need at least 100 rows to size the buffer");
  ReplayBuffer buf;
  buf.capacity = d0.size() / 100;
  buf.cumulative = d0.size();
  Rng rng(seed);
  buf.samples = d0.subset(rng.sample_without_replacement(d0.size(), buf.capacity));
  return buf;
}

// Old/new row split for a buffer refresh: keep floor(capacity * previous /
// total) replayed rows and draw ceil(capacity * incoming / total) fresh ones.
// The floor and ceiling always add up to the capacity.
inline std::pair<std::size_t, std::size_t> replay_split(std::size_t capacity,
                                                        std::size_t prev_cumulative,
                                                        std::size_t n_new) {
  const std::size_t total = prev_cumulative + n_new;
  if (total == 0) throw std::invalid_argument("replay_split: empty counters");
  const std::size_t keep = capacity * prev_cumulative / total;
  const std::size_t fresh = (capacity * n_new + total - 1) / total;
  return {keep, fresh};
}

inline ReplayBuffer update_replay(const ReplayBuffer& prev, const ObservationBatch& dk,
                                  std::uint64_t seed) {
  ReplayBuffer out;
  out.capacity = prev.capacity;
  out.cumulative = prev.cumulative + dk.size();
  const auto [keep, fresh] = replay_split(prev.capacity, prev.cumulative, dk.size());
  Rng rng(seed);
  std::vector<std::size_t> kept =
      rng.child(1).sample_without_replacement(prev.samples.size(), keep);
  std::vector<std::size_t> drawn = rng.child(2).sample_without_replacement(dk.size(), fresh);
  out.samples = ObservationBatch::concat(prev.samples.subset(kept), dk.subset(drawn));
  return out;
}

// Small net whose output nudges the frozen teacher's predictions. Tanh
// output keeps each correction in (-1, 1); the final layer starts scaled
// down so the initial correction is near zero.
struct Corrector {
  MlpSpec spec;
  ParamStore params;
};

inline Corrector make_corrector(int input_dim, int num_arms, int hidden, std::uint64_t seed) {
  Corrector c;
  const int h = hidden > 0 ? hidden : std::max(20, 4 * input_dim);
  c.spec = MlpSpec{{input_dim, h, h, num_arms}, HiddenActivation::relu, OutputActivation::tanh};
  c.params = xavier_init(c.spec, seed);
  Param& last = c.params.by_name("W" + std::to_string(c.spec.layer_count() - 1));
  for (double& v : last.value.data) v *= 0.01;
  return c;
}

struct StageState {
  DrcfrModel model;
  ReplayBuffer buffer;
  int stage = 0;
};

struct IcepkdConfig {
  double mu = 1.0;  // weight of the distillation term in the student update
  double lr = 1e-4;
  int epochs = 10;
  int restarts = 5;  // independent fits during initial model selection
  bool use_proxy = true;   // false: distill against the raw teacher
  bool use_replay = true;  // false: distill on the newest data instead
  bool use_kd = true;      // false: no distillation term at all
  int corrector_hidden = 0;  // 0 picks max(20, 4 * input_dim)
  double corrector_l2 = 0.01;
  std::uint64_t seed = 0;

  void validate() const {
    if (mu < 0.0) throw std::invalid_argument("IcepkdConfig: mu must be non-negative");
    if (epochs < 0) throw std::invalid_argument("IcepkdConfig: epochs must be non-negative");
    if (lr <= 0.0) throw std::invalid_argument("IcepkdConfig: lr must be positive");
    if (restarts < 1) throw std::invalid_argument("IcepkdConfig: need at least one restart");
    if (corrector_l2 < 0.0)
      throw std::invalid_argument("IcepkdConfig: corrector_l2 must be non-negative");
  }
};

namespace detail {

struct DistillTerms {
  double value = 0.0;
  Matrix d_student;    // d value / d student predictions
  Matrix d_corrector;  // d value / d corrector output; empty without one
};

// Mean (over rows) of the summed per-arm Bernoulli KL between the target
// p = clamp(teacher + correction) and the student prediction q. Gradients
// are gated to zero wherever the clamp is active, matching the loss value.
inline DistillTerms distill_terms(const Matrix& teacher_preds, const Matrix* corrector_out,
                                  const Matrix& student_preds) {
  const std::size_t n = student_preds.rows;
  const std::size_t arms = student_preds.cols;
  if (!teacher_preds.same_shape(student_preds) ||
      (corrector_out && !corrector_out->same_shape(student_preds)))
    throw std::invalid_argument("distill_terms: prediction shapes disagree");
  if (n == 0) throw std::invalid_argument("distill_terms: empty batch");
  DistillTerms out;
  out.d_student = Matrix(n, arms);
  if (corrector_out) out.d_corrector = Matrix(n, arms);
  const double dn = static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 0; t < arms; ++t) {
      const double p = teacher_preds(i, t) + (corrector_out ? (*corrector_out)(i, t) : 0.0);
      const double q = student_preds(i, t);
      out.value += kl_bernoulli(p, q) / dn;
      out.d_student(i, t) = kl_bernoulli_dq(p, q) / dn;
      if (corrector_out) out.d_corrector(i, t) = kl_bernoulli_dp(p, q) / dn;
    }
  return out;
}

}  // namespace detail

// Distillation against the raw previous model: per-sample, per-arm KL from
// the teacher's prediction to the student's, averaged over samples.
inline double kd_loss(const DrcfrModel& teacher, const DrcfrModel& student, const Matrix& x) {
  const Matrix tp = predict_all(teacher, x);
  const Matrix sp = predict_all(student, x);
  return detail::distill_terms(tp, nullptr, sp).value;
}

// Same, but the target is the teacher plus the corrector's output, clamped
// back into the open unit interval.
inline double proxy_kd_loss(const DrcfrModel& teacher, const Corrector& corrector,
                            const DrcfrModel& student, const Matrix& x) {
  const Matrix tp = predict_all(teacher, x);
  const Matrix sp = predict_all(student, x);
  const Matrix h = mlp_forward(corrector.spec, corrector.params, x);
  return detail::distill_terms(tp, &h, sp).value;
}

// One gradient accumulation of the distillation term. Student gradients are
// scaled by mu; corrector gradients are unscaled and include its weight
// decay. Returns the unscaled loss value. The teacher enters only through
// its precomputed predictions on x.
inline double accumulate_distill_grads(const Matrix& teacher_preds, DrcfrModel& student,
                                       Corrector* corrector, const Matrix& x, double mu,
                                       double corrector_l2 = 0.0) {
  DrcfrTape stape = drcfr_forward(student, x);
  Matrix h;
  MlpTape ctape;
  const Matrix* hp = nullptr;
  if (corrector) {
    h = mlp_forward(corrector->spec, corrector->params, x, &ctape);
    hp = &h;
  }
  const detail::DistillTerms terms = detail::distill_terms(teacher_preds, hp, stape.preds);
  if (mu != 0.0) {
    Matrix d = terms.d_student;
    for (double& v : d.data) v *= mu;
    drcfr_backward(student, stape, d, Matrix(), Matrix(), Matrix());
  }
  if (corrector) {
    mlp_backward(corrector->spec, corrector->params, ctape, terms.d_corrector);
    if (corrector_l2 > 0.0)
      for (Param& p : corrector->params) {
        if (p.name.empty() || p.name[0] != 'W') continue;
        for (std::size_t j = 0; j < p.value.size(); ++j)
          p.grad.data[j] += 2.0 * corrector_l2 * p.value.data[j];
      }
  }
  return terms.value;
}

struct InitialSelection {
  DrcfrModel model;
  std::vector<double> scores;  // validation score per restart; NaN when scoring failed
  std::size_t chosen = 0;
};

// Fits `restarts` independently seeded models on 80% of d0 and returns the
// one with the best allocation-curve area on the held-out 20%. Ties and
// unscorable fits fall back to the lowest restart index.
inline InitialSelection select_initial_model(const ObservationBatch& d0,
                                             const DrcfrConfig& config, int restarts,
                                             std::uint64_t seed) {
  if (restarts < 1) throw std::invalid_argument("select_initial_model: need restarts >= 1");
  if (d0.size() < 5) throw std::invalid_argument("select_initial_model: dataset too small");
  config.validate();

  std::vector<std::size_t> perm(d0.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  Rng split_rng(derive_seed(seed, 0x1d0));
  split_rng.shuffle(perm);
  const std::size_t n_val = std::max<std::size_t>(1, d0.size() / 5);
  const ObservationBatch val =
      d0.subset({perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_val)});
  const ObservationBatch train =
      d0.subset({perm.begin() + static_cast<std::ptrdiff_t>(n_val), perm.end()});

  const CostModel cm = CostModel::linear(config.num_arms);
  InitialSelection out;
  double best = -std::numeric_limits<double>::infinity();
  for (int r = 0; r < restarts; ++r) {
    const std::uint64_t rs = derive_seed(seed, 1000 + static_cast<std::uint64_t>(r));
    DrcfrModel m = DrcfrModel::init(config, derive_seed(rs, 1));
    train_drcfr(m, train, config.epochs, config.lr, derive_seed(rs, 2));
    double score = std::numeric_limits<double>::quiet_NaN();
    try {
      score = ras_curve(predict_all(m, val.covariates), val, cm).aucc;
    } catch (const std::exception&) {
      // validation split can lack an arm or degenerate; treat as unscorable
    }
    out.scores.push_back(score);
    if (std::isfinite(score) && score > best) {
      best = score;
      out.chosen = static_cast<std::size_t>(r);
      out.model = std::move(m);
    } else if (r == 0) {
      out.model = std::move(m);
    }
  }
  return out;
}

inline std::uint64_t stage_train_seed(const IcepkdConfig& cfg, int stage) {
  return derive_seed(cfg.seed, 0x57a6e000ull + static_cast<std::uint64_t>(stage));
}

struct StageResult {
  StageState state;
  TrainHistory history;
  std::size_t replay_kept = 0;   // rows retained from the previous buffer
  std::size_t replay_fresh = 0;  // rows drawn from the newest data
};

// One incremental stage: copy the previous parameters, run minibatch Adam on
// the newest data with the distillation term added (teacher frozen at the
// previous parameters, fresh corrector each stage), then refresh the buffer.
// With mu = 0 the parameter trajectory matches plain training on dk from the
// inherited initialization, step for step.
inline StageResult incremental_stage(const StageState& prev, const ObservationBatch& dk,
                                     const IcepkdConfig& cfg) {
  cfg.validate();
  if (dk.size() == 0) throw std::invalid_argument("incremental_stage: empty increment");

  const int k = prev.stage + 1;
  const std::uint64_t sseed = stage_train_seed(cfg, k);
  StageResult out;
  out.state.stage = k;
  out.state.model = prev.model;

  DrcfrModel& student = out.state.model;
  const DrcfrConfig& mc = student.config;
  const ObservationBatch& pool = cfg.use_replay ? prev.buffer.samples : dk;

  Corrector corrector;
  Corrector* cptr = nullptr;
  if (cfg.use_kd && cfg.use_proxy) {
    corrector =
        make_corrector(mc.input_dim, mc.num_arms, cfg.corrector_hidden, derive_seed(sseed, 0xc0));
    cptr = &corrector;
  }

  if (cfg.epochs > 0) {
    dk.validate(mc.num_arms);
    if (cfg.use_kd && pool.size() == 0)
      throw std::invalid_argument("incremental_stage: empty distillation pool");
    const std::vector<double> arm_freq = arm_frequencies(dk, mc.num_arms);
    Matrix teacher_preds;
    if (cfg.use_kd) teacher_preds = predict_all(prev.model, pool.covariates);

    std::vector<AdamState> states;
    student.for_each_store([&](ParamStore& s) { states.emplace_back(s); });
    std::optional<AdamState> cstate;
    if (cptr) cstate.emplace(cptr->params);

    Rng order_rng(derive_seed(sseed, 0xd5));
    std::vector<std::size_t> idx(dk.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    const std::size_t bs = static_cast<std::size_t>(
        std::max(1, std::min<int>(mc.batch_size, static_cast<int>(dk.size()))));

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      order_rng.shuffle(idx);
      double epoch_sum = 0.0;
      std::size_t num_batches = 0;
      for (std::size_t start = 0; start < idx.size(); start += bs) {
        const std::size_t stop = std::min(idx.size(), start + bs);
        const std::vector<std::size_t> take(idx.begin() + static_cast<std::ptrdiff_t>(start),
                                            idx.begin() + static_cast<std::ptrdiff_t>(stop));
        const ObservationBatch mini = dk.subset(take);
        student.zero_grads();
        if (cptr) cptr->params.zero_grads();
        const LossBreakdown base = loss_base(student, mini, arm_freq, true);
        double step_total = base.total;
        for (const std::string& w : base.warnings) out.history.warnings.push_back(w);
        if (cfg.use_kd) {
          const double pt = accumulate_distill_grads(teacher_preds, student, cptr,
                                                     pool.covariates, cfg.mu, cfg.corrector_l2);
          step_total += cfg.mu * pt;
        }
        if (!std::isfinite(step_total))
          throw std::runtime_error("incremental_stage: non-finite loss at epoch " +
                                   std::to_string(epoch));
        std::size_t si = 0;
        student.for_each_store([&](ParamStore& s) { adam_step(s, states[si++], cfg.lr); });
        if (cptr) adam_step(cptr->params, *cstate, cfg.lr);
        epoch_sum += step_total;
        ++num_batches;
      }
      out.history.epoch_loss.push_back(epoch_sum / static_cast<double>(num_batches));
    }
  }

  const auto [keep, fresh] = replay_split(prev.buffer.capacity, prev.buffer.cumulative, dk.size());
  out.replay_kept = keep;
  out.replay_fresh = fresh;
  out.state.buffer = update_replay(prev.buffer, dk, derive_seed(sseed, 0xb1));
  return out;
}

inline void save_buffer(const ReplayBuffer& buf, const std::string& path) {
  const nlohmann::json j{{"format_version", kCheckpointVersion},
                         {"kind", "replay-buffer"},
                         {"capacity", buf.capacity},
                         {"cumulative", buf.cumulative},
                         {"samples", batch_to_json(buf.samples)}};
  detail::write_json_file(j, path);
}

inline ReplayBuffer load_buffer(const std::string& path) {
  const nlohmann::json j = detail::read_json_file(path);
  try {
    detail::check_header(j, "replay-buffer", path);
    ReplayBuffer buf;
    buf.capacity = j.at("capacity").get<std::size_t>();
    buf.cumulative = j.at("cumulative").get<std::size_t>();
    buf.samples = batch_from_json(j.at("samples"));
    return buf;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("checkpoint: " + path + " is malformed: " + e.what());
  }
}

struct StreamResult {
  DrcfrModel initial_model;
  std::vector<double> initial_scores;
  std::vector<StageResult> stages;
};

namespace detail {

inline std::string stage_file_name(int stage, const char* what) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "stage_%03d_%s.json", stage, what);
  return buf;
}

inline std::string stage_file(const std::string& dir, int stage, const char* what) {
  return (std::filesystem::path(dir) / stage_file_name(stage, what)).string();
}

}  // namespace detail

// Runs the full stream: initial selection and buffer on d0, then one
// incremental stage per batch. When out_dir is given, every stage leaves a
// model checkpoint, a buffer snapshot and a manifest tying them together.
inline StreamResult run_stream(const ObservationBatch& d0,
                               const std::vector<ObservationBatch>& stream,
                               const DrcfrConfig& model_config, const IcepkdConfig& cfg,
                               const std::string& out_dir = "") {
  cfg.validate();
  if (stream.empty()) throw std::invalid_argument("run_stream: empty stream");

  StreamResult res;
  InitialSelection sel =
      select_initial_model(d0, model_config, cfg.restarts, derive_seed(cfg.seed, 0xa11));
  res.initial_model = std::move(sel.model);
  res.initial_scores = std::move(sel.scores);

  StageState state;
  state.model = res.initial_model;
  state.buffer = init_replay(d0, derive_seed(cfg.seed, 0xb00));
  state.stage = 0;

  const bool persist = !out_dir.empty();
  if (persist) {
    std::filesystem::create_directories(out_dir);
    save_model(state.model, detail::stage_file(out_dir, 0, "model"));
    save_buffer(state.buffer, detail::stage_file(out_dir, 0, "buffer"));
  }

  for (std::size_t k = 1; k <= stream.size(); ++k) {
    StageResult r = incremental_stage(state, stream[k - 1], cfg);
    state = r.state;
    if (persist) {
      // paths in the manifest are relative to its own directory
      const int sk = static_cast<int>(k);
      save_model(state.model, detail::stage_file(out_dir, sk, "model"));
      save_buffer(state.buffer, detail::stage_file(out_dir, sk, "buffer"));
      const nlohmann::json manifest{{"format_version", kCheckpointVersion},
                                    {"kind", "stage-manifest"},
                                    {"stage", state.stage},
                                    {"cumulative", state.buffer.cumulative},
                                    {"replay_kept", r.replay_kept},
                                    {"replay_fresh", r.replay_fresh},
                                    {"epoch_loss", r.history.epoch_loss},
                                    {"model_path", detail::stage_file_name(sk, "model")},
                                    {"buffer_path", detail::stage_file_name(sk, "buffer")}};
      detail::write_json_file(manifest, detail::stage_file(out_dir, sk, "manifest"));
    }
    res.stages.push_back(std::move(r));
  }
  return res;
}

}  // namespace upliftlab
