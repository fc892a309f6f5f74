#pragma once

// Benchmark orchestration over a drifting stream. The strategy roster covers
// full retraining on the previous period's data, training on the newest
// increment only, a frozen initial model, and the incremental trainer with
// its ablation variants. Every strategy predicts each period's randomized
// test split; per-period metrics are averaged over seeds and compared
// against a baseline strategy through per-period improvements and their
// stability summaries. Reports are deterministic: the same config and seeds
// reproduce every emitted byte.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "upliftlab/checkpoint.hpp"
#include "upliftlab/config.hpp"
#include "upliftlab/datagen.hpp"
#include "upliftlab/dataset.hpp"
#include "upliftlab/drcfr.hpp"
#include "upliftlab/icepkd.hpp"
#include "upliftlab/metrics.hpp"
#include "upliftlab/rng.hpp"

namespace upliftlab {

inline const std::vector<std::string>& all_strategies() {
  static const std::vector<std::string> v = {"drcfr-a",      "drcfr-b",      "drcfr-c",
                                             "icepkd",       "icepkd-wo-pt", "icepkd-wo-rm",
                                             "icepkd-wo-kd"};
  return v;
}

inline std::size_t strategy_index(const std::string& id) {
  const auto& all = all_strategies();
  for (std::size_t i = 0; i < all.size(); ++i)
    if (all[i] == id) return i;
  throw std::invalid_argument("unknown strategy '" + id + "'");
}

inline std::string strategy_label(const std::string& id) {
  static const std::map<std::string, std::string> labels = {
      {"drcfr-a", "DR-CFR A"},           {"drcfr-b", "DR-CFR B"},
      {"drcfr-c", "DR-CFR C"},           {"icepkd", "ICE-PKD"},
      {"icepkd-wo-pt", "ICE-PKD w/o PT"}, {"icepkd-wo-rm", "ICE-PKD w/o RM"},
      {"icepkd-wo-kd", "ICE-PKD w/o KD"}};
  const auto it = labels.find(id);
  if (it == labels.end()) throw std::invalid_argument("unknown strategy '" + id + "'");
  return it->second;
}

inline bool strategy_is_incremental(const std::string& id) { return id.rfind("icepkd", 0) == 0; }

struct MetricDef {
  const char* id;
  const char* label;
  bool larger_better;
};

inline const std::array<MetricDef, 4>& metric_defs() {
  static const std::array<MetricDef, 4> defs = {{{"ate_error", "ε_ATE", false},
                                                 {"pehe", "ε_PEHE", false},
                                                 {"qini", "QINI", true},
                                                 {"ras_aucc", "RAS-AUCC", true}}};
  return defs;
}

struct ExperimentConfig {
  std::string dataset = "synth2d";  // synth2d | synth10d | csv
  int periods = 6;                  // evaluated stages k = 1..periods
  std::size_t train_rows = 10000;   // per period, synthetic datasets
  std::size_t test_rows = 50000;
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::vector<std::string> strategies = all_strategies();
  std::string baseline = "drcfr-a";
  std::string out_dir;

  double full_lr = 1e-3;  // non-incremental strategies
  int full_epochs = 20;
  double inc_lr = 1e-4;  // incremental trainer
  int inc_epochs = 10;
  // The incremental stages run at a tenth of the full learning rate, so they
  // need more optimizer steps per pass to absorb a period's drift; a smaller
  // batch on the (already small) increments provides them.
  int inc_batch = 32;
  double mu = 1.0;
  int restarts = 5;
  double dk_fraction = 0.1;  // share of each period's training set used as the increment
  int window = 0;  // >0: the retraining strategy uses the last `window` increments instead

  bool emit_curves = true;
  bool save_checkpoints = true;

  // dataset == csv: one training file per period 0..periods and one test
  // file per period 1..periods (entry 0 is a placeholder)
  std::vector<std::string> csv_train;
  std::vector<std::string> csv_test;

  void validate() const {
    if (dataset != "synth2d" && dataset != "synth10d" && dataset != "csv")
      throw std::invalid_argument("ExperimentConfig: unknown dataset '" + dataset + "'");
    if (periods < 1) throw std::invalid_argument("ExperimentConfig: need at least one period");
    if (dataset != "csv" && periods >= kSyntheticPeriods)
      throw std::invalid_argument("ExperimentConfig: synthetic streams cover periods 1.." +
                                  std::to_string(kSyntheticPeriods - 1));
    if (dataset != "csv" && train_rows < 100)
      throw std::invalid_argument("ExperimentConfig: need at least 100 training rows per period");
    if (test_rows < 1) throw std::invalid_argument("ExperimentConfig: test_rows must be positive");
    if (seeds.empty()) throw std::invalid_argument("ExperimentConfig: seeds must be non-empty");
    if (strategies.empty())
      throw std::invalid_argument("ExperimentConfig: strategies must be non-empty");
    for (std::size_t i = 0; i < strategies.size(); ++i) {
      strategy_index(strategies[i]);
      for (std::size_t j = i + 1; j < strategies.size(); ++j)
        if (strategies[i] == strategies[j])
          throw std::invalid_argument("ExperimentConfig: duplicate strategy '" + strategies[i] +
                                      "'");
    }
    strategy_index(baseline);
    if (!(dk_fraction > 0.0 && dk_fraction <= 1.0))
      throw std::invalid_argument("ExperimentConfig: dk_fraction must be in (0, 1]");
    if (full_epochs < 1 || inc_epochs < 0)
      throw std::invalid_argument("ExperimentConfig: bad epoch counts");
    if (full_lr <= 0.0 || inc_lr <= 0.0)
      throw std::invalid_argument("ExperimentConfig: learning rates must be positive");
    if (inc_batch < 1) throw std::invalid_argument("ExperimentConfig: inc_batch must be positive");
    if (mu < 0.0) throw std::invalid_argument("ExperimentConfig: mu must be non-negative");
    if (restarts < 1) throw std::invalid_argument("ExperimentConfig: restarts must be positive");
    if (window < 0) throw std::invalid_argument("ExperimentConfig: window must be non-negative");
    if (dataset == "csv") {
      const std::size_t want = static_cast<std::size_t>(periods) + 1;
      if (csv_train.size() != want || csv_test.size() != want)
        throw std::invalid_argument(
            "ExperimentConfig: csv streams need one train and one test path per period 0.." +
            std::to_string(periods));
    }
  }

  static ExperimentConfig from_config(const KeyValueConfig& kv) {
    ExperimentConfig c;
    c.dataset = kv.get_string("dataset", c.dataset);
    c.periods = static_cast<int>(kv.get_int("periods", c.periods));
    c.train_rows = static_cast<std::size_t>(
        kv.get_int("train_rows", static_cast<long>(c.train_rows)));
    c.test_rows =
        static_cast<std::size_t>(kv.get_int("test_rows", static_cast<long>(c.test_rows)));
    c.seeds = kv.get_u64_list("seeds", c.seeds);
    std::vector<std::string> strats = kv.get_list("strategies", c.strategies);
    if (strats.size() == 1 && strats[0] == "all") strats = all_strategies();
    c.strategies = strats;
    c.baseline = kv.get_string("baseline", c.baseline);
    c.out_dir = kv.get_string("out", c.out_dir);
    c.full_lr = kv.get_double("full_lr", c.full_lr);
    c.full_epochs = static_cast<int>(kv.get_int("full_epochs", c.full_epochs));
    c.inc_lr = kv.get_double("inc_lr", c.inc_lr);
    c.inc_epochs = static_cast<int>(kv.get_int("inc_epochs", c.inc_epochs));
    c.inc_batch = static_cast<int>(kv.get_int("inc_batch", c.inc_batch));
    c.mu = kv.get_double("mu", c.mu);
    c.restarts = static_cast<int>(kv.get_int("restarts", c.restarts));
    c.dk_fraction = kv.get_double("dk_fraction", c.dk_fraction);
    c.window = static_cast<int>(kv.get_int("window", c.window));
    c.emit_curves = kv.get_bool("emit_curves", c.emit_curves);
    c.save_checkpoints = kv.get_bool("save_checkpoints", c.save_checkpoints);
    c.csv_train = kv.get_list("csv_train", c.csv_train);
    c.csv_test = kv.get_list("csv_test", c.csv_test);
    return c;
  }

  // Deterministic serialization of everything that identifies the
  // experiment; output plumbing (out dir, emission switches) is excluded so
  // the same experiment hashes identically wherever it writes.
  std::string canonical() const {
    const auto g = [](double v) {
      char buf[40];
      std::snprintf(buf, sizeof(buf), "%.17g", v);
      return std::string(buf);
    };
    const auto join = [](const auto& items) {
      std::string out;
      for (std::size_t i = 0; i < items.size(); ++i) {
        if (i) out += ",";
        std::ostringstream one;
        one << items[i];
        out += one.str();
      }
      return out;
    };
    std::ostringstream out;
    out << "baseline = " << baseline << "\n";
    out << "csv_test = " << join(csv_test) << "\n";
    out << "csv_train = " << join(csv_train) << "\n";
    out << "dataset = " << dataset << "\n";
    out << "dk_fraction = " << g(dk_fraction) << "\n";
    out << "full_epochs = " << full_epochs << "\n";
    out << "full_lr = " << g(full_lr) << "\n";
    out << "inc_batch = " << inc_batch << "\n";
    out << "inc_epochs = " << inc_epochs << "\n";
    out << "inc_lr = " << g(inc_lr) << "\n";
    out << "mu = " << g(mu) << "\n";
    out << "periods = " << periods << "\n";
    out << "restarts = " << restarts << "\n";
    out << "seeds = " << join(seeds) << "\n";
    out << "strategies = " << join(strategies) << "\n";
    out << "test_rows = " << test_rows << "\n";
    out << "train_rows = " << train_rows << "\n";
    out << "window = " << window << "\n";
    return out.str();
  }
};

inline std::string config_hash(const ExperimentConfig& cfg) {
  // FNV-1a over the canonical serialization
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : cfg.canonical()) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------- streams

struct StreamData {
  std::vector<PeriodDataset> periods;        // index 0..K; period 0's test split is unused
  std::vector<ObservationBatch> increments;  // increments[k], k >= 1: head of period k's train
};

inline ObservationBatch head_fraction(const ObservationBatch& b, double fraction) {
  if (b.size() == 0) throw std::invalid_argument("head_fraction: empty batch");
  const std::size_t take = std::max<std::size_t>(
      1, static_cast<std::size_t>(
             std::floor(fraction * static_cast<double>(b.size()) + 1e-9)));
  std::vector<std::size_t> idx(std::min(take, b.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return b.subset(idx);
}

inline StreamData make_stream(const ExperimentConfig& cfg, std::uint64_t seed) {
  StreamData s;
  const std::uint64_t data_seed = derive_seed(seed, 0xda7a);
  for (int k = 0; k <= cfg.periods; ++k) {
    PeriodDataset d;
    const std::size_t n_test = k == 0 ? 1 : cfg.test_rows;
    if (cfg.dataset == "synth2d") {
      d = gen_period(k, cfg.train_rows, n_test, data_seed);
    } else if (cfg.dataset == "synth10d") {
      d = gen_highdim_period(k, cfg.train_rows, n_test, data_seed);
    } else {
      d.period = k;
      d.train = load_csv(cfg.csv_train[static_cast<std::size_t>(k)]);
      d.train.period = k;
      if (k > 0) {
        d.test = load_csv(cfg.csv_test[static_cast<std::size_t>(k)]);
        d.test.period = k;
      }
    }
    s.periods.push_back(std::move(d));
  }
  s.increments.resize(s.periods.size());
  for (int k = 1; k <= cfg.periods; ++k)
    s.increments[static_cast<std::size_t>(k)] =
        head_fraction(s.periods[static_cast<std::size_t>(k)].train, cfg.dk_fraction);
  return s;
}

inline int infer_num_arms(const StreamData& stream) {
  if (stream.periods.at(0).train.has_true_probs())
    return static_cast<int>(stream.periods[0].train.true_probs.cols);
  int max_t = 1;
  for (const PeriodDataset& d : stream.periods) {
    for (int t : d.train.treatments) max_t = std::max(max_t, t);
    for (int t : d.test.treatments) max_t = std::max(max_t, t);
  }
  return max_t + 1;
}

inline DrcfrConfig model_config_for(const ExperimentConfig& cfg, const StreamData& stream) {
  DrcfrConfig mc = DrcfrConfig::defaults(static_cast<int>(stream.periods.at(0).train.dim()),
                                         infer_num_arms(stream));
  mc.lr = cfg.full_lr;
  mc.epochs = cfg.full_epochs;
  return mc;
}

// ------------------------------------------------------------- evaluation

struct PeriodMetrics {
  int period = 0;
  double ate = std::numeric_limits<double>::quiet_NaN();
  double pehe = std::numeric_limits<double>::quiet_NaN();
  double qini = std::numeric_limits<double>::quiet_NaN();
  double ras = std::numeric_limits<double>::quiet_NaN();
};

inline double metric_of(const PeriodMetrics& m, std::size_t metric_index) {
  switch (metric_index) {
    case 0: return m.ate;
    case 1: return m.pehe;
    case 2: return m.qini;
    default: return m.ras;
  }
}

inline PeriodMetrics evaluate_period(const Matrix& preds, const PeriodDataset& data,
                                     const CostModel& cm, RasCurve* ras_out = nullptr) {
  PeriodMetrics m;
  m.period = data.period;
  m.ate = ate_error(preds, data.test);
  if (data.test.has_true_probs())
    m.pehe = pehe(uplift_from_probs(preds), uplift_from_probs(data.test.true_probs));
  m.qini = qini_coefficient(preds, data.test);
  RasCurve rc = ras_curve(preds, data.test, cm);
  m.ras = rc.aucc;
  if (ras_out) *ras_out = std::move(rc);
  return m;
}

// ----------------------------------------------------------- strategy runs

struct StrategyRun {
  std::string strategy;
  std::uint64_t seed = 0;
  std::vector<PeriodMetrics> periods;  // k = 1..K
  std::string error;                   // non-empty when the strategy failed
  bool failed() const { return !error.empty(); }
};

// Initial model and buffer shared by the frozen strategy and every
// incremental variant within one seed.
struct SeedSharedState {
  bool ready = false;
  DrcfrModel initial;
  ReplayBuffer buffer0;
  std::vector<double> scores;
};

inline SeedSharedState make_shared_state(const StreamData& stream, const ExperimentConfig& cfg,
                                         std::uint64_t seed) {
  SeedSharedState s;
  const DrcfrConfig mc = model_config_for(cfg, stream);
  InitialSelection sel = select_initial_model(stream.periods.at(0).train, mc, cfg.restarts,
                                              derive_seed(seed, 0x5e1ec7));
  s.initial = std::move(sel.model);
  s.scores = std::move(sel.scores);
  s.buffer0 = init_replay(stream.periods[0].train, derive_seed(seed, 0xb0f));
  s.ready = true;
  return s;
}

// Called once per evaluated period with that period's predictions and
// allocation curve; used for curve emission.
using PeriodSink =
    std::function<void(int period, const Matrix& preds, const RasCurve& ras,
                       const PeriodDataset& data)>;

inline StrategyRun strategy_run(const std::string& strategy, const StreamData& stream,
                                const ExperimentConfig& cfg, std::uint64_t seed,
                                const SeedSharedState* shared = nullptr,
                                const std::string& checkpoint_dir = "",
                                const PeriodSink& sink = {}) {
  const std::size_t idx = strategy_index(strategy);
  if (stream.periods.size() < 2)
    throw std::invalid_argument("strategy_run: stream has no increment periods");
  const int K = static_cast<int>(stream.periods.size()) - 1;

  StrategyRun run;
  run.strategy = strategy;
  run.seed = seed;

  const DrcfrConfig mc = model_config_for(cfg, stream);
  const CostModel cm = CostModel::linear(mc.num_arms);
  const std::uint64_t run_seed = derive_seed(seed, 0x5100 + idx);

  SeedSharedState local;
  const bool needs_shared = strategy == "drcfr-c" || strategy_is_incremental(strategy);
  if (needs_shared && (!shared || !shared->ready)) {
    local = make_shared_state(stream, cfg, seed);
    shared = &local;
  }

  const bool persist = !checkpoint_dir.empty();
  if (persist) std::filesystem::create_directories(checkpoint_dir);
  const auto checkpoint_path = [&](int k) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "period_%d_model.json", k);
    return (std::filesystem::path(checkpoint_dir) / buf).string();
  };

  const auto finish_period = [&](int k, const DrcfrModel& model) {
    const PeriodDataset& d = stream.periods[static_cast<std::size_t>(k)];
    const Matrix preds = predict_all(model, d.test.covariates);
    RasCurve rc;
    run.periods.push_back(evaluate_period(preds, d, cm, &rc));
    if (sink) sink(k, preds, rc, d);
    if (persist) save_model(model, checkpoint_path(k));
  };

  if (strategy == "drcfr-a" || strategy == "drcfr-b") {
    for (int k = 1; k <= K; ++k) {
      ObservationBatch train_set;
      if (strategy == "drcfr-b") {
        train_set = stream.increments[static_cast<std::size_t>(k)];
      } else if (cfg.window > 0) {
        // online variant: trailing window of increments, newest included
        for (int j = std::max(1, k - cfg.window + 1); j <= k; ++j)
          train_set =
              ObservationBatch::concat(train_set, stream.increments[static_cast<std::size_t>(j)]);
      } else {
        train_set = stream.periods[static_cast<std::size_t>(k) - 1].train;
      }
      DrcfrModel m = DrcfrModel::init(mc, derive_seed(run_seed, 2 * static_cast<std::uint64_t>(k)));
      train_drcfr(m, train_set, mc.epochs, mc.lr,
                  derive_seed(run_seed, 2 * static_cast<std::uint64_t>(k) + 1));
      finish_period(k, m);
    }
  } else if (strategy == "drcfr-c") {
    for (int k = 1; k <= K; ++k) finish_period(k, shared->initial);
  } else {
    IcepkdConfig icfg;
    icfg.mu = cfg.mu;
    icfg.lr = cfg.inc_lr;
    icfg.epochs = cfg.inc_epochs;
    icfg.restarts = cfg.restarts;
    icfg.seed = derive_seed(run_seed, 0x1ce);
    if (strategy == "icepkd-wo-pt") icfg.use_proxy = false;
    if (strategy == "icepkd-wo-rm") icfg.use_replay = false;
    if (strategy == "icepkd-wo-kd") icfg.use_kd = false;
    StageState st;
    st.model = shared->initial;
    st.model.config.batch_size = cfg.inc_batch;
    st.buffer = shared->buffer0;
    st.stage = 0;
    for (int k = 1; k <= K; ++k) {
      StageResult r = incremental_stage(st, stream.increments[static_cast<std::size_t>(k)], icfg);
      st = std::move(r.state);
      finish_period(k, st.model);
    }
  }
  return run;
}

// ------------------------------------------------------------ aggregation

struct MetricStability {
  std::vector<double> impr;  // per-period percent improvement vs the baseline
  double prio10 = std::numeric_limits<double>::quiet_NaN();
  double prdu5 = std::numeric_limits<double>::quiet_NaN();
  double ad = std::numeric_limits<double>::quiet_NaN();
};

struct StrategySummary {
  std::string strategy;
  std::vector<PeriodMetrics> mean_periods;            // seed averages, k = 1..K
  std::map<std::string, MetricStability> stability;   // keyed by metric id
};

inline std::vector<StrategySummary> summarize(const ExperimentConfig& cfg,
                                              const std::vector<StrategyRun>& runs) {
  const std::size_t K = static_cast<std::size_t>(cfg.periods);
  const double nan = std::numeric_limits<double>::quiet_NaN();

  std::vector<StrategySummary> out;
  for (const std::string& strat : cfg.strategies) {
    StrategySummary s;
    s.strategy = strat;
    s.mean_periods.assign(K, PeriodMetrics{});
    for (std::size_t k = 0; k < K; ++k) s.mean_periods[k].period = static_cast<int>(k) + 1;

    std::vector<std::array<double, 4>> acc(K, {0.0, 0.0, 0.0, 0.0});
    int good = 0;
    for (const StrategyRun& r : runs) {
      if (r.strategy != strat || r.failed() || r.periods.size() != K) continue;
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t mi = 0; mi < 4; ++mi) acc[k][mi] += metric_of(r.periods[k], mi);
      ++good;
    }
    if (good > 0)
      for (std::size_t k = 0; k < K; ++k) {
        s.mean_periods[k].ate = acc[k][0] / good;
        s.mean_periods[k].pehe = acc[k][1] / good;
        s.mean_periods[k].qini = acc[k][2] / good;
        s.mean_periods[k].ras = acc[k][3] / good;
      }
    out.push_back(std::move(s));
  }

  const StrategySummary* base = nullptr;
  for (const StrategySummary& s : out)
    if (s.strategy == cfg.baseline) base = &s;
  if (!base) return out;

  for (StrategySummary& s : out) {
    for (std::size_t mi = 0; mi < metric_defs().size(); ++mi) {
      const MetricDef& def = metric_defs()[mi];
      MetricStability st;
      std::vector<double> vals, base_vals, valid_impr;
      for (std::size_t k = 0; k < K; ++k) {
        const double v = metric_of(s.mean_periods[k], mi);
        const double b = metric_of(base->mean_periods[k], mi);
        double impr = nan;
        if (std::isfinite(v) && std::isfinite(b)) {
          try {
            impr = improvement(v, b, def.larger_better);
          } catch (const std::exception&) {
            // zero baseline leaves the period's improvement undefined
          }
          vals.push_back(v);
          base_vals.push_back(b);
        }
        st.impr.push_back(impr);
        if (std::isfinite(impr)) valid_impr.push_back(impr);
      }
      if (!valid_impr.empty()) {
        st.prio10 = prio10(valid_impr);
        st.prdu5 = prdu5(valid_impr);
      }
      if (!vals.empty()) st.ad = ad(vals, base_vals);
      s.stability[def.id] = std::move(st);
    }
  }
  return out;
}

// --------------------------------------------------------------- reports

struct ExperimentResult {
  ExperimentConfig config;
  std::string config_hash;
  std::vector<StrategyRun> runs;
  std::vector<StrategySummary> summaries;
  std::vector<std::string> report_paths;
  std::string manifest_path;
};

namespace detail {

inline std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string fixed(double v, int digits) {
  if (!std::isfinite(v)) return "n/a";
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

// undefined metric values become JSON nulls instead of non-standard NaN numbers
inline nlohmann::json json_num(double v) {
  if (std::isfinite(v)) return v;
  return nullptr;
}

inline nlohmann::json json_num(const std::vector<double>& v) {
  nlohmann::json arr = nlohmann::json::array();
  for (double x : v) arr.push_back(json_num(x));
  return arr;
}

inline void write_text_file(const std::string& path, const std::string& body) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("report: cannot open " + path + " for writing");
  out << body;
  if (!out) throw std::runtime_error("report: write failed for " + path);
}

}  // namespace detail

inline std::string report_csv(const ExperimentResult& res) {
  std::ostringstream out;
  out << "period";
  for (const MetricDef& def : metric_defs())
    for (const StrategySummary& s : res.summaries) out << "," << def.id << "." << s.strategy;
  out << "\n";
  for (int k = 0; k < res.config.periods; ++k) {
    out << (k + 1);
    for (std::size_t mi = 0; mi < metric_defs().size(); ++mi)
      for (const StrategySummary& s : res.summaries)
        out << "," << detail::g17(metric_of(s.mean_periods[static_cast<std::size_t>(k)], mi));
    out << "\n";
  }
  return out.str();
}

inline std::string report_markdown(const ExperimentResult& res) {
  const ExperimentConfig& cfg = res.config;
  std::ostringstream out;
  out << "# Continual uplift benchmark\n\n";
  out << "- dataset: " << cfg.dataset << "\n";
  out << "- periods: 1.." << cfg.periods << "\n";
  out << "- seeds:";
  for (std::uint64_t s : cfg.seeds) out << " " << s;
  out << "\n";
  out << "- baseline: " << strategy_label(cfg.baseline) << "\n";
  out << "- config hash: " << res.config_hash << "\n\n";

  const bool have_stability = !res.summaries.empty() && !res.summaries[0].stability.empty();
  if (have_stability) {
    out << "## Stability versus the baseline\n\n";
    out << "PRIO-10: share of periods improving more than 10% over the baseline. "
        << "PRDU-5: share of periods deteriorating less than 5%. "
        << "AD: mean per-period difference in raw metric units "
        << "(negative is better for the error metrics).\n\n";
    out << "| Strategy |";
    for (const MetricDef& def : metric_defs())
      out << " " << def.label << " PRIO-10 | " << def.label << " PRDU-5 | " << def.label
          << " AD |";
    out << "\n|---|";
    for (std::size_t i = 0; i < metric_defs().size() * 3; ++i) out << "---:|";
    out << "\n";
    for (const StrategySummary& s : res.summaries) {
      out << "| " << strategy_label(s.strategy) << " |";
      for (const MetricDef& def : metric_defs()) {
        const MetricStability& st = s.stability.at(def.id);
        out << " " << detail::fixed(st.prio10, 1) << " | " << detail::fixed(st.prdu5, 1) << " | "
            << detail::fixed(st.ad, 4) << " |";
      }
      out << "\n";
    }
    out << "\n";
  }

  out << "## Seed-averaged metric values per period\n";
  for (std::size_t mi = 0; mi < metric_defs().size(); ++mi) {
    out << "\n### " << metric_defs()[mi].label << "\n\n";
    out << "| period |";
    for (const StrategySummary& s : res.summaries) out << " " << strategy_label(s.strategy) << " |";
    out << "\n|---|";
    for (std::size_t i = 0; i < res.summaries.size(); ++i) out << "---:|";
    out << "\n";
    for (int k = 0; k < cfg.periods; ++k) {
      out << "| " << (k + 1) << " |";
      for (const StrategySummary& s : res.summaries)
        out << " " << detail::fixed(metric_of(s.mean_periods[static_cast<std::size_t>(k)], mi), 4)
            << " |";
      out << "\n";
    }
  }

  std::vector<const StrategyRun*> failures;
  for (const StrategyRun& r : res.runs)
    if (r.failed()) failures.push_back(&r);
  if (!failures.empty()) {
    out << "\n## Failed runs\n\n";
    for (const StrategyRun* r : failures)
      out << "- " << r->strategy << " (seed " << r->seed << "): " << r->error << "\n";
  }
  return out.str();
}

inline nlohmann::json report_json(const ExperimentResult& res) {
  nlohmann::json j;
  j["kind"] = "experiment-report";
  j["format_version"] = kCheckpointVersion;
  j["config"] = res.config.canonical();
  j["config_hash"] = res.config_hash;

  nlohmann::json runs = nlohmann::json::array();
  for (const StrategyRun& r : res.runs) {
    nlohmann::json periods = nlohmann::json::array();
    for (const PeriodMetrics& p : r.periods)
      periods.push_back({{"period", p.period},
                         {"ate_error", detail::json_num(p.ate)},
                         {"pehe", detail::json_num(p.pehe)},
                         {"qini", detail::json_num(p.qini)},
                         {"ras_aucc", detail::json_num(p.ras)}});
    runs.push_back({{"strategy", r.strategy},
                    {"seed", r.seed},
                    {"error", r.error},
                    {"periods", periods}});
  }
  j["runs"] = runs;

  nlohmann::json summaries = nlohmann::json::array();
  for (const StrategySummary& s : res.summaries) {
    nlohmann::json means = nlohmann::json::array();
    for (const PeriodMetrics& p : s.mean_periods)
      means.push_back({{"period", p.period},
                       {"ate_error", detail::json_num(p.ate)},
                       {"pehe", detail::json_num(p.pehe)},
                       {"qini", detail::json_num(p.qini)},
                       {"ras_aucc", detail::json_num(p.ras)}});
    nlohmann::json stab = nlohmann::json::object();
    for (const auto& [metric, st] : s.stability)
      stab[metric] = {{"impr", detail::json_num(st.impr)},
                      {"prio10", detail::json_num(st.prio10)},
                      {"prdu5", detail::json_num(st.prdu5)},
                      {"ad", detail::json_num(st.ad)}};
    summaries.push_back({{"strategy", s.strategy},
                         {"label", strategy_label(s.strategy)},
                         {"mean_periods", means},
                         {"stability", stab}});
  }
  j["summaries"] = summaries;
  return j;
}

// Writes report.csv, report.md and report.json into out_dir.
inline std::vector<std::string> emit_reports(const ExperimentResult& res,
                                             const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const std::string csv = (fs::path(out_dir) / "report.csv").string();
  const std::string md = (fs::path(out_dir) / "report.md").string();
  const std::string json = (fs::path(out_dir) / "report.json").string();
  detail::write_text_file(csv, report_csv(res));
  detail::write_text_file(md, report_markdown(res));
  detail::write_text_file(json, report_json(res).dump(2) + "\n");
  return {csv, md, json};
}

// ------------------------------------------------------------- experiment

inline void write_curve_files(const std::string& dir, const std::string& strategy, int period,
                              const Matrix& preds, const RasCurve& ras,
                              const PeriodDataset& data, std::vector<std::string>* paths) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  {
    char name[64];
    std::snprintf(name, sizeof(name), "ras_%s_p%d.csv", strategy.c_str(), period);
    const std::string path = (fs::path(dir) / name).string();
    std::ostringstream body;
    body << "cost,reward\n";
    for (const RasPoint& p : ras.points)
      body << detail::g17(p.cost) << "," << detail::g17(p.reward) << "\n";
    detail::write_text_file(path, body.str());
    if (paths) paths->push_back(path);
  }
  for (std::size_t arm = 1; arm < preds.cols; ++arm) {
    const QiniCurve q = qini_values(preds, data.test, static_cast<int>(arm));
    char name[64];
    std::snprintf(name, sizeof(name), "qini_%s_p%d_arm%zu.csv", strategy.c_str(), period, arm);
    const std::string path = (fs::path(dir) / name).string();
    std::ostringstream body;
    body << "fraction,value\n";
    for (std::size_t i = 0; i < q.m.size(); ++i)
      body << detail::g17(q.m[i]) << "," << detail::g17(q.v[i]) << "\n";
    detail::write_text_file(path, body.str());
    if (paths) paths->push_back(path);
  }
}

inline std::string write_manifest(const ExperimentResult& res,
                                  const std::vector<std::string>& curves,
                                  const std::vector<std::string>& checkpoints,
                                  const nlohmann::json& timings) {
  namespace fs = std::filesystem;
  const auto check = [](const std::vector<std::string>& paths) {
    for (const std::string& p : paths)
      if (!fs::exists(p)) throw std::runtime_error("manifest: referenced file missing: " + p);
  };
  check(res.report_paths);
  check(curves);
  check(checkpoints);

  nlohmann::json errors = nlohmann::json::array();
  for (const StrategyRun& r : res.runs)
    if (r.failed())
      errors.push_back({{"strategy", r.strategy}, {"seed", r.seed}, {"message", r.error}});

  const nlohmann::json j{{"format_version", kCheckpointVersion},
                         {"kind", "run-manifest"},
                         {"config_hash", res.config_hash},
                         {"config", res.config.canonical()},
                         {"out_dir", res.config.out_dir},
                         {"reports", res.report_paths},
                         {"curves", curves},
                         {"checkpoints", checkpoints},
                         {"errors", errors},
                         {"timings", timings}};
  const std::string path = (fs::path(res.config.out_dir) / "manifest.json").string();
  detail::write_json_file(j, path);
  return path;
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  namespace fs = std::filesystem;
  using clock = std::chrono::steady_clock;
  cfg.validate();

  ExperimentResult res;
  res.config = cfg;
  res.config_hash = config_hash(cfg);

  const bool persist = !cfg.out_dir.empty();
  if (persist) fs::create_directories(cfg.out_dir);

  std::vector<std::string> curve_paths, checkpoint_paths;
  nlohmann::json timings = nlohmann::json::array();
  const auto record_time = [&](const std::string& name, clock::time_point t0) {
    const double sec = std::chrono::duration<double>(clock::now() - t0).count();
    timings.push_back({{"name", name}, {"seconds", sec}});
  };

  bool need_shared = false;
  for (const std::string& s : cfg.strategies)
    need_shared = need_shared || s == "drcfr-c" || strategy_is_incremental(s);

  for (std::uint64_t seed : cfg.seeds) {
    const auto t_stream = clock::now();
    const StreamData stream = make_stream(cfg, seed);
    record_time("stream seed " + std::to_string(seed), t_stream);

    SeedSharedState shared;
    std::string shared_error;
    if (need_shared) {
      const auto t0 = clock::now();
      try {
        shared = make_shared_state(stream, cfg, seed);
      } catch (const std::exception& e) {
        shared_error = e.what();
      }
      record_time("initial selection seed " + std::to_string(seed), t0);
    }

    for (const std::string& strategy : cfg.strategies) {
      // a broken initial selection only fails the strategies that depend on it
      if (!shared_error.empty() &&
          (strategy == "drcfr-c" || strategy_is_incremental(strategy))) {
        StrategyRun run;
        run.strategy = strategy;
        run.seed = seed;
        run.error = shared_error;
        res.runs.push_back(std::move(run));
        continue;
      }
      const auto t0 = clock::now();
      std::string ckpt_dir;
      if (persist && cfg.save_checkpoints)
        ckpt_dir = (fs::path(cfg.out_dir) / "checkpoints" / strategy /
                    ("seed_" + std::to_string(seed)))
                       .string();
      PeriodSink sink;
      std::vector<std::string> run_curves;
      if (persist && cfg.emit_curves && seed == cfg.seeds.front()) {
        const std::string curve_dir = (fs::path(cfg.out_dir) / "curves").string();
        sink = [curve_dir, strategy, &run_curves](int period, const Matrix& preds,
                                                  const RasCurve& ras,
                                                  const PeriodDataset& data) {
          write_curve_files(curve_dir, strategy, period, preds, ras, data, &run_curves);
        };
      }

      StrategyRun run;
      try {
        run = strategy_run(strategy, stream, cfg, seed, &shared, ckpt_dir, sink);
        curve_paths.insert(curve_paths.end(), run_curves.begin(), run_curves.end());
        if (!ckpt_dir.empty())
          for (int k = 1; k <= cfg.periods; ++k)
            checkpoint_paths.push_back(
                (fs::path(ckpt_dir) / ("period_" + std::to_string(k) + "_model.json")).string());
      } catch (const std::exception& e) {
        run.strategy = strategy;
        run.seed = seed;
        run.periods.clear();
        run.error = e.what();
      }
      record_time(strategy + " seed " + std::to_string(seed), t0);
      res.runs.push_back(std::move(run));
    }
  }

  res.summaries = summarize(cfg, res.runs);
  if (persist) {
    res.report_paths = emit_reports(res, cfg.out_dir);
    res.manifest_path = write_manifest(res, curve_paths, checkpoint_paths, timings);
  }
  return res;
}

// ---------------------------------------------------- stored predictions

// CSV with header q0..q{T}: one estimated response probability per arm.
inline void save_predictions(const Matrix& preds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_predictions: cannot open " + path);
  for (std::size_t t = 0; t < preds.cols; ++t) out << (t ? "," : "") << "q" << t;
  out << "\n";
  for (std::size_t i = 0; i < preds.rows; ++i) {
    for (std::size_t t = 0; t < preds.cols; ++t)
      out << (t ? "," : "") << detail::g17(preds(i, t));
    out << "\n";
  }
  if (!out) throw std::runtime_error("save_predictions: write failed for " + path);
}

inline Matrix load_predictions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_predictions: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("load_predictions: empty file " + path);
  const std::vector<std::string> header = detail::split_csv_line(line);
  for (std::size_t t = 0; t < header.size(); ++t)
    if (header[t] != "q" + std::to_string(t))
      throw std::runtime_error("load_predictions: header must be q0..q{T}");
  std::vector<double> values;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::vector<std::string> cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw std::runtime_error("load_predictions: line " + std::to_string(line_no) +
                               ": wrong field count");
    for (const std::string& c : cells)
      values.push_back(detail::parse_double(c, line_no, "prediction"));
  }
  Matrix preds(values.size() / header.size(), header.size());
  preds.data = std::move(values);
  return preds;
}

}  // namespace upliftlab
