// Command-line front end for the continual uplift benchmark.
//
//   gen     write a synthetic drifting stream to CSV files
//   run     train and evaluate strategies over a stream, emit reports
//   ablate  like run, with the incremental trainer's ablation roster
//   eval    score a stored prediction matrix against a labeled CSV
//   report  regenerate report.md / report.csv from a report.json

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "upliftlab/config.hpp"
#include "upliftlab/experiment.hpp"

namespace fs = std::filesystem;
using namespace upliftlab;

namespace {

struct RunOptions {
  std::string config_path;
  std::string out_dir;
  std::string dataset;
  std::string baseline;
  std::vector<std::string> strategies;
  std::vector<std::uint64_t> seeds;
  std::uint64_t single_seed = 0;
  std::vector<std::string> csv_train;
  std::vector<std::string> csv_test;
  int periods = 0;
  std::size_t train_rows = 0;
  std::size_t test_rows = 0;
  double mu = 0;
  double full_lr = 0;
  double inc_lr = 0;
  double dk_fraction = 0;
  int full_epochs = 0;
  int inc_epochs = 0;
  int inc_batch = 0;
  int restarts = 0;
  int window = 0;
  bool no_curves = false;
  bool no_checkpoints = false;
};

void add_run_options(CLI::App* cmd, RunOptions& o) {
  cmd->add_option("--config", o.config_path, "key = value config file")
      ->check(CLI::ExistingFile);
  cmd->add_option("--out", o.out_dir, "output directory for reports and artifacts");
  cmd->add_option("--dataset", o.dataset, "synth2d, synth10d or csv")
      ->check(CLI::IsMember({"synth2d", "synth10d", "csv"}));
  cmd->add_option("--periods", o.periods, "number of evaluated periods");
  cmd->add_option("--train-rows", o.train_rows, "training rows per synthetic period");
  cmd->add_option("--test-rows", o.test_rows, "test rows per synthetic period");
  cmd->add_option("--seeds", o.seeds, "stream seeds")->delimiter(',');
  cmd->add_option("--seed", o.single_seed, "single stream seed (shorthand for --seeds N)")
      ->excludes("--seeds");
  cmd->add_option("--baseline", o.baseline, "baseline strategy id");
  cmd->add_option("--mu", o.mu, "distillation weight for the incremental trainer");
  cmd->add_option("--full-lr", o.full_lr, "learning rate for full retraining");
  cmd->add_option("--inc-lr", o.inc_lr, "learning rate for incremental updates");
  cmd->add_option("--full-epochs", o.full_epochs, "epochs for full retraining");
  cmd->add_option("--inc-epochs", o.inc_epochs, "epochs per incremental stage");
  cmd->add_option("--inc-batch", o.inc_batch, "minibatch size per incremental stage");
  cmd->add_option("--restarts", o.restarts, "random restarts for initial model selection");
  cmd->add_option("--dk-fraction", o.dk_fraction, "share of each period used as the increment");
  cmd->add_option("--window", o.window,
                  "retraining uses the last N increments instead of the previous period");
  cmd->add_option("--csv-train", o.csv_train, "per-period training CSVs (dataset csv)")
      ->delimiter(',');
  cmd->add_option("--csv-test", o.csv_test, "per-period test CSVs (dataset csv)")
      ->delimiter(',');
  cmd->add_option("--strategies", o.strategies, "strategy ids, or 'all' for the full roster")
      ->delimiter(',');
  cmd->add_flag("--no-curves", o.no_curves, "skip allocation curve emission");
  cmd->add_flag("--no-checkpoints", o.no_checkpoints, "skip per-period model checkpoints");
}

ExperimentConfig build_config(const CLI::App* cmd, const RunOptions& o) {
  ExperimentConfig cfg;
  if (!o.config_path.empty()) {
    const KeyValueConfig kv = KeyValueConfig::parse_file(o.config_path);
    cfg = ExperimentConfig::from_config(kv);
    const std::vector<std::string> unknown = kv.unused_keys();
    if (!unknown.empty()) {
      std::string msg = o.config_path + ": unknown keys:";
      for (const std::string& k : unknown) msg += " " + k;
      throw std::runtime_error(msg);
    }
  }
  if (cmd->count("--out")) cfg.out_dir = o.out_dir;
  if (cmd->count("--dataset")) cfg.dataset = o.dataset;
  if (cmd->count("--periods")) cfg.periods = o.periods;
  if (cmd->count("--train-rows")) cfg.train_rows = o.train_rows;
  if (cmd->count("--test-rows")) cfg.test_rows = o.test_rows;
  if (cmd->count("--seeds")) cfg.seeds = o.seeds;
  if (cmd->count("--seed")) cfg.seeds = {o.single_seed};
  if (cmd->count("--baseline")) cfg.baseline = o.baseline;
  if (cmd->count("--mu")) cfg.mu = o.mu;
  if (cmd->count("--full-lr")) cfg.full_lr = o.full_lr;
  if (cmd->count("--inc-lr")) cfg.inc_lr = o.inc_lr;
  if (cmd->count("--full-epochs")) cfg.full_epochs = o.full_epochs;
  if (cmd->count("--inc-epochs")) cfg.inc_epochs = o.inc_epochs;
  if (cmd->count("--inc-batch")) cfg.inc_batch = o.inc_batch;
  if (cmd->count("--restarts")) cfg.restarts = o.restarts;
  if (cmd->count("--dk-fraction")) cfg.dk_fraction = o.dk_fraction;
  if (cmd->count("--window")) cfg.window = o.window;
  if (cmd->count("--csv-train")) cfg.csv_train = o.csv_train;
  if (cmd->count("--csv-test")) cfg.csv_test = o.csv_test;
  if (cmd->count("--strategies")) {
    cfg.strategies = o.strategies;
    if (cfg.strategies.size() == 1 && cfg.strategies[0] == "all")
      cfg.strategies = all_strategies();
  }
  if (o.no_curves) cfg.emit_curves = false;
  if (o.no_checkpoints) cfg.save_checkpoints = false;
  return cfg;
}

void print_summary(const ExperimentResult& res) {
  std::printf("config hash: %s\n", res.config_hash.c_str());
  std::size_t failed = 0;
  for (const StrategyRun& r : res.runs) failed += r.failed() ? 1 : 0;
  std::printf("runs: %zu ok, %zu failed\n", res.runs.size() - failed, failed);

  const bool have_stability = !res.summaries.empty() && !res.summaries[0].stability.empty();
  if (have_stability) {
    std::printf("\nstability vs %s\n", strategy_label(res.config.baseline).c_str());
    std::printf("%-16s %-10s %9s %9s %12s\n", "strategy", "metric", "PRIO-10", "PRDU-5", "AD");
    for (const StrategySummary& s : res.summaries) {
      for (const MetricDef& def : metric_defs()) {
        const MetricStability& st = s.stability.at(def.id);
        const auto cell = [](double v, const char* fmt) {
          char buf[32];
          if (std::isfinite(v))
            std::snprintf(buf, sizeof(buf), fmt, v);
          else
            std::snprintf(buf, sizeof(buf), "n/a");
          return std::string(buf);
        };
        std::printf("%-16s %-10s %9s %9s %12s\n", s.strategy.c_str(), def.id,
                    cell(st.prio10, "%.1f").c_str(), cell(st.prdu5, "%.1f").c_str(),
                    cell(st.ad, "%.5f").c_str());
      }
    }
  }
  for (const StrategyRun& r : res.runs)
    if (r.failed())
      std::printf("failed: %s seed %llu: %s\n", r.strategy.c_str(),
                  static_cast<unsigned long long>(r.seed), r.error.c_str());
  for (const std::string& p : res.report_paths) std::printf("report: %s\n", p.c_str());
  if (!res.manifest_path.empty()) std::printf("manifest: %s\n", res.manifest_path.c_str());
}

int run_benchmark(const CLI::App* cmd, const RunOptions& o, bool ablation) {
  ExperimentConfig cfg = build_config(cmd, o);
  if (ablation && !cmd->count("--config") && !cmd->count("--strategies"))
    cfg.strategies = {"drcfr-a", "icepkd", "icepkd-wo-pt", "icepkd-wo-rm", "icepkd-wo-kd"};
  const ExperimentResult res = run_experiment(cfg);
  print_summary(res);
  for (const StrategyRun& r : res.runs)
    if (!r.failed()) return 0;
  std::fprintf(stderr, "error: every strategy run failed\n");
  return 1;
}

int generate_stream(const std::string& dataset, int periods, std::size_t train_rows,
                    std::size_t test_rows, std::uint64_t seed, const std::string& out_dir) {
  ExperimentConfig cfg;
  cfg.dataset = dataset;
  cfg.periods = periods;
  cfg.train_rows = train_rows;
  cfg.test_rows = test_rows;
  cfg.validate();

  const StreamData stream = make_stream(cfg, seed);
  fs::create_directories(out_dir);
  std::vector<std::string> train_paths, test_paths;
  for (int k = 0; k <= periods; ++k) {
    const std::string path =
        (fs::path(out_dir) / ("train_" + std::to_string(k) + ".csv")).string();
    save_csv(stream.periods[static_cast<std::size_t>(k)].train, path);
    train_paths.push_back(path);
    std::printf("wrote %s (%zu rows)\n", path.c_str(),
                stream.periods[static_cast<std::size_t>(k)].train.size());
    if (k == 0) {
      test_paths.push_back("-");
      continue;
    }
    const std::string tpath =
        (fs::path(out_dir) / ("test_" + std::to_string(k) + ".csv")).string();
    save_csv(stream.periods[static_cast<std::size_t>(k)].test, tpath);
    test_paths.push_back(tpath);
    std::printf("wrote %s (%zu rows)\n", tpath.c_str(),
                stream.periods[static_cast<std::size_t>(k)].test.size());
  }

  // a ready-to-run config pointing back at the files just written
  const auto join = [](const std::vector<std::string>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
    return out;
  };
  std::string body;
  body += "dataset = csv\n";
  body += "periods = " + std::to_string(periods) + "\n";
  body += "csv_train = " + join(train_paths) + "\n";
  body += "csv_test = " + join(test_paths) + "\n";
  const std::string cfg_path = (fs::path(out_dir) / "stream.cfg").string();
  detail::write_text_file(cfg_path, body);
  std::printf("wrote %s\n", cfg_path.c_str());
  return 0;
}

int evaluate_stored(const std::string& preds_path, const std::string& data_path,
                    const std::string& out_path) {
  const Matrix preds = load_predictions(preds_path);
  PeriodDataset d;
  d.test = load_csv(data_path);
  d.period = d.test.period;
  const CostModel cm = CostModel::linear(static_cast<int>(preds.cols));
  const PeriodMetrics m = evaluate_period(preds, d, cm);

  nlohmann::json j{{"rows", d.test.size()},
                   {"arms", preds.cols},
                   {"ate_error", detail::json_num(m.ate)},
                   {"pehe", detail::json_num(m.pehe)},
                   {"qini", detail::json_num(m.qini)},
                   {"ras_aucc", detail::json_num(m.ras)}};
  const std::string text = j.dump(2) + "\n";
  if (out_path.empty()) {
    std::fputs(text.c_str(), stdout);
  } else {
    detail::write_text_file(out_path, text);
    std::printf("wrote %s\n", out_path.c_str());
  }
  return 0;
}

double json_metric(const nlohmann::json& j, const char* key) {
  const auto& v = j.at(key);
  return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
}

int regenerate_reports(const std::string& from, const std::string& out_dir) {
  const nlohmann::json j = detail::read_json_file(from);
  detail::check_header(j, "experiment-report", from);

  ExperimentResult res;
  res.config = ExperimentConfig::from_config(
      KeyValueConfig::parse_string(j.at("config").get<std::string>()));
  res.config_hash = j.at("config_hash").get<std::string>();
  for (const nlohmann::json& rj : j.at("runs")) {
    StrategyRun r;
    r.strategy = rj.at("strategy").get<std::string>();
    r.seed = rj.at("seed").get<std::uint64_t>();
    r.error = rj.at("error").get<std::string>();
    for (const nlohmann::json& pj : rj.at("periods")) {
      PeriodMetrics m;
      m.period = pj.at("period").get<int>();
      m.ate = json_metric(pj, "ate_error");
      m.pehe = json_metric(pj, "pehe");
      m.qini = json_metric(pj, "qini");
      m.ras = json_metric(pj, "ras_aucc");
      r.periods.push_back(m);
    }
    res.runs.push_back(std::move(r));
  }
  res.summaries = summarize(res.config, res.runs);

  fs::create_directories(out_dir);
  const std::string csv = (fs::path(out_dir) / "report.csv").string();
  const std::string md = (fs::path(out_dir) / "report.md").string();
  detail::write_text_file(csv, report_csv(res));
  detail::write_text_file(md, report_markdown(res));
  std::printf("wrote %s\nwrote %s\n", csv.c_str(), md.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"continual uplift modeling benchmark"};
  app.require_subcommand(1);

  std::string gen_dataset = "synth2d";
  int gen_periods = 6;
  std::size_t gen_train = 10000, gen_test = 50000;
  std::uint64_t gen_seed = 1;
  std::string gen_out = "stream";
  CLI::App* gen = app.add_subcommand("gen", "write a synthetic stream to CSV files");
  gen->add_option("--dataset", gen_dataset)->check(CLI::IsMember({"synth2d", "synth10d"}));
  gen->add_option("--periods", gen_periods, "number of evaluated periods");
  gen->add_option("--train-rows", gen_train, "training rows per period");
  gen->add_option("--test-rows", gen_test, "test rows per period");
  gen->add_option("--seed", gen_seed, "stream seed");
  gen->add_option("--out", gen_out, "output directory");

  RunOptions run_opts;
  CLI::App* run = app.add_subcommand("run", "run strategies over a stream and emit reports");
  add_run_options(run, run_opts);

  RunOptions ablate_opts;
  CLI::App* ablate =
      app.add_subcommand("ablate", "run the incremental trainer against its ablations");
  add_run_options(ablate, ablate_opts);

  std::string eval_preds, eval_data, eval_out;
  CLI::App* eval = app.add_subcommand("eval", "score stored predictions against a labeled CSV");
  eval->add_option("--preds", eval_preds, "prediction CSV with header q0..qT")
      ->required()
      ->check(CLI::ExistingFile);
  eval->add_option("--data", eval_data, "labeled CSV with randomized assignment")
      ->required()
      ->check(CLI::ExistingFile);
  eval->add_option("--out", eval_out, "write the metric JSON here instead of stdout");

  std::string report_from, report_out = ".";
  CLI::App* report =
      app.add_subcommand("report", "regenerate report.md and report.csv from a report.json");
  report->add_option("--from", report_from, "existing report.json")
      ->required()
      ->check(CLI::ExistingFile);
  report->add_option("--out", report_out, "output directory");

  try {
    app.parse(argc, argv);
    if (gen->parsed())
      return generate_stream(gen_dataset, gen_periods, gen_train, gen_test, gen_seed, gen_out);
    if (run->parsed()) return run_benchmark(run, run_opts, false);
    if (ablate->parsed()) return run_benchmark(ablate, ablate_opts, true);
    if (eval->parsed()) return evaluate_stored(eval_preds, eval_data, eval_out);
    if (report->parsed()) return regenerate_reports(report_from, report_out);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
