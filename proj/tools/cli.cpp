#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include "olab/diagnostics.hpp"
#include "olab/errors.hpp"
#include "olab/experiment.hpp"
#include "olab/model.hpp"
#include "olab/quantsim.hpp"
#include "olab/report.hpp"
#include "olab/training.hpp"

namespace olab::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

inline constexpr int kRunSchemaVersion = 1;
const char* const kCheckpointFile = "checkpoint.olab";
const char* const kMetricsFile = "metrics.csv";
const char* const kRunFile = "run.json";
const char* const kQuantizeFile = "quantize.json";

/// Problems with input data (missing corpus, empty evaluation set).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_text(const fs::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  out.flush();
  if (!out) throw IoError("write failed: " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("missing " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw report::SchemaError(path.string() + ": invalid JSON (" + e.what() + ")");
  }
}

/// Refuses to replace any of `files` unless overwrite is set.
void guard_outputs(const fs::path& dir, const std::vector<std::string>& files, bool overwrite) {
  if (overwrite) return;
  for (const auto& f : files) {
    if (fs::exists(dir / f)) {
      throw ConfigError((dir / f).string() + " exists; pass --overwrite to replace it");
    }
  }
}

exp::RunData read_data(const exp::ExperimentConfig& cfg, const std::string& corpus_override) {
  try {
    return exp::load_data(cfg, corpus_override);
  } catch (const IoError& e) {
    throw DataError(e.what());
  }
}

struct LoadedRun {
  model::Checkpoint checkpoint;
  exp::ExperimentConfig experiment;
  std::uint64_t seed = 0;
};

LoadedRun load_run(const fs::path& checkpoint_path) {
  LoadedRun r;
  r.checkpoint = model::load_checkpoint(checkpoint_path);
  const auto& meta = r.checkpoint.metadata;
  if (!meta.is_object() || !meta.contains("experiment") || !meta.contains("seed")) {
    throw model::CheckpointError(checkpoint_path.string() +
                                 ": no experiment metadata (not written by `olab train`)");
  }
  r.experiment = exp::experiment_from_json(meta.at("experiment"));
  r.seed = meta.at("seed").get<std::uint64_t>();
  return r;
}

/// Runs fn(i) for i in [0, n) on up to `jobs` threads; rethrows the first error.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::mutex mu;
  std::size_t next = 0;
  std::exception_ptr error;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < jobs; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        std::size_t i;
        {
          std::lock_guard lock(mu);
          if (next >= n || error) return;
          i = next++;
        }
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

// ---------------------------------------------------------------------------
// make-corpus

struct MakeCorpusArgs {
  std::string out;
  std::size_t bytes = 1 << 20;
  std::uint64_t seed = 0;
  bool overwrite = false;
};

int make_corpus(const MakeCorpusArgs& a, std::ostream& out) {
  fs::path path = a.out;
  if (path.empty()) {
    const char* dir = std::getenv("OLAB_CORPUS_DIR");
    if (!dir || !*dir) throw ConfigError("--out is required when OLAB_CORPUS_DIR is unset");
    path = fs::path(dir) / "synthetic.txt";
  }
  if (fs::exists(path) && !a.overwrite) {
    throw ConfigError(path.string() + " exists; pass --overwrite to replace it");
  }
  if (a.bytes == 0) throw ConfigError("--bytes: must be positive");
  write_text(path, train::synthetic_corpus(a.bytes, a.seed));
  out << "wrote " << a.bytes << " bytes to " << path.string() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string corpus;
  bool overwrite = false;
  std::size_t jobs = 1;
  bool quiet = false;
};

void train_one(const exp::ExperimentConfig& base, std::uint64_t seed, const exp::RunData& data,
               const fs::path& dir, bool quiet, std::ostream& err, std::mutex& log_mu) {
  exp::ExperimentConfig cfg = base;
  cfg.seeds = {seed};
  cfg.train.seed = seed;
  const auto evals = exp::eval_set(cfg, data, cfg.train.eval_sequences);
  train::ProgressFn progress;
  if (!quiet) {
    progress = [&](const train::MetricsRow& row) {
      if (!row.has_eval()) return;
      std::lock_guard lock(log_mu);
      err << "[seed " << seed << "] step " << row.step << " eval_ppl " << row.eval_ppl
          << " max_inf_norm " << row.max_inf_norm << " avg_kurtosis " << row.avg_kurtosis
          << '\n';
    };
  }
  const auto result = train::train(cfg.model, cfg.train, data.train_split, evals, nullptr, progress);
  const auto& first = result.first_eval();
  const auto& last = result.last_eval();
  // Outlier metrics use the diagnostics settings, as `diagnose` would.
  const auto metrics = train::evaluate(result.params, cfg.model, evals, cfg.diagnostics.point);

  write_text(dir / kMetricsFile, train::metrics_csv(result.history));
  model::save_checkpoint(dir / kCheckpointFile, cfg.model, result.params,
                         {{"experiment", exp::to_json(cfg)}, {"seed", seed}});
  const json run{{"schema_version", kRunSchemaVersion},
                 {"name", cfg.name},
                 {"model_tag", exp::model_tag(cfg.model)},
                 {"method", report::method_label(cfg.model.attention.variant)},
                 {"seed", seed},
                 {"steps", cfg.train.steps},
                 {"initial_eval_ppl", first.eval_ppl},
                 {"fp_ppl", last.eval_ppl},
                 {"max_inf_norm", metrics.max_inf_norm},
                 {"avg_kurtosis", metrics.avg_kurtosis}};
  write_text(dir / kRunFile, run.dump(2) + "\n");
  write_text(dir / "config.json", exp::to_json(cfg).dump(2) + "\n");
}

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  auto cfg = exp::load_experiment(a.config);
  std::vector<std::uint64_t> seeds = a.seed ? std::vector<std::uint64_t>{*a.seed} : cfg.seeds;
  const fs::path root(a.out);
  std::vector<fs::path> dirs;
  for (auto s : seeds) dirs.push_back(seeds.size() == 1 ? root : root / ("seed-" + std::to_string(s)));
  for (const auto& d : dirs) {
    guard_outputs(d, {kCheckpointFile, kMetricsFile, kRunFile, "config.json"}, a.overwrite);
  }
  const exp::RunData data = read_data(cfg, a.corpus);
  if (!a.corpus.empty()) cfg.data.corpus = a.corpus;
  std::mutex log_mu;
  parallel_for(seeds.size(), a.jobs, [&](std::size_t i) {
    train_one(cfg, seeds[i], data, dirs[i], a.quiet, err, log_mu);
  });
  for (const auto& d : dirs) out << "wrote " << (d / kCheckpointFile).string() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// quantize

struct QuantizeArgs {
  std::string checkpoint;
  std::string out;
  std::string corpus;
  std::optional<int> w_bits, a_bits;
  std::optional<std::string> weight_est, act_est;
  std::optional<std::size_t> calib_batches, repeat;
  std::size_t jobs = 1;
  bool overwrite = false;
};

int cmd_quantize(const QuantizeArgs& a, std::ostream& out) {
  const fs::path ckpt(a.checkpoint);
  auto run = load_run(ckpt);
  auto& cfg = run.experiment;
  if (a.w_bits) cfg.quant.w_bits = *a.w_bits;
  if (a.a_bits) cfg.quant.a_bits = *a.a_bits;
  if (a.weight_est) cfg.quant.weight_est = *a.weight_est;
  if (a.act_est) cfg.quant.act_est = *a.act_est;
  if (a.calib_batches) cfg.quant.calib_batches = *a.calib_batches;
  if (a.repeat) cfg.quant.repeat = *a.repeat;
  cfg.validate();
  const auto qcfg = cfg.quant.quant_config();

  const fs::path dir = a.out.empty() ? ckpt.parent_path() : fs::path(a.out);
  guard_outputs(dir, {kQuantizeFile}, a.overwrite);
  const exp::RunData data = read_data(cfg, a.corpus);
  const auto evals = exp::eval_set(cfg, data, cfg.train.eval_sequences);
  const auto& params = run.checkpoint.params;
  const double fp_ppl = model::perplexity(model::evaluate_nll(params, cfg.model, evals));

  const std::size_t n = cfg.quant.repeat;
  std::vector<double> q_ppl(n);
  std::vector<std::uint64_t> calib_seeds(n);
  std::vector<json> specs(n);
  parallel_for(n, a.jobs, [&](std::size_t i) {
    calib_seeds[i] = exp::calibration_seed(run.seed, i);
    const auto calib = exp::calibration_batches(cfg, data, calib_seeds[i]);
    const auto qm = quant::calibrate_and_quantize(params, cfg.model, calib, qcfg);
    q_ppl[i] = model::perplexity(quant::evaluate_quantized(qm, evals));
    specs[i] = quant::specs_to_json(qm);
  });
  const auto stat = report::summarize(q_ppl);
  json q{{"mean", stat.mean}};
  if (stat.std) q["std"] = *stat.std;
  const json doc{{"schema_version", kRunSchemaVersion},
                 {"checkpoint", ckpt.string()},
                 {"quant",
                  {{"label", report::quant_label(cfg.quant.w_bits, cfg.quant.a_bits)},
                   {"w_bits", cfg.quant.w_bits},
                   {"a_bits", cfg.quant.a_bits},
                   {"weight_est", qcfg.weight_estimator.label()},
                   {"act_est", qcfg.act_estimator.label()},
                   {"calib_batches", cfg.quant.calib_batches},
                   {"calib_batch_size", cfg.quant.calib_batch_size},
                   {"repeat", n}}},
                 {"fp_ppl", fp_ppl},
                 {"q_ppl", q},
                 {"q_ppl_runs", q_ppl},
                 {"calibration_seeds", calib_seeds},
                 {"specs", specs.front()}};
  write_text(dir / kQuantizeFile, doc.dump(2) + "\n");
  out << report::quant_label(cfg.quant.w_bits, cfg.quant.a_bits) << ": fp_ppl " << fp_ppl
      << " q_ppl " << stat.mean;
  if (stat.std) out << " ± " << *stat.std;
  out << "\nwrote " << (dir / kQuantizeFile).string() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// diagnose

struct DiagnoseArgs {
  std::string checkpoint;
  std::string out;
  std::string corpus;
  std::optional<std::size_t> eval_sequences;
  std::vector<std::string> dumps;  // "head,layer", 1-based
  std::size_t dump_sequence = 0;
  bool overwrite = false;
};

std::pair<std::size_t, std::size_t> parse_head_layer(const std::string& s,
                                                     const model::ModelConfig& m) {
  const auto comma = s.find(',');
  std::size_t head = 0;
  std::size_t layer = 0;
  try {
    if (comma == std::string::npos) throw std::invalid_argument(s);
    std::size_t used = 0;
    head = std::stoul(s.substr(0, comma), &used);
    if (used != comma) throw std::invalid_argument(s);
    layer = std::stoul(s.substr(comma + 1), &used);
    if (used != s.size() - comma - 1) throw std::invalid_argument(s);
  } catch (const std::logic_error&) {
    throw ConfigError("--dump-attention: expected HEAD,LAYER, got '" + s + "'");
  }
  if (head < 1 || head > m.attention.n_heads) {
    throw ConfigError("--dump-attention: head " + std::to_string(head) + " outside 1.." +
                      std::to_string(m.attention.n_heads));
  }
  if (layer < 1 || layer > m.n_layers) {
    throw ConfigError("--dump-attention: layer " + std::to_string(layer) + " outside 1.." +
                      std::to_string(m.n_layers));
  }
  return {head, layer};
}

int cmd_diagnose(const DiagnoseArgs& a, std::ostream& out) {
  const fs::path ckpt(a.checkpoint);
  auto run = load_run(ckpt);
  const auto& cfg = run.experiment;
  std::vector<std::pair<std::size_t, std::size_t>> dumps;
  for (const auto& d : a.dumps) dumps.push_back(parse_head_layer(d, cfg.model));

  const fs::path dir = a.out.empty() ? ckpt.parent_path() / "diagnostics" : fs::path(a.out);
  guard_outputs(dir, {"outliers.json", "outlier_dims.csv", "outlier_tokens.csv"}, a.overwrite);
  const exp::RunData data = read_data(cfg, a.corpus);
  const auto evals = exp::eval_set(cfg, data, a.eval_sequences.value_or(cfg.diagnostics.eval_sequences));
  std::vector<std::vector<std::int32_t>> inputs;
  for (const auto& e : evals) inputs.push_back(e.inputs);

  diag::DiagnoseOptions opts;
  opts.point = cfg.diagnostics.point;
  opts.sigma_mult = cfg.diagnostics.sigma_mult;
  opts.excess_kurtosis = cfg.diagnostics.excess_kurtosis;
  const auto rep = diag::diagnose(run.checkpoint.params, cfg.model, inputs, opts);
  write_text(dir / "outliers.json", rep.to_json().dump(2) + "\n");
  write_text(dir / "outlier_dims.csv", rep.dim_histogram_csv());
  write_text(dir / "outlier_tokens.csv", rep.token_histogram_csv());

  if (!dumps.empty()) {
    if (a.dump_sequence >= inputs.size()) {
      throw ConfigError("--dump-sequence: " + std::to_string(a.dump_sequence) +
                        " outside the evaluation set");
    }
    model::ForwardOptions fo;
    fo.capture_trace = true;
    NoGradGuard no_grad;
    const auto fwd = model::forward(run.checkpoint.params, cfg.model, inputs[a.dump_sequence], fo);
    for (const auto& [head, layer] : dumps) {
      const std::string stem = "attention_L" + std::to_string(layer) + "_H" + std::to_string(head);
      for (const auto& f : diag::dump_attention_patterns(fwd.layers[layer - 1].trace, head - 1, dir, stem)) {
        out << "wrote " << f.string() << '\n';
      }
    }
  }
  out << "avg_kurtosis " << rep.avg_kurtosis << " max_inf_norm " << rep.max_inf_norm
      << " outliers " << rep.total_outliers() << "\nwrote " << (dir / "outliers.json").string()
      << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// compare

struct CompareArgs {
  std::vector<std::string> dirs;
  std::string out;
  bool overwrite = false;
};

void require_version(const json& j, const fs::path& path) {
  if (!j.is_object() || !j.contains("schema_version") ||
      j.at("schema_version") != kRunSchemaVersion) {
    throw report::SchemaError(path.string() + ": schema_version " +
                              (j.is_object() && j.contains("schema_version")
                                   ? j.at("schema_version").dump()
                                   : std::string("missing")) +
                              ", expected " + std::to_string(kRunSchemaVersion));
  }
}

int cmd_compare(const CompareArgs& a, std::ostream& out) {
  std::vector<report::RunRecord> records;
  for (const auto& d : a.dirs) {
    const fs::path dir(d);
    const auto run = read_json(dir / kRunFile);
    const auto q = read_json(dir / kQuantizeFile);
    require_version(run, dir / kRunFile);
    require_version(q, dir / kQuantizeFile);
    try {
      report::RunRecord r;
      r.model_tag = run.at("model_tag").get<std::string>();
      r.method = run.at("method").get<std::string>();
      r.seed = run.at("seed").get<std::uint64_t>();
      r.fp_ppl = run.at("fp_ppl").get<double>();
      r.max_inf_norm = run.at("max_inf_norm").get<double>();
      r.avg_kurtosis = run.at("avg_kurtosis").get<double>();
      r.q_ppl = q.at("q_ppl").at("mean").get<double>();
      r.quant = q.at("quant").at("label").get<std::string>();
      records.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw report::SchemaError(dir.string() + ": " + e.what());
    }
  }
  const auto rep = report::RunReport::from_records(records);
  rep.validate();
  out << rep.to_table();
  if (!a.out.empty()) {
    const fs::path dir(a.out);
    guard_outputs(dir, {"report.csv", "report.json"}, a.overwrite);
    write_text(dir / "report.csv", rep.to_csv());
    write_text(dir / "report.json", rep.to_json().dump(2) + "\n");
    out << "wrote " << (dir / "report.csv").string() << '\n';
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// sweep

struct SweepArgs {
  std::string checkpoint;
  std::string out;
  std::string corpus;
  std::vector<int> w_bits{4, 6, 8};
  std::vector<int> a_bits{8};
  std::vector<std::string> weight_est{"minmax"};
  std::vector<std::string> act_est{"running_minmax:0.9:16"};
  bool overwrite = false;
};

int cmd_sweep(const SweepArgs& a, std::ostream& out) {
  const fs::path ckpt(a.checkpoint);
  auto run = load_run(ckpt);
  const auto& cfg = run.experiment;
  std::vector<quant::QuantConfig> configs;
  for (int w : a.w_bits)
    for (int ab : a.a_bits)
      for (const auto& we : a.weight_est)
        for (const auto& ae : a.act_est) {
          exp::QuantSection s = cfg.quant;
          s.w_bits = w;
          s.a_bits = ab;
          s.weight_est = we;
          s.act_est = ae;
          configs.push_back(s.quant_config());
        }
  const fs::path dir = a.out.empty() ? ckpt.parent_path() : fs::path(a.out);
  guard_outputs(dir, {"sweep.csv"}, a.overwrite);
  const exp::RunData data = read_data(cfg, a.corpus);
  const auto evals = exp::eval_set(cfg, data, cfg.train.eval_sequences);
  const auto calib = exp::calibration_batches(cfg, data, exp::calibration_seed(run.seed, 0));
  const auto rows = quant::bitwidth_sweep(run.checkpoint.params, cfg.model, calib, evals, configs);
  const auto csv = quant::sweep_csv(rows);
  write_text(dir / "sweep.csv", csv);
  out << csv << "wrote " << (dir / "sweep.csv").string() << '\n';
  return kOk;
}

int exit_code_for(std::ostream& err, const std::exception& e, int code) {
  err << "error: " << e.what() << '\n';
  return code;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Attention-outlier lab: train, quantize and diagnose small transformers", "olab"};
  app.require_subcommand(1);

  MakeCorpusArgs mc;
  auto* c_corpus = app.add_subcommand("make-corpus", "Write the deterministic synthetic corpus");
  c_corpus->add_option("--out", mc.out, "Output file (default $OLAB_CORPUS_DIR/synthetic.txt)");
  c_corpus->add_option("--bytes", mc.bytes, "Corpus size in bytes");
  c_corpus->add_option("--seed", mc.seed, "Generator seed");
  c_corpus->add_flag("--overwrite", mc.overwrite, "Replace an existing file");

  TrainArgs ta;
  auto* c_train = app.add_subcommand("train", "Train a model from an experiment file");
  c_train->add_option("config", ta.config, "Experiment JSON")->required();
  c_train->add_option("--out", ta.out, "Run directory")->required();
  c_train->add_option("--seed", ta.seed, "Train only this seed");
  c_train->add_option("--corpus", ta.corpus, "Override data.corpus");
  c_train->add_option("--jobs", ta.jobs, "Seeds trained in parallel")->check(CLI::PositiveNumber);
  c_train->add_flag("--overwrite", ta.overwrite, "Replace existing outputs");
  c_train->add_flag("--quiet", ta.quiet, "No progress lines");

  QuantizeArgs qa;
  auto* c_quant = app.add_subcommand("quantize", "Calibrate and evaluate a fake-quantized model");
  c_quant->add_option("checkpoint", qa.checkpoint, "Checkpoint written by train")->required();
  c_quant->add_option("--out", qa.out, "Output directory (default: the checkpoint's)");
  c_quant->add_option("--corpus", qa.corpus, "Override data.corpus");
  c_quant->add_option("--w-bits", qa.w_bits, "Weight bits (0 = float)");
  c_quant->add_option("--a-bits", qa.a_bits, "Activation bits (0 = float)");
  c_quant->add_option("--weight-est", qa.weight_est, "minmax | mse[:grid] | percentile:p[:m]");
  c_quant->add_option("--act-est", qa.act_est, "running_minmax[:m:n] | percentile:p[:m] | ...");
  c_quant->add_option("--calib-batches", qa.calib_batches, "Calibration batches");
  c_quant->add_option("--repeat", qa.repeat, "Calibration repetitions with distinct seeds");
  c_quant->add_option("--jobs", qa.jobs, "Repetitions run in parallel")->check(CLI::PositiveNumber);
  c_quant->add_flag("--overwrite", qa.overwrite, "Replace existing outputs");

  DiagnoseArgs da;
  auto* c_diag = app.add_subcommand("diagnose", "Outlier report and attention dumps");
  c_diag->add_option("checkpoint", da.checkpoint, "Checkpoint written by train")->required();
  c_diag->add_option("--out", da.out, "Output directory (default: <run>/diagnostics)");
  c_diag->add_option("--corpus", da.corpus, "Override data.corpus");
  c_diag->add_option("--eval-sequences", da.eval_sequences, "Sequences to analyse");
  c_diag->add_option("--dump-attention", da.dumps, "HEAD,LAYER (1-based); repeatable");
  c_diag->add_option("--dump-sequence", da.dump_sequence, "Evaluation sequence used for dumps");
  c_diag->add_flag("--overwrite", da.overwrite, "Replace existing outputs");

  CompareArgs ca;
  auto* c_cmp = app.add_subcommand("compare", "Merge run directories into one report");
  c_cmp->add_option("dirs", ca.dirs, "Run directories")->required();
  c_cmp->add_option("--out", ca.out, "Write report.csv and report.json here");
  c_cmp->add_flag("--overwrite", ca.overwrite, "Replace existing outputs");

  SweepArgs sa;
  auto* c_sweep = app.add_subcommand("sweep", "Quantized perplexity over bit widths and estimators");
  c_sweep->add_option("checkpoint", sa.checkpoint, "Checkpoint written by train")->required();
  c_sweep->add_option("--out", sa.out, "Output directory (default: the checkpoint's)");
  c_sweep->add_option("--corpus", sa.corpus, "Override data.corpus");
  c_sweep->add_option("--w-bits", sa.w_bits, "Weight bit widths")->delimiter(',');
  c_sweep->add_option("--a-bits", sa.a_bits, "Activation bit widths")->delimiter(',');
  c_sweep->add_option("--weight-est", sa.weight_est, "Weight estimators")->delimiter(';');
  c_sweep->add_option("--act-est", sa.act_est, "Activation estimators")->delimiter(';');
  c_sweep->add_flag("--overwrite", sa.overwrite, "Replace existing outputs");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kConfigError;
  }

  try {
    if (c_corpus->parsed()) return make_corpus(mc, out);
    if (c_train->parsed()) return cmd_train(ta, out, err);
    if (c_quant->parsed()) return cmd_quantize(qa, out);
    if (c_diag->parsed()) return cmd_diagnose(da, out);
    if (c_cmp->parsed()) return cmd_compare(ca, out);
    if (c_sweep->parsed()) return cmd_sweep(sa, out);
  } catch (const ConfigError& e) {
    return exit_code_for(err, e, kConfigError);
  } catch (const report::SchemaError& e) {
    return exit_code_for(err, e, kSchemaError);
  } catch (const model::CheckpointError& e) {
    return exit_code_for(err, e, kCheckpointError);
  } catch (const DataError& e) {
    return exit_code_for(err, e, kDataError);
  } catch (const ContractError& e) {
    return exit_code_for(err, e, kDataError);
  } catch (const IoError& e) {
    return exit_code_for(err, e, kDataError);
  } catch (const std::exception& e) {
    return exit_code_for(err, e, kFailure);
  }
  return kFailure;
}

}  // namespace olab::cli
