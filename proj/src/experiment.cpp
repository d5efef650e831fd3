#include "olab/experiment.hpp"

#include <cstdlib>
#include <fstream>
#include <random>
#include <set>

#include "json_reader.hpp"
#include "olab/errors.hpp"
#include "olab/report.hpp"

namespace olab::exp {

using detail::ObjectReader;
using nlohmann::json;

namespace {

const char* schedule_name(train::Schedule s) {
  return s == train::Schedule::Constant ? "constant" : "linear_decay";
}

const char* point_name(model::MeasurementPoint p) {
  return p == model::MeasurementPoint::PreResidual ? "pre_residual" : "post_residual";
}

void check(bool ok, const std::string& field, const std::string& why) {
  if (!ok) throw ConfigError(field + ": " + why);
}

}  // namespace

quant::QuantConfig QuantSection::quant_config() const {
  quant::QuantConfig q;
  q.w_bits = w_bits;
  q.a_bits = a_bits;
  try {
    q.weight_estimator = quant::RangeEstimator::parse(weight_est);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("quant.weight_est: ") + e.what());
  }
  try {
    q.act_estimator = quant::RangeEstimator::parse(act_est);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("quant.act_est: ") + e.what());
  }
  q.validate();
  return q;
}

void ExperimentConfig::validate() const {
  check(!name.empty(), "name", "must not be empty");
  model.validate();
  train.validate();
  check(!data.corpus.empty(), "data.corpus", "must not be empty");
  check(data.eval_fraction > 0.0 && data.eval_fraction < 1.0, "data.eval_fraction",
        "must lie in (0, 1)");
  check(quant.w_bits == 0 || (quant.w_bits >= 2 && quant.w_bits <= 16), "quant.w_bits",
        "must be 0 or in [2, 16]");
  check(quant.a_bits == 0 || (quant.a_bits >= 2 && quant.a_bits <= 16), "quant.a_bits",
        "must be 0 or in [2, 16]");
  check(quant.calib_batches >= 1, "quant.calib_batches", "must be at least 1");
  check(quant.calib_batch_size >= 1, "quant.calib_batch_size", "must be at least 1");
  check(quant.repeat >= 1, "quant.repeat", "must be at least 1");
  quant.quant_config();
  check(diagnostics.sigma_mult > 0.0, "diagnostics.sigma_mult", "must be positive");
  check(diagnostics.eval_sequences >= 1, "diagnostics.eval_sequences", "must be at least 1");
  check(!seeds.empty(), "seeds", "must list at least one seed");
  check(std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() == seeds.size(), "seeds",
        "must be distinct");
  check(train.mlm_mask_prob == model.objective.mask_prob, "train.mlm_mask_prob",
        "must equal model.objective.mask_prob");
}

json to_json(const train::TrainConfig& t) {
  return {{"steps", t.steps},
          {"batch_size", t.batch_size},
          {"max_lr", t.max_lr},
          {"warmup_steps", t.warmup_steps},
          {"schedule", schedule_name(t.schedule)},
          {"weight_decay", t.weight_decay},
          {"decay_ln_gamma", t.decay_ln_gamma},
          {"grad_clip_norm", t.grad_clip_norm},
          {"beta1", t.beta1},
          {"beta2", t.beta2},
          {"adam_eps", t.adam_eps},
          {"act_reg_coefficient", t.act_reg_coefficient},
          {"eval_every", t.eval_every},
          {"eval_sequences", t.eval_sequences}};
}

train::TrainConfig train_config_from_json(const json& j, const std::string& path) {
  ObjectReader r(j, path);
  train::TrainConfig t;
  r.get("steps", t.steps);
  r.get("batch_size", t.batch_size);
  r.get("max_lr", t.max_lr);
  r.get("warmup_steps", t.warmup_steps);
  std::string schedule = schedule_name(t.schedule);
  r.get("schedule", schedule);
  if (schedule == "linear_decay") {
    t.schedule = train::Schedule::LinearDecay;
  } else if (schedule == "constant") {
    t.schedule = train::Schedule::Constant;
  } else {
    throw ConfigError(r.field("schedule") + ": expected linear_decay or constant, got '" +
                      schedule + "'");
  }
  r.get("weight_decay", t.weight_decay);
  r.get("decay_ln_gamma", t.decay_ln_gamma);
  r.get("grad_clip_norm", t.grad_clip_norm);
  r.get("beta1", t.beta1);
  r.get("beta2", t.beta2);
  r.get("adam_eps", t.adam_eps);
  r.get("act_reg_coefficient", t.act_reg_coefficient);
  r.get("eval_every", t.eval_every);
  r.get("eval_sequences", t.eval_sequences);
  r.finish();
  try {
    t.validate();
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    if (msg.starts_with("train.")) msg = path + msg.substr(5);
    throw ConfigError(msg);
  }
  return t;
}

json to_json(const ExperimentConfig& c) {
  return {{"schema_version", kExperimentSchemaVersion},
          {"name", c.name},
          {"description", c.description},
          {"model", model::to_json(c.model)},
          {"train", to_json(c.train)},
          {"data",
           {{"corpus", c.data.corpus},
            {"eval_fraction", c.data.eval_fraction},
            {"eval_seed", c.data.eval_seed}}},
          {"quant",
           {{"w_bits", c.quant.w_bits},
            {"a_bits", c.quant.a_bits},
            {"weight_est", c.quant.weight_est},
            {"act_est", c.quant.act_est},
            {"calib_batches", c.quant.calib_batches},
            {"calib_batch_size", c.quant.calib_batch_size},
            {"repeat", c.quant.repeat}}},
          {"diagnostics",
           {{"sigma_mult", c.diagnostics.sigma_mult},
            {"measurement_point", point_name(c.diagnostics.point)},
            {"excess_kurtosis", c.diagnostics.excess_kurtosis},
            {"eval_sequences", c.diagnostics.eval_sequences}}},
          {"seeds", c.seeds}};
}

ExperimentConfig experiment_from_json(const json& j) {
  ObjectReader r(j, "experiment");
  int version = kExperimentSchemaVersion;
  r.get("schema_version", version);
  if (version != kExperimentSchemaVersion) {
    throw report::SchemaError("experiment.schema_version: " + std::to_string(version) +
                              " is not supported (expected " +
                              std::to_string(kExperimentSchemaVersion) + ")");
  }
  ExperimentConfig c;
  r.get("name", c.name);
  r.get("description", c.description);
  c.model = model::model_config_from_json(r.raw("model"), "model");
  if (r.has("train")) c.train = train_config_from_json(r.raw("train"), "train");
  c.train.mlm_mask_prob = c.model.objective.mask_prob;

  if (r.has("data")) {
    ObjectReader d(r.raw("data"), "data");
    d.get("corpus", c.data.corpus);
    d.get("eval_fraction", c.data.eval_fraction);
    d.get("eval_seed", c.data.eval_seed);
    d.finish();
  }
  if (r.has("quant")) {
    ObjectReader q(r.raw("quant"), "quant");
    q.get("w_bits", c.quant.w_bits);
    q.get("a_bits", c.quant.a_bits);
    q.get("weight_est", c.quant.weight_est);
    q.get("act_est", c.quant.act_est);
    q.get("calib_batches", c.quant.calib_batches);
    q.get("calib_batch_size", c.quant.calib_batch_size);
    q.get("repeat", c.quant.repeat);
    q.finish();
  }
  if (r.has("diagnostics")) {
    ObjectReader d(r.raw("diagnostics"), "diagnostics");
    d.get("sigma_mult", c.diagnostics.sigma_mult);
    std::string point = point_name(c.diagnostics.point);
    d.get("measurement_point", point);
    if (point == "post_residual") {
      c.diagnostics.point = model::MeasurementPoint::PostResidual;
    } else if (point == "pre_residual") {
      c.diagnostics.point = model::MeasurementPoint::PreResidual;
    } else {
      throw ConfigError("diagnostics.measurement_point: expected post_residual or pre_residual");
    }
    d.get("excess_kurtosis", c.diagnostics.excess_kurtosis);
    d.get("eval_sequences", c.diagnostics.eval_sequences);
    d.finish();
  }
  if (r.has("seeds")) {
    const json& s = r.raw("seeds");
    if (!s.is_array()) throw ConfigError("seeds: expected an array of unsigned integers");
    c.seeds.clear();
    for (const auto& v : s) {
      if (!(v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0))) throw ConfigError("seeds: expected unsigned integers");
      c.seeds.push_back(v.get<std::uint64_t>());
    }
  }
  r.finish();
  c.validate();
  return c;
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON (" + e.what() + ")");
  }
  return experiment_from_json(j);
}

std::filesystem::path resolve_corpus(const std::string& corpus) {
  const std::filesystem::path p(corpus);
  if (std::filesystem::exists(p)) return p;
  std::string tried = p.string();
  if (p.is_relative()) {
    if (const char* dir = std::getenv("OLAB_CORPUS_DIR"); dir && *dir) {
      const auto alt = std::filesystem::path(dir) / p;
      if (std::filesystem::exists(alt)) return alt;
      tried += ", " + alt.string();
    }
  }
  throw IoError("corpus not found (tried " + tried + ")");
}

RunData split_data(const ExperimentConfig& cfg, const train::CorpusDataset& corpus) {
  auto [tr, ev] = corpus.split(cfg.data.eval_fraction);
  return {std::move(tr), std::move(ev)};
}

RunData load_data(const ExperimentConfig& cfg, const std::string& corpus) {
  const auto path = resolve_corpus(corpus.empty() ? cfg.data.corpus : corpus);
  try {
    return split_data(cfg, train::CorpusDataset::load(path, cfg.model.max_seq_len));
  } catch (const ContractError& e) {
    throw ContractError(path.string() + ": " + e.what());
  }
}

std::vector<model::Example> eval_set(const ExperimentConfig& cfg, const RunData& data,
                                     std::size_t n) {
  if (n == 0) throw ContractError("evaluation set is empty");
  return train::make_eval_set(data.eval_split, cfg.model, n, cfg.model.objective.mask_prob,
                              cfg.data.eval_seed);
}

std::vector<quant::Batch> calibration_batches(const ExperimentConfig& cfg, const RunData& data,
                                              std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<quant::Batch> out;
  for (std::size_t b = 0; b < cfg.quant.calib_batches; ++b) {
    const auto examples =
        cfg.model.objective.kind == model::ObjectiveKind::MLM
            ? train::make_mlm_batch(data.train_split, rng, cfg.model.objective.mask_prob,
                                    cfg.quant.calib_batch_size)
            : train::make_clm_batch(data.train_split, rng, cfg.quant.calib_batch_size);
    quant::Batch batch;
    for (const auto& ex : examples) batch.push_back(ex.inputs);
    out.push_back(std::move(batch));
  }
  return out;
}

std::uint64_t calibration_seed(std::uint64_t run_seed, std::size_t i) {
  return train::mix_seed(run_seed, 1000 + i);
}

std::string model_tag(const model::ModelConfig& m) {
  return std::string(m.ln_placement == model::LnPlacement::PostLN ? "bert" : "opt") + "-" +
         std::to_string(m.n_layers) + "L-d" + std::to_string(m.d_model());
}

}  // namespace olab::exp
