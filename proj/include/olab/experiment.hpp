#pragma once

// Experiment files: one JSON tree holding the model, training, data,
// quantization and diagnostics settings plus the seed list. Parsing is
// strict; every error is a ConfigError naming the field path.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "olab/model.hpp"
#include "olab/quantsim.hpp"
#include "olab/training.hpp"

namespace olab::exp {

inline constexpr int kExperimentSchemaVersion = 1;

struct DataConfig {
  std::string corpus = "synthetic.txt";  // relative paths also resolve under $OLAB_CORPUS_DIR
  double eval_fraction = 0.05;
  std::uint64_t eval_seed = 0;  // masks of the fixed evaluation set
};

/// Defaults follow the usual PTQ setup: symmetric min-max weights,
/// asymmetric activations with running min-max over 16 batches.
struct QuantSection {
  int w_bits = 8;
  int a_bits = 8;
  std::string weight_est = "minmax";
  std::string act_est = "running_minmax:0.9:16";
  std::size_t calib_batches = 16;
  std::size_t calib_batch_size = 8;
  std::size_t repeat = 1;

  quant::QuantConfig quant_config() const;
};

struct DiagnosticsSection {
  double sigma_mult = 6.0;
  model::MeasurementPoint point = model::MeasurementPoint::PostResidual;
  bool excess_kurtosis = false;
  std::size_t eval_sequences = 64;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::string description;
  model::ModelConfig model;
  train::TrainConfig train;
  DataConfig data;
  QuantSection quant;
  DiagnosticsSection diagnostics;
  std::vector<std::uint64_t> seeds{0};

  void validate() const;
};

nlohmann::json to_json(const train::TrainConfig& t);
train::TrainConfig train_config_from_json(const nlohmann::json& j,
                                          const std::string& path = "train");

nlohmann::json to_json(const ExperimentConfig& cfg);
ExperimentConfig experiment_from_json(const nlohmann::json& j);
/// IoError when the file is unreadable, ConfigError for malformed JSON.
ExperimentConfig load_experiment(const std::filesystem::path& path);

/// The corpus path as given if it exists, else under $OLAB_CORPUS_DIR.
/// Throws IoError listing the places tried.
std::filesystem::path resolve_corpus(const std::string& corpus);

struct RunData {
  train::CorpusDataset train_split;
  train::CorpusDataset eval_split;
};

/// Leading (1 - eval_fraction) of the corpus for training, the tail held out.
RunData split_data(const ExperimentConfig& cfg, const train::CorpusDataset& corpus);
/// resolve_corpus + load + split_data. IoError or ContractError on bad input.
RunData load_data(const ExperimentConfig& cfg, const std::string& corpus);

/// The fixed evaluation set (data.eval_seed); ContractError when n is 0.
std::vector<model::Example> eval_set(const ExperimentConfig& cfg, const RunData& data,
                                     std::size_t n);

/// quant.calib_batches batches drawn from the training split, shaped like
/// the model's training inputs.
std::vector<quant::Batch> calibration_batches(const ExperimentConfig& cfg, const RunData& data,
                                              std::uint64_t seed);
/// Seed of the i-th calibration draw of a run.
std::uint64_t calibration_seed(std::uint64_t run_seed, std::size_t i);

/// "bert-<L>L-d<d>" for post-LN models, "opt-..." for pre-LN.
std::string model_tag(const model::ModelConfig& m);

}  // namespace olab::exp
