#pragma once

// Byte-level MLM/CLM data, AdamW with decoupled weight decay, LR schedules,
// gradient clipping, the training loop and the gate fine-tuning recipe.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "olab/model.hpp"

namespace olab::train {

inline constexpr std::int32_t kPadId = 256;
inline constexpr std::int32_t kMaskId = 257;
inline constexpr std::size_t kByteVocab = 258;

enum class Schedule { LinearDecay, Constant };

struct TrainConfig {
  std::size_t steps = 1000;
  std::size_t batch_size = 8;
  double max_lr = 1e-3;
  std::size_t warmup_steps = 100;
  Schedule schedule = Schedule::LinearDecay;
  double weight_decay = 0.01;
  bool decay_ln_gamma = false;
  double grad_clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  double mlm_mask_prob = 0.15;
  double act_reg_coefficient = 0.0;
  std::size_t eval_every = 100;
  std::size_t eval_sequences = 32;

  /// Throws ConfigError naming the field (prefixed "train.").
  void validate() const;
};

/// Token ids over the byte vocabulary with a fixed window length.
class CorpusDataset {
 public:
  CorpusDataset(std::vector<std::int32_t> ids, std::size_t seq_len);

  static CorpusDataset from_text(std::string_view text, std::size_t seq_len);
  /// Throws IoError with the path when the file cannot be read.
  static CorpusDataset load(const std::filesystem::path& path, std::size_t seq_len);

  std::size_t size() const { return ids_.size(); }
  std::size_t seq_len() const { return seq_len_; }
  std::size_t vocab_size() const { return kByteVocab; }
  std::span<const std::int32_t> ids() const { return ids_; }

  /// Uniformly placed window of `len` tokens (seq_len by default).
  std::vector<std::int32_t> sample(std::mt19937_64& rng, std::size_t len = 0) const;
  /// `n` evenly spaced windows, independent of any RNG.
  std::vector<std::vector<std::int32_t>> windows(std::size_t n, std::size_t len = 0) const;
  /// Leading (1 - eval_fraction) for training, the rest for evaluation.
  std::pair<CorpusDataset, CorpusDataset> split(double eval_fraction) const;

 private:
  std::vector<std::int32_t> ids_;
  std::size_t seq_len_;
};

/// Derives an independent stream seed; used for data, dropout and
/// calibration draws.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

/// Deterministic English-like text: Zipf-distributed words from a fixed
/// lexicon, sentence punctuation, and occasional paragraph breaks.
std::string synthetic_corpus(std::size_t n_bytes, std::uint64_t seed);

/// Masks each position with probability mask_prob (at least one per
/// sequence); targets hold the original ids there and kIgnoreIndex elsewhere.
model::Example mask_sequence(std::span<const std::int32_t> seq, std::mt19937_64& rng,
                             double mask_prob);
std::vector<model::Example> make_mlm_batch(const CorpusDataset& data, std::mt19937_64& rng,
                                           double mask_prob, std::size_t batch_size);
/// Next-token targets: inputs are window[0, T), targets window[1, T].
std::vector<model::Example> make_clm_batch(const CorpusDataset& data, std::mt19937_64& rng,
                                           std::size_t batch_size);

/// Fixed evaluation examples for the model's objective.
std::vector<model::Example> make_eval_set(const CorpusDataset& data,
                                          const model::ModelConfig& cfg, std::size_t n,
                                          double mask_prob, std::uint64_t seed);

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::size_t t = 0;
};

struct AdamWOptions {
  double lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool decay_ln_gamma = false;
};

/// Whether decoupled weight decay applies to this parameter kind.
bool decays(model::ParamKind kind, bool decay_ln_gamma);

/// One bias-corrected AdamW update using each tensor's accumulated grad.
void adamw_step(std::span<const model::NamedParam> params, AdamState& state,
                const AdamWOptions& opts);

double lr_at(std::size_t step, const TrainConfig& cfg);

/// Scales all grads by max_norm / norm when the global L2 norm exceeds
/// max_norm. Returns the norm before clipping.
double clip_grad_norm(std::span<const model::NamedParam> params, double max_norm);

struct MetricsRow {
  std::size_t step = 0;
  double lr = NAN;
  double train_loss = NAN;
  double eval_ppl = NAN;
  double max_inf_norm = NAN;
  double avg_kurtosis = NAN;
  double grad_norm = NAN;

  bool has_eval() const { return !std::isnan(eval_ppl); }
};

/// Columns step,lr,train_loss,eval_ppl,max_inf_norm,avg_kurtosis,grad_norm;
/// fields not measured at a step are left empty.
std::string metrics_csv(std::span<const MetricsRow> rows);

struct EvalMetrics {
  double nll = 0.0;
  double ppl = 0.0;
  double max_inf_norm = 0.0;
  double avg_kurtosis = 0.0;
};

/// Loss plus the outlier metrics, from one forward per example.
EvalMetrics evaluate(const model::ModelParams& params, const model::ModelConfig& cfg,
                     std::span<const model::Example> eval,
                     model::MeasurementPoint point = model::MeasurementPoint::PostResidual);

struct TrainResult {
  model::ModelParams params;
  std::vector<MetricsRow> history;

  const MetricsRow& first_eval() const;
  const MetricsRow& last_eval() const;
};

using ProgressFn = std::function<void(const MetricsRow&)>;

/// Runs the loop from `init` (or a fresh init from the seed). Throws
/// NumericError naming the step, loss and grad norm on a non-finite loss.
TrainResult train(const model::ModelConfig& mcfg, const TrainConfig& tcfg,
                  const CorpusDataset& data, std::span<const model::Example> eval,
                  const model::ModelParams* init = nullptr, const ProgressFn& progress = {});

struct FinetuneResult {
  model::ModelConfig config;
  TrainResult run;
};

/// Adds freshly initialized gates (b_init 0, gate_scale 2) to a vanilla
/// model, so the gated model starts as the vanilla model in expectation, then
/// trains with the activation regularizer.
model::ModelConfig gated_config(const model::ModelConfig& vanilla, attention::GatingDesign design,
                                std::size_t n_hid = 4);
model::ModelParams add_gates(const model::ModelParams& vanilla, const model::ModelConfig& gated,
                             std::uint64_t seed, bool zero_gate_weights);
FinetuneResult finetune_with_gates(const model::ModelParams& pretrained,
                                   const model::ModelConfig& vanilla_cfg,
                                   attention::GatingDesign design, const TrainConfig& tcfg,
                                   const CorpusDataset& data, std::span<const model::Example> eval,
                                   bool zero_gate_weights = false);

struct Preset {
  model::ModelConfig model;
  TrainConfig train;
};

/// "toy": 2 layers, d_model 64, 4 heads, T 64. "bert6l-mini": 6 layers,
/// d_model 128, T 128. Throws ConfigError for unknown names.
Preset preset(const std::string& name);

}  // namespace olab::train
