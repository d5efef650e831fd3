#pragma once

// A small encoder/decoder-style transformer LM built from the attention
// variants: token + learned position embeddings, n blocks with either
// post-LN (BERT) or pre-LN (GPT/OPT) placement, GELU FFN, and an LM head.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "olab/attention.hpp"
#include "olab/nn.hpp"
#include "olab/tensor.hpp"

namespace olab::model {

enum class LnPlacement { PreLN, PostLN };
enum class ObjectiveKind { MLM, CLM };

struct Objective {
  ObjectiveKind kind = ObjectiveKind::MLM;
  double mask_prob = 0.15;  // MLM only
};

/// Which tensor counts as "the attention layer output" for outlier metrics.
enum class MeasurementPoint { PostResidual, PreResidual };

inline constexpr double kBertInitStd = 0.02;
inline constexpr double kOptInitStd = 0.006;

struct ModelConfig {
  std::size_t vocab_size = 258;
  std::size_t max_seq_len = 64;
  std::size_t n_layers = 2;
  std::size_t d_ffn = 256;
  attention::AttentionConfig attention{64, 4, attention::Vanilla{}, false};
  LnPlacement ln_placement = LnPlacement::PostLN;
  double dropout_p = 0.0;
  Objective objective;
  double init_std = kBertInitStd;
  double ln_eps = 1e-5;

  std::size_t d_model() const { return attention.d_model; }
  /// Throws ConfigError naming the offending field.
  void validate() const;
};

enum class ParamKind { Weight, Bias, Embedding, LnGamma, LnBeta, GateWeight, GateBias };

struct NamedParam {
  std::string name;
  Tensor tensor;
  ParamKind kind;
  bool lm_head = false;
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;
};

struct BlockParams {
  attention::AttentionParams attn;
  LayerNormParams ln1, ln2;
  Linear fc1, fc2;
};

struct ModelParams {
  Tensor token_embedding;     // [vocab, d_model]
  Tensor position_embedding;  // [max_seq_len, d_model]
  LayerNormParams embed_ln;   // post-LN only
  std::vector<BlockParams> blocks;
  LayerNormParams final_ln;  // pre-LN only
  Linear lm_head;

  /// Stable order; names are "embed.token", "layer0.attn.query.weight", ...
  std::vector<NamedParam> named_parameters() const;
  ModelParams clone() const;
  void zero_grad() const;
  std::size_t parameter_count() const;
};

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed);

struct LayerActivations {
  Tensor attn_output;    // post-residual (after LN1 for post-LN blocks)
  Tensor attn_sublayer;  // attention output projection before the residual add
  Tensor ffn_output;     // FFN output before the residual add
  Tensor block_output;
  attention::AttentionTrace trace;

  const Tensor& measured(MeasurementPoint p) const {
    return p == MeasurementPoint::PostResidual ? attn_output : attn_sublayer;
  }
};

struct ForwardOptions {
  bool train = false;              // enables dropout
  std::uint64_t dropout_seed = 0;  // per-forward dropout stream
  bool capture_trace = false;
  ActivationObserver* observer = nullptr;
  attention::AttentionMask mask;
};

struct ForwardResult {
  Tensor logits;  // [T, vocab]
  std::vector<LayerActivations> layers;
};

ForwardResult forward(const ModelParams& params, const ModelConfig& cfg,
                      std::span<const std::int32_t> tokens, const ForwardOptions& opts = {});

/// Mean cross-entropy over supervised positions (kIgnoreIndex elsewhere).
Tensor loss(const Tensor& logits, std::span<const std::int32_t> targets,
            Reduction reduction = Reduction::Mean);

/// coefficient * sum over layers of mean(ffn_output^2).
Tensor activation_regularizer(const std::vector<LayerActivations>& layers,
                              double coefficient);

double perplexity(double mean_nll);

/// One input sequence with its supervision (kIgnoreIndex where unsupervised).
struct Example {
  std::vector<std::int32_t> inputs;
  std::vector<std::int32_t> targets;
};

/// Token-weighted mean NLL over every supervised position of the set, with
/// an optional observer spliced into each forward.
double evaluate_nll(const ModelParams& params, const ModelConfig& cfg,
                    std::span<const Example> examples, ActivationObserver* observer = nullptr);

// ---------------------------------------------------------------------------
// Serialization

nlohmann::json to_json(const ModelConfig& cfg);
/// Strict: unknown keys and bad values raise ConfigError with the field path.
ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& path = "model");

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
  nlohmann::json metadata;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Little-endian container: magic "OLABCKPT", u32 version, u64 length +
/// config/metadata JSON, u64 tensor count, then per tensor (u32 name length,
/// name, u32 rank, u64 extents, f64 values), and a trailing u64 FNV-1a hash
/// of every preceding byte.
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg,
                     const ModelParams& params, const nlohmann::json& metadata = {});
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace olab::model
