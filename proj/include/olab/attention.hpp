#pragma once

// Multi-head self-attention with three probability maps: the softmax, the
// clipped (stretched then clamped) softmax, and softmax gated per head and
// token by a learned sigmoid.

#include <cstdint>
#include <optional>
#include <random>
#include <variant>
#include <vector>

#include "olab/nn.hpp"
#include "olab/tensor.hpp"

namespace olab::attention {

/// clip((zeta - gamma) * softmax(x) + gamma, 0, 1). The lower stretch is
/// either a fixed gamma or derived from the sequence length as -alpha / T.
struct ClippedSoftmaxConfig {
  enum class GammaMode { Fixed, Alpha };

  double zeta = 1.0;
  GammaMode mode = GammaMode::Fixed;
  double gamma = 0.0;
  double alpha = 4.0;

  static ClippedSoftmaxConfig fixed(double gamma, double zeta = 1.0);
  static ClippedSoftmaxConfig from_alpha(double alpha, double zeta = 1.0);

  /// Throws ConfigError unless zeta >= 1, gamma <= 0 (fixed) or alpha > 0.
  void validate() const;
  double gamma_for(std::size_t seq_len) const;
};

enum class GatingDesign { Linear, Mlp, AllHeadsLinear };

struct GatingConfig {
  GatingDesign design = GatingDesign::Linear;
  std::size_t n_hid = 4;  // MLP only
  double b_init = 0.0;
  double gate_scale = 1.0;

  void validate() const;
};

struct Vanilla {};

using AttentionVariant = std::variant<Vanilla, ClippedSoftmaxConfig, GatingConfig>;

struct AttentionConfig {
  std::size_t d_model = 0;
  std::size_t n_heads = 1;
  AttentionVariant variant = Vanilla{};
  bool causal = false;

  std::size_t d_head() const { return d_model / n_heads; }
  void validate() const;
};

// Gate biases and probabilities are related by pi = sigmoid(b).
double pi_from_bias(double b_init);
double bias_from_pi(double pi_init);

/// Extra parameters one attention layer carries for the given gate design.
std::size_t gate_parameter_count(const GatingConfig& cfg, std::size_t n_heads,
                                 std::size_t d_head);

/// Per-head gate weights. Linear: w1 [H, d_head, 1], b1 [H, 1, 1].
/// Mlp: w1 [H, d_head, n_hid], b1 [H, 1, n_hid], w2 [H, n_hid, 1],
/// b2 [H, 1, 1]. AllHeadsLinear: w1 [d_model, H], b1 [H].
struct GateParams {
  Tensor w1, b1, w2, b2;

  std::size_t parameter_count() const;
};

struct AttentionParams {
  Linear query, key, value, output;
  std::optional<GateParams> gate;
};

/// He-normal weights (stddev sqrt(2 / fan_in)); the bias feeding the gate
/// logit is b_init, the MLP hidden bias starts at zero.
GateParams init_gate(const GatingConfig& cfg, std::size_t n_heads, std::size_t d_model,
                     std::mt19937_64& rng);

AttentionParams init_attention(const AttentionConfig& cfg, double stddev,
                               std::mt19937_64& rng);

Tensor clipped_softmax(const Tensor& x, const ClippedSoftmaxConfig& cfg,
                       std::size_t seq_len, std::ptrdiff_t axis = -1);

/// Gate probabilities pi [n_heads, T] from the attention input x [T, d_model].
Tensor gate_forward(const Tensor& x, std::size_t n_heads, const GatingConfig& cfg,
                    const GateParams& params);

struct AttentionMask {
  std::vector<std::uint8_t> key_valid;  // empty: every key position is valid
};

struct AttentionTrace {
  Tensor probs;       // [H, T, T]
  Tensor values;      // [H, T, d_head]
  Tensor context;     // P V before gating, [H, T, d_head]
  Tensor gate_probs;  // [H, T]; undefined unless gated
};

struct AttentionResult {
  Tensor output;  // [T, d_model]
  AttentionTrace trace;
};

/// Sites reported to `tap`: q, k, v, scores (before masking), probs,
/// gate_probs (gated), context (input of the output projection), out.
AttentionResult attention_forward(const Tensor& x, const AttentionConfig& cfg,
                                  const AttentionParams& params,
                                  const AttentionMask& mask = {},
                                  const SiteTap& tap = {}, bool capture_trace = false);

}  // namespace olab::attention
