#include "olab/attention.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "olab/errors.hpp"

namespace olab::attention {

namespace {

Tensor full_parameter(Shape shape, double value) {
  const std::size_t n = numel_of(shape);
  return Tensor::parameter(std::move(shape), std::vector<double>(n, value));
}

// [T, d_model] -> [H, T, d_head]
Tensor split_heads(const Tensor& x, std::size_t n_heads) {
  const std::size_t t = x.dim(0);
  const std::size_t dh = x.dim(1) / n_heads;
  return permute(reshape(x, {t, n_heads, dh}), {1, 0, 2});
}

// [H, T, d_head] -> [T, d_model]
Tensor merge_heads(const Tensor& x) {
  const std::size_t h = x.dim(0);
  const std::size_t t = x.dim(1);
  const std::size_t dh = x.dim(2);
  return reshape(permute(x, {1, 0, 2}), {t, h * dh});
}

Tensor additive_mask(std::size_t t, bool causal, const AttentionMask& mask) {
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  std::vector<double> m(t * t, 0.0);
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = 0; j < t; ++j) {
      const bool hidden = (causal && j > i) || (!mask.key_valid.empty() && !mask.key_valid[j]);
      if (hidden) m[i * t + j] = kNegInf;
    }
  }
  return Tensor::from({t, t}, std::move(m));
}

}  // namespace

ClippedSoftmaxConfig ClippedSoftmaxConfig::fixed(double gamma, double zeta) {
  ClippedSoftmaxConfig c;
  c.mode = GammaMode::Fixed;
  c.gamma = gamma;
  c.zeta = zeta;
  return c;
}

ClippedSoftmaxConfig ClippedSoftmaxConfig::from_alpha(double alpha, double zeta) {
  ClippedSoftmaxConfig c;
  c.mode = GammaMode::Alpha;
  c.alpha = alpha;
  c.zeta = zeta;
  return c;
}

void ClippedSoftmaxConfig::validate() const {
  if (!(zeta >= 1.0)) throw ConfigError("clipped softmax: zeta must be >= 1");
  if (mode == GammaMode::Fixed && !(gamma <= 0.0)) {
    throw ConfigError("clipped softmax: gamma must be <= 0");
  }
  if (mode == GammaMode::Alpha && !(alpha > 0.0)) {
    throw ConfigError("clipped softmax: alpha must be > 0");
  }
}

double ClippedSoftmaxConfig::gamma_for(std::size_t seq_len) const {
  if (mode == GammaMode::Fixed) return gamma;
  if (seq_len == 0) throw ContractError("clipped softmax: alpha mode needs T >= 1");
  return -alpha / static_cast<double>(seq_len);
}

void GatingConfig::validate() const {
  if (design == GatingDesign::Mlp && n_hid < 1) {
    throw ConfigError("gating: MLP design needs n_hid >= 1");
  }
  if (!std::isfinite(b_init)) throw ConfigError("gating: b_init must be finite");
  if (!(gate_scale > 0.0)) throw ConfigError("gating: gate_scale must be > 0");
}

void AttentionConfig::validate() const {
  if (n_heads == 0 || d_model == 0 || d_model % n_heads != 0) {
    throw ConfigError("attention: d_model (" + std::to_string(d_model) +
                      ") must be a positive multiple of n_heads (" +
                      std::to_string(n_heads) + ")");
  }
  if (const auto* c = std::get_if<ClippedSoftmaxConfig>(&variant)) c->validate();
  if (const auto* g = std::get_if<GatingConfig>(&variant)) g->validate();
}

double pi_from_bias(double b_init) { return 1.0 / (1.0 + std::exp(-b_init)); }

double bias_from_pi(double pi_init) {
  if (!(pi_init > 0.0 && pi_init < 1.0)) {
    throw ConfigError("gating: pi_init must lie in (0, 1)");
  }
  return std::log(pi_init / (1.0 - pi_init));
}

std::size_t gate_parameter_count(const GatingConfig& cfg, std::size_t n_heads,
                                 std::size_t d_head) {
  switch (cfg.design) {
    case GatingDesign::Linear:
      return n_heads * (d_head + 1);
    case GatingDesign::Mlp:
      return n_heads * (cfg.n_hid * (d_head + 2) + 1);
    case GatingDesign::AllHeadsLinear:
      return n_heads * (n_heads * d_head + 1);
  }
  return 0;
}

std::size_t GateParams::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor* t : {&w1, &b1, &w2, &b2}) {
    if (t->defined()) n += t->numel();
  }
  return n;
}

GateParams init_gate(const GatingConfig& cfg, std::size_t n_heads, std::size_t d_model,
                     std::mt19937_64& rng) {
  cfg.validate();
  if (n_heads == 0 || d_model % n_heads != 0) {
    throw ConfigError("gating: d_model must be a multiple of n_heads");
  }
  const std::size_t dh = d_model / n_heads;
  auto he = [](std::size_t fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); };
  GateParams p;
  switch (cfg.design) {
    case GatingDesign::Linear:
      p.w1 = normal_parameter({n_heads, dh, 1}, he(dh), rng);
      p.b1 = full_parameter({n_heads, 1, 1}, cfg.b_init);
      break;
    case GatingDesign::Mlp:
      p.w1 = normal_parameter({n_heads, dh, cfg.n_hid}, he(dh), rng);
      p.b1 = full_parameter({n_heads, 1, cfg.n_hid}, 0.0);
      p.w2 = normal_parameter({n_heads, cfg.n_hid, 1}, he(cfg.n_hid), rng);
      p.b2 = full_parameter({n_heads, 1, 1}, cfg.b_init);
      break;
    case GatingDesign::AllHeadsLinear:
      p.w1 = normal_parameter({d_model, n_heads}, he(d_model), rng);
      p.b1 = full_parameter({n_heads}, cfg.b_init);
      break;
  }
  return p;
}

AttentionParams init_attention(const AttentionConfig& cfg, double stddev,
                               std::mt19937_64& rng) {
  cfg.validate();
  AttentionParams p;
  p.query = init_linear(cfg.d_model, cfg.d_model, stddev, rng);
  p.key = init_linear(cfg.d_model, cfg.d_model, stddev, rng);
  p.value = init_linear(cfg.d_model, cfg.d_model, stddev, rng);
  p.output = init_linear(cfg.d_model, cfg.d_model, stddev, rng);
  if (const auto* g = std::get_if<GatingConfig>(&cfg.variant)) {
    p.gate = init_gate(*g, cfg.n_heads, cfg.d_model, rng);
  }
  return p;
}

Tensor clipped_softmax(const Tensor& x, const ClippedSoftmaxConfig& cfg,
                       std::size_t seq_len, std::ptrdiff_t axis) {
  cfg.validate();
  const double gamma = cfg.gamma_for(seq_len);
  Tensor stretched = add_scalar(scale(softmax(x, axis), cfg.zeta - gamma), gamma);
  return clip(stretched, 0.0, 1.0);
}

Tensor gate_forward(const Tensor& x, std::size_t n_heads, const GatingConfig& cfg,
                    const GateParams& params) {
  cfg.validate();
  if (x.rank() != 2 || n_heads == 0 || x.dim(1) % n_heads != 0) {
    throw ConfigError("gating: input " + shape_str(x.shape()) +
                      " does not split into " + std::to_string(n_heads) + " heads");
  }
  const std::size_t t = x.dim(0);
  const std::size_t d_model = x.dim(1);
  const std::size_t dh = d_model / n_heads;
  Tensor logits;
  switch (cfg.design) {
    case GatingDesign::Linear: {
      if (params.w1.shape() != Shape{n_heads, dh, 1}) {
        throw ConfigError("gating: Linear weights " + shape_str(params.w1.shape()) +
                          " do not match geometry");
      }
      logits = add(matmul(split_heads(x, n_heads), params.w1), params.b1);
      break;
    }
    case GatingDesign::Mlp: {
      if (params.w1.shape() != Shape{n_heads, dh, cfg.n_hid} || !params.w2.defined()) {
        throw ConfigError("gating: MLP weights " + shape_str(params.w1.shape()) +
                          " do not match geometry");
      }
      Tensor hidden = relu(add(matmul(split_heads(x, n_heads), params.w1), params.b1));
      logits = add(matmul(hidden, params.w2), params.b2);
      break;
    }
    case GatingDesign::AllHeadsLinear: {
      if (params.w1.shape() != Shape{d_model, n_heads}) {
        throw ConfigError("gating: AllHeadsLinear weights " +
                          shape_str(params.w1.shape()) + " do not match geometry");
      }
      logits = transpose(add(matmul(x, params.w1), params.b1));
      break;
    }
  }
  return reshape(sigmoid(logits), {n_heads, t});
}

AttentionResult attention_forward(const Tensor& x, const AttentionConfig& cfg,
                                  const AttentionParams& params, const AttentionMask& mask,
                                  const SiteTap& tap, bool capture_trace) {
  cfg.validate();
  if (x.rank() != 2 || x.dim(1) != cfg.d_model) {
    throw DimensionError("attention: input " + shape_str(x.shape()) +
                         " does not match d_model " + std::to_string(cfg.d_model));
  }
  const std::size_t t = x.dim(0);
  if (!mask.key_valid.empty() && mask.key_valid.size() != t) {
    throw DimensionError("attention: mask length " + std::to_string(mask.key_valid.size()) +
                         " vs sequence length " + std::to_string(t));
  }
  const std::size_t h = cfg.n_heads;
  const std::size_t dh = cfg.d_head();

  Tensor q = split_heads(tap("q", linear(x, params.query)), h);
  Tensor k = split_heads(tap("k", linear(x, params.key)), h);
  Tensor v = split_heads(tap("v", linear(x, params.value)), h);

  Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(dh)));
  for (double s : scores.data()) {
    if (!std::isfinite(s)) throw NumericError("attention: non-finite attention score");
  }
  scores = tap("scores", scores);
  if (cfg.causal || !mask.key_valid.empty()) {
    scores = add(scores, additive_mask(t, cfg.causal, mask));
  }

  Tensor probs;
  if (const auto* c = std::get_if<ClippedSoftmaxConfig>(&cfg.variant)) {
    probs = clipped_softmax(scores, *c, t);
  } else {
    probs = softmax(scores);
  }
  probs = tap("probs", probs);

  Tensor context = matmul(probs, v);
  Tensor gated = context;
  Tensor pi;
  if (const auto* g = std::get_if<GatingConfig>(&cfg.variant)) {
    if (!params.gate) throw ConfigError("attention: gated variant without gate params");
    pi = tap("gate_probs", gate_forward(x, h, *g, *params.gate));
    Tensor factor = reshape(g->gate_scale == 1.0 ? pi : scale(pi, g->gate_scale), {h, t, 1});
    gated = mul(context, factor);
  }
  Tensor merged = tap("context", merge_heads(gated));
  AttentionResult result;
  result.output = tap("out", linear(merged, params.output));
  if (capture_trace) {
    result.trace.probs = probs.detach();
    result.trace.values = v.detach();
    result.trace.context = context.detach();
    if (pi.defined()) result.trace.gate_probs = pi.detach();
  }
  return result;
}

}  // namespace olab::attention
