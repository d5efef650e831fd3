#include "olab/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "olab/errors.hpp"

namespace olab::model {

namespace {

using attention::AttentionParams;

LayerNormParams init_ln(std::size_t d) {
  return {Tensor::parameter({d}, std::vector<double>(d, 1.0)),
          Tensor::parameter({d}, std::vector<double>(d, 0.0))};
}

Tensor clone_tensor(const Tensor& t) {
  if (!t.defined()) return {};
  Tensor c = t.detach();
  c.set_requires_grad(t.requires_grad());
  return c;
}

Linear clone_linear(const Linear& l) { return {clone_tensor(l.weight), clone_tensor(l.bias)}; }
LayerNormParams clone_ln(const LayerNormParams& l) {
  return {clone_tensor(l.gamma), clone_tensor(l.beta)};
}

Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return x;
  std::bernoulli_distribution keep(1.0 - p);
  std::vector<double> m(x.numel());
  const double s = 1.0 / (1.0 - p);
  for (double& v : m) v = keep(rng) ? s : 0.0;
  return mul(x, Tensor::from(x.shape(), std::move(m)));
}

Tensor apply_ln(const Tensor& x, const LayerNormParams& ln, double eps) {
  return layer_norm(x, ln.gamma, ln.beta, eps);
}

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("model." + field + ": " + why);
  };
  if (vocab_size < 2) fail("vocab_size", "must be >= 2");
  if (max_seq_len < 1 || max_seq_len > 512) fail("max_seq_len", "must lie in [1, 512]");
  if (n_layers < 1) fail("n_layers", "must be >= 1");
  if (attention.d_model == 0 || attention.n_heads == 0 ||
      attention.d_model % attention.n_heads != 0) {
    fail("d_model", "must be a positive multiple of n_heads");
  }
  if (d_ffn < attention.d_model) fail("d_ffn", "must be >= d_model");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) fail("dropout_p", "must lie in [0, 1)");
  if (objective.kind == ObjectiveKind::MLM &&
      !(objective.mask_prob > 0.0 && objective.mask_prob < 1.0)) {
    fail("objective.mask_prob", "must lie in (0, 1)");
  }
  if (objective.kind == ObjectiveKind::CLM && !attention.causal) {
    fail("attention.causal", "causal LM objective requires causal attention");
  }
  if (!(init_std > 0.0)) fail("init_std", "must be > 0");
  if (!(ln_eps > 0.0)) fail("ln_eps", "must be > 0");
  try {
    attention.validate();
  } catch (const ConfigError& e) {
    fail("attention", e.what());
  }
}

std::vector<NamedParam> ModelParams::named_parameters() const {
  std::vector<NamedParam> out;
  auto push = [&](std::string name, const Tensor& t, ParamKind kind, bool head = false) {
    if (t.defined()) out.push_back({std::move(name), t, kind, head});
  };
  auto push_linear = [&](const std::string& name, const Linear& l, bool head = false) {
    push(name + ".weight", l.weight, ParamKind::Weight, head);
    push(name + ".bias", l.bias, ParamKind::Bias, head);
  };
  auto push_ln = [&](const std::string& name, const LayerNormParams& l) {
    push(name + ".gamma", l.gamma, ParamKind::LnGamma);
    push(name + ".beta", l.beta, ParamKind::LnBeta);
  };
  push("embed.token", token_embedding, ParamKind::Embedding);
  push("embed.position", position_embedding, ParamKind::Embedding);
  push_ln("embed.ln", embed_ln);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = "layer" + std::to_string(i) + ".";
    const BlockParams& b = blocks[i];
    push_linear(p + "attn.query", b.attn.query);
    push_linear(p + "attn.key", b.attn.key);
    push_linear(p + "attn.value", b.attn.value);
    push_linear(p + "attn.output", b.attn.output);
    if (b.attn.gate) {
      push(p + "attn.gate.w1", b.attn.gate->w1, ParamKind::GateWeight);
      push(p + "attn.gate.b1", b.attn.gate->b1, ParamKind::GateBias);
      push(p + "attn.gate.w2", b.attn.gate->w2, ParamKind::GateWeight);
      push(p + "attn.gate.b2", b.attn.gate->b2, ParamKind::GateBias);
    }
    push_ln(p + "ln1", b.ln1);
    push_ln(p + "ln2", b.ln2);
    push_linear(p + "ffn.fc1", b.fc1);
    push_linear(p + "ffn.fc2", b.fc2);
  }
  push_ln("final_ln", final_ln);
  push_linear("lm_head", lm_head, true);
  return out;
}

ModelParams ModelParams::clone() const {
  ModelParams c;
  c.token_embedding = clone_tensor(token_embedding);
  c.position_embedding = clone_tensor(position_embedding);
  c.embed_ln = clone_ln(embed_ln);
  for (const auto& b : blocks) {
    BlockParams nb;
    nb.attn.query = clone_linear(b.attn.query);
    nb.attn.key = clone_linear(b.attn.key);
    nb.attn.value = clone_linear(b.attn.value);
    nb.attn.output = clone_linear(b.attn.output);
    if (b.attn.gate) {
      nb.attn.gate = attention::GateParams{clone_tensor(b.attn.gate->w1),
                                           clone_tensor(b.attn.gate->b1),
                                           clone_tensor(b.attn.gate->w2),
                                           clone_tensor(b.attn.gate->b2)};
    }
    nb.ln1 = clone_ln(b.ln1);
    nb.ln2 = clone_ln(b.ln2);
    nb.fc1 = clone_linear(b.fc1);
    nb.fc2 = clone_linear(b.fc2);
    c.blocks.push_back(std::move(nb));
  }
  c.final_ln = clone_ln(final_ln);
  c.lm_head = clone_linear(lm_head);
  return c;
}

void ModelParams::zero_grad() const {
  for (auto& p : named_parameters()) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : named_parameters()) n += p.tensor.numel();
  return n;
}

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = cfg.d_model();
  const double sd = cfg.init_std;
  ModelParams p;
  p.token_embedding = normal_parameter({cfg.vocab_size, d}, sd, rng);
  p.position_embedding = normal_parameter({cfg.max_seq_len, d}, sd, rng);
  if (cfg.ln_placement == LnPlacement::PostLN) p.embed_ln = init_ln(d);
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    BlockParams b;
    b.attn = attention::init_attention(cfg.attention, sd, rng);
    b.ln1 = init_ln(d);
    b.ln2 = init_ln(d);
    b.fc1 = init_linear(d, cfg.d_ffn, sd, rng);
    b.fc2 = init_linear(cfg.d_ffn, d, sd, rng);
    p.blocks.push_back(std::move(b));
  }
  if (cfg.ln_placement == LnPlacement::PreLN) p.final_ln = init_ln(d);
  p.lm_head = init_linear(d, cfg.vocab_size, sd, rng);
  return p;
}

ForwardResult forward(const ModelParams& params, const ModelConfig& cfg,
                      std::span<const std::int32_t> tokens, const ForwardOptions& opts) {
  const std::size_t t = tokens.size();
  if (t == 0 || t > cfg.max_seq_len) {
    throw ContractError("model forward: sequence length " + std::to_string(t) +
                        " outside [1, " + std::to_string(cfg.max_seq_len) + "]");
  }
  if (params.blocks.size() != cfg.n_layers) {
    throw ContractError("model forward: parameters hold " +
                        std::to_string(params.blocks.size()) + " layers, config " +
                        std::to_string(cfg.n_layers));
  }
  for (std::int32_t id : tokens) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
      throw ContractError("model forward: token id " + std::to_string(id) +
                          " outside vocabulary");
    }
  }
  const SiteTap root{opts.observer, ""};
  std::mt19937_64 rng(opts.dropout_seed);
  const double p_drop = opts.train ? cfg.dropout_p : 0.0;
  const bool post_ln = cfg.ln_placement == LnPlacement::PostLN;

  std::vector<std::int32_t> positions(t);
  for (std::size_t i = 0; i < t; ++i) positions[i] = static_cast<std::int32_t>(i);
  Tensor h = add(embedding_lookup(params.token_embedding, tokens),
                 embedding_lookup(params.position_embedding, positions));
  h = root("embedding", h);
  if (post_ln) h = root("embedding_ln", apply_ln(h, params.embed_ln, cfg.ln_eps));
  h = dropout(h, p_drop, rng);

  ForwardResult result;
  result.layers.reserve(cfg.n_layers);
  for (std::size_t li = 0; li < cfg.n_layers; ++li) {
    const BlockParams& b = params.blocks[li];
    const SiteTap tap = root.nested("layer" + std::to_string(li) + ".");
    LayerActivations acts;

    Tensor attn_in = post_ln ? h : tap("ln1", apply_ln(h, b.ln1, cfg.ln_eps));
    auto attn = attention::attention_forward(attn_in, cfg.attention, b.attn, opts.mask,
                                             tap.nested("attn."), opts.capture_trace);
    acts.attn_sublayer = attn.output;
    acts.trace = std::move(attn.trace);
    Tensor r1 = tap("attn_residual", add(h, dropout(attn.output, p_drop, rng)));
    Tensor ffn_in;
    if (post_ln) {
      r1 = tap("ln1", apply_ln(r1, b.ln1, cfg.ln_eps));
      ffn_in = r1;
    } else {
      ffn_in = tap("ln2", apply_ln(r1, b.ln2, cfg.ln_eps));
    }
    acts.attn_output = r1;

    Tensor hidden = tap("ffn_hidden", linear(ffn_in, b.fc1));
    Tensor act = tap("ffn_act", gelu(hidden));
    Tensor f = tap("ffn_out", linear(act, b.fc2));
    acts.ffn_output = f;
    Tensor r2 = tap("ffn_residual", add(r1, dropout(f, p_drop, rng)));
    h = post_ln ? tap("ln2", apply_ln(r2, b.ln2, cfg.ln_eps)) : r2;
    acts.block_output = h;
    result.layers.push_back(std::move(acts));
  }
  if (!post_ln) h = root("final_ln", apply_ln(h, params.final_ln, cfg.ln_eps));
  result.logits = linear(h, params.lm_head);
  for (double v : result.logits.data()) {
    if (!std::isfinite(v)) throw NumericError("model forward: non-finite logits");
  }
  return result;
}

Tensor loss(const Tensor& logits, std::span<const std::int32_t> targets, Reduction reduction) {
  return cross_entropy(logits, targets, reduction);
}

Tensor activation_regularizer(const std::vector<LayerActivations>& layers, double coefficient) {
  if (!(coefficient >= 0.0)) throw ConfigError("activation regularizer: coefficient < 0");
  Tensor total = Tensor::scalar(0.0);
  if (coefficient == 0.0) return total;
  for (const auto& l : layers) total = add(total, mean(mul(l.ffn_output, l.ffn_output)));
  return scale(total, coefficient);
}

double perplexity(double mean_nll) { return std::exp(mean_nll); }

double evaluate_nll(const ModelParams& params, const ModelConfig& cfg,
                    std::span<const Example> examples, ActivationObserver* observer) {
  NoGradGuard no_grad;
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& ex : examples) {
    const auto n = static_cast<std::size_t>(
        std::count_if(ex.targets.begin(), ex.targets.end(),
                      [](std::int32_t t) { return t != kIgnoreIndex; }));
    if (n == 0) continue;
    ForwardOptions opts;
    opts.observer = observer;
    const auto out = forward(params, cfg, ex.inputs, opts);
    total += loss(out.logits, ex.targets, Reduction::Sum).item();
    count += n;
  }
  if (count == 0) throw ContractError("evaluate_nll: no supervised positions in the set");
  return total / static_cast<double>(count);
}

}  // namespace olab::model
