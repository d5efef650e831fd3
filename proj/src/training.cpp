#include "olab/training.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "olab/diagnostics.hpp"
#include "olab/errors.hpp"

namespace olab::train {

namespace {

void require(bool ok, const std::string& field, const std::string& why) {
  if (!ok) throw ConfigError("train." + field + ": " + why);
}

std::string fmt(double v) {
  if (std::isnan(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

// Common English words, most frequent first; Zipf weights follow the order.
constexpr std::array<const char*, 120> kLexicon = {
    "the",    "of",     "and",    "to",     "a",      "in",     "is",     "that",   "it",
    "was",    "for",    "on",     "are",    "as",     "with",   "his",    "they",   "at",
    "be",     "this",   "from",   "have",   "or",     "by",     "one",    "had",    "not",
    "but",    "what",   "all",    "were",   "when",   "we",     "there",  "can",    "an",
    "your",   "which",  "their",  "said",   "if",     "do",     "will",   "each",   "about",
    "how",    "up",     "out",    "them",   "then",   "she",    "many",   "some",   "so",
    "these",  "would",  "other",  "into",   "has",    "more",   "her",    "two",    "like",
    "him",    "see",    "time",   "could",  "no",     "make",   "than",   "first",  "been",
    "its",    "who",    "now",    "people", "my",     "made",   "over",   "did",    "down",
    "only",   "way",    "find",   "use",    "may",    "water",  "long",   "little", "very",
    "after",  "words",  "called", "just",   "where",  "most",   "know",   "get",    "through",
    "back",   "much",   "before", "go",     "good",   "new",    "write",  "our",    "used",
    "me",     "man",    "too",    "any",    "day",    "same",   "right",  "look",   "think",
    "also",   "around", "another"};

std::size_t supervised_count(std::span<const std::int32_t> targets) {
  return static_cast<std::size_t>(
      std::count_if(targets.begin(), targets.end(), [](std::int32_t t) { return t != kIgnoreIndex; }));
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E019ULL;
  x ^= x >> 31;
  x *= 0xBF58476D1CE4E5B9ULL;
  x ^= x >> 29;
  return x;
}

void TrainConfig::validate() const {
  require(steps > 0, "steps", "must be positive");
  require(batch_size > 0, "batch_size", "must be positive");
  require(std::isfinite(max_lr) && max_lr > 0.0, "max_lr", "must be positive");
  require(warmup_steps <= steps, "warmup_steps", "must not exceed steps");
  require(std::isfinite(weight_decay) && weight_decay >= 0.0, "weight_decay",
          "must be non-negative");
  require(std::isfinite(grad_clip_norm) && grad_clip_norm > 0.0, "grad_clip_norm",
          "must be positive");
  require(beta1 > 0.0 && beta1 < 1.0, "beta1", "must lie in (0, 1)");
  require(beta2 > 0.0 && beta2 < 1.0, "beta2", "must lie in (0, 1)");
  require(adam_eps > 0.0, "adam_eps", "must be positive");
  require(mlm_mask_prob > 0.0 && mlm_mask_prob < 1.0, "mlm_mask_prob", "must lie in (0, 1)");
  require(std::isfinite(act_reg_coefficient) && act_reg_coefficient >= 0.0,
          "act_reg_coefficient", "must be non-negative");
  require(eval_every > 0, "eval_every", "must be positive");
  require(eval_sequences > 0, "eval_sequences", "must be positive");
}

// ---------------------------------------------------------------------------
// Data

CorpusDataset::CorpusDataset(std::vector<std::int32_t> ids, std::size_t seq_len)
    : ids_(std::move(ids)), seq_len_(seq_len) {
  if (seq_len_ == 0) throw ConfigError("data.seq_len: must be positive");
  for (std::int32_t id : ids_) {
    if (id < 0 || id >= static_cast<std::int32_t>(kByteVocab)) {
      throw ContractError("corpus: token id " + std::to_string(id) + " outside the vocabulary");
    }
  }
  if (ids_.size() < seq_len_ + 1) {
    throw ContractError("corpus: " + std::to_string(ids_.size()) +
                        " tokens is too short for windows of " + std::to_string(seq_len_));
  }
}

CorpusDataset CorpusDataset::from_text(std::string_view text, std::size_t seq_len) {
  std::vector<std::int32_t> ids(text.size());
  std::transform(text.begin(), text.end(), ids.begin(),
                 [](char c) { return static_cast<std::int32_t>(static_cast<unsigned char>(c)); });
  return CorpusDataset(std::move(ids), seq_len);
}

CorpusDataset CorpusDataset::load(const std::filesystem::path& path, std::size_t seq_len) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read corpus " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  if (in.bad()) throw IoError("read failed: " + path.string());
  return from_text(s.str(), seq_len);
}

std::vector<std::int32_t> CorpusDataset::sample(std::mt19937_64& rng, std::size_t len) const {
  if (len == 0) len = seq_len_;
  if (len > ids_.size()) throw ContractError("corpus: window longer than the corpus");
  std::uniform_int_distribution<std::size_t> start(0, ids_.size() - len);
  const std::size_t s = start(rng);
  return {ids_.begin() + static_cast<std::ptrdiff_t>(s),
          ids_.begin() + static_cast<std::ptrdiff_t>(s + len)};
}

std::vector<std::vector<std::int32_t>> CorpusDataset::windows(std::size_t n,
                                                              std::size_t len) const {
  if (len == 0) len = seq_len_;
  if (len > ids_.size()) throw ContractError("corpus: window longer than the corpus");
  std::vector<std::vector<std::int32_t>> out;
  const std::size_t span = ids_.size() - len;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t s = n > 1 ? span * i / (n - 1) : 0;
    out.emplace_back(ids_.begin() + static_cast<std::ptrdiff_t>(s),
                     ids_.begin() + static_cast<std::ptrdiff_t>(s + len));
  }
  return out;
}

std::pair<CorpusDataset, CorpusDataset> CorpusDataset::split(double eval_fraction) const {
  if (!(eval_fraction > 0.0 && eval_fraction < 1.0)) {
    throw ConfigError("data.eval_fraction: must lie in (0, 1)");
  }
  const auto cut = static_cast<std::size_t>(
      std::floor(static_cast<double>(ids_.size()) * (1.0 - eval_fraction)));
  std::vector<std::int32_t> head(ids_.begin(), ids_.begin() + static_cast<std::ptrdiff_t>(cut));
  std::vector<std::int32_t> tail(ids_.begin() + static_cast<std::ptrdiff_t>(cut), ids_.end());
  return {CorpusDataset(std::move(head), seq_len_), CorpusDataset(std::move(tail), seq_len_)};
}

std::string synthetic_corpus(std::size_t n_bytes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<double> weights(kLexicon.size());
  for (std::size_t r = 0; r < weights.size(); ++r) weights[r] = 1.0 / static_cast<double>(r + 1);
  std::discrete_distribution<std::size_t> word(weights.begin(), weights.end());
  std::uniform_int_distribution<int> sentence_len(4, 14);
  std::uniform_int_distribution<int> roll(0, 99);

  std::string text;
  text.reserve(n_bytes + 128);
  int sentences = 0;
  while (text.size() < n_bytes) {
    const int n = sentence_len(rng);
    for (int w = 0; w < n; ++w) {
      std::string token = kLexicon[word(rng)];
      if (w == 0) token[0] = static_cast<char>(token[0] - 'a' + 'A');
      text += token;
      if (w + 1 < n) text += roll(rng) < 8 ? ", " : " ";
    }
    text += roll(rng) < 10 ? "? " : ". ";
    if (++sentences % 6 == 0 && roll(rng) < 50) text.back() = '\n';
  }
  text.resize(n_bytes);
  return text;
}

model::Example mask_sequence(std::span<const std::int32_t> seq, std::mt19937_64& rng,
                             double mask_prob) {
  if (seq.empty()) throw ContractError("mask_sequence: empty sequence");
  std::bernoulli_distribution coin(mask_prob);
  model::Example ex{std::vector<std::int32_t>(seq.begin(), seq.end()),
                    std::vector<std::int32_t>(seq.size(), kIgnoreIndex)};
  std::size_t masked = 0;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (coin(rng)) {
      ex.inputs[i] = kMaskId;
      ex.targets[i] = seq[i];
      ++masked;
    }
  }
  if (masked == 0) {
    std::uniform_int_distribution<std::size_t> pos(0, seq.size() - 1);
    const std::size_t i = pos(rng);
    ex.inputs[i] = kMaskId;
    ex.targets[i] = seq[i];
  }
  return ex;
}

std::vector<model::Example> make_mlm_batch(const CorpusDataset& data, std::mt19937_64& rng,
                                           double mask_prob, std::size_t batch_size) {
  std::vector<model::Example> batch;
  batch.reserve(batch_size);
  for (std::size_t b = 0; b < batch_size; ++b) {
    batch.push_back(mask_sequence(data.sample(rng), rng, mask_prob));
  }
  return batch;
}

namespace {

model::Example shift(const std::vector<std::int32_t>& window) {
  return {std::vector<std::int32_t>(window.begin(), window.end() - 1),
          std::vector<std::int32_t>(window.begin() + 1, window.end())};
}

}  // namespace

std::vector<model::Example> make_clm_batch(const CorpusDataset& data, std::mt19937_64& rng,
                                           std::size_t batch_size) {
  std::vector<model::Example> batch;
  batch.reserve(batch_size);
  for (std::size_t b = 0; b < batch_size; ++b) {
    batch.push_back(shift(data.sample(rng, data.seq_len() + 1)));
  }
  return batch;
}

std::vector<model::Example> make_eval_set(const CorpusDataset& data,
                                          const model::ModelConfig& cfg, std::size_t n,
                                          double mask_prob, std::uint64_t seed) {
  std::vector<model::Example> out;
  if (cfg.objective.kind == model::ObjectiveKind::CLM) {
    for (const auto& w : data.windows(n, data.seq_len() + 1)) out.push_back(shift(w));
    return out;
  }
  std::mt19937_64 rng(seed);
  for (const auto& w : data.windows(n)) out.push_back(mask_sequence(w, rng, mask_prob));
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer

bool decays(model::ParamKind kind, bool decay_ln_gamma) {
  switch (kind) {
    case model::ParamKind::Weight:
    case model::ParamKind::Embedding:
    case model::ParamKind::GateWeight:
      return true;
    case model::ParamKind::LnGamma:
      return decay_ln_gamma;
    case model::ParamKind::Bias:
    case model::ParamKind::LnBeta:
    case model::ParamKind::GateBias:
      return false;
  }
  return false;
}

void adamw_step(std::span<const model::NamedParam> params, AdamState& state,
                const AdamWOptions& opts) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor.numel(), 0.0);
      state.v.emplace_back(p.tensor.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) {
    throw ContractError("adamw_step: optimizer state does not match the parameter list");
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(opts.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(opts.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].tensor;
    auto data = t.mutable_data();
    auto grad = t.mutable_grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != data.size()) {
      throw ContractError("adamw_step: state size mismatch for " + params[i].name);
    }
    const double decay =
        decays(params[i].kind, opts.decay_ln_gamma) ? opts.lr * opts.weight_decay : 0.0;
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = grad[j];
      m[j] = opts.beta1 * m[j] + (1.0 - opts.beta1) * g;
      v[j] = opts.beta2 * v[j] + (1.0 - opts.beta2) * g * g;
      const double m_hat = m[j] / c1;
      const double v_hat = v[j] / c2;
      data[j] -= decay * data[j];
      data[j] -= opts.lr * m_hat / (std::sqrt(v_hat) + opts.eps);
    }
  }
}

double lr_at(std::size_t step, const TrainConfig& cfg) {
  if (step < cfg.warmup_steps) {
    return cfg.max_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  if (cfg.schedule == Schedule::Constant) return cfg.max_lr;
  if (step >= cfg.steps) return 0.0;
  return cfg.max_lr * static_cast<double>(cfg.steps - step) /
         static_cast<double>(cfg.steps - cfg.warmup_steps);
}

double clip_grad_norm(std::span<const model::NamedParam> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double g : Tensor(p.tensor).mutable_grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (const auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      for (double& g : Tensor(p.tensor).mutable_grad()) g *= factor;
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Loop

std::string metrics_csv(std::span<const MetricsRow> rows) {
  std::ostringstream out;
  out << "step,lr,train_loss,eval_ppl,max_inf_norm,avg_kurtosis,grad_norm\n";
  for (const auto& r : rows) {
    out << r.step << ',' << fmt(r.lr) << ',' << fmt(r.train_loss) << ',' << fmt(r.eval_ppl)
        << ',' << fmt(r.max_inf_norm) << ',' << fmt(r.avg_kurtosis) << ',' << fmt(r.grad_norm)
        << '\n';
  }
  return out.str();
}

EvalMetrics evaluate(const model::ModelParams& params, const model::ModelConfig& cfg,
                     std::span<const model::Example> eval, model::MeasurementPoint point) {
  if (eval.empty()) throw ContractError("evaluate: empty evaluation set");
  NoGradGuard no_grad;
  double nll_sum = 0.0;
  std::size_t supervised = 0;
  double kurt_sum = 0.0;
  std::vector<std::vector<Tensor>> measured;
  for (const auto& ex : eval) {
    const auto out = model::forward(params, cfg, ex.inputs);
    const std::size_t n = supervised_count(ex.targets);
    if (n > 0) {
      nll_sum += model::loss(out.logits, ex.targets, Reduction::Sum).item();
      supervised += n;
    }
    std::vector<Tensor> layers;
    double seq_kurt = 0.0;
    for (const auto& l : out.layers) {
      seq_kurt += diag::kurtosis(l.measured(point));
      layers.push_back(l.measured(point));
    }
    kurt_sum += seq_kurt / static_cast<double>(out.layers.size());
    measured.push_back(std::move(layers));
  }
  if (supervised == 0) throw ContractError("evaluate: no supervised positions");
  EvalMetrics m;
  m.nll = nll_sum / static_cast<double>(supervised);
  m.ppl = model::perplexity(m.nll);
  m.max_inf_norm = diag::max_inf_norm(measured);
  m.avg_kurtosis = kurt_sum / static_cast<double>(eval.size());
  return m;
}

const MetricsRow& TrainResult::first_eval() const {
  for (const auto& r : history)
    if (r.has_eval()) return r;
  throw ContractError("training history has no evaluation");
}

const MetricsRow& TrainResult::last_eval() const {
  for (auto it = history.rbegin(); it != history.rend(); ++it)
    if (it->has_eval()) return *it;
  throw ContractError("training history has no evaluation");
}

TrainResult train(const model::ModelConfig& mcfg, const TrainConfig& tcfg,
                  const CorpusDataset& data, std::span<const model::Example> eval,
                  const model::ModelParams* init, const ProgressFn& progress) {
  mcfg.validate();
  tcfg.validate();
  if (data.seq_len() > mcfg.max_seq_len) {
    throw ConfigError("data.seq_len: " + std::to_string(data.seq_len()) +
                      " exceeds model.max_seq_len");
  }
  TrainResult result{init ? init->clone() : model::init_params(mcfg, tcfg.seed), {}};
  const auto params = result.params.named_parameters();
  for (const auto& p : params) Tensor(p.tensor).set_requires_grad(true);

  std::mt19937_64 data_rng(mix_seed(tcfg.seed, 1));
  AdamState adam;
  const AdamWOptions base{tcfg.max_lr, tcfg.weight_decay, tcfg.beta1,
                          tcfg.beta2,  tcfg.adam_eps,     tcfg.decay_ln_gamma};

  auto record_eval = [&](MetricsRow& row) {
    if (eval.empty()) return;
    const auto m = evaluate(result.params, mcfg, eval);
    row.eval_ppl = m.ppl;
    row.max_inf_norm = m.max_inf_norm;
    row.avg_kurtosis = m.avg_kurtosis;
  };
  auto emit = [&](MetricsRow row) {
    result.history.push_back(row);
    if (progress) progress(result.history.back());
  };

  MetricsRow initial;
  record_eval(initial);
  emit(initial);

  const bool mlm = mcfg.objective.kind == model::ObjectiveKind::MLM;
  for (std::size_t step = 1; step <= tcfg.steps; ++step) {
    const auto batch = mlm ? make_mlm_batch(data, data_rng, tcfg.mlm_mask_prob, tcfg.batch_size)
                           : make_clm_batch(data, data_rng, tcfg.batch_size);
    result.params.zero_grad();
    MetricsRow row;
    row.step = step;
    row.lr = lr_at(step, tcfg);
    try {
      Tape tape;
      Tensor ce_sum;
      Tensor reg_sum;
      std::size_t supervised = 0;
      for (std::size_t b = 0; b < batch.size(); ++b) {
        model::ForwardOptions opts;
        opts.train = true;
        opts.dropout_seed = mix_seed(mix_seed(tcfg.seed, step), b);
        const auto out = model::forward(result.params, mcfg, batch[b].inputs, opts);
        Tensor ce = model::loss(out.logits, batch[b].targets, Reduction::Sum);
        ce_sum = ce_sum.defined() ? add(ce_sum, ce) : ce;
        supervised += supervised_count(batch[b].targets);
        if (tcfg.act_reg_coefficient > 0.0) {
          Tensor reg = model::activation_regularizer(out.layers, tcfg.act_reg_coefficient);
          reg_sum = reg_sum.defined() ? add(reg_sum, reg) : reg;
        }
      }
      Tensor objective = scale(ce_sum, 1.0 / static_cast<double>(supervised));
      row.train_loss = objective.item();
      if (reg_sum.defined()) {
        objective = add(objective, scale(reg_sum, 1.0 / static_cast<double>(batch.size())));
      }
      const double value = objective.item();
      if (std::isfinite(value)) tape.backward(objective);
      row.grad_norm = clip_grad_norm(params, tcfg.grad_clip_norm);
      if (!std::isfinite(value) || !std::isfinite(row.grad_norm)) {
        char msg[160];
        std::snprintf(msg, sizeof(msg), "training diverged at step %zu: loss=%g grad_norm=%g",
                      step, value, row.grad_norm);
        throw NumericError(msg);
      }
    } catch (const NumericError& e) {
      if (std::string_view(e.what()).starts_with("training diverged")) throw;
      throw NumericError("training diverged at step " + std::to_string(step) +
                         ": loss=nan grad_norm=nan (" + e.what() + ")");
    }
    AdamWOptions opts = base;
    opts.lr = row.lr;
    adamw_step(params, adam, opts);
    if (step % tcfg.eval_every == 0 || step == tcfg.steps) record_eval(row);
    emit(row);
  }
  result.params.zero_grad();
  return result;
}

// ---------------------------------------------------------------------------
// Gate fine-tuning

model::ModelConfig gated_config(const model::ModelConfig& vanilla, attention::GatingDesign design,
                                std::size_t n_hid) {
  if (!std::holds_alternative<attention::Vanilla>(vanilla.attention.variant)) {
    throw ContractError("gate fine-tuning starts from a vanilla-attention model");
  }
  model::ModelConfig gated = vanilla;
  attention::GatingConfig g;
  g.design = design;
  g.n_hid = n_hid;
  g.b_init = 0.0;
  g.gate_scale = 2.0;
  gated.attention.variant = g;
  gated.validate();
  return gated;
}

model::ModelParams add_gates(const model::ModelParams& vanilla, const model::ModelConfig& gated,
                             std::uint64_t seed, bool zero_gate_weights) {
  const auto* g = std::get_if<attention::GatingConfig>(&gated.attention.variant);
  if (!g) throw ContractError("add_gates: target config is not gated");
  if (vanilla.blocks.size() != gated.n_layers ||
      vanilla.token_embedding.dim(1) != gated.d_model()) {
    throw ContractError("add_gates: checkpoint geometry does not match the config");
  }
  model::ModelParams out = vanilla.clone();
  std::mt19937_64 rng(mix_seed(seed, 7));
  for (auto& block : out.blocks) {
    if (block.attn.gate) throw ContractError("add_gates: model already has gates");
    auto gate = attention::init_gate(*g, gated.attention.n_heads, gated.d_model(), rng);
    if (zero_gate_weights) {
      // Zero only the layer producing the logit so pi = sigmoid(b_init) while
      // the earlier MLP layer still receives gradients.
      Tensor last = g->design == attention::GatingDesign::Mlp ? gate.w2 : gate.w1;
      auto d = last.mutable_data();
      std::fill(d.begin(), d.end(), 0.0);
    }
    block.attn.gate = gate;
  }
  return out;
}

FinetuneResult finetune_with_gates(const model::ModelParams& pretrained,
                                   const model::ModelConfig& vanilla_cfg,
                                   attention::GatingDesign design, const TrainConfig& tcfg,
                                   const CorpusDataset& data, std::span<const model::Example> eval,
                                   bool zero_gate_weights) {
  if (!(tcfg.act_reg_coefficient > 0.0)) {
    throw ConfigError("train.act_reg_coefficient: gate fine-tuning needs a positive coefficient");
  }
  FinetuneResult r{gated_config(vanilla_cfg, design), {}};
  const auto params = add_gates(pretrained, r.config, tcfg.seed, zero_gate_weights);
  r.run = train(r.config, tcfg, data, eval, &params);
  return r;
}

// ---------------------------------------------------------------------------
// Presets

Preset preset(const std::string& name) {
  Preset p;
  if (name == "toy") {
    p.model.vocab_size = kByteVocab;
    p.model.max_seq_len = 64;
    p.model.n_layers = 2;
    p.model.d_ffn = 256;
    p.model.attention = {64, 4, attention::Vanilla{}, false};
    p.train.steps = 5000;
    p.train.batch_size = 8;
    p.train.max_lr = 1e-3;
    p.train.warmup_steps = 100;
    p.train.eval_every = 250;
    return p;
  }
  if (name == "bert6l-mini") {
    p.model.vocab_size = kByteVocab;
    p.model.max_seq_len = 128;
    p.model.n_layers = 6;
    p.model.d_ffn = 512;
    p.model.attention = {128, 4, attention::Vanilla{}, false};
    p.train.steps = 10000;
    p.train.batch_size = 16;
    p.train.max_lr = 5e-4;
    p.train.warmup_steps = 500;
    p.train.eval_every = 500;
    return p;
  }
  throw ConfigError("preset: unknown name '" + name + "' (expected toy or bert6l-mini)");
}

}  // namespace olab::train
