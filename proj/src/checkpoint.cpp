#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "json_reader.hpp"
#include "olab/errors.hpp"
#include "olab/model.hpp"

namespace olab::model {

using nlohmann::json;
using detail::ObjectReader;

namespace {

const char* placement_name(LnPlacement p) { return p == LnPlacement::PreLN ? "pre_ln" : "post_ln"; }

const char* design_name(attention::GatingDesign d) {
  switch (d) {
    case attention::GatingDesign::Linear:
      return "linear";
    case attention::GatingDesign::Mlp:
      return "mlp";
    case attention::GatingDesign::AllHeadsLinear:
      return "all_heads_linear";
  }
  return "linear";
}

json variant_to_json(const attention::AttentionVariant& v) {
  if (const auto* c = std::get_if<attention::ClippedSoftmaxConfig>(&v)) {
    json j{{"type", "clipped"}, {"zeta", c->zeta}};
    if (c->mode == attention::ClippedSoftmaxConfig::GammaMode::Alpha) {
      j["alpha"] = c->alpha;
    } else {
      j["gamma"] = c->gamma;
    }
    return j;
  }
  if (const auto* g = std::get_if<attention::GatingConfig>(&v)) {
    json j{{"type", "gated"},
           {"design", design_name(g->design)},
           {"b_init", g->b_init},
           {"gate_scale", g->gate_scale}};
    if (g->design == attention::GatingDesign::Mlp) j["n_hid"] = g->n_hid;
    return j;
  }
  return json{{"type", "vanilla"}};
}

attention::AttentionVariant variant_from_json(const json& j, const std::string& path) {
  ObjectReader r(j, path);
  std::string type = "vanilla";
  r.get("type", type);
  attention::AttentionVariant out = attention::Vanilla{};
  if (type == "vanilla") {
  } else if (type == "clipped") {
    if (r.has("gamma") && r.has("alpha")) {
      throw ConfigError(path + ": give either gamma or alpha, not both");
    }
    attention::ClippedSoftmaxConfig c;
    r.get("zeta", c.zeta);
    if (r.has("alpha")) {
      c.mode = attention::ClippedSoftmaxConfig::GammaMode::Alpha;
      r.get("alpha", c.alpha);
      if (!(c.alpha > 0.0)) throw ConfigError(r.field("alpha") + ": must be > 0");
    } else {
      r.get("gamma", c.gamma);
      if (!(c.gamma <= 0.0)) throw ConfigError(r.field("gamma") + ": must be <= 0");
    }
    if (!(c.zeta >= 1.0)) throw ConfigError(r.field("zeta") + ": must be >= 1");
    out = c;
  } else if (type == "gated") {
    attention::GatingConfig g;
    std::string design = "linear";
    r.get("design", design);
    if (design == "linear") {
      g.design = attention::GatingDesign::Linear;
    } else if (design == "mlp") {
      g.design = attention::GatingDesign::Mlp;
    } else if (design == "all_heads_linear") {
      g.design = attention::GatingDesign::AllHeadsLinear;
    } else {
      throw ConfigError(r.field("design") + ": unknown gate design '" + design + "'");
    }
    r.get("n_hid", g.n_hid);
    if (r.has("b_init") && r.has("pi_init")) {
      throw ConfigError(path + ": give either b_init or pi_init, not both");
    }
    r.get("b_init", g.b_init);
    if (r.has("pi_init")) {
      double pi = 0.5;
      r.get("pi_init", pi);
      try {
        g.b_init = attention::bias_from_pi(pi);
      } catch (const ConfigError&) {
        throw ConfigError(r.field("pi_init") + ": must lie in (0, 1)");
      }
    }
    r.get("gate_scale", g.gate_scale);
    if (g.design == attention::GatingDesign::Mlp && g.n_hid < 1) {
      throw ConfigError(r.field("n_hid") + ": must be >= 1");
    }
    if (!(g.gate_scale > 0.0)) throw ConfigError(r.field("gate_scale") + ": must be > 0");
    out = g;
  } else {
    throw ConfigError(r.field("type") + ": unknown attention variant '" + type + "'");
  }
  r.finish();
  return out;
}

// --- binary container ------------------------------------------------------

constexpr char kMagic[8] = {'O', 'L', 'A', 'B', 'C', 'K', 'P', 'T'};

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename T>
void put(std::string& buf, T value) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  char raw[sizeof(T)];
  std::memcpy(raw, &value, sizeof(T));
  buf.append(raw, sizeof(T));
}

class Cursor {
 public:
  Cursor(const std::string& buf, std::size_t end) : buf_(buf), end_(end) {}

  template <typename T>
  T take() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string take_bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return end_ - pos_; }

 private:
  void need(std::size_t n) const {
    if (n > end_ - pos_) throw CheckpointError("checkpoint: truncated file");
  }
  const std::string& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace

json to_json(const ModelConfig& cfg) {
  json obj{{"kind", cfg.objective.kind == ObjectiveKind::MLM ? "mlm" : "clm"}};
  if (cfg.objective.kind == ObjectiveKind::MLM) obj["mask_prob"] = cfg.objective.mask_prob;
  return json{{"vocab_size", cfg.vocab_size},
              {"max_seq_len", cfg.max_seq_len},
              {"n_layers", cfg.n_layers},
              {"d_model", cfg.attention.d_model},
              {"n_heads", cfg.attention.n_heads},
              {"d_ffn", cfg.d_ffn},
              {"causal", cfg.attention.causal},
              {"attention", variant_to_json(cfg.attention.variant)},
              {"ln_placement", placement_name(cfg.ln_placement)},
              {"dropout_p", cfg.dropout_p},
              {"objective", obj},
              {"init_std", cfg.init_std},
              {"ln_eps", cfg.ln_eps}};
}

ModelConfig model_config_from_json(const json& j, const std::string& path) {
  ObjectReader r(j, path);
  ModelConfig cfg;
  r.get("vocab_size", cfg.vocab_size);
  r.get("max_seq_len", cfg.max_seq_len);
  r.get("n_layers", cfg.n_layers);
  r.get("d_model", cfg.attention.d_model);
  r.get("n_heads", cfg.attention.n_heads);
  r.get("d_ffn", cfg.d_ffn);
  r.get("causal", cfg.attention.causal);
  if (r.has("attention")) {
    cfg.attention.variant = variant_from_json(r.raw("attention"), r.field("attention"));
  }
  std::string placement = placement_name(cfg.ln_placement);
  r.get("ln_placement", placement);
  if (placement == "pre_ln") {
    cfg.ln_placement = LnPlacement::PreLN;
  } else if (placement == "post_ln") {
    cfg.ln_placement = LnPlacement::PostLN;
  } else {
    throw ConfigError(r.field("ln_placement") + ": expected pre_ln or post_ln");
  }
  r.get("dropout_p", cfg.dropout_p);
  if (r.has("objective")) {
    ObjectReader o(r.raw("objective"), r.field("objective"));
    std::string kind = "mlm";
    o.get("kind", kind);
    if (kind == "mlm") {
      cfg.objective.kind = ObjectiveKind::MLM;
    } else if (kind == "clm") {
      cfg.objective.kind = ObjectiveKind::CLM;
    } else {
      throw ConfigError(o.field("kind") + ": expected mlm or clm");
    }
    o.get("mask_prob", cfg.objective.mask_prob);
    o.finish();
  }
  r.get("init_std", cfg.init_std);
  r.get("ln_eps", cfg.ln_eps);
  r.finish();
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    // validate() reports "model.<field>"; rebase onto the caller's path.
    throw ConfigError(msg.rfind("model.", 0) == 0 ? path + msg.substr(5) : msg);
  }
  return cfg;
}

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg,
                     const ModelParams& params, const json& metadata) {
  const std::string header = json{{"config", to_json(cfg)}, {"metadata", metadata}}.dump();
  std::string buf(kMagic, sizeof(kMagic));
  put<std::uint32_t>(buf, kCheckpointVersion);
  put<std::uint64_t>(buf, header.size());
  buf += header;
  const auto named = params.named_parameters();
  put<std::uint64_t>(buf, named.size());
  for (const auto& p : named) {
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(p.name.size()));
    buf += p.name;
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(p.tensor.rank()));
    for (std::size_t e : p.tensor.shape()) put<std::uint64_t>(buf, e);
    for (double v : p.tensor.data()) put<double>(buf, v);
  }
  put<std::uint64_t>(buf, fnv1a(buf));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open " + path.string());
  const std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = " (" + path.string() + ")";
  if (buf.size() < sizeof(kMagic) + 4 + 8 || buf.compare(0, 8, kMagic, 8) != 0) {
    throw CheckpointError("checkpoint: bad magic" + where);
  }
  const std::size_t body = buf.size() - 8;
  std::uint64_t stored_hash;
  std::memcpy(&stored_hash, buf.data() + body, 8);
  if (fnv1a(buf.substr(0, body)) != stored_hash) {
    throw CheckpointError("checkpoint: checksum mismatch" + where);
  }

  Cursor cur(buf, body);
  cur.take_bytes(sizeof(kMagic));
  const auto version = cur.take<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version) + where);
  }
  Checkpoint ck;
  try {
    const json header = json::parse(cur.take_bytes(cur.take<std::uint64_t>()));
    ck.config = model_config_from_json(header.at("config"));
    ck.metadata = header.value("metadata", json::object());
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint: bad header: ") + e.what() + where);
  }

  ck.params = init_params(ck.config, 0);
  auto named = ck.params.named_parameters();
  const auto count = cur.take<std::uint64_t>();
  if (count != named.size()) {
    throw CheckpointError("checkpoint: expected " + std::to_string(named.size()) +
                          " tensors, found " + std::to_string(count) + where);
  }
  for (auto& p : named) {
    const std::string name = cur.take_bytes(cur.take<std::uint32_t>());
    if (name != p.name) {
      throw CheckpointError("checkpoint: expected tensor " + p.name + ", found " + name + where);
    }
    Shape shape(cur.take<std::uint32_t>());
    for (auto& e : shape) e = cur.take<std::uint64_t>();
    if (shape != p.tensor.shape()) {
      throw CheckpointError("checkpoint: tensor " + name + " has shape " + shape_str(shape) +
                            ", config implies " + shape_str(p.tensor.shape()) + where);
    }
    auto data = p.tensor.mutable_data();
    for (double& v : data) v = cur.take<double>();
  }
  if (cur.remaining() != 0) throw CheckpointError("checkpoint: trailing bytes" + where);
  return ck;
}

}  // namespace olab::model
