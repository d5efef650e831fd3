#include "olab/quantsim.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include "olab/errors.hpp"

namespace olab::quant {

namespace {

std::string number(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_number(const std::string& text, const std::string& what) {
  double v = 0.0;
  const char* end = text.data() + text.size();
  auto res = std::from_chars(text.data(), end, v);
  if (res.ec != std::errc() || res.ptr != end) {
    throw ConfigError("range estimator: bad " + what + " '" + text + "'");
  }
  return v;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

void check_finite(std::span<const double> batch) {
  for (double v : batch) {
    if (!std::isfinite(v)) throw NumericError("range estimation: non-finite calibration value");
  }
}

/// Linear-interpolation quantile of `v` (reordered in place).
double quantile(std::vector<double>& v, double q) {
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const double frac = pos - static_cast<double>(lo);
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(lo), v.end());
  const double a = v[lo];
  if (frac == 0.0 || lo + 1 >= v.size()) return a;
  const double b = *std::min_element(v.begin() + static_cast<std::ptrdiff_t>(lo) + 1, v.end());
  return a + frac * (b - a);
}

}  // namespace

std::int64_t QuantizerSpec::qmin() const {
  return symmetric ? -(std::int64_t{1} << (bits - 1)) : 0;
}

std::int64_t QuantizerSpec::qmax() const {
  return symmetric ? (std::int64_t{1} << (bits - 1)) - 1 : (std::int64_t{1} << bits) - 1;
}

double QuantizerSpec::grid_min() const {
  return scale * static_cast<double>(qmin() - zero_point);
}

double QuantizerSpec::grid_max() const {
  return scale * static_cast<double>(qmax() - zero_point);
}

void QuantizerSpec::validate() const {
  if (bits < 2 || bits > 16) {
    throw ConfigError("quantizer: bitwidth " + std::to_string(bits) + " outside [2, 16]");
  }
  if (!(scale > 0.0) || !std::isfinite(scale)) {
    throw ConfigError("quantizer: scale must be positive and finite");
  }
  if (symmetric && zero_point != 0) throw ConfigError("quantizer: symmetric needs z = 0");
  if (!symmetric && (zero_point < 0 || zero_point > qmax())) {
    throw ConfigError("quantizer: zero point " + std::to_string(zero_point) + " off the grid");
  }
}

double quantize(double x, const QuantizerSpec& spec) {
  if (!(spec.scale > 0.0)) throw ConfigError("quantizer: scale must be positive");
  if (std::isnan(x)) throw NumericError("quantize: NaN input");
  const double z = static_cast<double>(spec.zero_point);
  const double q = std::clamp(std::nearbyint(x / spec.scale) + z,
                              static_cast<double>(spec.qmin()),
                              static_cast<double>(spec.qmax()));
  return spec.scale * (q - z);
}

Tensor quantize(const Tensor& x, const QuantizerSpec& spec) {
  spec.validate();
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = quantize(in[i], spec);
  return Tensor::from(x.shape(), std::move(out));
}

std::int64_t grid_index(double x, const QuantizerSpec& spec) {
  return std::llround(x / spec.scale) + spec.zero_point;
}

QuantizerSpec spec_from_range(double lo, double hi, int bits, bool symmetric) {
  QuantizerSpec spec;
  spec.bits = bits;
  spec.symmetric = symmetric;
  if (bits < 2 || bits > 16) {
    throw ConfigError("quantizer: bitwidth " + std::to_string(bits) + " outside [2, 16]");
  }
  if (!std::isfinite(lo) || !std::isfinite(hi) || hi < lo) {
    throw ContractError("spec_from_range: invalid range [" + number(lo) + ", " + number(hi) +
                        "]");
  }
  if (lo == hi) {
    // c = s * (+-1) on a grid whose zero point sits mid-range.
    spec.scale = lo == 0.0 ? 1.0 : std::abs(lo);
    spec.zero_point = symmetric ? 0 : std::int64_t{1} << (bits - 1);
    return spec;
  }
  if (symmetric) {
    const double amax = std::max(std::abs(lo), std::abs(hi));
    spec.scale = amax / static_cast<double>(spec.qmax());
    spec.zero_point = 0;
    return spec;
  }
  lo = std::min(lo, 0.0);
  hi = std::max(hi, 0.0);
  const auto levels = static_cast<double>(spec.qmax());
  spec.scale = (hi - lo) / levels;
  spec.zero_point =
      static_cast<std::int64_t>(std::clamp(std::nearbyint(-lo / spec.scale), 0.0, levels));
  return spec;
}

double quantization_sse(std::span<const double> x, const QuantizerSpec& spec) {
  double sse = 0.0;
  for (double v : x) {
    const double e = v - quantize(v, spec);
    sse += e * e;
  }
  return sse;
}

// ---------------------------------------------------------------------------
// Estimators

RangeEstimator RangeEstimator::min_max() { return {}; }

RangeEstimator RangeEstimator::running_min_max(double momentum, std::size_t n_batches) {
  RangeEstimator e;
  e.kind = Kind::RunningMinMax;
  e.momentum = momentum;
  e.n_batches = n_batches;
  return e;
}

RangeEstimator RangeEstimator::percentile(double p, double momentum) {
  RangeEstimator e;
  e.kind = Kind::Percentile;
  e.p = p;
  e.momentum = momentum;
  return e;
}

RangeEstimator RangeEstimator::mse(std::size_t grid_size) {
  RangeEstimator e;
  e.kind = Kind::Mse;
  e.grid_size = grid_size;
  return e;
}

void RangeEstimator::validate() const {
  if ((kind == Kind::RunningMinMax || kind == Kind::Percentile) &&
      !(momentum > 0.0 && momentum < 1.0)) {
    throw ConfigError("range estimator: momentum must lie in (0, 1)");
  }
  if (kind == Kind::RunningMinMax && n_batches < 1) {
    throw ConfigError("range estimator: n_batches must be >= 1");
  }
  if (kind == Kind::Percentile && !(p > 0.5 && p <= 1.0)) {
    throw ConfigError("range estimator: percentile p must lie in (0.5, 1]");
  }
  if (kind == Kind::Mse && grid_size < 2) {
    throw ConfigError("range estimator: MSE grid needs >= 2 candidates");
  }
}

std::string RangeEstimator::label() const {
  switch (kind) {
    case Kind::MinMax:
      return "minmax";
    case Kind::RunningMinMax:
      return "running_minmax:" + number(momentum) + ":" + std::to_string(n_batches);
    case Kind::Percentile:
      return "percentile:" + number(p) + ":" + number(momentum);
    case Kind::Mse:
      return "mse:" + std::to_string(grid_size);
  }
  return "minmax";
}

RangeEstimator RangeEstimator::parse(const std::string& text) {
  const auto parts = split(text, ':');
  if (parts.empty()) throw ConfigError("range estimator: empty name");
  const std::string& name = parts[0];
  auto arg_count = [&](std::size_t max) {
    if (parts.size() - 1 > max) {
      throw ConfigError("range estimator: too many parameters in '" + text + "'");
    }
  };
  auto count_arg = [&](const std::string& s, const std::string& what) {
    const double v = parse_number(s, what);
    if (v < 1 || v != std::floor(v)) {
      throw ConfigError("range estimator: " + what + " must be a positive integer");
    }
    return static_cast<std::size_t>(v);
  };
  RangeEstimator e;
  if (name == "minmax") {
    arg_count(0);
  } else if (name == "running_minmax") {
    arg_count(2);
    e = running_min_max();
    if (parts.size() > 1) e.momentum = parse_number(parts[1], "momentum");
    if (parts.size() > 2) e.n_batches = count_arg(parts[2], "n_batches");
  } else if (name == "percentile") {
    arg_count(2);
    if (parts.size() < 2) throw ConfigError("range estimator: percentile needs p");
    e = percentile(parse_number(parts[1], "percentile"));
    if (parts.size() > 2) e.momentum = parse_number(parts[2], "momentum");
  } else if (name == "mse") {
    arg_count(1);
    e = mse();
    if (parts.size() > 1) e.grid_size = count_arg(parts[1], "grid size");
  } else {
    throw ConfigError("range estimator: unknown estimator '" + name + "'");
  }
  e.validate();
  return e;
}

RangeAccumulator::RangeAccumulator(RangeEstimator estimator, int bits, bool symmetric)
    : est_(estimator), bits_(bits), symmetric_(symmetric) {
  est_.validate();
  if (bits < 2 || bits > 16) {
    throw ConfigError("quantizer: bitwidth " + std::to_string(bits) + " outside [2, 16]");
  }
  if (est_.kind == RangeEstimator::Kind::Mse) {
    const auto g = static_cast<double>(est_.grid_size - 1);
    for (std::size_t k = 0; k < est_.grid_size; ++k) {
      factors_.push_back(1.0 - 0.99 * static_cast<double>(k) / g);
    }
  }
}

void RangeAccumulator::observe(std::span<const double> batch) {
  if (batch.empty()) throw ContractError("range estimation: empty batch");
  check_finite(batch);
  using Kind = RangeEstimator::Kind;
  if (est_.kind == Kind::RunningMinMax && seen_ >= est_.n_batches) return;

  Range b;
  if (est_.kind == Kind::Percentile) {
    std::vector<double> v(batch.begin(), batch.end());
    b.max = quantile(v, est_.p);
    b.min = quantile(v, 1.0 - est_.p);
  } else {
    const auto [mn, mx] = std::minmax_element(batch.begin(), batch.end());
    b = {*mn, *mx};
  }

  if (seen_ == 0) {
    range_ = b;
  } else if (est_.kind == Kind::RunningMinMax || est_.kind == Kind::Percentile) {
    const double m = est_.momentum;
    range_.min = m * range_.min + (1.0 - m) * b.min;
    range_.max = m * range_.max + (1.0 - m) * b.max;
  } else {
    range_.min = std::min(range_.min, b.min);
    range_.max = std::max(range_.max, b.max);
  }
  ++seen_;
}

bool RangeAccumulator::needs_second_pass() const {
  return est_.kind == RangeEstimator::Kind::Mse;
}

void RangeAccumulator::observe_second_pass(std::span<const double> batch) {
  if (!needs_second_pass()) return;
  if (seen_ == 0) throw ContractError("range estimation: second pass before the first");
  if (candidates_.empty()) {
    for (double f : factors_) {
      candidates_.push_back(spec_from_range(f * range_.min, f * range_.max, bits_, symmetric_));
    }
    sse_.assign(candidates_.size(), 0.0);
  }
  check_finite(batch);
  for (std::size_t k = 0; k < candidates_.size(); ++k) {
    sse_[k] += quantization_sse(batch, candidates_[k]);
  }
  ++second_seen_;
}

Range RangeAccumulator::finalize() const {
  if (seen_ == 0) throw ContractError("range estimation: empty calibration stream");
  if (!needs_second_pass()) return range_;
  if (second_seen_ == 0) throw ContractError("range estimation: MSE search needs a second pass");
  const auto best = static_cast<std::size_t>(
      std::min_element(sse_.begin(), sse_.end()) - sse_.begin());
  return {factors_[best] * range_.min, factors_[best] * range_.max};
}

Range estimate_range(std::span<const Tensor> batches, const RangeEstimator& estimator, int bits,
                     bool symmetric) {
  if (batches.empty()) throw ContractError("estimate_range: empty calibration stream");
  RangeAccumulator acc(estimator, bits, symmetric);
  for (const auto& b : batches) acc.observe(b.data());
  if (acc.needs_second_pass()) {
    for (const auto& b : batches) acc.observe_second_pass(b.data());
  }
  return acc.finalize();
}

// ---------------------------------------------------------------------------
// PTQ harness

void QuantConfig::validate() const {
  auto check_bits = [](int b, const char* what) {
    if (b != 0 && (b < 2 || b > 16)) {
      throw ConfigError(std::string("quant.") + what + ": must be 0 (off) or in [2, 16]");
    }
  };
  check_bits(w_bits, "w_bits");
  check_bits(a_bits, "a_bits");
  weight_estimator.validate();
  act_estimator.validate();
}

std::vector<std::string> QuantizedModel::quantized_sites() const {
  std::vector<std::string> out;
  for (const auto& [site, _] : act_specs) out.push_back(site);
  return out;
}

bool is_quantized_weight(const model::NamedParam& p) {
  using model::ParamKind;
  return !p.lm_head && (p.kind == ParamKind::Weight || p.kind == ParamKind::Embedding ||
                        p.kind == ParamKind::GateWeight);
}

namespace {

/// Gathers every site's values over one calibration batch, then hands the
/// batch to that site's accumulator.
class CalibrationObserver : public ActivationObserver {
 public:
  CalibrationObserver(const RangeEstimator& est, int bits) : est_(est), bits_(bits) {}

  Tensor observe(const std::string& site, const Tensor& x) override {
    auto data = x.data();
    if (second_pass_) {
      accumulators_.at(site).observe_second_pass(data);
    } else {
      auto& buf = pending_[site];
      buf.insert(buf.end(), data.begin(), data.end());
    }
    return x;
  }

  void end_batch() {
    for (auto& [site, values] : pending_) {
      if (values.empty()) continue;
      auto it = accumulators_.try_emplace(site, est_, bits_, false).first;
      it->second.observe(values);
      values.clear();
    }
  }

  void begin_second_pass() { second_pass_ = true; }

  bool needs_second_pass() const {
    return std::any_of(accumulators_.begin(), accumulators_.end(),
                       [](const auto& kv) { return kv.second.needs_second_pass(); });
  }

  std::map<std::string, QuantizerSpec> specs() const {
    std::map<std::string, QuantizerSpec> out;
    for (const auto& [site, acc] : accumulators_) {
      const Range r = acc.finalize();
      out.emplace(site, spec_from_range(r.min, r.max, bits_, false));
    }
    return out;
  }

 private:
  RangeEstimator est_;
  int bits_;
  bool second_pass_ = false;
  std::map<std::string, std::vector<double>> pending_;
  std::map<std::string, RangeAccumulator> accumulators_;
};

class QuantizingObserver : public ActivationObserver {
 public:
  explicit QuantizingObserver(const std::map<std::string, QuantizerSpec>& specs)
      : specs_(specs) {}

  Tensor observe(const std::string& site, const Tensor& x) override {
    auto it = specs_.find(site);
    if (it == specs_.end()) {
      throw ContractError("quantized forward: no calibrated spec for site " + site);
    }
    return quantize(x, it->second);
  }

 private:
  const std::map<std::string, QuantizerSpec>& specs_;
};

}  // namespace

QuantizedModel calibrate_and_quantize(const model::ModelParams& params,
                                      const model::ModelConfig& cfg,
                                      std::span<const Batch> calibration,
                                      const QuantConfig& qcfg) {
  qcfg.validate();
  cfg.validate();
  const bool any_sequence = std::any_of(calibration.begin(), calibration.end(),
                                        [](const Batch& b) { return !b.empty(); });
  if (!any_sequence) throw ContractError("calibrate_and_quantize: missing calibration data");

  NoGradGuard no_grad;
  QuantizedModel qm;
  qm.config = cfg;
  qm.params = params.clone();

  if (qcfg.w_bits > 0) {
    for (auto& p : qm.params.named_parameters()) {
      if (!is_quantized_weight(p)) continue;
      RangeAccumulator acc(qcfg.weight_estimator, qcfg.w_bits, true);
      acc.observe(p.tensor.data());
      if (acc.needs_second_pass()) acc.observe_second_pass(p.tensor.data());
      const Range r = acc.finalize();
      const QuantizerSpec spec = spec_from_range(r.min, r.max, qcfg.w_bits, true);
      auto data = p.tensor.mutable_data();
      for (double& v : data) v = quantize(v, spec);
      qm.weight_specs.emplace(p.name, spec);
    }
  }

  if (qcfg.a_bits > 0) {
    CalibrationObserver obs(qcfg.act_estimator, qcfg.a_bits);
    model::ForwardOptions opts;
    opts.observer = &obs;
    for (const auto& batch : calibration) {
      for (const auto& seq : batch) model::forward(qm.params, cfg, seq, opts);
      obs.end_batch();
    }
    if (obs.needs_second_pass()) {
      obs.begin_second_pass();
      for (const auto& batch : calibration) {
        for (const auto& seq : batch) model::forward(qm.params, cfg, seq, opts);
      }
    }
    qm.act_specs = obs.specs();
  }
  return qm;
}

double evaluate_quantized(const QuantizedModel& qm, std::span<const model::Example> examples) {
  if (qm.act_specs.empty()) return model::evaluate_nll(qm.params, qm.config, examples);
  QuantizingObserver obs(qm.act_specs);
  return model::evaluate_nll(qm.params, qm.config, examples, &obs);
}

std::vector<SweepRow> bitwidth_sweep(const model::ModelParams& params,
                                     const model::ModelConfig& cfg,
                                     std::span<const Batch> calibration,
                                     std::span<const model::Example> eval,
                                     std::span<const QuantConfig> configs) {
  for (const auto& c : configs) c.validate();
  std::vector<SweepRow> rows;
  if (configs.empty()) return rows;
  const double fp_ppl = model::perplexity(model::evaluate_nll(params, cfg, eval));
  for (const auto& c : configs) {
    const auto qm = calibrate_and_quantize(params, cfg, calibration, c);
    rows.push_back({c, fp_ppl, model::perplexity(evaluate_quantized(qm, eval))});
  }
  return rows;
}

std::string sweep_csv(std::span<const SweepRow> rows) {
  std::ostringstream out;
  out << "w_bits,a_bits,weight_est,act_est,fp_ppl,q_ppl\n";
  out << std::setprecision(12);
  for (const auto& r : rows) {
    out << r.config.w_bits << ',' << r.config.a_bits << ',' << r.config.weight_estimator.label()
        << ',' << r.config.act_estimator.label() << ',' << r.fp_ppl << ',' << r.q_ppl << '\n';
  }
  return out.str();
}

nlohmann::json to_json(const QuantizerSpec& spec) {
  return {{"bits", spec.bits},
          {"symmetric", spec.symmetric},
          {"scale", spec.scale},
          {"zero_point", spec.zero_point}};
}

nlohmann::json specs_to_json(const QuantizedModel& qm) {
  nlohmann::json weights = nlohmann::json::object();
  for (const auto& [name, spec] : qm.weight_specs) weights[name] = to_json(spec);
  nlohmann::json acts = nlohmann::json::object();
  for (const auto& [site, spec] : qm.act_specs) acts[site] = to_json(spec);
  return {{"schema_version", 1}, {"weights", weights}, {"activations", acts}};
}

}  // namespace olab::quant
