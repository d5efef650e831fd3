#include "olab/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "olab/errors.hpp"

namespace olab::diag {

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  out.flush();
  if (!out) throw IoError("write failed: " + path.string());
}

/// Rows of head `head` of a [H, T, C] tensor as CSV with a c0..c{C-1} header.
std::string head_matrix_csv(const Tensor& t, std::size_t head, const char* col) {
  const std::size_t rows = t.dim(1);
  const std::size_t cols = t.dim(2);
  const auto data = t.data().subspan(head * rows * cols, rows * cols);
  std::ostringstream out;
  for (std::size_t c = 0; c < cols; ++c) out << (c ? "," : "") << col << c;
  out << '\n';
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out << (c ? "," : "") << fmt(data[r * cols + c]);
    out << '\n';
  }
  return out.str();
}

}  // namespace

double kurtosis(std::span<const double> x, bool excess) {
  if (x.size() < 2) throw DegenerateStatisticError("kurtosis: need at least 2 elements");
  const auto n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double m2 = 0.0;
  double m4 = 0.0;
  for (double v : x) {
    const double d2 = (v - mean) * (v - mean);
    m2 += d2;
    m4 += d2 * d2;
  }
  m2 /= n;
  m4 /= n;
  if (!(m2 > 0.0)) throw DegenerateStatisticError("kurtosis: zero variance");
  const double k = m4 / (m2 * m2);
  return excess ? k - 3.0 : k;
}

double kurtosis(const Tensor& x, bool excess) { return kurtosis(x.data(), excess); }

double max_inf_norm(const std::vector<std::vector<Tensor>>& activations) {
  if (activations.empty()) throw ContractError("max_inf_norm: empty evaluation set");
  double total = 0.0;
  for (const auto& layers : activations) {
    double seq_max = 0.0;
    for (const auto& t : layers) {
      for (double v : t.data()) seq_max = std::max(seq_max, std::abs(v));
    }
    total += seq_max;
  }
  return total / static_cast<double>(activations.size());
}

std::vector<OutlierHit> detect_outliers(const Tensor& x, double sigma_mult) {
  if (x.rank() != 2) {
    throw DimensionError("detect_outliers: expected [T, d], got " + shape_str(x.shape()));
  }
  const auto data = x.data();
  std::vector<OutlierHit> hits;
  if (data.empty()) return hits;
  const auto n = static_cast<double>(data.size());
  double mean = 0.0;
  for (double v : data) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : data) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / n);
  if (!(sd > 0.0)) return hits;
  const std::size_t d = x.dim(1);
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (std::abs(data[i] - mean) > sigma_mult * sd) hits.push_back({i / d, i % d, data[i]});
  }
  return hits;
}

std::size_t head_label(std::size_t dim, std::size_t d_head) {
  if (d_head == 0) throw ConfigError("head_label: d_head must be positive");
  return dim / d_head + 1;
}

std::size_t OutlierReport::total_outliers() const {
  std::size_t n = 0;
  for (const auto& layer : dim_counts)
    for (std::size_t c : layer) n += c;
  return n;
}

std::map<std::size_t, std::size_t> OutlierReport::dim_histogram() const {
  std::map<std::size_t, std::size_t> out;
  for (const auto& layer : dim_counts)
    for (std::size_t d = 0; d < layer.size(); ++d)
      if (layer[d]) out[d] += layer[d];
  return out;
}

std::map<std::size_t, std::size_t> OutlierReport::token_histogram() const {
  std::map<std::size_t, std::size_t> out;
  for (const auto& layer : token_counts)
    for (std::size_t t = 0; t < layer.size(); ++t)
      if (layer[t]) out[t] += layer[t];
  return out;
}

nlohmann::json OutlierReport::to_json() const {
  using nlohmann::json;
  json layers = json::array();
  for (std::size_t l = 0; l < dim_counts.size(); ++l) {
    json dims = json::object();
    for (std::size_t d = 0; d < dim_counts[l].size(); ++d)
      if (dim_counts[l][d]) dims[std::to_string(d)] = dim_counts[l][d];
    json tokens = json::object();
    for (std::size_t t = 0; t < token_counts[l].size(); ++t)
      if (token_counts[l][t]) tokens[std::to_string(t)] = token_counts[l][t];
    json entry{{"layer", l + 1}, {"dim_counts", dims}, {"token_counts", tokens}};
    if (l < layer_kurtosis.size()) entry["kurtosis"] = layer_kurtosis[l];
    layers.push_back(entry);
  }
  json outlier_dims = json::array();
  for (const auto& [dim, count] : dim_histogram()) {
    outlier_dims.push_back(
        {{"dim", dim}, {"head", head_label(dim, geometry.d_head)}, {"count", count}});
  }
  return {{"schema_version", kReportSchemaVersion},
          {"kurtosis_convention", excess_kurtosis ? "excess" : "pearson"},
          {"measurement_point", measurement_point},
          {"sigma_mult", sigma_mult},
          {"n_sequences", n_sequences},
          {"n_layers", geometry.n_layers},
          {"d_model", geometry.d_model},
          {"d_head", geometry.d_head},
          {"avg_kurtosis", avg_kurtosis},
          {"max_inf_norm", max_inf_norm},
          {"outlier_count", total_outliers()},
          {"outlier_dims", outlier_dims},
          {"layers", layers}};
}

std::string OutlierReport::dim_histogram_csv() const {
  std::ostringstream out;
  out << "layer,dim,head,count\n";
  for (std::size_t l = 0; l < dim_counts.size(); ++l)
    for (std::size_t d = 0; d < dim_counts[l].size(); ++d)
      if (dim_counts[l][d])
        out << l + 1 << ',' << d << ',' << head_label(d, geometry.d_head) << ','
            << dim_counts[l][d] << '\n';
  return out.str();
}

std::string OutlierReport::token_histogram_csv() const {
  std::ostringstream out;
  out << "layer,token,count\n";
  for (std::size_t l = 0; l < token_counts.size(); ++l)
    for (std::size_t t = 0; t < token_counts[l].size(); ++t)
      if (token_counts[l][t]) out << l + 1 << ',' << t << ',' << token_counts[l][t] << '\n';
  return out.str();
}

OutlierReport outlier_histograms(std::span<const SequenceOutliers> sequences,
                                 const Geometry& geometry) {
  if (geometry.d_head == 0 || geometry.d_model % geometry.d_head != 0) {
    throw ConfigError("outlier_histograms: d_model must be a multiple of d_head");
  }
  OutlierReport r;
  r.geometry = geometry;
  r.n_sequences = sequences.size();
  r.dim_counts.assign(geometry.n_layers, std::vector<std::size_t>(geometry.d_model, 0));
  r.token_counts.assign(geometry.n_layers, std::vector<std::size_t>(geometry.max_seq_len, 0));
  for (const auto& seq : sequences) {
    for (const auto& layer : seq) {
      if (layer.layer >= geometry.n_layers) {
        throw ContractError("outlier_histograms: layer " + std::to_string(layer.layer) +
                            " out of range");
      }
      for (const auto& h : layer.hits) {
        if (h.dim >= geometry.d_model || h.token >= geometry.max_seq_len) {
          throw ContractError("outlier_histograms: hit outside the geometry");
        }
        ++r.dim_counts[layer.layer][h.dim];
        ++r.token_counts[layer.layer][h.token];
      }
    }
  }
  return r;
}

OutlierReport diagnose(const model::ModelParams& params, const model::ModelConfig& cfg,
                       std::span<const std::vector<std::int32_t>> sequences,
                       const DiagnoseOptions& opts) {
  if (sequences.empty()) throw ContractError("diagnose: empty evaluation set");
  NoGradGuard no_grad;
  const std::size_t n_layers = cfg.n_layers;
  std::vector<SequenceOutliers> outliers;
  std::vector<std::vector<Tensor>> measured;
  std::vector<double> kurt_sum(n_layers, 0.0);
  for (const auto& seq : sequences) {
    const auto out = model::forward(params, cfg, seq);
    SequenceOutliers so;
    std::vector<Tensor> layers;
    for (std::size_t l = 0; l < n_layers; ++l) {
      const Tensor& x = out.layers[l].measured(opts.point);
      kurt_sum[l] += kurtosis(x, opts.excess_kurtosis);
      so.push_back({l, detect_outliers(x, opts.sigma_mult)});
      layers.push_back(x);
    }
    outliers.push_back(std::move(so));
    measured.push_back(std::move(layers));
  }
  Geometry g{n_layers, cfg.d_model(), cfg.attention.d_head(), cfg.max_seq_len};
  OutlierReport r = outlier_histograms(outliers, g);
  r.measurement_point =
      opts.point == model::MeasurementPoint::PostResidual ? "post_residual" : "pre_residual";
  r.excess_kurtosis = opts.excess_kurtosis;
  r.sigma_mult = opts.sigma_mult;
  const auto n = static_cast<double>(sequences.size());
  r.layer_kurtosis.resize(n_layers);
  double total = 0.0;
  for (std::size_t l = 0; l < n_layers; ++l) {
    r.layer_kurtosis[l] = kurt_sum[l] / n;
    total += r.layer_kurtosis[l];
  }
  r.avg_kurtosis = total / static_cast<double>(n_layers);
  r.max_inf_norm = max_inf_norm(measured);
  return r;
}

std::vector<std::filesystem::path> dump_attention_patterns(
    const attention::AttentionTrace& trace, std::size_t head,
    const std::filesystem::path& out_dir, const std::string& stem) {
  if (!trace.probs.defined() || !trace.values.defined() || !trace.context.defined()) {
    throw ContractError("dump_attention_patterns: trace was not captured");
  }
  const std::size_t n_heads = trace.probs.dim(0);
  if (head >= n_heads) {
    throw ContractError("dump_attention_patterns: head " + std::to_string(head) +
                        " out of range for " + std::to_string(n_heads) + " heads");
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  std::vector<std::filesystem::path> written;
  auto emit = [&](const std::string& suffix, const std::string& text) {
    const auto path = out_dir / (stem + suffix);
    write_file(path, text);
    written.push_back(path);
  };
  emit("_probs.csv", head_matrix_csv(trace.probs, head, "k"));
  emit("_values.csv", head_matrix_csv(trace.values, head, "d"));
  emit("_context.csv", head_matrix_csv(trace.context, head, "d"));
  if (trace.gate_probs.defined()) {
    const std::size_t t = trace.gate_probs.dim(1);
    std::ostringstream out;
    out << "token,pi\n";
    for (std::size_t i = 0; i < t; ++i) out << i << ',' << fmt(trace.gate_probs[head * t + i]) << '\n';
    emit("_gate.csv", out.str());
  }
  return written;
}

}  // namespace olab::diag
