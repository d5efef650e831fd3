#pragma once

// Outlier measurements on activations: kurtosis, infinity norms, the
// k-sigma outlier rule with per-dimension and per-token attribution, and CSV
// dumps of attention patterns.

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "olab/attention.hpp"
#include "olab/model.hpp"
#include "olab/tensor.hpp"

namespace olab::diag {

inline constexpr int kReportSchemaVersion = 1;

/// Population moments m4 / m2^2 over all elements (normal = 3), or minus 3
/// with `excess`. Throws DegenerateStatisticError for zero variance.
double kurtosis(std::span<const double> x, bool excess = false);
double kurtosis(const Tensor& x, bool excess = false);

/// Mean over sequences of the per-sequence maximum over layers of max|x|.
/// `activations[s][l]` is layer l of sequence s.
double max_inf_norm(const std::vector<std::vector<Tensor>>& activations);

struct OutlierHit {
  std::size_t token;
  std::size_t dim;
  double value;

  bool operator==(const OutlierHit&) const = default;
};

/// Entries of x [T, d] with |x - mean| > sigma_mult * std, both statistics
/// taken over the whole tensor. Zero variance yields no outliers.
std::vector<OutlierHit> detect_outliers(const Tensor& x, double sigma_mult = 6.0);

struct Geometry {
  std::size_t n_layers = 0;
  std::size_t d_model = 0;
  std::size_t d_head = 0;
  std::size_t max_seq_len = 0;
};

/// Outliers of one layer of one sequence.
struct LayerOutliers {
  std::size_t layer = 0;
  std::vector<OutlierHit> hits;
};
using SequenceOutliers = std::vector<LayerOutliers>;

struct OutlierReport {
  Geometry geometry;
  std::string measurement_point = "post_residual";
  bool excess_kurtosis = false;
  double sigma_mult = 6.0;
  std::size_t n_sequences = 0;
  std::vector<double> layer_kurtosis;  // per layer, mean over sequences
  double avg_kurtosis = 0.0;           // mean of layer_kurtosis
  double max_inf_norm = 0.0;
  std::vector<std::vector<std::size_t>> dim_counts;    // [layer][dim]
  std::vector<std::vector<std::size_t>> token_counts;  // [layer][token]

  std::size_t total_outliers() const;
  /// Counts summed over layers; only nonzero entries.
  std::map<std::size_t, std::size_t> dim_histogram() const;
  std::map<std::size_t, std::size_t> token_histogram() const;

  /// Layer and head labels are 1-based.
  nlohmann::json to_json() const;
  /// layer,dim,head,count for every nonzero (layer, dim).
  std::string dim_histogram_csv() const;
  /// layer,token,count for every nonzero (layer, token).
  std::string token_histogram_csv() const;
};

/// 1-based label of the head owning hidden dimension `dim`.
std::size_t head_label(std::size_t dim, std::size_t d_head);

/// Aggregates per-sequence outlier lists into per-layer histograms.
OutlierReport outlier_histograms(std::span<const SequenceOutliers> sequences,
                                 const Geometry& geometry);

struct DiagnoseOptions {
  model::MeasurementPoint point = model::MeasurementPoint::PostResidual;
  double sigma_mult = 6.0;
  bool excess_kurtosis = false;
};

/// Runs every sequence through the model and fills the whole report.
OutlierReport diagnose(const model::ModelParams& params, const model::ModelConfig& cfg,
                       std::span<const std::vector<std::int32_t>> sequences,
                       const DiagnoseOptions& opts = {});

/// Writes <stem>_probs.csv (T x T), <stem>_values.csv (T x d_head),
/// <stem>_context.csv (T x d_head) and, for gated traces, <stem>_gate.csv
/// (token,pi) for one 0-based head. Returns the files written.
std::vector<std::filesystem::path> dump_attention_patterns(
    const attention::AttentionTrace& trace, std::size_t head,
    const std::filesystem::path& out_dir, const std::string& stem);

}  // namespace olab::diag
