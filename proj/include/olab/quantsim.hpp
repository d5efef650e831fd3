#pragma once

// Simulated (fake) uniform quantization, calibration range estimators, and
// the post-training quantization harness around a trained model.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "olab/model.hpp"
#include "olab/tensor.hpp"

namespace olab::quant {

/// Asymmetric: q in [0, 2^b - 1], value s * (q - z).
/// Symmetric: z = 0, q in [-2^(b-1), 2^(b-1) - 1], value s * q.
struct QuantizerSpec {
  int bits = 8;
  bool symmetric = false;
  double scale = 1.0;
  std::int64_t zero_point = 0;

  std::int64_t qmin() const;
  std::int64_t qmax() const;
  double grid_min() const;
  double grid_max() const;
  /// Throws ConfigError for bits outside [2, 16], s <= 0 or z off the grid.
  void validate() const;

  bool operator==(const QuantizerSpec&) const = default;
};

/// Round-half-even onto the grid, clamped to its ends.
double quantize(double x, const QuantizerSpec& spec);
/// Elementwise; the result carries no gradient history.
Tensor quantize(const Tensor& x, const QuantizerSpec& spec);
/// Integer grid index of an already-quantized value.
std::int64_t grid_index(double x, const QuantizerSpec& spec);

/// Asymmetric ranges are widened to contain 0. A constant range (c, c) maps
/// c exactly onto the grid.
QuantizerSpec spec_from_range(double lo, double hi, int bits, bool symmetric);

struct Range {
  double min = 0.0;
  double max = 0.0;
};

struct RangeEstimator {
  enum class Kind { MinMax, RunningMinMax, Percentile, Mse };

  Kind kind = Kind::MinMax;
  double momentum = 0.9;      // RunningMinMax, Percentile
  std::size_t n_batches = 16;  // RunningMinMax: batches consumed
  double p = 0.99999;          // Percentile
  std::size_t grid_size = 100;  // Mse: candidate shrink factors in [0.01, 1]

  static RangeEstimator min_max();
  static RangeEstimator running_min_max(double momentum = 0.9, std::size_t n_batches = 16);
  static RangeEstimator percentile(double p, double momentum = 0.9);
  static RangeEstimator mse(std::size_t grid_size = 100);

  void validate() const;
  /// "minmax", "running_minmax:0.9:16", "percentile:0.99999", "mse:100".
  std::string label() const;
  /// Inverse of label(); trailing parameters are optional.
  static RangeEstimator parse(const std::string& text);

  bool operator==(const RangeEstimator&) const = default;
};

/// Streaming state for one tensor or activation site. Feed every batch to
/// observe(); if needs_second_pass(), feed the same stream again to
/// observe_second_pass() before finalize().
class RangeAccumulator {
 public:
  RangeAccumulator(RangeEstimator estimator, int bits, bool symmetric);

  void observe(std::span<const double> batch);
  bool needs_second_pass() const;
  void observe_second_pass(std::span<const double> batch);
  Range finalize() const;
  std::size_t batches_seen() const { return seen_; }

  /// Shrink factors tried by the MSE search, largest first.
  const std::vector<double>& mse_factors() const { return factors_; }
  /// Calibration SSE of each MSE candidate (valid after the second pass).
  const std::vector<double>& mse_errors() const { return sse_; }

 private:
  RangeEstimator est_;
  int bits_;
  bool symmetric_;
  std::size_t seen_ = 0;
  std::size_t second_seen_ = 0;
  Range range_;
  std::vector<double> factors_;
  std::vector<QuantizerSpec> candidates_;
  std::vector<double> sse_;
};

Range estimate_range(std::span<const Tensor> batches, const RangeEstimator& estimator,
                     int bits, bool symmetric);

/// Sum over all elements of (x - quantize(x))^2.
double quantization_sse(std::span<const double> x, const QuantizerSpec& spec);

using Batch = std::vector<std::vector<std::int32_t>>;

struct QuantConfig {
  int w_bits = 8;  // 0 keeps weights in floating point
  int a_bits = 8;  // 0 keeps activations in floating point
  RangeEstimator weight_estimator = RangeEstimator::min_max();
  RangeEstimator act_estimator = RangeEstimator::running_min_max();

  void validate() const;
};

struct QuantizedModel {
  model::ModelConfig config;
  model::ModelParams params;  // weights already fake-quantized
  std::map<std::string, QuantizerSpec> weight_specs;
  std::map<std::string, QuantizerSpec> act_specs;

  /// Sites reached by a forward pass that carry an activation quantizer.
  std::vector<std::string> quantized_sites() const;
};

/// True for parameters that receive a weight quantizer: weight matrices,
/// embeddings and gate weights, except the LM head.
bool is_quantized_weight(const model::NamedParam& p);

/// Symmetric per-tensor weight specs and asymmetric static activation specs,
/// one per site seen while running the calibration batches.
QuantizedModel calibrate_and_quantize(const model::ModelParams& params,
                                      const model::ModelConfig& cfg,
                                      std::span<const Batch> calibration,
                                      const QuantConfig& qcfg);

/// Mean NLL with every calibrated activation site fake-quantized.
double evaluate_quantized(const QuantizedModel& qm, std::span<const model::Example> examples);

struct SweepRow {
  QuantConfig config;
  double fp_ppl = 0.0;
  double q_ppl = 0.0;
};

std::vector<SweepRow> bitwidth_sweep(const model::ModelParams& params,
                                     const model::ModelConfig& cfg,
                                     std::span<const Batch> calibration,
                                     std::span<const model::Example> eval,
                                     std::span<const QuantConfig> configs);

/// Columns: w_bits,a_bits,weight_est,act_est,fp_ppl,q_ppl.
std::string sweep_csv(std::span<const SweepRow> rows);

nlohmann::json to_json(const QuantizerSpec& spec);
nlohmann::json specs_to_json(const QuantizedModel& qm);

}  // namespace olab::quant
