#pragma once

// Comparison table of FP and quantized results per attention method: one
// row per (model, method) with FP perplexity, max infinity norm, average
// kurtosis and quantized perplexity, as mean and (for >= 2 seeds) std.

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "olab/attention.hpp"

namespace olab::report {

inline constexpr int kRunReportSchemaVersion = 1;

/// A JSON document with the wrong schema version or shape.
class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// "vanilla", "clipped_softmax(alpha=4,zeta=1)",
/// "gated(design=linear,pi_init=0.5,gate_scale=1)", ...
std::string method_label(const attention::AttentionVariant& v);

/// Table order: vanilla, clipped softmax, gated, then anything else.
int method_order(const std::string& label);

/// "W8A8", "W4A8", "W8A16"; a 0 bit width prints as "32".
std::string quant_label(int w_bits, int a_bits);

/// One trained and quantized run.
struct RunRecord {
  std::string model_tag;
  std::string method;
  std::uint64_t seed = 0;
  double fp_ppl = 0.0;
  double max_inf_norm = 0.0;
  double avg_kurtosis = 0.0;
  double q_ppl = 0.0;
  std::string quant = "W8A8";
};

struct Stat {
  double mean = 0.0;
  std::optional<double> std;  // sample std; only with >= 2 values

  bool operator==(const Stat&) const = default;
};

Stat summarize(std::span<const double> values);

struct ReportRow {
  std::string model_tag;
  std::string method;
  std::vector<std::uint64_t> seeds;
  Stat fp_ppl;
  Stat max_inf_norm;
  Stat avg_kurtosis;
  Stat q_ppl;

  bool operator==(const ReportRow&) const = default;
};

struct RunReport {
  std::string quant = "W8A8";
  std::vector<ReportRow> rows;

  /// Groups by (model, method) in table order. Records mixing quantization
  /// settings raise SchemaError.
  static RunReport from_records(std::span<const RunRecord> records);

  /// SchemaError on an empty table, unlabeled methods, non-finite metrics,
  /// or std present without two seeds (or missing with them).
  void validate() const;

  nlohmann::json to_json() const;
  static RunReport from_json(const nlohmann::json& j);
  /// model,method,n_seeds,fp_ppl,fp_ppl_std,... with empty std cells for
  /// single-seed rows.
  std::string to_csv() const;
  /// Fixed-width text table with mean±std cells.
  std::string to_table() const;

  bool operator==(const RunReport&) const = default;
};

}  // namespace olab::report
