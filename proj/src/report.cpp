#include "olab/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace olab::report {

using nlohmann::json;

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

std::string precise(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

json stat_json(const Stat& s) {
  json j{{"mean", s.mean}};
  if (s.std) j["std"] = *s.std;
  return j;
}

Stat stat_from_json(const json& j, const std::string& where) {
  if (!j.is_object() || !j.contains("mean") || !j.at("mean").is_number()) {
    throw SchemaError(where + ": expected {mean[, std]}");
  }
  Stat s{j.at("mean").get<double>(), std::nullopt};
  if (j.contains("std")) {
    if (!j.at("std").is_number()) throw SchemaError(where + ".std: expected a number");
    s.std = j.at("std").get<double>();
  }
  return s;
}

std::string cell(const Stat& s) {
  char buf[64];
  if (s.std) {
    std::snprintf(buf, sizeof(buf), "%.4g±%.2g", s.mean, *s.std);
  } else {
    std::snprintf(buf, sizeof(buf), "%.4g", s.mean);
  }
  return buf;
}

// Display width in code points; cells contain the two-byte "±".
std::size_t width_of(const std::string& s) {
  return static_cast<std::size_t>(
      std::count_if(s.begin(), s.end(), [](char c) { return (c & 0xC0) != 0x80; }));
}

}  // namespace

std::string method_label(const attention::AttentionVariant& v) {
  if (const auto* c = std::get_if<attention::ClippedSoftmaxConfig>(&v)) {
    if (c->mode == attention::ClippedSoftmaxConfig::GammaMode::Alpha) {
      return "clipped_softmax(alpha=" + num(c->alpha) + ",zeta=" + num(c->zeta) + ")";
    }
    return "clipped_softmax(gamma=" + num(c->gamma) + ",zeta=" + num(c->zeta) + ")";
  }
  if (const auto* g = std::get_if<attention::GatingConfig>(&v)) {
    std::string design = "linear";
    if (g->design == attention::GatingDesign::Mlp) design = "mlp(n_hid=" + std::to_string(g->n_hid) + ")";
    if (g->design == attention::GatingDesign::AllHeadsLinear) design = "all_heads_linear";
    return "gated(design=" + design + ",pi_init=" + num(attention::pi_from_bias(g->b_init)) +
           ",gate_scale=" + num(g->gate_scale) + ")";
  }
  return "vanilla";
}

int method_order(const std::string& label) {
  if (label == "vanilla") return 0;
  if (label.starts_with("clipped_softmax")) return 1;
  if (label.starts_with("gated")) return 2;
  return 3;
}

std::string quant_label(int w_bits, int a_bits) {
  return "W" + std::to_string(w_bits ? w_bits : 32) + "A" + std::to_string(a_bits ? a_bits : 32);
}

Stat summarize(std::span<const double> values) {
  if (values.empty()) throw SchemaError("summarize: no values");
  const auto n = static_cast<double>(values.size());
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= n;
  Stat s{mean, std::nullopt};
  if (values.size() >= 2) {
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    s.std = std::sqrt(ss / (n - 1.0));
  }
  return s;
}

RunReport RunReport::from_records(std::span<const RunRecord> records) {
  if (records.empty()) throw SchemaError("run report: no runs");
  RunReport r;
  r.quant = records.front().quant;
  struct Group {
    std::string model_tag, method;
    std::vector<const RunRecord*> runs;
  };
  std::vector<Group> groups;
  for (const auto& rec : records) {
    if (rec.quant != r.quant) {
      throw SchemaError("run report: runs mix quantization settings " + r.quant + " and " +
                        rec.quant);
    }
    auto it = std::find_if(groups.begin(), groups.end(), [&](const Group& g) {
      return g.model_tag == rec.model_tag && g.method == rec.method;
    });
    if (it == groups.end()) {
      groups.push_back({rec.model_tag, rec.method, {}});
      it = groups.end() - 1;
    }
    it->runs.push_back(&rec);
  }
  std::stable_sort(groups.begin(), groups.end(), [](const Group& a, const Group& b) {
    return method_order(a.method) < method_order(b.method);
  });
  for (const auto& g : groups) {
    ReportRow row{g.model_tag, g.method, {}, {}, {}, {}, {}};
    std::vector<double> fp, inf, kurt, q;
    for (const auto* rec : g.runs) {
      row.seeds.push_back(rec->seed);
      fp.push_back(rec->fp_ppl);
      inf.push_back(rec->max_inf_norm);
      kurt.push_back(rec->avg_kurtosis);
      q.push_back(rec->q_ppl);
    }
    row.fp_ppl = summarize(fp);
    row.max_inf_norm = summarize(inf);
    row.avg_kurtosis = summarize(kurt);
    row.q_ppl = summarize(q);
    r.rows.push_back(std::move(row));
  }
  return r;
}

void RunReport::validate() const {
  if (rows.empty()) throw SchemaError("run report: no rows");
  if (quant.empty()) throw SchemaError("run report: missing quantization label");
  for (const auto& row : rows) {
    const std::string where = "run report row '" + row.method + "'";
    if (row.method.empty()) throw SchemaError("run report: row without a method label");
    if (row.seeds.empty()) throw SchemaError(where + ": no seeds");
    for (const Stat* s : {&row.fp_ppl, &row.max_inf_norm, &row.avg_kurtosis, &row.q_ppl}) {
      if (!std::isfinite(s->mean)) throw SchemaError(where + ": non-finite metric");
      if (s->std.has_value() != (row.seeds.size() >= 2)) {
        throw SchemaError(where + ": std must be present exactly when there are >= 2 seeds");
      }
      if (s->std && !(std::isfinite(*s->std) && *s->std >= 0.0)) {
        throw SchemaError(where + ": invalid std");
      }
    }
  }
}

json RunReport::to_json() const {
  json rows_j = json::array();
  for (const auto& row : rows) {
    rows_j.push_back({{"model", row.model_tag},
                      {"method", row.method},
                      {"seeds", row.seeds},
                      {"fp_ppl", stat_json(row.fp_ppl)},
                      {"max_inf_norm", stat_json(row.max_inf_norm)},
                      {"avg_kurtosis", stat_json(row.avg_kurtosis)},
                      {"q_ppl", stat_json(row.q_ppl)}});
  }
  return {{"schema_version", kRunReportSchemaVersion}, {"quant", quant}, {"rows", rows_j}};
}

RunReport RunReport::from_json(const json& j) {
  if (!j.is_object() || !j.contains("schema_version") || !j.at("schema_version").is_number_integer()) {
    throw SchemaError("run report: missing schema_version");
  }
  const int version = j.at("schema_version").get<int>();
  if (version != kRunReportSchemaVersion) {
    throw SchemaError("run report: schema_version " + std::to_string(version) + ", expected " +
                      std::to_string(kRunReportSchemaVersion));
  }
  if (!j.contains("quant") || !j.at("quant").is_string() || !j.contains("rows") ||
      !j.at("rows").is_array()) {
    throw SchemaError("run report: expected quant and rows");
  }
  RunReport r;
  r.quant = j.at("quant").get<std::string>();
  for (const auto& row_j : j.at("rows")) {
    ReportRow row;
    try {
      row.model_tag = row_j.at("model").get<std::string>();
      row.method = row_j.at("method").get<std::string>();
      row.seeds = row_j.at("seeds").get<std::vector<std::uint64_t>>();
    } catch (const json::exception& e) {
      throw SchemaError(std::string("run report row: ") + e.what());
    }
    row.fp_ppl = stat_from_json(row_j.value("fp_ppl", json()), "fp_ppl");
    row.max_inf_norm = stat_from_json(row_j.value("max_inf_norm", json()), "max_inf_norm");
    row.avg_kurtosis = stat_from_json(row_j.value("avg_kurtosis", json()), "avg_kurtosis");
    row.q_ppl = stat_from_json(row_j.value("q_ppl", json()), "q_ppl");
    r.rows.push_back(std::move(row));
  }
  r.validate();
  return r;
}

std::string RunReport::to_csv() const {
  std::ostringstream out;
  out << "model,method,n_seeds,fp_ppl,fp_ppl_std,max_inf_norm,max_inf_norm_std,avg_kurtosis,"
         "avg_kurtosis_std,q_ppl,q_ppl_std,quant\n";
  auto put = [&](const Stat& s) {
    out << ',' << precise(s.mean) << ',';
    if (s.std) out << precise(*s.std);
  };
  for (const auto& row : rows) {
    // Method labels contain commas.
    out << row.model_tag << ",\"" << row.method << "\"," << row.seeds.size();
    put(row.fp_ppl);
    put(row.max_inf_norm);
    put(row.avg_kurtosis);
    put(row.q_ppl);
    out << ',' << quant << '\n';
  }
  return out.str();
}

std::string RunReport::to_table() const {
  const std::vector<std::string> header{"Model", "Method", "FP ppl", "Max inf. norm",
                                        "Avg. kurtosis", quant + " ppl"};
  std::vector<std::vector<std::string>> cells{header};
  for (const auto& row : rows) {
    cells.push_back({row.model_tag, row.method, cell(row.fp_ppl), cell(row.max_inf_norm),
                     cell(row.avg_kurtosis), cell(row.q_ppl)});
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& r : cells)
    for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], width_of(r[c]));
  std::ostringstream out;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    for (std::size_t c = 0; c < cells[i].size(); ++c) {
      out << (c ? "  " : "") << cells[i][c];
      if (c + 1 < cells[i].size()) out << std::string(width[c] - width_of(cells[i][c]), ' ');
    }
    out << '\n';
    if (i == 0) {
      std::size_t total = 0;
      for (std::size_t w : width) total += w;
      out << std::string(total + 2 * (width.size() - 1), '-') << '\n';
    }
  }
  return out.str();
}

}  // namespace olab::report
