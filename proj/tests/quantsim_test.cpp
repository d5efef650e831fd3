#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "olab/errors.hpp"
#include "olab/quantsim.hpp"

namespace {

using namespace olab;
using namespace olab::quant;

QuantizerSpec make_spec(int bits, bool symmetric, double scale, std::int64_t z) {
  QuantizerSpec s;
  s.bits = bits;
  s.symmetric = symmetric;
  s.scale = scale;
  s.zero_point = z;
  return s;
}

/// Brute force over every grid point; ties go to the even offset q - z.
double nearest_grid_point(double x, const QuantizerSpec& spec) {
  double best = 0.0;
  double best_err = INFINITY;
  std::int64_t best_offset = 0;
  for (std::int64_t q = spec.qmin(); q <= spec.qmax(); ++q) {
    const std::int64_t off = q - spec.zero_point;
    const double g = spec.scale * static_cast<double>(off);
    const double err = std::abs(x - g);
    if (err < best_err || (err == best_err && off % 2 == 0 && best_offset % 2 != 0)) {
      best = g;
      best_err = err;
      best_offset = off;
    }
  }
  return best;
}

std::vector<QuantizerSpec> random_specs(int bits, std::mt19937_64& rng, int n) {
  std::uniform_real_distribution<double> log_scale(-6.0, 2.0);
  std::vector<QuantizerSpec> out;
  for (int i = 0; i < n; ++i) {
    const bool sym = i % 2 == 0;
    const auto levels = (std::int64_t{1} << bits) - 1;
    const std::int64_t z =
        sym ? 0 : std::uniform_int_distribution<std::int64_t>(0, levels)(rng);
    out.push_back(make_spec(bits, sym, std::pow(2.0, log_scale(rng)) * 1.37, z));
  }
  return out;
}

TEST(Quantize, HandExamples) {
  const auto spec = make_spec(8, false, 0.1, 0);
  const double a = quantize(0.6, spec);
  EXPECT_EQ(grid_index(a, spec), 6);
  EXPECT_NEAR(a, 0.6, 1e-15);
  EXPECT_EQ(quantize(300.0, make_spec(8, false, 1.0, 0)), 255.0);
  EXPECT_EQ(quantize(-0.04, spec), 0.0);
}

TEST(Quantize, TiesRoundHalfEven) {
  const auto spec = make_spec(8, true, 0.25, 0);
  EXPECT_EQ(quantize(0.125, spec), 0.0);
  EXPECT_EQ(quantize(0.375, spec), 0.5);
  EXPECT_EQ(quantize(0.625, spec), 0.5);
  EXPECT_EQ(quantize(-0.375, spec), -0.5);
}

TEST(Quantize, RejectsBadSpecs) {
  EXPECT_THROW(quantize(1.0, make_spec(8, false, 0.0, 0)), ConfigError);
  EXPECT_THROW(quantize(1.0, make_spec(8, false, -1.0, 0)), ConfigError);
  EXPECT_THROW(make_spec(1, false, 1.0, 0).validate(), ConfigError);
  EXPECT_THROW(make_spec(8, false, 1.0, 256).validate(), ConfigError);
  EXPECT_THROW(make_spec(8, true, 1.0, 3).validate(), ConfigError);
  EXPECT_THROW(quantize(Tensor::scalar(1.0), make_spec(8, false, 0.0, 0)), ConfigError);
}

TEST(Quantize, MatchesBruteForceNearestGridPoint) {
  std::mt19937_64 rng(2024);
  for (int bits : {2, 4, 8}) {
    for (const auto& spec : random_specs(bits, rng, 6)) {
      std::uniform_real_distribution<double> in_range(spec.grid_min(), spec.grid_max());
      for (int i = 0; i < 10000; ++i) {
        const double x = in_range(rng);
        ASSERT_EQ(quantize(x, spec), nearest_grid_point(x, spec))
            << "bits " << bits << " x " << x << " s " << spec.scale << " z " << spec.zero_point;
      }
    }
  }
}

TEST(Quantize, GridMembershipErrorBoundIdempotenceMonotonicity) {
  std::mt19937_64 rng(7);
  for (int bits : {2, 4, 8, 16}) {
    for (const auto& spec : random_specs(bits, rng, 4)) {
      const double lo = spec.grid_min();
      const double hi = spec.grid_max();
      const double pad = 0.5 * (hi - lo);
      std::uniform_real_distribution<double> wide(lo - pad, hi + pad);
      for (int i = 0; i < 25000; ++i) {
        const double x = wide(rng);
        const double y = wide(rng);
        const double qx = quantize(x, spec);
        const double qy = quantize(y, spec);
        const auto q = grid_index(qx, spec);
        ASSERT_GE(q, spec.qmin());
        ASSERT_LE(q, spec.qmax());
        ASSERT_EQ(qx, spec.scale * static_cast<double>(q - spec.zero_point));
        ASSERT_EQ(quantize(qx, spec), qx);
        if (x <= y) {
          ASSERT_LE(qx, qy);
        } else {
          ASSERT_GE(qx, qy);
        }
        if (x >= lo && x <= hi) {
          // One ulp of slack for the product s * (q - z).
          ASSERT_LE(std::abs(x - qx), spec.scale / 2 * (1 + 1e-12));
        }
      }
    }
  }
}

TEST(SpecFromRange, HandExamples) {
  auto a = spec_from_range(0.0, 25.5, 8, false);
  EXPECT_DOUBLE_EQ(a.scale, 0.1);
  EXPECT_EQ(a.zero_point, 0);
  auto s = spec_from_range(-1.0, 1.0, 8, true);
  EXPECT_EQ(s.scale, 1.0 / 127.0);
  EXPECT_EQ(s.zero_point, 0);
  auto neg = spec_from_range(-2.55, -1.0, 8, false);
  EXPECT_EQ(neg.zero_point, 255);
  EXPECT_EQ(quantize(0.0, neg), 0.0);
}

TEST(SpecFromRange, ConstantRangeIsRepresentedExactly) {
  for (bool sym : {false, true}) {
    for (int bits : {2, 8, 16}) {
      for (double c : {0.0, 3.7, -0.0123, 1e6, -42.0}) {
        const auto spec = spec_from_range(c, c, bits, sym);
        spec.validate();
        EXPECT_EQ(quantize(c, spec), c) << c << " bits " << bits << " sym " << sym;
      }
    }
  }
}

TEST(SpecFromRange, RangeIncludesZeroAndValidates) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> d(-5.0, 5.0);
  for (int i = 0; i < 1000; ++i) {
    double lo = d(rng);
    double hi = d(rng);
    if (lo > hi) std::swap(lo, hi);
    for (bool sym : {false, true}) {
      const auto spec = spec_from_range(lo, hi, 8, sym);
      spec.validate();
      EXPECT_EQ(quantize(0.0, spec), 0.0);
    }
  }
  EXPECT_THROW(spec_from_range(1.0, 0.0, 8, false), ContractError);
  EXPECT_THROW(spec_from_range(0.0, 1.0, 1, false), ConfigError);
}

Tensor batch_of(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor::from({n}, std::move(v));
}

TEST(RangeEstimators, MinMaxSingleBatch) {
  std::vector<Tensor> b{batch_of({-1.0, 0.0, 2.0})};
  const auto r = estimate_range(b, RangeEstimator::min_max(), 8, false);
  EXPECT_EQ(r.min, -1.0);
  EXPECT_EQ(r.max, 2.0);
}

TEST(RangeEstimators, RunningMinMaxFollowsTheEmaRecurrence) {
  std::vector<Tensor> two{batch_of({0.0, 1.0}), batch_of({0.0, 2.0})};
  const auto r = estimate_range(two, RangeEstimator::running_min_max(0.9, 16), 8, false);
  EXPECT_DOUBLE_EQ(r.max, 1.1);

  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<Tensor> stream;
  double lo = 0.0;
  double hi = 0.0;
  for (int b = 0; b < 20; ++b) {
    std::vector<double> v(50);
    for (double& x : v) x = n(rng) * (1 + b);
    const auto [mn, mx] = std::minmax_element(v.begin(), v.end());
    if (b == 0) {
      lo = *mn;
      hi = *mx;
    } else if (b < 16) {
      lo = 0.9 * lo + (1 - 0.9) * *mn;
      hi = 0.9 * hi + (1 - 0.9) * *mx;
    }
    stream.push_back(batch_of(v));
  }
  const auto r2 = estimate_range(stream, RangeEstimator::running_min_max(), 8, false);
  EXPECT_EQ(r2.min, lo);
  EXPECT_EQ(r2.max, hi);
}

TEST(RangeEstimators, PercentileInterpolatesLinearly) {
  std::vector<Tensor> b{batch_of({5.0, 1.0, 4.0, 2.0, 3.0})};
  const auto r = estimate_range(b, RangeEstimator::percentile(0.9), 8, false);
  EXPECT_NEAR(r.max, 4.6, 1e-12);
  EXPECT_NEAR(r.min, 1.4, 1e-12);
  const auto full = estimate_range(b, RangeEstimator::percentile(1.0), 8, false);
  EXPECT_EQ(full.max, 5.0);
  EXPECT_EQ(full.min, 1.0);
}

TEST(RangeEstimators, PercentileIgnoresSingleOutlier) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(200000);
  for (double& x : v) x = u(rng);
  v[12345] = 100.0;
  std::vector<Tensor> b{batch_of(v)};
  const auto r = estimate_range(b, RangeEstimator::percentile(0.99999), 8, false);
  EXPECT_LT(r.max, 10.0);
}

std::vector<double> unit_bulk_with_outlier(double outlier) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(1000);
  for (double& x : v) x = u(rng);
  v.push_back(outlier);
  return v;
}

TEST(RangeEstimators, MseSearchMatchesBruteForceAndBeatsMinMax) {
  const auto v = unit_bulk_with_outlier(100.0);
  std::vector<Tensor> b{batch_of(v)};
  const auto mm = estimate_range(b, RangeEstimator::min_max(), 8, false);
  const auto ms = estimate_range(b, RangeEstimator::mse(), 8, false);
  const double sse_mm = quantization_sse(v, spec_from_range(mm.min, mm.max, 8, false));
  const double sse_ms = quantization_sse(v, spec_from_range(ms.min, ms.max, 8, false));
  EXPECT_LE(sse_ms, sse_mm);

  double best = INFINITY;
  for (int k = 0; k < 100; ++k) {
    const double f = 1.0 - 0.99 * k / 99.0;
    best = std::min(best, quantization_sse(v, spec_from_range(f * mm.min, f * mm.max, 8, false)));
  }
  EXPECT_EQ(sse_ms, best);
}

// Expected to fail: clipping the lone outlier costs (100 - f * 100)^2, more
// than the whole bulk's rounding error at f = 1 (about 13), so the SSE
// optimum keeps the full range.
TEST(RangeEstimators, MseRangeExcludesSingleOutlier) {
  std::vector<Tensor> b{batch_of(unit_bulk_with_outlier(100.0))};
  EXPECT_LT(estimate_range(b, RangeEstimator::mse(), 8, false).max, 100.0);
}

TEST(RangeEstimators, MseNeverWorseThanMinMax) {
  std::mt19937_64 rng(9);
  std::student_t_distribution<double> heavy(2.0);
  for (int set = 0; set < 20; ++set) {
    std::vector<Tensor> batches;
    std::vector<double> all;
    for (int b = 0; b < 3; ++b) {
      std::vector<double> v(300);
      for (double& x : v) x = heavy(rng);
      all.insert(all.end(), v.begin(), v.end());
      batches.push_back(batch_of(v));
    }
    for (bool sym : {false, true}) {
      const auto mm = estimate_range(batches, RangeEstimator::min_max(), 4, sym);
      const auto ms = estimate_range(batches, RangeEstimator::mse(), 4, sym);
      EXPECT_LE(quantization_sse(all, spec_from_range(ms.min, ms.max, 4, sym)),
                quantization_sse(all, spec_from_range(mm.min, mm.max, 4, sym)));
    }
  }
}

TEST(RangeEstimators, MinMaxBulkErrorGrowsWithOutlier) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> bulk(5000);
  for (double& x : bulk) x = u(rng);
  double previous = 0.0;
  for (double m : {10.0, 100.0, 1000.0}) {
    auto v = bulk;
    v.push_back(m);
    std::vector<Tensor> b{batch_of(v)};
    const auto r = estimate_range(b, RangeEstimator::min_max(), 8, false);
    const double err = quantization_sse(bulk, spec_from_range(r.min, r.max, 8, false));
    if (previous > 0.0) EXPECT_GT(err, 10.0 * previous);
    previous = err;
  }
}

TEST(RangeEstimators, ContractsAndValidation) {
  EXPECT_THROW(estimate_range({}, RangeEstimator::min_max(), 8, false), ContractError);
  EXPECT_THROW(RangeEstimator::running_min_max(1.0).validate(), ConfigError);
  EXPECT_THROW(RangeEstimator::percentile(0.5).validate(), ConfigError);
  EXPECT_THROW(RangeEstimator::mse(1).validate(), ConfigError);
  RangeAccumulator acc(RangeEstimator::mse(), 8, false);
  acc.observe(std::vector<double>{1.0, 2.0});
  EXPECT_THROW(acc.finalize(), ContractError);
}

TEST(RangeEstimators, LabelsRoundTrip) {
  for (const auto& e : {RangeEstimator::min_max(), RangeEstimator::running_min_max(0.8, 4),
                        RangeEstimator::percentile(0.9999), RangeEstimator::mse(50)}) {
    EXPECT_EQ(RangeEstimator::parse(e.label()), e) << e.label();
  }
  EXPECT_EQ(RangeEstimator::parse("percentile:0.99999"), RangeEstimator::percentile(0.99999));
  EXPECT_EQ(RangeEstimator::parse("running_minmax"), RangeEstimator::running_min_max(0.9, 16));
  EXPECT_EQ(RangeEstimator::parse("mse"), RangeEstimator::mse(100));
  EXPECT_THROW(RangeEstimator::parse("percentile"), ConfigError);
  EXPECT_THROW(RangeEstimator::parse("median"), ConfigError);
  EXPECT_THROW(RangeEstimator::parse("mse:abc"), ConfigError);
  EXPECT_THROW(RangeEstimator::parse("minmax:3"), ConfigError);
}

// ---------------------------------------------------------------------------
// Harness on a tiny random model

class Harness : public ::testing::Test {
 protected:
  void SetUp() override {
    cfg_.vocab_size = 13;
    cfg_.max_seq_len = 8;
    cfg_.n_layers = 2;
    cfg_.d_ffn = 16;
    cfg_.attention = {8, 2, attention::ClippedSoftmaxConfig::from_alpha(4.0), false};
    cfg_.init_std = 0.3;
    params_ = model::init_params(cfg_, 5);
    std::mt19937_64 rng(8);
    std::uniform_int_distribution<std::int32_t> tok(0, 12);
    for (int b = 0; b < 4; ++b) {
      Batch batch(3, std::vector<std::int32_t>(8));
      for (auto& seq : batch)
        for (auto& t : seq) t = tok(rng);
      calib_.push_back(batch);
    }
    for (int i = 0; i < 6; ++i) {
      model::Example ex;
      ex.inputs.resize(8);
      ex.targets.assign(8, kIgnoreIndex);
      for (std::size_t j = 0; j < 8; ++j) {
        ex.inputs[j] = tok(rng);
        if (j % 3 == 0) ex.targets[j] = tok(rng);
      }
      eval_.push_back(ex);
    }
  }

  model::ModelConfig cfg_;
  model::ModelParams params_;
  std::vector<Batch> calib_;
  std::vector<model::Example> eval_;
};

TEST_F(Harness, SixteenBitsIsNearlyLossless) {
  // Evaluate on the calibration sequences with min-max ranges so no activation
  // falls outside its static range and only grid resolution is measured.
  std::vector<model::Example> seen;
  for (const auto& batch : calib_) {
    for (const auto& seq : batch) {
      model::Example ex{seq, std::vector<std::int32_t>(seq.size(), kIgnoreIndex)};
      for (std::size_t j = 0; j < seq.size(); j += 2) ex.targets[j] = seq[(j + 1) % seq.size()];
      seen.push_back(ex);
    }
  }
  QuantConfig q;
  q.w_bits = 16;
  q.a_bits = 16;
  q.act_estimator = RangeEstimator::min_max();
  const auto qm = calibrate_and_quantize(params_, cfg_, calib_, q);
  const double fp = model::perplexity(model::evaluate_nll(params_, cfg_, seen));
  const double qp = model::perplexity(evaluate_quantized(qm, seen));
  EXPECT_LT(std::abs(qp - fp) / fp, 1e-3);
}

TEST_F(Harness, SpecsCoverWeightsAndSites) {
  const auto qm = calibrate_and_quantize(params_, cfg_, calib_, QuantConfig{});
  for (const auto& p : params_.named_parameters()) {
    EXPECT_EQ(qm.weight_specs.count(p.name), is_quantized_weight(p) ? 1u : 0u) << p.name;
  }
  EXPECT_EQ(qm.weight_specs.count("lm_head.weight"), 0u);
  EXPECT_EQ(qm.weight_specs.count("embed.token"), 1u);
  for (const char* site : {"embedding", "embedding_ln", "layer0.attn.q", "layer0.attn.scores",
                           "layer0.attn.probs", "layer0.attn.context", "layer0.attn.out",
                           "layer0.attn_residual", "layer0.ln1", "layer0.ffn_hidden",
                           "layer0.ffn_act", "layer0.ffn_out", "layer1.ffn_residual",
                           "layer1.ln2"}) {
    EXPECT_EQ(qm.act_specs.count(site), 1u) << site;
  }
  for (const auto& [name, spec] : qm.weight_specs) {
    EXPECT_TRUE(spec.symmetric);
    spec.validate();
  }
  for (const auto& [site, spec] : qm.act_specs) {
    EXPECT_FALSE(spec.symmetric);
    spec.validate();
  }
  // Quantized weights lie on their grids.
  for (const auto& p : qm.params.named_parameters()) {
    auto it = qm.weight_specs.find(p.name);
    if (it == qm.weight_specs.end()) continue;
    for (double v : p.tensor.data()) ASSERT_EQ(quantize(v, it->second), v);
  }
}

TEST_F(Harness, DeterministicGivenCalibration) {
  QuantConfig q;
  q.act_estimator = RangeEstimator::mse();
  const auto a = calibrate_and_quantize(params_, cfg_, calib_, q);
  const auto b = calibrate_and_quantize(params_, cfg_, calib_, q);
  EXPECT_EQ(a.weight_specs, b.weight_specs);
  EXPECT_EQ(a.act_specs, b.act_specs);
  EXPECT_EQ(evaluate_quantized(a, eval_), evaluate_quantized(b, eval_));
}

TEST_F(Harness, WeightOnlyModeSkipsActivations) {
  QuantConfig q;
  q.a_bits = 0;
  const auto qm = calibrate_and_quantize(params_, cfg_, calib_, q);
  EXPECT_TRUE(qm.act_specs.empty());
  EXPECT_FALSE(qm.weight_specs.empty());
}

TEST_F(Harness, MissingCalibrationIsAContractError) {
  std::vector<Batch> none;
  EXPECT_THROW(calibrate_and_quantize(params_, cfg_, none, QuantConfig{}), ContractError);
}

TEST_F(Harness, SweepPreservesOrderAndMatchesSingleRuns) {
  std::vector<QuantConfig> configs(3);
  configs[1].w_bits = 4;
  configs[1].weight_estimator = RangeEstimator::mse();
  configs[2].w_bits = 6;
  configs[2].a_bits = 6;
  const auto rows = bitwidth_sweep(params_, cfg_, calib_, eval_, configs);
  ASSERT_EQ(rows.size(), 3u);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].config.w_bits, configs[i].w_bits);
    EXPECT_EQ(rows[i].config.a_bits, configs[i].a_bits);
    const auto qm = calibrate_and_quantize(params_, cfg_, calib_, configs[i]);
    EXPECT_EQ(rows[i].q_ppl, model::perplexity(evaluate_quantized(qm, eval_)));
  }
  const auto csv = sweep_csv(rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "w_bits,a_bits,weight_est,act_est,fp_ppl,q_ppl");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  const auto j = specs_to_json(calibrate_and_quantize(params_, cfg_, calib_, configs[0]));
  EXPECT_EQ(j.at("schema_version"), 1);
  EXPECT_TRUE(j.at("weights").contains("layer0.attn.query.weight"));
}

}  // namespace
