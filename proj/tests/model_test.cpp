#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "gradcheck.hpp"
#include "olab/errors.hpp"
#include "olab/model.hpp"

namespace {

using namespace olab;
using namespace olab::model;
namespace attn = olab::attention;

ModelConfig tiny_config(attn::AttentionVariant variant, LnPlacement placement) {
  ModelConfig cfg;
  cfg.vocab_size = 11;
  cfg.max_seq_len = 6;
  cfg.n_layers = 2;
  cfg.d_ffn = 12;
  cfg.attention = {8, 2, std::move(variant), false};
  cfg.ln_placement = placement;
  cfg.init_std = 0.3;
  return cfg;
}

std::vector<attn::AttentionVariant> all_variants() {
  attn::GatingConfig mlp;
  mlp.design = attn::GatingDesign::Mlp;
  mlp.n_hid = 3;
  attn::GatingConfig all_heads;
  all_heads.design = attn::GatingDesign::AllHeadsLinear;
  return {attn::Vanilla{}, attn::ClippedSoftmaxConfig::fixed(-0.03, 1.03),
          attn::GatingConfig{}, mlp, all_heads};
}

std::vector<Tensor> tensors_of(const ModelParams& p) {
  std::vector<Tensor> out;
  for (const auto& n : p.named_parameters()) out.push_back(n.tensor);
  return out;
}

void zero(Tensor t) {
  for (double& v : t.mutable_data()) v = 0.0;
}

const std::vector<std::int32_t> kTokens{1, 4, 7, 2, 9, 3};
const std::vector<std::int32_t> kTargets{4, kIgnoreIndex, 0, 5, kIgnoreIndex, 10};

TEST(Model, PureResidualWhenSublayersAreZero) {
  auto cfg = tiny_config(attn::Vanilla{}, LnPlacement::PreLN);
  cfg.n_layers = 1;
  auto params = init_params(cfg, 3);
  auto& b = params.blocks[0];
  zero(b.attn.output.weight);
  zero(b.attn.output.bias);
  zero(b.fc2.weight);
  zero(b.fc2.bias);

  struct Capture : ActivationObserver {
    Tensor embedding;
    Tensor observe(const std::string& site, const Tensor& x) override {
      if (site == "embedding") embedding = x;
      return x;
    }
  } capture;
  ForwardOptions opts;
  opts.observer = &capture;
  auto out = forward(params, cfg, kTokens, opts);
  ASSERT_TRUE(capture.embedding.defined());
  const auto in = capture.embedding.data();
  const auto block = out.layers[0].block_output.data();
  for (std::size_t i = 0; i < in.size(); ++i) EXPECT_EQ(block[i], in[i]);
}

TEST(Model, LogitsShapeForRandomConfigs) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    ModelConfig cfg;
    cfg.vocab_size = 3 + rng() % 40;
    cfg.max_seq_len = 1 + rng() % 16;
    cfg.n_layers = 1 + rng() % 3;
    const std::size_t heads = 1 + rng() % 4;
    cfg.attention = {heads * (1 + rng() % 4), heads, attn::Vanilla{}, trial % 2 == 0};
    cfg.d_ffn = cfg.attention.d_model * 2;
    cfg.ln_placement = trial % 3 == 0 ? LnPlacement::PreLN : LnPlacement::PostLN;
    auto params = init_params(cfg, trial);
    std::vector<std::int32_t> ids(1 + rng() % cfg.max_seq_len);
    for (auto& id : ids) id = static_cast<std::int32_t>(rng() % cfg.vocab_size);
    auto out = forward(params, cfg, ids);
    EXPECT_EQ(out.logits.shape(), (Shape{ids.size(), cfg.vocab_size}));
    EXPECT_EQ(out.layers.size(), cfg.n_layers);
  }
}

TEST(Model, RejectsOverlongSequenceAndBadIds) {
  auto cfg = tiny_config(attn::Vanilla{}, LnPlacement::PostLN);
  auto params = init_params(cfg, 1);
  std::vector<std::int32_t> longer(cfg.max_seq_len + 1, 0);
  EXPECT_THROW(forward(params, cfg, longer), ContractError);
  std::vector<std::int32_t> bad{0, 11};
  EXPECT_THROW(forward(params, cfg, bad), ContractError);
}

class ModelGradient
    : public ::testing::TestWithParam<std::tuple<LnPlacement, std::size_t>> {};

TEST_P(ModelGradient, FullModelMatchesFiniteDifferences) {
  const auto [placement, variant_index] = GetParam();
  auto cfg = tiny_config(all_variants()[variant_index], placement);
  auto params = init_params(cfg, 17 + variant_index);
  auto loss_fn = [&] {
    auto out = forward(params, cfg, kTokens);
    return add(loss(out.logits, kTargets), activation_regularizer(out.layers, 0.1));
  };
  EXPECT_LT(olab::testing::gradient_error(loss_fn, tensors_of(params)), 1e-4);
}

std::string gradient_case_name(
    const ::testing::TestParamInfo<std::tuple<LnPlacement, std::size_t>>& info) {
  static const char* kNames[] = {"vanilla", "clipped", "gated_linear", "gated_mlp",
                                 "gated_all_heads"};
  const bool pre = std::get<0>(info.param) == LnPlacement::PreLN;
  return std::string(pre ? "pre_ln_" : "post_ln_") + kNames[std::get<1>(info.param)];
}

INSTANTIATE_TEST_SUITE_P(PlacementsAndVariants, ModelGradient,
                         ::testing::Combine(::testing::Values(LnPlacement::PreLN,
                                                              LnPlacement::PostLN),
                                            ::testing::Range<std::size_t>(0, 5)),
                         gradient_case_name);

TEST(Model, UniformLogitsGiveLnVocabLoss) {
  Tensor logits = Tensor::zeros({3, 4});
  std::vector<std::int32_t> t{0, 3, 1};
  const double l = loss(logits, t).item();
  EXPECT_NEAR(l, std::log(4.0), 1e-15);
  EXPECT_NEAR(perplexity(l), 4.0, 1e-12);
  EXPECT_EQ(perplexity(l), std::exp(l));
}

TEST(Model, ConfidentLogitsGiveNearZeroLoss) {
  Tensor logits = Tensor::from({1, 3}, {50.0, 0.0, 0.0});
  std::vector<std::int32_t> t{0};
  EXPECT_LT(loss(logits, t).item(), 1e-20);
}

TEST(Model, RegularizerExamples) {
  LayerActivations a;
  a.ffn_output = Tensor::from({1, 2}, {1.0, -1.0});
  std::vector<LayerActivations> layers{a};
  EXPECT_EQ(activation_regularizer(layers, 0.0).item(), 0.0);
  EXPECT_EQ(activation_regularizer(layers, 1.0).item(), 1.0);

  LayerActivations b;
  b.ffn_output = Tensor::from({2, 2}, {0.3, -1.2, 2.5, 0.7});
  LayerActivations b2;
  b2.ffn_output = scale(b.ffn_output, 2.0);
  const double r1 = activation_regularizer({b}, 0.4).item();
  const double r2 = activation_regularizer({b2}, 0.4).item();
  EXPECT_NEAR(r2, 4.0 * r1, 1e-14);
  EXPECT_THROW(activation_regularizer(layers, -1.0), ConfigError);
}

TEST(Model, ForwardIsDeterministic) {
  auto cfg = tiny_config(attn::GatingConfig{}, LnPlacement::PostLN);
  auto params = init_params(cfg, 8);
  auto a = forward(params, cfg, kTokens).logits;
  auto b = forward(params, cfg, kTokens).logits;
  ASSERT_EQ(a.numel(), b.numel());
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Model, DropoutOnlyAtTrainTimeAndSeeded) {
  auto cfg = tiny_config(attn::Vanilla{}, LnPlacement::PreLN);
  cfg.dropout_p = 0.3;
  auto params = init_params(cfg, 8);
  ForwardOptions train;
  train.train = true;
  train.dropout_seed = 42;
  auto eval = forward(params, cfg, kTokens).logits;
  auto t1 = forward(params, cfg, kTokens, train).logits;
  auto t2 = forward(params, cfg, kTokens, train).logits;
  train.dropout_seed = 43;
  auto t3 = forward(params, cfg, kTokens, train).logits;
  bool differs_from_eval = false;
  bool differs_by_seed = false;
  for (std::size_t i = 0; i < eval.numel(); ++i) {
    EXPECT_EQ(t1[i], t2[i]);
    differs_from_eval |= t1[i] != eval[i];
    differs_by_seed |= t1[i] != t3[i];
  }
  EXPECT_TRUE(differs_from_eval);
  EXPECT_TRUE(differs_by_seed);
}

TEST(Model, InitIsSeeded) {
  auto cfg = tiny_config(attn::GatingConfig{}, LnPlacement::PostLN);
  auto a = init_params(cfg, 4).named_parameters();
  auto b = init_params(cfg, 4).named_parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_TRUE(std::equal(a[i].tensor.data().begin(), a[i].tensor.data().end(),
                           b[i].tensor.data().begin()));
  }
}

TEST(Model, NamedParametersCoverPlacementSpecificNorms) {
  auto post = init_params(tiny_config(attn::Vanilla{}, LnPlacement::PostLN), 1);
  auto pre = init_params(tiny_config(attn::Vanilla{}, LnPlacement::PreLN), 1);
  auto has = [](const ModelParams& p, const std::string& name) {
    for (const auto& n : p.named_parameters())
      if (n.name == name) return true;
    return false;
  };
  EXPECT_TRUE(has(post, "embed.ln.gamma"));
  EXPECT_FALSE(has(post, "final_ln.gamma"));
  EXPECT_TRUE(has(pre, "final_ln.gamma"));
  EXPECT_FALSE(has(pre, "embed.ln.gamma"));
  EXPECT_TRUE(has(pre, "layer1.ffn.fc2.weight"));
  EXPECT_EQ(post.parameter_count(), pre.parameter_count());
}

TEST(Model, CloneIsDeep) {
  auto cfg = tiny_config(attn::GatingConfig{}, LnPlacement::PostLN);
  auto params = init_params(cfg, 2);
  auto copy = params.clone();
  const double before = params.blocks[0].attn.gate->w1[0];
  copy.blocks[0].attn.gate->w1.mutable_data()[0] += 1.0;
  EXPECT_EQ(params.blocks[0].attn.gate->w1[0], before);
}

TEST(ModelConfigJson, RoundTripsEveryVariant) {
  for (auto placement : {LnPlacement::PreLN, LnPlacement::PostLN}) {
    for (const auto& v : all_variants()) {
      auto cfg = tiny_config(v, placement);
      const auto j = to_json(cfg);
      const auto back = model_config_from_json(j);
      EXPECT_EQ(to_json(back), j);
    }
  }
  auto alpha = tiny_config(attn::ClippedSoftmaxConfig::from_alpha(4.0), LnPlacement::PreLN);
  EXPECT_EQ(to_json(model_config_from_json(to_json(alpha))), to_json(alpha));
}

TEST(ModelConfigJson, ErrorsNameTheField) {
  auto j = to_json(tiny_config(attn::ClippedSoftmaxConfig::fixed(-0.03), LnPlacement::PostLN));
  j["attention"]["gamma"] = 0.5;
  try {
    model_config_from_json(j);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("model.attention.gamma"), std::string::npos) << e.what();
  }
  auto k = to_json(tiny_config(attn::Vanilla{}, LnPlacement::PostLN));
  k["colour"] = 1;
  EXPECT_THROW(model_config_from_json(k), ConfigError);
  auto m = to_json(tiny_config(attn::Vanilla{}, LnPlacement::PostLN));
  m["d_ffn"] = 4;
  try {
    model_config_from_json(m);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("model.d_ffn"), std::string::npos) << e.what();
  }
}

TEST(ModelConfigJson, PiInitSetsBias) {
  auto j = to_json(tiny_config(attn::GatingConfig{}, LnPlacement::PostLN));
  j["attention"].erase("b_init");
  j["attention"]["pi_init"] = 0.25;
  auto cfg = model_config_from_json(j);
  EXPECT_NEAR(std::get<attn::GatingConfig>(cfg.attention.variant).b_init, std::log(1.0 / 3.0),
              1e-15);
}

class CheckpointTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = std::filesystem::temp_directory_path() /
           ("olab_ckpt_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
            "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    std::filesystem::create_directories(dir_);
  }
  void TearDown() override { std::filesystem::remove_all(dir_); }
  std::filesystem::path dir_;
};

TEST_F(CheckpointTest, RoundTripIsExact) {
  auto cfg = tiny_config(attn::GatingConfig{}, LnPlacement::PreLN);
  auto params = init_params(cfg, 9);
  const auto path = dir_ / "m.ckpt";
  save_checkpoint(path, cfg, params, {{"step", 12}});
  auto ck = load_checkpoint(path);
  EXPECT_EQ(to_json(ck.config), to_json(cfg));
  EXPECT_EQ(ck.metadata.at("step"), 12);
  auto a = params.named_parameters();
  auto b = ck.params.named_parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_EQ(a[i].tensor.shape(), b[i].tensor.shape());
    EXPECT_TRUE(std::equal(a[i].tensor.data().begin(), a[i].tensor.data().end(),
                           b[i].tensor.data().begin()))
        << a[i].name;
  }
  auto l1 = forward(params, cfg, kTokens).logits;
  auto l2 = forward(ck.params, cfg, kTokens).logits;
  for (std::size_t i = 0; i < l1.numel(); ++i) EXPECT_EQ(l1[i], l2[i]);
}

TEST_F(CheckpointTest, DetectsCorruptionAndTruncation) {
  auto cfg = tiny_config(attn::Vanilla{}, LnPlacement::PostLN);
  const auto path = dir_ / "m.ckpt";
  save_checkpoint(path, cfg, init_params(cfg, 1));
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& b) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(b.data(), static_cast<std::streamsize>(b.size()));
  };
  std::string flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  write(flipped);
  EXPECT_THROW(load_checkpoint(path), CheckpointError);
  write(bytes.substr(0, bytes.size() - 20));
  EXPECT_THROW(load_checkpoint(path), CheckpointError);
  write("not a checkpoint");
  EXPECT_THROW(load_checkpoint(path), CheckpointError);
  EXPECT_THROW(load_checkpoint(dir_ / "missing.ckpt"), CheckpointError);
}

}  // namespace
