#include <gtest/gtest.h>

#include <fstream>

#include "support.hpp"

using namespace dagman;

namespace {

std::string field_of(const json& j) {
  try {
    pretrain_config_from_json(j);
  } catch (const ValidationError& e) {
    return e.field();
  }
  return {};
}

json read(const std::string& name) {
  std::ifstream in(std::string(DAGMAN_SOURCE_DIR) + "/presets/" + name);
  EXPECT_TRUE(in.good()) << name;
  return json::parse(in);
}

}  // namespace

TEST(Config, DefaultsRoundTrip) {
  PretrainConfig c;
  c.masking_strategy = MaskStrategy::low_attention;
  c.encoder.window_size = {4, 2, 2};
  c.distill.k_g = 64;
  c.mask.block_shape = {2, 4, 2};
  c.seed = 1234567890123ULL;
  const json j = to_json(c);
  const PretrainConfig d = pretrain_config_from_json(j);
  EXPECT_EQ(to_json(d), j);
  EXPECT_EQ(d.encoder, c.encoder);
  EXPECT_EQ(d.distill, c.distill);
  EXPECT_EQ(d.seed, c.seed);
}

TEST(Config, EmptyObjectGivesDefaults) {
  EXPECT_EQ(to_json(pretrain_config_from_json(json::object())), to_json(PretrainConfig{}));
}

TEST(Config, ErrorsNameTheDottedField) {
  EXPECT_EQ(field_of({{"encoder", {{"embed_dims", 8}}}}), "encoder.embed_dims");
  EXPECT_EQ(field_of({{"distill", {{"tau_t", "cold"}}}}), "distill.tau_t");
  EXPECT_EQ(field_of({{"distill", {{"tau_t", -1.0}}}}), "distill.tau_t");
  EXPECT_EQ(field_of({{"mask", {{"r", 1.5}}}}), "mask.r");
  EXPECT_EQ(field_of({{"mask", {{"r", 0.5}, {"s", 0.6}}}}), "mask.s");
  EXPECT_EQ(field_of({{"warmup_steps", 300}}), "warmup_steps");
  EXPECT_EQ(field_of({{"base_lr", 0.0}}), "base_lr");
  EXPECT_EQ(field_of({{"masking_strategy", "grid"}}), "masking_strategy");
  EXPECT_EQ(field_of({{"encoder", {{"backbone", "cnn"}}}}), "encoder.backbone");
  EXPECT_EQ(field_of({{"encoder", {{"stage_heads", {2, 2, 5, 4}}}}}), "encoder.stage_heads[2]");
  EXPECT_EQ(field_of({{"encoder", {{"semantic_attention", false}}}}), "masking_strategy");
  EXPECT_EQ(field_of({{"masking_strategy", "blockwise"}, {"mask", {{"block_shape", {3, 4, 4}}}}}),
            "mask.block_shape[0]");
  EXPECT_EQ(field_of({{"bogus", 1}}), "bogus");
  EXPECT_EQ(field_of(json::array()), "<root>");
}

TEST(Config, RandomStrategyWorksWithoutSemanticAttention) {
  EXPECT_EQ(field_of({{"encoder", {{"semantic_attention", false}}}, {"masking_strategy", "random"}}), "");
}

TEST(Config, FirstDifference) {
  const json a{{"x", 1}, {"y", {{"z", 2}, {"w", 3}}}};
  json b = a;
  EXPECT_EQ(first_difference(a, b), "");
  b["y"]["w"] = 4;
  EXPECT_EQ(first_difference(a, b), "y.w");
  EXPECT_EQ(first_difference(a, b, "root"), "root.y.w");
  b = a;
  b["extra"] = 0;
  EXPECT_EQ(first_difference(a, b), "extra");
}

TEST(Config, SyntheticSpecJson) {
  SyntheticSpec s;
  s.shape = {16, 16, 8};
  s.num_classes = 3;
  SyntheticSpec t;
  from_json(to_json(s), t);
  EXPECT_EQ(to_json(t), to_json(s));
  json bad = to_json(s);
  bad["radius"] = 2;
  try {
    from_json(bad, t);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.field(), "radius");
  }
}

TEST(Presets, DeskPresetIsTheDeskConfiguration) {
  const PretrainConfig c = pretrain_config_from_json(read("desk.json"));
  EXPECT_EQ(c.encoder.input_shape, (Triple{32, 32, 32}));
  EXPECT_EQ(c.encoder.embed_dim, 24);
  EXPECT_EQ(c.encoder.stage_depths, (std::array<int, 4>{1, 1, 2, 1}));
  EXPECT_EQ(c.batch_size, 8);
  EXPECT_EQ(c.steps, 200);
}

TEST(Presets, FullScalePresetSchedule) {
  const PretrainConfig c = pretrain_config_from_json(read("paper.json"));
  EXPECT_EQ(c.encoder.stage_depths, (std::array<int, 4>{2, 2, 8, 2}));
  EXPECT_EQ(c.encoder.stage_heads, (std::array<int, 4>{4, 4, 8, 16}));
  EXPECT_DOUBLE_EQ(c.base_lr, 8e-4);
  EXPECT_DOUBLE_EQ(c.student_path_drop, 0.1);
  EXPECT_DOUBLE_EQ(c.mask.r, 0.7);
  EXPECT_DOUBLE_EQ(c.mask.s, 0.1);
  EXPECT_DOUBLE_EQ(c.mask.r_t, 0.7);
  EXPECT_DOUBLE_EQ(c.distill.tau_s, 0.1);
  EXPECT_DOUBLE_EQ(c.distill.tau_t, 0.04);
  EXPECT_DOUBLE_EQ(c.distill.lambda_aitd, 0.1);
}
