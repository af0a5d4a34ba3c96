#pragma once

// PretrainConfig and the JSON form of every configuration struct. Reading is
// strict: unknown keys and wrongly typed values raise ValidationError naming
// the dotted field path; missing keys keep their defaults.

#include <cstdint>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "dagman/codistill.hpp"
#include "dagman/encoder.hpp"
#include "dagman/masking.hpp"

namespace dagman {

using nlohmann::json;

struct PretrainConfig {
  EncoderConfig encoder;
  DistillConfig distill;
  MaskPolicy mask;
  MaskStrategy masking_strategy = MaskStrategy::attention;
  bool noisy_teacher = true;
  int steps = 200;
  int warmup_steps = 20;
  double base_lr = 5e-4;
  double weight_decay = 0.04;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 3.0;  // global L2 norm; 0 disables
  int batch_size = 8;
  std::uint64_t seed = 0;
  double student_path_drop = 0.1;
  int checkpoint_every = 0;  // steps between periodic checkpoints; 0 disables

  Triple crop_shape() const { return encoder.input_shape; }

  void validate() const {
    encoder.validate("encoder");
    distill.validate("distill");
    mask.validate("mask");
    detail::require(steps >= 0, "steps", "must be >= 0");
    detail::require(warmup_steps >= 0 && warmup_steps <= steps, "warmup_steps", "need 0 <= warmup_steps <= steps");
    detail::require(base_lr > 0.0, "base_lr", "must be > 0");
    detail::require(weight_decay >= 0.0, "weight_decay", "must be >= 0");
    detail::require(adam_beta1 >= 0.0 && adam_beta1 < 1.0, "adam_beta1", "must lie in [0, 1)");
    detail::require(adam_beta2 >= 0.0 && adam_beta2 < 1.0, "adam_beta2", "must lie in [0, 1)");
    detail::require(adam_eps > 0.0, "adam_eps", "must be > 0");
    detail::require(grad_clip >= 0.0, "grad_clip", "must be >= 0");
    detail::require(batch_size >= 1, "batch_size", "must be >= 1");
    detail::require(student_path_drop >= 0.0 && student_path_drop < 1.0, "student_path_drop", "must lie in [0, 1)");
    detail::require(checkpoint_every >= 0, "checkpoint_every", "must be >= 0");
    const bool needs_sa =
        masking_strategy == MaskStrategy::attention || masking_strategy == MaskStrategy::low_attention;
    detail::require(!needs_sa || encoder.semantic_attention, "masking_strategy",
                    "attention-ranked strategies need encoder.semantic_attention");
    if (masking_strategy == MaskStrategy::blockwise) {
      const Triple g = encoder.patch_grid();
      for (int i = 0; i < 3; ++i)
        detail::require(g[i] % mask.block_shape[i] == 0, "mask.block_shape[" + std::to_string(i) + "]",
                        "input-patch grid not divisible by block shape");
    }
  }
};

namespace detail {

class JsonReader {
 public:
  JsonReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ValidationError(path_.empty() ? "<root>" : path_, "expected a JSON object");
  }

  template <class V>
  void get(const std::string& key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const ValidationError&) {
      throw;
    } catch (const std::exception& e) {
      throw ValidationError(field(key), std::string("invalid value: ") + e.what());
    }
  }

  template <class Fn>
  void nested(const std::string& key, Fn&& fn) {
    seen_.insert(key);
    if (j_.contains(key)) fn(j_.at(key), field(key));
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ValidationError(field(k), "unknown field");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline json to_json(const EncoderConfig& c) {
  return {{"input_shape", c.input_shape},
          {"patch_size", c.patch_size},
          {"window_size", c.window_size},
          {"stage_depths", c.stage_depths},
          {"stage_heads", c.stage_heads},
          {"embed_dim", c.embed_dim},
          {"mlp_ratio", c.mlp_ratio},
          {"backbone", backbone_name(c.backbone)},
          {"semantic_attention", c.semantic_attention},
          {"sa_stage", c.sa_stage},
          {"sa_depth", c.sa_depth},
          {"sa_heads", c.sa_heads},
          {"learned_mask_token", c.learned_mask_token}};
}

inline void from_json(const json& j, EncoderConfig& c, const std::string& path = "encoder") {
  detail::JsonReader r(j, path);
  r.get("input_shape", c.input_shape);
  r.get("patch_size", c.patch_size);
  r.get("window_size", c.window_size);
  r.get("stage_depths", c.stage_depths);
  r.get("stage_heads", c.stage_heads);
  r.get("embed_dim", c.embed_dim);
  r.get("mlp_ratio", c.mlp_ratio);
  std::string backbone = backbone_name(c.backbone);
  r.get("backbone", backbone);
  if (backbone == "hierarchical")
    c.backbone = Backbone::hierarchical;
  else if (backbone == "plain-vit")
    c.backbone = Backbone::plain_vit;
  else
    throw ValidationError(r.field("backbone"), "expected 'hierarchical' or 'plain-vit'");
  r.get("semantic_attention", c.semantic_attention);
  r.get("sa_stage", c.sa_stage);
  r.get("sa_depth", c.sa_depth);
  r.get("sa_heads", c.sa_heads);
  r.get("learned_mask_token", c.learned_mask_token);
  r.finish();
}

inline json to_json(const DistillConfig& c) {
  return {{"tau_s", c.tau_s},
          {"tau_t", c.tau_t},
          {"lambda_m", c.lambda_m},
          {"momentum_cosine_ramp", c.momentum_cosine_ramp},
          {"center_momentum", c.center_momentum},
          {"lambda_aitd", c.lambda_aitd},
          {"lambda_ampd", c.lambda_ampd},
          {"lambda_gitd", c.lambda_gitd},
          {"k_cls", c.k_cls},
          {"k_patch", c.k_patch},
          {"k_g", c.k_g},
          {"head_hidden_ratio", c.head_hidden_ratio}};
}

inline void from_json(const json& j, DistillConfig& c, const std::string& path = "distill") {
  detail::JsonReader r(j, path);
  r.get("tau_s", c.tau_s);
  r.get("tau_t", c.tau_t);
  r.get("lambda_m", c.lambda_m);
  r.get("momentum_cosine_ramp", c.momentum_cosine_ramp);
  r.get("center_momentum", c.center_momentum);
  r.get("lambda_aitd", c.lambda_aitd);
  r.get("lambda_ampd", c.lambda_ampd);
  r.get("lambda_gitd", c.lambda_gitd);
  r.get("k_cls", c.k_cls);
  r.get("k_patch", c.k_patch);
  r.get("k_g", c.k_g);
  r.get("head_hidden_ratio", c.head_hidden_ratio);
  r.finish();
}

inline json to_json(const MaskPolicy& c) {
  return {{"r", c.r}, {"s", c.s}, {"r_t", c.r_t}, {"block_shape", c.block_shape}};
}

inline void from_json(const json& j, MaskPolicy& c, const std::string& path = "mask") {
  detail::JsonReader r(j, path);
  r.get("r", c.r);
  r.get("s", c.s);
  r.get("r_t", c.r_t);
  r.get("block_shape", c.block_shape);
  r.finish();
}

inline json to_json(const PretrainConfig& c) {
  return {{"encoder", to_json(c.encoder)},
          {"distill", to_json(c.distill)},
          {"mask", to_json(c.mask)},
          {"masking_strategy", strategy_name(c.masking_strategy)},
          {"noisy_teacher", c.noisy_teacher},
          {"steps", c.steps},
          {"warmup_steps", c.warmup_steps},
          {"base_lr", c.base_lr},
          {"weight_decay", c.weight_decay},
          {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},
          {"adam_eps", c.adam_eps},
          {"grad_clip", c.grad_clip},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"student_path_drop", c.student_path_drop},
          {"checkpoint_every", c.checkpoint_every}};
}

inline void from_json(const json& j, PretrainConfig& c, const std::string& path = "") {
  detail::JsonReader r(j, path);
  r.nested("encoder", [&](const json& v, const std::string& p) { from_json(v, c.encoder, p); });
  r.nested("distill", [&](const json& v, const std::string& p) { from_json(v, c.distill, p); });
  r.nested("mask", [&](const json& v, const std::string& p) { from_json(v, c.mask, p); });
  std::string strategy = strategy_name(c.masking_strategy);
  r.get("masking_strategy", strategy);
  c.masking_strategy = parse_strategy(strategy);
  r.get("noisy_teacher", c.noisy_teacher);
  r.get("steps", c.steps);
  r.get("warmup_steps", c.warmup_steps);
  r.get("base_lr", c.base_lr);
  r.get("weight_decay", c.weight_decay);
  r.get("adam_beta1", c.adam_beta1);
  r.get("adam_beta2", c.adam_beta2);
  r.get("adam_eps", c.adam_eps);
  r.get("grad_clip", c.grad_clip);
  r.get("batch_size", c.batch_size);
  r.get("seed", c.seed);
  r.get("student_path_drop", c.student_path_drop);
  r.get("checkpoint_every", c.checkpoint_every);
  r.finish();
}

inline json to_json(const SyntheticSpec& s) {
  return {{"shape", s.shape},
          {"num_lesions", s.num_lesions},
          {"lesion_radius_range", s.lesion_radius_range},
          {"lesion_intensity", s.lesion_intensity},
          {"background_noise_sigma", s.background_noise_sigma},
          {"class_id", s.class_id},
          {"num_classes", s.num_classes}};
}

inline void from_json(const json& j, SyntheticSpec& s, const std::string& path = "") {
  detail::JsonReader r(j, path);
  r.get("shape", s.shape);
  r.get("num_lesions", s.num_lesions);
  r.get("lesion_radius_range", s.lesion_radius_range);
  r.get("lesion_intensity", s.lesion_intensity);
  r.get("background_noise_sigma", s.background_noise_sigma);
  r.get("class_id", s.class_id);
  r.get("num_classes", s.num_classes);
  r.finish();
}

inline PretrainConfig pretrain_config_from_json(const json& j) {
  PretrainConfig c;
  from_json(j, c);
  c.validate();
  return c;
}

// First field (dotted path) whose value differs between two JSON trees.
inline std::string first_difference(const json& expected, const json& actual, const std::string& path = "") {
  if (expected.is_object() && actual.is_object()) {
    for (const auto& [k, v] : expected.items()) {
      const auto p = path.empty() ? k : path + "." + k;
      if (!actual.contains(k)) return p;
      if (auto d = first_difference(v, actual.at(k), p); !d.empty()) return d;
    }
    for (const auto& [k, v] : actual.items())
      if (!expected.contains(k)) return path.empty() ? k : path + "." + k;
    return {};
  }
  return expected == actual ? std::string{} : (path.empty() ? "<root>" : path);
}

}  // namespace dagman
