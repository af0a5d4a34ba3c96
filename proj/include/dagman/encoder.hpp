#pragma once

// 3D hierarchical windowed-attention encoder (four stages with patch
// merging) with an optional semantic-attention tap after one stage. The
// plain-vit backbone keeps a single resolution and attends globally.

#include <array>
#include <string>
#include <vector>

#include "dagman/layers.hpp"
#include "dagman/semantic_attention.hpp"
#include "dagman/volume.hpp"

namespace dagman {

enum class Backbone { hierarchical, plain_vit };

inline const char* backbone_name(Backbone b) { return b == Backbone::hierarchical ? "hierarchical" : "plain-vit"; }

inline constexpr int kStages = 4;

struct EncoderConfig {
  Triple input_shape{32, 32, 32};
  Triple patch_size{2, 2, 2};
  Triple window_size{2, 2, 2};
  std::array<int, kStages> stage_depths{1, 1, 2, 1};
  std::array<int, kStages> stage_heads{2, 2, 4, 4};
  int embed_dim = 24;
  double mlp_ratio = 4.0;
  Backbone backbone = Backbone::hierarchical;
  bool semantic_attention = true;
  int sa_stage = 3;
  int sa_depth = 2;
  int sa_heads = 0;  // 0: use the head count of the tapped stage
  bool learned_mask_token = false;

  bool hierarchical() const noexcept { return backbone == Backbone::hierarchical; }

  Triple patch_grid() const {
    return {input_shape[0] / patch_size[0], input_shape[1] / patch_size[1], input_shape[2] / patch_size[2]};
  }

  // Token grid of stage k (1-based).
  Triple stage_grid(int k) const {
    Triple g = patch_grid();
    if (hierarchical())
      for (int i = 0; i < 3; ++i) g[i] >>= (k - 1);
    return g;
  }

  int stage_width(int k) const { return hierarchical() ? embed_dim << (k - 1) : embed_dim; }

  // Window actually used at stage k: the configured window, clamped to the
  // grid; plain-vit attends over the whole grid.
  Triple stage_window(int k) const {
    const Triple g = stage_grid(k);
    if (!hierarchical()) return g;
    return {std::min(window_size[0], g[0]), std::min(window_size[1], g[1]), std::min(window_size[2], g[2])};
  }

  // Cyclic shift for block j of stage k: zero on even blocks, half a window on
  // odd blocks, and zero along any axis the window already spans.
  Triple block_shift(int k, int j) const {
    if (!hierarchical() || j % 2 == 0) return {0, 0, 0};
    const Triple g = stage_grid(k), w = stage_window(k);
    Triple s{};
    for (int i = 0; i < 3; ++i) s[i] = g[i] > w[i] ? w[i] / 2 : 0;
    return s;
  }

  int resolved_sa_heads() const { return sa_heads > 0 ? sa_heads : stage_heads[sa_stage - 1]; }
  Triple sa_grid() const { return stage_grid(sa_stage); }
  int sa_width() const { return stage_width(sa_stage); }

  // Ratio between the input-patch grid and the SA grid along each axis.
  Triple sa_upsample_factor() const {
    const Triple a = patch_grid(), b = sa_grid();
    return {a[0] / b[0], a[1] / b[1], a[2] / b[2]};
  }

  // Voxel extent covered by one final-stage token.
  Triple final_token_extent() const {
    Triple e = patch_size;
    if (hierarchical())
      for (int i = 0; i < 3; ++i) e[i] <<= (kStages - 1);
    return e;
  }

  void validate(const std::string& prefix = "encoder") const {
    auto f = [&](const std::string& field) { return prefix + "." + field; };
    for (int i = 0; i < 3; ++i) {
      const auto idx = "[" + std::to_string(i) + "]";
      detail::require(patch_size[i] >= 1, f("patch_size" + idx), "must be >= 1");
      detail::require(window_size[i] >= 1, f("window_size" + idx), "must be >= 1");
      detail::require(input_shape[i] >= 1 && input_shape[i] % patch_size[i] == 0, f("input_shape" + idx),
                      "input shape must be divisible by patch_size");
      if (hierarchical())
        detail::require(patch_grid()[i] % (1 << (kStages - 1)) == 0, f("input_shape" + idx),
                        "patch grid must be divisible by 8 for three 2x merges");
    }
    detail::require(embed_dim >= 1, f("embed_dim"), "must be >= 1");
    detail::require(mlp_ratio > 0.0, f("mlp_ratio"), "must be > 0");
    for (int k = 1; k <= kStages; ++k) {
      const auto idx = "[" + std::to_string(k - 1) + "]";
      detail::require(stage_depths[k - 1] >= 0, f("stage_depths" + idx), "must be >= 0");
      detail::require(stage_heads[k - 1] >= 1 && stage_width(k) % stage_heads[k - 1] == 0, f("stage_heads" + idx),
                      "head count must divide the stage width " + std::to_string(stage_width(k)));
      const Triple g = stage_grid(k), w = stage_window(k);
      for (int i = 0; i < 3; ++i)
        detail::require(g[i] % w[i] == 0, f("window_size[" + std::to_string(i) + "]"),
                        "stage " + std::to_string(k) + " grid not divisible by window");
    }
    detail::require(sa_stage >= 1 && sa_stage <= kStages, f("sa_stage"), "must be in 1..4");
    if (semantic_attention) {
      detail::require(sa_depth >= 1, f("sa_depth"), "must be >= 1");
      detail::require(resolved_sa_heads() >= 1 && sa_width() % resolved_sa_heads() == 0, f("sa_heads"),
                      "head count must divide the SA width");
    }
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

template <class T>
struct MergeParams {
  NormParams<T> norm;
  LinearParams<T> reduction;  // [8D x 2D], no bias
};

// Attention probabilities captured for one attention layer.
template <class T>
struct LayerAttention {
  int stage = 0;  // 1..4
  int layer = 0;
  int heads = 0;
  Triple window{};
  std::int64_t windows = 0;
  std::vector<T> probs;  // [window][head][query][key]
};

template <class T>
struct ForwardOptions {
  const std::vector<T>* keep = nullptr;  // input-patch keep mask (1 visible, 0 masked)
  bool stop_after_tap = false;           // skip the stages after the SA tap
  PathDrop path_drop{};
  std::vector<LayerAttention<T>>* attention = nullptr;
};

template <class T>
struct StageOutputs {
  std::vector<TokenGrid<T>> stages;  // output of each stage's blocks
  TokenGrid<T> sa_tokens;            // tokens flowing on from the tap (after SA when attached)
  Var<T> tap_features;               // normalised patch tokens at the tap [N_tap x D_tap]
  Var<T> cls;                        // normalised [CLS] embedding [1 x D_tap]; null without SA
  Matrix<T> cls_attention;           // [heads x (N_tap + 1)]
  Var<T> final_tokens;               // normalised last-stage tokens
  Var<T> pooled;                     // mean of final_tokens [1 x D_4]
  bool complete = false;
};

// Patch rows of a volume: row t holds the voxels of patch t, C-order inside.
template <class T>
Matrix<T> extract_patches(const Volume& view, const Triple& patch) {
  Triple grid{};
  for (int i = 0; i < 3; ++i) {
    detail::require(view.shape[i] % patch[i] == 0, "patch_size[" + std::to_string(i) + "]",
                    "crop shape not divisible by patch size");
    grid[i] = view.shape[i] / patch[i];
  }
  const auto pv = product(patch);
  Matrix<T> rows(product(grid), pv);
  for (int gz = 0; gz < grid[0]; ++gz)
    for (int gy = 0; gy < grid[1]; ++gy)
      for (int gx = 0; gx < grid[2]; ++gx) {
        const auto r = flat_index(grid, gz, gy, gx);
        Eigen::Index c = 0;
        for (int z = 0; z < patch[0]; ++z)
          for (int y = 0; y < patch[1]; ++y)
            for (int x = 0; x < patch[2]; ++x)
              rows(r, c++) = static_cast<T>(view.at(gz * patch[0] + z, gy * patch[1] + y, gx * patch[2] + x));
      }
  return rows;
}

// Index map for the 2x2x2 merge: output cell r takes inputs index[8r .. 8r+7]
// in (dz, dy, dx) lexicographic order.
inline std::vector<std::int64_t> merge_index(const Triple& grid) {
  for (int i = 0; i < 3; ++i)
    detail::require(grid[i] % 2 == 0, "grid[" + std::to_string(i) + "]", "patch merge needs even grid dimensions");
  const Triple half{grid[0] / 2, grid[1] / 2, grid[2] / 2};
  std::vector<std::int64_t> idx;
  idx.reserve(static_cast<std::size_t>(product(grid)));
  for (int z = 0; z < half[0]; ++z)
    for (int y = 0; y < half[1]; ++y)
      for (int x = 0; x < half[2]; ++x)
        for (int dz = 0; dz < 2; ++dz)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) idx.push_back(flat_index(grid, 2 * z + dz, 2 * y + dy, 2 * x + dx));
  return idx;
}

template <class T>
TokenGrid<T> patch_merge(Tape<T>& tape, const TokenGrid<T>& x, const MergeParams<T>& p) {
  auto idx = std::make_shared<const std::vector<std::int64_t>>(merge_index(x.grid));
  Var<T> cat = ag::gather_rows(tape, x.tokens, idx, 8);
  Var<T> y = apply(tape, p.reduction, apply(tape, p.norm, cat));
  return {y, {x.grid[0] / 2, x.grid[1] / 2, x.grid[2] / 2}, x.stage + 1};
}

template <class T>
class Encoder {
 public:
  Encoder(const EncoderConfig& cfg, ParamSet<T>& ps, Engine& eng) : cfg_(cfg) {
    cfg_.validate();
    const int d0 = cfg_.embed_dim;
    patch_ = make_linear(ps, "encoder.patch_embed", static_cast<int>(product(cfg_.patch_size)), d0, eng);
    pos_ = ps.add("encoder.pos_embed", init::trunc_normal<T>(product(cfg_.patch_grid()), d0, 0.02, eng), false);
    if (cfg_.learned_mask_token) mask_token_ = ps.add("encoder.mask_token", init::trunc_normal<T>(1, d0, 0.02, eng), false);
    for (int k = 1; k <= kStages; ++k) {
      const int width = cfg_.stage_width(k);
      const Triple window = cfg_.stage_window(k);
      auto& stage = stages_[k - 1];
      for (int j = 0; j < cfg_.stage_depths[k - 1]; ++j) {
        const auto name = "encoder.stage" + std::to_string(k) + ".block" + std::to_string(j);
        const WindowPlan plan = make_window_plan(cfg_.stage_grid(k), window, cfg_.block_shift(k, j));
        stage.push_back(make_block(ps, name, width, cfg_.stage_heads[k - 1], cfg_.mlp_ratio,
                                   cfg_.hierarchical() ? plan.bias_rows : 0, eng));
        plans_[k - 1].push_back(plan);
      }
      if (k < kStages && cfg_.hierarchical()) {
        const auto name = "encoder.merge" + std::to_string(k);
        merges_[k - 1] = {make_norm(ps, name + ".norm", 8 * width), make_linear(ps, name + ".reduction", 8 * width, 2 * width, eng, false)};
      }
      if (k == cfg_.sa_stage) {
        if (cfg_.semantic_attention)
          sa_ = make_sa_params(ps, "sa", width, cfg_.resolved_sa_heads(), cfg_.sa_depth, cfg_.mlp_ratio, eng);
        tap_norm_ = make_norm(ps, "encoder.tap_norm", width);
      }
    }
    final_norm_ = make_norm(ps, "encoder.final_norm", cfg_.stage_width(kStages));
  }

  const EncoderConfig& config() const noexcept { return cfg_; }
  bool has_sa() const noexcept { return cfg_.semantic_attention; }
  const SAParams<T>& sa() const { return sa_; }
  const std::vector<BlockParams<T>>& stage_blocks(int k) const { return stages_[k - 1]; }
  const std::vector<WindowPlan>& stage_plans(int k) const { return plans_[k - 1]; }
  const MergeParams<T>& merge(int k) const { return merges_[k - 1]; }
  const LinearParams<T>& patch_projection() const { return patch_; }
  const Var<T>& position_encoding() const { return pos_; }

  // Linear projection of every non-overlapping patch, masking (zeroing, or the
  // learned mask token when enabled), then the additive position encoding.
  TokenGrid<T> patch_embed(Tape<T>& tape, const Volume& view, const std::vector<T>* keep = nullptr) const {
    for (int i = 0; i < 3; ++i)
      detail::require(view.shape[i] == cfg_.input_shape[i], "view.shape[" + std::to_string(i) + "]",
                      "crop shape does not match encoder input_shape");
    Var<T> x = apply(tape, patch_, ag::constant<T>(extract_patches<T>(view, cfg_.patch_size)));
    if (keep) {
      detail::require(static_cast<Eigen::Index>(keep->size()) == x->value.rows(), "mask", "length mismatch");
      x = ag::scale_rows(tape, x, *keep);
      if (mask_token_) {
        std::vector<T> masked(keep->size());
        for (std::size_t i = 0; i < masked.size(); ++i) masked[i] = T(1) - (*keep)[i];
        x = ag::add_weighted_row(tape, x, mask_token_, std::move(masked));
      }
    }
    return {ag::add(tape, x, pos_), cfg_.patch_grid(), 1};
  }

  StageOutputs<T> forward(Tape<T>& tape, const Volume& view, const ForwardOptions<T>& opt = {}) const {
    StageOutputs<T> out;
    TokenGrid<T> x = patch_embed(tape, view, opt.keep);
    for (int k = 1; k <= kStages; ++k) {
      if (k > 1 && cfg_.hierarchical()) x = patch_merge(tape, x, merges_[k - 2]);
      x.stage = k;
      for (std::size_t j = 0; j < stages_[k - 1].size(); ++j) {
        std::vector<T>* capture = nullptr;
        if (opt.attention) {
          const auto& plan = plans_[k - 1][j];
          opt.attention->push_back({k, static_cast<int>(j), cfg_.stage_heads[k - 1], plan.window, plan.windows, {}});
          capture = &opt.attention->back().probs;
        }
        x.tokens = transformer_block(tape, x.tokens, stages_[k - 1][j], plans_[k - 1][j], opt.path_drop, capture);
      }
      out.stages.push_back(x);
      if (k == cfg_.sa_stage) {
        if (cfg_.semantic_attention) {
          auto sa = sa_forward(tape, attach_cls(tape, x, sa_), x.grid, k, sa_, opt.path_drop);
          Var<T> normed = apply(tape, tap_norm_, sa.sequence);
          out.tap_features = ag::slice_rows(tape, normed, 0, x.size());
          out.cls = ag::slice_rows(tape, normed, x.size(), 1);
          out.cls_attention = std::move(sa.cls_attention);
          x = sa.tokens;
        } else {
          out.tap_features = apply(tape, tap_norm_, x.tokens);
        }
        out.sa_tokens = x;
        if (opt.stop_after_tap) return out;
      }
    }
    out.final_tokens = apply(tape, final_norm_, x.tokens);
    out.pooled = ag::mean_rows(tape, out.final_tokens);
    out.complete = true;
    return out;
  }

 private:
  EncoderConfig cfg_;
  LinearParams<T> patch_;
  Var<T> pos_;
  Var<T> mask_token_;
  std::array<std::vector<BlockParams<T>>, kStages> stages_;
  std::array<std::vector<WindowPlan>, kStages> plans_;
  std::array<MergeParams<T>, kStages - 1> merges_;
  SAParams<T> sa_;
  NormParams<T> tap_norm_;
  NormParams<T> final_norm_;
};

}  // namespace dagman
