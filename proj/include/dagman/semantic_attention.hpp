#pragma once

// Semantic-attention (SA) module: a learned [CLS] token appended to the
// tokens of one encoder stage, two global pre-norm transformer blocks, and the
// head-averaged [CLS]-to-patch attention vector used to rank tokens.

#include <cmath>
#include <string>
#include <vector>

#include "dagman/layers.hpp"

namespace dagman {

template <class T>
struct SAParams {
  Var<T> cls;  // [1 x D]
  std::vector<BlockParams<T>> blocks;
  int heads = 1;
  int width = 0;
};

template <class T>
SAParams<T> make_sa_params(ParamSet<T>& ps, const std::string& name, int width, int heads, int depth,
                           double mlp_ratio, Engine& eng) {
  detail::require(heads >= 1 && width % heads == 0, name + ".heads", "head count must divide the SA width");
  SAParams<T> p;
  p.width = width;
  p.heads = heads;
  p.cls = ps.add(name + ".cls", init::trunc_normal<T>(1, width, 0.02, eng), false);
  for (int i = 0; i < depth; ++i)
    p.blocks.push_back(make_block(ps, name + ".block" + std::to_string(i), width, heads, mlp_ratio, 0, eng));
  return p;
}

// Plan for unpermuted global attention over n tokens.
inline WindowPlan global_plan(std::int64_t n) {
  WindowPlan plan;
  plan.window_tokens = static_cast<int>(n);
  plan.windows = 1;
  plan.identity = true;
  return plan;
}

// Appends the [CLS] vector as row N (0-based); patch rows are copied as-is.
template <class T>
Var<T> attach_cls(Tape<T>& tape, const TokenGrid<T>& x, const SAParams<T>& p) {
  return ag::concat_rows(tape, x.tokens, p.cls);
}

template <class T>
struct SAOutput {
  TokenGrid<T> tokens;        // patch rows after SA, [CLS] stripped
  Var<T> sequence;            // all N+1 rows after SA
  Matrix<T> cls_attention;    // [heads x (N+1)], final block, [CLS] query row
};

// Runs every SA block with global attention over the augmented sequence.
template <class T>
SAOutput<T> sa_forward(Tape<T>& tape, const Var<T>& augmented, const Triple& grid, int stage, const SAParams<T>& p,
                       const PathDrop& drop = {}) {
  const std::int64_t total = augmented->value.rows();
  const std::int64_t n = total - 1;
  detail::require(n == product(grid), "sa.sequence", "sequence length must be N + 1");
  const WindowPlan plan = global_plan(total);
  Var<T> x = augmented;
  std::vector<T> probs;
  for (std::size_t b = 0; b < p.blocks.size(); ++b) {
    const bool last = b + 1 == p.blocks.size();
    x = transformer_block(tape, x, p.blocks[b], plan, drop, last ? &probs : nullptr);
  }
  SAOutput<T> out;
  out.sequence = x;
  out.tokens = {ag::slice_rows(tape, x, 0, n), grid, stage};
  out.cls_attention.resize(p.heads, total);
  if (!probs.empty())
    for (int h = 0; h < p.heads; ++h)
      for (std::int64_t j = 0; j < total; ++j)
        out.cls_attention(h, j) = probs[static_cast<std::size_t>((h * total + n) * total + j)];
  return out;
}

// Head-averaged attention of the [CLS] query over patch tokens.
struct SemanticAttention {
  std::vector<double> values;  // length N, entries in [0, 1]
  Triple grid{};

  std::size_t size() const noexcept { return values.size(); }
};

// rows: [heads x (N+1)] probability rows whose last entry is the [CLS] -> [CLS]
// mass. That entry is dropped without renormalising.
template <class Derived>
SemanticAttention compute_satt(const Eigen::MatrixBase<Derived>& rows, int heads, const Triple& grid) {
  detail::require(heads >= 1 && rows.rows() == heads, "satt.heads", "row count must equal the head count");
  const auto n = rows.cols() - 1;
  detail::require(n >= 1 && n == product(grid), "satt.grid", "row length must be N + 1");
  for (int h = 0; h < heads; ++h) {
    double sum = 0.0;
    for (Eigen::Index j = 0; j < rows.cols(); ++j) {
      detail::require(rows(h, j) >= 0, "satt.rows", "negative attention weight");
      sum += static_cast<double>(rows(h, j));
    }
    detail::require(std::abs(sum - 1.0) <= 1e-4, "satt.rows",
                    "attention row " + std::to_string(h) + " is not normalised (sum " + std::to_string(sum) + ")");
  }
  SemanticAttention s;
  s.grid = grid;
  s.values.assign(static_cast<std::size_t>(n), 0.0);
  for (Eigen::Index j = 0; j < n; ++j) {
    double acc = 0.0;
    for (int h = 0; h < heads; ++h) acc += static_cast<double>(rows(h, j));
    s.values[static_cast<std::size_t>(j)] = acc / heads;
  }
  return s;
}

}  // namespace dagman
