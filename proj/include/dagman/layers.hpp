#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "dagman/autograd.hpp"
#include "dagman/rng.hpp"
#include "dagman/window.hpp"

namespace dagman {

using ag::Matrix;
using ag::ParamSet;
using ag::Tape;
using ag::Var;

// A spatially indexed sequence of tokens: tokens is [N x D], N = product(grid).
template <class T>
struct TokenGrid {
  Var<T> tokens;
  Triple grid{};
  int stage = 0;

  std::int64_t size() const { return tokens->value.rows(); }
  std::int64_t width() const { return tokens->value.cols(); }
};

namespace init {

// Normal(0, std) truncated to two standard deviations.
template <class T>
Matrix<T> trunc_normal(Eigen::Index rows, Eigen::Index cols, double std, Engine& eng) {
  std::normal_distribution<double> dist(0.0, std);
  Matrix<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    double v;
    do v = dist(eng);
    while (std::abs(v) > 2.0 * std);
    m.data()[i] = static_cast<T>(v);
  }
  return m;
}

template <class T>
Matrix<T> zeros(Eigen::Index rows, Eigen::Index cols) {
  return Matrix<T>::Zero(rows, cols);
}

template <class T>
Matrix<T> ones(Eigen::Index rows, Eigen::Index cols) {
  return Matrix<T>::Ones(rows, cols);
}

}  // namespace init

template <class T>
struct LinearParams {
  Var<T> weight;  // [in x out]
  Var<T> bias;    // [1 x out], may be null
};

template <class T>
LinearParams<T> make_linear(ParamSet<T>& ps, const std::string& name, int in, int out, Engine& eng,
                            bool with_bias = true) {
  LinearParams<T> p;
  p.weight = ps.add(name + ".weight", init::trunc_normal<T>(in, out, 0.02, eng));
  if (with_bias) p.bias = ps.add(name + ".bias", init::zeros<T>(1, out), false);
  return p;
}

template <class T>
struct NormParams {
  Var<T> gamma;
  Var<T> beta;
};

template <class T>
NormParams<T> make_norm(ParamSet<T>& ps, const std::string& name, int width) {
  return {ps.add(name + ".gamma", init::ones<T>(1, width), false), ps.add(name + ".beta", init::zeros<T>(1, width), false)};
}

template <class T>
Var<T> apply(Tape<T>& tape, const LinearParams<T>& p, const Var<T>& x) {
  return ag::linear(tape, x, p.weight, p.bias);
}

template <class T>
Var<T> apply(Tape<T>& tape, const NormParams<T>& p, const Var<T>& x) {
  return ag::layer_norm(tape, x, p.gamma, p.beta);
}

// Multi-head self-attention parameters. rel_bias is [bias_rows x heads] or
// null for attention without relative-position bias.
template <class T>
struct AttentionParams {
  LinearParams<T> qkv;
  LinearParams<T> proj;
  Var<T> rel_bias;
  int heads = 1;
};

template <class T>
struct BlockParams {
  NormParams<T> norm1;
  AttentionParams<T> attn;
  NormParams<T> norm2;
  LinearParams<T> fc1;
  LinearParams<T> fc2;
};

template <class T>
BlockParams<T> make_block(ParamSet<T>& ps, const std::string& name, int width, int heads, double mlp_ratio,
                          int bias_rows, Engine& eng) {
  BlockParams<T> b;
  const int hidden = static_cast<int>(std::lround(width * mlp_ratio));
  b.norm1 = make_norm(ps, name + ".norm1", width);
  b.attn.qkv = make_linear(ps, name + ".attn.qkv", width, 3 * width, eng);
  b.attn.proj = make_linear(ps, name + ".attn.proj", width, width, eng);
  b.attn.heads = heads;
  if (bias_rows > 0) b.attn.rel_bias = ps.add(name + ".attn.rel_bias", init::zeros<T>(bias_rows, heads), false);
  b.norm2 = make_norm(ps, name + ".norm2", width);
  b.fc1 = make_linear(ps, name + ".mlp.fc1", width, hidden, eng);
  b.fc2 = make_linear(ps, name + ".mlp.fc2", hidden, width, eng);
  return b;
}

// Stochastic depth for residual branches. Each call draws one keep/drop
// decision; a kept branch is rescaled by 1 / (1 - rate).
struct PathDrop {
  double rate = 0.0;
  Engine* eng = nullptr;

  std::optional<double> draw() const {
    if (rate <= 0.0 || eng == nullptr) return 1.0;
    if (std::uniform_real_distribution<double>(0.0, 1.0)(*eng) < rate) return std::nullopt;
    return 1.0 / (1.0 - rate);
  }
};

// Windowed multi-head self-attention over a grid-ordered token matrix:
// permute into (shifted) windows, attend within each window, project, and
// permute back to grid order.
template <class T>
Var<T> window_attention(Tape<T>& tape, const Var<T>& x, const WindowPlan& plan, const AttentionParams<T>& p,
                        std::vector<T>* probs_out = nullptr) {
  Var<T> h = plan.identity ? x : ag::gather_rows(tape, x, plan.forward);
  Var<T> qkv = apply(tape, p.qkv, h);
  ag::AttentionLayout layout;
  layout.heads = p.heads;
  layout.window_tokens = plan.window_tokens;
  layout.pair_mask = plan.pair_mask;
  if (p.rel_bias) layout.bias_index = plan.bias_index;
  Var<T> a = ag::windowed_attention(tape, qkv, layout, p.rel_bias, probs_out);
  a = apply(tape, p.proj, a);
  return plan.identity ? a : ag::gather_rows(tape, a, plan.inverse);
}

// Pre-norm transformer block: x + Attn(LN(x)), then x + MLP(LN(x)).
template <class T>
Var<T> transformer_block(Tape<T>& tape, Var<T> x, const BlockParams<T>& b, const WindowPlan& plan,
                         const PathDrop& drop = {}, std::vector<T>* probs_out = nullptr) {
  if (auto s = drop.draw()) {
    Var<T> a = window_attention(tape, apply(tape, b.norm1, x), plan, b.attn, probs_out);
    x = ag::add(tape, x, *s == 1.0 ? a : ag::scale(tape, a, T(*s)));
  } else if (probs_out) {
    // Dropped branch: still report the attention pattern for diagnostics.
    Tape<T> scratch(false);
    window_attention(scratch, apply(scratch, b.norm1, x), plan, b.attn, probs_out);
  }
  if (auto s = drop.draw()) {
    Var<T> m = apply(tape, b.fc2, ag::gelu(tape, apply(tape, b.fc1, apply(tape, b.norm2, x))));
    x = ag::add(tape, x, *s == 1.0 ? m : ag::scale(tape, m, T(*s)));
  }
  return x;
}

// Three-layer projection head: Linear-GELU-Linear-GELU, L2 normalization,
// then a bias-free output layer with unit-norm weight columns. Logits are
// cosine similarities in [-1, 1], so the temperature alone sets sharpness.
template <class T>
struct MlpHead {
  LinearParams<T> l1, l2, l3;
};

template <class T>
MlpHead<T> make_mlp_head(ParamSet<T>& ps, const std::string& name, int in, int hidden, int out, Engine& eng) {
  return {make_linear(ps, name + ".l1", in, hidden, eng), make_linear(ps, name + ".l2", hidden, hidden, eng),
          make_linear(ps, name + ".l3", hidden, out, eng, false)};
}

template <class T>
Var<T> apply(Tape<T>& tape, const MlpHead<T>& h, const Var<T>& x) {
  Var<T> z = ag::gelu(tape, apply(tape, h.l2, ag::gelu(tape, apply(tape, h.l1, x))));
  return ag::linear(tape, ag::l2_normalize_rows(tape, z), ag::normalize_columns(tape, h.l3.weight));
}

}  // namespace dagman
