#pragma once

// Minimal reverse-mode differentiation over row-major Eigen matrices.
//
// A Tape records the backward closure of every op evaluated while gradients
// are enabled; Tape::backward replays them in reverse. Parameters are leaf
// nodes owned by a ParamSet and outlive tapes, so their gradients accumulate
// across several backward passes until zero_grad().

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "dagman/errors.hpp"

namespace dagman::ag {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

template <class T>
struct Node {
  Matrix<T> value;
  Matrix<T> grad;
  bool requires_grad = false;
  std::function<void()> backward;

  Matrix<T>& grad_ref() {
    if (grad.rows() != value.rows() || grad.cols() != value.cols()) grad.setZero(value.rows(), value.cols());
    return grad;
  }
  bool has_grad() const { return grad.size() != 0; }
  void zero_grad() { grad.resize(0, 0); }
};

template <class T>
using Var = std::shared_ptr<Node<T>>;

template <class T>
Var<T> constant(Matrix<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  return n;
}

template <class T>
Var<T> parameter(Matrix<T> value) {
  auto n = constant<T>(std::move(value));
  n->requires_grad = true;
  return n;
}

template <class T>
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : enabled_(grad_enabled) {}

  bool grad_enabled() const noexcept { return enabled_; }

  // True when an op over these inputs must record a backward closure.
  template <class... V>
  bool needs(const V&... inputs) const {
    return enabled_ && ((inputs && inputs->requires_grad) || ...);
  }

  void record(const Var<T>& out, std::function<void()> fn) {
    out->requires_grad = true;
    out->backward = std::move(fn);
    nodes_.push_back(out);
  }

  // Seeds d(root)/d(root) = 1 (root must be 1x1) and runs every recorded
  // closure in reverse order. Intermediate gradients are released afterwards.
  void backward(const Var<T>& root) {
    if (root->value.size() != 1) throw Error("backward() needs a scalar root");
    if (!root->requires_grad) return;
    root->grad_ref()(0, 0) += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node<T>& n = **it;
      if (n.has_grad() && n.backward) n.backward();
    }
    for (auto& n : nodes_) {
      n->backward = nullptr;
      n->zero_grad();
    }
    nodes_.clear();
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  bool enabled_;
  std::vector<Var<T>> nodes_;
};

// ---------------------------------------------------------------------------
// Elementwise and dense ops

// x[N x in] * W[in x out] + b[1 x out]; b may be null.
template <class T>
Var<T> linear(Tape<T>& tape, const Var<T>& x, const Var<T>& W, const Var<T>& b = nullptr) {
  auto out = std::make_shared<Node<T>>();
  out->value.noalias() = x->value * W->value;
  if (b) out->value.rowwise() += b->value.row(0);
  if (tape.needs(x, W, b)) {
    Node<T>* o = out.get();
    tape.record(out, [o, x, W, b] {
      const auto& g = o->grad;
      if (x->requires_grad) x->grad_ref().noalias() += g * W->value.transpose();
      if (W->requires_grad) W->grad_ref().noalias() += x->value.transpose() * g;
      if (b && b->requires_grad) b->grad_ref().row(0) += g.colwise().sum();
    });
  }
  return out;
}

template <class T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols()) throw Error("add: shape mismatch");
  auto out = std::make_shared<Node<T>>();
  out->value = a->value + b->value;
  if (tape.needs(a, b)) {
    Node<T>* o = out.get();
    tape.record(out, [o, a, b] {
      if (a->requires_grad) a->grad_ref() += o->grad;
      if (b->requires_grad) b->grad_ref() += o->grad;
    });
  }
  return out;
}

template <class T>
Var<T> scale(Tape<T>& tape, const Var<T>& x, T s) {
  auto out = std::make_shared<Node<T>>();
  out->value = x->value * s;
  if (tape.needs(x)) {
    Node<T>* o = out.get();
    tape.record(out, [o, x, s] { x->grad_ref() += o->grad * s; });
  }
  return out;
}

// Row-wise layer normalisation with affine gamma/beta (both 1 x D).
template <class T>
Var<T> layer_norm(Tape<T>& tape, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const auto n = x->value.rows();
  const auto d = x->value.cols();
  auto out = std::make_shared<Node<T>>();
  Matrix<T> xhat(n, d);
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const T mean = x->value.row(r).mean();
    const T var = (x->value.row(r).array() - mean).square().mean();
    inv_std(r) = T(1) / std::sqrt(var + eps);
    xhat.row(r) = (x->value.row(r).array() - mean) * inv_std(r);
  }
  out->value = (xhat.array().rowwise() * gamma->value.row(0).array()).rowwise() + beta->value.row(0).array();
  if (tape.needs(x, gamma, beta)) {
    Node<T>* o = out.get();
    tape.record(out, [o, x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
      const auto& g = o->grad;
      if (gamma->requires_grad) gamma->grad_ref().row(0) += (g.array() * xhat.array()).colwise().sum().matrix();
      if (beta->requires_grad) beta->grad_ref().row(0) += g.colwise().sum();
      if (x->requires_grad) {
        auto& gx = x->grad_ref();
        const T inv_d = T(1) / T(g.cols());
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
          RowVector<T> dxhat = (g.row(r).array() * gamma->value.row(0).array()).matrix();
          const T m1 = dxhat.sum() * inv_d;
          const T m2 = dxhat.dot(xhat.row(r)) * inv_d;
          gx.row(r).array() += inv_std(r) * (dxhat.array() - m1 - xhat.row(r).array() * m2);
        }
      }
    });
  }
  return out;
}

// Exact (erf) GELU.
template <class T>
Var<T> gelu(Tape<T>& tape, const Var<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  auto out = std::make_shared<Node<T>>();
  out->value = x->value.unaryExpr([](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); });
  if (tape.needs(x)) {
    Node<T>* o = out.get();
    tape.record(out, [o, x] {
      constexpr T inv_sqrt2pi = T(0.39894228040143267794);
      x->grad_ref().array() += o->grad.array() * x->value.array().unaryExpr([](T v) {
        return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      });
    });
  }
  return out;
}

// out.row(r) = concat_{j < group} x.row(index[r * group + j]).
// group == 1 is a plain row gather (used for window partition and cyclic
// shifts); group == 8 concatenates 2x2x2 neighbourhoods for patch merging.
template <class T>
Var<T> gather_rows(Tape<T>& tape, const Var<T>& x, std::shared_ptr<const std::vector<std::int64_t>> index,
                   int group = 1) {
  const auto d = x->value.cols();
  const auto rows = static_cast<Eigen::Index>(index->size() / group);
  auto out = std::make_shared<Node<T>>();
  out->value.resize(rows, d * group);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (int j = 0; j < group; ++j) out->value.block(r, j * d, 1, d) = x->value.row((*index)[r * group + j]);
  if (tape.needs(x)) {
    Node<T>* o = out.get();
    tape.record(out, [o, x, index, group, d, rows] {
      auto& gx = x->grad_ref();
      for (Eigen::Index r = 0; r < rows; ++r)
        for (int j = 0; j < group; ++j) gx.row((*index)[r * group + j]) += o->grad.block(r, j * d, 1, d);
    });
  }
  return out;
}

// out.row(i) = weight[i] * x.row(i).
template <class T>
Var<T> scale_rows(Tape<T>& tape, const Var<T>& x, std::vector<T> weights) {
  if (static_cast<Eigen::Index>(weights.size()) != x->value.rows()) throw Error("scale_rows: length mismatch");
  auto out = std::make_shared<Node<T>>();
  out->value = x->value;
  for (Eigen::Index r = 0; r < out->value.rows(); ++r)
    if (weights[r] != T(1)) out->value.row(r) *= weights[r];
  if (tape.needs(x)) {
    Node<T>* o = out.get();
    tape.record(out, [o, x, w = std::move(weights)] {
      auto& gx = x->grad_ref();
      for (Eigen::Index r = 0; r < gx.rows(); ++r) gx.row(r) += o->grad.row(r) * w[r];
    });
  }
  return out;
}

// out.row(i) = x.row(i) + weight[i] * row, with row a [1 x D] variable.
template <class T>
Var<T> add_weighted_row(Tape<T>& tape, const Var<T>& x, const Var<T>& row, std::vector<T> weights) {
  if (static_cast<Eigen::Index>(weights.size()) != x->value.rows() || row->value.cols() != x->value.cols())
    throw Error("add_weighted_row: shape mismatch");
  auto out = std::make_shared<Node<T>>();
  out->value = x->value;
  for (Eigen::Index r = 0; r < out->value.rows(); ++r)
    if (weights[r] != T(0)) out->value.row(r) += weights[r] * row->value.row(0);
  if (tape.needs(x, row)) {
    Node<T>* o = out.get();
    tape.record(out, [o, x, row, w = std::move(weights)] {
      if (x->requires_grad) x->grad_ref() += o->grad;
      if (row->requires_grad) {
        auto& gr = row->grad_ref();
        for (Eigen::Index r = 0; r < o->grad.rows(); ++r)
          if (w[r] != T(0)) gr.row(0) += w[r] * o->grad.row(r);
      }
    });
  }
  return out;
}

template <class T>
Var<T> concat_rows(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  if (a->value.cols() != b->value.cols()) throw Error("concat_rows: width mismatch");
  auto out = std::make_shared<Node<T>>();
  out->value.resize(a->value.rows() + b->value.rows(), a->value.cols());
  out->value.topRows(a->value.rows()) = a->value;
  out->value.bottomRows(b->value.rows()) = b->value;
  if (tape.needs(a, b)) {
    Node<T>* o = out.get();
    tape.record(out, [o, a, b] {
      if (a->requires_grad) a->grad_ref() += o->grad.topRows(a->value.rows());
      if (b->requires_grad) b->grad_ref() += o->grad.bottomRows(b->value.rows());
    });
  }
  return out;
}

template <class T>
Var<T> slice_rows(Tape<T>& tape, const Var<T>& x, Eigen::Index start, Eigen::Index count) {
  auto out = std::make_shared<Node<T>>();
  out->value = x->value.middleRows(start, count);
  if (tape.needs(x)) {
    Node<T>* o = out.get();
    tape.record(out, [o, x, start, count] { x->grad_ref().middleRows(start, count) += o->grad; });
  }
  return out;
}

template <class T>
Var<T> mean_rows(Tape<T>& tape, const Var<T>& x) {
  auto out = std::make_shared<Node<T>>();
  out->value = x->value.colwise().sum() / T(x->value.rows());
  if (tape.needs(x)) {
    Node<T>* o = out.get();
    tape.record(out, [o, x] {
      const T inv = T(1) / T(x->value.rows());
      x->grad_ref().rowwise() += o->grad.row(0) * inv;
    });
  }
  return out;
}

// Each row divided by max(||row||, eps).
template <class T>
Var<T> l2_normalize_rows(Tape<T>& tape, const Var<T>& x, T eps = T(1e-12)) {
  auto out = std::make_shared<Node<T>>();
  Eigen::Matrix<T, Eigen::Dynamic, 1> norms = x->value.rowwise().norm().cwiseMax(eps);
  out->value = x->value.array().colwise() / norms.array();
  if (tape.needs(x)) {
    Node<T>* o = out.get();
    tape.record(out, [o, x, norms = std::move(norms)] {
      auto& gx = x->grad_ref();
      for (Eigen::Index r = 0; r < gx.rows(); ++r) {
        const T dot = o->grad.row(r).dot(o->value.row(r));
        gx.row(r) += (o->grad.row(r) - dot * o->value.row(r)) / norms(r);
      }
    });
  }
  return out;
}

// Each column of W divided by its L2 norm (weight normalization with unit gain).
template <class T>
Var<T> normalize_columns(Tape<T>& tape, const Var<T>& W, T eps = T(1e-12)) {
  auto out = std::make_shared<Node<T>>();
  RowVector<T> norms = W->value.colwise().norm().cwiseMax(eps);
  out->value = W->value.array().rowwise() / norms.array();
  if (tape.needs(W)) {
    Node<T>* o = out.get();
    tape.record(out, [o, W, norms = std::move(norms)] {
      auto& gw = W->grad_ref();
      for (Eigen::Index c = 0; c < gw.cols(); ++c) {
        const T dot = o->grad.col(c).dot(o->value.col(c));
        gw.col(c) += (o->grad.col(c) - dot * o->value.col(c)) / norms(c);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Multi-head attention over consecutive groups ("windows") of tokens.

struct AttentionLayout {
  int heads = 1;
  int window_tokens = 1;  // rows per window; qkv.rows() must be a multiple
  // Optional relative-position bias: bias_index[i * wt + j] selects the row
  // of the bias table (rows x heads) added to score(i, j).
  std::shared_ptr<const std::vector<int>> bias_index;
  // Optional per-window pair mask, length windows * wt * wt; nonzero entries
  // are excluded from the softmax.
  std::shared_ptr<const std::vector<std::uint8_t>> pair_mask;
};

// qkv is [n x 3D] holding Q | K | V column blocks; returns [n x D].
// When `probs_out` is given it receives the attention probabilities laid out
// as [window][head][query][key].
template <class T>
Var<T> windowed_attention(Tape<T>& tape, const Var<T>& qkv, const AttentionLayout& layout,
                          const Var<T>& bias_table = nullptr, std::vector<T>* probs_out = nullptr) {
  const Eigen::Index n = qkv->value.rows();
  const Eigen::Index d = qkv->value.cols() / 3;
  const int h = layout.heads;
  const int wt = layout.window_tokens;
  if (qkv->value.cols() != 3 * d || d % h != 0 || n % wt != 0) throw Error("windowed_attention: bad layout");
  const Eigen::Index dh = d / h;
  const Eigen::Index windows = n / wt;
  const T scale_factor = T(1) / std::sqrt(T(dh));
  const bool with_bias = bias_table && layout.bias_index;

  auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(windows * h * wt * wt));
  auto out = std::make_shared<Node<T>>();
  out->value.resize(n, d);
  Matrix<T> scores(wt, wt);
  for (Eigen::Index w = 0; w < windows; ++w) {
    const std::uint8_t* mask = layout.pair_mask ? layout.pair_mask->data() + w * wt * wt : nullptr;
    for (int hd = 0; hd < h; ++hd) {
      const auto q = qkv->value.block(w * wt, hd * dh, wt, dh);
      const auto k = qkv->value.block(w * wt, d + hd * dh, wt, dh);
      const auto v = qkv->value.block(w * wt, 2 * d + hd * dh, wt, dh);
      scores.noalias() = q * k.transpose();
      scores *= scale_factor;
      T* p = probs->data() + ((w * h + hd) * wt) * wt;
      for (int i = 0; i < wt; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j < wt; ++j) {
          T s = scores(i, j);
          if (with_bias) s += bias_table->value((*layout.bias_index)[i * wt + j], hd);
          if (mask && mask[i * wt + j]) s = -std::numeric_limits<T>::infinity();
          scores(i, j) = s;
          mx = std::max(mx, s);
        }
        T sum = 0;
        for (int j = 0; j < wt; ++j) {
          const T e = std::isinf(scores(i, j)) ? T(0) : std::exp(scores(i, j) - mx);
          p[i * wt + j] = e;
          sum += e;
        }
        for (int j = 0; j < wt; ++j) p[i * wt + j] /= sum;
      }
      Eigen::Map<const Matrix<T>> pm(p, wt, wt);
      out->value.block(w * wt, hd * dh, wt, dh).noalias() = pm * v;
    }
  }
  if (probs_out) *probs_out = *probs;
  if (tape.needs(qkv, bias_table)) {
    Node<T>* o = out.get();
    tape.record(out, [o, qkv, bias_table, layout, probs, windows, h, wt, d, dh, scale_factor, with_bias] {
      auto& gq = qkv->grad_ref();
      Matrix<T> dp(wt, wt), ds(wt, wt);
      for (Eigen::Index w = 0; w < windows; ++w)
        for (int hd = 0; hd < h; ++hd) {
          Eigen::Map<const Matrix<T>> pm(probs->data() + ((w * h + hd) * wt) * wt, wt, wt);
          const auto go = o->grad.block(w * wt, hd * dh, wt, dh);
          const auto q = qkv->value.block(w * wt, hd * dh, wt, dh);
          const auto k = qkv->value.block(w * wt, d + hd * dh, wt, dh);
          const auto v = qkv->value.block(w * wt, 2 * d + hd * dh, wt, dh);
          gq.block(w * wt, 2 * d + hd * dh, wt, dh).noalias() += pm.transpose() * go;
          dp.noalias() = go * v.transpose();
          for (int i = 0; i < wt; ++i) {
            const T dot = pm.row(i).dot(dp.row(i));
            ds.row(i) = pm.row(i).array() * (dp.row(i).array() - dot);
          }
          if (with_bias && bias_table->requires_grad) {
            auto& gb = bias_table->grad_ref();
            for (int i = 0; i < wt; ++i)
              for (int j = 0; j < wt; ++j) gb((*layout.bias_index)[i * wt + j], hd) += ds(i, j);
          }
          ds *= scale_factor;
          gq.block(w * wt, hd * dh, wt, dh).noalias() += ds * k;
          gq.block(w * wt, d + hd * dh, wt, dh).noalias() += ds.transpose() * q;
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss terminals (all return 1x1)

template <class T>
Matrix<T> softmax_rows(const Matrix<T>& logits, T inv_temperature) {
  Matrix<T> p(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const auto z = (logits.row(r).array() * inv_temperature).eval();
    const T mx = z.maxCoeff();
    p.row(r) = (z - mx).exp().matrix();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

// sum_r weight[r] * CE(target_r, softmax(logits_r / tau)) / normalizer.
// The target side is a constant. log p is clamped below at log(1e-12).
template <class T>
Var<T> soft_cross_entropy(Tape<T>& tape, const Var<T>& logits, Matrix<T> target, T tau, std::vector<T> weights,
                          T normalizer) {
  const Eigen::Index rows = logits->value.rows();
  if (target.rows() != rows || target.cols() != logits->value.cols() ||
      static_cast<Eigen::Index>(weights.size()) != rows)
    throw Error("soft_cross_entropy: shape mismatch");
  const T inv_tau = T(1) / tau;
  const T log_eps = std::log(T(1e-12));
  Matrix<T> p = softmax_rows<T>(logits->value, inv_tau);
  T total = 0;
  for (Eigen::Index r = 0; r < rows; ++r) {
    if (weights[r] == T(0)) continue;
    const auto z = (logits->value.row(r).array() * inv_tau).eval();
    const T mx = z.maxCoeff();
    const T lse = mx + std::log((z - mx).exp().sum());
    T ce = 0;
    for (Eigen::Index k = 0; k < z.size(); ++k) ce -= target(r, k) * std::max(z(k) - lse, log_eps);
    total += weights[r] * ce;
  }
  auto out = std::make_shared<Node<T>>();
  out->value = Matrix<T>::Constant(1, 1, normalizer > T(0) ? total / normalizer : T(0));
  if (normalizer > T(0) && tape.needs(logits)) {
    Node<T>* o = out.get();
    tape.record(out, [o, logits, p = std::move(p), target = std::move(target), w = std::move(weights), inv_tau,
                      normalizer] {
      const T g = o->grad(0, 0) / normalizer;
      auto& gl = logits->grad_ref();
      for (Eigen::Index r = 0; r < gl.rows(); ++r) {
        if (w[r] == T(0)) continue;
        const T mass = target.row(r).sum();
        gl.row(r) += (g * w[r] * inv_tau) * (p.row(r) * mass - target.row(r));
      }
    });
  }
  return out;
}

// sum(mask * |pred - target|) / normalizer; mask entries are 0/1 weights.
template <class T>
Var<T> masked_l1(Tape<T>& tape, const Var<T>& pred, Matrix<T> target, Matrix<T> mask, T normalizer) {
  if (target.rows() != pred->value.rows() || target.cols() != pred->value.cols() || mask.rows() != target.rows() ||
      mask.cols() != target.cols())
    throw Error("masked_l1: shape mismatch");
  auto out = std::make_shared<Node<T>>();
  const T total = (mask.array() * (pred->value - target).array().abs()).sum();
  out->value = Matrix<T>::Constant(1, 1, normalizer > T(0) ? total / normalizer : T(0));
  if (normalizer > T(0) && tape.needs(pred)) {
    Node<T>* o = out.get();
    tape.record(out, [o, pred, target = std::move(target), mask = std::move(mask), normalizer] {
      const T g = o->grad(0, 0) / normalizer;
      pred->grad_ref().array() += g * mask.array() * (pred->value - target).array().sign();
    });
  }
  return out;
}

// sum_i coeff_i * term_i over 1x1 terms.
template <class T>
Var<T> weighted_sum(Tape<T>& tape, std::vector<std::pair<Var<T>, T>> terms) {
  auto out = std::make_shared<Node<T>>();
  T total = 0;
  bool needs = false;
  for (const auto& [v, c] : terms) {
    total += c * v->value(0, 0);
    needs = needs || tape.needs(v);
  }
  out->value = Matrix<T>::Constant(1, 1, total);
  if (needs) {
    Node<T>* o = out.get();
    tape.record(out, [o, terms = std::move(terms)] {
      for (const auto& [v, c] : terms)
        if (v->requires_grad) v->grad_ref()(0, 0) += c * o->grad(0, 0);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Named parameter collections

template <class T>
struct Param {
  std::string name;
  Var<T> var;
  bool decay = true;  // participates in decoupled weight decay
};

template <class T>
class ParamSet {
 public:
  Var<T> add(std::string name, Matrix<T> init, bool decay = true) {
    auto v = parameter<T>(std::move(init));
    params_.push_back({std::move(name), v, decay});
    return v;
  }

  std::vector<Param<T>>& items() noexcept { return params_; }
  const std::vector<Param<T>>& items() const noexcept { return params_; }
  std::size_t size() const noexcept { return params_.size(); }

  std::int64_t scalar_count() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p.var->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.var->zero_grad();
  }

  const Param<T>* find(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

 private:
  std::vector<Param<T>> params_;
};

}  // namespace dagman::ag
