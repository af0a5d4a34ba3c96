#include <gtest/gtest.h>

#include <functional>

#include "support.hpp"

using namespace dagman;
using M = ag::Matrix<double>;
using V = ag::Var<double>;
using TapeD = ag::Tape<double>;

namespace {

M random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& eng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  M m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(eng);
  return m;
}

// Scalar root sum(x .* probe), recorded directly on the tape.
V dot_with(TapeD& t, const V& x, const M& probe) {
  auto out = std::make_shared<ag::Node<double>>();
  out->value = M::Constant(1, 1, (x->value.array() * probe.array()).sum());
  ag::Node<double>* o = out.get();
  t.record(out, [o, x, probe] { x->grad_ref() += o->grad(0, 0) * probe; });
  return out;
}

using Build = std::function<V(TapeD&, const std::vector<V>&)>;

// Central differences of sum(build(inputs) .* probe) against the tape.
void check_gradients(const std::vector<M>& inputs, const Build& build, double tol = 1e-6) {
  std::mt19937_64 eng(99);
  std::vector<V> vars;
  for (const auto& m : inputs) vars.push_back(ag::parameter<double>(m));
  TapeD tape;
  V out = build(tape, vars);
  const M probe = random_matrix(out->value.rows(), out->value.cols(), eng);
  tape.backward(dot_with(tape, out, probe));

  const double h = 1e-6;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (Eigen::Index k = 0; k < inputs[i].size(); ++k) {
      auto eval = [&](double delta) {
        std::vector<M> in = inputs;
        in[i].data()[k] += delta;
        std::vector<V> vs;
        for (const auto& m : in) vs.push_back(ag::constant<double>(m));
        TapeD t(false);
        return (build(t, vs)->value.array() * probe.array()).sum();
      };
      const double numeric = (eval(h) - eval(-h)) / (2 * h);
      const double analytic = vars[i]->has_grad() ? vars[i]->grad.data()[k] : 0.0;
      ASSERT_NEAR(analytic, numeric, tol * std::max(1.0, std::abs(numeric))) << "input " << i << " entry " << k;
    }
  }
}

}  // namespace

TEST(Autograd, Linear) {
  std::mt19937_64 eng(1);
  check_gradients({random_matrix(5, 4, eng), random_matrix(4, 3, eng), random_matrix(1, 3, eng)},
                  [](TapeD& t, const std::vector<V>& v) { return ag::linear(t, v[0], v[1], v[2]); });
}

TEST(Autograd, LayerNorm) {
  std::mt19937_64 eng(2);
  check_gradients({random_matrix(4, 6, eng), random_matrix(1, 6, eng), random_matrix(1, 6, eng)},
                  [](TapeD& t, const std::vector<V>& v) { return ag::layer_norm(t, v[0], v[1], v[2]); });
}

TEST(Autograd, GeluAndScale) {
  std::mt19937_64 eng(3);
  check_gradients({random_matrix(3, 5, eng, 2.0)},
                  [](TapeD& t, const std::vector<V>& v) { return ag::scale(t, ag::gelu(t, v[0]), 1.7); });
}

TEST(Autograd, GeluValues) {
  TapeD t(false);
  M x(1, 3);
  x << -1.0, 0.0, 2.0;
  V y = ag::gelu(t, ag::constant<double>(x));
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(y->value(0, i), 0.5 * x(0, i) * (1 + std::erf(x(0, i) / std::sqrt(2.0))), 1e-15);
}

TEST(Autograd, GatherGroupsAndScaleRows) {
  std::mt19937_64 eng(4);
  auto idx = std::make_shared<const std::vector<std::int64_t>>(std::vector<std::int64_t>{3, 0, 0, 2, 1, 3});
  check_gradients({random_matrix(4, 3, eng)}, [idx](TapeD& t, const std::vector<V>& v) {
    return ag::scale_rows(t, ag::gather_rows(t, v[0], idx, 2), std::vector<double>{0.5, -2.0, 1.0});
  });
}

TEST(Autograd, ConcatSliceMeanAddWeightedRow) {
  std::mt19937_64 eng(5);
  check_gradients({random_matrix(3, 4, eng), random_matrix(1, 4, eng)}, [](TapeD& t, const std::vector<V>& v) {
    V c = ag::concat_rows(t, v[0], v[1]);
    V s = ag::slice_rows(t, c, 1, 3);
    V w = ag::add_weighted_row(t, s, v[1], std::vector<double>{0.0, 1.0, 0.25});
    return ag::add(t, w, ag::concat_rows(t, ag::mean_rows(t, w), ag::slice_rows(t, w, 0, 2)));
  });
}

TEST(Autograd, NormalizationOps) {
  std::mt19937_64 eng(6);
  check_gradients({random_matrix(3, 5, eng), random_matrix(5, 4, eng)}, [](TapeD& t, const std::vector<V>& v) {
    return ag::linear(t, ag::l2_normalize_rows(t, v[0]), ag::normalize_columns(t, v[1]));
  });
  TapeD t(false);
  V n = ag::l2_normalize_rows(t, ag::constant<double>(random_matrix(4, 7, eng)));
  for (Eigen::Index r = 0; r < 4; ++r) EXPECT_NEAR(n->value.row(r).norm(), 1.0, 1e-14);
}

TEST(Autograd, WindowedAttentionWithBiasAndMask) {
  std::mt19937_64 eng(7);
  // Two windows of 4 tokens, 2 heads of width 2, a 3-row bias table.
  ag::AttentionLayout layout;
  layout.heads = 2;
  layout.window_tokens = 4;
  layout.bias_index = std::make_shared<const std::vector<int>>(
      std::vector<int>{0, 1, 2, 1, 1, 0, 1, 2, 2, 1, 0, 1, 1, 2, 1, 0});
  std::vector<std::uint8_t> mask(2 * 16, 0);
  mask[16 + 1] = mask[16 + 4] = 1;  // window 1: tokens 0 and 1 may not see each other
  layout.pair_mask = std::make_shared<const std::vector<std::uint8_t>>(mask);
  check_gradients({random_matrix(8, 12, eng), random_matrix(3, 2, eng)}, [layout](TapeD& t, const std::vector<V>& v) {
    return ag::windowed_attention(t, v[0], layout, v[1]);
  });
}

TEST(Autograd, SoftCrossEntropyAndMaskedL1) {
  std::mt19937_64 eng(8);
  M target(2, 4);
  target << 0.1, 0.2, 0.3, 0.4, 0.25, 0.25, 0.25, 0.25;
  check_gradients({random_matrix(2, 4, eng)}, [target](TapeD& t, const std::vector<V>& v) {
    return ag::soft_cross_entropy(t, v[0], target, 0.3, std::vector<double>{1.0, 0.5}, 1.5);
  });
  M tgt = random_matrix(3, 4, eng);
  M mask = M::Zero(3, 4);
  mask(0, 1) = mask(2, 3) = mask(1, 0) = 1;
  check_gradients({random_matrix(3, 4, eng)}, [tgt, mask](TapeD& t, const std::vector<V>& v) {
    return ag::masked_l1(t, v[0], tgt, mask, 3.0);
  });
}

TEST(Autograd, GradientsAccumulateAcrossTapes) {
  V w = ag::parameter<double>(M::Constant(1, 1, 2.0));
  for (int i = 0; i < 3; ++i) {
    TapeD t;
    V y = ag::linear(t, ag::constant<double>(M::Constant(1, 1, 3.0)), w);
    t.backward(y);
  }
  EXPECT_DOUBLE_EQ(w->grad(0, 0), 9.0);
  w->zero_grad();
  EXPECT_FALSE(w->has_grad());
}

TEST(Autograd, NoGradTapeRecordsNothing) {
  TapeD t(false);
  V w = ag::parameter<double>(M::Constant(2, 2, 1.0));
  V y = ag::gelu(t, ag::linear(t, ag::constant<double>(M::Ones(3, 2)), w));
  EXPECT_EQ(t.size(), 0u);
  EXPECT_FALSE(y->requires_grad);
}
