#include <gtest/gtest.h>

#include <algorithm>

#include "support.hpp"

using namespace dagman;

namespace {

SemanticAttention random_satt(std::size_t n, std::mt19937_64& eng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  SemanticAttention s;
  s.values.resize(n);
  double sum = 0;
  for (auto& v : s.values) sum += v = u(eng);
  for (auto& v : s.values) v /= sum;
  s.grid = {1, 1, static_cast<int>(n)};
  return s;
}

std::size_t floor_of(double r, std::size_t n) { return static_cast<std::size_t>(std::floor(r * double(n) + 1e-9)); }

}  // namespace

TEST(FloorCount, ToleratesRepresentationError) {
  EXPECT_EQ(floor_count(0.29, 100), 29u);
  EXPECT_EQ(floor_count(0.7, 10), 7u);
  EXPECT_EQ(floor_count(0.7, 9), 6u);
  EXPECT_EQ(floor_count(0.0, 9), 0u);
}

TEST(AttentionMask, MasksRankBandAndKeepsHints) {
  std::mt19937_64 eng(21);
  MaskPolicy p;
  for (std::size_t n : {10u, 64u, 333u}) {
    const SemanticAttention s = random_satt(n, eng);
    const MaskVector m = attention_guided_mask(s, p);
    EXPECT_EQ(m.masked_count(), floor_of(0.7, n) - floor_of(0.1, n));
    // Sort by attention, descending: ranks [0, floor(sN)) visible, then the
    // masked band, then visible again.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0u);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return s.values[a] > s.values[b]; });
    for (std::size_t r = 0; r < n; ++r) {
      const bool masked = r >= floor_of(0.1, n) && r < floor_of(0.7, n);
      EXPECT_EQ(m.keep[order[r]], masked ? 0 : 1) << "rank " << r;
    }
  }
}

TEST(AttentionMask, TiesBreakTowardLowerIndex) {
  SemanticAttention s{{0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1}, {1, 1, 10}};
  MaskPolicy p;
  const MaskVector m = attention_guided_mask(s, p);
  // Hint = index 0; masked band = indices 1..6.
  const std::vector<std::uint8_t> expected{1, 0, 0, 0, 0, 0, 0, 1, 1, 1};
  EXPECT_EQ(m.keep, expected);
}

TEST(AttentionMask, HintCountMustStayBelowMaskCount) {
  SemanticAttention s{{0.5, 0.5}, {1, 1, 2}};
  MaskPolicy p;
  p.r = 0.5;
  p.s = 0.4;
  EXPECT_NO_THROW(attention_guided_mask(s, p));  // floor(0.5*2)=1 > floor(0.4*2)=0
  s = {std::vector<double>(10, 0.1), {1, 1, 10}};
  p.r = 0.25;
  p.s = 0.2;  // floor: 2 vs 2
  try {
    attention_guided_mask(s, p);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.field(), "mask.s");
  }
  p.s = 0.3;
  EXPECT_THROW(attention_guided_mask(s, p), ValidationError);
}

TEST(AttentionMask, InvariantUnderPositiveRescaling) {
  std::mt19937_64 eng(22);
  MaskPolicy p;
  for (int trial = 0; trial < 20; ++trial) {
    SemanticAttention s = random_satt(100, eng);
    const MaskVector a = attention_guided_mask(s, p);
    for (auto& v : s.values) v *= 37.5;
    EXPECT_EQ(attention_guided_mask(s, p).keep, a.keep);
  }
}

TEST(LowAttentionMask, MasksTheLowestTokens) {
  SemanticAttention s{{0.05, 0.3, 0.01, 0.2, 0.04, 0.1, 0.06, 0.09, 0.08, 0.07}, {1, 1, 10}};
  MaskPolicy p;
  const MaskVector m = low_attention_mask(s, p);
  EXPECT_EQ(m.masked_count(), 7u);
  // Top three (0.3, 0.2, 0.1) stay visible.
  EXPECT_EQ(m.keep[1], 1);
  EXPECT_EQ(m.keep[3], 1);
  EXPECT_EQ(m.keep[5], 1);
}

TEST(RandomMask, ExactCountAndSeeded) {
  const Triple g{4, 4, 4};
  for (double r : {0.0, 0.3, 0.7, 1.0}) EXPECT_EQ(random_mask(g, r, 5).masked_count(), floor_of(r, 64));
  EXPECT_EQ(random_mask(g, 0.5, 5).keep, random_mask(g, 0.5, 5).keep);
  EXPECT_NE(random_mask(g, 0.5, 5).keep, random_mask(g, 0.5, 6).keep);
}

TEST(RandomMask, PositionsAreUniform) {
  // Each of 16 positions is masked with probability 0.5; over 4000 draws the
  // per-position counts pass a chi-square test (15 dof, alpha 0.01: 30.578).
  std::vector<int> hits(16, 0);
  const int draws = 4000;
  for (int s = 0; s < draws; ++s) {
    const MaskVector m = random_mask(std::size_t{16}, 0.5, static_cast<std::uint64_t>(s));
    for (int i = 0; i < 16; ++i) hits[i] += m.keep[i] == 0;
  }
  double chi = 0;
  const double e = draws * 0.5;
  for (int h : hits) chi += (h - e) * (h - e) / e;
  EXPECT_LT(chi, 30.578);
}

TEST(BlockwiseMask, CoversWholeBlocks) {
  const Triple g{8, 8, 8}, b{2, 2, 2};
  const MaskVector m = blockwise_mask(g, 0.5, b, 3);
  EXPECT_EQ(m.masked_count(), 256u);
  // 256 = 32 full blocks; each 2^3 block is entirely masked or visible.
  for (int z = 0; z < 8; z += 2)
    for (int y = 0; y < 8; y += 2)
      for (int x = 0; x < 8; x += 2) {
        int masked = 0;
        for (int dz = 0; dz < 2; ++dz)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) masked += m.keep[flat_index(g, z + dz, y + dy, x + dx)] == 0;
        EXPECT_TRUE(masked == 0 || masked == 8);
      }
  EXPECT_EQ(blockwise_mask(g, 0.7, b, 3).masked_count(), floor_of(0.7, 512));
  EXPECT_THROW(blockwise_mask({6, 8, 8}, 0.5, {4, 4, 4}, 0), ValidationError);
}

TEST(MaskResampling, UpsampleReplicates) {
  MaskVector coarse = MaskVector::all_visible({2, 1, 2});
  coarse.keep = {1, 0, 0, 1};
  const MaskVector fine = upsample_mask(coarse, {2, 3, 1});
  EXPECT_EQ(fine.grid, (Triple{4, 3, 2}));
  for (int z = 0; z < 4; ++z)
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 2; ++x)
        EXPECT_EQ(fine.keep[flat_index(fine.grid, z, y, x)], coarse.keep[flat_index(coarse.grid, z / 2, 0, x)]);
  EXPECT_EQ(fine.masked_count(), 2u * 6u);
}

TEST(MaskResampling, MaskedFractionAndDownsample) {
  MaskVector fine = MaskVector::all_visible({2, 2, 4});
  // Coarse cell 0 covers x in {0,1}; mask 3 of its 8, and all 8 of cell 1.
  fine.keep[flat_index(fine.grid, 0, 0, 0)] = 0;
  fine.keep[flat_index(fine.grid, 1, 1, 1)] = 0;
  fine.keep[flat_index(fine.grid, 0, 1, 0)] = 0;
  for (int z = 0; z < 2; ++z)
    for (int y = 0; y < 2; ++y)
      for (int x = 2; x < 4; ++x) fine.keep[flat_index(fine.grid, z, y, x)] = 0;
  const auto frac = masked_fraction(fine, {2, 2, 2});
  ASSERT_EQ(frac.size(), 2u);
  EXPECT_DOUBLE_EQ(frac[0], 3.0 / 8.0);
  EXPECT_DOUBLE_EQ(frac[1], 1.0);
  const MaskVector coarse = downsample_mask(fine, {2, 2, 2});
  EXPECT_EQ(coarse.keep, (std::vector<std::uint8_t>{1, 0}));
  // Round trip of an upsampled mask is exact.
  EXPECT_EQ(downsample_mask(upsample_mask(coarse, {2, 2, 2}), {2, 2, 2}).keep, coarse.keep);
}

TEST(PatchDropout, ExactCountAndIndependentOfStudentStream) {
  const Triple g{4, 4, 4};
  const MaskVector d = patch_dropout_mask(g, 0.7, 11);
  EXPECT_EQ(d.masked_count(), floor_of(0.7, 64));
  EXPECT_EQ(d.strategy, MaskStrategy::dropout);
  EXPECT_NE(d.keep, random_mask(g, 0.7, 11).keep);
  EXPECT_EQ(patch_dropout_mask(g, 0.0, 11).masked_count(), 0u);
}

TEST(ApplyMask, ZeroesMaskedRowsOnly) {
  Tape<double> t(false);
  TokenGrid<double> x{ag::constant<double>(Matrix<double>::Constant(4, 3, 2.5)), {1, 2, 2}, 1};
  MaskVector m = MaskVector::all_visible({1, 2, 2});
  m.keep[2] = 0;
  const auto y = apply_mask(t, x, m);
  EXPECT_EQ(y.tokens->value.row(2).cwiseAbs().sum(), 0.0);
  EXPECT_EQ(y.tokens->value.row(1), x.tokens->value.row(1));
  m.keep.pop_back();
  EXPECT_THROW(apply_mask(t, x, m), ValidationError);
}

TEST(Satt, MatchesDenseOracle) {
  std::mt19937_64 eng(31);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int heads : {1, 2, 4}) {
    // 8 patch tokens plus [CLS], width 8.
    Eigen::MatrixXd qkv(9, 24);
    for (Eigen::Index i = 0; i < qkv.size(); ++i) qkv.data()[i] = n(eng);
    std::vector<Eigen::MatrixXd> probs;
    testing_support::dense_attention(qkv, heads, &probs);
    Eigen::MatrixXd rows(heads, 9);
    for (int h = 0; h < heads; ++h) rows.row(h) = probs[h].row(8);
    const SemanticAttention s = compute_satt(rows, heads, {2, 2, 2});
    for (int j = 0; j < 8; ++j) {
      double acc = 0;
      for (int h = 0; h < heads; ++h) acc += probs[h](8, j);
      EXPECT_NEAR(s.values[j], acc / heads, 1e-15);
    }
  }
}

TEST(Satt, RejectsMalformedRows) {
  Eigen::MatrixXd rows = Eigen::MatrixXd::Constant(2, 5, 0.2);
  EXPECT_NO_THROW(compute_satt(rows, 2, {1, 2, 2}));
  EXPECT_THROW(compute_satt(rows, 3, {1, 2, 2}), ValidationError);
  EXPECT_THROW(compute_satt(rows, 2, {1, 1, 2}), ValidationError);
  rows(1, 0) = 0.5;
  EXPECT_THROW(compute_satt(rows, 2, {1, 2, 2}), ValidationError);
}

TEST(Satt, EncoderSattIsAProperSubDistribution) {
  const EncoderConfig c = testing_support::tiny_encoder();
  Network<double> net(c, testing_support::tiny_distill(), 5);
  Tape<double> t(false);
  const auto out = net.encoder().forward(t, testing_support::tiny_volumes(1)[0]);
  const SemanticAttention s = compute_satt(out.cls_attention, c.resolved_sa_heads(), c.sa_grid());
  EXPECT_EQ(s.size(), static_cast<std::size_t>(product(c.sa_grid())));
  double sum = 0;
  for (double v : s.values) {
    EXPECT_GE(v, 0.0);
    sum += v;
  }
  EXPECT_LT(sum, 1.0);
  EXPECT_NEAR(sum + out.cls_attention.col(out.cls_attention.cols() - 1).mean(), 1.0, 1e-12);
}

TEST(Strategy, NamesRoundTrip) {
  for (auto s : {MaskStrategy::attention, MaskStrategy::random, MaskStrategy::blockwise, MaskStrategy::low_attention})
    EXPECT_EQ(parse_strategy(strategy_name(s)), s);
  EXPECT_THROW(parse_strategy("grid"), ValidationError);
}
