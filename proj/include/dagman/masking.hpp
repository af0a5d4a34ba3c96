#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "dagman/layers.hpp"
#include "dagman/semantic_attention.hpp"

namespace dagman {

enum class MaskStrategy { attention, random, blockwise, low_attention, dropout, none };

inline const char* strategy_name(MaskStrategy s) {
  switch (s) {
    case MaskStrategy::attention: return "attention";
    case MaskStrategy::random: return "random";
    case MaskStrategy::blockwise: return "blockwise";
    case MaskStrategy::low_attention: return "low-attention";
    case MaskStrategy::dropout: return "dropout";
    case MaskStrategy::none: return "none";
  }
  return "?";
}

inline MaskStrategy parse_strategy(const std::string& s) {
  for (auto m : {MaskStrategy::attention, MaskStrategy::random, MaskStrategy::blockwise, MaskStrategy::low_attention})
    if (s == strategy_name(m)) return m;
  throw ValidationError("masking_strategy", "unknown strategy '" + s + "'");
}

// keep[i] == 1: token visible; keep[i] == 0: token masked.
struct MaskVector {
  std::vector<std::uint8_t> keep;
  Triple grid{};
  MaskStrategy strategy = MaskStrategy::none;

  std::size_t size() const noexcept { return keep.size(); }

  // 1 where masked (the loss-side indicator).
  std::vector<std::uint8_t> masked() const {
    std::vector<std::uint8_t> m(keep.size());
    for (std::size_t i = 0; i < keep.size(); ++i) m[i] = keep[i] ? 0 : 1;
    return m;
  }

  std::size_t masked_count() const {
    return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), std::uint8_t{0}));
  }

  template <class T>
  std::vector<T> keep_weights() const {
    return std::vector<T>(keep.begin(), keep.end());
  }

  static MaskVector all_visible(const Triple& grid, MaskStrategy s = MaskStrategy::none) {
    return {std::vector<std::uint8_t>(static_cast<std::size_t>(product(grid)), 1), grid, s};
  }
};

struct MaskPolicy {
  double r = 0.7;    // masking ratio
  double s = 0.1;    // hint ratio
  double r_t = 0.7;  // teacher patch-drop ratio (fraction dropped)
  Triple block_shape{4, 4, 4};

  void validate(const std::string& prefix = "mask") const {
    detail::require(r >= 0.0 && r <= 1.0, prefix + ".r", "must lie in [0, 1]");
    detail::require(s >= 0.0 && (s < r || (s == 0.0 && r == 0.0)), prefix + ".s", "need 0 <= s < r");
    detail::require(r_t >= 0.0 && r_t <= 1.0, prefix + ".r_t", "must lie in [0, 1]");
    for (int i = 0; i < 3; ++i)
      detail::require(block_shape[i] >= 1, prefix + ".block_shape[" + std::to_string(i) + "]", "must be >= 1");
  }
};

// floor(ratio * n), tolerant of products that land a rounding error below an
// integer (0.29 * 100 == 28.999...).
inline std::size_t floor_count(double ratio, std::size_t n) {
  return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 1e-9));
}

namespace detail {

// Token indices ordered by value, ties toward the lower index.
inline std::vector<std::size_t> rank_order(const std::vector<double>& v, bool descending) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (descending)
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  else
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  return order;
}

}  // namespace detail

// Masks ranks (floor(sN), floor(rN)] of S_ATT sorted in descending order; the
// top floor(sN) tokens stay visible as hints.
inline MaskVector attention_guided_mask(const SemanticAttention& satt, const MaskPolicy& policy) {
  policy.validate();
  const std::size_t n = satt.size();
  detail::require(n >= 1, "satt", "empty attention vector");
  const std::size_t masked = floor_count(policy.r, n);
  const std::size_t hints = floor_count(policy.s, n);
  if (masked > 0 && hints >= masked)
    throw ValidationError("mask.s", "hint count floor(sN)=" + std::to_string(hints) + " must be below floor(rN)=" +
                                        std::to_string(masked) + " for N=" + std::to_string(n));
  MaskVector m = MaskVector::all_visible(satt.grid, MaskStrategy::attention);
  m.keep.resize(n, 1);
  const auto order = detail::rank_order(satt.values, true);
  for (std::size_t rank = hints; rank < masked; ++rank) m.keep[order[rank]] = 0;
  return m;
}

// MST-style: masks the floor(rN) lowest-attention tokens, no hints.
inline MaskVector low_attention_mask(const SemanticAttention& satt, const MaskPolicy& policy) {
  policy.validate();
  const std::size_t n = satt.size();
  detail::require(n >= 1, "satt", "empty attention vector");
  MaskVector m = MaskVector::all_visible(satt.grid, MaskStrategy::low_attention);
  m.keep.resize(n, 1);
  const auto order = detail::rank_order(satt.values, false);
  for (std::size_t rank = 0; rank < floor_count(policy.r, n); ++rank) m.keep[order[rank]] = 0;
  return m;
}

inline MaskVector random_mask(const Triple& grid, double ratio, std::uint64_t seed,
                              MaskStrategy tag = MaskStrategy::random) {
  detail::require(ratio >= 0.0 && ratio <= 1.0, "ratio", "must lie in [0, 1]");
  const auto n = static_cast<std::size_t>(product(grid));
  MaskVector m = MaskVector::all_visible(grid, tag);
  Engine eng = make_engine(seed, {0x4a5c});
  for (auto i : sample_indices(n, floor_count(ratio, n), eng)) m.keep[i] = 0;
  return m;
}

inline MaskVector random_mask(std::size_t n, double ratio, std::uint64_t seed) {
  return random_mask(Triple{1, 1, static_cast<int>(n)}, ratio, seed);
}

// Whole blocks (a partition of the grid) are masked in random order until
// floor(ratio * N) tokens are covered; the last block is filled from its
// lowest flat grid index upward.
inline MaskVector blockwise_mask(const Triple& grid, double ratio, const Triple& block, std::uint64_t seed) {
  detail::require(ratio >= 0.0 && ratio <= 1.0, "ratio", "must lie in [0, 1]");
  for (int i = 0; i < 3; ++i)
    detail::require(block[i] >= 1 && grid[i] % block[i] == 0, "block_shape[" + std::to_string(i) + "]",
                    "grid not divisible by block shape");
  const Triple counts{grid[0] / block[0], grid[1] / block[1], grid[2] / block[2]};
  std::vector<std::int64_t> blocks(static_cast<std::size_t>(product(counts)));
  std::iota(blocks.begin(), blocks.end(), std::int64_t{0});
  Engine eng = make_engine(seed, {0xb10c});
  std::shuffle(blocks.begin(), blocks.end(), eng);

  MaskVector m = MaskVector::all_visible(grid, MaskStrategy::blockwise);
  std::size_t remaining = floor_count(ratio, static_cast<std::size_t>(product(grid)));
  for (auto b : blocks) {
    if (remaining == 0) break;
    const Triple bc = unflatten(counts, b);
    std::vector<std::int64_t> cells;
    for (int z = 0; z < block[0]; ++z)
      for (int y = 0; y < block[1]; ++y)
        for (int x = 0; x < block[2]; ++x)
          cells.push_back(flat_index(grid, bc[0] * block[0] + z, bc[1] * block[1] + y, bc[2] * block[2] + x));
    // cells are already ascending in flat index
    for (std::size_t i = 0; i < cells.size() && remaining > 0; ++i, --remaining) m.keep[cells[i]] = 0;
  }
  return m;
}

// Nearest-neighbour replication onto a grid `factor` times finer.
inline MaskVector upsample_mask(const MaskVector& m, const Triple& factor) {
  for (int i = 0; i < 3; ++i)
    detail::require(factor[i] >= 1, "factor[" + std::to_string(i) + "]", "must be >= 1");
  const Triple fine{m.grid[0] * factor[0], m.grid[1] * factor[1], m.grid[2] * factor[2]};
  MaskVector out = MaskVector::all_visible(fine, m.strategy);
  for (int z = 0; z < fine[0]; ++z)
    for (int y = 0; y < fine[1]; ++y)
      for (int x = 0; x < fine[2]; ++x)
        out.keep[flat_index(fine, z, y, x)] = m.keep[flat_index(m.grid, z / factor[0], y / factor[1], x / factor[2])];
  return out;
}

// Fraction of masked fine tokens under each coarse cell.
inline std::vector<double> masked_fraction(const MaskVector& fine, const Triple& factor) {
  Triple coarse{};
  for (int i = 0; i < 3; ++i) {
    detail::require(factor[i] >= 1 && fine.grid[i] % factor[i] == 0, "factor[" + std::to_string(i) + "]",
                    "grid not divisible by factor");
    coarse[i] = fine.grid[i] / factor[i];
  }
  std::vector<double> frac(static_cast<std::size_t>(product(coarse)), 0.0);
  for (int z = 0; z < fine.grid[0]; ++z)
    for (int y = 0; y < fine.grid[1]; ++y)
      for (int x = 0; x < fine.grid[2]; ++x)
        if (!fine.keep[flat_index(fine.grid, z, y, x)]) frac[flat_index(coarse, z / factor[0], y / factor[1], x / factor[2])] += 1.0;
  const double cell = static_cast<double>(product(factor));
  for (auto& f : frac) f /= cell;
  return frac;
}

// Coarse cell masked iff at least half of its fine tokens are masked.
inline MaskVector downsample_mask(const MaskVector& fine, const Triple& factor) {
  const auto frac = masked_fraction(fine, factor);
  MaskVector out;
  out.grid = {fine.grid[0] / factor[0], fine.grid[1] / factor[1], fine.grid[2] / factor[2]};
  out.strategy = fine.strategy;
  out.keep.resize(frac.size());
  for (std::size_t i = 0; i < frac.size(); ++i) out.keep[i] = frac[i] >= 0.5 ? 0 : 1;
  return out;
}

// Elementwise product of each token row with its keep bit.
template <class T>
TokenGrid<T> apply_mask(Tape<T>& tape, const TokenGrid<T>& x, const MaskVector& m) {
  detail::require(static_cast<std::int64_t>(m.size()) == x.size(), "mask", "mask length does not match token count");
  return {ag::scale_rows(tape, x.tokens, m.keep_weights<T>()), x.grid, x.stage};
}

// Noise mask with exactly floor(r_t * N) dropped positions.
inline MaskVector patch_dropout_mask(const Triple& grid, double r_t, std::uint64_t seed) {
  detail::require(r_t >= 0.0 && r_t <= 1.0, "r_t", "must lie in [0, 1]");
  return random_mask(grid, r_t, seed ^ 0xd50f'0000'0000ULL, MaskStrategy::dropout);
}

template <class T>
std::pair<TokenGrid<T>, MaskVector> patch_dropout(Tape<T>& tape, const TokenGrid<T>& x, double r_t,
                                                  std::uint64_t seed) {
  MaskVector m = patch_dropout_mask(x.grid, r_t, seed);
  return {apply_mask(tape, x, m), std::move(m)};
}

inline ByteVolume mask_to_volume(const MaskVector& m) {
  return {m.grid, {1.0, 1.0, 1.0}, m.keep};
}

}  // namespace dagman
