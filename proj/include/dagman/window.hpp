#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "dagman/autograd.hpp"
#include "dagman/volume.hpp"

namespace dagman {

// Index maps for one (grid, window, shift) combination.
//
// Tokens are stored grid-ordered (flat C-order). Attention needs them grouped
// window by window after a cyclic roll by -shift; `forward[r]` is the grid
// index feeding window-ordered row r, `inverse` undoes the permutation.
struct WindowPlan {
  Triple grid{};
  Triple window{};
  Triple shift{};
  int window_tokens = 0;
  std::int64_t windows = 0;
  bool identity = true;  // forward is the identity permutation
  std::shared_ptr<const std::vector<std::int64_t>> forward;
  std::shared_ptr<const std::vector<std::int64_t>> inverse;
  std::shared_ptr<const std::vector<int>> bias_index;            // wt*wt entries
  std::shared_ptr<const std::vector<std::uint8_t>> pair_mask;    // null when unshifted
  int bias_rows = 0;                                              // (2wz-1)(2wy-1)(2wx-1)
};

// Relative offset (a - b) of two in-window positions mapped to a bias row.
inline int relative_bias_row(const Triple& window, const Triple& a, const Triple& b) {
  const int sy = 2 * window[1] - 1, sx = 2 * window[2] - 1;
  return ((a[0] - b[0] + window[0] - 1) * sy + (a[1] - b[1] + window[1] - 1)) * sx + (a[2] - b[2] + window[2] - 1);
}

inline WindowPlan make_window_plan(const Triple& grid, const Triple& window, const Triple& shift) {
  for (int i = 0; i < 3; ++i) {
    detail::require(window[i] >= 1 && grid[i] % window[i] == 0, "window_size[" + std::to_string(i) + "]",
                    "token grid " + std::to_string(grid[i]) + " not divisible by window " + std::to_string(window[i]));
    detail::require(shift[i] >= 0 && shift[i] < window[i], "shift[" + std::to_string(i) + "]",
                    "shift must satisfy 0 <= shift < window");
  }
  WindowPlan plan;
  plan.grid = grid;
  plan.window = window;
  plan.shift = shift;
  plan.window_tokens = static_cast<int>(product(window));
  plan.bias_rows = (2 * window[0] - 1) * (2 * window[1] - 1) * (2 * window[2] - 1);
  const Triple counts{grid[0] / window[0], grid[1] / window[1], grid[2] / window[2]};
  plan.windows = product(counts);
  const int wt = plan.window_tokens;
  const bool shifted = shift[0] || shift[1] || shift[2];

  auto fwd = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(product(grid)));
  auto mask = shifted ? std::make_shared<std::vector<std::uint8_t>>(static_cast<std::size_t>(plan.windows * wt * wt))
                      : nullptr;
  std::vector<int> label(wt);
  std::int64_t r = 0;
  for (std::int64_t w = 0; w < plan.windows; ++w) {
    const Triple wc = unflatten(counts, w);
    for (int t = 0; t < wt; ++t, ++r) {
      const Triple lc = unflatten(window, t);
      Triple rolled{}, src{};
      int lab = 0;
      for (int i = 0; i < 3; ++i) {
        rolled[i] = wc[i] * window[i] + lc[i];
        src[i] = (rolled[i] + shift[i]) % grid[i];
        // Swin region labels: tokens that wrapped around form their own region.
        const int region = shift[i] == 0 ? 0 : (rolled[i] < grid[i] - window[i] ? 0 : rolled[i] < grid[i] - shift[i] ? 1 : 2);
        lab = lab * 3 + region;
      }
      (*fwd)[r] = flat_index(grid, src[0], src[1], src[2]);
      label[t] = lab;
    }
    if (mask)
      for (int i = 0; i < wt; ++i)
        for (int j = 0; j < wt; ++j) (*mask)[(w * wt + i) * wt + j] = label[i] != label[j];
  }
  auto inv = std::make_shared<std::vector<std::int64_t>>(fwd->size());
  plan.identity = true;
  for (std::size_t i = 0; i < fwd->size(); ++i) {
    (*inv)[(*fwd)[i]] = static_cast<std::int64_t>(i);
    if ((*fwd)[i] != static_cast<std::int64_t>(i)) plan.identity = false;
  }
  auto bias = std::make_shared<std::vector<int>>(static_cast<std::size_t>(wt) * wt);
  for (int i = 0; i < wt; ++i)
    for (int j = 0; j < wt; ++j) (*bias)[i * wt + j] = relative_bias_row(window, unflatten(window, i), unflatten(window, j));
  plan.forward = std::move(fwd);
  plan.inverse = std::move(inv);
  plan.bias_index = std::move(bias);
  plan.pair_mask = std::move(mask);
  return plan;
}

}  // namespace dagman
