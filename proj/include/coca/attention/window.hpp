#pragma once

// Window tiling of patch grids.
//
// A patch grid is [B, h, w, C]. Partitioning into side x side tiles gives
// windows [B * nW, T, C] with T = side^2; window index runs row-major over the
// tile grid and is batch-major, token index runs row-major inside the tile.

#include <string>
#include <vector>

#include "coca/numeric/ops.hpp"

namespace coca {

struct WindowGeometry {
  std::size_t batch = 0;
  std::size_t height = 0;  // padded extents
  std::size_t width = 0;
  std::size_t side = 0;

  std::size_t rows() const { return height / side; }
  std::size_t cols() const { return width / side; }
  std::size_t windows_per_image() const { return rows() * cols(); }
  std::size_t tokens() const { return side * side; }
};

inline std::size_t round_up(std::size_t n, std::size_t m) { return (n + m - 1) / m * m; }

template <class T>
Tensor<T> window_partition(const Tensor<T>& grid, std::size_t side) {
  if (grid.rank() != 4) throw DimensionError("window_partition expects [B,h,w,C], got " + to_string(grid.shape()));
  if (side == 0) throw ConfigError("window side must be positive");
  const std::size_t b = grid.dim(0), h = grid.dim(1), w = grid.dim(2), c = grid.dim(3);
  if (h % side != 0 || w % side != 0)
    throw std::logic_error("window_partition: grid " + to_string(grid.shape()) + " not divisible by window side " +
                           std::to_string(side) + " (pad first)");
  auto x = reshape(grid, {b, h / side, side, w / side, side, c});
  x = permute(x, {0, 1, 3, 2, 4, 5});
  return reshape(x, {b * (h / side) * (w / side), side * side, c});
}

template <class T>
Tensor<T> window_reverse(const Tensor<T>& windows, std::size_t h, std::size_t w) {
  if (windows.rank() != 3) throw DimensionError("window_reverse expects [B*nW,T,C], got " + to_string(windows.shape()));
  const std::size_t bw = windows.dim(0), t = windows.dim(1), c = windows.dim(2);
  std::size_t side = 0;
  while ((side + 1) * (side + 1) <= t) ++side;
  if (side == 0 || side * side != t)
    throw DimensionError("window_reverse: token count " + std::to_string(t) + " is not a square");
  if (h % side != 0 || w % side != 0)
    throw DimensionError("window_reverse: extents " + std::to_string(h) + "x" + std::to_string(w) +
                         " not divisible by window side " + std::to_string(side));
  const std::size_t nw = (h / side) * (w / side);
  if (bw % nw != 0)
    throw DimensionError("window_reverse: " + std::to_string(bw) + " windows inconsistent with " + std::to_string(h) +
                         "x" + std::to_string(w) + " grid of side " + std::to_string(side));
  auto x = reshape(windows, {bw / nw, h / side, w / side, side, side, c});
  x = permute(x, {0, 1, 3, 2, 4, 5});
  return reshape(x, {bw / nw, h, w, c});
}

/// Right/bottom zero padding of a grid up to multiples of `side`.
template <class T>
Tensor<T> pad_grid(const Tensor<T>& grid, std::size_t side) {
  const std::size_t b = grid.dim(0), h = grid.dim(1), w = grid.dim(2), c = grid.dim(3);
  const std::size_t hp = round_up(h, side), wp = round_up(w, side);
  auto x = grid;
  if (hp != h) x = concat<T>({x, Tensor<T>::zeros({b, hp - h, w, c})}, 1);
  if (wp != w) x = concat<T>({x, Tensor<T>::zeros({b, hp, wp - w, c})}, 2);
  return x;
}

template <class T>
Tensor<T> crop_grid(const Tensor<T>& grid, std::size_t h, std::size_t w) {
  auto x = grid;
  if (x.dim(1) != h) x = slice(x, 1, 0, h);
  if (x.dim(2) != w) x = slice(x, 2, 0, w);
  return x;
}

inline constexpr double kMaskedScore = -1e9;

/// Additive key mask [nW, 1, 1, T + extra] that hides padded tokens. The
/// trailing `extra` columns (coordinator keys) are left open unless
/// `mask_extra` is set. Returns an undefined tensor when nothing is masked.
template <class T>
Tensor<T> window_key_mask(std::size_t h, std::size_t w, std::size_t side, std::size_t extra = 0,
                          bool mask_extra = false) {
  const std::size_t hp = round_up(h, side), wp = round_up(w, side);
  if (hp == h && wp == w && !(mask_extra && extra > 0)) return {};
  const std::size_t rows = hp / side, cols = wp / side, t = side * side, keys = t + extra;
  std::vector<T> m(rows * cols * keys, T(0));
  for (std::size_t wr = 0; wr < rows; ++wr)
    for (std::size_t wc = 0; wc < cols; ++wc) {
      T* row = m.data() + (wr * cols + wc) * keys;
      for (std::size_t i = 0; i < side; ++i)
        for (std::size_t j = 0; j < side; ++j)
          if (wr * side + i >= h || wc * side + j >= w) row[i * side + j] = static_cast<T>(kMaskedScore);
      if (mask_extra)
        for (std::size_t k = t; k < keys; ++k) row[k] = static_cast<T>(kMaskedScore);
    }
  return Tensor<T>({rows * cols, 1, 1, keys}, std::move(m));
}

}  // namespace coca
