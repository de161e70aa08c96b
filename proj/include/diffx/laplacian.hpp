#pragma once

#include <array>
#include <vector>

#include "diffx/tensor.hpp"

namespace diffx {

/// Band-pass levels L_0..L_{K-1} (finest first) and the low-pass residual G_K.
template <class T>
struct LaplacianPyramid {
  std::vector<Tensor<T>> levels;
  Tensor<T> lowpass;
};

namespace lp_detail {

// Binomial 5-tap kernel, the usual Burt-Adelson choice.
inline constexpr std::array<double, 5> kTaps{1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};

inline int64_t reflect(int64_t i, int64_t n) {
  if (n == 1) return 0;
  const int64_t period = 2 * n - 2;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

// Separable blur of a (C, H, W) image with reflect padding, scaled by `gain`.
template <class T>
Tensor<T> blur(const Tensor<T>& x, double gain = 1.0) {
  const int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  Tensor<T> tmp(x.shape()), out(x.shape());
  for (int64_t c = 0; c < C; ++c)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t xx = 0; xx < W; ++xx) {
        double acc = 0;
        for (int k = -2; k <= 2; ++k) acc += kTaps[k + 2] * x[(c * H + y) * W + reflect(xx + k, W)];
        tmp[(c * H + y) * W + xx] = static_cast<T>(acc);
      }
  for (int64_t c = 0; c < C; ++c)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t xx = 0; xx < W; ++xx) {
        double acc = 0;
        for (int k = -2; k <= 2; ++k) acc += kTaps[k + 2] * tmp[(c * H + reflect(y + k, H)) * W + xx];
        out[(c * H + y) * W + xx] = static_cast<T>(gain * acc);
      }
  return out;
}

}  // namespace lp_detail

/// blur then keep every second pixel.
template <class T>
Tensor<T> pyr_down(const Tensor<T>& x) {
  Tensor<T> b = lp_detail::blur(x);
  const int64_t C = x.dim(0), H = x.dim(1) / 2, W = x.dim(2) / 2;
  Tensor<T> out({C, H, W});
  for (int64_t c = 0; c < C; ++c)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t xx = 0; xx < W; ++xx) out[(c * H + y) * W + xx] = b[(c * 2 * H + 2 * y) * 2 * W + 2 * xx];
  return out;
}

/// zero insertion then blur with gain 4.
template <class T>
Tensor<T> pyr_up(const Tensor<T>& x) {
  const int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  Tensor<T> z({C, 2 * H, 2 * W});
  for (int64_t c = 0; c < C; ++c)
    for (int64_t y = 0; y < H; ++y)
      for (int64_t xx = 0; xx < W; ++xx) z[(c * 2 * H + 2 * y) * 2 * W + 2 * xx] = x[(c * H + y) * W + xx];
  return lp_detail::blur(z, 4.0);
}

/// Decomposes a (C, H, W) image into K band-pass levels plus the low-pass
/// residual: L_k = G_k - up(G_{k+1}), G_0 = image, G_{k+1} = down(blur(G_k)).
template <class T>
LaplacianPyramid<T> laplacian_pyramid(const Tensor<T>& image, int K) {
  if (image.rank() != 3) throw ShapeError("laplacian_pyramid expects (C, H, W), got " + shape_str(image.shape()));
  if (K < 1) throw RangeError("laplacian_pyramid needs K >= 1");
  const int64_t div = int64_t{1} << K;
  if (image.dim(1) % div != 0 || image.dim(2) % div != 0)
    throw ShapeError("image " + shape_str(image.shape()) + " not divisible by 2^" + std::to_string(K));
  LaplacianPyramid<T> pyr;
  Tensor<T> g = image;
  for (int k = 0; k < K; ++k) {
    Tensor<T> next = pyr_down(g);
    Tensor<T> up = pyr_up(next);
    Tensor<T> band(g.shape());
    for (int64_t i = 0; i < g.numel(); ++i) band[i] = g[i] - up[i];
    pyr.levels.push_back(std::move(band));
    g = std::move(next);
  }
  pyr.lowpass = std::move(g);
  return pyr;
}

template <class T>
Tensor<T> reconstruct(const LaplacianPyramid<T>& pyr) {
  Tensor<T> g = pyr.lowpass;
  for (size_t k = pyr.levels.size(); k-- > 0;) {
    Tensor<T> up = pyr_up(g);
    const auto& band = pyr.levels[k];
    for (int64_t i = 0; i < up.numel(); ++i) up[i] += band[i];
    g = std::move(up);
  }
  return g;
}

}  // namespace diffx
