#pragma once

#include <cstdint>
#include <vector>

#include "diffx/tensor.hpp"

namespace diffx {

/// 8-bit image, channel-planar (c, H, W). Data records keep images in this
/// form so storage round trips are exact; models see [-1, 1] reals.
struct Image8 {
  int64_t channels = 0;
  int64_t height = 0;
  int64_t width = 0;
  std::vector<uint8_t> pixels;

  Image8() = default;
  Image8(int64_t c, int64_t h, int64_t w, uint8_t fill = 0)
      : channels(c), height(h), width(w), pixels(static_cast<size_t>(c * h * w), fill) {}

  uint8_t& at(int64_t c, int64_t y, int64_t x) { return pixels[static_cast<size_t>((c * height + y) * width + x)]; }
  uint8_t at(int64_t c, int64_t y, int64_t x) const {
    return pixels[static_cast<size_t>((c * height + y) * width + x)];
  }
  bool operator==(const Image8&) const = default;
};

inline uint8_t to_level(double v) {
  const double q = std::round((std::clamp(v, -1.0, 1.0) + 1.0) * 127.5);
  return static_cast<uint8_t>(q);
}

inline double from_level(uint8_t q) { return q / 127.5 - 1.0; }

template <class T>
Tensor<T> to_tensor(const Image8& img) {
  Tensor<T> t({img.channels, img.height, img.width});
  for (size_t i = 0; i < img.pixels.size(); ++i) t[static_cast<int64_t>(i)] = static_cast<T>(from_level(img.pixels[i]));
  return t;
}

/// (c, H, W) or (1, c, H, W) tensor in [-1, 1] to 8-bit levels.
template <class T>
Image8 to_image(const Tensor<T>& t) {
  const Shape& s = t.shape();
  const size_t o = s.size() - 3;
  Image8 img(s[o], s[o + 1], s[o + 2]);
  for (size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = to_level(static_cast<double>(t[static_cast<int64_t>(i)]));
  return img;
}

/// Stacks single images (c, H, W) into a batch (B, c, H, W).
template <class T>
Tensor<T> stack(const std::vector<Tensor<T>>& items) {
  if (items.empty()) throw ShapeError("stack of nothing");
  Shape s = items[0].shape();
  s.insert(s.begin(), static_cast<int64_t>(items.size()));
  Tensor<T> out(s);
  const int64_t n = items[0].numel();
  for (size_t i = 0; i < items.size(); ++i) {
    if (items[i].shape() != items[0].shape()) throw ShapeError("stack: item shapes differ");
    std::copy_n(items[i].data(), n, out.data() + static_cast<int64_t>(i) * n);
  }
  return out;
}

/// Batch entry b of a (B, ...) tensor.
template <class T>
Tensor<T> unstack(const Tensor<T>& batch, int64_t b) {
  Shape s(batch.shape().begin() + 1, batch.shape().end());
  Tensor<T> out(s);
  std::copy_n(batch.data() + b * out.numel(), out.numel(), out.data());
  return out;
}

}  // namespace diffx
