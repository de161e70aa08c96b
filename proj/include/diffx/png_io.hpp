#pragma once

#include <png.h>

#include <cstring>
#include <filesystem>
#include <string>

#include "diffx/errors.hpp"
#include "diffx/image.hpp"

namespace diffx {

/// Writes a 1- or 3-channel 8-bit image as PNG.
inline void write_png(const std::filesystem::path& path, const Image8& img) {
  if (img.channels != 1 && img.channels != 3)
    throw DataError("png: cannot write " + std::to_string(img.channels) + "-channel image " + path.string());
  png_image pi;
  std::memset(&pi, 0, sizeof pi);
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(img.width);
  pi.height = static_cast<png_uint_32>(img.height);
  pi.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const int64_t hw = img.height * img.width;
  std::vector<uint8_t> interleaved(img.pixels.size());
  for (int64_t c = 0; c < img.channels; ++c)
    for (int64_t i = 0; i < hw; ++i) interleaved[static_cast<size_t>(i * img.channels + c)] = img.pixels[static_cast<size_t>(c * hw + i)];
  if (!png_image_write_to_file(&pi, path.c_str(), 0, interleaved.data(), 0, nullptr))
    throw DataError("png: failed to write " + path.string() + ": " + pi.message);
}

/// Reads a PNG, keeping its channel count (grayscale 1, RGB 3). Other
/// layouts (alpha, palette) are converted to the nearer of the two.
inline Image8 read_png(const std::filesystem::path& path) {
  png_image pi;
  std::memset(&pi, 0, sizeof pi);
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pi, path.c_str()))
    throw DataError("png: cannot read " + path.string() + ": " + pi.message);
  const bool color = (pi.format & PNG_FORMAT_FLAG_COLOR) != 0;
  pi.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  Image8 img(color ? 3 : 1, pi.height, pi.width);
  std::vector<uint8_t> interleaved(img.pixels.size());
  if (!png_image_finish_read(&pi, nullptr, interleaved.data(), 0, nullptr)) {
    png_image_free(&pi);
    throw DataError("png: corrupt image " + path.string() + ": " + pi.message);
  }
  const int64_t hw = img.height * img.width;
  for (int64_t c = 0; c < img.channels; ++c)
    for (int64_t i = 0; i < hw; ++i) img.pixels[static_cast<size_t>(c * hw + i)] = interleaved[static_cast<size_t>(i * img.channels + c)];
  return img;
}

/// Horizontal strip of images (gray images are replicated to RGB).
inline Image8 hconcat(const std::vector<Image8>& items) {
  if (items.empty()) return {};
  const int64_t H = items[0].height;
  int64_t W = 0;
  for (const auto& im : items) {
    if (im.height != H) throw ShapeError("hconcat: heights differ");
    W += im.width;
  }
  Image8 out(3, H, W);
  int64_t off = 0;
  for (const auto& im : items) {
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < im.width; ++x) out.at(c, y, off + x) = im.at(im.channels == 3 ? c : 0, y, x);
    off += im.width;
  }
  return out;
}

}  // namespace diffx
