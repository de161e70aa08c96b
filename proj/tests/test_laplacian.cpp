#include <gtest/gtest.h>

#include <cmath>

#include "diffx/laplacian.hpp"

using namespace diffx;

namespace {

// Straightforward reference: full 5x5 kernel, explicit mirrored indexing.
double ref_kernel(int dy, int dx) {
  const double k[5] = {1, 4, 6, 4, 1};
  return k[dy + 2] * k[dx + 2] / 256.0;
}

int mirror(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
  return i;
}

std::vector<std::vector<double>> ref_blur(const std::vector<std::vector<double>>& img, double gain) {
  const int H = static_cast<int>(img.size()), W = static_cast<int>(img[0].size());
  std::vector<std::vector<double>> out(H, std::vector<double>(W, 0.0));
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int dy = -2; dy <= 2; ++dy)
        for (int dx = -2; dx <= 2; ++dx) out[y][x] += gain * ref_kernel(dy, dx) * img[mirror(y + dy, H)][mirror(x + dx, W)];
  return out;
}

std::vector<std::vector<double>> ref_down(const std::vector<std::vector<double>>& img) {
  auto b = ref_blur(img, 1.0);
  std::vector<std::vector<double>> out(img.size() / 2, std::vector<double>(img[0].size() / 2));
  for (size_t y = 0; y < out.size(); ++y)
    for (size_t x = 0; x < out[0].size(); ++x) out[y][x] = b[2 * y][2 * x];
  return out;
}

std::vector<std::vector<double>> ref_up(const std::vector<std::vector<double>>& img) {
  std::vector<std::vector<double>> z(img.size() * 2, std::vector<double>(img[0].size() * 2, 0.0));
  for (size_t y = 0; y < img.size(); ++y)
    for (size_t x = 0; x < img[0].size(); ++x) z[2 * y][2 * x] = img[y][x];
  return ref_blur(z, 4.0);
}

}  // namespace

TEST(Laplacian, ConstantImageHasNoBandEnergy) {
  Tensor<double> img({2, 16, 16}, 0.37);
  auto pyr = laplacian_pyramid(img, 3);
  ASSERT_EQ(pyr.levels.size(), 3u);
  for (const auto& l : pyr.levels)
    for (double v : l.vec()) EXPECT_NEAR(v, 0.0, 1e-12);
  EXPECT_EQ(pyr.lowpass.shape(), (Shape{2, 2, 2}));
  for (double v : pyr.lowpass.vec()) EXPECT_NEAR(v, 0.37, 1e-12);
}

TEST(Laplacian, PerfectReconstructionRandomImages) {
  Rng rng(1);
  for (int K = 1; K <= 3; ++K)
    for (int i = 0; i < 20; ++i) {
      auto img = rng.uniform_tensor<float>({3, 32, 32}, -1, 1);
      EXPECT_LT(max_abs_diff(reconstruct(laplacian_pyramid(img, K)), img), 1e-6f);
      auto imgd = rng.uniform_tensor<double>({1, 16, 24}, -1, 1);
      EXPECT_LT(max_abs_diff(reconstruct(laplacian_pyramid(imgd, K)), imgd), 1e-12);
    }
}

TEST(Laplacian, SinglePixelMatchesReferencePyramid) {
  Tensor<double> img({1, 16, 16}, 0.0);
  img.at({0, 5, 9}) = 1.0;
  auto pyr = laplacian_pyramid(img, 2);

  std::vector<std::vector<double>> g0(16, std::vector<double>(16, 0.0));
  g0[5][9] = 1.0;
  auto g1 = ref_down(g0);
  auto g2 = ref_down(g1);
  auto u1 = ref_up(g1), u2 = ref_up(g2);
  double e0 = 0, e1 = 0;
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) {
      const double l0 = g0[y][x] - u1[y][x];
      e0 += l0 * l0;
      EXPECT_NEAR(pyr.levels[0].at({0, y, x}), l0, 1e-14);
    }
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      const double l1 = g1[y][x] - u2[y][x];
      e1 += l1 * l1;
      EXPECT_NEAR(pyr.levels[1].at({0, y, x}), l1, 1e-14);
    }
  double pe0 = 0, pe1 = 0;
  for (double v : pyr.levels[0].vec()) pe0 += v * v;
  for (double v : pyr.levels[1].vec()) pe1 += v * v;
  EXPECT_NEAR(pe0, e0, 1e-12);
  EXPECT_NEAR(pe1, e1, 1e-12);
  EXPECT_GT(e0, e1);  // an impulse is mostly high frequency
}

TEST(Laplacian, DivisibilityError) {
  EXPECT_THROW(laplacian_pyramid(Tensor<double>({1, 12, 12}), 3), ShapeError);
  EXPECT_THROW(laplacian_pyramid(Tensor<double>({1, 16, 16}), 0), RangeError);
}
