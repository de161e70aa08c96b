#include <gtest/gtest.h>

#include <cmath>

#include "diffx/unet.hpp"
#include "gradcheck.hpp"

using namespace diffx;

namespace {

UNetConfig micro_config() {
  UNetConfig c;
  c.latent_channels = 2;
  c.latent_size = 4;
  c.widths = {8, 8, 8};
  c.groups = 4;
  c.heads = 2;
  c.d_ground = 6;
  c.d_text = 5;
  return c;
}

template <class T>
CaptionEmbedding<T> caption(Rng& rng, int64_t B, int64_t L, int64_t d) {
  return {constant(rng.normal_tensor<T>({B, L, d})), std::vector<int64_t>(static_cast<size_t>(B), L),
          std::vector<bool>(static_cast<size_t>(B), false)};
}

template <class T>
GroundingFeature<T> grounding(Rng& rng, int64_t B, int64_t n, int64_t d) {
  return {constant(rng.normal_tensor<T>({B, n, d})), std::vector<int64_t>(static_cast<size_t>(B), n)};
}

template <class T>
void open_gates(const DiffXUNet<T>& net, double d1, double d2) {
  for (const auto* a : net.adapters()) {
    Var<T> x = a->delta1(), y = a->delta2();
    x.mutable_value()[0] = static_cast<T>(d1);
    y.mutable_value()[0] = static_cast<T>(d2);
  }
}

}  // namespace

TEST(UNet, OutputMatchesLatentShape) {
  UNetConfig cfg;
  cfg.widths = {32, 64, 64};
  cfg.d_ground = 32;
  cfg.d_text = 32;
  DiffXUNet<float> net(cfg, 1);
  Rng rng(2);
  auto z = constant(rng.normal_tensor<float>({2, 4, 8, 8}));
  auto eps = net(z, {5, 900}, caption<float>(rng, 2, 7, 32), grounding<float>(rng, 2, 3, 32));
  EXPECT_EQ(eps.shape(), (Shape{2, 4, 8, 8}));
  EXPECT_EQ(net.adapters().size(), 7u);
}

TEST(UNet, InputErrors) {
  auto cfg = micro_config();
  DiffXUNet<double> net(cfg, 3);
  Rng rng(4);
  auto c = caption<double>(rng, 1, 3, 5);
  auto g = grounding<double>(rng, 1, 2, 6);
  EXPECT_THROW(net(constant(Tensor<double>({1, 2, 8, 8})), {1}, c, g), ShapeError);
  EXPECT_THROW(net(constant(Tensor<double>({1, 2, 4, 4})), {1, 2}, c, g), ShapeError);
  EXPECT_THROW(net(constant(Tensor<double>({1, 2, 4, 4})), {1}, caption<double>(rng, 1, 3, 4), g), ShapeError);
  EXPECT_THROW(net(constant(Tensor<double>({1, 2, 4, 4})), {1}, c, grounding<double>(rng, 1, 2, 3)), ShapeError);
  auto bad = cfg;
  bad.heads = 3;
  EXPECT_THROW(DiffXUNet<double>(bad, 1), ConfigError);
  bad = cfg;
  bad.latent_size = 6;
  EXPECT_THROW(DiffXUNet<double>(bad, 1), ConfigError);
}

// Closed gates make the adapter the identity, so the stripped clone agrees.
TEST(UNet, FreshAdaptersMatchStrippedClone) {
  auto cfg = micro_config();
  DiffXUNet<double> net(cfg, 5);
  auto plain = strip_gates(net);
  EXPECT_TRUE(plain->adapters().empty());
  EXPECT_LT(plain->parameter_count(), net.parameter_count());
  Rng rng(6);
  auto z = constant(rng.normal_tensor<double>({2, 2, 4, 4}));
  auto c = caption<double>(rng, 2, 3, 5);
  auto g = grounding<double>(rng, 2, 4, 6);
  EXPECT_EQ(net(z, {3, 40}, c, g).value(), (*plain)(z, {3, 40}, c, g).value());

  open_gates(net, 0.5, 0.5);
  EXPECT_GT(max_abs_diff(net(z, {3, 40}, c, g).value(), (*plain)(z, {3, 40}, c, g).value()), 1e-6);
  net.set_gate_scale(0.0);
  EXPECT_EQ(net(z, {3, 40}, c, g).value(), (*plain)(z, {3, 40}, c, g).value());
}

TEST(UNet, GroundingTokenOrderAndPaddingInvariance) {
  auto cfg = micro_config();
  DiffXUNet<double> net(cfg, 7);
  open_gates(net, 0.7, -0.3);
  Rng rng(8);
  auto z = constant(rng.normal_tensor<double>({1, 2, 4, 4}));
  auto c = caption<double>(rng, 1, 3, 5);
  auto toks = rng.normal_tensor<double>({1, 3, 6});
  Tensor<double> perm({1, 3, 6});
  const int order[3] = {2, 0, 1};
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 6; ++k) perm[i * 6 + k] = toks[order[i] * 6 + k];
  Tensor<double> padded({1, 5, 6}, 123.0);
  std::copy_n(toks.data(), 18, padded.data());

  auto a = net(z, {10}, c, {constant(toks), {3}}).value();
  auto b = net(z, {10}, c, {constant(perm), {3}}).value();
  auto p = net(z, {10}, c, {constant(padded), {3}}).value();
  EXPECT_LT(max_abs_diff(a, b), 1e-12);
  EXPECT_LT(max_abs_diff(a, p), 1e-12);

  // No layout tokens at all is accepted and differs from a real layout.
  auto e = net(z, {10}, c, {constant(Tensor<double>({1, 0, 6})), {0}}).value();
  EXPECT_GT(max_abs_diff(a, e), 1e-8);
  EXPECT_EQ(e.shape(), a.shape());
}

TEST(UNet, GradientReachesGroundingThroughOpenGates) {
  auto cfg = micro_config();
  DiffXUNet<double> net(cfg, 9);
  Rng rng(10);
  auto z = constant(rng.normal_tensor<double>({1, 2, 4, 4}));
  auto c = caption<double>(rng, 1, 3, 5);
  Var<double> g = parameter(rng.normal_tensor<double>({1, 2, 6}));

  auto grad_norm = [](const Tensor<double>& t) {
    double s = 0;
    for (double v : t.vec()) s += v * v;
    return std::sqrt(s);
  };
  ops::sum(ops::square(net(z, {20}, c, {g, {2}}))).backward();
  EXPECT_EQ(grad_norm(g.grad()), 0.0);
  for (const auto* a : net.adapters()) EXPECT_GT(std::abs(a->delta1().grad()[0]), 0.0);

  net.zero_grad();
  g.zero_grad();
  open_gates(net, 0.1, 0.1);
  ops::sum(ops::square(net(z, {20}, c, {g, {2}}))).backward();
  EXPECT_GT(grad_norm(g.grad()), 1e-8);
  for (auto& [name, p] : net.named_parameters())
    if (name.find("ground_proj.weight") != std::string::npos) EXPECT_GT(grad_norm(p.grad()), 0.0) << name;
}

TEST(UNet, MicroGradientCheck) {
  auto cfg = micro_config();
  DiffXUNet<double> net(cfg, 11);
  open_gates(net, 0.4, -0.2);
  Rng rng(12);
  auto z = constant(rng.normal_tensor<double>({2, 2, 4, 4}));
  CaptionEmbedding<double> c{constant(rng.normal_tensor<double>({2, 3, 5})), {3, 2}, {false, false}};
  GroundingFeature<double> g{constant(rng.normal_tensor<double>({2, 2, 6})), {2, 1}};
  auto target = rng.normal_tensor<double>({2, 2, 4, 4});
  auto res = diffx::testing::grad_check(
      net.named_parameters(), [&] { return ops::mse(net(z, {7, 300}, c, g), constant(target)); }, 3);
  EXPECT_LT(res.max_rel_err, 1e-3) << res.worst;
}
