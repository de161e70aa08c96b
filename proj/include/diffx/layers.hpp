#pragma once

#include <cmath>
#include <memory>

#include "diffx/module.hpp"

namespace diffx {

/// GN-SiLU-conv twice with a residual path; the optional embedding (N, emb)
/// is projected and added per channel between the two convolutions.
template <class T>
class ResBlock : public Module<T> {
 public:
  ResBlock(Rng& rng, int64_t in, int64_t out, int64_t groups, int64_t emb_dim = 0)
      : norm1_(this->register_module("norm1", std::make_unique<GroupNorm<T>>(std::gcd(groups, in), in))),
        conv1_(this->register_module("conv1", std::make_unique<Conv2d<T>>(rng, in, out, 3))),
        norm2_(this->register_module("norm2", std::make_unique<GroupNorm<T>>(std::gcd(groups, out), out))),
        conv2_(this->register_module("conv2", std::make_unique<Conv2d<T>>(rng, out, out, 3))) {
    if (emb_dim > 0) emb_ = &this->register_module("emb", std::make_unique<Linear<T>>(rng, emb_dim, out));
    if (in != out) skip_ = &this->register_module("skip", std::make_unique<Conv2d<T>>(rng, in, out, 1));
  }

  Var<T> operator()(const Var<T>& x, const Var<T>& emb = Var<T>()) const {
    Var<T> h = conv1_(ops::silu(norm1_(x)));
    if (emb_ && emb.defined()) h = ops::add_channel(h, (*emb_)(ops::silu(emb)));
    h = conv2_(ops::silu(norm2_(h)));
    return ops::add(skip_ ? (*skip_)(x) : x, h);
  }

 private:
  GroupNorm<T>& norm1_;
  Conv2d<T>& conv1_;
  GroupNorm<T>& norm2_;
  Conv2d<T>& conv2_;
  Linear<T>* emb_ = nullptr;
  Conv2d<T>* skip_ = nullptr;
};

/// Nearest-neighbour x2 followed by a 3x3 convolution.
template <class T>
class Upsample : public Module<T> {
 public:
  Upsample(Rng& rng, int64_t in, int64_t out)
      : conv_(this->register_module("conv", std::make_unique<Conv2d<T>>(rng, in, out, 3))) {}
  Var<T> operator()(const Var<T>& x) const { return conv_(ops::upsample_nearest2x(x)); }

 private:
  Conv2d<T>& conv_;
};

/// Sinusoidal features of integer timesteps, (N, dim): [cos(t f_i), sin(t f_i)].
template <class T>
Tensor<T> timestep_embedding(const std::vector<int>& ts, int64_t dim, double max_period = 10000.0) {
  const int64_t half = dim / 2;
  Tensor<T> out({static_cast<int64_t>(ts.size()), dim});
  for (size_t n = 0; n < ts.size(); ++n)
    for (int64_t i = 0; i < half; ++i) {
      const double f = std::exp(-std::log(max_period) * static_cast<double>(i) / static_cast<double>(half));
      const double a = ts[n] * f;
      out[static_cast<int64_t>(n) * dim + i] = static_cast<T>(std::cos(a));
      out[static_cast<int64_t>(n) * dim + half + i] = static_cast<T>(std::sin(a));
    }
  return out;
}

/// Fixed random-weight convolutional feature extractor shared by the VAE
/// perceptual term and the feature-distance metric. Three SiLU stages
/// (16/32/64 channels, strides 1/2/2); 1-channel inputs are tiled to 3.
/// Weights depend only on `seed`, so every instance with the same seed is
/// identical. Its parameters are never trained.
template <class T>
class FeatureExtractor : public Module<T> {
 public:
  static constexpr uint64_t kDefaultSeed = 0x5eed'fea7ULL;

  explicit FeatureExtractor(uint64_t seed = kDefaultSeed) {
    Rng rng(seed);
    const int64_t widths[3] = {16, 32, 64};
    int64_t in = 3;
    for (int s = 0; s < 3; ++s) {
      stages_.push_back(&this->register_module("stage" + std::to_string(s),
                                               std::make_unique<Conv2d<T>>(rng, in, widths[s], 3, s == 0 ? 1 : 2)));
      in = widths[s];
    }
    // Stop gradients into the extractor weights.
    for (auto& [_, p] : this->named_parameters()) p.node()->requires_grad = false;
  }

  static constexpr int64_t pooled_dim() { return 16 + 32 + 64; }

  /// Activations of every stage for x (N, c, H, W) with c in {1, 3}.
  std::vector<Var<T>> features(const Var<T>& x) const {
    Var<T> h = x;
    if (x.dim(1) == 1) h = ops::concat<T>({x, x, x}, 1);
    if (h.dim(1) != 3) throw ShapeError("feature extractor expects 1 or 3 channels, got " + shape_str(x.shape()));
    std::vector<Var<T>> out;
    for (const auto* s : stages_) {
      h = ops::silu((*s)(h));
      out.push_back(h);
    }
    return out;
  }

  /// Per-stage global average pools concatenated: (N, pooled_dim()).
  Tensor<T> pooled(const Tensor<T>& x) const {
    NoGradGuard ng;
    auto feats = features(constant(x));
    const int64_t N = x.dim(0);
    Tensor<T> out({N, pooled_dim()});
    int64_t off = 0;
    for (const auto& f : feats) {
      const int64_t C = f.dim(1), HW = f.dim(2) * f.dim(3);
      for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
          double acc = 0;
          for (int64_t i = 0; i < HW; ++i) acc += f.value()[(n * C + c) * HW + i];
          out[n * pooled_dim() + off + c] = static_cast<T>(acc / static_cast<double>(HW));
        }
      off += C;
    }
    return out;
  }

  /// Sum over stages of the mean squared activation difference.
  Var<T> feature_match(const Var<T>& a, const Var<T>& b) const {
    auto fa = features(a);
    auto fb = features(b);
    Var<T> total;
    for (size_t s = 0; s < fa.size(); ++s) {
      Var<T> term = ops::mse(fa[s], fb[s]);
      total = total.defined() ? ops::add(total, term) : term;
    }
    return total;
  }

 private:
  std::vector<const Conv2d<T>*> stages_;
};

}  // namespace diffx
