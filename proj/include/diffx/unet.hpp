#pragma once

#include <memory>
#include <string>
#include <vector>

#include "diffx/condition_types.hpp"
#include "diffx/layers.hpp"

namespace diffx {

struct UNetConfig {
  int64_t latent_channels = 4;
  int64_t latent_size = 8;
  std::vector<int64_t> widths{128, 256, 256};
  int64_t groups = 32;
  int64_t heads = 8;
  int64_t d_ground = 256;
  int64_t d_text = 256;
  bool use_gated_adapter = true;

  void validate() const {
    if (widths.empty()) throw ConfigError("unet needs at least one resolution");
    if (latent_size % (int64_t{1} << (widths.size() - 1)) != 0)
      throw ConfigError("latent size " + std::to_string(latent_size) + " not divisible by 2^" +
                        std::to_string(widths.size() - 1));
    for (int64_t w : widths)
      if (w % heads != 0) throw ConfigError("unet width " + std::to_string(w) + " not divisible by heads");
  }
};

/// Gated self-attention adapter: visual tokens v attend over
/// LN([v, f(H*)]) and the visual rows are kept, scaled by mu tanh(delta1);
/// then a feed-forward update scaled by mu tanh(delta2). Both gates start at
/// zero, so a fresh adapter is the identity.
template <class T>
class GatedAdapter : public Module<T> {
 public:
  GatedAdapter(Rng& rng, int64_t channels, int64_t d_ground, int64_t heads)
      : proj_(this->register_module("ground_proj", std::make_unique<Linear<T>>(rng, d_ground, channels))),
        ln_attn_(this->register_module("ln_attn", std::make_unique<LayerNorm<T>>(channels))),
        attn_(this->register_module("attn", std::make_unique<MultiHeadAttention<T>>(rng, channels, channels, heads))),
        ln_ff_(this->register_module("ln_ff", std::make_unique<LayerNorm<T>>(channels))),
        ff_(this->register_module("ff", std::make_unique<FeedForward<T>>(rng, channels))) {
    delta1_ = this->register_param("delta1", Tensor<T>::zeros({1}));
    delta2_ = this->register_param("delta2", Tensor<T>::zeros({1}));
  }

  /// v (B, n_vis, C); grounding tokens (B, n, d_ground) with per-entry lengths.
  Var<T> operator()(const Var<T>& v, const GroundingFeature<T>& g, T mu = T(1)) const {
    const int64_t n_vis = v.dim(1);
    Var<T> joint = v;
    std::vector<int64_t> key_len(static_cast<size_t>(v.dim(0)), n_vis);
    if (g.tokens.defined() && g.count() > 0) {
      if (g.batch() != v.dim(0)) throw ShapeError("grounding batch differs from latent batch");
      joint = ops::concat<T>({v, proj_(g.tokens)}, 1);
      for (size_t b = 0; b < key_len.size(); ++b) key_len[b] += g.lengths.at(b);
    }
    Var<T> n = ln_attn_(joint);
    Var<T> sa = ops::slice(attn_(n, n, key_len), 1, 0, n_vis);
    Var<T> x = ops::add(v, ops::scale(ops::mul_scalar(sa, ops::tanh(delta1_)), mu));
    return ops::add(x, ops::scale(ops::mul_scalar(ff_(ln_ff_(x)), ops::tanh(delta2_)), mu));
  }

  const Var<T>& delta1() const { return delta1_; }
  const Var<T>& delta2() const { return delta2_; }

 private:
  Linear<T>& proj_;
  LayerNorm<T>& ln_attn_;
  MultiHeadAttention<T>& attn_;
  LayerNorm<T>& ln_ff_;
  FeedForward<T>& ff_;
  Var<T> delta1_, delta2_;
};

/// GN -> proj_in -> self-attention -> [gated adapter] -> caption
/// cross-attention -> feed-forward -> proj_out, added to the block input.
template <class T>
class SpatialTransformer : public Module<T> {
 public:
  SpatialTransformer(Rng& rng, int64_t channels, const UNetConfig& cfg)
      : norm_(this->register_module("norm", std::make_unique<GroupNorm<T>>(std::gcd(cfg.groups, channels), channels))),
        proj_in_(this->register_module("proj_in", std::make_unique<Linear<T>>(rng, channels, channels))),
        ln1_(this->register_module("ln1", std::make_unique<LayerNorm<T>>(channels))),
        self_(this->register_module("self_attn",
                                    std::make_unique<MultiHeadAttention<T>>(rng, channels, channels, cfg.heads))),
        ln2_(this->register_module("ln2", std::make_unique<LayerNorm<T>>(channels))),
        cross_(this->register_module("cross_attn",
                                     std::make_unique<MultiHeadAttention<T>>(rng, channels, cfg.d_text, cfg.heads))),
        ln3_(this->register_module("ln3", std::make_unique<LayerNorm<T>>(channels))),
        ff_(this->register_module("ff", std::make_unique<FeedForward<T>>(rng, channels))),
        proj_out_(this->register_module("proj_out", std::make_unique<Linear<T>>(rng, channels, channels))) {
    if (cfg.use_gated_adapter)
      adapter_ = &this->register_module("gated", std::make_unique<GatedAdapter<T>>(rng, channels, cfg.d_ground, cfg.heads));
  }

  Var<T> operator()(const Var<T>& x, const CaptionEmbedding<T>& c, const GroundingFeature<T>& g, T mu = T(1)) const {
    const int64_t H = x.dim(2), W = x.dim(3);
    Var<T> t = proj_in_(ops::to_tokens(norm_(x)));
    Var<T> n = ln1_(t);
    t = ops::add(t, self_(n, n));
    if (adapter_) t = (*adapter_)(t, g, mu);
    t = ops::add(t, cross_(ln2_(t), c.tokens, c.lengths));
    t = ops::add(t, ff_(ln3_(t)));
    return ops::add(x, ops::from_tokens(proj_out_(t), H, W));
  }

  const GatedAdapter<T>* adapter() const { return adapter_; }

 private:
  GroupNorm<T>& norm_;
  Linear<T>& proj_in_;
  LayerNorm<T>& ln1_;
  MultiHeadAttention<T>& self_;
  LayerNorm<T>& ln2_;
  MultiHeadAttention<T>& cross_;
  LayerNorm<T>& ln3_;
  FeedForward<T>& ff_;
  Linear<T>& proj_out_;
  const GatedAdapter<T>* adapter_ = nullptr;
};

/// Latent noise predictor: a three-resolution (by default) UNet with one
/// ResBlock + SpatialTransformer per level on both paths, skip concatenation
/// and a sinusoidal timestep embedding.
template <class T>
class DiffXUNet : public Module<T> {
 public:
  DiffXUNet(const UNetConfig& cfg, uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    Rng rng(seed);
    const auto& w = cfg.widths;
    const int64_t L = static_cast<int64_t>(w.size());
    const int64_t temb = 4 * w[0];
    conv_in_ = &this->register_module("conv_in", std::make_unique<Conv2d<T>>(rng, cfg.latent_channels, w[0], 3));
    time1_ = &this->register_module("time1", std::make_unique<Linear<T>>(rng, w[0], temb));
    time2_ = &this->register_module("time2", std::make_unique<Linear<T>>(rng, temb, temb));
    int64_t ch = w[0];
    for (int64_t i = 0; i < L; ++i) {
      const std::string s = std::to_string(i);
      down_.push_back({&this->register_module("down" + s + ".res", std::make_unique<ResBlock<T>>(rng, ch, w[i], cfg.groups, temb)),
                       &this->register_module("down" + s + ".attn", std::make_unique<SpatialTransformer<T>>(rng, w[i], cfg)),
                       nullptr});
      ch = w[i];
      if (i + 1 < L)
        down_.back().resample = &this->register_module("down" + s + ".down", std::make_unique<Conv2d<T>>(rng, ch, ch, 3, 2));
    }
    mid1_ = &this->register_module("mid.res1", std::make_unique<ResBlock<T>>(rng, ch, ch, cfg.groups, temb));
    mid_attn_ = &this->register_module("mid.attn", std::make_unique<SpatialTransformer<T>>(rng, ch, cfg));
    mid2_ = &this->register_module("mid.res2", std::make_unique<ResBlock<T>>(rng, ch, ch, cfg.groups, temb));
    for (int64_t i = L - 1; i >= 0; --i) {
      const std::string s = std::to_string(i);
      Level lv{&this->register_module("up" + s + ".res", std::make_unique<ResBlock<T>>(rng, ch + w[i], w[i], cfg.groups, temb)),
               &this->register_module("up" + s + ".attn", std::make_unique<SpatialTransformer<T>>(rng, w[i], cfg)),
               nullptr};
      ch = w[i];
      if (i > 0) lv.up = &this->register_module("up" + s + ".up", std::make_unique<Upsample<T>>(rng, ch, w[i - 1]));
      if (i > 0) ch = w[i - 1];
      up_.push_back(lv);
    }
    norm_out_ = &this->register_module("norm_out", std::make_unique<GroupNorm<T>>(std::gcd(cfg.groups, ch), ch));
    conv_out_ = &this->register_module("conv_out", std::make_unique<Conv2d<T>>(rng, ch, cfg.latent_channels, 3));
  }

  const UNetConfig& config() const { return cfg_; }

  /// Scale mu on every gated adapter (1 during training).
  void set_gate_scale(T mu) { mu_ = mu; }

  /// eps prediction for z_t (B, c, h, w) at integer timesteps ts.
  Var<T> predict_noise(const Var<T>& z, const std::vector<int>& ts, const CaptionEmbedding<T>& c,
                       const GroundingFeature<T>& g) const {
    const Shape want{z.dim(0), cfg_.latent_channels, cfg_.latent_size, cfg_.latent_size};
    if (z.shape() != want) throw ShapeError("unet expects latent " + shape_str(want) + ", got " + shape_str(z.shape()));
    if (static_cast<int64_t>(ts.size()) != z.dim(0)) throw ShapeError("one timestep per batch entry required");
    if (c.batch() != z.dim(0)) throw ShapeError("caption batch differs from latent batch");
    if (c.width() != cfg_.d_text) throw ShapeError("caption width " + std::to_string(c.width()) + " != d_text");
    if (g.tokens.defined() && g.count() > 0 && g.width() != cfg_.d_ground)
      throw ShapeError("grounding width " + std::to_string(g.width()) + " != d_ground");

    Var<T> emb = (*time2_)(ops::silu((*time1_)(constant(timestep_embedding<T>(ts, cfg_.widths[0])))));
    Var<T> h = (*conv_in_)(z);
    std::vector<Var<T>> skips;
    for (const auto& lv : down_) {
      h = (*lv.attn)((*lv.res)(h, emb), c, g, mu_);
      skips.push_back(h);
      if (lv.resample) h = (*lv.resample)(h);
    }
    h = (*mid2_)((*mid_attn_)((*mid1_)(h, emb), c, g, mu_), emb);
    for (const auto& lv : up_) {
      h = ops::concat<T>({h, skips.back()}, 1);
      skips.pop_back();
      h = (*lv.attn)((*lv.res)(h, emb), c, g, mu_);
      if (lv.up) h = (*lv.up)(h);
    }
    return (*conv_out_)(ops::silu((*norm_out_)(h)));
  }

  Var<T> operator()(const Var<T>& z, const std::vector<int>& ts, const CaptionEmbedding<T>& c,
                    const GroundingFeature<T>& g) const {
    return predict_noise(z, ts, c, g);
  }

  std::vector<const GatedAdapter<T>*> adapters() const {
    std::vector<const GatedAdapter<T>*> out;
    for (const auto& lv : down_)
      if (lv.attn->adapter()) out.push_back(lv.attn->adapter());
    if (mid_attn_->adapter()) out.push_back(mid_attn_->adapter());
    for (const auto& lv : up_)
      if (lv.attn->adapter()) out.push_back(lv.attn->adapter());
    return out;
  }

 private:
  struct Level {
    const ResBlock<T>* res;
    const SpatialTransformer<T>* attn;
    const Conv2d<T>* resample;
    const Upsample<T>* up = nullptr;
  };

  UNetConfig cfg_;
  T mu_ = T(1);
  const Conv2d<T>* conv_in_ = nullptr;
  const Linear<T>* time1_ = nullptr;
  const Linear<T>* time2_ = nullptr;
  std::vector<Level> down_, up_;
  const ResBlock<T>* mid1_ = nullptr;
  const SpatialTransformer<T>* mid_attn_ = nullptr;
  const ResBlock<T>* mid2_ = nullptr;
  const GroupNorm<T>* norm_out_ = nullptr;
  const Conv2d<T>* conv_out_ = nullptr;
};

/// Same architecture without the gated adapters, sharing every other weight.
template <class T>
std::unique_ptr<DiffXUNet<T>> strip_gates(const DiffXUNet<T>& net) {
  UNetConfig cfg = net.config();
  cfg.use_gated_adapter = false;
  auto out = std::make_unique<DiffXUNet<T>>(cfg, 0);
  out->load_matching(net);
  return out;
}

}  // namespace diffx
