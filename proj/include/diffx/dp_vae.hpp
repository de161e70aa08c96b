#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "diffx/laplacian.hpp"
#include "diffx/layers.hpp"
#include "diffx/modality.hpp"

namespace diffx {

struct VaeConfig {
  std::vector<Modality> modalities{Modality::rgb, Modality::depth};
  int64_t image_size = 64;
  int64_t stem_width = 64;
  /// One entry per downsampling stage; the latent is image_size / 2^widths.size().
  std::vector<int64_t> widths{64, 128, 128};
  int64_t latent_channels = 4;
  int64_t groups = 16;
  int lp_levels = 3;
  bool use_lp = true;
  bool allow_unimodal = false;

  int64_t latent_size() const { return image_size >> widths.size(); }
  Shape latent_shape(int64_t batch) const { return {batch, latent_channels, latent_size(), latent_size()}; }

  void validate() const {
    if (modalities.empty()) throw ConfigError("vae: no modalities configured");
    if (modalities.size() < 2 && !allow_unimodal) throw ConfigError("vae: at least two modalities required");
    if (widths.empty()) throw ConfigError("vae.widths must not be empty");
    if (image_size % (int64_t{1} << widths.size()) != 0)
      throw ConfigError("vae: image size " + std::to_string(image_size) + " not divisible by the downsampling factor");
    if (use_lp && (lp_levels < 1 || lp_levels > static_cast<int>(widths.size())))
      throw ConfigError("vae.lp_levels must lie in [1, number of encoder stages]");
    for (size_t i = 0; i < modalities.size(); ++i)
      for (size_t j = i + 1; j < modalities.size(); ++j)
        if (modalities[i] == modalities[j]) throw ConfigError("vae: duplicate modality " + to_string(modalities[i]));
  }
};

/// Diagonal Gaussian posterior over the shared latent, (B, C, h, w) each.
template <class T>
struct LatentDistribution {
  Var<T> mu;
  Var<T> logvar;
};

/// z = mu + exp(logvar / 2) * eps.
template <class T>
Var<T> reparameterize(const LatentDistribution<T>& d, const Tensor<T>& eps) {
  return ops::add(d.mu, ops::mul(ops::exp(ops::scale(d.logvar, T(0.5))), constant(eps)));
}

struct VaeLossWeights {
  double mse = 1.0;
  double feat = 0.1;
  double kl = 1e-6;
};

template <class T>
struct VaeLoss {
  Var<T> total;
  double mse = 0, feat = 0, kl = 0;
};

/// Dual-path VAE: per-modality stems summed into one shared encoder that also
/// receives Laplacian band-pass features at matching scales, and one decoder
/// per modality reading the shared latent.
template <class T>
class DpVae : public Module<T> {
 public:
  DpVae(const VaeConfig& cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    // LP projections use their own stream.
    Rng lp_rng(derive_seed(seed, 17));
    const auto& w = cfg_.widths;
    const int64_t D = static_cast<int64_t>(w.size());
    int64_t lp_in = 0;
    for (Modality m : cfg_.modalities) {
      stems_.push_back(&this->register_module("stem_" + to_string(m),
                                              std::make_unique<Conv2d<T>>(rng, channels_of(m), cfg_.stem_width, 3)));
      lp_in += channels_of(m);
    }
    int64_t in = cfg_.stem_width;
    for (int64_t k = 0; k < D; ++k) {
      const std::string s = std::to_string(k);
      if (cfg_.use_lp && k < cfg_.lp_levels)
        lp_convs_.push_back(&this->register_module("lp" + s, std::make_unique<Conv2d<T>>(lp_rng, lp_in, in, 3)));
      enc_res_.push_back(&this->register_module("enc_res" + s, std::make_unique<ResBlock<T>>(rng, in, w[k], cfg_.groups)));
      enc_down_.push_back(&this->register_module("enc_down" + s, std::make_unique<Conv2d<T>>(rng, w[k], w[k], 3, 2)));
      in = w[k];
    }
    enc_mid_ = &this->register_module("enc_mid", std::make_unique<ResBlock<T>>(rng, in, in, cfg_.groups));
    enc_norm_ = &this->register_module("enc_norm", std::make_unique<GroupNorm<T>>(std::gcd(cfg_.groups, in), in));
    enc_out_ = &this->register_module("enc_out", std::make_unique<Conv2d<T>>(rng, in, 2 * cfg_.latent_channels, 3));
    for (Modality m : cfg_.modalities)
      decoders_.push_back(&this->register_module("dec_" + to_string(m), std::make_unique<Decoder>(rng, cfg_, m)));
  }

  const VaeConfig& config() const { return cfg_; }

  /// Bundle images must be batched (B, c, H, W) and ordered as configured.
  LatentDistribution<T> encode(const ModalBundle<T>& bundle) const {
    check_bundle(bundle);
    Var<T> h;
    for (size_t i = 0; i < bundle.size(); ++i) {
      Var<T> s = (*stems_[i])(constant(bundle[i].image));
      h = h.defined() ? ops::add(h, s) : s;
    }
    std::vector<Tensor<T>> bands;
    if (cfg_.use_lp) bands = band_features(bundle);
    for (size_t k = 0; k < enc_res_.size(); ++k) {
      if (k < lp_convs_.size()) h = ops::add(h, (*lp_convs_[k])(constant(bands[k])));
      h = (*enc_down_[k])((*enc_res_[k])(h));
    }
    h = (*enc_out_)(ops::silu((*enc_norm_)((*enc_mid_)(h))));
    const int64_t C = cfg_.latent_channels;
    return {ops::slice(h, 1, 0, C), ops::slice(h, 1, C, 2 * C)};
  }

  /// One output per configured modality, tanh-bounded to [-1, 1].
  ModalBundle<T> decode(const Tensor<T>& z) const {
    NoGradGuard ng;
    auto outs = decode_vars(constant(z));
    ModalBundle<T> b;
    for (size_t i = 0; i < outs.size(); ++i) b.push_back({cfg_.modalities[i], outs[i].value()});
    return b;
  }

  std::vector<Var<T>> decode_vars(const Var<T>& z) const {
    const Shape expect = cfg_.latent_shape(z.shape().empty() ? 0 : z.dim(0));
    if (z.shape() != expect)
      throw ShapeError("latent shape " + shape_str(z.shape()) + " does not match configured " + shape_str(expect));
    std::vector<Var<T>> outs;
    for (const auto* d : decoders_) outs.push_back((*d)(z));
    return outs;
  }

 private:
  class Decoder : public Module<T> {
   public:
    Decoder(Rng& rng, const VaeConfig& cfg, Modality m) {
      const auto& w = cfg.widths;
      const int64_t D = static_cast<int64_t>(w.size());
      in_ = &this->register_module("in", std::make_unique<Conv2d<T>>(rng, cfg.latent_channels, w[D - 1], 3));
      mid_ = &this->register_module("mid", std::make_unique<ResBlock<T>>(rng, w[D - 1], w[D - 1], cfg.groups));
      int64_t in = w[D - 1];
      for (int64_t k = D - 1; k >= 0; --k) {
        const std::string s = std::to_string(k);
        ups_.push_back(&this->register_module("up" + s, std::make_unique<Upsample<T>>(rng, in, w[k])));
        res_.push_back(&this->register_module("res" + s, std::make_unique<ResBlock<T>>(rng, w[k], w[k], cfg.groups)));
        in = w[k];
      }
      norm_ = &this->register_module("norm", std::make_unique<GroupNorm<T>>(std::gcd(cfg.groups, in), in));
      out_ = &this->register_module("out", std::make_unique<Conv2d<T>>(rng, in, channels_of(m), 3));
    }

    Var<T> operator()(const Var<T>& z) const {
      Var<T> h = (*mid_)((*in_)(z));
      for (size_t i = 0; i < ups_.size(); ++i) h = (*res_[i])((*ups_[i])(h));
      return ops::tanh((*out_)(ops::silu((*norm_)(h))));
    }

   private:
    const Conv2d<T>* in_ = nullptr;
    const ResBlock<T>* mid_ = nullptr;
    std::vector<const Upsample<T>*> ups_;
    std::vector<const ResBlock<T>*> res_;
    const GroupNorm<T>* norm_ = nullptr;
    const Conv2d<T>* out_ = nullptr;
  };

  void check_bundle(const ModalBundle<T>& bundle) const {
    validate_bundle(bundle, cfg_.allow_unimodal);
    if (bundle.size() != cfg_.modalities.size())
      throw UnknownModalityError("bundle has " + std::to_string(bundle.size()) + " modalities, model expects " +
                                 std::to_string(cfg_.modalities.size()));
    for (size_t i = 0; i < bundle.size(); ++i) {
      if (bundle[i].tag != cfg_.modalities[i])
        throw UnknownModalityError("modality '" + to_string(bundle[i].tag) + "' at position " + std::to_string(i) +
                                   " is not configured (expected '" + to_string(cfg_.modalities[i]) + "')");
      const Shape& s = bundle[i].image.shape();
      if (s.size() != 4 || s[2] != cfg_.image_size || s[3] != cfg_.image_size)
        throw ShapeError("expected batched images of size " + std::to_string(cfg_.image_size) + ", got " + shape_str(s));
    }
  }

  // Band-pass level k of every modality, concatenated along channels: (B, sum c_i, H/2^k, W/2^k).
  std::vector<Tensor<T>> band_features(const ModalBundle<T>& bundle) const {
    const int64_t B = bundle[0].image.dim(0), S = cfg_.image_size;
    int64_t ctot = 0;
    for (const auto& m : bundle) ctot += m.image.dim(1);
    std::vector<Tensor<T>> out;
    for (int k = 0; k < cfg_.lp_levels; ++k) out.emplace_back(Shape{B, ctot, S >> k, S >> k});
    for (int64_t b = 0; b < B; ++b) {
      int64_t coff = 0;
      for (const auto& m : bundle) {
        const int64_t c = m.image.dim(1);
        Tensor<T> img({c, S, S});
        std::copy_n(m.image.data() + b * c * S * S, c * S * S, img.data());
        auto pyr = laplacian_pyramid(img, cfg_.lp_levels);
        for (int k = 0; k < cfg_.lp_levels; ++k) {
          const int64_t sz = (S >> k) * (S >> k);
          std::copy_n(pyr.levels[k].data(), c * sz, out[k].data() + (b * ctot + coff) * sz);
        }
        coff += c;
      }
    }
    return out;
  }

  VaeConfig cfg_;
  std::vector<const Conv2d<T>*> stems_;
  std::vector<const Conv2d<T>*> lp_convs_;
  std::vector<const ResBlock<T>*> enc_res_;
  std::vector<const Conv2d<T>*> enc_down_;
  const ResBlock<T>* enc_mid_ = nullptr;
  const GroupNorm<T>* enc_norm_ = nullptr;
  const Conv2d<T>* enc_out_ = nullptr;
  std::vector<const Decoder*> decoders_;
};

/// KL(N(mu, exp(logvar)) || N(0, I)), summed over latent elements and
/// averaged over the batch.
template <class T>
Var<T> gaussian_kl(const LatentDistribution<T>& d) {
  Var<T> term = ops::sub(ops::add(ops::square(d.mu), ops::exp(d.logvar)), ops::add_scalar(d.logvar, T(1)));
  return ops::scale(ops::sum(term), T(0.5) / static_cast<T>(d.mu.dim(0)));
}

/// total = w_mse * sum_i MSE(m_i, m_i') + w_feat * sum_i FeatMatch(m_i, m_i') + w_kl * KL.
template <class T>
VaeLoss<T> dp_vae_loss(const ModalBundle<T>& bundle, const std::vector<Var<T>>& recon, const LatentDistribution<T>& dist,
                       const VaeLossWeights& w, const FeatureExtractor<T>& extractor) {
  if (bundle.size() != recon.size()) throw ShapeError("dp_vae_loss: reconstruction has a different modality count");
  Var<T> mse_sum, feat_sum;
  for (size_t i = 0; i < bundle.size(); ++i) {
    if (bundle[i].image.shape() != recon[i].shape())
      throw ShapeError("dp_vae_loss: " + to_string(bundle[i].tag) + " reconstruction shape mismatch");
    Var<T> target = constant(bundle[i].image);
    Var<T> m = ops::mse(recon[i], target);
    mse_sum = mse_sum.defined() ? ops::add(mse_sum, m) : m;
    if (w.feat != 0.0) {
      Var<T> f = extractor.feature_match(recon[i], target);
      feat_sum = feat_sum.defined() ? ops::add(feat_sum, f) : f;
    }
  }
  Var<T> kl = gaussian_kl(dist);
  VaeLoss<T> out;
  out.mse = static_cast<double>(mse_sum.value()[0]);
  out.feat = feat_sum.defined() ? static_cast<double>(feat_sum.value()[0]) : 0.0;
  out.kl = static_cast<double>(kl.value()[0]);
  Var<T> total = ops::add(ops::scale(mse_sum, static_cast<T>(w.mse)), ops::scale(kl, static_cast<T>(w.kl)));
  if (feat_sum.defined()) total = ops::add(total, ops::scale(feat_sum, static_cast<T>(w.feat)));
  out.total = total;
  return out;
}

}  // namespace diffx
