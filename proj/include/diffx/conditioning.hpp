#pragma once

#include <array>
#include <cmath>
#include <map>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include "diffx/condition_types.hpp"
#include "diffx/image.hpp"
#include "diffx/layers.hpp"
#include "diffx/tokenizer.hpp"

namespace diffx {

enum class LayoutKind { boxes, semantic_mask, salient_map, edge_map };

inline std::string to_string(LayoutKind k) {
  switch (k) {
    case LayoutKind::boxes: return "boxes";
    case LayoutKind::semantic_mask: return "semantic_mask";
    case LayoutKind::salient_map: return "salient_map";
    case LayoutKind::edge_map: return "edge_map";
  }
  return "?";
}

inline LayoutKind parse_layout_kind(std::string_view s) {
  if (s == "boxes") return LayoutKind::boxes;
  if (s == "semantic_mask") return LayoutKind::semantic_mask;
  if (s == "salient_map") return LayoutKind::salient_map;
  if (s == "edge_map") return LayoutKind::edge_map;
  throw ConfigError("unknown layout kind '" + std::string(s) + "'");
}

/// Normalized box (x0, y0, x1, y1) in [0, 1] with a label token.
struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  std::string label;
  bool operator==(const Box&) const = default;
};

/// One layout condition. `mask` holds class ids for semantic masks and 8-bit
/// levels for salient/edge maps; unused for boxes.
struct LayoutCondition {
  LayoutKind kind = LayoutKind::boxes;
  std::vector<Box> boxes;
  Image8 mask;
  bool operator==(const LayoutCondition&) const = default;
};

inline void validate_layout(const LayoutCondition& l, int64_t n_max, int64_t num_classes) {
  if (l.kind == LayoutKind::boxes) {
    if (static_cast<int64_t>(l.boxes.size()) > n_max)
      throw RangeError("layout has " + std::to_string(l.boxes.size()) + " boxes, limit is " + std::to_string(n_max));
    for (const auto& b : l.boxes) {
      for (double v : {b.x0, b.y0, b.x1, b.y1})
        if (!(v >= 0.0 && v <= 1.0)) throw RangeError("box coordinate outside [0, 1]");
      if (!(b.x0 < b.x1 && b.y0 < b.y1)) throw RangeError("box must satisfy x0 < x1 and y0 < y1");
    }
  } else if (l.kind == LayoutKind::semantic_mask) {
    for (uint8_t v : l.mask.pixels)
      if (v >= num_classes) throw RangeError("mask class id " + std::to_string(v) + " >= class count");
  }
}

/// [sin(2^k pi b_j), cos(2^k pi b_j)] for k in [0, F), j in [0, 4); the pair
/// for (k, j) sits at offset 2 (4k + j). Output length 8F.
inline std::vector<double> fourier_embed(const std::array<double, 4>& b, int F) {
  std::vector<double> out(static_cast<size_t>(8 * F));
  for (int k = 0; k < F; ++k)
    for (int j = 0; j < 4; ++j) {
      if (!(b[j] >= 0.0 && b[j] <= 1.0)) throw RangeError("fourier_embed: coordinate outside [0, 1]");
      const double a = std::ldexp(std::numbers::pi, k) * b[j];
      out[static_cast<size_t>(2 * (4 * k + j))] = std::sin(a);
      out[static_cast<size_t>(2 * (4 * k + j) + 1)] = std::cos(a);
    }
  return out;
}

struct ConditioningConfig {
  LayoutKind layout = LayoutKind::boxes;
  int64_t d_ground = 256;
  int64_t d_text = 256;
  int64_t d_label = 64;
  int fourier_freqs = 8;
  int64_t n_max = 30;
  int64_t num_classes = 4;
  std::vector<std::string> labels{"circle", "rectangle", "triangle"};
  std::vector<int64_t> mask_widths{32, 64, 128};
  int64_t mask_size = 64;
  int64_t max_tokens = 248;
  bool truncate = false;
  int64_t text_layers = 1;
  int64_t text_heads = 4;
  double lambda = 1.0;

  int64_t mask_input_channels() const { return layout == LayoutKind::semantic_mask ? num_classes : 1; }
  int64_t mask_tokens() const {
    const int64_t s = mask_size >> mask_widths.size();
    return s * s;
  }
};

/// Box layouts: h_i = MLP([fourier(b_i), label_embedding(l_i)]).
template <class T>
class BoxEmbedder : public Module<T> {
 public:
  BoxEmbedder(Rng& rng, const ConditioningConfig& cfg) : cfg_(cfg) {
    for (size_t i = 0; i < cfg.labels.size(); ++i) label_ids_.emplace(cfg.labels[i], static_cast<int64_t>(i));
    table_ = this->register_param(
        "label_table", rng.normal_tensor<T>({static_cast<int64_t>(cfg.labels.size()), cfg.d_label}));
    mlp_in_ = &this->register_module("mlp_in",
                                     std::make_unique<Linear<T>>(rng, 8 * cfg.fourier_freqs + cfg.d_label, cfg.d_ground));
    mlp_out_ = &this->register_module("mlp_out", std::make_unique<Linear<T>>(rng, cfg.d_ground, cfg.d_ground));
  }

  int64_t label_id(const std::string& label) const {
    auto it = label_ids_.find(label);
    if (it == label_ids_.end()) throw UnknownLabelError("unknown box label '" + label + "'");
    return it->second;
  }

  Var<T> label_embedding(const std::vector<std::string>& labels) const {
    std::vector<int64_t> ids;
    for (const auto& l : labels) ids.push_back(label_id(l));
    return ops::gather_rows(table_, ids);
  }

  /// Tokens for a batch of box lists, padded to the longest list.
  GroundingFeature<T> operator()(const std::vector<std::vector<Box>>& batch) const {
    const int64_t B = static_cast<int64_t>(batch.size());
    int64_t n = 0;
    for (const auto& b : batch) n = std::max<int64_t>(n, static_cast<int64_t>(b.size()));
    const int64_t fd = 8 * cfg_.fourier_freqs;
    Tensor<T> four({B * n, fd});
    std::vector<int64_t> ids(static_cast<size_t>(B * n), 0);
    std::vector<int64_t> lengths;
    for (int64_t b = 0; b < B; ++b) {
      lengths.push_back(static_cast<int64_t>(batch[b].size()));
      for (size_t i = 0; i < batch[b].size(); ++i) {
        const Box& box = batch[b][i];
        auto f = fourier_embed({box.x0, box.y0, box.x1, box.y1}, cfg_.fourier_freqs);
        const int64_t row = b * n + static_cast<int64_t>(i);
        for (int64_t k = 0; k < fd; ++k) four[row * fd + k] = static_cast<T>(f[static_cast<size_t>(k)]);
        ids[static_cast<size_t>(row)] = label_id(box.label);
      }
    }
    Var<T> x = ops::concat<T>({constant(std::move(four)), ops::gather_rows(table_, ids)}, 1);
    Var<T> h = (*mlp_out_)(ops::silu((*mlp_in_)(x)));
    return {ops::reshape(h, Shape{B, n, cfg_.d_ground}), lengths};
  }

 private:
  ConditioningConfig cfg_;
  std::map<std::string, int64_t> label_ids_;
  Var<T> table_;
  const Linear<T>* mlp_in_ = nullptr;
  const Linear<T>* mlp_out_ = nullptr;
};

/// Mask-like layouts: strided conv encoder, flatten to patch tokens, add a
/// learned position embedding, then an MLP.
template <class T>
class MaskEmbedder : public Module<T> {
 public:
  MaskEmbedder(Rng& rng, const ConditioningConfig& cfg) : cfg_(cfg) {
    int64_t in = cfg.mask_input_channels();
    for (size_t s = 0; s < cfg.mask_widths.size(); ++s) {
      convs_.push_back(&this->register_module("conv" + std::to_string(s),
                                              std::make_unique<Conv2d<T>>(rng, in, cfg.mask_widths[s], 3, 2)));
      in = cfg.mask_widths[s];
    }
    Tensor<T> pos = rng.normal_tensor<T>({cfg.mask_tokens(), in});
    for (auto& v : pos.vec()) v *= T(0.02);
    pos_ = this->register_param("pos", std::move(pos));
    mlp_in_ = &this->register_module("mlp_in", std::make_unique<Linear<T>>(rng, in, cfg.d_ground));
    mlp_out_ = &this->register_module("mlp_out", std::make_unique<Linear<T>>(rng, cfg.d_ground, cfg.d_ground));
  }

  /// x (B, C_in, S, S): one-hot class planes or a single real-valued plane.
  GroundingFeature<T> operator()(const Tensor<T>& x) const {
    if (x.rank() != 4 || x.dim(1) != cfg_.mask_input_channels() || x.dim(2) != cfg_.mask_size ||
        x.dim(3) != cfg_.mask_size)
      throw ShapeError("mask layout must be (B, " + std::to_string(cfg_.mask_input_channels()) + ", " +
                       std::to_string(cfg_.mask_size) + ", " + std::to_string(cfg_.mask_size) + "), got " +
                       shape_str(x.shape()));
    Var<T> h = constant(x);
    for (size_t s = 0; s < convs_.size(); ++s) {
      h = (*convs_[s])(h);
      if (s + 1 < convs_.size()) h = ops::silu(h);
    }
    Var<T> tokens = ops::add_broadcast(ops::to_tokens(h), pos_);
    tokens = (*mlp_out_)(ops::silu((*mlp_in_)(tokens)));
    return {tokens, std::vector<int64_t>(static_cast<size_t>(x.dim(0)), cfg_.mask_tokens())};
  }

 private:
  ConditioningConfig cfg_;
  std::vector<const Conv2d<T>*> convs_;
  Var<T> pos_;
  const Linear<T>* mlp_in_ = nullptr;
  const Linear<T>* mlp_out_ = nullptr;
};

/// Converts layouts to the mask embedder's input planes.
template <class T>
Tensor<T> mask_planes(const std::vector<LayoutCondition>& layouts, const ConditioningConfig& cfg) {
  const int64_t B = static_cast<int64_t>(layouts.size()), S = cfg.mask_size, C = cfg.mask_input_channels();
  Tensor<T> out({B, C, S, S});
  for (int64_t b = 0; b < B; ++b) {
    const Image8& m = layouts[b].mask;
    if (m.channels != 1 || m.height != S || m.width != S)
      throw ShapeError("layout mask must be 1x" + std::to_string(S) + "x" + std::to_string(S));
    for (int64_t i = 0; i < S * S; ++i) {
      const uint8_t v = m.pixels[static_cast<size_t>(i)];
      if (cfg.layout == LayoutKind::semantic_mask) {
        if (v >= C) throw RangeError("mask class id " + std::to_string(v) + " >= class count " + std::to_string(C));
        out[(b * C + v) * S * S + i] = T(1);
      } else {
        out[b * S * S + i] = static_cast<T>(from_level(v));
      }
    }
  }
  return out;
}

/// Small transformer caption encoder: token + learned position embeddings,
/// pre-norm self-attention / feed-forward layers, final LayerNorm.
template <class T>
class TextEncoder : public Module<T> {
 public:
  TextEncoder(Rng& rng, const ConditioningConfig& cfg, int64_t vocab) : cfg_(cfg) {
    Tensor<T> tok = rng.normal_tensor<T>({vocab, cfg.d_text});
    Tensor<T> pos = rng.normal_tensor<T>({cfg.max_tokens, cfg.d_text});
    for (auto& v : tok.vec()) v *= T(0.1);
    for (auto& v : pos.vec()) v *= T(0.02);
    tok_ = this->register_param("tok", std::move(tok));
    pos_ = this->register_param("pos", std::move(pos));
    for (int64_t l = 0; l < cfg.text_layers; ++l) {
      const std::string s = std::to_string(l);
      layers_.push_back({&this->register_module("ln_a" + s, std::make_unique<LayerNorm<T>>(cfg.d_text)),
                         &this->register_module("attn" + s, std::make_unique<MultiHeadAttention<T>>(
                                                                rng, cfg.d_text, cfg.d_text, cfg.text_heads)),
                         &this->register_module("ln_b" + s, std::make_unique<LayerNorm<T>>(cfg.d_text)),
                         &this->register_module("ff" + s, std::make_unique<FeedForward<T>>(rng, cfg.d_text))});
    }
    ln_out_ = &this->register_module("ln_out", std::make_unique<LayerNorm<T>>(cfg.d_text));
  }

  /// Token ids per caption; an empty caption becomes a single [PAD] token.
  /// Captions over max_tokens are rejected unless truncation is enabled.
  CaptionEmbedding<T> operator()(std::vector<std::vector<int64_t>> ids) const {
    const int64_t B = static_cast<int64_t>(ids.size());
    int64_t L = 1;
    std::vector<int64_t> lengths;
    for (auto& seq : ids) {
      if (static_cast<int64_t>(seq.size()) > cfg_.max_tokens) {
        if (!cfg_.truncate)
          throw OverlengthError("caption has " + std::to_string(seq.size()) + " tokens, limit is " +
                                std::to_string(cfg_.max_tokens));
        seq.resize(static_cast<size_t>(cfg_.max_tokens));
      }
      if (seq.empty()) seq.push_back(Tokenizer::kPad);
      lengths.push_back(static_cast<int64_t>(seq.size()));
      L = std::max<int64_t>(L, static_cast<int64_t>(seq.size()));
    }
    std::vector<int64_t> flat;
    for (const auto& seq : ids) {
      flat.insert(flat.end(), seq.begin(), seq.end());
      flat.insert(flat.end(), static_cast<size_t>(L) - seq.size(), Tokenizer::kPad);
    }
    Var<T> x = ops::reshape(ops::gather_rows(tok_, flat), Shape{B, L, cfg_.d_text});
    x = ops::add_broadcast(x, ops::slice(pos_, 0, 0, L));
    for (const auto& layer : layers_) {
      Var<T> n = (*layer.ln_a)(x);
      x = ops::add(x, (*layer.attn)(n, n, lengths));
      x = ops::add(x, (*layer.ff)((*layer.ln_b)(x)));
    }
    return {(*ln_out_)(x), lengths, std::vector<bool>(static_cast<size_t>(B), false)};
  }

 private:
  struct Layer {
    const LayerNorm<T>* ln_a;
    const MultiHeadAttention<T>* attn;
    const LayerNorm<T>* ln_b;
    const FeedForward<T>* ff;
  };
  ConditioningConfig cfg_;
  Var<T> tok_, pos_;
  std::vector<Layer> layers_;
  const LayerNorm<T>* ln_out_ = nullptr;
};

template <class T>
CaptionEmbedding<T> apply_drop(const CaptionEmbedding<T>& c, const std::vector<bool>& drop) {
  bool any = false;
  std::vector<T> keep;
  std::vector<bool> flags;
  for (size_t b = 0; b < drop.size(); ++b) {
    any = any || drop[b];
    keep.push_back(drop[b] ? T(0) : T(1));
    flags.push_back(drop[b] || c.dropped.at(b));
  }
  if (!any) return c;
  return {ops::scale_batch(c.tokens, keep), c.lengths, flags};
}

/// Replaces each batch entry with the all-zero embedding with probability p
/// (one uniform draw per entry, in batch order).
template <class T>
CaptionEmbedding<T> drop_caption(const CaptionEmbedding<T>& c, double p, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw RangeError("drop probability must lie in [0, 1]");
  std::vector<bool> drop;
  for (int64_t b = 0; b < c.batch(); ++b) drop.push_back(rng.uniform() < p);
  return apply_drop(c, drop);
}

/// Gated cross-attention + feed-forward fusion of layout tokens with the
/// caption:
///   H'  = H  + lambda tanh(gamma1) CA(H, c*)
///   H*  = H' + lambda tanh(gamma2) FF(H')
/// CA is single-head softmax((W_q H)(W_k c*)^T / sqrt(d_k)) (W_v c*) with
/// bias-free projections; both gates start closed.
template <class T>
class GatedFuser : public Module<T> {
 public:
  GatedFuser(Rng& rng, int64_t d_ground, int64_t d_text, double lambda)
      : lambda_(static_cast<T>(lambda)),
        wq_(this->register_module("wq", std::make_unique<Linear<T>>(rng, d_ground, d_ground, false))),
        wk_(this->register_module("wk", std::make_unique<Linear<T>>(rng, d_text, d_ground, false))),
        wv_(this->register_module("wv", std::make_unique<Linear<T>>(rng, d_text, d_ground, false))),
        ff_(this->register_module("ff", std::make_unique<FeedForward<T>>(rng, d_ground))) {
    gamma1_ = this->register_param("gamma1", Tensor<T>::zeros({1}));
    gamma2_ = this->register_param("gamma2", Tensor<T>::zeros({1}));
  }

  Var<T> cross_attention(const GroundingFeature<T>& H, const CaptionEmbedding<T>& c) const {
    return ops::attention(wq_(H.tokens), wk_(c.tokens), wv_(c.tokens), c.lengths);
  }

  GroundingFeature<T> operator()(const GroundingFeature<T>& H, const CaptionEmbedding<T>& c) const {
    if (H.width() != wq_.in_features() || c.width() != wk_.in_features())
      throw ShapeError("fuse: layout width " + std::to_string(H.width()) + " / caption width " +
                       std::to_string(c.width()) + " do not match the fuser");
    if (H.batch() != c.batch()) throw ShapeError("fuse: batch sizes differ");
    Var<T> h1 = ops::add(H.tokens, ops::scale(ops::mul_scalar(cross_attention(H, c), ops::tanh(gamma1_)), lambda_));
    Var<T> h2 = ops::add(h1, ops::scale(ops::mul_scalar(ff_(h1), ops::tanh(gamma2_)), lambda_));
    return {h2, H.lengths};
  }

  const Var<T>& gamma1() const { return gamma1_; }
  const Var<T>& gamma2() const { return gamma2_; }
  const Linear<T>& wv() const { return wv_; }

 private:
  T lambda_;
  Linear<T>& wq_;
  Linear<T>& wk_;
  Linear<T>& wv_;
  FeedForward<T>& ff_;
  Var<T> gamma1_, gamma2_;
};

/// Layout batch in whichever form the configured layout kind needs.
template <class T>
struct LayoutBatch {
  std::vector<std::vector<Box>> boxes;
  Tensor<T> planes;

  static LayoutBatch from(const std::vector<LayoutCondition>& layouts, const ConditioningConfig& cfg) {
    LayoutBatch lb;
    for (const auto& l : layouts) {
      if (l.kind != cfg.layout)
        throw ConfigError("layout kind '" + to_string(l.kind) + "' does not match configured '" + to_string(cfg.layout) + "'");
      validate_layout(l, cfg.n_max, cfg.num_classes);
    }
    if (cfg.layout == LayoutKind::boxes) {
      for (const auto& l : layouts) lb.boxes.push_back(l.boxes);
    } else {
      lb.planes = mask_planes<T>(layouts, cfg);
    }
    return lb;
  }
};

/// Output of the joint embedder for one batch.
template <class T>
struct JointEmbedding {
  GroundingFeature<T> grounding;  // H*
  CaptionEmbedding<T> caption;    // c*
};

/// Layout encoder + caption encoder + gated fusion: (layout, text) -> (H*, c*).
/// c* is the caption encoder output itself (zeroed when dropped).
template <class T>
class JointEmbedder : public Module<T> {
 public:
  JointEmbedder(const ConditioningConfig& cfg, int64_t vocab, uint64_t seed) : cfg_(cfg) {
    Rng rng(seed);
    if (cfg.layout == LayoutKind::boxes)
      boxes_ = &this->register_module("box", std::make_unique<BoxEmbedder<T>>(rng, cfg));
    else
      masks_ = &this->register_module("mask", std::make_unique<MaskEmbedder<T>>(rng, cfg));
    text_ = &this->register_module("text", std::make_unique<TextEncoder<T>>(rng, cfg, vocab));
    fuser_ = &this->register_module("fuse", std::make_unique<GatedFuser<T>>(rng, cfg.d_ground, cfg.d_text, cfg.lambda));
  }

  const ConditioningConfig& config() const { return cfg_; }
  const GatedFuser<T>& fuser() const { return *fuser_; }
  const TextEncoder<T>& text_encoder() const { return *text_; }

  GroundingFeature<T> embed_layout(const LayoutBatch<T>& lb) const {
    return boxes_ ? (*boxes_)(lb.boxes) : (*masks_)(lb.planes);
  }

  CaptionEmbedding<T> embed_caption(const std::vector<std::vector<int64_t>>& ids) const { return (*text_)(ids); }

  /// `drop[b]` replaces caption b by zeros before fusion.
  JointEmbedding<T> operator()(const LayoutBatch<T>& lb, const std::vector<std::vector<int64_t>>& ids,
                               const std::vector<bool>& drop = {}) const {
    GroundingFeature<T> H = embed_layout(lb);
    CaptionEmbedding<T> c = embed_caption(ids);
    if (!drop.empty()) c = apply_drop(c, drop);
    return {(*fuser_)(H, c), c};
  }

 private:
  ConditioningConfig cfg_;
  const BoxEmbedder<T>* boxes_ = nullptr;
  const MaskEmbedder<T>* masks_ = nullptr;
  const TextEncoder<T>* text_ = nullptr;
  const GatedFuser<T>* fuser_ = nullptr;
};

}  // namespace diffx
