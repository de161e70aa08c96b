#pragma once

#include <vector>

#include "diffx/autograd.hpp"

namespace diffx {

/// Caption token embeddings c* for a batch: tokens (B, L, d_text). Entry b
/// uses its first lengths[b] rows; a dropped entry is exactly zero.
template <class T>
struct CaptionEmbedding {
  Var<T> tokens;
  std::vector<int64_t> lengths;
  std::vector<bool> dropped;

  int64_t batch() const { return tokens.dim(0); }
  int64_t width() const { return tokens.dim(2); }
};

/// Layout tokens H / H* for a batch: tokens (B, n, d_ground), entry b uses
/// its first lengths[b] rows. n may be 0 (no layout).
template <class T>
struct GroundingFeature {
  Var<T> tokens;
  std::vector<int64_t> lengths;

  int64_t batch() const { return tokens.dim(0); }
  int64_t count() const { return tokens.dim(1); }
  int64_t width() const { return tokens.dim(2); }
};

/// All-zero caption with the same geometry, every entry flagged dropped.
template <class T>
CaptionEmbedding<T> zero_caption(const CaptionEmbedding<T>& c) {
  return {constant(Tensor<T>(c.tokens.shape())), c.lengths, std::vector<bool>(c.lengths.size(), true)};
}

/// Conditioning consumed by the denoiser. `null_grounding` is the layout
/// feature computed against the zero caption, used by the unconditional
/// branch of guided sampling; when undefined, `grounding` is reused.
template <class T>
struct ConditioningBundle {
  CaptionEmbedding<T> caption;
  GroundingFeature<T> grounding;
  double guidance_scale = 1.0;
  GroundingFeature<T> null_grounding;
};

}  // namespace diffx
