#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "diffx/autograd.hpp"

namespace diffx {

enum class Modality { rgb, thermal, depth, edge, salient };

inline std::string to_string(Modality m) {
  switch (m) {
    case Modality::rgb: return "rgb";
    case Modality::thermal: return "thermal";
    case Modality::depth: return "depth";
    case Modality::edge: return "edge";
    case Modality::salient: return "salient";
  }
  return "?";
}

inline Modality parse_modality(std::string_view s) {
  if (s == "rgb") return Modality::rgb;
  if (s == "thermal") return Modality::thermal;
  if (s == "depth") return Modality::depth;
  if (s == "edge") return Modality::edge;
  if (s == "salient") return Modality::salient;
  throw UnknownModalityError("unknown modality '" + std::string(s) + "'");
}

inline int64_t channels_of(Modality m) { return m == Modality::rgb ? 3 : 1; }

/// One modality of a joint bundle; image is (c, H, W) or batched (B, c, H, W).
template <class T>
struct ModalImage {
  Modality tag;
  Tensor<T> image;
};

/// The joint modality M = {m_1, ..., m_N}, pixel-aligned, values in [-1, 1].
template <class T>
using ModalBundle = std::vector<ModalImage<T>>;

/// Checks the bundle contract. `allow_unimodal` admits N = 1 bundles (used
/// only by the separate-pipelines ablation).
template <class T>
void validate_bundle(const ModalBundle<T>& b, bool allow_unimodal = false) {
  if (b.empty() || (b.size() < 2 && !allow_unimodal))
    throw ShapeError("modal bundle needs at least 2 modalities, got " + std::to_string(b.size()));
  int rgb = 0;
  const Shape& ref = b.front().image.shape();
  if (ref.size() != 3 && ref.size() != 4) throw ShapeError("modal image must be (c,H,W) or (B,c,H,W)");
  const size_t ch_axis = ref.size() - 3;
  for (const auto& m : b) {
    const Shape& s = m.image.shape();
    if (s.size() != ref.size()) throw ShapeError("modal images differ in rank");
    if (m.tag == Modality::rgb) ++rgb;
    if (s[ch_axis] != channels_of(m.tag))
      throw ShapeError(to_string(m.tag) + " expects " + std::to_string(channels_of(m.tag)) + " channels, got " +
                       std::to_string(s[ch_axis]));
    if (s[ch_axis + 1] != ref[ch_axis + 1] || s[ch_axis + 2] != ref[ch_axis + 2] || (ch_axis == 1 && s[0] != ref[0]))
      throw ShapeError("modal images differ in spatial size: " + shape_str(s) + " vs " + shape_str(ref));
  }
  if (!allow_unimodal && rgb != 1) throw ShapeError("modal bundle needs exactly one rgb entry");
  if (rgb > 1) throw ShapeError("modal bundle has more than one rgb entry");
}

}  // namespace diffx
