#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "diffx/conditioning.hpp"
#include "diffx/layers.hpp"
#include "diffx/modality.hpp"

namespace diffx {

/// PSNR in dB; +infinity marks identical inputs.
template <class T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double max_val = 2.0) {
  if (a.shape() != b.shape()) throw ShapeError("psnr: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  if (!(max_val > 0)) throw RangeError("psnr: max_val must be positive");
  double se = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    se += d * d;
  }
  if (se == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(max_val * max_val / (se / static_cast<double>(a.numel())));
}

inline bool is_infinite_psnr(double v) { return std::isinf(v) && v > 0; }

struct SsimParams {
  int window = 11;
  double sigma = 1.5;
  double data_range = 2.0;  // images in [-1, 1]
  double k1 = 0.01, k2 = 0.03;
};

/// Mean SSIM over valid 11x11 Gaussian windows, averaged over channels.
/// Accepts (C, H, W) or (1, C, H, W).
template <class T>
double ssim(const Tensor<T>& a, const Tensor<T>& b, const SsimParams& p = {}) {
  if (a.shape() != b.shape()) throw ShapeError("ssim: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const Shape& s = a.shape();
  if (s.size() < 2) throw ShapeError("ssim: need at least 2-d images");
  const int64_t H = s[s.size() - 2], W = s[s.size() - 1], C = a.numel() / (H * W);
  const int k = p.window;
  if (H < k || W < k)
    throw ShapeError("ssim: image " + std::to_string(H) + "x" + std::to_string(W) + " smaller than the " +
                     std::to_string(k) + "x" + std::to_string(k) + " window");
  std::vector<double> g(static_cast<size_t>(k));
  double gs = 0;
  for (int i = 0; i < k; ++i) {
    const double d = i - (k - 1) / 2.0;
    g[static_cast<size_t>(i)] = std::exp(-d * d / (2 * p.sigma * p.sigma));
    gs += g[static_cast<size_t>(i)];
  }
  for (auto& v : g) v /= gs;
  const double c1 = std::pow(p.k1 * p.data_range, 2), c2 = std::pow(p.k2 * p.data_range, 2);
  const int64_t Ho = H - k + 1, Wo = W - k + 1;

  // Separable valid filtering of a single plane.
  auto filter = [&](const std::vector<double>& in) {
    std::vector<double> tmp(static_cast<size_t>(H * Wo)), out(static_cast<size_t>(Ho * Wo));
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < Wo; ++x) {
        double acc = 0;
        for (int i = 0; i < k; ++i) acc += g[static_cast<size_t>(i)] * in[static_cast<size_t>(y * W + x + i)];
        tmp[static_cast<size_t>(y * Wo + x)] = acc;
      }
    for (int64_t y = 0; y < Ho; ++y)
      for (int64_t x = 0; x < Wo; ++x) {
        double acc = 0;
        for (int i = 0; i < k; ++i) acc += g[static_cast<size_t>(i)] * tmp[static_cast<size_t>((y + i) * Wo + x)];
        out[static_cast<size_t>(y * Wo + x)] = acc;
      }
    return out;
  };

  double total = 0;
  for (int64_t c = 0; c < C; ++c) {
    std::vector<double> x(static_cast<size_t>(H * W)), y(x.size()), xx(x.size()), yy(x.size()), xy(x.size());
    for (int64_t i = 0; i < H * W; ++i) {
      const double u = static_cast<double>(a[c * H * W + i]), v = static_cast<double>(b[c * H * W + i]);
      x[static_cast<size_t>(i)] = u;
      y[static_cast<size_t>(i)] = v;
      xx[static_cast<size_t>(i)] = u * u;
      yy[static_cast<size_t>(i)] = v * v;
      xy[static_cast<size_t>(i)] = u * v;
    }
    auto mx = filter(x), my = filter(y), mxx = filter(xx), myy = filter(yy), mxy = filter(xy);
    double acc = 0;
    for (size_t i = 0; i < mx.size(); ++i) {
      const double vx = mxx[i] - mx[i] * mx[i], vy = myy[i] - my[i] * my[i], cxy = mxy[i] - mx[i] * my[i];
      acc += ((2 * mx[i] * my[i] + c1) * (2 * cxy + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    total += acc / static_cast<double>(mx.size());
  }
  return total / static_cast<double>(C);
}

struct FrechetResult {
  double distance = 0;
  double diagonal_loading = 0;
};

/// Frechet distance between Gaussian fits of two feature sets (rows are
/// samples). Both covariances get `loading` added on the diagonal; the
/// matrix square-root trace is averaged over both argument orders so the
/// result is symmetric.
inline FrechetResult frechet_distance(const Eigen::MatrixXd& fa, const Eigen::MatrixXd& fb, double loading = 1e-6) {
  if (fa.rows() < 2 || fb.rows() < 2) throw RangeError("feature distance needs at least 2 samples per set");
  if (fa.cols() != fb.cols()) throw ShapeError("feature sets have different widths");
  auto fit = [&](const Eigen::MatrixXd& f, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
    mu = f.colwise().mean().transpose();
    Eigen::MatrixXd c = f.rowwise() - mu.transpose();
    cov = c.transpose() * c / static_cast<double>(f.rows() - 1);
    cov.diagonal().array() += loading;
  };
  Eigen::VectorXd ma, mb;
  Eigen::MatrixXd ca, cb;
  fit(fa, ma, ca);
  fit(fb, mb, cb);
  auto sqrt_trace = [](const Eigen::MatrixXd& p, const Eigen::MatrixXd& q) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(p);
    Eigen::MatrixXd r = es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
                        es.eigenvectors().transpose();
    Eigen::MatrixXd m = r * q * r;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> em(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
    return em.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  };
  const double tr = 0.5 * (sqrt_trace(ca, cb) + sqrt_trace(cb, ca));
  const double d = (ma - mb).squaredNorm() + ca.trace() + cb.trace() - 2.0 * tr;
  return {std::max(d, 0.0), loading};
}

/// Pooled extractor features of (N, c, H, W) images as an N x D matrix.
template <class T>
Eigen::MatrixXd pooled_features(const Tensor<T>& images, const FeatureExtractor<T>& fx) {
  auto p = fx.pooled(images);
  Eigen::MatrixXd m(p.dim(0), p.dim(1));
  for (int64_t i = 0; i < p.dim(0); ++i)
    for (int64_t j = 0; j < p.dim(1); ++j) m(i, j) = static_cast<double>(p[i * p.dim(1) + j]);
  return m;
}

template <class T>
FrechetResult feature_distance(const Tensor<T>& a, const Tensor<T>& b, const FeatureExtractor<T>& fx,
                               double loading = 1e-6) {
  if (a.dim(0) < 2 || b.dim(0) < 2) throw RangeError("feature distance needs at least 2 samples per set");
  return frechet_distance(pooled_features(a, fx), pooled_features(b, fx), loading);
}

/// Foreground indicator of a mask-like layout, or per-box pixel sets.
inline std::vector<std::vector<uint8_t>> layout_regions(const LayoutCondition& l, int64_t H, int64_t W) {
  std::vector<std::vector<uint8_t>> regions;
  if (l.kind == LayoutKind::boxes) {
    for (const auto& b : l.boxes) {
      std::vector<uint8_t> r(static_cast<size_t>(H * W), 0);
      for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) {
          const double px = (static_cast<double>(x) + 0.5) / static_cast<double>(W);
          const double py = (static_cast<double>(y) + 0.5) / static_cast<double>(H);
          r[static_cast<size_t>(y * W + x)] = px >= b.x0 && px <= b.x1 && py >= b.y0 && py <= b.y1;
        }
      regions.push_back(std::move(r));
    }
  } else {
    if (l.mask.height != H || l.mask.width != W) throw ShapeError("layout mask size differs from the image");
    std::vector<uint8_t> r(static_cast<size_t>(H * W));
    for (int64_t i = 0; i < H * W; ++i) {
      const uint8_t v = l.mask.pixels[static_cast<size_t>(i)];
      r[static_cast<size_t>(i)] = l.kind == LayoutKind::semantic_mask ? v != 0 : v > 127;
    }
    regions.push_back(std::move(r));
  }
  return regions;
}

/// 0.5 + (mean inside - mean outside) / 4 for an image in [-1, 1], clamped
/// to [0, 1]: 1 for a perfect foreground/background split, 0.5 for no
/// contrast. Boxes average the per-box contrast against the pixels outside
/// every box. `image` is (c, H, W) or (1, c, H, W); channels are averaged.
template <class T>
double layout_alignment(const Tensor<T>& image, const LayoutCondition& l) {
  const Shape& s = image.shape();
  const int64_t H = s[s.size() - 2], W = s[s.size() - 1], C = image.numel() / (H * W);
  std::vector<double> gray(static_cast<size_t>(H * W), 0.0);
  for (int64_t c = 0; c < C; ++c)
    for (int64_t i = 0; i < H * W; ++i) gray[static_cast<size_t>(i)] += static_cast<double>(image[c * H * W + i]) / C;
  auto regions = layout_regions(l, H, W);
  if (regions.empty()) throw RangeError("layout_alignment: layout has no foreground");
  std::vector<uint8_t> any(static_cast<size_t>(H * W), 0);
  for (const auto& r : regions)
    for (size_t i = 0; i < r.size(); ++i) any[i] |= r[i];
  double out_sum = 0;
  int64_t out_n = 0;
  for (size_t i = 0; i < any.size(); ++i)
    if (!any[i]) out_sum += gray[i], ++out_n;
  if (out_n == 0) throw RangeError("layout_alignment: layout has no background");
  const double out_mean = out_sum / static_cast<double>(out_n);
  double contrast = 0;
  for (const auto& r : regions) {
    double in_sum = 0;
    int64_t in_n = 0;
    for (size_t i = 0; i < r.size(); ++i)
      if (r[i]) in_sum += gray[i], ++in_n;
    if (in_n == 0) throw RangeError("layout_alignment: empty foreground region");
    contrast += in_sum / static_cast<double>(in_n) - out_mean;
  }
  contrast /= static_cast<double>(regions.size());
  return std::clamp(0.5 + contrast / 4.0, 0.0, 1.0);
}

/// Evaluation summary. PSNR is +inf for identical inputs and is written as
/// the string "inf".
struct EvalReport {
  static constexpr int kVersion = 1;
  std::vector<std::string> modalities;
  std::map<std::string, double> psnr;
  std::map<std::string, double> ssim;
  double ssim_x = 0;
  std::string ssim_x_comparand = "generated X vs ground-truth X at matching layout and caption";
  double feature_distance = 0;
  double feature_distance_loading = 0;
  double layout_alignment = 0;
  int64_t samples = 0;
  nlohmann::json config;

  nlohmann::json to_json() const {
    auto num = [](double v) { return is_infinite_psnr(v) ? nlohmann::json("inf") : nlohmann::json(v); };
    nlohmann::json j;
    j["version"] = kVersion;
    j["samples"] = samples;
    j["modalities"] = modalities;
    for (const auto& m : modalities) {
      j["psnr_db"][m] = num(psnr.at(m));
      j["ssim"][m] = ssim.at(m);
    }
    j["ssim_x"] = ssim_x;
    j["ssim_x_comparand"] = ssim_x_comparand;
    j["feature_distance"] = feature_distance;
    j["feature_distance_diagonal_loading"] = feature_distance_loading;
    j["layout_alignment"] = layout_alignment;
    j["config"] = config;
    return j;
  }

  std::string table() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << "samples            " << samples << "\n";
    for (const auto& m : modalities) {
      os << "psnr[" << m << "]" << std::string(std::max<size_t>(1, 13 - m.size()), ' ');
      if (is_infinite_psnr(psnr.at(m)))
        os << "inf\n";
      else
        os << psnr.at(m) << " dB\n";
      os << "ssim[" << m << "]" << std::string(std::max<size_t>(1, 13 - m.size()), ' ') << ssim.at(m) << "\n";
    }
    os << "ssim_x             " << ssim_x << "\n";
    os << "feature_distance   " << feature_distance << "\n";
    os << "layout_alignment   " << layout_alignment << "\n";
    return os.str();
  }
};

}  // namespace diffx
