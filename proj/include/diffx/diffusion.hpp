#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "diffx/condition_types.hpp"
#include "diffx/ops.hpp"

namespace diffx {

enum class ScheduleKind { linear };

/// beta/alpha/alpha-bar tables for t = 1..T, stored at index t-1.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  double beta(int t) const { return betas.at(static_cast<size_t>(t - 1)); }
  double alpha(int t) const { return alphas.at(static_cast<size_t>(t - 1)); }
  double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bars.at(static_cast<size_t>(t - 1)); }
};

inline NoiseSchedule make_schedule(int T, double beta_start, double beta_end, ScheduleKind kind = ScheduleKind::linear) {
  if (T < 1) throw RangeError("schedule needs T >= 1, got " + std::to_string(T));
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw RangeError("schedule needs 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.T = T;
  double prod = 1.0;
  for (int i = 0; i < T; ++i) {
    double b = beta_start;
    if (kind == ScheduleKind::linear && T > 1) b = beta_start + (beta_end - beta_start) * i / (T - 1);
    s.betas.push_back(b);
    s.alphas.push_back(1.0 - b);
    prod *= 1.0 - b;
    s.alpha_bars.push_back(prod);
  }
  return s;
}

/// A latent z at diffusion time t; z is (C, h, w) or batched (B, C, h, w).
template <class T>
struct LatentState {
  Tensor<T> z;
  int t = 0;
};

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, elementwise in closed form.
template <class T>
LatentState<T> forward_noise(const LatentState<T>& z0, int t, const Tensor<T>& eps, const NoiseSchedule& sched) {
  if (t < 1 || t > sched.T)
    throw RangeError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(sched.T) + "]");
  if (eps.shape() != z0.z.shape())
    throw ShapeError("noise shape " + shape_str(eps.shape()) + " != latent shape " + shape_str(z0.z.shape()));
  const T a = static_cast<T>(std::sqrt(sched.alpha_bar(t)));
  const T s = static_cast<T>(std::sqrt(1.0 - sched.alpha_bar(t)));
  LatentState<T> out{Tensor<T>(z0.z.shape()), t};
  for (int64_t i = 0; i < eps.numel(); ++i) out.z[i] = a * z0.z[i] + s * eps[i];
  return out;
}

/// Batched form: row b of z0 (B, ...) is noised to ts[b].
template <class T>
Tensor<T> forward_noise_batch(const Tensor<T>& z0, const std::vector<int>& ts, const Tensor<T>& eps,
                              const NoiseSchedule& sched) {
  const int64_t B = z0.dim(0);
  if (static_cast<int64_t>(ts.size()) != B) throw ShapeError("timestep count != batch size");
  if (eps.shape() != z0.shape()) throw ShapeError("noise shape mismatch in forward_noise_batch");
  const int64_t inner = z0.numel() / B;
  Tensor<T> out(z0.shape());
  for (int64_t b = 0; b < B; ++b) {
    const int t = ts[static_cast<size_t>(b)];
    if (t < 1 || t > sched.T) throw RangeError("timestep " + std::to_string(t) + " out of range");
    const T a = static_cast<T>(std::sqrt(sched.alpha_bar(t)));
    const T s = static_cast<T>(std::sqrt(1.0 - sched.alpha_bar(t)));
    for (int64_t i = 0; i < inner; ++i) out[b * inner + i] = a * z0[b * inner + i] + s * eps[b * inner + i];
  }
  return out;
}

/// Denoiser call signature shared by the UNet and test doubles:
///   Var<T> f(const Var<T>& z_t, const std::vector<int>& t,
///            const CaptionEmbedding<T>&, const GroundingFeature<T>&)
template <class F, class T>
concept NoisePredictor = requires(F f, const Var<T>& z, const std::vector<int>& t, const CaptionEmbedding<T>& c,
                                  const GroundingFeature<T>& h) {
  { f(z, t, c, h) } -> std::convertible_to<Var<T>>;
};

/// Draws t ~ U{1..T} and eps ~ N(0, I) per batch entry (in that order from
/// `rng`), noises z0 and returns the mean squared noise-prediction error.
template <class T, class Denoiser>
  requires NoisePredictor<Denoiser, T>
Var<T> training_loss(Denoiser&& denoiser, const Tensor<T>& z0, const ConditioningBundle<T>& cond,
                     const NoiseSchedule& sched, Rng& rng) {
  const int64_t B = z0.dim(0);
  std::vector<int> ts(static_cast<size_t>(B));
  for (auto& t : ts) t = static_cast<int>(rng.integer(1, sched.T));
  Tensor<T> eps = rng.normal_tensor<T>(z0.shape());
  Tensor<T> zt = forward_noise_batch(z0, ts, eps, sched);
  Var<T> pred = denoiser(constant(std::move(zt)), ts, cond.caption, cond.grounding);
  if (pred.shape() != z0.shape())
    throw ShapeError("denoiser output " + shape_str(pred.shape()) + " != latent " + shape_str(z0.shape()));
  return ops::mse(pred, constant(std::move(eps)));
}

/// Evenly spaced subset of 1..T with `steps` entries, always ending at T.
inline std::vector<int> respaced_timesteps(int T, int steps) {
  std::vector<int> ts;
  for (int i = 1; i <= steps; ++i) {
    const int t = static_cast<int>(std::lround(static_cast<double>(i) * T / steps));
    if (ts.empty() || t > ts.back()) ts.push_back(t);
  }
  return ts;
}

/// Ancestral DDPM sampling from z_T ~ N(0, I). With steps < T the chain runs
/// on a respaced timestep subset with the matching per-step betas. Guidance:
/// eps = eps_u + s (eps_c - eps_u), where eps_u uses the zero caption; s = 1
/// evaluates only the conditional branch and s = 0 only the unconditional one.
template <class T, class Denoiser>
  requires NoisePredictor<Denoiser, T>
LatentState<T> sample(Denoiser&& denoiser, const Shape& shape, const ConditioningBundle<T>& cond,
                      const NoiseSchedule& sched, int steps, Rng& rng) {
  if (steps < 1 || steps > sched.T)
    throw RangeError("sampler steps " + std::to_string(steps) + " must lie in [1, T=" + std::to_string(sched.T) + "]");
  if (cond.guidance_scale < 0) throw RangeError("guidance scale must be nonnegative");
  NoGradGuard ng;
  const int64_t B = shape.at(0);
  const std::vector<int> ts = respaced_timesteps(sched.T, steps);
  const double s = cond.guidance_scale;
  CaptionEmbedding<T> null_caption;
  const GroundingFeature<T>& null_ground = cond.null_grounding.tokens.defined() ? cond.null_grounding : cond.grounding;
  if (s != 1.0) null_caption = zero_caption(cond.caption);

  Tensor<T> z = rng.normal_tensor<T>(shape);
  for (size_t k = ts.size(); k-- > 0;) {
    const int t = ts[k];
    const int t_prev = k == 0 ? 0 : ts[k - 1];
    const double abar = sched.alpha_bar(t), abar_prev = sched.alpha_bar(t_prev);
    const double alpha = abar / abar_prev;
    const double beta = 1.0 - alpha;
    std::vector<int> tb(static_cast<size_t>(B), t);
    Var<T> zv = constant(z);
    Tensor<T> eps;
    if (s == 1.0) {
      eps = denoiser(zv, tb, cond.caption, cond.grounding).value();
    } else if (s == 0.0) {
      eps = denoiser(zv, tb, null_caption, null_ground).value();
    } else {
      Tensor<T> eu = denoiser(zv, tb, null_caption, null_ground).value();
      Tensor<T> ec = denoiser(zv, tb, cond.caption, cond.grounding).value();
      eps = Tensor<T>(eu.shape());
      for (int64_t i = 0; i < eps.numel(); ++i) eps[i] = eu[i] + static_cast<T>(s) * (ec[i] - eu[i]);
    }
    if (eps.shape() != z.shape()) throw ShapeError("denoiser output shape mismatch during sampling");
    const T c1 = static_cast<T>(1.0 / std::sqrt(alpha));
    const T c2 = static_cast<T>(beta / std::sqrt(1.0 - abar));
    for (int64_t i = 0; i < z.numel(); ++i) z[i] = c1 * (z[i] - c2 * eps[i]);
    if (t_prev > 0) {
      const T sigma = static_cast<T>(std::sqrt(beta * (1.0 - abar_prev) / (1.0 - abar)));
      for (int64_t i = 0; i < z.numel(); ++i) z[i] += sigma * static_cast<T>(rng.normal());
    }
  }
  return {std::move(z), 0};
}

}  // namespace diffx
