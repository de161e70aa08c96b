#pragma once

#include <cmath>
#include <map>
#include <string>

#include "diffx/module.hpp"

namespace diffx {

/// Linear ramp from 0 to `base` over `warmup` steps, then constant.
struct WarmupConstant {
  double base = 5e-5;
  int64_t warmup = 10000;
  double at(int64_t step) const {
    if (warmup <= 0 || step >= warmup) return base;
    return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
  }
};

/// Adam over a named parameter set, state keyed by parameter name.
template <class T>
class Adam {
 public:
  Adam(NamedParams<T> params, WarmupConstant lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
       double clip_norm = 0.0)
      : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), clip_(clip_norm) {
    for (auto& [name, p] : params_) {
      m_.emplace(name, Tensor<T>(p.shape()));
      v_.emplace(name, Tensor<T>(p.shape()));
    }
  }

  int64_t step_count() const { return step_; }
  void set_step_count(int64_t s) { step_ = s; }
  double current_lr() const { return lr_.at(step_); }

  void zero_grad() {
    for (auto& [_, p] : params_) p.zero_grad();
  }

  /// Applies one update from the accumulated gradients; returns the gradient
  /// norm before clipping.
  double step() {
    double sq = 0;
    std::vector<Tensor<T>> grads;
    grads.reserve(params_.size());
    for (auto& [_, p] : params_) {
      grads.push_back(p.grad());
      for (T g : grads.back().vec()) sq += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(sq);
    const double factor = (clip_ > 0 && norm > clip_) ? clip_ / norm : 1.0;
    const double lr = lr_.at(step_);
    ++step_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(step_));
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& [name, p] = params_[i];
      auto& m = m_.at(name);
      auto& v = v_.at(name);
      auto& w = p.mutable_value();
      const auto& g = grads[i];
      for (int64_t k = 0; k < w.numel(); ++k) {
        const double gk = static_cast<double>(g[k]) * factor;
        m[k] = static_cast<T>(b1_ * m[k] + (1 - b1_) * gk);
        v[k] = static_cast<T>(b2_ * v[k] + (1 - b2_) * gk * gk);
        const double mhat = m[k] / c1, vhat = v[k] / c2;
        w[k] = static_cast<T>(w[k] - lr * mhat / (std::sqrt(vhat) + eps_));
      }
    }
    return norm;
  }

  /// Moment tensors as named arrays ("m/<param>", "v/<param>").
  std::vector<std::pair<std::string, Tensor<T>>> state() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (auto& [name, _] : params_) {
      out.emplace_back("m/" + name, m_.at(name));
      out.emplace_back("v/" + name, v_.at(name));
    }
    return out;
  }

  void load_state(const std::map<std::string, Tensor<T>>& arrays) {
    for (auto& [name, p] : params_) {
      auto im = arrays.find("m/" + name);
      auto iv = arrays.find("v/" + name);
      if (im == arrays.end() || iv == arrays.end()) continue;
      if (im->second.shape() != p.shape() || iv->second.shape() != p.shape())
        throw ShapeError("optimizer state shape mismatch for " + name);
      m_.at(name) = im->second;
      v_.at(name) = iv->second;
    }
  }

 private:
  NamedParams<T> params_;
  WarmupConstant lr_;
  double b1_, b2_, eps_, clip_;
  int64_t step_ = 0;
  std::map<std::string, Tensor<T>> m_, v_;
};

}  // namespace diffx
