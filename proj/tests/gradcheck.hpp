#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "diffx/module.hpp"

namespace diffx::testing {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst;
  int checked = 0;
};

/// Central finite differences against reverse-mode gradients of a scalar
/// loss. Entries per tensor are subsampled when `per_tensor` > 0. Relative
/// error is |a - n| / max(|a| + |n|, floor).
inline GradCheckResult grad_check(const NamedParams<double>& params, const std::function<Var<double>()>& loss,
                                  int per_tensor = 0, double h = 1e-5, double floor = 1e-6, uint64_t seed = 7) {
  for (auto [_, p] : params) p.zero_grad();
  loss().backward();
  std::vector<Tensor<double>> analytic;
  for (auto& [_, p] : params) analytic.push_back(p.grad());
  Rng rng(seed);
  GradCheckResult res;
  NoGradGuard ng;
  for (size_t t = 0; t < params.size(); ++t) {
    Var<double> p = params[t].second;
    const int64_t n = p.numel();
    std::vector<int64_t> idx;
    if (per_tensor <= 0 || n <= per_tensor) {
      for (int64_t i = 0; i < n; ++i) idx.push_back(i);
    } else {
      for (int i = 0; i < per_tensor; ++i) idx.push_back(rng.integer(0, n - 1));
    }
    for (int64_t i : idx) {
      const double orig = p.value()[i];
      p.mutable_value()[i] = orig + h;
      const double fp = loss().value()[0];
      p.mutable_value()[i] = orig - h;
      const double fm = loss().value()[0];
      p.mutable_value()[i] = orig;
      const double num = (fp - fm) / (2 * h);
      const double a = analytic[t][i];
      const double rel = std::abs(a - num) / std::max(std::abs(a) + std::abs(num), floor);
      ++res.checked;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst = params[t].first + "[" + std::to_string(i) + "] analytic=" + std::to_string(a) +
                    " numeric=" + std::to_string(num);
      }
    }
  }
  return res;
}

}  // namespace diffx::testing
