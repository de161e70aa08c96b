#pragma once

#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "diffx/ops.hpp"

namespace diffx {

template <class T>
using NamedParams = std::vector<std::pair<std::string, Var<T>>>;

/// Owner of named parameters and child modules. Modules are not copyable:
/// parameter handles are shared with the optimizer and checkpoint code.
template <class T>
class Module {
 public:
  Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;
  virtual ~Module() = default;

  void collect(NamedParams<T>& out, const std::string& prefix = "") const {
    for (const auto& [name, p] : params_) out.emplace_back(prefix + name, p);
    for (const auto& [name, child] : children_) child->collect(out, prefix + name + ".");
  }

  NamedParams<T> named_parameters() const {
    NamedParams<T> out;
    collect(out);
    return out;
  }

  std::vector<Var<T>> parameters() const {
    std::vector<Var<T>> out;
    for (auto& [_, p] : named_parameters()) out.push_back(p);
    return out;
  }

  int64_t parameter_count() const {
    int64_t n = 0;
    for (auto& [_, p] : named_parameters()) n += p.numel();
    return n;
  }

  void zero_grad() const {
    for (auto& [_, p] : named_parameters()) {
      Var<T> v = p;
      v.zero_grad();
    }
  }

  /// Copies every parameter of `src` whose name exists here. Returns the
  /// number of tensors copied; shape mismatches throw.
  template <class U>
  int load_matching(const Module<U>& src) {
    std::map<std::string, Var<U>> by_name;
    for (auto& [n, p] : src.named_parameters()) by_name.emplace(n, p);
    int copied = 0;
    for (auto& [n, p] : named_parameters()) {
      auto it = by_name.find(n);
      if (it == by_name.end()) continue;
      if (it->second.shape() != p.shape()) throw ShapeError("load_matching: shape mismatch for " + n);
      Var<T> dst = p;
      dst.mutable_value() = it->second.value().template cast<T>();
      ++copied;
    }
    return copied;
  }

 protected:
  Var<T> register_param(const std::string& name, Tensor<T> init) {
    Var<T> v = parameter(std::move(init));
    params_.emplace_back(name, v);
    return v;
  }

  template <class M>
  M& register_module(const std::string& name, std::unique_ptr<M> m) {
    M& ref = *m;
    children_.emplace_back(name, ref_ptr(ref));
    owned_.push_back(std::move(m));
    return ref;
  }

 private:
  static const Module* ref_ptr(const Module& m) { return &m; }

  std::vector<std::pair<std::string, Var<T>>> params_;
  std::vector<std::pair<std::string, const Module*>> children_;
  std::vector<std::unique_ptr<Module>> owned_;
};

namespace init {

/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual default for linear/conv layers.
template <class T>
Tensor<T> fan_in_uniform(Rng& rng, const Shape& s, int64_t fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<int64_t>(fan_in, 1)));
  return rng.uniform_tensor<T>(s, -bound, bound);
}

}  // namespace init

template <class T>
class Linear : public Module<T> {
 public:
  Linear(Rng& rng, int64_t in, int64_t out, bool bias = true) : in_(in), out_(out) {
    weight_ = this->register_param("weight", init::fan_in_uniform<T>(rng, {out, in}, in));
    if (bias) bias_ = this->register_param("bias", init::fan_in_uniform<T>(rng, {out}, in));
  }
  Var<T> operator()(const Var<T>& x) const { return ops::linear(x, weight_, bias_); }
  const Var<T>& weight() const { return weight_; }
  const Var<T>& bias() const { return bias_; }
  int64_t in_features() const { return in_; }
  int64_t out_features() const { return out_; }

 private:
  int64_t in_, out_;
  Var<T> weight_, bias_;
};

template <class T>
class Conv2d : public Module<T> {
 public:
  Conv2d(Rng& rng, int64_t in, int64_t out, int64_t kernel, int64_t stride = 1, int64_t pad = -1)
      : stride_(stride), pad_(pad < 0 ? kernel / 2 : pad) {
    const int64_t fan = in * kernel * kernel;
    weight_ = this->register_param("weight", init::fan_in_uniform<T>(rng, {out, in, kernel, kernel}, fan));
    bias_ = this->register_param("bias", init::fan_in_uniform<T>(rng, {out}, fan));
  }
  Var<T> operator()(const Var<T>& x) const { return ops::conv2d(x, weight_, bias_, stride_, pad_); }
  const Var<T>& weight() const { return weight_; }
  const Var<T>& bias() const { return bias_; }

 private:
  int64_t stride_, pad_;
  Var<T> weight_, bias_;
};

template <class T>
class GroupNorm : public Module<T> {
 public:
  GroupNorm(int64_t groups, int64_t channels) : groups_(groups) {
    if (channels % groups != 0)
      throw ConfigError("group norm: " + std::to_string(channels) + " channels not divisible by " + std::to_string(groups) + " groups");
    gamma_ = this->register_param("gamma", Tensor<T>::ones({channels}));
    beta_ = this->register_param("beta", Tensor<T>::zeros({channels}));
  }
  Var<T> operator()(const Var<T>& x) const { return ops::group_norm(x, gamma_, beta_, groups_); }

 private:
  int64_t groups_;
  Var<T> gamma_, beta_;
};

template <class T>
class LayerNorm : public Module<T> {
 public:
  explicit LayerNorm(int64_t d) {
    gamma_ = this->register_param("gamma", Tensor<T>::ones({d}));
    beta_ = this->register_param("beta", Tensor<T>::zeros({d}));
  }
  Var<T> operator()(const Var<T>& x) const { return ops::layer_norm(x, gamma_, beta_); }

 private:
  Var<T> gamma_, beta_;
};

/// Two-layer MLP with x4 middle expansion and GELU.
template <class T>
class FeedForward : public Module<T> {
 public:
  FeedForward(Rng& rng, int64_t d, int64_t mult = 4)
      : in_(this->register_module("in", std::make_unique<Linear<T>>(rng, d, d * mult))),
        out_(this->register_module("out", std::make_unique<Linear<T>>(rng, d * mult, d))) {}
  Var<T> operator()(const Var<T>& x) const { return out_(ops::gelu(in_(x))); }

 private:
  Linear<T>& in_;
  Linear<T>& out_;
};

/// Multi-head attention, bias-free q/k/v and a biased output projection.
template <class T>
class MultiHeadAttention : public Module<T> {
 public:
  MultiHeadAttention(Rng& rng, int64_t d_query, int64_t d_context, int64_t heads)
      : heads_(heads),
        q_(this->register_module("q", std::make_unique<Linear<T>>(rng, d_query, d_query, false))),
        k_(this->register_module("k", std::make_unique<Linear<T>>(rng, d_context, d_query, false))),
        v_(this->register_module("v", std::make_unique<Linear<T>>(rng, d_context, d_query, false))),
        o_(this->register_module("o", std::make_unique<Linear<T>>(rng, d_query, d_query))) {
    if (d_query % heads != 0) throw ConfigError("attention width " + std::to_string(d_query) + " not divisible by heads");
  }

  /// x (B, nq, d_query), ctx (B, nk, d_context); key_len restricts valid context rows.
  Var<T> operator()(const Var<T>& x, const Var<T>& ctx, const std::vector<int64_t>& key_len = {}) const {
    std::vector<int64_t> kl;
    for (int64_t l : key_len)
      for (int64_t h = 0; h < heads_; ++h) kl.push_back(l);
    auto q = ops::split_heads(q_(x), heads_);
    auto k = ops::split_heads(k_(ctx), heads_);
    auto v = ops::split_heads(v_(ctx), heads_);
    return o_(ops::merge_heads(ops::attention(q, k, v, kl), heads_));
  }

 private:
  int64_t heads_;
  Linear<T>& q_;
  Linear<T>& k_;
  Linear<T>& v_;
  Linear<T>& o_;
};

}  // namespace diffx
