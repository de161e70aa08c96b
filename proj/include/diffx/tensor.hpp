#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <new>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "diffx/errors.hpp"

namespace diffx {

using Shape = std::vector<int64_t>;

/// 64-byte aligned allocation.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, size_t) noexcept { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <class T>
using Storage = std::vector<T, AlignedAllocator<T>>;

inline int64_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), int64_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << ')';
  return os.str();
}

/// Dense row-major array. Plain value type; the autograd layer wraps it.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(static_cast<size_t>(numel_of(shape_)), fill) {}
  Tensor(Shape shape, const std::vector<T>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    if (static_cast<int64_t>(data_.size()) != numel_of(shape_))
      throw ShapeError("tensor data size " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s), T(0)); }
  static Tensor ones(Shape s) { return Tensor(std::move(s), T(1)); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

  const Shape& shape() const noexcept { return shape_; }
  int64_t dim(size_t i) const {
    if (i >= shape_.size()) throw ShapeError("dim index out of range for " + shape_str(shape_));
    return shape_[i];
  }
  size_t rank() const noexcept { return shape_.size(); }
  int64_t numel() const noexcept { return static_cast<int64_t>(data_.size()); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> span() noexcept { return data_; }
  std::span<const T> span() const noexcept { return data_; }
  Storage<T>& vec() noexcept { return data_; }
  const Storage<T>& vec() const noexcept { return data_; }

  T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  T& at(std::initializer_list<int64_t> idx) { return data_[offset(idx)]; }
  const T& at(std::initializer_list<int64_t> idx) const { return data_[offset(idx)]; }

  Tensor reshaped(Shape s) const {
    if (numel_of(s) != numel())
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    Tensor out;
    out.shape_ = std::move(s);
    out.data_ = data_;
    return out;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <class U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  size_t offset(std::initializer_list<int64_t> idx) const {
    if (idx.size() != shape_.size()) throw ShapeError("index rank mismatch for " + shape_str(shape_));
    size_t off = 0;
    size_t d = 0;
    for (int64_t i : idx) {
      off = off * static_cast<size_t>(shape_[d]) + static_cast<size_t>(i);
      ++d;
    }
    return off;
  }

  Shape shape_;
  Storage<T> data_;
};

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("max_abs_diff shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  T m = 0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Seeded random source. All randomness in the library flows through this.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : engine_(seed) {}

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [lo, hi].
  int64_t integer(int64_t lo, int64_t hi) {
    return std::uniform_int_distribution<int64_t>(lo, hi)(engine_);
  }
  uint64_t next_u64() { return engine_(); }
  std::mt19937_64& engine() { return engine_; }

  template <class T>
  Tensor<T> normal_tensor(const Shape& s) {
    Tensor<T> t(s);
    for (auto& v : t.vec()) v = static_cast<T>(normal());
    return t;
  }
  template <class T>
  Tensor<T> uniform_tensor(const Shape& s, double lo, double hi) {
    Tensor<T> t(s);
    for (auto& v : t.vec()) v = static_cast<T>(lo + (hi - lo) * uniform());
    return t;
  }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

/// splitmix64 finalizer; derives independent stream seeds from a root seed.
inline uint64_t derive_seed(uint64_t root, uint64_t stream) {
  uint64_t z = root + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// FNV-1a, used for manifest and config hashes.
inline uint64_t fnv1a(std::string_view bytes, uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<size_t>(i)] = digits[v & 0xF];
  return s;
}

}  // namespace diffx
