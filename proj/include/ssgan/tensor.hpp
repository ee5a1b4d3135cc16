#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ssgan/common.hpp"

namespace ssgan {

// Allocator that leaves scalars default-initialized (i.e. uninitialized), so
// buffers that are fully overwritten skip the zero pass.
template <class T>
struct RawAlloc : std::allocator<T> {
  template <class U>
  struct rebind {
    using other = RawAlloc<U>;
  };
  template <class U>
  void construct(U* p) noexcept {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

// Dense row-major n-d array. Values are float in training and double in
// tests; everything downstream is templated on the scalar type.
template <class T>
struct Tensor {
  using Storage = std::vector<T, RawAlloc<T>>;
  Shape shape;
  Storage v;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), v(shape_numel(shape), T(0)) {}
  Tensor(Shape s, std::vector<T> data) : shape(std::move(s)) {
    require(static_cast<int64_t>(data.size()) == shape_numel(shape),
            ErrorCode::shape_mismatch,
            "tensor data length does not match shape " + shape_str(shape));
    v.assign(data.begin(), data.end());
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  // Contents are indeterminate; caller must write every element.
  static Tensor uninit(Shape s) {
    Tensor t;
    t.shape = std::move(s);
    t.v.resize(static_cast<size_t>(shape_numel(t.shape)));
    return t;
  }
  static Tensor full(Shape s, T value) {
    Tensor t(std::move(s));
    std::fill(t.v.begin(), t.v.end(), value);
    return t;
  }
  static Tensor scalar(T value) { return Tensor({1}, {value}); }

  int64_t numel() const { return static_cast<int64_t>(v.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(shape.size()); }

  T& operator()(int i) { return v[static_cast<size_t>(i)]; }
  T operator()(int i) const { return v[static_cast<size_t>(i)]; }
  T& operator()(int i, int j) { return v[static_cast<size_t>(i) * shape[1] + j]; }
  T operator()(int i, int j) const {
    return v[static_cast<size_t>(i) * shape[1] + j];
  }
  T& operator()(int n, int c, int h, int w) {
    return v[((static_cast<size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
  T operator()(int n, int c, int h, int w) const {
    return v[((static_cast<size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }

  T* data() { return v.data(); }
  const T* data() const { return v.data(); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  Tensor reshaped(Shape s) const {
    require(shape_numel(s) == numel(), ErrorCode::shape_mismatch,
            "reshape " + shape_str(shape) + " -> " + shape_str(s));
    Tensor t;
    t.shape = std::move(s);
    t.v = v;
    return t;
  }

  bool all_finite() const {
    for (T x : v)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> t;
    t.shape = shape;
    t.v.resize(v.size());
    for (size_t i = 0; i < v.size(); ++i) t.v[i] = static_cast<U>(v[i]);
    return t;
  }
};

template <class T>
double frobenius_norm(const Tensor<T>& a) {
  double s = 0;
  for (T x : a.v) s += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(s);
}

template <class T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.same_shape(b), ErrorCode::shape_mismatch, "max_abs_diff shapes");
  double m = 0;
  for (size_t i = 0; i < a.v.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.v[i]) - static_cast<double>(b.v[i])));
  return m;
}

}  // namespace ssgan
