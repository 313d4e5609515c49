#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace fd3d {

// Dense row-major array with a dynamic shape. Most operations treat arrays
// as 2-D (rows x cols); rank-1 arrays behave as a single column.
template <class T>
struct Arr {
  std::vector<std::size_t> shape;
  std::vector<T> data;

  Arr() = default;
  explicit Arr(std::vector<std::size_t> s) : shape(std::move(s)), data(count(shape), T(0)) {}
  Arr(std::vector<std::size_t> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (count(shape) != data.size()) throw std::invalid_argument("Arr: shape/data size mismatch");
  }

  static std::size_t count(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
  }
  static Arr zeros(std::vector<std::size_t> s) { return Arr(std::move(s)); }
  static Arr full(std::vector<std::size_t> s, T v) {
    Arr a(std::move(s));
    for (T& e : a.data) e = v;
    return a;
  }
  static Arr scalar(T v) { return Arr({1}, {v}); }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const {
    if (shape.empty() || shape[0] == 0) return 0;
    return numel() / shape[0];
  }

  T& operator()(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
  const T& operator()(std::size_t i, std::size_t j) const { return data[i * cols() + j]; }
};

template <class T>
bool same_shape(const Arr<T>& a, const Arr<T>& b) {
  return a.shape == b.shape;
}

template <class T>
bool all_finite(const Arr<T>& a) {
  for (T v : a.data)
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

}  // namespace fd3d
