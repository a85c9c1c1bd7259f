#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "miseg/common.hpp"
#include "miseg/rng.hpp"

namespace miseg {

// Dense row-major N-D array, last axis fastest. Activations use the axis
// order (batch, channels, z, y, x).
template <class T>
struct TensorT {
  std::vector<int64_t> shape;
  std::vector<T> data;

  TensorT() = default;

  explicit TensorT(std::vector<int64_t> s, T fill = T(0)) : shape(std::move(s)) {
    for (int64_t d : shape) {
      if (d < 1) throw ValidationError("tensor shape entries must be >= 1");
    }
    data.assign(size_t(numel_of(shape)), fill);
  }

  static int64_t numel_of(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
  }

  static TensorT zeros_like(const TensorT& o) { return TensorT(o.shape); }

  int64_t numel() const { return int64_t(data.size()); }
  int rank() const { return int(shape.size()); }
  int64_t dim(int i) const { return shape[size_t(i)]; }
  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  T& operator[](int64_t i) { return data[size_t(i)]; }
  const T& operator[](int64_t i) const { return data[size_t(i)]; }

  // (B,C,Z,Y,X) accessor.
  T& at5(int64_t b, int64_t c, int64_t z, int64_t y, int64_t x) {
    return data[size_t((((b * shape[1] + c) * shape[2] + z) * shape[3] + y) * shape[4] + x)];
  }
  const T& at5(int64_t b, int64_t c, int64_t z, int64_t y, int64_t x) const {
    return data[size_t((((b * shape[1] + c) * shape[2] + z) * shape[3] + y) * shape[4] + x)];
  }

  void fill_uniform(RngStream& rng, double lo, double hi) {
    for (auto& v : data) v = T(rng.uniform(lo, hi));
  }
  void fill_normal(RngStream& rng, double mean, double stddev) {
    for (auto& v : data) v = T(rng.normal(mean, stddev));
  }

  template <class U>
  TensorT<U> cast() const {
    TensorT<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = U(data[i]);
    return out;
  }
};

using TensorF = TensorT<float>;
using TensorD = TensorT<double>;

inline std::string shape_str(const std::vector<int64_t>& s) {
  std::string r = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) r += ",";
    r += std::to_string(s[i]);
  }
  return r + ")";
}

}  // namespace miseg
