#pragma once

#include <cassert>
#include <cstddef>
#include <cstdint>
#include <vector>

namespace psumml {

// Dense row-major [n, c, h, w] tensor. Scalar type is a template parameter so
// the same code paths run in float for training and in double for numeric
// verification.
template <class T>
struct Tensor {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<T> v;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_)
      : n(n_), c(c_), h(h_), w(w_),
        v(static_cast<std::size_t>(n_) * c_ * h_ * w_, T(0)) {}

  static Tensor chw(int c_, int h_, int w_) { return Tensor(1, c_, h_, w_); }

  std::size_t size() const { return v.size(); }
  T* data() { return v.data(); }
  const T* data() const { return v.data(); }

  std::size_t idx(int i, int j, int y, int x) const {
    assert(i >= 0 && i < n && j >= 0 && j < c && y >= 0 && y < h && x >= 0 && x < w);
    return ((static_cast<std::size_t>(i) * c + j) * h + y) * w + x;
  }
  T& at(int i, int j, int y, int x) { return v[idx(i, j, y, x)]; }
  const T& at(int i, int j, int y, int x) const { return v[idx(i, j, y, x)]; }

  // Pointer to the [h, w] plane of image i, channel j.
  T* plane(int i, int j) { return data() + (static_cast<std::size_t>(i) * c + j) * h * w; }
  const T* plane(int i, int j) const {
    return data() + (static_cast<std::size_t>(i) * c + j) * h * w;
  }

  void fill(T val) { std::fill(v.begin(), v.end(), val); }
  bool same_shape(const Tensor& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }
};

// Single [h, w] map of hard class ids.
struct Mask {
  int h = 0, w = 0;
  std::vector<std::uint8_t> v;

  Mask() = default;
  Mask(int h_, int w_) : h(h_), w(w_), v(static_cast<std::size_t>(h_) * w_, 0) {}

  std::uint8_t& at(int y, int x) { return v[static_cast<std::size_t>(y) * w + x]; }
  std::uint8_t at(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
  std::size_t size() const { return v.size(); }
};

// Batch of class-id masks, [n, h, w].
struct MaskBatch {
  int n = 0, h = 0, w = 0;
  std::vector<std::uint8_t> v;

  MaskBatch() = default;
  MaskBatch(int n_, int h_, int w_)
      : n(n_), h(h_), w(w_), v(static_cast<std::size_t>(n_) * h_ * w_, 0) {}

  std::uint8_t& at(int i, int y, int x) {
    return v[(static_cast<std::size_t>(i) * h + y) * w + x];
  }
  std::uint8_t at(int i, int y, int x) const {
    return v[(static_cast<std::size_t>(i) * h + y) * w + x];
  }
  std::uint8_t* plane(int i) { return v.data() + static_cast<std::size_t>(i) * h * w; }
  const std::uint8_t* plane(int i) const {
    return v.data() + static_cast<std::size_t>(i) * h * w;
  }
  std::size_t size() const { return v.size(); }
};

}  // namespace psumml
