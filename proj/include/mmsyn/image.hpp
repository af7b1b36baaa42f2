#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

#include "mmsyn/errors.hpp"

namespace mmsyn {

// Dense 2-D image, row-major. Plain data carrier: images flow between the
// phantom generator, frequency filters, conditioning assembly and metrics
// without touching the autodiff graph.
template <class T>
struct Image {
  int h = 0;
  int w = 0;
  std::vector<T> v;

  Image() = default;
  Image(int height, int width, T fill = T(0))
      : h(height), w(width), v(static_cast<std::size_t>(height) * width, fill) {}

  T& at(int i, int j) { return v[static_cast<std::size_t>(i) * w + j]; }
  const T& at(int i, int j) const { return v[static_cast<std::size_t>(i) * w + j]; }

  std::size_t size() const { return v.size(); }
  bool same_shape(const Image& o) const { return h == o.h && w == o.w; }

  template <class U>
  Image<U> cast() const {
    Image<U> out(h, w);
    for (std::size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
    return out;
  }
};

template <class T>
inline void require_same_shape(const Image<T>& a, const Image<T>& b, const char* what) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(what) + ": image shapes differ (" +
                     std::to_string(a.h) + "x" + std::to_string(a.w) + " vs " +
                     std::to_string(b.h) + "x" + std::to_string(b.w) + ")");
}

// Mirror an out-of-range index back into [0, n) with the edge repeated
// (... c b a | a b c ... | c b a ...). Loops so it stays valid even when the
// kernel radius exceeds the image extent.
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i - 1;
    if (i >= n) i = 2 * n - i - 1;
  }
  return i;
}

template <class T>
inline Image<T> clamp_image(Image<T> img, T lo, T hi) {
  for (auto& x : img.v) x = std::clamp(x, lo, hi);
  return img;
}

}  // namespace mmsyn
