#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "mmsyn/tensor.hpp"

namespace mmsyn {

enum class Padding { kZero, kReflect };

namespace detail {

template <class T>
inline void axpy(T a, std::span<const T> x, std::span<T> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

inline void check_4d(const Shape& s, const char* what) {
  if (s.size() != 4) throw ShapeError(std::string(what) + ": expected 4-D [B,C,H,W], got " + shape_str(s));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise / reduction ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto ad = a.data(), bd = b.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] + bd[i];
  Tensor<T>::record(out, {a, b}, [pa = a.node().get(), pb = b.node().get()](auto& self) {
    if (pa->requires_grad) pa->accumulate(self.grad);
    if (pb->requires_grad) pb->accumulate(self.grad);
  });
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto ad = a.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = s * ad[i];
  Tensor<T>::record(out, {a}, [pa = a.node().get(), s](auto& self) {
    if (!pa->requires_grad) return;
    auto& g = pa->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
  return out;
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto ad = a.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] > T(0) ? ad[i] : T(0);
  // subgradient at 0 is 0
  Tensor<T>::record(out, {a}, [pa = a.node().get()](auto& self) {
    if (!pa->requires_grad) return;
    auto& g = pa->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (pa->data[i] > T(0)) g[i] += self.grad[i];
  });
  return out;
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  double acc = 0.0;
  for (T x : a.data()) acc += static_cast<double>(x);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
  Tensor<T>::record(out, {a}, [pa = a.node().get()](auto& self) {
    if (!pa->requires_grad) return;
    auto& g = pa->grad_buffer();
    const T gy = self.grad[0];
    for (auto& v : g) v += gy;
  });
  return out;
}

// Mean of elementwise squared differences (the training objective form).
template <class T>
Tensor<T> mse_mean(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mse_mean: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto ad = a.data(), bd = b.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < ad.size(); ++i) {
    const double d = static_cast<double>(ad[i]) - static_cast<double>(bd[i]);
    acc += d * d;
  }
  const double n = static_cast<double>(ad.size());
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / n));
  Tensor<T>::record(out, {a, b}, [pa = a.node().get(), pb = b.node().get(), n](auto& self) {
    const T c = static_cast<T>(2.0 / n) * self.grad[0];
    if (pa->requires_grad) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * (pa->data[i] - pb->data[i]);
    }
    if (pb->requires_grad) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= c * (pa->data[i] - pb->data[i]);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Channel plumbing
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  for (const auto& p : parts) detail::check_4d(p.shape(), "concat_channels");
  const auto& s0 = parts[0].shape();
  std::int64_t c_total = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3])
      throw ShapeError("concat_channels: incompatible shapes " + shape_str(s0) + " vs " + shape_str(s));
    c_total += s[1];
  }
  const std::int64_t b_n = s0[0], hw = s0[2] * s0[3];
  Tensor<T> out = Tensor<T>::zeros({b_n, c_total, s0[2], s0[3]});
  auto od = out.data();
  std::int64_t c_off = 0;
  for (const auto& p : parts) {
    const std::int64_t pc = p.shape()[1];
    auto pd = p.data();
    for (std::int64_t b = 0; b < b_n; ++b)
      std::copy_n(pd.data() + b * pc * hw, pc * hw, od.data() + (b * c_total + c_off) * hw);
    c_off += pc;
  }

  if (grad_mode()) {
    bool needed = false;
    for (const auto& p : parts) needed = needed || p.requires_grad();
    if (needed) {
      std::vector<typename Tensor<T>::Node*> raw;
      for (const auto& p : parts) raw.push_back(p.node().get());
      Tensor<T> dummy = out;  // record() wants an initializer_list; add parents manually
      out.node()->requires_grad = true;
      for (const auto& p : parts) out.node()->parents.push_back(p.node());
      out.node()->backward_fn = [raw, b_n, c_total, hw](auto& self) {
        std::int64_t off = 0;
        for (auto* p : raw) {
          const std::int64_t pc = p->shape[1];
          if (p->requires_grad) {
            auto& g = p->grad_buffer();
            for (std::int64_t b = 0; b < b_n; ++b) {
              const T* src = self.grad.data() + (b * c_total + off) * hw;
              T* dst = g.data() + b * pc * hw;
              for (std::int64_t i = 0; i < pc * hw; ++i) dst[i] += src[i];
            }
          }
          off += pc;
        }
      };
    }
  }
  return out;
}

// Gather a subset of channels; the pullback scatters, so unselected channels
// receive exactly zero gradient.
template <class T>
Tensor<T> select_channels(const Tensor<T>& x, const std::vector<int>& idx) {
  detail::check_4d(x.shape(), "select_channels");
  const auto& s = x.shape();
  const std::int64_t b_n = s[0], c_in = s[1], hw = s[2] * s[3];
  for (int c : idx)
    if (c < 0 || c >= c_in) throw ShapeError("select_channels: index out of range");
  const std::int64_t k = static_cast<std::int64_t>(idx.size());
  Tensor<T> out = Tensor<T>::zeros({b_n, k, s[2], s[3]});
  auto xd = x.data();
  auto od = out.data();
  for (std::int64_t b = 0; b < b_n; ++b)
    for (std::int64_t j = 0; j < k; ++j)
      std::copy_n(xd.data() + (b * c_in + idx[static_cast<std::size_t>(j)]) * hw, hw,
                  od.data() + (b * k + j) * hw);
  Tensor<T>::record(out, {x}, [px = x.node().get(), idx, b_n, c_in, k, hw](auto& self) {
    if (!px->requires_grad) return;
    auto& g = px->grad_buffer();
    for (std::int64_t b = 0; b < b_n; ++b)
      for (std::int64_t j = 0; j < k; ++j) {
        const T* src = self.grad.data() + (b * k + j) * hw;
        T* dst = g.data() + (b * c_in + idx[static_cast<std::size_t>(j)]) * hw;
        for (std::int64_t i = 0; i < hw; ++i) dst[i] += src[i];
      }
  });
  return out;
}

// x[B,C,H,W] + v[C], v broadcast over batch and space (timestep injection).
template <class T>
Tensor<T> broadcast_add_channels(const Tensor<T>& x, const Tensor<T>& v) {
  detail::check_4d(x.shape(), "broadcast_add_channels");
  if (v.ndim() != 1 || v.dim(0) != x.dim(1))
    throw ShapeError("broadcast_add_channels: vector shape " + shape_str(v.shape()) +
                     " does not match channels of " + shape_str(x.shape()));
  const std::int64_t b_n = x.dim(0), c_n = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto xd = x.data(), vd = v.data();
  auto od = out.data();
  for (std::int64_t b = 0; b < b_n; ++b)
    for (std::int64_t c = 0; c < c_n; ++c) {
      const T bias = vd[c];
      const T* src = xd.data() + (b * c_n + c) * hw;
      T* dst = od.data() + (b * c_n + c) * hw;
      for (std::int64_t i = 0; i < hw; ++i) dst[i] = src[i] + bias;
    }
  Tensor<T>::record(out, {x, v}, [px = x.node().get(), pv = v.node().get(), b_n, c_n, hw](auto& self) {
    if (px->requires_grad) px->accumulate(self.grad);
    if (pv->requires_grad) {
      auto& g = pv->grad_buffer();
      for (std::int64_t b = 0; b < b_n; ++b)
        for (std::int64_t c = 0; c < c_n; ++c) {
          const T* src = self.grad.data() + (b * c_n + c) * hw;
          double acc = 0.0;
          for (std::int64_t i = 0; i < hw; ++i) acc += static_cast<double>(src[i]);
          g[c] += static_cast<T>(acc);
        }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// conv2d: stride-1 cross-correlation with "same" padding, odd square kernel.
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 Padding padding = Padding::kZero) {
  detail::check_4d(x.shape(), "conv2d input");
  detail::check_4d(weight.shape(), "conv2d weight");
  const std::int64_t b_n = x.dim(0), c_in = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t c_out = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != c_in)
    throw ShapeError("conv2d: weight channels " + std::to_string(weight.dim(1)) +
                     " != input channels " + std::to_string(c_in));
  if (weight.dim(3) != k || k % 2 == 0) throw ShapeError("conv2d: kernel must be square with odd size");
  if (bias.ndim() != 1 || bias.dim(0) != c_out)
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()) + " != [" + std::to_string(c_out) + "]");
  const std::int64_t p = k / 2;

  Tensor<T> out = Tensor<T>::zeros({b_n, c_out, h, w});
  const T* xd = x.data().data();
  const T* wd = weight.data().data();
  const T* bd = bias.data().data();
  T* od = out.data().data();

  if (padding == Padding::kZero) {
    for (std::int64_t b = 0; b < b_n; ++b)
      for (std::int64_t oc = 0; oc < c_out; ++oc) {
        T* oplane = od + (b * c_out + oc) * h * w;
        std::fill_n(oplane, h * w, bd[oc]);
        for (std::int64_t ic = 0; ic < c_in; ++ic) {
          const T* iplane = xd + (b * c_in + ic) * h * w;
          const T* wk = wd + (oc * c_in + ic) * k * k;
          for (std::int64_t ky = 0; ky < k; ++ky) {
            const std::int64_t dy = ky - p;
            const std::int64_t y0 = std::max<std::int64_t>(0, -dy);
            const std::int64_t y1 = std::min(h, h - dy);
            for (std::int64_t kx = 0; kx < k; ++kx) {
              const T wv = wk[ky * k + kx];
              const std::int64_t dx = kx - p;
              const std::int64_t x0 = std::max<std::int64_t>(0, -dx);
              const std::int64_t x1 = std::min(w, w - dx);
              for (std::int64_t y = y0; y < y1; ++y) {
                const T* src = iplane + (y + dy) * w + dx;
                T* dst = oplane + y * w;
                for (std::int64_t xx = x0; xx < x1; ++xx) dst[xx] += wv * src[xx];
              }
            }
          }
        }
      }
  } else {
    // reflect padding: per-offset index LUTs
    std::vector<std::vector<std::int64_t>> ylut(static_cast<std::size_t>(k)), xlut(static_cast<std::size_t>(k));
    for (std::int64_t kk = 0; kk < k; ++kk) {
      ylut[static_cast<std::size_t>(kk)].resize(static_cast<std::size_t>(h));
      xlut[static_cast<std::size_t>(kk)].resize(static_cast<std::size_t>(w));
      for (std::int64_t y = 0; y < h; ++y)
        ylut[static_cast<std::size_t>(kk)][static_cast<std::size_t>(y)] =
            reflect_index(static_cast<int>(y + kk - p), static_cast<int>(h));
      for (std::int64_t xx = 0; xx < w; ++xx)
        xlut[static_cast<std::size_t>(kk)][static_cast<std::size_t>(xx)] =
            reflect_index(static_cast<int>(xx + kk - p), static_cast<int>(w));
    }
    for (std::int64_t b = 0; b < b_n; ++b)
      for (std::int64_t oc = 0; oc < c_out; ++oc) {
        T* oplane = od + (b * c_out + oc) * h * w;
        std::fill_n(oplane, h * w, bd[oc]);
        for (std::int64_t ic = 0; ic < c_in; ++ic) {
          const T* iplane = xd + (b * c_in + ic) * h * w;
          const T* wk = wd + (oc * c_in + ic) * k * k;
          for (std::int64_t ky = 0; ky < k; ++ky)
            for (std::int64_t kx = 0; kx < k; ++kx) {
              const T wv = wk[ky * k + kx];
              const auto& yl = ylut[static_cast<std::size_t>(ky)];
              const auto& xl = xlut[static_cast<std::size_t>(kx)];
              for (std::int64_t y = 0; y < h; ++y) {
                const T* src = iplane + yl[static_cast<std::size_t>(y)] * w;
                T* dst = oplane + y * w;
                for (std::int64_t xx = 0; xx < w; ++xx) dst[xx] += wv * src[xl[static_cast<std::size_t>(xx)]];
              }
            }
        }
      }
  }

  Tensor<T>::record(out, {x, weight, bias},
                    [px = x.node().get(), pw = weight.node().get(), pb = bias.node().get(), b_n, c_in,
                     c_out, h, w, k, p, padding](auto& self) {
    const T* gd = self.grad.data();
    if (pb->requires_grad) {
      auto& g = pb->grad_buffer();
      for (std::int64_t b = 0; b < b_n; ++b)
        for (std::int64_t oc = 0; oc < c_out; ++oc) {
          const T* gplane = gd + (b * c_out + oc) * h * w;
          double acc = 0.0;
          for (std::int64_t i = 0; i < h * w; ++i) acc += static_cast<double>(gplane[i]);
          g[oc] += static_cast<T>(acc);
        }
    }
    if (padding == Padding::kZero) {
      if (px->requires_grad) {
        auto& g = px->grad_buffer();
        for (std::int64_t b = 0; b < b_n; ++b)
          for (std::int64_t oc = 0; oc < c_out; ++oc) {
            const T* gplane = gd + (b * c_out + oc) * h * w;
            for (std::int64_t ic = 0; ic < c_in; ++ic) {
              T* iplane = g.data() + (b * c_in + ic) * h * w;
              const T* wk = pw->data.data() + (oc * c_in + ic) * k * k;
              for (std::int64_t ky = 0; ky < k; ++ky) {
                const std::int64_t dy = ky - p;
                const std::int64_t y0 = std::max<std::int64_t>(0, -dy);
                const std::int64_t y1 = std::min(h, h - dy);
                for (std::int64_t kx = 0; kx < k; ++kx) {
                  const T wv = wk[ky * k + kx];
                  const std::int64_t dx = kx - p;
                  const std::int64_t x0 = std::max<std::int64_t>(0, -dx);
                  const std::int64_t x1 = std::min(w, w - dx);
                  for (std::int64_t y = y0; y < y1; ++y) {
                    T* dst = iplane + (y + dy) * w + dx;
                    const T* src = gplane + y * w;
                    for (std::int64_t xx = x0; xx < x1; ++xx) dst[xx] += wv * src[xx];
                  }
                }
              }
            }
          }
      }
      if (pw->requires_grad) {
        auto& g = pw->grad_buffer();
        for (std::int64_t b = 0; b < b_n; ++b)
          for (std::int64_t oc = 0; oc < c_out; ++oc) {
            const T* gplane = gd + (b * c_out + oc) * h * w;
            for (std::int64_t ic = 0; ic < c_in; ++ic) {
              const T* iplane = px->data.data() + (b * c_in + ic) * h * w;
              T* wk = g.data() + (oc * c_in + ic) * k * k;
              for (std::int64_t ky = 0; ky < k; ++ky) {
                const std::int64_t dy = ky - p;
                const std::int64_t y0 = std::max<std::int64_t>(0, -dy);
                const std::int64_t y1 = std::min(h, h - dy);
                for (std::int64_t kx = 0; kx < k; ++kx) {
                  const std::int64_t dx = kx - p;
                  const std::int64_t x0 = std::max<std::int64_t>(0, -dx);
                  const std::int64_t x1 = std::min(w, w - dx);
                  double acc = 0.0;
                  for (std::int64_t y = y0; y < y1; ++y) {
                    const T* src = iplane + (y + dy) * w + dx;
                    const T* gg = gplane + y * w;
                    for (std::int64_t xx = x0; xx < x1; ++xx)
                      acc += static_cast<double>(gg[xx]) * static_cast<double>(src[xx]);
                  }
                  wk[ky * k + kx] += static_cast<T>(acc);
                }
              }
            }
          }
      }
    } else {
      // reflect: scatter through the same index maps as the forward gather
      for (std::int64_t b = 0; b < b_n; ++b)
        for (std::int64_t oc = 0; oc < c_out; ++oc) {
          const T* gplane = gd + (b * c_out + oc) * h * w;
          for (std::int64_t ic = 0; ic < c_in; ++ic) {
            const T* iplane = px->data.data() + (b * c_in + ic) * h * w;
            for (std::int64_t ky = 0; ky < k; ++ky)
              for (std::int64_t kx = 0; kx < k; ++kx) {
                const std::int64_t widx = (oc * c_in + ic) * k * k + ky * k + kx;
                const T wv = pw->data[static_cast<std::size_t>(widx)];
                double wacc = 0.0;
                for (std::int64_t y = 0; y < h; ++y) {
                  const std::int64_t iy = reflect_index(static_cast<int>(y + ky - p), static_cast<int>(h));
                  for (std::int64_t xx = 0; xx < w; ++xx) {
                    const std::int64_t ix = reflect_index(static_cast<int>(xx + kx - p), static_cast<int>(w));
                    const T gv = gplane[y * w + xx];
                    if (px->requires_grad) px->grad_buffer()[static_cast<std::size_t>((b * c_in + ic) * h * w + iy * w + ix)] += wv * gv;
                    wacc += static_cast<double>(gv) * static_cast<double>(iplane[iy * w + ix]);
                  }
                }
                if (pw->requires_grad) pw->grad_buffer()[static_cast<std::size_t>(widx)] += static_cast<T>(wacc);
              }
          }
        }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// 2x2 max pooling; gradient routes to the argmax (first in row-major on ties).
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> maxpool2(const Tensor<T>& x) {
  detail::check_4d(x.shape(), "maxpool2");
  const std::int64_t b_n = x.dim(0), c_n = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0)
    throw ShapeError("maxpool2: spatial size " + std::to_string(h) + "x" + std::to_string(w) + " must be even");
  const std::int64_t ho = h / 2, wo = w / 2;
  Tensor<T> out = Tensor<T>::zeros({b_n, c_n, ho, wo});
  auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(b_n * c_n * ho * wo));
  const T* xd = x.data().data();
  T* od = out.data().data();
  for (std::int64_t bc = 0; bc < b_n * c_n; ++bc) {
    const T* iplane = xd + bc * h * w;
    T* oplane = od + bc * ho * wo;
    std::int64_t* am = argmax->data() + bc * ho * wo;
    for (std::int64_t y = 0; y < ho; ++y)
      for (std::int64_t xx = 0; xx < wo; ++xx) {
        const std::int64_t base = (2 * y) * w + 2 * xx;
        std::int64_t best = base;
        T bv = iplane[base];
        const std::int64_t cand[3] = {base + 1, base + w, base + w + 1};
        for (std::int64_t c : cand)
          if (iplane[c] > bv) {
            bv = iplane[c];
            best = c;
          }
        oplane[y * wo + xx] = bv;
        am[y * wo + xx] = bc * h * w + best;
      }
  }
  Tensor<T>::record(out, {x}, [px = x.node().get(), argmax](auto& self) {
    if (!px->requires_grad) return;
    auto& g = px->grad_buffer();
    for (std::size_t i = 0; i < argmax->size(); ++i)
      g[static_cast<std::size_t>((*argmax)[i])] += self.grad[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// 2x nearest-neighbor upsampling; gradient sums the four replicas.
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> upsample_nearest2(const Tensor<T>& x) {
  detail::check_4d(x.shape(), "upsample_nearest2");
  const std::int64_t b_n = x.dim(0), c_n = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> out = Tensor<T>::zeros({b_n, c_n, 2 * h, 2 * w});
  const T* xd = x.data().data();
  T* od = out.data().data();
  for (std::int64_t bc = 0; bc < b_n * c_n; ++bc) {
    const T* iplane = xd + bc * h * w;
    T* oplane = od + bc * 4 * h * w;
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t xx = 0; xx < w; ++xx) {
        const T v = iplane[y * w + xx];
        T* row0 = oplane + (2 * y) * (2 * w) + 2 * xx;
        T* row1 = row0 + 2 * w;
        row0[0] = row0[1] = row1[0] = row1[1] = v;
      }
  }
  Tensor<T>::record(out, {x}, [px = x.node().get(), b_n, c_n, h, w](auto& self) {
    if (!px->requires_grad) return;
    auto& g = px->grad_buffer();
    for (std::int64_t bc = 0; bc < b_n * c_n; ++bc) {
      const T* gplane = self.grad.data() + bc * 4 * h * w;
      T* iplane = g.data() + bc * h * w;
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t xx = 0; xx < w; ++xx) {
          const T* row0 = gplane + (2 * y) * (2 * w) + 2 * xx;
          const T* row1 = row0 + 2 * w;
          iplane[y * w + xx] += row0[0] + row0[1] + row1[0] + row1[1];
        }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization over [B,H,W] per channel.
// Train mode normalizes by batch statistics (biased variance) and updates the
// running stats in place (unbiased variance, PyTorch-style momentum). Eval
// mode normalizes by the running stats.
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      std::vector<T>& running_mean, std::vector<T>& running_var, T momentum, T eps,
                      bool training) {
  detail::check_4d(x.shape(), "batchnorm2d");
  const std::int64_t b_n = x.dim(0), c_n = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (gamma.numel() != c_n || beta.numel() != c_n)
    throw ShapeError("batchnorm2d: scale/shift must have one entry per channel");
  if (running_mean.size() != static_cast<std::size_t>(c_n) || running_var.size() != static_cast<std::size_t>(c_n))
    throw ShapeError("batchnorm2d: running stats must have one entry per channel");
  if (training && b_n < 2)
    throw ConfigError("batchnorm2d: training mode requires batch size >= 2");

  const std::int64_t hw = h * w;
  const std::int64_t n = b_n * hw;  // elements per channel
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* xd = x.data().data();
  const T* gd = gamma.data().data();
  const T* btd = beta.data().data();
  T* od = out.data().data();

  auto xhat = std::make_shared<std::vector<T>>(x.data().size());
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(c_n));

  for (std::int64_t c = 0; c < c_n; ++c) {
    double mean, var;
    if (training) {
      double acc = 0.0;
      for (std::int64_t b = 0; b < b_n; ++b) {
        const T* plane = xd + (b * c_n + c) * hw;
        for (std::int64_t i = 0; i < hw; ++i) acc += static_cast<double>(plane[i]);
      }
      mean = acc / static_cast<double>(n);
      double vacc = 0.0;
      for (std::int64_t b = 0; b < b_n; ++b) {
        const T* plane = xd + (b * c_n + c) * hw;
        for (std::int64_t i = 0; i < hw; ++i) {
          const double d = static_cast<double>(plane[i]) - mean;
          vacc += d * d;
        }
      }
      var = vacc / static_cast<double>(n);
      const double unbiased = vacc / static_cast<double>(n - 1);
      running_mean[static_cast<std::size_t>(c)] =
          static_cast<T>((1.0 - static_cast<double>(momentum)) * static_cast<double>(running_mean[static_cast<std::size_t>(c)]) +
                         static_cast<double>(momentum) * mean);
      running_var[static_cast<std::size_t>(c)] =
          static_cast<T>((1.0 - static_cast<double>(momentum)) * static_cast<double>(running_var[static_cast<std::size_t>(c)]) +
                         static_cast<double>(momentum) * unbiased);
    } else {
      mean = static_cast<double>(running_mean[static_cast<std::size_t>(c)]);
      var = static_cast<double>(running_var[static_cast<std::size_t>(c)]);
    }
    const double istd = 1.0 / std::sqrt(var + static_cast<double>(eps));
    (*inv_std)[static_cast<std::size_t>(c)] = static_cast<T>(istd);
    const T g = gd[c], bt = btd[c];
    for (std::int64_t b = 0; b < b_n; ++b) {
      const T* src = xd + (b * c_n + c) * hw;
      T* xh = xhat->data() + (b * c_n + c) * hw;
      T* dst = od + (b * c_n + c) * hw;
      for (std::int64_t i = 0; i < hw; ++i) {
        const T xv = static_cast<T>((static_cast<double>(src[i]) - mean) * istd);
        xh[i] = xv;
        dst[i] = g * xv + bt;
      }
    }
  }

  Tensor<T>::record(out, {x, gamma, beta},
                    [px = x.node().get(), pg = gamma.node().get(), pb = beta.node().get(), xhat, inv_std,
                     b_n, c_n, hw, n, training](auto& self) {
    const T* gy = self.grad.data();
    for (std::int64_t c = 0; c < c_n; ++c) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (std::int64_t b = 0; b < b_n; ++b) {
        const T* grow = gy + (b * c_n + c) * hw;
        const T* xh = xhat->data() + (b * c_n + c) * hw;
        for (std::int64_t i = 0; i < hw; ++i) {
          sum_dy += static_cast<double>(grow[i]);
          sum_dy_xhat += static_cast<double>(grow[i]) * static_cast<double>(xh[i]);
        }
      }
      if (pg->requires_grad) pg->grad_buffer()[static_cast<std::size_t>(c)] += static_cast<T>(sum_dy_xhat);
      if (pb->requires_grad) pb->grad_buffer()[static_cast<std::size_t>(c)] += static_cast<T>(sum_dy);
      if (px->requires_grad) {
        auto& g = px->grad_buffer();
        const double gv = static_cast<double>(pg->data[static_cast<std::size_t>(c)]);
        const double istd = static_cast<double>((*inv_std)[static_cast<std::size_t>(c)]);
        if (training) {
          const double mean_dy = sum_dy / static_cast<double>(n);
          const double mean_dy_xhat = sum_dy_xhat / static_cast<double>(n);
          for (std::int64_t b = 0; b < b_n; ++b) {
            const T* grow = gy + (b * c_n + c) * hw;
            const T* xh = xhat->data() + (b * c_n + c) * hw;
            T* dst = g.data() + (b * c_n + c) * hw;
            for (std::int64_t i = 0; i < hw; ++i)
              dst[i] += static_cast<T>(gv * istd *
                                       (static_cast<double>(grow[i]) - mean_dy -
                                        static_cast<double>(xh[i]) * mean_dy_xhat));
          }
        } else {
          for (std::int64_t b = 0; b < b_n; ++b) {
            const T* grow = gy + (b * c_n + c) * hw;
            T* dst = g.data() + (b * c_n + c) * hw;
            for (std::int64_t i = 0; i < hw; ++i)
              dst[i] += static_cast<T>(gv * istd * static_cast<double>(grow[i]));
          }
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Fully connected layer on a vector: y = W x + b, x[D], W[O,D], b[O].
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.ndim() != 1 || weight.ndim() != 2 || bias.ndim() != 1)
    throw ShapeError("linear: expected x[D], W[O,D], b[O]");
  const std::int64_t d = x.dim(0), o = weight.dim(0);
  if (weight.dim(1) != d || bias.dim(0) != o)
    throw ShapeError("linear: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(weight.shape()));
  Tensor<T> out = Tensor<T>::zeros({o});
  const T* xd = x.data().data();
  const T* wd = weight.data().data();
  auto od = out.data();
  for (std::int64_t r = 0; r < o; ++r) {
    double acc = static_cast<double>(bias.data()[static_cast<std::size_t>(r)]);
    const T* wrow = wd + r * d;
    for (std::int64_t c = 0; c < d; ++c) acc += static_cast<double>(wrow[c]) * static_cast<double>(xd[c]);
    od[static_cast<std::size_t>(r)] = static_cast<T>(acc);
  }
  Tensor<T>::record(out, {x, weight, bias},
                    [px = x.node().get(), pw = weight.node().get(), pb = bias.node().get(), d, o](auto& self) {
    const T* gy = self.grad.data();
    if (pb->requires_grad) {
      auto& g = pb->grad_buffer();
      for (std::int64_t r = 0; r < o; ++r) g[static_cast<std::size_t>(r)] += gy[r];
    }
    if (pw->requires_grad) {
      auto& g = pw->grad_buffer();
      for (std::int64_t r = 0; r < o; ++r)
        for (std::int64_t c = 0; c < d; ++c) g[static_cast<std::size_t>(r * d + c)] += gy[r] * px->data[static_cast<std::size_t>(c)];
    }
    if (px->requires_grad) {
      auto& g = px->grad_buffer();
      for (std::int64_t c = 0; c < d; ++c) {
        double acc = 0.0;
        for (std::int64_t r = 0; r < o; ++r)
          acc += static_cast<double>(gy[r]) * static_cast<double>(pw->data[static_cast<std::size_t>(r * d + c)]);
        g[static_cast<std::size_t>(c)] += static_cast<T>(acc);
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Gradient verification: reverse-mode vs central finite differences.
// Returns the max elementwise relative error. `f` must map a tensor to a
// scalar and be deterministic.
// ---------------------------------------------------------------------------

template <class T>
double grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& point, T step,
                  double denom_floor = 1e-6) {
  Tensor<T> x = point.clone();
  x.set_requires_grad(true);
  Tensor<T> y = f(x);
  if (y.numel() != 1) throw ContractError("grad_check: f must be scalar-valued");
  y.backward();
  std::vector<T> analytic(x.grad().begin(), x.grad().end());

  double max_rel = 0.0;
  Tensor<T> probe = point.clone();
  NoGradGuard no_grad;
  for (std::int64_t i = 0; i < probe.numel(); ++i) {
    const T saved = probe[i];
    probe[i] = saved + step;
    const double fp = static_cast<double>(f(probe).item());
    probe[i] = saved - step;
    const double fm = static_cast<double>(f(probe).item());
    probe[i] = saved;
    const double numeric = (fp - fm) / (2.0 * static_cast<double>(step));
    const double a = static_cast<double>(analytic[static_cast<std::size_t>(i)]);
    const double denom = std::max({std::abs(a), std::abs(numeric), denom_floor});
    max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
  }
  return max_rel;
}

}  // namespace mmsyn
