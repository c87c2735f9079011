#pragma once

#include "fewseg/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

namespace fewseg::ops {

namespace detail {

// Row-major (H*W) x (k*k*C) patch matrix with zero "same" padding.
template <typename T>
RowMat<T> im2col(const Tensor<T>& x, int k) {
  const int pad = k / 2;
  RowMat<T> col = RowMat<T>::Zero(static_cast<Eigen::Index>(x.h) * x.w, k * k * x.c);
  for (int y = 0; y < x.h; ++y) {
    for (int xx = 0; xx < x.w; ++xx) {
      T* row = col.data() + (static_cast<std::size_t>(y) * x.w + xx) * col.cols();
      for (int ky = 0; ky < k; ++ky) {
        const int sy = y + ky - pad;
        if (sy < 0 || sy >= x.h) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int sx = xx + kx - pad;
          if (sx < 0 || sx >= x.w) continue;
          const T* src = &x.at(sy, sx, 0);
          std::copy(src, src + x.c, row + (ky * k + kx) * x.c);
        }
      }
    }
  }
  return col;
}

template <typename T>
void col2im_add(const RowMat<T>& col, int k, Tensor<T>& dx) {
  const int pad = k / 2;
  for (int y = 0; y < dx.h; ++y) {
    for (int xx = 0; xx < dx.w; ++xx) {
      const T* row = col.data() + (static_cast<std::size_t>(y) * dx.w + xx) * col.cols();
      for (int ky = 0; ky < k; ++ky) {
        const int sy = y + ky - pad;
        if (sy < 0 || sy >= dx.h) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int sx = xx + kx - pad;
          if (sx < 0 || sx >= dx.w) continue;
          T* dst = &dx.at(sy, sx, 0);
          const T* src = row + (ky * k + kx) * dx.c;
          for (int ch = 0; ch < dx.c; ++ch) dst[ch] += src[ch];
        }
      }
    }
  }
}

}  // namespace detail

/// "Same"-padded k x k convolution, stride 1. Weight shape (k*k, Cin, Cout);
/// bias (1, 1, Cout) or an empty Var.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int k) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = weight.value();
  if (k < 1 || k % 2 == 0) throw ConfigError("conv2d: kernel size must be odd");
  if (wv.h != k * k || wv.w != xv.c)
    throw ShapeError("conv2d: weight " + wv.shape_string() + " does not fit input " +
                     xv.shape_string() + " with k=" + std::to_string(k));
  if (bias && bias.value().size() != static_cast<std::size_t>(wv.c))
    throw ShapeError("conv2d: bias size mismatch");

  const int cout = wv.c;
  Tensor<T> out(xv.h, xv.w, cout);
  auto w_mat = fewseg::weight_matrix(wv);
  std::shared_ptr<RowMat<T>> col;
  if (k == 1) {
    out.mat().noalias() = xv.mat() * w_mat;
  } else {
    col = std::make_shared<RowMat<T>>(detail::im2col(xv, k));
    out.mat().noalias() = (*col) * w_mat;
  }
  if (bias) {
    auto b = ConstMatMap<T>(bias.value().data.data(), 1, cout);
    out.mat().rowwise() += b.row(0);
  }
  if (!fewseg::detail::tracks<T>({&x, &weight, &bias})) return Var<T>::constant(std::move(out));

  const bool has_bias = static_cast<bool>(bias);
  return fewseg::detail::make_node<T>(
      std::move(out), {&x, &weight, &bias}, [col, k, has_bias](Node<T>& self) {
        const Tensor<T>& xin = self.parents[0]->value;
        const Tensor<T>& wt = self.parents[1]->value;
        auto g = self.grad.mat();
        auto w_mat = fewseg::weight_matrix(wt);
        if (auto* dw = fewseg::detail::parent_grad(self, 1)) {
          auto dwm = fewseg::weight_matrix(*dw);
          if (k == 1)
            dwm.noalias() += xin.mat().transpose() * g;
          else
            dwm.noalias() += col->transpose() * g;
        }
        if (has_bias) {
          if (auto* db = fewseg::detail::parent_grad(self, 2)) {
            MatMap<T> dbm(db->data.data(), 1, wt.c);
            dbm.noalias() += g.colwise().sum();
          }
        }
        if (auto* dx = fewseg::detail::parent_grad(self, 0)) {
          if (k == 1) {
            dx->mat().noalias() += g * w_mat.transpose();
          } else {
            RowMat<T> dcol = g * w_mat.transpose();
            detail::col2im_add(dcol, k, *dx);
          }
        }
      });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (T& v : out.data) v = v > T(0) ? v : T(0);
  if (!fewseg::detail::tracks<T>({&x})) return Var<T>::constant(std::move(out));
  return fewseg::detail::make_node<T>(std::move(out), {&x}, [](Node<T>& self) {
    if (auto* dx = fewseg::detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.value.size(); ++i)
        if (self.value[i] > T(0)) (*dx)[i] += self.grad[i];
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (T& v : out.data) v = T(1) / (T(1) + std::exp(-v));
  if (!fewseg::detail::tracks<T>({&x})) return Var<T>::constant(std::move(out));
  return fewseg::detail::make_node<T>(std::move(out), {&x}, [](Node<T>& self) {
    if (auto* dx = fewseg::detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.value.size(); ++i) {
        const T s = self.value[i];
        (*dx)[i] += self.grad[i] * s * (T(1) - s);
      }
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  if (!fewseg::detail::tracks<T>({&a, &b})) return Var<T>::constant(std::move(out));
  return fewseg::detail::make_node<T>(std::move(out), {&a, &b}, [](Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p)
      if (auto* d = fewseg::detail::parent_grad(self, p))
        for (std::size_t i = 0; i < self.grad.size(); ++i) (*d)[i] += self.grad[i];
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out = a.value();
  for (T& v : out.data) v *= factor;
  if (!fewseg::detail::tracks<T>({&a})) return Var<T>::constant(std::move(out));
  return fewseg::detail::make_node<T>(std::move(out), {&a}, [factor](Node<T>& self) {
    if (auto* d = fewseg::detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*d)[i] += factor * self.grad[i];
  });
}

/// Channel concatenation [a; b].
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (av.h != bv.h || av.w != bv.w)
    throw ShapeError("concat_channels: spatial mismatch " + av.shape_string() + " vs " +
                     bv.shape_string());
  Tensor<T> out(av.h, av.w, av.c + bv.c);
  for (int p = 0; p < av.pixels(); ++p) {
    std::copy_n(av.data.data() + p * av.c, av.c, out.data.data() + p * out.c);
    std::copy_n(bv.data.data() + p * bv.c, bv.c, out.data.data() + p * out.c + av.c);
  }
  if (!fewseg::detail::tracks<T>({&a, &b})) return Var<T>::constant(std::move(out));
  const int ca = av.c, cb = bv.c;
  return fewseg::detail::make_node<T>(std::move(out), {&a, &b}, [ca, cb](Node<T>& self) {
    const int pixels = self.value.pixels();
    if (auto* da = fewseg::detail::parent_grad(self, 0))
      for (int p = 0; p < pixels; ++p)
        for (int ch = 0; ch < ca; ++ch) (*da)[p * ca + ch] += self.grad[p * (ca + cb) + ch];
    if (auto* db = fewseg::detail::parent_grad(self, 1))
      for (int p = 0; p < pixels; ++p)
        for (int ch = 0; ch < cb; ++ch) (*db)[p * cb + ch] += self.grad[p * (ca + cb) + ca + ch];
  });
}

/// 2 x 2 max pooling, stride 2. H and W must be even.
template <typename T>
Var<T> max_pool2(const Var<T>& x) {
  const Tensor<T>& xv = x.value();
  if (xv.h % 2 || xv.w % 2) throw ShapeError("max_pool2: odd spatial size " + xv.shape_string());
  Tensor<T> out(xv.h / 2, xv.w / 2, xv.c);
  auto argmax = std::make_shared<std::vector<int>>(out.size());
  for (int y = 0; y < out.h; ++y)
    for (int xx = 0; xx < out.w; ++xx)
      for (int ch = 0; ch < xv.c; ++ch) {
        int best = -1;
        T best_v = T(0);
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const int idx = ((2 * y + dy) * xv.w + (2 * xx + dx)) * xv.c + ch;
            if (best < 0 || xv[idx] > best_v) {
              best = idx;
              best_v = xv[idx];
            }
          }
        const std::size_t o = (static_cast<std::size_t>(y) * out.w + xx) * out.c + ch;
        out[o] = best_v;
        (*argmax)[o] = best;
      }
  if (!fewseg::detail::tracks<T>({&x})) return Var<T>::constant(std::move(out));
  return fewseg::detail::make_node<T>(std::move(out), {&x}, [argmax](Node<T>& self) {
    if (auto* dx = fewseg::detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*dx)[(*argmax)[i]] += self.grad[i];
  });
}

/// Nearest-neighbour 2x upsampling.
template <typename T>
Var<T> upsample2(const Var<T>& x) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.h * 2, xv.w * 2, xv.c);
  for (int y = 0; y < out.h; ++y)
    for (int xx = 0; xx < out.w; ++xx)
      std::copy_n(&xv.at(y / 2, xx / 2, 0), xv.c, &out.at(y, xx, 0));
  if (!fewseg::detail::tracks<T>({&x})) return Var<T>::constant(std::move(out));
  return fewseg::detail::make_node<T>(std::move(out), {&x}, [](Node<T>& self) {
    if (auto* dx = fewseg::detail::parent_grad(self, 0)) {
      const int c = self.value.c;
      for (int y = 0; y < self.value.h; ++y)
        for (int xx = 0; xx < self.value.w; ++xx)
          for (int ch = 0; ch < c; ++ch) dx->at(y / 2, xx / 2, ch) += self.grad.at(y, xx, ch);
    }
  });
}

/// x(i, j, c) * s(i, j) with s a single-channel map broadcast over channels.
template <typename T>
Var<T> scale_by_map(const Var<T>& x, const Var<T>& s) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& sv = s.value();
  if (sv.h != xv.h || sv.w != xv.w || sv.c != 1)
    throw ShapeError("scale_by_map: map " + sv.shape_string() + " vs input " + xv.shape_string());
  Tensor<T> out = xv;
  for (int p = 0; p < xv.pixels(); ++p)
    for (int ch = 0; ch < xv.c; ++ch) out[p * xv.c + ch] *= sv[p];
  if (!fewseg::detail::tracks<T>({&x, &s})) return Var<T>::constant(std::move(out));
  return fewseg::detail::make_node<T>(std::move(out), {&x, &s}, [](Node<T>& self) {
    const Tensor<T>& xin = self.parents[0]->value;
    const Tensor<T>& sin = self.parents[1]->value;
    const int c = xin.c;
    if (auto* dx = fewseg::detail::parent_grad(self, 0))
      for (int p = 0; p < xin.pixels(); ++p)
        for (int ch = 0; ch < c; ++ch) (*dx)[p * c + ch] += self.grad[p * c + ch] * sin[p];
    if (auto* ds = fewseg::detail::parent_grad(self, 1))
      for (int p = 0; p < xin.pixels(); ++p) {
        T acc = T(0);
        for (int ch = 0; ch < c; ++ch) acc += self.grad[p * c + ch] * xin[p * c + ch];
        (*ds)[p] += acc;
      }
  });
}

/// Pixel gather: output pixel p takes every channel of input pixel src[p], or
/// zeros when src[p] < 0. Used for padding, cropping and group rearrangement.
template <typename T>
Var<T> gather_pixels(const Var<T>& x, std::shared_ptr<const std::vector<int>> src, int out_h,
                     int out_w) {
  const Tensor<T>& xv = x.value();
  if (src->size() != static_cast<std::size_t>(out_h) * out_w)
    throw ShapeError("gather_pixels: index map size mismatch");
  Tensor<T> out(out_h, out_w, xv.c);
  const int c = xv.c;
  for (std::size_t p = 0; p < src->size(); ++p) {
    const int s = (*src)[p];
    if (s < 0) continue;
    if (s >= xv.pixels()) throw ShapeError("gather_pixels: index out of range");
    std::copy_n(xv.data.data() + static_cast<std::size_t>(s) * c, c, out.data.data() + p * c);
  }
  if (!fewseg::detail::tracks<T>({&x})) return Var<T>::constant(std::move(out));
  return fewseg::detail::make_node<T>(std::move(out), {&x}, [src, c](Node<T>& self) {
    if (auto* dx = fewseg::detail::parent_grad(self, 0))
      for (std::size_t p = 0; p < src->size(); ++p) {
        const int s = (*src)[p];
        if (s < 0) continue;
        for (int ch = 0; ch < c; ++ch)
          (*dx)[static_cast<std::size_t>(s) * c + ch] += self.grad[p * c + ch];
      }
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, int h, int w, int c) {
  if (static_cast<std::size_t>(h) * w * c != x.value().size())
    throw ShapeError("reshape: element count mismatch");
  Tensor<T> out = x.value();
  out.h = h;
  out.w = w;
  out.c = c;
  if (!fewseg::detail::tracks<T>({&x})) return Var<T>::constant(std::move(out));
  return fewseg::detail::make_node<T>(std::move(out), {&x}, [](Node<T>& self) {
    if (auto* dx = fewseg::detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*dx)[i] += self.grad[i];
  });
}

/// Sum of scalar Vars.
template <typename T>
Var<T> sum_scalars(const std::vector<Var<T>>& terms) {
  if (terms.empty()) throw ShapeError("sum_scalars: no terms");
  Var<T> acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

}  // namespace fewseg::ops
