#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace fewseg {

/// Raised when tensor or mask shapes disagree.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised on invalid configuration (odd channel counts, bad partition factors, ...).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

/// Dense H x W x C array, channel-fastest. Pixel p = y * W + x owns the
/// contiguous range [p * C, (p + 1) * C).
///
/// The same container doubles as the storage for weights: a k x k convolution
/// from Cin to Cout channels is a (k*k, Cin, Cout) tensor whose flat data is the
/// (k*k*Cin) x Cout row-major matrix used by im2col.
template <typename T>
struct Tensor {
  int h = 0;
  int w = 0;
  int c = 0;
  std::vector<T, Eigen::aligned_allocator<T>> data;

  Tensor() = default;
  Tensor(int rows, int cols, int channels, T fill = T(0))
      : h(rows), w(cols), c(channels) {
    if (rows < 0 || cols < 0 || channels < 0) throw ShapeError("negative tensor dimension");
    data.assign(static_cast<std::size_t>(rows) * cols * channels, fill);
  }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  int pixels() const { return h * w; }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  T& at(int y, int x, int ch) { return data[(static_cast<std::size_t>(y) * w + x) * c + ch]; }
  const T& at(int y, int x, int ch) const {
    return data[(static_cast<std::size_t>(y) * w + x) * c + ch];
  }

  /// (H*W) x C row-major view.
  MatMap<T> mat() { return MatMap<T>(data.data(), h * w, c); }
  ConstMatMap<T> mat() const { return ConstMatMap<T>(data.data(), h * w, c); }

  bool same_shape(const Tensor& o) const { return h == o.h && w == o.w && c == o.c; }

  bool all_finite() const {
    for (const T& v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(h, w, c);
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }

  std::string shape_string() const {
    return std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(c);
  }
};

/// An activation map flowing between branches and interaction modules.
template <typename T>
using FeatureMap = Tensor<T>;

/// Weight tensor (k*k, Cin, Cout) viewed as its (k*k*Cin) x Cout matrix.
template <typename T>
ConstMatMap<T> weight_matrix(const Tensor<T>& w) {
  return ConstMatMap<T>(w.data.data(), static_cast<Eigen::Index>(w.h) * w.w, w.c);
}
template <typename T>
MatMap<T> weight_matrix(Tensor<T>& w) {
  return MatMap<T>(w.data.data(), static_cast<Eigen::Index>(w.h) * w.w, w.c);
}

template <typename T>
inline void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(what) + ": shape " + a.shape_string() + " vs " + b.shape_string());
}

}  // namespace fewseg
