#pragma once

// Spatial correlation (non-local attention over all positions of a feature map),
// its long-range / short-range decomposition, and the sSE interaction module.

#include "fewseg/ops.hpp"
#include "fewseg/random.hpp"

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace fewseg {

/// 1x1 projections of a spatial correlation block. theta, phi and g map C to
/// C' = C / 2; omega maps C' back to C. None carry a bias, so a zero omega makes
/// the block an exact identity.
template <typename T>
struct SpatialCorrelationParams {
  int channels = 0;
  int reduced = 0;
  Var<T> theta;
  Var<T> phi;
  Var<T> g;
  Var<T> omega;

  static SpatialCorrelationParams random(int channels, Rng& rng, double omega_gain = 1.0) {
    if (channels <= 0 || channels % 2 != 0)
      throw ConfigError("spatial correlation needs a positive even channel count, got " +
                        std::to_string(channels));
    SpatialCorrelationParams p;
    p.channels = channels;
    p.reduced = channels / 2;
    const double in_std = 1.0 / std::sqrt(static_cast<double>(channels));
    const double out_std = omega_gain / std::sqrt(static_cast<double>(p.reduced));
    p.theta = Var<T>::parameter(normal_tensor<T>(1, channels, p.reduced, in_std, rng));
    p.phi = Var<T>::parameter(normal_tensor<T>(1, channels, p.reduced, in_std, rng));
    p.g = Var<T>::parameter(normal_tensor<T>(1, channels, p.reduced, in_std, rng));
    p.omega = Var<T>::parameter(normal_tensor<T>(1, p.reduced, channels, out_std, rng));
    return p;
  }

  std::vector<Var<T>*> tensors() { return {&theta, &phi, &g, &omega}; }
};

namespace detail {

template <typename T>
void check_correlation_params(const SpatialCorrelationParams<T>& p, int channels) {
  if (p.channels != channels)
    throw ShapeError("spatial correlation: input has " + std::to_string(channels) +
                     " channels, params expect " + std::to_string(p.channels));
}

template <typename T>
RowMat<T> softmax_rows(const RowMat<T>& m) {
  RowMat<T> a(m.rows(), m.cols());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const T mx = m.row(r).maxCoeff();
    a.row(r) = (m.row(r).array() - mx).exp();
    a.row(r) /= a.row(r).sum();
  }
  return a;
}

}  // namespace detail

/// Attention applied independently to each of the G rows of a (G, S, C) tensor,
/// each row being a set of S positions:
///   out = omega(softmax_rows(theta(X) phi(X)^T) g(X)) + X.
template <typename T>
Var<T> grouped_spatial_correlation(const Var<T>& grouped, const SpatialCorrelationParams<T>& p) {
  const Tensor<T>& xv = grouped.value();
  detail::check_correlation_params(p, xv.c);
  const int groups = xv.h;
  const int span = xv.w;
  const int c = xv.c;
  auto wt = weight_matrix(p.theta.value());
  auto wp = weight_matrix(p.phi.value());
  auto wg = weight_matrix(p.g.value());
  auto wo = weight_matrix(p.omega.value());

  struct Cache {
    RowMat<T> attn, theta, phi, gv, y;
  };
  const bool track =
      fewseg::detail::tracks<T>({&grouped, &p.theta, &p.phi, &p.g, &p.omega});
  auto caches = std::make_shared<std::vector<Cache>>(track ? groups : 0);

  Tensor<T> out = xv;
  for (int gi = 0; gi < groups; ++gi) {
    ConstMatMap<T> x(xv.data.data() + static_cast<std::size_t>(gi) * span * c, span, c);
    RowMat<T> th = x * wt;
    RowMat<T> ph = x * wp;
    RowMat<T> gv = x * wg;
    RowMat<T> attn = detail::softmax_rows<T>(th * ph.transpose());
    RowMat<T> y = attn * gv;
    MatMap<T> o(out.data.data() + static_cast<std::size_t>(gi) * span * c, span, c);
    o.noalias() += y * wo;
    if (track) (*caches)[gi] = Cache{std::move(attn), std::move(th), std::move(ph), std::move(gv),
                                     std::move(y)};
  }
  if (!track) return Var<T>::constant(std::move(out));

  return fewseg::detail::make_node<T>(
      std::move(out), {&grouped, &p.theta, &p.phi, &p.g, &p.omega},
      [caches, groups, span, c](Node<T>& self) {
        const Tensor<T>& xin = self.parents[0]->value;
        auto wt = weight_matrix(self.parents[1]->value);
        auto wp = weight_matrix(self.parents[2]->value);
        auto wg = weight_matrix(self.parents[3]->value);
        auto wo = weight_matrix(self.parents[4]->value);
        Tensor<T>* dx = fewseg::detail::parent_grad(self, 0);
        Tensor<T>* dwt = fewseg::detail::parent_grad(self, 1);
        Tensor<T>* dwp = fewseg::detail::parent_grad(self, 2);
        Tensor<T>* dwg = fewseg::detail::parent_grad(self, 3);
        Tensor<T>* dwo = fewseg::detail::parent_grad(self, 4);
        for (int gi = 0; gi < groups; ++gi) {
          const Cache& k = (*caches)[gi];
          const std::size_t off = static_cast<std::size_t>(gi) * span * c;
          ConstMatMap<T> x(xin.data.data() + off, span, c);
          ConstMatMap<T> d_out(self.grad.data.data() + off, span, c);
          if (dwo) weight_matrix(*dwo).noalias() += k.y.transpose() * d_out;
          RowMat<T> dy = d_out * wo.transpose();
          RowMat<T> d_attn = dy * k.gv.transpose();
          RowMat<T> dgv = k.attn.transpose() * dy;
          Eigen::Matrix<T, Eigen::Dynamic, 1> row_dot = (d_attn.array() * k.attn.array()).rowwise().sum();
          RowMat<T> dm = k.attn.array() * (d_attn.colwise() - row_dot).array();
          RowMat<T> dth = dm * k.phi;
          RowMat<T> dph = dm.transpose() * k.theta;
          if (dwt) weight_matrix(*dwt).noalias() += x.transpose() * dth;
          if (dwp) weight_matrix(*dwp).noalias() += x.transpose() * dph;
          if (dwg) weight_matrix(*dwg).noalias() += x.transpose() * dgv;
          if (dx) {
            MatMap<T> dxm(dx->data.data() + off, span, c);
            dxm += d_out;
            dxm.noalias() += dth * wt.transpose();
            dxm.noalias() += dph * wp.transpose();
            dxm.noalias() += dgv * wg.transpose();
          }
        }
      });
}

/// Full-map spatial correlation: every position attends to every other.
template <typename T>
Var<T> spatial_correlation(const Var<T>& f_in, const SpatialCorrelationParams<T>& p) {
  const Tensor<T>& v = f_in.value();
  if (v.pixels() < 1) throw ShapeError("spatial_correlation: empty feature map");
  auto flat = ops::reshape(f_in, 1, v.pixels(), v.c);
  return ops::reshape(grouped_spatial_correlation(flat, p), v.h, v.w, v.c);
}

/// The row-softmax-normalized correlation matrix (HW x HW) for f_in.
template <typename T>
RowMat<T> correlation_matrix(const Tensor<T>& f_in, const SpatialCorrelationParams<T>& p) {
  detail::check_correlation_params(p, f_in.c);
  auto x = f_in.mat();
  RowMat<T> th = x * weight_matrix(p.theta.value());
  RowMat<T> ph = x * weight_matrix(p.phi.value());
  return detail::softmax_rows<T>(th * ph.transpose());
}

/// Geometry of the long/short-range decomposition of an H x W map.
/// The padded map is (P_h * Q_h) x (P_w * Q_w). Long-range groups are the
/// Q_h * Q_w strided sets {(a + k Q_h, b + l Q_w)}; short-range blocks are the
/// P_h * P_w contiguous Q_h x Q_w tiles.
struct PartitionSpec {
  int height = 0;
  int width = 0;
  int p_h = 1;
  int p_w = 1;
  int q_h = 0;
  int q_w = 0;
  int pad_h = 0;
  int pad_w = 0;

  static PartitionSpec make(int height, int width, int p_h, int p_w) {
    if (height < 1 || width < 1) throw ShapeError("partition: empty map");
    if (p_h < 1 || p_w < 1) throw ConfigError("partition factors must be positive");
    PartitionSpec s;
    s.height = height;
    s.width = width;
    s.p_h = p_h;
    s.p_w = p_w;
    s.q_h = (height + p_h - 1) / p_h;
    s.q_w = (width + p_w - 1) / p_w;
    s.pad_h = p_h * s.q_h - height;
    s.pad_w = p_w * s.q_w - width;
    return s;
  }

  int padded_h() const { return p_h * q_h; }
  int padded_w() const { return p_w * q_w; }
  int long_groups() const { return q_h * q_w; }
  int long_group_size() const { return p_h * p_w; }
  int short_blocks() const { return p_h * p_w; }
  int short_block_size() const { return q_h * q_w; }

  /// Source pixel index (into the unpadded map) or -1 for padding.
  int source(int py, int px) const { return (py < height && px < width) ? py * width + px : -1; }
};

enum class Range { Long, Short };

namespace detail {

/// Flat (group * size + slot) -> source pixel table for the given decomposition.
inline std::vector<int> group_table(const PartitionSpec& s, Range range) {
  std::vector<int> table;
  table.reserve(static_cast<std::size_t>(s.padded_h()) * s.padded_w());
  if (range == Range::Long) {
    for (int a = 0; a < s.q_h; ++a)
      for (int b = 0; b < s.q_w; ++b)
        for (int k = 0; k < s.p_h; ++k)
          for (int l = 0; l < s.p_w; ++l) table.push_back(s.source(a + k * s.q_h, b + l * s.q_w));
  } else {
    for (int k = 0; k < s.p_h; ++k)
      for (int l = 0; l < s.p_w; ++l)
        for (int a = 0; a < s.q_h; ++a)
          for (int b = 0; b < s.q_w; ++b) table.push_back(s.source(k * s.q_h + a, l * s.q_w + b));
  }
  return table;
}

inline std::vector<int> inverse_table(const PartitionSpec& s, const std::vector<int>& table) {
  std::vector<int> inv(static_cast<std::size_t>(s.height) * s.width, -1);
  for (std::size_t i = 0; i < table.size(); ++i)
    if (table[i] >= 0) inv[table[i]] = static_cast<int>(i);
  return inv;
}

inline int group_count(const PartitionSpec& s, Range r) {
  return r == Range::Long ? s.long_groups() : s.short_blocks();
}
inline int group_rows(const PartitionSpec& s, Range r) { return r == Range::Long ? s.p_h : s.q_h; }
inline int group_cols(const PartitionSpec& s, Range r) { return r == Range::Long ? s.p_w : s.q_w; }

template <typename T>
void check_partition(const Tensor<T>& f, const PartitionSpec& s) {
  if (f.h != s.height || f.w != s.width)
    throw ShapeError("partition built for " + std::to_string(s.height) + "x" +
                     std::to_string(s.width) + ", map is " + f.shape_string());
}

template <typename T>
std::vector<Tensor<T>> rearrange(const Tensor<T>& f, const PartitionSpec& s, Range r) {
  check_partition(f, s);
  const auto table = group_table(s, r);
  const int n = group_count(s, r), rows = group_rows(s, r), cols = group_cols(s, r);
  std::vector<Tensor<T>> groups;
  groups.reserve(n);
  for (int gi = 0; gi < n; ++gi) {
    Tensor<T> g(rows, cols, f.c);
    for (int slot = 0; slot < rows * cols; ++slot) {
      const int src = table[static_cast<std::size_t>(gi) * rows * cols + slot];
      if (src >= 0) std::copy_n(f.data.data() + static_cast<std::size_t>(src) * f.c, f.c,
                                g.data.data() + static_cast<std::size_t>(slot) * f.c);
    }
    groups.push_back(std::move(g));
  }
  return groups;
}

template <typename T>
Tensor<T> merge(const std::vector<Tensor<T>>& groups, const PartitionSpec& s, Range r) {
  const int n = group_count(s, r), rows = group_rows(s, r), cols = group_cols(s, r);
  if (static_cast<int>(groups.size()) != n) throw ShapeError("merge: wrong number of groups");
  const int c = groups.empty() ? 0 : groups.front().c;
  const auto table = group_table(s, r);
  Tensor<T> out(s.height, s.width, c);
  for (int gi = 0; gi < n; ++gi) {
    if (groups[gi].h != rows || groups[gi].w != cols || groups[gi].c != c)
      throw ShapeError("merge: group " + std::to_string(gi) + " has shape " +
                       groups[gi].shape_string());
    for (int slot = 0; slot < rows * cols; ++slot) {
      const int dst = table[static_cast<std::size_t>(gi) * rows * cols + slot];
      if (dst >= 0) std::copy_n(groups[gi].data.data() + static_cast<std::size_t>(slot) * c, c,
                                out.data.data() + static_cast<std::size_t>(dst) * c);
    }
  }
  return out;
}

}  // namespace detail

template <typename T>
std::vector<Tensor<T>> long_range_rearrange(const Tensor<T>& f, const PartitionSpec& s) {
  return detail::rearrange(f, s, Range::Long);
}
template <typename T>
Tensor<T> long_range_merge(const std::vector<Tensor<T>>& groups, const PartitionSpec& s) {
  return detail::merge(groups, s, Range::Long);
}
template <typename T>
std::vector<Tensor<T>> short_range_rearrange(const Tensor<T>& f, const PartitionSpec& s) {
  return detail::rearrange(f, s, Range::Short);
}
template <typename T>
Tensor<T> short_range_merge(const std::vector<Tensor<T>>& groups, const PartitionSpec& s) {
  return detail::merge(groups, s, Range::Short);
}

/// Spatial correlation run independently inside each long-range group or
/// short-range block, merged back to the input layout (padding cropped).
template <typename T>
Var<T> partitioned_correlation(const Var<T>& f, const PartitionSpec& s, Range range,
                               const SpatialCorrelationParams<T>& p) {
  detail::check_partition(f.value(), s);
  auto table = std::make_shared<const std::vector<int>>(detail::group_table(s, range));
  auto inverse = std::make_shared<const std::vector<int>>(detail::inverse_table(s, *table));
  const int n = detail::group_count(s, range);
  const int size = static_cast<int>(table->size()) / n;
  auto grouped = ops::gather_pixels(f, table, n, size);
  auto attended = grouped_spatial_correlation(grouped, p);
  return ops::gather_pixels(attended, inverse, s.height, s.width);
}

template <typename T>
Var<T> long_range_correlation(const Var<T>& f, const PartitionSpec& s,
                              const SpatialCorrelationParams<T>& p) {
  return partitioned_correlation(f, s, Range::Long, p);
}

template <typename T>
Var<T> short_range_correlation(const Var<T>& f, const PartitionSpec& s,
                               const SpatialCorrelationParams<T>& p) {
  return partitioned_correlation(f, s, Range::Short, p);
}

/// Parameters of the efficient global-correlation module: long-range block on the
/// (C_s + C_q)-channel concatenation, channel squeeze alpha to C_q, then a
/// short-range block at C_q channels.
template <typename T>
struct EfficientGcParams {
  int query_channels = 0;
  int support_channels = 0;
  SpatialCorrelationParams<T> long_range;
  SpatialCorrelationParams<T> short_range;
  Var<T> alpha;  // (1, C_s + C_q, C_q)

  static EfficientGcParams random(int query_channels, int support_channels, Rng& rng,
                                  double omega_gain = 1.0) {
    EfficientGcParams p;
    p.query_channels = query_channels;
    p.support_channels = support_channels;
    const int cat = query_channels + support_channels;
    p.long_range = SpatialCorrelationParams<T>::random(cat, rng, omega_gain);
    p.alpha = Var<T>::parameter(
        normal_tensor<T>(1, cat, query_channels, 1.0 / std::sqrt(static_cast<double>(cat)), rng));
    p.short_range = SpatialCorrelationParams<T>::random(query_channels, rng, omega_gain);
    return p;
  }

  std::vector<Var<T>*> tensors() {
    auto v = long_range.tensors();
    v.push_back(&alpha);
    for (auto* t : short_range.tensors()) v.push_back(t);
    return v;
  }
};

/// f_q + ShortRange(alpha(LongRange([f_s; f_q]))).
template <typename T>
Var<T> efficient_gc(const Var<T>& f_q, const Var<T>& f_s, int p_h, int p_w,
                    const EfficientGcParams<T>& p) {
  const Tensor<T>& q = f_q.value();
  const Tensor<T>& s = f_s.value();
  if (q.h != s.h || q.w != s.w)
    throw ShapeError("efficient_gc: query " + q.shape_string() + " vs support " + s.shape_string());
  if (q.c != p.query_channels || s.c != p.support_channels)
    throw ShapeError("efficient_gc: channel counts do not match parameters");
  const auto spec = PartitionSpec::make(q.h, q.w, p_h, p_w);
  auto cat = ops::concat_channels(f_s, f_q);
  auto long_out = long_range_correlation(cat, spec, p.long_range);
  auto squeezed = ops::conv2d(long_out, p.alpha, Var<T>(), 1);
  auto short_out = short_range_correlation(squeezed, spec, p.short_range);
  return ops::add(f_q, short_out);
}

/// Undecomposed reference: f_q + alpha(full spatial correlation of [f_s; f_q]),
/// reusing the long-range parameters. Quadratic in H * W.
template <typename T>
Var<T> naive_gc(const Var<T>& f_q, const Var<T>& f_s, const EfficientGcParams<T>& p) {
  const Tensor<T>& q = f_q.value();
  const Tensor<T>& s = f_s.value();
  if (q.h != s.h || q.w != s.w)
    throw ShapeError("naive_gc: query " + q.shape_string() + " vs support " + s.shape_string());
  auto full = spatial_correlation(ops::concat_channels(f_s, f_q), p.long_range);
  return ops::add(f_q, ops::conv2d(full, p.alpha, Var<T>(), 1));
}

/// Support-to-query spatial squeeze-and-excitation.
template <typename T>
struct SseParams {
  Var<T> weight;  // (1, C_s, 1)
  Var<T> bias;    // (1, 1, 1)

  static SseParams random(int support_channels, Rng& rng) {
    SseParams p;
    p.weight = Var<T>::parameter(normal_tensor<T>(
        1, support_channels, 1, 1.0 / std::sqrt(static_cast<double>(support_channels)), rng));
    p.bias = Var<T>::parameter(Tensor<T>(1, 1, 1));
    return p;
  }

  std::vector<Var<T>*> tensors() { return {&weight, &bias}; }
};

/// f_q scaled pixelwise by sigmoid(1x1 conv of f_s to one channel).
template <typename T>
Var<T> sse_attention(const Var<T>& f_q, const Var<T>& f_s, const SseParams<T>& p) {
  const Tensor<T>& q = f_q.value();
  const Tensor<T>& s = f_s.value();
  if (q.h != s.h || q.w != s.w)
    throw ShapeError("sse_attention: query " + q.shape_string() + " vs support " +
                     s.shape_string());
  auto score = ops::sigmoid(ops::conv2d(f_s, p.weight, p.bias, 1));
  return ops::scale_by_map(f_q, score);
}

// Multiply-add counts. Softmax, residual adds and gathers are not counted.

/// One spatial correlation block over `positions` positions with C channels.
inline std::int64_t spatial_correlation_flops(std::int64_t positions, std::int64_t channels) {
  const std::int64_t reduced = channels / 2;
  return 3 * positions * channels * reduced + 2 * positions * positions * reduced +
         positions * reduced * channels;
}

/// Global correlation on the full H x W concatenated map followed by alpha.
inline std::int64_t naive_gc_flops(int h, int w, int query_channels, int support_channels) {
  const std::int64_t cat = query_channels + support_channels;
  const std::int64_t hw = static_cast<std::int64_t>(h) * w;
  return spatial_correlation_flops(hw, cat) + hw * cat * query_channels;
}

inline std::int64_t efficient_gc_flops(int h, int w, int query_channels, int support_channels,
                                       int p_h, int p_w) {
  const auto s = PartitionSpec::make(h, w, p_h, p_w);
  const std::int64_t cat = query_channels + support_channels;
  const std::int64_t hw = static_cast<std::int64_t>(h) * w;
  return s.long_groups() * spatial_correlation_flops(s.long_group_size(), cat) +
         hw * cat * query_channels +
         s.short_blocks() * spatial_correlation_flops(s.short_block_size(), query_channels);
}

}  // namespace fewseg
