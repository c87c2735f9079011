#pragma once

#include "fewseg/config.hpp"
#include "fewseg/core.hpp"
#include "fewseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

namespace fewseg {

inline constexpr double kDiceSmooth = 1e-5;
inline constexpr double kBceClamp = 1e-7;

namespace detail {
template <typename T>
void check_prediction(const Tensor<T>& p, const BinaryMask& y, const char* what) {
  if (p.c != 1 || p.h != y.height || p.w != y.width)
    throw ShapeError(std::string(what) + ": prediction " + p.shape_string() + " vs mask " +
                     std::to_string(y.height) + "x" + std::to_string(y.width));
}
}  // namespace detail

/// 1 - (2 sum(P Y) + eps) / (sum P + sum Y + eps) on probabilities P.
template <typename T>
Var<T> dice_loss(const Var<T>& prob, const BinaryMask& target, double eps = kDiceSmooth) {
  detail::check_prediction(prob.value(), target, "dice_loss");
  const auto& p = prob.value().data;
  double inter = 0.0, sum_p = 0.0, sum_y = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += static_cast<double>(p[i]) * target.mask[i];
    sum_p += p[i];
    sum_y += target.mask[i];
  }
  const double num = 2.0 * inter + eps, den = sum_p + sum_y + eps;
  Tensor<T> out(1, 1, 1, static_cast<T>(1.0 - num / den));
  if (!fewseg::detail::tracks<T>({&prob})) return Var<T>::constant(std::move(out));
  auto mask = std::make_shared<std::vector<std::uint8_t>>(target.mask);
  return fewseg::detail::make_node<T>(std::move(out), {&prob}, [mask, num, den](Node<T>& self) {
    if (auto* dp = fewseg::detail::parent_grad(self, 0)) {
      const double g = self.grad[0];
      for (std::size_t i = 0; i < dp->size(); ++i)
        (*dp)[i] += static_cast<T>(-g * (2.0 * (*mask)[i] * den - num) / (den * den));
    }
  });
}

/// Two-term binary cross-entropy averaged over pixels; P clamped to
/// [1e-7, 1 - 1e-7].
template <typename T>
Var<T> bce_loss(const Var<T>& prob, const BinaryMask& target) {
  detail::check_prediction(prob.value(), target, "bce_loss");
  const auto& p = prob.value().data;
  const double n = static_cast<double>(p.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(static_cast<double>(p[i]), kBceClamp, 1.0 - kBceClamp);
    acc += target.mask[i] ? std::log(q) : std::log(1.0 - q);
  }
  Tensor<T> out(1, 1, 1, static_cast<T>(-acc / n));
  if (!fewseg::detail::tracks<T>({&prob})) return Var<T>::constant(std::move(out));
  auto mask = std::make_shared<std::vector<std::uint8_t>>(target.mask);
  return fewseg::detail::make_node<T>(std::move(out), {&prob}, [mask, n](Node<T>& self) {
    if (auto* dp = fewseg::detail::parent_grad(self, 0)) {
      const auto& pv = self.parents[0]->value.data;
      const double g = self.grad[0];
      for (std::size_t i = 0; i < pv.size(); ++i) {
        const double q = pv[i];
        if (q < kBceClamp || q > 1.0 - kBceClamp) continue;
        const double d = (*mask)[i] ? -1.0 / q : 1.0 / (1.0 - q);
        (*dp)[i] += static_cast<T>(g * d / n);
      }
    }
  });
}

/// Mean over foreground classes of dice + bce.
template <typename T>
Var<T> combined_loss(const std::vector<Var<T>>& probs, const std::vector<BinaryMask>& targets) {
  if (probs.empty()) throw std::invalid_argument("combined_loss: no foreground classes");
  if (probs.size() != targets.size())
    throw ShapeError("combined_loss: prediction and target counts differ");
  std::vector<Var<T>> terms;
  for (std::size_t j = 0; j < probs.size(); ++j) {
    terms.push_back(dice_loss(probs[j], targets[j]));
    terms.push_back(bce_loss(probs[j], targets[j]));
  }
  return ops::scale(ops::sum_scalars(terms), static_cast<T>(1.0 / probs.size()));
}

/// Spatial mean per channel, L2-normalized; a zero mean vector stays zero.
/// Output shape (1, 1, C).
template <typename T>
Var<T> pool_backend_features(const Var<T>& feature) {
  const Tensor<T>& f = feature.value();
  const int c = f.c, hw = f.pixels();
  std::vector<double> mean(c, 0.0);
  for (int p = 0; p < hw; ++p)
    for (int ch = 0; ch < c; ++ch) mean[ch] += f[static_cast<std::size_t>(p) * c + ch];
  double norm = 0.0;
  for (double& m : mean) {
    m /= hw;
    norm += m * m;
  }
  norm = std::sqrt(norm);
  Tensor<T> out(1, 1, c);
  if (norm > 0.0)
    for (int ch = 0; ch < c; ++ch) out[ch] = static_cast<T>(mean[ch] / norm);
  if (!fewseg::detail::tracks<T>({&feature})) return Var<T>::constant(std::move(out));
  return fewseg::detail::make_node<T>(std::move(out), {&feature}, [norm, c, hw](Node<T>& self) {
    auto* df = fewseg::detail::parent_grad(self, 0);
    if (!df || norm == 0.0) return;
    double dot = 0.0;
    for (int ch = 0; ch < c; ++ch) dot += static_cast<double>(self.value[ch]) * self.grad[ch];
    for (int ch = 0; ch < c; ++ch) {
      const double dm = (self.grad[ch] - self.value[ch] * dot) / norm / hw;
      for (int p = 0; p < hw; ++p) (*df)[static_cast<std::size_t>(p) * c + ch] += static_cast<T>(dm);
    }
  });
}

/// Embedding vector of a backend feature map under the configured mode.
template <typename T>
Var<T> embed_backend_features(const Var<T>& feature, EmbeddingMode mode) {
  if (mode == EmbeddingMode::Pooled) return pool_backend_features(feature);
  return ops::reshape(feature, 1, 1, static_cast<int>(feature.value().size()));
}

/// Per-class query / support embeddings over the same class set.
template <typename T>
struct EmbeddingSet {
  std::map<int, Var<T>> query;
  std::map<int, Var<T>> support;
};

/// Sum over classes i of max(|q_i - s_i| - sum_{j != i} |q_i - s_j|, 0).
/// The hinge takes subgradient 0 at its kink.
template <typename T>
Var<T> de_loss(const EmbeddingSet<T>& e) {
  if (e.query.empty()) throw std::invalid_argument("de_loss: no classes");
  if (e.query.size() != e.support.size())
    throw std::invalid_argument("de_loss: query and support class sets differ");
  std::vector<int> ids;
  std::vector<const Var<T>*> inputs;
  for (const auto& [id, q] : e.query) {
    if (!e.support.count(id))
      throw std::invalid_argument("de_loss: class " + std::to_string(id) + " missing from support");
    ids.push_back(id);
  }
  const std::size_t k = ids.size();
  const std::size_t dim = e.query.at(ids[0]).value().size();
  for (int id : ids) {
    if (e.query.at(id).value().size() != dim || e.support.at(id).value().size() != dim)
      throw ShapeError("de_loss: embedding lengths differ");
  }

  auto diff_norm = [&](std::size_t i, std::size_t j) {
    const auto& q = e.query.at(ids[i]).value().data;
    const auto& s = e.support.at(ids[j]).value().data;
    double acc = 0.0;
    for (std::size_t t = 0; t < dim; ++t) {
      const double d = static_cast<double>(q[t]) - s[t];
      acc += d * d;
    }
    return std::sqrt(acc);
  };
  std::vector<double> dist(k * k);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) dist[i * k + j] = diff_norm(i, j);
  std::vector<char> active(k, 0);
  double loss = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    double inter = 0.0;
    for (std::size_t j = 0; j < k; ++j)
      if (j != i) inter += dist[i * k + j];
    const double d = dist[i * k + i] - inter;
    if (d > 0.0) {
      active[i] = 1;
      loss += d;
    }
  }

  // Parent order: q_0..q_{k-1}, s_0..s_{k-1}.
  std::vector<Var<T>> parents;
  for (int id : ids) parents.push_back(e.query.at(id));
  for (int id : ids) parents.push_back(e.support.at(id));
  bool track = false;
  for (const auto& p : parents) track = track || fewseg::detail::tracks<T>({&p});
  Tensor<T> out(1, 1, 1, static_cast<T>(loss));
  if (!track) return Var<T>::constant(std::move(out));

  auto n = std::make_shared<Node<T>>();
  n->value = std::move(out);
  n->requires_grad = true;
  for (const auto& p : parents) n->parents.push_back(p.node());
  n->backward = [k, dim, dist, active](Node<T>& self) {
    const double g = self.grad[0];
    auto add_unit = [&](std::size_t i, std::size_t j, double sign) {
      // d|q_i - s_j| / dq_i = (q_i - s_j) / |q_i - s_j|; the negative for s_j.
      const double nrm = dist[i * k + j];
      if (nrm == 0.0) return;
      const auto& q = self.parents[i]->value.data;
      const auto& s = self.parents[k + j]->value.data;
      Tensor<T>* dq = fewseg::detail::parent_grad(self, i);
      Tensor<T>* ds = fewseg::detail::parent_grad(self, k + j);
      for (std::size_t t = 0; t < dim; ++t) {
        const double u = (static_cast<double>(q[t]) - s[t]) / nrm * sign * g;
        if (dq) (*dq)[t] += static_cast<T>(u);
        if (ds) (*ds)[t] -= static_cast<T>(u);
      }
    };
    for (std::size_t i = 0; i < k; ++i) {
      if (!active[i]) continue;
      add_unit(i, i, 1.0);
      for (std::size_t j = 0; j < k; ++j)
        if (j != i) add_unit(i, j, -1.0);
    }
  };
  return Var<T>(std::move(n));
}

/// combined + weight * de.
template <typename T>
Var<T> overall_loss(const Var<T>& combined, const Var<T>& de, double weight) {
  if (weight < 0.0) throw std::invalid_argument("overall_loss: negative weight");
  if (weight == 0.0) return combined;
  return ops::add(combined, ops::scale(de, static_cast<T>(weight)));
}

}  // namespace fewseg
