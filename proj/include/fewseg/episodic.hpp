#pragma once

// Episode sampling under a class-visibility guard, and the SGD training loop
// over combined segmentation loss plus discriminative embedding loss.

#include "fewseg/config.hpp"
#include "fewseg/core.hpp"
#include "fewseg/losses.hpp"
#include "fewseg/network.hpp"
#include "fewseg/random.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fewseg {

/// Records every class-specific annotation read made through an AnnotatedDataset.
class LabelAccessLog {
 public:
  void record(int class_id) {
    std::lock_guard<std::mutex> lock(mutex_);
    ++reads_[class_id];
  }
  std::size_t reads_of(int class_id) const {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = reads_.find(class_id);
    return it == reads_.end() ? 0 : it->second;
  }
  std::map<int, std::size_t> snapshot() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return reads_;
  }

 private:
  mutable std::mutex mutex_;
  std::map<int, std::size_t> reads_;
};

struct SliceRef {
  int volume = 0;  // index into the underlying volume list
  int slice = 0;
  bool operator==(const SliceRef&) const = default;
  auto operator<=>(const SliceRef&) const = default;
};

/// A subset of volumes whose annotations are visible only for `visible` classes.
/// Requests for any other class throw; every permitted read is logged.
class AnnotatedDataset {
 public:
  AnnotatedDataset(const std::vector<Volume>& volumes, std::vector<int> volume_indices,
                   std::set<int> visible, std::shared_ptr<LabelAccessLog> log = nullptr)
      : volumes_(&volumes),
        indices_(std::move(volume_indices)),
        visible_(std::move(visible)),
        log_(log ? std::move(log) : std::make_shared<LabelAccessLog>()) {
    for (int v : indices_) {
      if (v < 0 || v >= static_cast<int>(volumes.size()))
        throw std::out_of_range("AnnotatedDataset: volume index out of range");
      const Volume& vol = volumes[v];
      for (int z = 0; z < vol.depth; ++z) {
        SliceRef ref{v, z};
        std::set<int> present;
        for (int c : visible_) {
          log_->record(c);
          if (vol.slice_has_class(z, c)) present.insert(c);
        }
        slices_.push_back(ref);
        present_.emplace(ref, std::move(present));
      }
    }
  }

  const std::vector<SliceRef>& slices() const { return slices_; }
  const std::set<int>& visible_classes() const { return visible_; }
  const LabelAccessLog& access_log() const { return *log_; }
  bool empty() const { return slices_.empty(); }

  /// Visible foreground classes present in the slice.
  const std::set<int>& classes_of(const SliceRef& ref) const { return present_.at(ref); }

  BinaryMask mask(const SliceRef& ref, int class_id) const {
    if (!visible_.count(class_id))
      throw std::logic_error("annotation of class " + std::to_string(class_id) +
                             " is hidden from this dataset view");
    log_->record(class_id);
    return class_mask(volume(ref).slice(ref.slice), class_id);
  }

  /// The slice with every hidden class painted as background.
  SliceSample sample(const SliceRef& ref) const {
    SliceSample raw = volume(ref).slice(ref.slice);
    std::vector<BinaryMask> masks;
    for (int c : classes_of(ref)) masks.push_back(mask(ref, c));
    raw.multilabel = reconstruct_labels(masks, raw.height, raw.width);
    return raw;
  }

 private:
  const Volume& volume(const SliceRef& ref) const { return (*volumes_)[ref.volume]; }

  const std::vector<Volume>* volumes_;
  std::vector<int> indices_;
  std::set<int> visible_;
  std::shared_ptr<LabelAccessLog> log_;
  std::vector<SliceRef> slices_;
  std::map<SliceRef, std::set<int>> present_;
};

struct Episode {
  SliceRef support_ref;
  SliceRef query_ref;
  SliceSample support;
  SliceSample query;
  std::set<int> class_set;
  std::vector<BinaryMask> support_masks;  // ordered like class_set
  std::vector<BinaryMask> query_masks;
};

class SamplingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Support slice drawn uniformly among slices presenting at least one training
/// class; query drawn uniformly among the other slices presenting exactly the
/// same training classes. Slices without training foreground are never drawn.
inline Episode sample_episode(const AnnotatedDataset& data, const std::set<int>& train_classes,
                              Rng& rng, int max_attempts = 64) {
  if (data.empty()) throw SamplingError("sample_episode: empty dataset");
  if (train_classes.empty()) throw SamplingError("sample_episode: no training classes");
  auto restricted = [&](const SliceRef& r) {
    std::set<int> s;
    for (int c : data.classes_of(r))
      if (train_classes.count(c)) s.insert(c);
    return s;
  };
  std::vector<SliceRef> candidates;
  std::map<std::set<int>, std::vector<SliceRef>> by_signature;
  for (const auto& r : data.slices()) {
    auto sig = restricted(r);
    if (sig.empty()) continue;
    candidates.push_back(r);
    by_signature[sig].push_back(r);
  }
  if (candidates.empty()) throw SamplingError("sample_episode: no slice presents a training class");

  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
    const SliceRef support = candidates[pick(rng)];
    const auto sig = restricted(support);
    const auto& pool = by_signature[sig];
    if (pool.size() < 2) continue;
    std::uniform_int_distribution<std::size_t> pick_q(0, pool.size() - 2);
    std::size_t qi = pick_q(rng);
    if (pool[qi] == support) qi = pool.size() - 1;  // skip the support itself
    const SliceRef query = pool[qi];

    Episode e;
    e.support_ref = support;
    e.query_ref = query;
    e.class_set = sig;
    e.support = data.sample(support);
    e.query = data.sample(query);
    for (int c : sig) {
      e.support_masks.push_back(data.mask(support, c));
      e.query_masks.push_back(data.mask(query, c));
    }
    return e;
  }
  throw SamplingError("sample_episode: no query slice matched the sampled class set after " +
                      std::to_string(max_attempts) + " attempts");
}

template <typename T>
struct EpisodeLoss {
  Var<T> combined;
  Var<T> de;
  Var<T> overall;
};

/// One paired forward per class of the episode, reused by both loss terms.
template <typename T>
EpisodeLoss<T> episode_loss(const ModelParams<T>& params, const Episode& e, const RunConfig& cfg) {
  const Tensor<T> support_image = e.support.image_tensor<T>();
  const Tensor<T> query_image = e.query.image_tensor<T>();
  std::vector<Var<T>> probs;
  EmbeddingSet<T> embeddings;
  std::size_t i = 0;
  for (int c : e.class_set) {
    auto out = forward(params, support_image, e.support_masks[i], query_image);
    probs.push_back(ops::sigmoid(out.logits));
    embeddings.query[c] = embed_backend_features(out.backend_query, cfg.embedding);
    embeddings.support[c] = embed_backend_features(out.backend_support, cfg.embedding);
    ++i;
  }
  EpisodeLoss<T> l;
  l.combined = combined_loss(probs, e.query_masks);
  l.de = de_loss(embeddings);
  l.overall = overall_loss(l.combined, l.de, cfg.de_loss_weight);
  return l;
}

struct LossRecord {
  std::size_t iteration = 0;
  double combined = 0.0;
  double de = 0.0;
  double overall = 0.0;
};

inline std::string loss_history_csv(const std::vector<LossRecord>& history) {
  std::ostringstream os;
  os.precision(17);
  os << "iteration,L_comb,L_de,L_overall\n";
  for (const auto& r : history)
    os << r.iteration << "," << r.combined << "," << r.de << "," << r.overall << "\n";
  return os.str();
}

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
struct TrainState {
  ModelParams<T> params;
  std::vector<Tensor<T>> velocity;  // empty unless momentum > 0
  int epoch = 0;
  std::size_t episode = 0;
  std::size_t iteration = 0;
  Rng rng;
  std::vector<LossRecord> history;
};

/// p <- p - lr * g (or the momentum form v <- mu v + g, p <- p - lr v).
/// Gradients are cleared afterwards.
template <typename T>
void sgd_step(TrainState<T>& state, double learning_rate, double momentum) {
  auto named = state.params.named();
  if (momentum > 0.0 && state.velocity.size() != named.size()) {
    state.velocity.clear();
    for (auto& [name, v] : named)
      state.velocity.emplace_back(v->value().h, v->value().w, v->value().c);
  }
  for (std::size_t i = 0; i < named.size(); ++i) {
    Var<T>& v = *named[i].second;
    if (!v.has_grad()) continue;
    Tensor<T>& w = v.mutable_value();
    const Tensor<T>& g = v.grad();
    if (momentum > 0.0) {
      Tensor<T>& vel = state.velocity[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        vel[j] = static_cast<T>(momentum) * vel[j] + g[j];
        w[j] -= static_cast<T>(learning_rate) * vel[j];
      }
    } else {
      for (std::size_t j = 0; j < w.size(); ++j) w[j] -= static_cast<T>(learning_rate) * g[j];
    }
    v.zero_grad();
  }
}

template <typename T>
struct TrainHooks {
  std::function<void(const TrainState<T>&)> on_epoch_end;
  std::function<void(const Episode&)> on_episode;
  std::size_t max_iterations = 0;  // 0 = run the full schedule
};

/// epochs x episodes_per_epoch x iterations_per_episode SGD steps on
/// L_comb + weight * L_de. Only the training classes are visible to the sampler.
template <typename T>
TrainState<T> train(const AnnotatedDataset& data, const RunConfig& cfg, const ClassSets& classes,
                    const TrainHooks<T>& hooks = {}) {
  cfg.validate();
  if (auto err = validate_split(classes)) throw std::invalid_argument("invalid class split: " + *err);
  for (int c : classes.test_classes)
    if (data.visible_classes().count(c))
      throw std::invalid_argument("test class " + std::to_string(c) +
                                  " is visible to the training sampler");

  TrainState<T> state{ModelParams<T>::random(NetworkSpec::from(cfg), cfg.seed), {}, 0, 0, 0,
                      Rng(derive_seed(cfg.seed, 0xE915)), {}};
  for (state.epoch = 0; state.epoch < cfg.epochs; ++state.epoch) {
    for (int ep = 0; ep < cfg.episodes_per_epoch; ++ep, ++state.episode) {
      const Episode e = sample_episode(data, classes.train_classes, state.rng);
      for (int c : e.class_set)
        if (!classes.train_classes.count(c))
          throw std::logic_error("sampler produced non-training class " + std::to_string(c));
      if (hooks.on_episode) hooks.on_episode(e);
      for (int it = 0; it < cfg.iterations_per_episode; ++it) {
        auto loss = episode_loss(state.params, e, cfg);
        const LossRecord rec{state.iteration, static_cast<double>(loss.combined.item()),
                             static_cast<double>(loss.de.item()),
                             static_cast<double>(loss.overall.item())};
        if (!std::isfinite(rec.overall) || !std::isfinite(rec.combined) || !std::isfinite(rec.de)) {
          std::ostringstream os;
          os << "non-finite loss at iteration " << rec.iteration << " (epoch " << state.epoch
             << ", episode " << state.episode << "): L_comb=" << rec.combined
             << " L_de=" << rec.de << " L_overall=" << rec.overall << "; support "
             << e.support.source_volume << "#" << e.support.slice_index << ", query "
             << e.query.source_volume << "#" << e.query.slice_index;
          throw TrainingDiverged(os.str());
        }
        backward(loss.overall);
        sgd_step(state, cfg.learning_rate, cfg.momentum);
        state.history.push_back(rec);
        ++state.iteration;
        if (hooks.max_iterations && state.iteration >= hooks.max_iterations) return state;
      }
    }
    if (hooks.on_epoch_end) hooks.on_epoch_end(state);
  }
  return state;
}

}  // namespace fewseg
