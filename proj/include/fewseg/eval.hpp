#pragma once

#include "fewseg/data.hpp"
#include "fewseg/episodic.hpp"
#include "fewseg/parallel.hpp"

#include <cstdio>
#include <functional>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

namespace fewseg {

/// 2|X n Y| / (|X| + |Y|); two empty masks agree perfectly (1.0).
inline double dice_coefficient(const BinaryMask& prediction, const BinaryMask& truth) {
  if (prediction.height != truth.height || prediction.width != truth.width)
    throw ShapeError("dice_coefficient: mask shapes differ");
  std::size_t inter = 0, a = 0, b = 0;
  for (std::size_t i = 0; i < truth.mask.size(); ++i) {
    inter += prediction.mask[i] & truth.mask[i];
    a += prediction.mask[i];
    b += truth.mask[i];
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

/// Segments `query` for the class of `support_mask`. Implementations must not
/// read query.multilabel (only test stubs do).
using Segmenter =
    std::function<BinaryMask(const SliceSample& support, const BinaryMask& support_mask,
                             const SliceSample& query)>;

template <typename T>
Segmenter model_segmenter(ModelParams<T> params, double threshold) {
  return [params = std::move(params), threshold](const SliceSample& support,
                                                 const BinaryMask& support_mask,
                                                 const SliceSample& query) {
    NoGradGuard no_grad;
    auto out = forward(params, support.image_tensor<T>(), support_mask, query.image_tensor<T>());
    return predict_mask(out.logits.value(), threshold, support_mask.class_id);
  };
}

/// Test stub: returns the query's ground truth for the requested class.
inline Segmenter ground_truth_segmenter() {
  return [](const SliceSample&, const BinaryMask& support_mask, const SliceSample& query) {
    return class_mask(query, support_mask.class_id);
  };
}

/// Intersection and size sums accumulated over the slices of one volume.
struct OverlapCounts {
  std::size_t intersection = 0;
  std::size_t predicted = 0;
  std::size_t truth = 0;

  void add(const BinaryMask& prediction, const BinaryMask& gt) {
    if (prediction.height != gt.height || prediction.width != gt.width)
      throw ShapeError("overlap: mask shapes differ");
    for (std::size_t i = 0; i < gt.mask.size(); ++i) {
      intersection += prediction.mask[i] & gt.mask[i];
      predicted += prediction.mask[i];
      truth += gt.mask[i];
    }
  }

  double dice() const {
    if (predicted + truth == 0) return 1.0;
    return 2.0 * static_cast<double>(intersection) / static_cast<double>(predicted + truth);
  }
};

/// Volume-level Dice over every query slice of the plan, each segmented with its
/// matched support slice.
inline double evaluate_volume(const Segmenter& model, const Volume& support, const Volume& query,
                              int class_id, const SliceMatchPlan& plan) {
  if (plan.query_sections.empty()) throw std::invalid_argument("evaluate_volume: empty plan");
  OverlapCounts counts;
  for (const auto& [qz, section] : plan.query_sections) {
    if (section < 0 || section >= static_cast<int>(plan.support_slices.size()))
      throw std::invalid_argument("evaluate_volume: plan section out of range");
    const SliceSample s = support.slice(plan.support_slices[section]);
    const BinaryMask s_mask = class_mask(s, class_id);
    if (s_mask.count() == 0)
      throw std::invalid_argument("evaluate_volume: plan support slice lacks class " +
                                  std::to_string(class_id));
    const SliceSample q = query.slice(qz);
    const BinaryMask pred = model(s, s_mask, q);
    counts.add(pred, class_mask(q, class_id));
  }
  return counts.dice();
}

struct MetricsEntry {
  int fold = 0;
  int organ = 0;
  double dc = 0.0;  // percent
};

struct MetricsReport {
  std::string arm;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::vector<MetricsEntry> entries;   // per (fold, organ)
  std::map<int, double> organ_dc;      // fold-averaged, percent
  double mean_dc = 0.0;                // arithmetic mean of organ_dc
  std::map<int, std::size_t> held_out_label_reads;  // organ -> reads during training

  void summarize() {
    std::map<int, std::pair<double, int>> acc;
    for (const auto& e : entries) {
      acc[e.organ].first += e.dc;
      ++acc[e.organ].second;
    }
    organ_dc.clear();
    for (const auto& [organ_id, sum] : acc) organ_dc[organ_id] = sum.first / sum.second;
    double total = 0.0;
    for (const auto& [o, dc] : organ_dc) total += dc;
    mean_dc = organ_dc.empty() ? 0.0 : total / organ_dc.size();
  }

  std::string to_csv() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << "# arm=" << arm << " seed=" << seed << " config=" << config_hash << "\n";
    os << "fold,organ,dc\n";
    for (const auto& e : entries) os << e.fold << "," << organ::name(e.organ) << "," << e.dc << "\n";
    for (const auto& [o, dc] : organ_dc) os << "all," << organ::name(o) << "," << dc << "\n";
    os << "all,Mean," << mean_dc << "\n";
    return os.str();
  }
};

inline std::string config_hash(const RunConfig& cfg) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : serialize(cfg)) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Aligned text table, one row per report, columns Liver, Spleen, Left Kidney,
/// Right Kidney, Mean.
inline std::string metrics_table(const std::vector<MetricsReport>& reports) {
  std::ostringstream os;
  os << std::left << std::setw(12) << "Arm";
  for (int o : organ::kAll) os << std::right << std::setw(14) << organ::name(o);
  os << std::setw(10) << "Mean" << "\n";
  os << std::fixed << std::setprecision(2);
  for (const auto& r : reports) {
    os << std::left << std::setw(12) << r.arm;
    for (int o : organ::kAll) {
      auto it = r.organ_dc.find(o);
      if (it == r.organ_dc.end())
        os << std::right << std::setw(14) << "-";
      else
        os << std::right << std::setw(14) << it->second;
    }
    os << std::setw(10) << r.mean_dc << "\n";
  }
  return os.str();
}

/// Produces a segmenter from the training view of one (organ, fold) run.
using SegmenterFactory = std::function<Segmenter(const AnnotatedDataset& train_view,
                                                 const ClassSets& classes, const RunConfig& cfg)>;

inline SegmenterFactory trained_model_factory() {
  return [](const AnnotatedDataset& view, const ClassSets& classes, const RunConfig& cfg) {
    auto state = train<float>(view, cfg, classes);
    return model_segmenter<float>(std::move(state.params), cfg.threshold);
  };
}

struct CrossValidationOptions {
  int folds = 5;
  std::vector<int> only_folds;               // empty = all folds
  std::vector<int> held_out_organs{organ::kAll.begin(), organ::kAll.end()};
  int n_sections = 3;
  SegmenterFactory factory = trained_model_factory();
  int workers = worker_limit();
};

/// Leave-one-organ-out cross validation. For each held-out organ and fold, the
/// model trains on the other organs' annotations of the training volumes; the
/// first test volume is the support and the remaining test volumes are queries.
inline MetricsReport cross_validate(const std::vector<Volume>& volumes, const RunConfig& cfg,
                                    const std::string& arm,
                                    const CrossValidationOptions& opt = {}) {
  const int n = static_cast<int>(volumes.size());
  if (opt.folds < 2) throw std::invalid_argument("cross_validate: need at least 2 folds");
  if (n < opt.folds * 2)
    throw std::invalid_argument("cross_validate: " + std::to_string(n) + " volumes cannot form " +
                                std::to_string(opt.folds) + " folds with a support and a query each");
  std::vector<int> folds = opt.only_folds;
  if (folds.empty())
    for (int f = 0; f < opt.folds; ++f) folds.push_back(f);
  for (int f : folds)
    if (f < 0 || f >= opt.folds) throw std::invalid_argument("cross_validate: fold out of range");

  struct Job {
    int organ, fold;
  };
  std::vector<Job> jobs;
  for (int o : opt.held_out_organs)
    for (int f : folds) jobs.push_back({o, f});

  MetricsReport report;
  report.arm = arm;
  report.seed = cfg.seed;
  report.config_hash = config_hash(cfg);
  std::vector<MetricsEntry> entries(jobs.size());
  std::vector<std::size_t> reads(jobs.size());

  parallel_for(
      static_cast<int>(jobs.size()),
      [&](int j) {
        const auto [held_out, fold] = jobs[j];
        const int begin = fold * n / opt.folds, end = (fold + 1) * n / opt.folds;
        std::vector<int> train_idx;
        for (int v = 0; v < n; ++v)
          if (v < begin || v >= end) train_idx.push_back(v);
        ClassSets classes;
        for (int o : organ::kAll)
          if (o != held_out) classes.train_classes.insert(o);
        classes.test_classes = {held_out};

        auto log = std::make_shared<LabelAccessLog>();
        AnnotatedDataset view(volumes, train_idx, classes.train_classes, log);
        RunConfig run_cfg = cfg;
        run_cfg.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(held_out * 1000 + fold));
        Segmenter model = opt.factory(view, classes, run_cfg);
        reads[j] = log->reads_of(held_out);

        const Volume& support = volumes[begin];
        double total = 0.0;
        int queries = 0;
        for (int q = begin + 1; q < end; ++q) {
          const auto plan = build_slice_match(support, volumes[q], held_out, opt.n_sections);
          total += evaluate_volume(model, support, volumes[q], held_out, plan);
          ++queries;
        }
        entries[j] = {fold, held_out, 100.0 * total / queries};
      },
      opt.workers);

  report.entries = std::move(entries);
  for (std::size_t j = 0; j < jobs.size(); ++j) report.held_out_label_reads[jobs[j].organ] += reads[j];
  report.summarize();
  return report;
}

}  // namespace fewseg
