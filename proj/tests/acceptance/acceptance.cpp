// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include "fewseg/fewseg.hpp"
#include "fewseg/testing/oracle_suite.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

using namespace fewseg;
using namespace fewseg::testing;

namespace {

struct Verdict {
  bool passed = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

// Folds several oracle results into one verdict and enforces a time budget.
Verdict combine(const std::vector<OracleResult>& parts, double seconds, double budget) {
  Verdict v{seconds < budget, ""};
  for (const auto& r : parts) {
    v.passed = v.passed && r.passed;
    v.detail += r.name + ": " + r.detail + "; ";
  }
  v.detail += "time " + fmt(seconds, 3) + " s (budget " + fmt(budget) + " s)";
  return v;
}

Verdict c1_oracle_equivalence() {
  Rng rng(101);
  const auto t0 = std::chrono::steady_clock::now();
  auto r = check_correlation_oracle(rng);
  r.name = "loop oracle, all maps up to 5x5x4";
  return combine({r}, seconds_since(t0), 10.0);
}

Verdict c2_gradients() {
  Rng rng(202);
  const auto t0 = std::chrono::steady_clock::now();
  auto a = check_correlation_gradients(rng);
  a.name = "correlation/GC/sSE";
  auto b = check_loss_gradients(rng);
  b.name = "dice/bce/DE";
  auto c = check_end_to_end_gradient(rng);
  c.name = "end-to-end 1% sample";
  return combine({a, b, c}, seconds_since(t0), 300.0);
}

Verdict c3_reachability() {
  Rng rng(303);
  const auto t0 = std::chrono::steady_clock::now();
  auto r = check_reachability(rng);
  r.name = "4x4, P=2";
  return combine({r}, seconds_since(t0), 60.0);
}

Verdict c4_row_stochastic() {
  Rng rng(404);
  const auto r = check_row_stochastic(rng, 100);
  return {r.passed, "100 inputs: " + r.detail};
}

Verdict c5_efficiency() {
  auto flops = check_flop_dominance();
  flops.name = "FLOPs H in {32..128}";

  const int h = 64, c = 16, p = 8, repeats = 3;
  Rng rng(505);
  auto params = EfficientGcParams<float>::random(c, c, rng);
  auto fq = Var<float>::constant(normal_tensor<float>(h, h, c, 1.0, rng));
  auto fs = Var<float>::constant(normal_tensor<float>(h, h, c, 1.0, rng));
  NoGradGuard no_grad;
  auto best_ms = [&](const std::function<void()>& fn) {
    fn();
    double best = 1e300;
    for (int r = 0; r < repeats; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      fn();
      best = std::min(best, 1e3 * seconds_since(t0));
    }
    return best;
  };
  const double naive_ms = best_ms([&] { naive_gc(fq, fs, params); });
  const double fast_ms = best_ms([&] { efficient_gc(fq, fs, p, p, params); });
  const double speedup = naive_ms / fast_ms;
  Verdict v{flops.passed && speedup >= 2.0, ""};
  v.detail = flops.name + ": " + flops.detail + "; wall 64x64x" + std::to_string(c) + ": naive " +
             fmt(naive_ms) + " ms, decomposed " + fmt(fast_ms) + " ms, speedup " + fmt(speedup, 3) +
             "x (need >= 2)";
  return v;
}

Verdict c6_dice() {
  Rng rng(606);
  auto oracle = check_dice_oracle(rng, 1000);
  oracle.name = "1000 pairs";
  bool hand = true;
  BinaryMask empty(4, 4, 1), full(4, 4, 1);
  std::fill(full.mask.begin(), full.mask.end(), 1);
  hand = hand && dice_coefficient(empty, empty) == 1.0;
  hand = hand && dice_coefficient(full, full) == 1.0;
  BinaryMask left(4, 4, 1), right(4, 4, 1);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) (x < 2 ? left : right).mask[y * 4 + x] = 1;
  hand = hand && dice_coefficient(left, right) == 0.0;
  // |A| = 3, |B| = 3, overlap 2: 4/6
  BinaryMask a(1, 4, 1), b(1, 4, 1);
  a.mask = {1, 1, 1, 0};
  b.mask = {0, 1, 1, 1};
  hand = hand && std::abs(dice_coefficient(a, b) - 4.0 / 6.0) < 1e-15;
  Verdict v{oracle.passed && hand, oracle.name + ": " + oracle.detail +
                                       "; hand cases 1.0/1.0/0.0/4-6ths " + (hand ? "ok" : "wrong")};
  return v;
}

struct ExperimentResult {
  std::map<std::string, double> mean;  // arm -> seed-averaged mean DC
  std::map<std::string, std::vector<double>> per_seed;
  std::size_t held_out_reads = 0;
  double seconds = 0.0;
};

// Three arms, three seeds. Seed k trains and tests on fold k.
ExperimentResult run_direction_experiment() {
  ExperimentResult out;
  PhantomSpec spec;
  spec.n_volumes = 20;
  spec.height = spec.width = 64;
  spec.profile = PhantomProfile::MRLike;
  spec.seed = 1;
  const auto volumes = generate_phantoms(spec);
  const auto t0 = std::chrono::steady_clock::now();
  for (const std::string arm : {"baseline", "gcn", "gcn-de"}) {
    double sum = 0.0;
    for (int k = 0; k < 3; ++k) {
      RunConfig cfg;
      apply_arm(cfg, arm);
      cfg.seed = static_cast<std::uint64_t>(k + 1);
      cfg.momentum = 0.9;
      CrossValidationOptions opt;
      opt.only_folds = {k};
      const auto report = cross_validate(volumes, cfg, arm, opt);
      for (const auto& [o, reads] : report.held_out_label_reads) out.held_out_reads += reads;
      out.per_seed[arm].push_back(report.mean_dc);
      sum += report.mean_dc;
      std::cout << "  [7] " << std::left << std::setw(9) << arm << " seed " << k + 1 << " fold "
                << k << ": mean DC " << std::fixed << std::setprecision(2) << report.mean_dc;
      for (const auto& [o, dc] : report.organ_dc) std::cout << "  " << organ::name(o) << " " << dc;
      std::cout << std::defaultfloat << std::endl;
    }
    out.mean[arm] = sum / 3.0;
  }
  out.seconds = seconds_since(t0);
  return out;
}

Verdict c7_direction(const ExperimentResult& r) {
  const double b = r.mean.at("baseline"), g = r.mean.at("gcn"), d = r.mean.at("gcn-de");
  Verdict v{g - b >= 2.0 && d - g >= 2.0 && r.seconds < 2700.0, ""};
  v.detail = "mean DC baseline " + fmt(b) + ", gcn " + fmt(g) + ", gcn-de " + fmt(d) +
             "; gaps " + fmt(g - b) + " and " + fmt(d - g) + " (need >= 2 each); time " +
             fmt(r.seconds / 60.0, 3) + " min (budget 45)";
  return v;
}

Verdict c8_protocol(const ExperimentResult& r) {
  return {r.held_out_reads == 0,
          std::to_string(r.held_out_reads) + " held-out annotation reads across 36 training runs"};
}

Verdict c9_determinism() {
  PhantomSpec spec;
  spec.n_volumes = 4;
  spec.seed = 42;
  const auto a = generate_phantoms(spec);
  const auto b = generate_phantoms(spec);
  bool same_data = a.size() == b.size();
  for (std::size_t i = 0; same_data && i < a.size(); ++i)
    same_data = a[i].voxels == b[i].voxels && a[i].labels == b[i].labels;

  RunConfig cfg;
  cfg.seed = 42;
  ClassSets classes{{1, 3, 4}, {2}};
  AnnotatedDataset view(a, {0, 1, 2, 3}, classes.train_classes);
  TrainHooks<float> hooks;
  hooks.max_iterations = 10;
  const auto x = train<float>(view, cfg, classes, hooks);
  const auto y = train<float>(view, cfg, classes, hooks);
  double worst = x.history.size() == 10 && y.history.size() == 10 ? 0.0 : 1e300;
  for (std::size_t i = 0; i < std::min(x.history.size(), y.history.size()); ++i)
    worst = std::max({worst, std::abs(x.history[i].overall - y.history[i].overall),
                      std::abs(x.history[i].combined - y.history[i].combined),
                      std::abs(x.history[i].de - y.history[i].de)});
  return {same_data && worst <= 1e-12,
          std::string("phantoms ") + (same_data ? "identical" : "differ") +
              "; max loss divergence over 10 iterations " + fmt(worst) + " (bound 1e-12)"};
}

Verdict c10_degenerate() {
  PhantomSpec spec;
  spec.n_volumes = 4;
  spec.seed = 9;
  const auto vols = generate_phantoms(spec);
  const std::set<int> train_classes{1, 2, 3};
  AnnotatedDataset view(vols, {0, 1, 2, 3}, train_classes);
  std::size_t empty_slices = 0;
  for (const auto& r : view.slices()) empty_slices += view.classes_of(r).empty();
  Rng rng(10);
  bool sampler_ok = empty_slices > 0;
  for (int t = 0; t < 2000 && sampler_ok; ++t) {
    const auto e = sample_episode(view, train_classes, rng);
    sampler_ok = !view.classes_of(e.support_ref).empty() && !view.classes_of(e.query_ref).empty();
    for (std::size_t i = 0; i < e.class_set.size(); ++i)
      sampler_ok = sampler_ok && e.support_masks[i].count() > 0 && e.query_masks[i].count() > 0;
  }

  const BinaryMask none(8, 8, 1);
  const bool empty_dc = dice_coefficient(none, none) == 1.0;

  bool constant_ok = true;
  for (float level : {0.0f, 1.0f, 371.5f}) {
    const auto out = preprocess_mr(std::vector<float>(64, level));
    for (float v : out) constant_ok = constant_ok && v == 0.0f;
  }
  return {sampler_ok && empty_dc && constant_ok,
          "2000 episodes avoided " + std::to_string(empty_slices) + " empty slices: " +
              (sampler_ok ? "yes" : "no") + "; empty/empty DC " + (empty_dc ? "1.0" : "wrong") +
              "; constant MR -> zeros " + (constant_ok ? "yes" : "no")};
}

}  // namespace

int main() {
  std::cout << std::unitbuf;
  int failures = 0;
  auto report = [&](int id, const std::string& title, const Verdict& v) {
    std::cout << (v.passed ? "PASS" : "FAIL") << "  criterion " << id << " (" << title
              << "): " << v.detail << "\n";
    failures += !v.passed;
  };
  auto guarded = [](const std::function<Verdict()>& fn) {
    try {
      return fn();
    } catch (const std::exception& e) {
      return Verdict{false, std::string("threw: ") + e.what()};
    }
  };

  report(1, "oracle equivalence", guarded(c1_oracle_equivalence));
  report(2, "gradient suite", guarded(c2_gradients));
  report(3, "reachability", guarded(c3_reachability));
  report(4, "row-stochasticity", guarded(c4_row_stochastic));
  report(5, "efficiency", guarded(c5_efficiency));
  report(6, "metric oracle", guarded(c6_dice));

  ExperimentResult exp;
  std::string exp_error;
  try {
    exp = run_direction_experiment();
  } catch (const std::exception& e) {
    exp_error = e.what();
  }
  if (exp_error.empty()) {
    report(7, "direction check", c7_direction(exp));
    report(8, "protocol integrity", c8_protocol(exp));
  } else {
    report(7, "direction check", {false, "threw: " + exp_error});
    report(8, "protocol integrity", {false, "experiment did not complete"});
  }

  report(9, "determinism", guarded(c9_determinism));
  report(10, "degenerate handling", guarded(c10_degenerate));
  std::cout << (failures ? std::to_string(failures) + " criteria failed\n" : "all criteria passed\n");
  return failures ? 1 : 0;
}
