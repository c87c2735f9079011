// fewseg command-line front end: generate, train, eval, bench, oracle-check,
// overlay.

#include "fewseg/fewseg.hpp"
#include "fewseg/testing/oracle_suite.hpp"

#include <CLI11.hpp>
#include <png.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace fewseg;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitDiverged = 3;

struct CommonOptions {
  std::string config;
  std::string out;
  std::string data;
  std::string arm = "gcn-de";
  std::optional<std::uint64_t> seed;
  std::optional<int> fold;
  int sections = 3;
};

RunConfig resolve_config(const CommonOptions& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  apply_arm(cfg, o.arm);
  if (o.seed) cfg.seed = *o.seed;
  cfg.validate();
  return cfg;
}

void require_image_size(const std::vector<Volume>& vols, const RunConfig& cfg) {
  for (const auto& v : vols)
    if (v.height != cfg.image_height || v.width != cfg.image_width)
      throw ConfigError("volume '" + v.id + "' is " + std::to_string(v.height) + "x" +
                        std::to_string(v.width) + " but image_size is " +
                        std::to_string(cfg.image_height) + "x" + std::to_string(cfg.image_width));
}

std::pair<int, int> fold_range(int n, int folds, int fold) {
  if (fold < 0 || fold >= folds)
    throw ConfigError("--fold must be in [0, " + std::to_string(folds) + ")");
  return {fold * n / folds, (fold + 1) * n / folds};
}

// generate

int cmd_generate(const std::string& spec_path, const CommonOptions& o) {
  PhantomSpec spec = spec_path.empty() ? PhantomSpec{} : parse_phantom_spec(read_text_file(spec_path));
  if (o.seed) spec.seed = *o.seed;
  spec.validate();
  const auto vols = generate_phantoms(spec);
  write_dataset(o.out, vols);
  std::cout << "wrote " << vols.size() << " volumes (" << spec.depth << "x" << spec.height << "x"
            << spec.width << ", " << (spec.profile == PhantomProfile::MRLike ? "mr" : "ct")
            << ") to " << o.out << "\n";
  return 0;
}

// train

int cmd_train(const CommonOptions& o, int held_out) {
  const RunConfig cfg = resolve_config(o);
  const auto vols = read_dataset(o.data);
  require_image_size(vols, cfg);
  const int n = static_cast<int>(vols.size());
  std::vector<int> train_idx;
  if (o.fold) {
    const auto [b, e] = fold_range(n, 5, *o.fold);
    for (int v = 0; v < n; ++v)
      if (v < b || v >= e) train_idx.push_back(v);
  } else {
    for (int v = 0; v < n; ++v) train_idx.push_back(v);
  }
  ClassSets classes;
  for (int c : organ::kAll)
    if (c != held_out) classes.train_classes.insert(c);
  classes.test_classes = {held_out};
  if (auto err = validate_split(classes)) throw ConfigError("invalid split: " + *err);

  auto log = std::make_shared<LabelAccessLog>();
  AnnotatedDataset view(vols, train_idx, classes.train_classes, log);
  const fs::path out(o.out);
  write_file_atomic(out / "config.txt", serialize(cfg));

  TrainHooks<float> hooks;
  hooks.on_epoch_end = [&](const TrainState<float>& s) {
    const auto& h = s.history;
    double sum = 0.0;
    const std::size_t k = std::min<std::size_t>(h.size(), cfg.episodes_per_epoch * cfg.iterations_per_episode);
    for (std::size_t i = h.size() - k; i < h.size(); ++i) sum += h[i].overall;
    std::cout << "epoch " << s.epoch + 1 << "/" << cfg.epochs << "  mean L_overall "
              << std::setprecision(5) << sum / std::max<std::size_t>(k, 1) << std::endl;
    write_file_atomic(out / "loss.csv", loss_history_csv(h));
    if (cfg.checkpoint_every > 0 && (s.epoch + 1) % cfg.checkpoint_every == 0) {
      char name[64];
      std::snprintf(name, sizeof name, "epoch_%03d.ckpt", s.epoch + 1);
      save_checkpoint(out / "checkpoints" / name, s.params);
    }
  };
  TrainState<float> state;
  try {
    state = train<float>(view, cfg, classes, hooks);
  } catch (const TrainingDiverged& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return kExitDiverged;
  }
  write_file_atomic(out / "loss.csv", loss_history_csv(state.history));
  save_checkpoint(out / "model.ckpt", state.params);
  std::cout << "held-out " << organ::name(held_out) << ": " << log->reads_of(held_out)
            << " annotation reads during training\n"
            << "wrote " << (out / "model.ckpt").string() << " and " << (out / "loss.csv").string()
            << "\n";
  return log->reads_of(held_out) == 0 ? 0 : kExitFailure;
}

// eval

int cmd_eval(const CommonOptions& o, bool stub) {
  const RunConfig cfg = resolve_config(o);
  const auto vols = read_dataset(o.data);
  require_image_size(vols, cfg);
  CrossValidationOptions opt;
  opt.n_sections = o.sections;
  if (o.fold) opt.only_folds = {*o.fold};
  if (stub)
    opt.factory = [](const AnnotatedDataset&, const ClassSets&, const RunConfig&) {
      return ground_truth_segmenter();
    };
  const auto report = cross_validate(vols, cfg, stub ? "stub" : o.arm, opt);
  const std::string table = metrics_table({report});
  std::cout << table;
  for (const auto& [organ_id, reads] : report.held_out_label_reads)
    if (reads) std::cerr << "held-out " << organ::name(organ_id) << " read " << reads << " times\n";
  if (!o.out.empty()) {
    const std::string base = "metrics_" + report.arm + "_seed" + std::to_string(cfg.seed);
    write_file_atomic(fs::path(o.out) / (base + ".csv"), report.to_csv());
    write_file_atomic(fs::path(o.out) / (base + ".txt"), table);
  }
  for (const auto& [organ_id, reads] : report.held_out_label_reads)
    if (reads) return kExitFailure;
  return 0;
}

// bench

template <typename Fn>
double time_ms(Fn&& fn, int repeats) {
  fn();  // warm-up
  double best = 1e300;
  for (int r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    best = std::min(best, std::chrono::duration<double, std::milli>(
                              std::chrono::steady_clock::now() - t0).count());
  }
  return best;
}

int cmd_bench(const std::vector<int>& sizes, int channels, int naive_limit, int repeats,
              const std::string& out) {
  std::ostringstream os;
  os << "size,channels,partition,naive_flops,decomposed_flops,flop_ratio,naive_ms,decomposed_ms\n";
  std::cout << std::left << std::setw(8) << "size" << std::setw(6) << "P" << std::right
            << std::setw(16) << "naive FLOPs" << std::setw(16) << "decomp FLOPs" << std::setw(10)
            << "ratio" << std::setw(12) << "naive ms" << std::setw(12) << "decomp ms" << "\n";
  Rng rng(1);
  for (int h : sizes) {
    const int p = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(h))));
    const auto nf = naive_gc_flops(h, h, channels, channels);
    const auto df = efficient_gc_flops(h, h, channels, channels, p, p);
    auto params = EfficientGcParams<float>::random(channels, channels, rng);
    auto fq = Var<float>::constant(normal_tensor<float>(h, h, channels, 1.0, rng));
    auto fs_ = Var<float>::constant(normal_tensor<float>(h, h, channels, 1.0, rng));
    NoGradGuard ng;
    const double dms = time_ms([&] { efficient_gc(fq, fs_, p, p, params); }, repeats);
    std::optional<double> nms;
    if (h <= naive_limit) nms = time_ms([&] { naive_gc(fq, fs_, params); }, repeats);
    std::ostringstream naive_col;
    if (nms) naive_col << std::fixed << std::setprecision(2) << *nms;
    else naive_col << "skipped";
    std::cout << std::left << std::setw(8) << (std::to_string(h) + "x" + std::to_string(h))
              << std::setw(6) << p << std::right << std::setw(16) << nf << std::setw(16) << df
              << std::setw(10) << std::fixed << std::setprecision(4)
              << static_cast<double>(df) / nf << std::setw(12) << naive_col.str() << std::setw(12)
              << std::setprecision(2) << dms << "\n";
    os << h << "," << channels << "," << p << "," << nf << "," << df << ","
       << static_cast<double>(df) / nf << "," << (nms ? std::to_string(*nms) : "") << "," << dms
       << "\n";
  }
  if (!out.empty()) write_file_atomic(fs::path(out) / "bench.csv", os.str());
  return 0;
}

// oracle-check

int cmd_oracle_check(std::uint64_t seed) {
  const auto results = testing::run_oracle_suite(seed);
  bool ok = true;
  for (const auto& r : results) {
    std::cout << (r.passed ? "PASS  " : "FAIL  ") << std::left << std::setw(30) << r.name << " "
              << r.detail << "  (" << std::fixed << std::setprecision(2) << r.seconds << " s)\n";
    ok = ok && r.passed;
  }
  std::cout << (ok ? "all oracles passed\n" : "oracle failures\n");
  return ok ? 0 : kExitFailure;
}

// overlay

void write_png(const fs::path& path, int w, int h, const std::vector<std::uint8_t>& rgb) {
  const fs::path tmp = fs::path(path.string() + ".tmp");
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  FILE* fp = std::fopen(tmp.c_str(), "wb");
  if (!fp) throw std::runtime_error("cannot write '" + tmp.string() + "'");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw std::runtime_error("libpng failed writing '" + path.string() + "'");
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < h; ++y)
    png_write_row(png, const_cast<png_bytep>(rgb.data() + static_cast<std::size_t>(y) * w * 3));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
  fs::rename(tmp, path);
}

bool on_contour(const BinaryMask& m, int y, int x) {
  if (!m.mask[y * m.width + x]) return false;
  const int dy[] = {-1, 1, 0, 0}, dx[] = {0, 0, -1, 1};
  for (int k = 0; k < 4; ++k) {
    const int ny = y + dy[k], nx = x + dx[k];
    if (ny < 0 || ny >= m.height || nx < 0 || nx >= m.width || !m.mask[ny * m.width + nx]) return true;
  }
  return false;
}

// Grayscale slice, upscaled, with the truth contour in green and the
// prediction contour in red (yellow where they coincide).
std::vector<std::uint8_t> render_overlay(const SliceSample& q, const BinaryMask& pred,
                                         const BinaryMask& truth, int scale) {
  const int w = q.width * scale, h = q.height * scale;
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(w) * h * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int sy = y / scale, sx = x / scale;
      const auto g = static_cast<std::uint8_t>(std::clamp(q.image[sy * q.width + sx], 0.0f, 1.0f) * 255.0f);
      std::uint8_t* px = &rgb[(static_cast<std::size_t>(y) * w + x) * 3];
      px[0] = px[1] = px[2] = g;
      const bool t = on_contour(truth, sy, sx), p = on_contour(pred, sy, sx);
      if (t || p) {
        px[0] = p ? 255 : 0;
        px[1] = t ? 255 : 0;
        px[2] = 0;
      }
    }
  return rgb;
}

int cmd_overlay(const CommonOptions& o, const std::string& checkpoint, int organ_id, int support_vol,
                int query_vol, int scale, bool stub) {
  const auto vols = read_dataset(o.data);
  if (support_vol < 0 || support_vol >= static_cast<int>(vols.size()) || query_vol < 0 ||
      query_vol >= static_cast<int>(vols.size()))
    throw ConfigError("volume index out of range");
  Segmenter model;
  double threshold = 0.5;
  if (!o.config.empty()) threshold = load_run_config(o.config).threshold;
  if (stub) model = ground_truth_segmenter();
  else if (!checkpoint.empty()) model = model_segmenter<float>(load_checkpoint<float>(checkpoint), threshold);
  else throw ConfigError("overlay needs --checkpoint or --stub");
  const Volume& sv = vols[support_vol];
  const Volume& qv = vols[query_vol];
  const auto plan = build_slice_match(sv, qv, organ_id, o.sections);
  int written = 0;
  for (const auto& [qz, section] : plan.query_sections) {
    const SliceSample s = sv.slice(plan.support_slices[section]);
    const SliceSample q = qv.slice(qz);
    const BinaryMask pred = model(s, class_mask(s, organ_id), q);
    const BinaryMask truth = class_mask(q, organ_id);
    char name[96];
    std::snprintf(name, sizeof name, "overlay_%s_z%03d.png", qv.id.c_str(), qz);
    write_png(fs::path(o.out) / name, q.width * scale, q.height * scale,
              render_overlay(q, pred, truth, scale));
    ++written;
  }
  std::cout << "wrote " << written << " overlays for " << organ::name(organ_id) << " to " << o.out
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fewseg: few-shot organ segmentation with global correlation modules"};
  app.require_subcommand(1);
  CommonOptions o;

  auto add_seed = [&](CLI::App* c) {
    c->add_option_function<std::uint64_t>("--seed", [&](const std::uint64_t& v) { o.seed = v; },
                                          "Random seed override");
  };
  auto add_fold = [&](CLI::App* c) {
    c->add_option_function<int>("--fold", [&](const int& v) { o.fold = v; }, "Fold index in [0, 5)");
  };

  std::string spec_path;
  auto* gen = app.add_subcommand("generate", "Write a synthetic phantom dataset");
  gen->add_option("--spec", spec_path, "Phantom spec file (key = value)")->check(CLI::ExistingFile);
  gen->add_option("--out", o.out, "Output directory")->required();
  add_seed(gen);

  int held_out = organ::kSpleen;
  auto* tr = app.add_subcommand("train", "Train one model with one organ held out");
  tr->add_option("--data", o.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  tr->add_option("--out", o.out, "Output directory")->required();
  tr->add_option("--config", o.config, "Run config file")->check(CLI::ExistingFile);
  tr->add_option("--arm", o.arm, "baseline | gcn | gcn-de");
  tr->add_option("--held-out", held_out, "Organ id kept unseen during training (1-4)")
      ->check(CLI::Range(1, 4));
  add_seed(tr);
  add_fold(tr);

  bool stub = false;
  auto* ev = app.add_subcommand("eval", "Leave-one-organ-out cross validation");
  ev->add_option("--data", o.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--out", o.out, "Directory for metrics files");
  ev->add_option("--config", o.config, "Run config file")->check(CLI::ExistingFile);
  ev->add_option("--arm", o.arm, "baseline | gcn | gcn-de");
  ev->add_option("--sections", o.sections, "Slice-matching sections")->check(CLI::PositiveNumber);
  ev->add_flag("--stub", stub, "Use a ground-truth echo model instead of training");
  add_seed(ev);
  add_fold(ev);

  std::vector<int> sizes{16, 32, 64, 128};
  int channels = 16, naive_limit = 64, repeats = 3;
  auto* be = app.add_subcommand("bench", "Naive vs decomposed global correlation cost");
  be->add_option("--sizes", sizes, "Square feature sizes");
  be->add_option("--channels", channels, "Channels of each input map")->check(CLI::PositiveNumber);
  be->add_option("--naive-limit", naive_limit, "Largest size timed with the naive module");
  be->add_option("--repeats", repeats, "Timed repetitions (best is reported)")->check(CLI::PositiveNumber);
  be->add_option("--out", o.out, "Directory for bench.csv");

  std::uint64_t oracle_seed = 1;
  auto* oc = app.add_subcommand("oracle-check", "Run every oracle-backed verification check");
  oc->add_option("--seed", oracle_seed, "Seed for the random cases");

  std::string checkpoint;
  int organ_id = organ::kSpleen, support_vol = 0, query_vol = 1, scale = 4;
  auto* ov = app.add_subcommand("overlay", "PNG overlays of predicted (red) and true (green) contours");
  ov->add_option("--data", o.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  ov->add_option("--out", o.out, "Output directory")->required();
  ov->add_option("--checkpoint", checkpoint, "Model checkpoint")->check(CLI::ExistingFile);
  ov->add_option("--config", o.config, "Run config (for the threshold)")->check(CLI::ExistingFile);
  ov->add_option("--organ", organ_id, "Organ id (1-4)")->check(CLI::Range(1, 4));
  ov->add_option("--support", support_vol, "Support volume index");
  ov->add_option("--query", query_vol, "Query volume index");
  ov->add_option("--sections", o.sections, "Slice-matching sections")->check(CLI::PositiveNumber);
  ov->add_option("--scale", scale, "Pixel upscaling factor")->check(CLI::Range(1, 16));
  ov->add_flag("--stub", stub, "Use the ground truth as the prediction");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return cmd_generate(spec_path, o);
    if (*tr) return cmd_train(o, held_out);
    if (*ev) return cmd_eval(o, stub);
    if (*be) return cmd_bench(sizes, channels, naive_limit, repeats, o.out);
    if (*oc) return cmd_oracle_check(oracle_seed);
    if (*ov) return cmd_overlay(o, checkpoint, organ_id, support_vol, query_vol, scale, stub);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}
