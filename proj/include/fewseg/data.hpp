#pragma once

// Synthetic abdominal phantoms, intensity preprocessing, the on-disk volume
// container and support/query slice matching for volumetric evaluation.

#include "fewseg/config.hpp"
#include "fewseg/core.hpp"
#include "fewseg/io.hpp"
#include "fewseg/parallel.hpp"
#include "fewseg/random.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace fewseg {

enum class PhantomProfile { MRLike, CTLike };

/// Canonical placement of one organ in normalized coordinates: x grows to the
/// image right, y toward posterior (image bottom), z along the slice axis.
struct OrganLayout {
  int class_id = 0;
  double cx = 0.5, cy = 0.5, cz = 0.5;
  double rx = 0.1, ry = 0.1, rz = 0.2;
  double mr_intensity = 0.5;
  double ct_intensity = 0.5;
};

/// Liver on the patient's right (image left), spleen on the left, kidneys
/// posterior and lateral.
inline std::vector<OrganLayout> default_organ_layout() {
  return {
      {organ::kLiver, 0.33, 0.38, 0.40, 0.19, 0.15, 0.32, 0.36, 0.60},
      {organ::kSpleen, 0.73, 0.44, 0.42, 0.09, 0.10, 0.22, 0.58, 0.66},
      {organ::kLeftKidney, 0.69, 0.66, 0.60, 0.065, 0.085, 0.22, 0.74, 0.80},
      {organ::kRightKidney, 0.31, 0.66, 0.64, 0.065, 0.085, 0.22, 0.88, 0.83},
  };
}

struct PhantomSpec {
  int n_volumes = 20;
  int depth = 24;
  int height = 64;
  int width = 64;
  PhantomProfile profile = PhantomProfile::MRLike;
  std::vector<OrganLayout> organs = default_organ_layout();
  double position_jitter = 0.04;  // fraction of the image extent
  double size_jitter = 0.15;      // relative radius jitter
  double deformation = 2.0;       // elastic displacement amplitude, pixels
  double noise = 0.04;            // additive Gaussian std
  std::uint64_t seed = 1;

  void validate() const {
    if (n_volumes < 1 || depth < 1 || height < 8 || width < 8)
      throw ConfigError("phantom: n_volumes/depth must be positive and slices at least 8x8");
    if (organs.empty()) throw ConfigError("phantom: no organs");
    for (const auto& o : organs) {
      if (o.class_id < 1 || o.class_id > 255) throw ConfigError("phantom: organ id out of range");
      if (!(o.rx > 0 && o.ry > 0 && o.rz > 0)) throw ConfigError("phantom: degenerate organ radius");
      if (o.mr_intensity < 0 || o.mr_intensity > 1 || o.ct_intensity < 0 || o.ct_intensity > 1)
        throw ConfigError("phantom: organ intensity outside [0, 1]");
    }
    if (position_jitter < 0 || size_jitter < 0 || size_jitter >= 1 || deformation < 0 || noise < 0)
      throw ConfigError("phantom: jitter, deformation and noise must be non-negative");
  }
};

inline PhantomSpec parse_phantom_spec(const std::string& text) {
  PhantomSpec s;
  for (const auto& [key, v] : parse_key_values(text)) {
    if (key == "n_volumes") s.n_volumes = detail::parse_int<int>(key, v);
    else if (key == "depth") s.depth = detail::parse_int<int>(key, v);
    else if (key == "image_size") {
      auto d = detail::parse_int_list(key, v, 'x');
      if (d.size() != 2) throw ConfigError("image_size must look like HxW");
      s.height = d[0];
      s.width = d[1];
    } else if (key == "profile") {
      if (v == "mr") s.profile = PhantomProfile::MRLike;
      else if (v == "ct") s.profile = PhantomProfile::CTLike;
      else throw ConfigError("profile must be mr or ct");
    } else if (key == "position_jitter") s.position_jitter = detail::parse_double(key, v);
    else if (key == "size_jitter") s.size_jitter = detail::parse_double(key, v);
    else if (key == "deformation") s.deformation = detail::parse_double(key, v);
    else if (key == "noise") s.noise = detail::parse_double(key, v);
    else if (key == "seed") s.seed = detail::parse_int<std::uint64_t>(key, v);
    else throw ConfigError("unknown phantom key '" + key + "'");
  }
  s.validate();
  return s;
}

namespace detail {

struct PlacedEllipsoid {
  int label = 0;  // 0 for unlabeled tissue
  double cx, cy, cz, rx, ry, rz;  // pixels / slices
  double intensity;

  bool contains(double x, double y, double z) const {
    const double dx = (x - cx) / rx, dy = (y - cy) / ry, dz = (z - cz) / rz;
    return dx * dx + dy * dy + dz * dz <= 1.0;
  }
};

// Smooth displacement: a sum of a few low-frequency sinusoids.
struct SmoothField {
  struct Wave {
    double fx, fy, fz, phase, amp;
  };
  std::vector<Wave> waves;

  SmoothField(double amplitude, Rng& rng) {
    std::uniform_real_distribution<double> freq(0.5, 1.5), phase(0.0, 2 * std::numbers::pi),
        unit(-1.0, 1.0);
    for (int i = 0; i < 3; ++i)
      waves.push_back({freq(rng) * unit(rng), freq(rng) * unit(rng), 0.5 * unit(rng), phase(rng),
                       amplitude * unit(rng) / std::sqrt(3.0)});
  }

  double operator()(double u, double v, double t) const {
    double s = 0.0;
    for (const auto& w : waves)
      s += w.amp * std::sin(2 * std::numbers::pi * (w.fx * u + w.fy * v + w.fz * t) + w.phase);
    return s;
  }
};

inline bool try_generate_volume(const PhantomSpec& spec, int index, Rng& rng, Volume& out) {
  const bool mr = spec.profile == PhantomProfile::MRLike;
  const double W = spec.width, H = spec.height, D = spec.depth;
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  const double gx = spec.position_jitter * unit(rng), gy = spec.position_jitter * unit(rng);
  std::vector<PlacedEllipsoid> organs;
  for (const auto& o : spec.organs) {
    const double sx = 1.0 + spec.size_jitter * unit(rng);
    const double sy = 1.0 + spec.size_jitter * unit(rng);
    const double sz = 1.0 + spec.size_jitter * unit(rng);
    const double jx = 0.5 * spec.position_jitter * unit(rng);
    const double jy = 0.5 * spec.position_jitter * unit(rng);
    const double jz = 0.05 * unit(rng);
    const double mean = mr ? o.mr_intensity : o.ct_intensity;
    organs.push_back({o.class_id, (o.cx + gx + jx) * W, (o.cy + gy + jy) * H, (o.cz + jz) * D,
                      o.rx * sx * W, o.ry * sy * H, o.rz * sz * D,
                      std::clamp(mean + 0.015 * gauss(rng), 0.0, 1.0)});
  }
  // Unlabeled structures: body outline, vertebra and a stomach-like distractor.
  const PlacedEllipsoid body{0, (0.5 + gx) * W, (0.52 + gy) * H, 0.5 * D, 0.45 * W, 0.37 * H,
                             10.0 * D, mr ? 0.22 : 0.40};
  const PlacedEllipsoid spine{0, (0.5 + gx) * W, (0.80 + gy) * H, 0.5 * D, 0.06 * W, 0.06 * H,
                              10.0 * D, mr ? 0.10 : 0.97};
  const PlacedEllipsoid stomach{0, (0.57 + gx + 0.02 * unit(rng)) * W, (0.30 + gy) * H, 0.35 * D,
                                0.09 * W, 0.07 * H, 0.25 * D, mr ? 0.47 : 0.50};

  const SmoothField field_x(spec.deformation, rng), field_y(spec.deformation, rng);
  const SmoothField bias(mr ? 0.05 : 0.0, rng);

  out = Volume{};
  out.depth = spec.depth;
  out.height = spec.height;
  out.width = spec.width;
  out.modality = Modality::Synthetic;
  out.id = "phantom_" + std::to_string(index);
  const std::size_t n = static_cast<std::size_t>(spec.depth) * spec.height * spec.width;
  out.voxels.assign(n, 0.0f);
  out.labels.assign(n, 0);

  std::map<int, std::size_t> voxel_count;
  std::size_t overlaps = 0;
  for (int z = 0; z < spec.depth; ++z)
    for (int y = 0; y < spec.height; ++y)
      for (int x = 0; x < spec.width; ++x) {
        const double u = x / W, v = y / H, t = z / D;
        const double px = x + 0.5 + field_x(u, v, t);
        const double py = y + 0.5 + field_y(u, v, t);
        const double pz = z + 0.5;
        double intensity = 0.02;
        if (body.contains(px, py, pz)) intensity = body.intensity;
        if (spine.contains(px, py, pz)) intensity = spine.intensity;
        if (stomach.contains(px, py, pz)) intensity = stomach.intensity;
        int label = 0;
        for (const auto& o : organs)
          if (o.contains(px, py, pz)) {
            if (label != 0) ++overlaps;
            label = o.label;
            intensity = o.intensity;
          }
        const std::size_t idx = out.index(z, y, x);
        out.labels[idx] = static_cast<std::uint8_t>(label);
        if (label) ++voxel_count[label];
        const double value = intensity * (1.0 + bias(u, v, t)) + spec.noise * gauss(rng);
        out.voxels[idx] = static_cast<float>(std::clamp(value, 0.0, 1.0));
      }

  std::size_t smallest = n;
  for (const auto& o : spec.organs) {
    const std::size_t c = voxel_count[o.class_id];
    if (c < 50) return false;
    smallest = std::min(smallest, c);
  }
  // Collision tolerance: overlap below 5% of the smallest organ.
  return overlaps * 20 < smallest;
}

}  // namespace detail

/// Deterministic phantom set; volume i is generated from its own derived seed.
inline std::vector<Volume> generate_phantoms(const PhantomSpec& spec) {
  spec.validate();
  std::vector<Volume> volumes(spec.n_volumes);
  parallel_for(spec.n_volumes, [&](int i) {
    Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(i)));
    constexpr int kMaxAttempts = 32;
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt)
      if (detail::try_generate_volume(spec, i, rng, volumes[i])) return;
    throw std::runtime_error("phantom " + std::to_string(i) + ": organ layout collided in " +
                             std::to_string(kMaxAttempts) + " attempts");
  });
  return volumes;
}

// Preprocessing.

inline constexpr float kCtWindowLow = -125.0f;
inline constexpr float kCtWindowHigh = 275.0f;

inline float clip_hu(float v) { return std::clamp(v, kCtWindowLow, kCtWindowHigh); }

/// Clamp to the [-125, 275] HU window and map it affinely onto [0, 1].
inline std::vector<float> preprocess_ct(const std::vector<float>& raw) {
  std::vector<float> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (!std::isfinite(raw[i])) throw std::invalid_argument("preprocess_ct: non-finite value");
    out[i] = (clip_hu(raw[i]) - kCtWindowLow) / (kCtWindowHigh - kCtWindowLow);
  }
  return out;
}

/// Per-volume min-max normalization to [0, 1]; a constant volume maps to zeros.
inline std::vector<float> preprocess_mr(const std::vector<float>& raw) {
  std::vector<float> out(raw.size(), 0.0f);
  if (raw.empty()) return out;
  for (float v : raw)
    if (!std::isfinite(v)) throw std::invalid_argument("preprocess_mr: non-finite value");
  const auto [lo, hi] = std::minmax_element(raw.begin(), raw.end());
  const double range = static_cast<double>(*hi) - *lo;
  if (range <= 0.0) return out;
  for (std::size_t i = 0; i < raw.size(); ++i)
    out[i] = static_cast<float>(std::clamp((raw[i] - static_cast<double>(*lo)) / range, 0.0, 1.0));
  return out;
}

inline Volume preprocess_ct(Volume v) {
  v.voxels = preprocess_ct(v.voxels);
  return v;
}

inline Volume preprocess_mr(Volume v) {
  v.voxels = preprocess_mr(v.voxels);
  return v;
}

// Container: <dir>/volume.json, image.raw (float32 LE), labels.raw (uint8),
// both slice-major D*H*W.

inline void write_volume(const fs::path& dir, const Volume& v, bool normalized = true) {
  nlohmann::json meta;
  meta["dims"] = {v.depth, v.height, v.width};
  meta["dtype"] = "float32";
  meta["label_dtype"] = "uint8";
  meta["modality"] = to_string(v.modality);
  meta["spacing"] = v.spacing;
  meta["id"] = v.id;
  meta["normalized"] = normalized;
  nlohmann::json names = nlohmann::json::object();
  for (int c : v.classes()) names[std::to_string(c)] = organ::name(c);
  meta["class_names"] = names;
  write_file_atomic(dir / "image.raw", encode_f32_le(v.voxels.data(), v.voxels.size()));
  write_file_atomic(dir / "labels.raw",
                    std::string_view(reinterpret_cast<const char*>(v.labels.data()), v.labels.size()));
  write_file_atomic(dir / "volume.json", meta.dump(2) + "\n");
}

/// Reads a container. Volumes stored with "normalized": false are windowed (CT)
/// or min-max normalized (MR, synthetic) on load.
inline Volume read_volume(const fs::path& dir) {
  const auto meta = nlohmann::json::parse(read_binary_file(dir / "volume.json"));
  Volume v;
  const auto dims = meta.at("dims").get<std::vector<int>>();
  if (dims.size() != 3) throw std::runtime_error(dir.string() + ": dims must have 3 entries");
  if (meta.value("dtype", "float32") != "float32" || meta.value("label_dtype", "uint8") != "uint8")
    throw std::runtime_error(dir.string() + ": unsupported dtype");
  v.depth = dims[0];
  v.height = dims[1];
  v.width = dims[2];
  v.modality = modality_from_string(meta.value("modality", "SYNTHETIC"));
  if (meta.contains("spacing")) v.spacing = meta["spacing"].get<std::array<double, 3>>();
  v.id = meta.value("id", dir.filename().string());
  v.voxels = decode_f32_le(read_binary_file(dir / "image.raw"));
  const std::string labels = read_binary_file(dir / "labels.raw");
  v.labels.assign(labels.begin(), labels.end());
  if (!meta.value("normalized", true))
    v.voxels = v.modality == Modality::CT ? preprocess_ct(v.voxels) : preprocess_mr(v.voxels);
  v.validate();
  return v;
}

inline void write_dataset(const fs::path& dir, const std::vector<Volume>& volumes) {
  for (std::size_t i = 0; i < volumes.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "vol_%03zu", i);
    write_volume(dir / name, volumes[i]);
  }
}

/// Every subdirectory holding a volume.json, in lexicographic order.
inline std::vector<Volume> read_dataset(const fs::path& dir) {
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory() && fs::exists(e.path() / "volume.json")) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw std::runtime_error("no volumes found under '" + dir.string() + "'");
  std::vector<Volume> out;
  for (const auto& d : dirs) out.push_back(read_volume(d));
  return out;
}

// Slice matching.

/// Support slice per depth section and the section of every query slice.
struct SliceMatchPlan {
  int n_sections = 0;
  std::vector<int> support_slices;       // section -> support slice index
  std::map<int, int> query_sections;     // query slice index -> section

  int support_for(int query_slice) const { return support_slices.at(query_sections.at(query_slice)); }
};

namespace detail {
inline std::vector<int> slices_with_class(const Volume& v, int class_id) {
  std::vector<int> out;
  for (int z = 0; z < v.depth; ++z)
    if (v.slice_has_class(z, class_id)) out.push_back(z);
  return out;
}

// [begin, end) of section k when n slices are split into `sections` parts.
inline std::pair<int, int> section_bounds(int n, int sections, int k) {
  return {static_cast<int>(static_cast<long>(k) * n / sections),
          static_cast<int>(static_cast<long>(k + 1) * n / sections)};
}
}  // namespace detail

/// Splits the class-bearing slices of both volumes into equal depth sections
/// (at most one per support slice) and pairs each query slice with the middle
/// support slice of its section.
inline SliceMatchPlan build_slice_match(const Volume& support, const Volume& query, int class_id,
                                        int n_sections) {
  if (n_sections < 1) throw ConfigError("n_sections must be positive");
  const auto sup = detail::slices_with_class(support, class_id);
  const auto qry = detail::slices_with_class(query, class_id);
  if (sup.empty())
    throw std::invalid_argument("class " + std::to_string(class_id) + " absent from support volume '" +
                                support.id + "'");
  if (qry.empty())
    throw std::invalid_argument("class " + std::to_string(class_id) + " absent from query volume '" +
                                query.id + "'");
  SliceMatchPlan plan;
  plan.n_sections = std::min<int>(n_sections, static_cast<int>(sup.size()));
  const int ns = static_cast<int>(sup.size()), nq = static_cast<int>(qry.size());
  for (int k = 0; k < plan.n_sections; ++k) {
    const auto [b, e] = detail::section_bounds(ns, plan.n_sections, k);
    plan.support_slices.push_back(sup[b + (e - b - 1) / 2]);
    const auto [qb, qe] = detail::section_bounds(nq, plan.n_sections, k);
    for (int l = qb; l < qe; ++l) plan.query_sections[qry[l]] = k;
  }
  return plan;
}

}  // namespace fewseg
