#pragma once

#include "fewseg/tensor.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace fewseg {

enum class Modality { MR, CT, Synthetic };

inline std::string to_string(Modality m) {
  switch (m) {
    case Modality::MR: return "MR";
    case Modality::CT: return "CT";
    case Modality::Synthetic: return "SYNTHETIC";
  }
  return "SYNTHETIC";
}

inline Modality modality_from_string(const std::string& s) {
  if (s == "MR") return Modality::MR;
  if (s == "CT") return Modality::CT;
  if (s == "SYNTHETIC") return Modality::Synthetic;
  throw ConfigError("unknown modality '" + s + "'");
}

/// Fixed organ ids shared by every volume. 0 is background.
namespace organ {
inline constexpr int kLiver = 1;
inline constexpr int kSpleen = 2;
inline constexpr int kLeftKidney = 3;
inline constexpr int kRightKidney = 4;
inline constexpr std::array<int, 4> kAll{kLiver, kSpleen, kLeftKidney, kRightKidney};

inline std::string name(int id) {
  switch (id) {
    case kLiver: return "Liver";
    case kSpleen: return "Spleen";
    case kLeftKidney: return "Left Kidney";
    case kRightKidney: return "Right Kidney";
    default: return "class " + std::to_string(id);
  }
}
}  // namespace organ

/// One 2D slice with its multi-class annotation.
struct SliceSample {
  int height = 0;
  int width = 0;
  std::vector<float> image;             // H*W, values in [0, 1]
  std::vector<std::uint8_t> multilabel;  // H*W class ids
  std::string source_volume;
  int slice_index = 0;

  std::set<int> classes() const {
    std::set<int> out;
    for (auto v : multilabel)
      if (v != 0) out.insert(v);
    return out;
  }

  /// The image as an H x W x 1 tensor.
  template <typename T>
  Tensor<T> image_tensor() const {
    Tensor<T> t(height, width, 1);
    for (std::size_t i = 0; i < image.size(); ++i) t.data[i] = static_cast<T>(image[i]);
    return t;
  }
};

/// A strictly {0, 1} mask for one foreground class.
struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> mask;
  int class_id = 1;

  BinaryMask() = default;
  BinaryMask(int h, int w, int cls) : height(h), width(w), mask(static_cast<std::size_t>(h) * w, 0), class_id(cls) {}

  std::size_t count() const {
    std::size_t n = 0;
    for (auto v : mask) n += v;
    return n;
  }

  void validate() const {
    if (mask.size() != static_cast<std::size_t>(height) * width)
      throw ShapeError("binary mask storage does not match its shape");
    for (auto v : mask)
      if (v > 1) throw ShapeError("binary mask contains a non-binary value");
  }

  template <typename T>
  Tensor<T> tensor() const {
    Tensor<T> t(height, width, 1);
    for (std::size_t i = 0; i < mask.size(); ++i) t.data[i] = static_cast<T>(mask[i]);
    return t;
  }
};

/// Disjoint training and testing foreground classes.
struct ClassSets {
  std::set<int> train_classes;
  std::set<int> test_classes;
};

/// Indicator mask of class_id in the slice (possibly all zero).
inline BinaryMask class_mask(const SliceSample& s, int class_id) {
  BinaryMask m(s.height, s.width, class_id);
  for (std::size_t i = 0; i < s.multilabel.size(); ++i) m.mask[i] = s.multilabel[i] == class_id;
  return m;
}

/// One mask per foreground class present, ordered by class id. An all-background
/// slice yields an empty list.
inline std::vector<BinaryMask> binarize_labels(const SliceSample& s) {
  if (s.multilabel.size() != static_cast<std::size_t>(s.height) * s.width)
    throw ShapeError("slice label storage does not match its shape");
  std::vector<BinaryMask> out;
  for (int cls : s.classes()) out.push_back(class_mask(s, cls));
  return out;
}

/// Inverse of binarize_labels: paints each mask's class id over background.
inline std::vector<std::uint8_t> reconstruct_labels(const std::vector<BinaryMask>& masks, int h,
                                                    int w) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(h) * w, 0);
  for (const auto& m : masks) {
    if (m.height != h || m.width != w) throw ShapeError("reconstruct_labels: mask shape mismatch");
    for (std::size_t i = 0; i < out.size(); ++i)
      if (m.mask[i]) {
        if (out[i] != 0) throw ShapeError("reconstruct_labels: overlapping masks");
        out[i] = static_cast<std::uint8_t>(m.class_id);
      }
  }
  return out;
}

/// Empty optional when the split is usable; otherwise a message naming the problem.
inline std::optional<std::string> validate_split(const ClassSets& classes) {
  if (classes.train_classes.empty()) return "empty train class set";
  if (classes.test_classes.empty()) return "empty test class set";
  for (int c : classes.train_classes)
    if (c <= 0) return "class " + std::to_string(c) + " is not a foreground class";
  for (int c : classes.test_classes)
    if (c <= 0) return "class " + std::to_string(c) + " is not a foreground class";
  std::string overlap;
  for (int c : classes.train_classes)
    if (classes.test_classes.count(c)) overlap += (overlap.empty() ? "" : ", ") + std::to_string(c);
  if (!overlap.empty()) {
    const bool single = overlap.find(',') == std::string::npos;
    return (single ? "class " : "classes ") + overlap + " in both splits";
  }
  return std::nullopt;
}

/// 3D scan with aligned labels. Voxels are slice-major (z, y, x).
struct Volume {
  int depth = 0;
  int height = 0;
  int width = 0;
  std::vector<float> voxels;
  std::vector<std::uint8_t> labels;
  Modality modality = Modality::Synthetic;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::string id;

  std::size_t slice_size() const { return static_cast<std::size_t>(height) * width; }
  std::size_t index(int z, int y, int x) const {
    return static_cast<std::size_t>(z) * slice_size() + static_cast<std::size_t>(y) * width + x;
  }

  SliceSample slice(int z) const {
    if (z < 0 || z >= depth) throw ShapeError("slice index out of range");
    SliceSample s;
    s.height = height;
    s.width = width;
    const auto begin = static_cast<std::ptrdiff_t>(z * slice_size());
    const auto end = begin + static_cast<std::ptrdiff_t>(slice_size());
    s.image.assign(voxels.begin() + begin, voxels.begin() + end);
    s.multilabel.assign(labels.begin() + begin, labels.begin() + end);
    s.source_volume = id;
    s.slice_index = z;
    return s;
  }

  bool slice_has_class(int z, int class_id) const {
    const std::size_t off = z * slice_size();
    for (std::size_t i = 0; i < slice_size(); ++i)
      if (labels[off + i] == class_id) return true;
    return false;
  }

  std::set<int> classes() const {
    std::set<int> out;
    for (auto v : labels)
      if (v) out.insert(v);
    return out;
  }

  /// Throws when storage, shape or intensity range invariants are broken.
  void validate() const {
    const std::size_t n = static_cast<std::size_t>(depth) * height * width;
    if (depth < 1 || height < 1 || width < 1) throw ShapeError("volume has an empty dimension");
    if (voxels.size() != n || labels.size() != n)
      throw ShapeError("volume '" + id + "': voxel/label storage does not match dimensions");
    for (float v : voxels)
      if (!(v >= 0.0f && v <= 1.0f))
        throw ShapeError("volume '" + id + "': intensity outside [0, 1]");
  }
};

}  // namespace fewseg
