#pragma once

#include "fewseg/tensor.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace fewseg {

enum class EmbeddingMode { Pooled, Raw };

struct RunConfig {
  int epochs = 10;
  int episodes_per_epoch = 25;
  int iterations_per_episode = 1;
  double learning_rate = 1e-2;
  double momentum = 0.0;
  std::uint64_t seed = 1;
  int image_height = 64;
  int image_width = 64;
  std::vector<int> channel_widths{16, 32, 64, 128};
  int partition_h = 4;
  int partition_w = 4;
  double de_loss_weight = 1.0;
  std::set<int> gc_scales{1, 2};
  double threshold = 0.5;
  EmbeddingMode embedding = EmbeddingMode::Pooled;
  int checkpoint_every = 0;  // epochs; 0 disables periodic checkpoints

  int n_scales() const { return static_cast<int>(channel_widths.size()); }

  /// Throws ConfigError on the first violated invariant.
  void validate() const {
    auto positive = [](int v, const char* name) {
      if (v <= 0) throw ConfigError(std::string(name) + " must be positive");
    };
    positive(epochs, "epochs");
    positive(episodes_per_epoch, "episodes_per_epoch");
    positive(iterations_per_episode, "iterations_per_episode");
    positive(image_height, "image_size");
    positive(image_width, "image_size");
    positive(partition_h, "partition_factors");
    positive(partition_w, "partition_factors");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
    if (!(de_loss_weight >= 0.0)) throw ConfigError("de_loss_weight must be non-negative");
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must be in (0, 1)");
    if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be non-negative");
    if (channel_widths.empty()) throw ConfigError("channel_widths is empty");
    for (std::size_t i = 0; i < channel_widths.size(); ++i) {
      if (channel_widths[i] <= 0 || channel_widths[i] % 2)
        throw ConfigError("channel widths must be positive and even");
      if (i > 0 && channel_widths[i] <= channel_widths[i - 1])
        throw ConfigError("channel widths must increase toward the bottleneck");
    }
    for (int s : gc_scales)
      if (s < 0 || s >= n_scales())
        throw ConfigError("gc scale " + std::to_string(s) + " outside [0, " +
                          std::to_string(n_scales()) + ")");
    const int factor = 1 << (n_scales() - 1);
    if (image_height % factor || image_width % factor)
      throw ConfigError("image_size must be divisible by " + std::to_string(factor));
  }

  std::size_t total_episodes() const {
    return static_cast<std::size_t>(epochs) * episodes_per_epoch;
  }
};

/// The three experiment arms: baseline (sSE only, no DE), gcn (GC at the two
/// shallow scales), gcn-de (GC plus discriminative embedding).
inline void apply_arm(RunConfig& cfg, const std::string& arm) {
  if (arm == "baseline") {
    cfg.gc_scales.clear();
    cfg.de_loss_weight = 0.0;
  } else if (arm == "gcn") {
    cfg.gc_scales = {1, 2};
    cfg.de_loss_weight = 0.0;
  } else if (arm == "gcn-de") {
    cfg.gc_scales = {1, 2};
    cfg.de_loss_weight = 1.0;
  } else {
    throw ConfigError("unknown arm '" + arm + "' (expected baseline, gcn or gcn-de)");
  }
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename Int>
Int parse_int(const std::string& key, const std::string& v) {
  Int out{};
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw ConfigError("key '" + key + "': not an integer: '" + v + "'");
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': not a number: '" + v + "'");
  }
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& v, char sep = ',') {
  std::vector<int> out;
  if (trim(v).empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(parse_int<int>(key, trim(item)));
  return out;
}

template <typename Range>
std::string join(const Range& r, const char* sep = ",") {
  std::string out;
  for (const auto& v : r) out += (out.empty() ? "" : sep) + std::to_string(v);
  return out;
}

}  // namespace detail

/// Parses `key = value` lines. Blank lines and lines starting with '#' are
/// skipped; unknown or repeated keys are rejected.
inline std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> out;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = detail::trim(t.substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    if (!out.emplace(key, detail::trim(t.substr(eq + 1))).second)
      throw ConfigError("duplicate key '" + key + "'");
  }
  return out;
}

inline RunConfig parse_run_config(const std::string& text) {
  RunConfig c;
  using Setter = std::function<void(const std::string&, const std::string&)>;
  const std::map<std::string, Setter> setters{
      {"epochs", [&](auto& k, auto& v) { c.epochs = detail::parse_int<int>(k, v); }},
      {"episodes_per_epoch",
       [&](auto& k, auto& v) { c.episodes_per_epoch = detail::parse_int<int>(k, v); }},
      {"iterations_per_episode",
       [&](auto& k, auto& v) { c.iterations_per_episode = detail::parse_int<int>(k, v); }},
      {"learning_rate", [&](auto& k, auto& v) { c.learning_rate = detail::parse_double(k, v); }},
      {"momentum", [&](auto& k, auto& v) { c.momentum = detail::parse_double(k, v); }},
      {"seed", [&](auto& k, auto& v) { c.seed = detail::parse_int<std::uint64_t>(k, v); }},
      {"image_size",
       [&](auto& k, auto& v) {
         auto dims = detail::parse_int_list(k, v, 'x');
         if (dims.size() != 2) throw ConfigError("image_size must look like HxW");
         c.image_height = dims[0];
         c.image_width = dims[1];
       }},
      {"channel_widths", [&](auto& k, auto& v) { c.channel_widths = detail::parse_int_list(k, v); }},
      {"partition_factors",
       [&](auto& k, auto& v) {
         auto f = detail::parse_int_list(k, v);
         if (f.size() != 2) throw ConfigError("partition_factors must be 'P_h,P_w'");
         c.partition_h = f[0];
         c.partition_w = f[1];
       }},
      {"de_loss_weight", [&](auto& k, auto& v) { c.de_loss_weight = detail::parse_double(k, v); }},
      {"gc_scales",
       [&](auto& k, auto& v) {
         auto s = detail::parse_int_list(k, v);
         c.gc_scales = std::set<int>(s.begin(), s.end());
       }},
      {"threshold", [&](auto& k, auto& v) { c.threshold = detail::parse_double(k, v); }},
      {"embedding",
       [&](auto& k, auto& v) {
         if (v == "pooled") c.embedding = EmbeddingMode::Pooled;
         else if (v == "raw") c.embedding = EmbeddingMode::Raw;
         else throw ConfigError("key '" + k + "': expected pooled or raw");
       }},
      {"checkpoint_every",
       [&](auto& k, auto& v) { c.checkpoint_every = detail::parse_int<int>(k, v); }},
  };
  for (const auto& [key, value] : parse_key_values(text)) {
    auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second(key, value);
  }
  c.validate();
  return c;
}

inline std::string serialize(const RunConfig& c) {
  std::ostringstream os;
  os << "epochs = " << c.epochs << "\n"
     << "episodes_per_epoch = " << c.episodes_per_epoch << "\n"
     << "iterations_per_episode = " << c.iterations_per_episode << "\n"
     << "learning_rate = " << detail::format_double(c.learning_rate) << "\n"
     << "momentum = " << detail::format_double(c.momentum) << "\n"
     << "seed = " << c.seed << "\n"
     << "image_size = " << c.image_height << "x" << c.image_width << "\n"
     << "channel_widths = " << detail::join(c.channel_widths) << "\n"
     << "partition_factors = " << c.partition_h << "," << c.partition_w << "\n"
     << "de_loss_weight = " << detail::format_double(c.de_loss_weight) << "\n"
     << "gc_scales = " << detail::join(c.gc_scales) << "\n"
     << "threshold = " << detail::format_double(c.threshold) << "\n"
     << "embedding = " << (c.embedding == EmbeddingMode::Pooled ? "pooled" : "raw") << "\n"
     << "checkpoint_every = " << c.checkpoint_every << "\n";
  return os.str();
}

inline bool operator==(const RunConfig& a, const RunConfig& b) { return serialize(a) == serialize(b); }

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline RunConfig load_run_config(const std::string& path) {
  return parse_run_config(read_text_file(path));
}

}  // namespace fewseg
