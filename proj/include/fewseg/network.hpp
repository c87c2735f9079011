#pragma once

// Dual-branch segmentor: a support and a query U-Net with identical layout but
// separate weights. At every resolution the support features modulate the query
// features, through sSE or, at the designated shallow scales, through the
// efficient global-correlation module.

#include "fewseg/config.hpp"
#include "fewseg/core.hpp"
#include "fewseg/correlation.hpp"
#include "fewseg/io.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstring>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace fewseg {

/// Layout of both branches.
struct NetworkSpec {
  std::vector<int> widths{16, 32, 64, 128};
  std::set<int> gc_scales{1, 2};
  int partition_h = 4;
  int partition_w = 4;

  static NetworkSpec from(const RunConfig& c) {
    return NetworkSpec{c.channel_widths, c.gc_scales, c.partition_h, c.partition_w};
  }

  int n_scales() const { return static_cast<int>(widths.size()); }
  bool uses_gc(int scale) const { return gc_scales.count(scale) > 0; }

  void validate() const {
    RunConfig probe;
    probe.channel_widths = widths;
    probe.gc_scales = gc_scales;
    probe.partition_h = partition_h;
    probe.partition_w = partition_w;
    probe.image_height = probe.image_width = 1 << (n_scales() - 1);
    probe.validate();
  }
};

/// Input channels of a branch: image + binary mask for the support, image only for the query.
struct BranchSpec {
  int input_channels = 1;
  std::vector<int> widths;
};

template <typename T>
struct ConvParams {
  Var<T> weight;
  Var<T> bias;

  static ConvParams random(int k, int cin, int cout, Rng& rng) {
    ConvParams p;
    const double stddev = std::sqrt(2.0 / (k * k * cin));
    p.weight = Var<T>::parameter(normal_tensor<T>(k * k, cin, cout, stddev, rng));
    p.bias = Var<T>::parameter(Tensor<T>(1, 1, cout));
    return p;
  }
};

template <typename T>
struct BlockParams {
  ConvParams<T> first;
  ConvParams<T> second;
};

template <typename T>
struct BranchParams {
  std::vector<BlockParams<T>> encoder;  // one per scale
  std::vector<BlockParams<T>> decoder;  // decoder[s] for s < n_scales - 1
};

template <typename T>
struct InteractionParams {
  std::optional<SseParams<T>> sse;
  std::optional<EfficientGcParams<T>> gc;
};

/// All learnable tensors of the model. Copies share storage; use clone() for a
/// deep copy.
template <typename T>
struct ModelParams {
  NetworkSpec spec;
  BranchParams<T> support;
  BranchParams<T> query;
  std::vector<InteractionParams<T>> encoder_interaction;
  std::vector<InteractionParams<T>> decoder_interaction;
  ConvParams<T> head;

  static ModelParams random(const NetworkSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(derive_seed(seed, 0x5E6));
    ModelParams p;
    p.spec = spec;
    const auto& w = spec.widths;
    const int n = spec.n_scales();
    auto make_branch = [&](int input_channels) {
      BranchParams<T> b;
      for (int s = 0; s < n; ++s) {
        const int cin = s == 0 ? input_channels : w[s - 1];
        b.encoder.push_back({ConvParams<T>::random(3, cin, w[s], rng),
                             ConvParams<T>::random(3, w[s], w[s], rng)});
      }
      for (int s = 0; s + 1 < n; ++s)
        b.decoder.push_back({ConvParams<T>::random(3, w[s + 1] + w[s], w[s], rng),
                             ConvParams<T>::random(3, w[s], w[s], rng)});
      return b;
    };
    p.support = make_branch(2);
    p.query = make_branch(1);
    auto make_interaction = [&](int s) {
      InteractionParams<T> ip;
      if (spec.uses_gc(s))
        ip.gc = EfficientGcParams<T>::random(w[s], w[s], rng);
      else
        ip.sse = SseParams<T>::random(w[s], rng);
      return ip;
    };
    for (int s = 0; s < n; ++s) p.encoder_interaction.push_back(make_interaction(s));
    for (int s = 0; s + 1 < n; ++s) p.decoder_interaction.push_back(make_interaction(s));
    p.head = ConvParams<T>::random(1, w[0], 1, rng);
    return p;
  }

  /// Every tensor with a stable dotted name, in checkpoint order.
  std::vector<std::pair<std::string, Var<T>*>> named() {
    std::vector<std::pair<std::string, Var<T>*>> out;
    auto conv = [&](const std::string& name, ConvParams<T>& c) {
      out.emplace_back(name + ".weight", &c.weight);
      out.emplace_back(name + ".bias", &c.bias);
    };
    auto branch = [&](const std::string& name, BranchParams<T>& b) {
      for (std::size_t s = 0; s < b.encoder.size(); ++s) {
        conv(name + ".enc" + std::to_string(s) + ".conv1", b.encoder[s].first);
        conv(name + ".enc" + std::to_string(s) + ".conv2", b.encoder[s].second);
      }
      for (std::size_t s = 0; s < b.decoder.size(); ++s) {
        conv(name + ".dec" + std::to_string(s) + ".conv1", b.decoder[s].first);
        conv(name + ".dec" + std::to_string(s) + ".conv2", b.decoder[s].second);
      }
    };
    auto correlation = [&](const std::string& name, SpatialCorrelationParams<T>& c) {
      out.emplace_back(name + ".theta", &c.theta);
      out.emplace_back(name + ".phi", &c.phi);
      out.emplace_back(name + ".g", &c.g);
      out.emplace_back(name + ".omega", &c.omega);
    };
    auto interaction = [&](const std::string& name, InteractionParams<T>& ip) {
      if (ip.sse) {
        out.emplace_back(name + ".sse.weight", &ip.sse->weight);
        out.emplace_back(name + ".sse.bias", &ip.sse->bias);
      }
      if (ip.gc) {
        correlation(name + ".gc.long", ip.gc->long_range);
        out.emplace_back(name + ".gc.alpha", &ip.gc->alpha);
        correlation(name + ".gc.short", ip.gc->short_range);
      }
    };
    branch("support", support);
    branch("query", query);
    for (std::size_t s = 0; s < encoder_interaction.size(); ++s)
      interaction("interact.enc" + std::to_string(s), encoder_interaction[s]);
    for (std::size_t s = 0; s < decoder_interaction.size(); ++s)
      interaction("interact.dec" + std::to_string(s), decoder_interaction[s]);
    conv("query.head", head);
    return out;
  }

  std::vector<std::pair<std::string, Var<T>*>> named() const {
    return const_cast<ModelParams*>(this)->named();
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& [name, v] : named()) n += v->value().size();
    return n;
  }

  void zero_grad() {
    for (auto& [name, v] : named()) v->zero_grad();
  }

  /// Deep copy converted to scalar type U.
  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out = ModelParams<U>::random(spec, 0);
    auto src = named();
    auto dst = out.named();
    for (std::size_t i = 0; i < src.size(); ++i)
      dst[i].second->mutable_value() = src[i].second->value().template cast<U>();
    return out;
  }

  ModelParams clone() const { return cast<T>(); }
};

template <typename T>
struct ForwardOutput {
  Var<T> logits;           // H x W x 1, pre-sigmoid
  Var<T> backend_query;    // final query decoder features
  Var<T> backend_support;  // final support decoder features
};

namespace detail {

template <typename T>
Var<T> conv_relu(const Var<T>& x, const ConvParams<T>& c, int k = 3) {
  return ops::relu(ops::conv2d(x, c.weight, c.bias, k));
}

template <typename T>
Var<T> block(const Var<T>& x, const BlockParams<T>& b) {
  return conv_relu(conv_relu(x, b.first), b.second);
}

template <typename T>
Var<T> interact(const InteractionParams<T>& ip, const Var<T>& q, const Var<T>& s,
                const NetworkSpec& spec) {
  if (ip.gc) return efficient_gc(q, s, spec.partition_h, spec.partition_w, *ip.gc);
  return sse_attention(q, s, *ip.sse);
}

}  // namespace detail

template <typename T>
ForwardOutput<T> forward(const ModelParams<T>& p, const Tensor<T>& support_image,
                         const BinaryMask& support_mask, const Tensor<T>& query_image) {
  support_mask.validate();
  if (support_image.c != 1 || query_image.c != 1)
    throw ShapeError("forward: images must be single-channel");
  if (!support_image.same_shape(query_image))
    throw ShapeError("forward: support " + support_image.shape_string() + " vs query " +
                     query_image.shape_string());
  if (support_mask.height != support_image.h || support_mask.width != support_image.w)
    throw ShapeError("forward: support mask does not match the support image");
  const int n = p.spec.n_scales();
  const int factor = 1 << (n - 1);
  if (support_image.h % factor || support_image.w % factor)
    throw ShapeError("forward: image size must be divisible by " + std::to_string(factor));

  std::vector<Var<T>> sup(n), qry(n);
  Var<T> s_in = ops::concat_channels(Var<T>::constant(support_image),
                                     Var<T>::constant(support_mask.tensor<T>()));
  Var<T> q_in = Var<T>::constant(query_image);
  for (int s = 0; s < n; ++s) {
    if (s > 0) {
      s_in = ops::max_pool2(sup[s - 1]);
      q_in = ops::max_pool2(qry[s - 1]);
    }
    sup[s] = detail::block(s_in, p.support.encoder[s]);
    qry[s] = detail::interact(p.encoder_interaction[s], detail::block(q_in, p.query.encoder[s]),
                              sup[s], p.spec);
  }
  Var<T> s_up = sup[n - 1], q_up = qry[n - 1];
  for (int s = n - 2; s >= 0; --s) {
    Var<T> s_dec =
        detail::block(ops::concat_channels(ops::upsample2(s_up), sup[s]), p.support.decoder[s]);
    Var<T> q_dec =
        detail::block(ops::concat_channels(ops::upsample2(q_up), qry[s]), p.query.decoder[s]);
    q_up = detail::interact(p.decoder_interaction[s], q_dec, s_dec, p.spec);
    s_up = s_dec;
  }
  ForwardOutput<T> out;
  out.logits = ops::conv2d(q_up, p.head.weight, p.head.bias, 1);
  out.backend_query = q_up;
  out.backend_support = s_up;
  return out;
}

/// sigmoid(logit) > threshold, strictly; ties resolve to background.
template <typename T>
BinaryMask predict_mask(const Tensor<T>& logits, double threshold = 0.5, int class_id = 1) {
  BinaryMask m(logits.h, logits.w, class_id);
  for (std::size_t i = 0; i < m.mask.size(); ++i) {
    const double prob = 1.0 / (1.0 + std::exp(-static_cast<double>(logits.data[i])));
    m.mask[i] = prob > threshold;
  }
  return m;
}

// Checkpoint: "FEWSEGCK", u32 version, u64 manifest length, JSON manifest, then
// every tensor as little-endian float32 in manifest order.

inline constexpr char kCheckpointMagic[8] = {'F', 'E', 'W', 'S', 'E', 'G', 'C', 'K'};

template <typename T>
std::string encode_checkpoint(const ModelParams<T>& p) {
  nlohmann::json manifest;
  manifest["format"] = "fewseg-checkpoint";
  manifest["version"] = 1;
  manifest["widths"] = p.spec.widths;
  manifest["gc_scales"] = p.spec.gc_scales;
  manifest["partition"] = {p.spec.partition_h, p.spec.partition_w};
  std::string payload;
  std::size_t offset = 0;
  for (auto& [name, v] : p.named()) {
    const Tensor<T>& t = v->value();
    std::vector<float> values(t.data.begin(), t.data.end());
    manifest["tensors"].push_back({{"name", name},
                                   {"shape", {t.h, t.w, t.c}},
                                   {"dtype", "float32"},
                                   {"offset", offset},
                                   {"count", values.size()}});
    payload += encode_f32_le(values.data(), values.size());
    offset += values.size() * 4;
  }
  const std::string m = manifest.dump();
  std::string out(kCheckpointMagic, 8);
  const std::uint32_t version = 1;
  const std::uint64_t len = m.size();
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((version >> (8 * i)) & 0xFF));
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((len >> (8 * i)) & 0xFF));
  return out + m + payload;
}

template <typename T>
ModelParams<T> decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw std::runtime_error("not a fewseg checkpoint");
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i)
    len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[12 + i])) << (8 * i);
  if (20 + len > bytes.size()) throw std::runtime_error("checkpoint manifest truncated");
  const auto manifest = nlohmann::json::parse(bytes.substr(20, len));
  NetworkSpec spec;
  spec.widths = manifest.at("widths").get<std::vector<int>>();
  spec.gc_scales = manifest.at("gc_scales").get<std::set<int>>();
  const auto part = manifest.at("partition").get<std::vector<int>>();
  spec.partition_h = part.at(0);
  spec.partition_w = part.at(1);
  ModelParams<T> p = ModelParams<T>::random(spec, 0);
  const std::string_view payload = bytes.substr(20 + len);
  auto named = p.named();
  const auto& tensors = manifest.at("tensors");
  if (tensors.size() != named.size()) throw std::runtime_error("checkpoint tensor count mismatch");
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& e = tensors[i];
    if (e.at("name").get<std::string>() != named[i].first)
      throw std::runtime_error("checkpoint tensor order mismatch at " + named[i].first);
    const auto shape = e.at("shape").get<std::vector<int>>();
    Tensor<T>& dst = named[i].second->mutable_value();
    if (shape != std::vector<int>{dst.h, dst.w, dst.c})
      throw std::runtime_error("checkpoint shape mismatch for " + named[i].first);
    const std::size_t off = e.at("offset").get<std::size_t>();
    const std::size_t count = e.at("count").get<std::size_t>();
    if (count != dst.size() || off + count * 4 > payload.size())
      throw std::runtime_error("checkpoint payload truncated at " + named[i].first);
    const auto values = decode_f32_le(payload.substr(off, count * 4));
    for (std::size_t j = 0; j < count; ++j) dst.data[j] = static_cast<T>(values[j]);
  }
  return p;
}

template <typename T>
void save_checkpoint(const fs::path& path, const ModelParams<T>& p) {
  write_file_atomic(path, encode_checkpoint(p));
}

template <typename T>
ModelParams<T> load_checkpoint(const fs::path& path) {
  return decode_checkpoint<T>(read_binary_file(path));
}

}  // namespace fewseg
