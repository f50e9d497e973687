#pragma once

// Model file container: header {magic "CVPR", version u32, metadata length
// u64}, then JSON metadata (layer list, shapes, flags), then the raw weight
// blobs as little-endian 64-bit floats in depth-first layer order. Weights
// round-trip bit-exactly; the JSON carries structure only, never numbers
// that matter.

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "covprop/error.hpp"
#include "covprop/network.hpp"
#include "json.hpp"

namespace covprop {

inline constexpr std::uint32_t kModelFormatVersion = 1;
inline constexpr char kModelMagic[4] = {'C', 'V', 'P', 'R'};

namespace detail {

inline void append_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void append_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void append_f64_le(std::string& out, double v) {
  append_u64_le(out, std::bit_cast<std::uint64_t>(v));
}

// Sequential reader over the serialized bytes; any overrun means the payload
// was cut short.
struct ByteCursor {
  std::string_view bytes;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > bytes.size()) {
      throw_error(ErrorKind::format, "model file: truncated payload (needed " +
                                         std::to_string(n) + " bytes at offset " +
                                         std::to_string(pos) + ")");
    }
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
};

inline nlohmann::json layer_to_json(const LayerSpec& layer) {
  struct ToJson {
    nlohmann::json operator()(const ConvLayer& conv) const {
      return {{"kind", "conv"},       {"in_channels", conv.in_channels},
              {"out_channels", conv.out_channels}, {"kernel", conv.kernel},
              {"stride", conv.stride}, {"padding", conv.padding}};
    }
    nlohmann::json operator()(const LinearLayer& lin) const {
      return {{"kind", "linear"}, {"in_dim", lin.in_dim}, {"out_dim", lin.out_dim}};
    }
    nlohmann::json operator()(const AvgPoolLayer& pool) const {
      return {{"kind", "avgpool"}, {"kernel", pool.kernel}};
    }
    nlohmann::json operator()(const ReluLayer&) const { return {{"kind", "relu"}}; }
    nlohmann::json operator()(const ResidualAddLayer& res) const {
      nlohmann::json branch = nlohmann::json::array();
      for (const LayerSpec& l : res.branch) branch.push_back(layer_to_json(l));
      return {{"kind", "residual"}, {"branch", std::move(branch)}};
    }
    nlohmann::json operator()(const FlattenLayer&) const { return {{"kind", "flatten"}}; }
    nlohmann::json operator()(const NormalizeLayer& norm) const {
      return {{"kind", "normalize"},
              {"enabled", norm.enabled},
              {"channels", static_cast<int>(norm.mu_prime.size())}};
    }
  };
  return std::visit(ToJson{}, layer.node);
}

inline void append_layer_blobs(std::string& out, const LayerSpec& layer) {
  struct Blobs {
    std::string& out;
    void operator()(const ConvLayer& conv) const {
      for (double v : conv.weights.data) append_f64_le(out, v);
      for (double v : conv.bias.data) append_f64_le(out, v);
    }
    void operator()(const LinearLayer& lin) const {
      for (double v : lin.weights.data) append_f64_le(out, v);
      for (double v : lin.bias.data) append_f64_le(out, v);
    }
    void operator()(const AvgPoolLayer&) const {}
    void operator()(const ReluLayer&) const {}
    void operator()(const ResidualAddLayer& res) const {
      for (const LayerSpec& l : res.branch) append_layer_blobs(out, l);
    }
    void operator()(const FlattenLayer&) const {}
    void operator()(const NormalizeLayer& norm) const {
      for (double v : norm.mu_prime.data) append_f64_le(out, v);
      for (double v : norm.sigma_prime.data) append_f64_le(out, v);
    }
  };
  std::visit(Blobs{out}, layer.node);
}

inline int json_int(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_number_integer()) {
    throw_error(ErrorKind::format,
                std::string("model file: layer entry missing integer field '") + key + "'");
  }
  return j[key].get<int>();
}

inline LayerSpec layer_from_json(const nlohmann::json& j, ByteCursor& cur) {
  if (!j.is_object() || !j.contains("kind") || !j["kind"].is_string()) {
    throw_error(ErrorKind::format, "model file: layer entry without a kind");
  }
  const std::string kind = j["kind"].get<std::string>();
  if (kind == "conv") {
    ConvLayer conv;
    conv.in_channels = json_int(j, "in_channels");
    conv.out_channels = json_int(j, "out_channels");
    conv.kernel = json_int(j, "kernel");
    conv.stride = json_int(j, "stride");
    conv.padding = json_int(j, "padding");
    if (conv.in_channels < 1 || conv.out_channels < 1 || conv.kernel < 1 || conv.stride < 1 ||
        conv.padding < 0) {
      throw_error(ErrorKind::format, "model file: conv layer with non-positive dims");
    }
    conv.weights = Matrix(static_cast<std::size_t>(conv.kernel) * conv.kernel * conv.in_channels,
                          static_cast<std::size_t>(conv.out_channels));
    conv.bias = Vector(conv.out_channels);
    for (double& v : conv.weights.data) v = cur.f64();
    for (double& v : conv.bias.data) v = cur.f64();
    return {std::move(conv)};
  }
  if (kind == "linear") {
    LinearLayer lin;
    lin.in_dim = json_int(j, "in_dim");
    lin.out_dim = json_int(j, "out_dim");
    if (lin.in_dim < 1 || lin.out_dim < 1) {
      throw_error(ErrorKind::format, "model file: linear layer with non-positive dims");
    }
    lin.weights = Matrix(static_cast<std::size_t>(lin.in_dim), static_cast<std::size_t>(lin.out_dim));
    lin.bias = Vector(lin.out_dim);
    for (double& v : lin.weights.data) v = cur.f64();
    for (double& v : lin.bias.data) v = cur.f64();
    return {std::move(lin)};
  }
  if (kind == "avgpool") return {AvgPoolLayer{json_int(j, "kernel")}};
  if (kind == "relu") return {ReluLayer{}};
  if (kind == "flatten") return {FlattenLayer{}};
  if (kind == "residual") {
    if (!j.contains("branch") || !j["branch"].is_array()) {
      throw_error(ErrorKind::format, "model file: residual layer without a branch list");
    }
    ResidualAddLayer res;
    for (const nlohmann::json& b : j["branch"]) res.branch.push_back(layer_from_json(b, cur));
    return {std::move(res)};
  }
  if (kind == "normalize") {
    NormalizeLayer norm;
    norm.enabled = j.contains("enabled") && j["enabled"].is_boolean() && j["enabled"].get<bool>();
    const int channels = json_int(j, "channels");
    if (channels < 0) {
      throw_error(ErrorKind::format, "model file: normalize layer with negative channel count");
    }
    norm.mu_prime = Vector(channels);
    norm.sigma_prime = Vector(channels);
    for (double& v : norm.mu_prime.data) v = cur.f64();
    for (double& v : norm.sigma_prime.data) v = cur.f64();
    return {std::move(norm)};
  }
  throw_error(ErrorKind::format, "model file: unknown layer kind '" + kind + "'");
}

}  // namespace detail

inline std::string save_network(const NetworkSpec& net) {
  net.validate();
  nlohmann::json meta;
  meta["input_shape"] = {{"height", net.input_shape.height},
                         {"width", net.input_shape.width},
                         {"channels", net.input_shape.channels}};
  meta["class_count"] = net.class_count;
  nlohmann::json layers = nlohmann::json::array();
  for (const LayerSpec& l : net.layers) layers.push_back(detail::layer_to_json(l));
  meta["layers"] = std::move(layers);
  const std::string meta_text = meta.dump();

  std::string out;
  out.append(kModelMagic, sizeof kModelMagic);
  detail::append_u32_le(out, kModelFormatVersion);
  detail::append_u64_le(out, meta_text.size());
  out += meta_text;
  for (const LayerSpec& l : net.layers) detail::append_layer_blobs(out, l);
  return out;
}

inline NetworkSpec load_network(std::string_view bytes) {
  detail::ByteCursor cur{bytes};
  cur.need(sizeof kModelMagic);
  if (bytes.substr(0, sizeof kModelMagic) != std::string_view(kModelMagic, sizeof kModelMagic)) {
    throw_error(ErrorKind::format, "model file: bad magic, not a model file");
  }
  cur.pos = sizeof kModelMagic;
  const std::uint32_t version = cur.u32();
  if (version != kModelFormatVersion) {
    throw_error(ErrorKind::format, "model file: format version " + std::to_string(version) +
                                       " unsupported, expected " +
                                       std::to_string(kModelFormatVersion));
  }
  const std::uint64_t meta_len = cur.u64();
  cur.need(meta_len);
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(bytes.substr(cur.pos, meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw_error(ErrorKind::format, std::string("model file: metadata is not valid JSON: ") +
                                       e.what());
  }
  cur.pos += meta_len;

  if (!meta.contains("input_shape") || !meta.contains("class_count") ||
      !meta.contains("layers") || !meta["layers"].is_array()) {
    throw_error(ErrorKind::format, "model file: metadata missing required fields");
  }
  NetworkSpec net;
  net.input_shape.height = detail::json_int(meta["input_shape"], "height");
  net.input_shape.width = detail::json_int(meta["input_shape"], "width");
  net.input_shape.channels = detail::json_int(meta["input_shape"], "channels");
  net.class_count = detail::json_int(meta, "class_count");
  for (const nlohmann::json& j : meta["layers"]) {
    net.layers.push_back(detail::layer_from_json(j, cur));
  }
  if (cur.pos != bytes.size()) {
    throw_error(ErrorKind::format, "model file: " + std::to_string(bytes.size() - cur.pos) +
                                       " trailing bytes after the weight blobs");
  }
  net.validate();
  return net;
}

inline void save_network_file(const NetworkSpec& net, const std::string& path) {
  const std::string bytes = save_network(net);
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw_error(ErrorKind::io, "cannot open '" + path + "' for writing");
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) {
    throw_error(ErrorKind::io, "short write to '" + path + "'");
  }
}

inline NetworkSpec load_network_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw_error(ErrorKind::io, "cannot open '" + path + "' for reading");
  }
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) {
    throw_error(ErrorKind::io, "read failure on '" + path + "'");
  }
  return load_network(bytes);
}

}  // namespace covprop
