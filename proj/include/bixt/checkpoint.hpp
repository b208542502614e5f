#pragma once

// Checkpoint container: a magic line, a length-prefixed JSON header (format
// version, scalar type, seed, config, tensor manifest) and the raw
// little-endian parameter blobs in manifest order. Round trips are bitwise.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "bixt/model.hpp"

namespace bixt {

using Json = nlohmann::json;

inline constexpr char kCheckpointMagic[] = "BIXTCKPT\n";
inline constexpr int kCheckpointFormat = 1;

template <class S>
const char* scalar_name();
template <>
inline const char* scalar_name<float>() {
  return "f32";
}
template <>
inline const char* scalar_name<double>() {
  return "f64";
}

// ---------------------------------------------------------------------------
// Config <-> JSON. Parsing is strict: any unknown key is an error that names
// the key, so a typo cannot silently fall back to a default.

inline Json config_to_json(const ModelConfig& c) {
  Json j;
  j["layers"] = c.layers;
  j["latents"] = c.latents;
  j["dim"] = c.dim;
  j["heads"] = c.heads;
  j["mlp_ratio"] = c.mlp_ratio;
  j["attention_variant"] = attention_variant_name(c.attention_variant);
  j["sa_count"] = c.sa_count;
  j["share_scheme"] = share_scheme_name(c.share_scheme);
  j["head"] = head_type_name(c.head);
  j["num_classes"] = c.num_classes;
  j["drop_path"] = c.drop_path;
  j["input"] = input_kind_name(c.input);
  j["vocab"] = c.vocab;
  j["max_len"] = c.max_len;
  j["patch"] = {{"patch", c.patch.patch},
                {"stride", c.patch.stride},
                {"height", c.patch.height},
                {"width", c.patch.width},
                {"channels", c.patch.channels}};
  return j;
}

namespace detail {

inline int64_t as_int(const Json& v, const std::string& key) {
  if (!v.is_number_integer())
    throw ConfigError("config: key '" + key + "' must be an integer");
  return v.get<int64_t>();
}

inline double as_double(const Json& v, const std::string& key) {
  if (!v.is_number())
    throw ConfigError("config: key '" + key + "' must be a number");
  return v.get<double>();
}

inline std::string as_string(const Json& v, const std::string& key) {
  if (!v.is_string())
    throw ConfigError("config: key '" + key + "' must be a string");
  return v.get<std::string>();
}

}  // namespace detail

inline PatchSpec patch_from_json(const Json& j) {
  PatchSpec p;
  if (!j.is_object()) throw ConfigError("config: 'patch' must be an object");
  for (const auto& [key, v] : j.items()) {
    if (key == "patch")
      p.patch = detail::as_int(v, key);
    else if (key == "stride")
      p.stride = detail::as_int(v, key);
    else if (key == "height")
      p.height = detail::as_int(v, key);
    else if (key == "width")
      p.width = detail::as_int(v, key);
    else if (key == "channels")
      p.channels = detail::as_int(v, key);
    else
      throw ConfigError("config: unknown key 'patch." + key + "'");
  }
  return p;
}

inline ModelConfig config_from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  ModelConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "layers")
      c.layers = detail::as_int(v, key);
    else if (key == "latents")
      c.latents = detail::as_int(v, key);
    else if (key == "dim")
      c.dim = detail::as_int(v, key);
    else if (key == "heads")
      c.heads = detail::as_int(v, key);
    else if (key == "mlp_ratio")
      c.mlp_ratio = detail::as_double(v, key);
    else if (key == "attention_variant")
      c.attention_variant = parse_attention_variant(detail::as_string(v, key));
    else if (key == "sa_count")
      c.sa_count = detail::as_int(v, key);
    else if (key == "share_scheme")
      c.share_scheme = parse_share_scheme(detail::as_string(v, key));
    else if (key == "head")
      c.head = parse_head_type(detail::as_string(v, key));
    else if (key == "num_classes")
      c.num_classes = detail::as_int(v, key);
    else if (key == "drop_path")
      c.drop_path = detail::as_double(v, key);
    else if (key == "input")
      c.input = parse_input_kind(detail::as_string(v, key));
    else if (key == "vocab")
      c.vocab = detail::as_int(v, key);
    else if (key == "max_len")
      c.max_len = detail::as_int(v, key);
    else if (key == "patch")
      c.patch = patch_from_json(v);
    else
      throw ConfigError("config: unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

template <class S>
void save_checkpoint(const Model<S>& m, const std::string& path,
                     uint64_t seed) {
  Json header;
  header["format"] = kCheckpointFormat;
  header["scalar"] = scalar_name<S>();
  header["seed"] = seed;
  header["config"] = config_to_json(m.cfg);
  Json manifest = Json::array();
  int64_t offset = 0;
  for (const auto& [name, t] : m.named) {
    manifest.push_back(
        {{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size() * int64_t(sizeof(S));
  }
  header["tensors"] = manifest;
  const std::string head_bytes = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(kCheckpointMagic, 9);
  const uint64_t len = head_bytes.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(head_bytes.data(), std::streamsize(head_bytes.size()));
  for (const auto& [name, t] : m.named)
    out.write(reinterpret_cast<const char*>(t.data()),
              std::streamsize(size_t(t.size()) * sizeof(S)));
  out.flush();
  if (!out) throw IoError("short write to '" + path + "'");
}

struct CheckpointInfo {
  ModelConfig config;
  uint64_t seed = 0;
};

template <class S>
Model<S> load_checkpoint(const std::string& path,
                         CheckpointInfo* info = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  char magic[9];
  if (!in.read(magic, 9) || std::memcmp(magic, kCheckpointMagic, 9) != 0)
    throw IoError("'" + path + "' is not a checkpoint (bad magic)");
  uint64_t len = 0;
  if (!in.read(reinterpret_cast<char*>(&len), sizeof(len)) || len == 0 ||
      len > (1ull << 30))
    throw IoError("'" + path + "' has a corrupt header length");
  std::string head_bytes(size_t(len), '\0');
  if (!in.read(head_bytes.data(), std::streamsize(len)))
    throw IoError("'" + path + "' is truncated inside the header");

  Json header;
  try {
    header = Json::parse(head_bytes);
  } catch (const Json::exception& e) {
    throw IoError("'" + path + "' header is not valid JSON: " + e.what());
  }
  if (header.value("format", -1) != kCheckpointFormat)
    throw IoError("'" + path + "' has unsupported format " +
                  header["format"].dump());
  const std::string scalar = header.value("scalar", "");
  if (scalar != scalar_name<S>())
    throw IoError("'" + path + "' stores " + scalar + " parameters, not " +
                  scalar_name<S>());
  if (!header.contains("config") || !header.contains("tensors"))
    throw IoError("'" + path + "' header is missing config or tensors");

  const uint64_t seed = header.value("seed", uint64_t(0));
  Model<S> m = Model<S>::init(config_from_json(header["config"]), seed);
  const Json& manifest = header["tensors"];
  if (!manifest.is_array() || manifest.size() != m.named.size())
    throw IoError("'" + path + "' manifest holds " +
                  std::to_string(manifest.size()) + " tensors, model has " +
                  std::to_string(m.named.size()));
  for (size_t i = 0; i < m.named.size(); ++i) {
    auto& [name, t] = m.named[i];
    const Json& entry = manifest[i];
    if (entry.value("name", "") != name)
      throw IoError("'" + path + "' manifest entry " + std::to_string(i) +
                    " is '" + entry.value("name", "") + "', expected '" +
                    name + "'");
    const Shape stored = entry.value("shape", Shape{});
    if (stored != t.shape())
      throw IoError("'" + path + "' tensor '" + name + "' has shape " +
                    shape_str(stored) + ", expected " + shape_str(t.shape()));
    if (!in.read(reinterpret_cast<char*>(t.data()),
                 std::streamsize(size_t(t.size()) * sizeof(S))))
      throw IoError("'" + path + "' is truncated inside tensor '" + name +
                    "'");
  }
  char extra;
  if (in.read(&extra, 1))
    throw IoError("'" + path + "' has trailing bytes after the last tensor");
  if (info) {
    info->config = m.cfg;
    info->seed = seed;
  }
  return m;
}

}  // namespace bixt
