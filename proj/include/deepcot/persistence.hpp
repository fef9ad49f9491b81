#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <variant>
#include <vector>

#include "deepcot/config.hpp"
#include "deepcot/diffanalysis.hpp"
#include "deepcot/encoder.hpp"
#include "deepcot/error.hpp"
#include "deepcot/model.hpp"
#include "deepcot/numerics.hpp"

namespace deepcot {

// Weight files are a JSON manifest plus one little-endian float32 blob:
//
//   {
//     "blob": "<file name, resolved relative to the manifest>",
//     "checksum": <CRC-32 of the blob>,
//     "config": { ...ModelConfig... },
//     "format_version": 1,
//     "tensors": [ {"name", "rows", "cols", "byte_offset"}, ... ]
//   }
//
// Tensor names: layer{i}.{wq|wk|wv|wo|ff1|ff2|norm1|norm2|rezero}, optional
// layer{i}.{bq|bk|bv|bo|ff1_bias|ff2_bias} (missing = zero), and
// recycling_table for recycling positional embeddings. norm{1,2} are 2 x d
// (row 0 gain, row 1 offset); rezero is 1 x 1.
inline constexpr int kFormatVersion = 1;

using json = nlohmann::json;

inline std::uint32_t crc32_of(std::span<const unsigned char> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
    crc = ::crc32(crc, bytes.data() + done, chunk);
    done += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

namespace detail {

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failure on '" + path.string() + "'");
  return bytes;
}

inline void write_file(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failure on '" + path.string() + "'");
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline std::uint32_t get_u32(std::span<const unsigned char> in, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[off + i]) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(std::span<const unsigned char> in, std::size_t off) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in[off + i]) << (8 * i);
  return v;
}

template <std::floating_point T>
void put_f32(std::vector<unsigned char>& out, T v) {
  put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

inline float get_f32(std::span<const unsigned char> in, std::size_t off) {
  return std::bit_cast<float>(get_u32(in, off));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Config <-> JSON

inline json config_to_json(const ModelConfig& c) {
  json j;
  j["depth"] = c.depth;
  j["window"] = c.window;
  j["dim"] = c.dim;
  j["heads"] = c.heads;
  j["d_ff"] = c.ff_dim();
  j["activation"] = std::string(to_string(c.activation));
  j["ff"] = std::string(to_string(c.ff));
  j["mode"] = std::string(to_string(c.mode));
  if (c.norm.kind == NormKind::Kind::LayerNorm) {
    j["norm"] = {{"kind", "layernorm"}};
  } else {
    json n{{"kind", "rezero"},
           {"scale", c.norm.scale_mode == NormKind::ScaleMode::Learned ? "learned" : "constant"}};
    if (c.norm.constant) n["value"] = *c.norm.constant;
    j["norm"] = n;
  }
  std::visit(
      [&](const auto& p) {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, NoPositional>) {
          j["positional"] = {{"kind", "none"}};
        } else if constexpr (std::is_same_v<P, RopePositional>) {
          j["positional"] = {{"kind", "rope"}, {"base", p.base}};
        } else if constexpr (std::is_same_v<P, RecyclingPositional>) {
          j["positional"] = {{"kind", "recycling"}, {"period", p.period == 0 ? c.window : p.period}};
        } else {
          j["positional"] = {{"kind", "absolute"}, {"max_positions", p.max_positions}};
        }
      },
      c.positional);
  return j;
}

inline ModelConfig config_from_json(const json& j) {
  try {
    ModelConfig c;
    c.depth = j.at("depth").get<std::size_t>();
    c.window = j.at("window").get<std::size_t>();
    c.dim = j.at("dim").get<std::size_t>();
    c.heads = j.value("heads", std::size_t{1});
    c.d_ff = j.value("d_ff", std::size_t{0});
    c.activation = parse_activation(j.value("activation", std::string("softmax")));
    const auto ff = j.value("ff", std::string("nonlinear"));
    if (ff == "linear") {
      c.ff = FeedForwardKind::Linear;
    } else if (ff == "nonlinear") {
      c.ff = FeedForwardKind::Nonlinear;
    } else {
      throw ConfigError("unknown ff kind '" + ff + "'");
    }
    c.mode = parse_mode(j.value("mode", std::string("continual")));
    if (j.contains("norm")) {
      const auto& n = j.at("norm");
      const auto kind = n.at("kind").get<std::string>();
      if (kind == "layernorm") {
        c.norm = NormKind::layer_norm();
      } else if (kind == "rezero") {
        const auto scale = n.value("scale", std::string("constant"));
        if (scale == "learned") {
          c.norm = NormKind::rezero_learned();
        } else if (scale == "constant") {
          c.norm = NormKind::rezero_constant(n.contains("value") ? std::optional<double>(n.at("value").get<double>())
                                                                 : std::nullopt);
        } else {
          throw ConfigError("unknown rezero scale mode '" + scale + "'");
        }
      } else {
        throw ConfigError("unknown norm kind '" + kind + "'");
      }
    }
    if (j.contains("positional")) {
      const auto& p = j.at("positional");
      const auto kind = p.at("kind").get<std::string>();
      if (kind == "none") {
        c.positional = NoPositional{};
      } else if (kind == "rope") {
        c.positional = RopePositional{p.value("base", 10000.0)};
      } else if (kind == "recycling") {
        c.positional = RecyclingPositional{p.value("period", std::size_t{0})};
      } else if (kind == "absolute") {
        c.positional = AbsolutePositional{p.value("max_positions", std::size_t{0})};
      } else {
        throw ConfigError("unknown positional kind '" + kind + "'");
      }
    }
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Weight files

namespace detail {

template <std::floating_point T>
struct NamedTensor {
  std::string name;
  Matrix<T> value;
};

template <std::floating_point T>
Matrix<T> row_matrix(const std::vector<T>& v) {
  return Matrix<T>(1, v.size(), v);
}

template <std::floating_point T>
Matrix<T> stack2(const std::vector<T>& a, const std::vector<T>& b) {
  std::vector<T> d(a);
  d.insert(d.end(), b.begin(), b.end());
  return Matrix<T>(2, a.size(), std::move(d));
}

template <std::floating_point T>
std::vector<NamedTensor<T>> tensors_of(const Model<T>& m) {
  std::vector<NamedTensor<T>> out;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const auto& w = m.layers[i];
    const std::string p = "layer" + std::to_string(i) + ".";
    out.push_back({p + "wq", w.wq});
    out.push_back({p + "wk", w.wk});
    out.push_back({p + "wv", w.wv});
    out.push_back({p + "wo", w.wo});
    out.push_back({p + "ff1", w.ff1});
    out.push_back({p + "ff2", w.ff2});
    out.push_back({p + "norm1", stack2(w.norm1_gain, w.norm1_bias)});
    out.push_back({p + "norm2", stack2(w.norm2_gain, w.norm2_bias)});
    out.push_back({p + "rezero", Matrix<T>(1, 1, w.rezero_scale)});
    out.push_back({p + "bq", row_matrix(w.bq)});
    out.push_back({p + "bk", row_matrix(w.bk)});
    out.push_back({p + "bv", row_matrix(w.bv)});
    out.push_back({p + "bo", row_matrix(w.bo)});
    out.push_back({p + "ff1_bias", row_matrix(w.ff1_bias)});
    out.push_back({p + "ff2_bias", row_matrix(w.ff2_bias)});
  }
  if (m.config.recycling_period() > 0) out.push_back({"recycling_table", m.recycling_table});
  return out;
}

}  // namespace detail

// Serializes to float32; saving a float64 model rounds every weight.
template <std::floating_point T>
void save_model(const Model<T>& model, const std::filesystem::path& manifest_path,
                const std::filesystem::path& blob_path) {
  model.validate();
  std::vector<unsigned char> blob;
  json tensors = json::array();
  for (const auto& t : detail::tensors_of(model)) {
    tensors.push_back({{"name", t.name}, {"rows", t.value.rows()}, {"cols", t.value.cols()}, {"byte_offset", blob.size()}});
    for (T v : t.value.data()) detail::put_f32(blob, v);
  }
  json manifest;
  manifest["format_version"] = kFormatVersion;
  manifest["config"] = config_to_json(model.config);
  manifest["blob"] = blob_path.filename().string();
  manifest["checksum"] = crc32_of(blob);
  manifest["tensors"] = std::move(tensors);
  detail::write_file(blob_path, blob);
  detail::write_text(manifest_path, manifest.dump(2) + "\n");
}

inline json read_manifest(const std::filesystem::path& manifest_path) {
  const auto bytes = detail::read_file(manifest_path);
  try {
    return json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw FormatError("manifest '" + manifest_path.string() + "' is not valid JSON: " + e.what());
  }
}

inline std::filesystem::path blob_path_of(const std::filesystem::path& manifest_path, const json& manifest) {
  if (!manifest.contains("blob") || !manifest["blob"].is_string()) {
    throw FormatError("manifest '" + manifest_path.string() + "' has no blob path");
  }
  return manifest_path.parent_path() / manifest["blob"].get<std::string>();
}

template <std::floating_point T>
Model<T> load_model(const std::filesystem::path& manifest_path, const std::filesystem::path& blob_path) {
  const json manifest = read_manifest(manifest_path);
  const std::string where = "manifest '" + manifest_path.string() + "'";
  if (!manifest.contains("format_version") || !manifest["format_version"].is_number_integer()) {
    throw FormatError(where + ": missing format_version");
  }
  if (const int v = manifest["format_version"].get<int>(); v != kFormatVersion) {
    throw FormatError(where + ": unknown format_version " + std::to_string(v));
  }
  ModelConfig cfg;
  try {
    cfg = config_from_json(manifest.at("config"));
  } catch (const json::exception& e) {
    throw FormatError(where + ": " + e.what());
  }
  const auto blob = detail::read_file(blob_path);
  const auto crc = crc32_of(blob);
  if (!manifest.contains("checksum") || !manifest["checksum"].is_number_unsigned() ||
      manifest["checksum"].get<std::uint64_t>() != crc) {
    throw ChecksumError("blob '" + blob_path.string() + "' checksum mismatch (computed " + std::to_string(crc) + ")");
  }

  std::map<std::string, Matrix<T>> found;
  try {
    for (const auto& d : manifest.at("tensors")) {
      const auto name = d.at("name").get<std::string>();
      const auto rows = d.at("rows").get<std::uint64_t>();
      const auto cols = d.at("cols").get<std::uint64_t>();
      const auto off = d.at("byte_offset").get<std::uint64_t>();
      const std::uint64_t bytes = rows * cols * 4;
      if (rows != 0 && bytes / rows / 4 != cols) throw FormatError(where + ": tensor '" + name + "' size overflows");
      if (off > blob.size() || bytes > blob.size() - off) {
        throw FormatError(where + ": tensor '" + name + "' shape " + std::to_string(rows) + "x" +
                          std::to_string(cols) + " at byte_offset " + std::to_string(off) +
                          " exceeds blob size " + std::to_string(blob.size()));
      }
      Matrix<T> m(rows, cols);
      for (std::size_t i = 0; i < m.size(); ++i) {
        const float f = detail::get_f32(blob, off + 4 * i);
        if (!std::isfinite(f)) {
          throw FormatError(where + ": tensor '" + name + "' has a non-finite value at byte " +
                            std::to_string(off + 4 * i));
        }
        m.data()[i] = static_cast<T>(f);
      }
      if (!found.emplace(name, std::move(m)).second) throw FormatError(where + ": duplicate tensor '" + name + "'");
    }
  } catch (const json::exception& e) {
    throw FormatError(where + ": bad tensor table: " + e.what());
  }

  auto take = [&](const std::string& name, std::size_t rows, std::size_t cols, bool optional) -> std::optional<Matrix<T>> {
    auto it = found.find(name);
    if (it == found.end()) {
      if (optional) return std::nullopt;
      throw FormatError(where + ": missing tensor '" + name + "'");
    }
    if (it->second.rows() != rows || it->second.cols() != cols) {
      throw FormatError(where + ": tensor '" + name + "' is " + std::to_string(it->second.rows()) + "x" +
                        std::to_string(it->second.cols()) + ", expected " + std::to_string(rows) + "x" +
                        std::to_string(cols));
    }
    auto m = std::move(it->second);
    found.erase(it);
    return m;
  };
  auto vec = [](const Matrix<T>& m, std::size_t r) { return std::vector<T>(m.row(r).begin(), m.row(r).end()); };

  const std::size_t d = cfg.dim;
  const std::size_t f = cfg.ff_dim();
  Model<T> model{cfg, {}, {}};
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const std::string p = "layer" + std::to_string(i) + ".";
    auto w = LayerWeights<T>::zeros(cfg);
    w.wq = *take(p + "wq", d, d, false);
    w.wk = *take(p + "wk", d, d, false);
    w.wv = *take(p + "wv", d, d, false);
    w.wo = *take(p + "wo", d, d, false);
    w.ff1 = *take(p + "ff1", d, f, false);
    w.ff2 = *take(p + "ff2", f, d, false);
    const auto n1 = *take(p + "norm1", 2, d, false);
    const auto n2 = *take(p + "norm2", 2, d, false);
    w.norm1_gain = vec(n1, 0);
    w.norm1_bias = vec(n1, 1);
    w.norm2_gain = vec(n2, 0);
    w.norm2_bias = vec(n2, 1);
    w.rezero_scale = (*take(p + "rezero", 1, 1, false))(0, 0);
    if (auto b = take(p + "bq", 1, d, true)) w.bq = vec(*b, 0);
    if (auto b = take(p + "bk", 1, d, true)) w.bk = vec(*b, 0);
    if (auto b = take(p + "bv", 1, d, true)) w.bv = vec(*b, 0);
    if (auto b = take(p + "bo", 1, d, true)) w.bo = vec(*b, 0);
    if (auto b = take(p + "ff1_bias", 1, f, true)) w.ff1_bias = vec(*b, 0);
    if (auto b = take(p + "ff2_bias", 1, d, true)) w.ff2_bias = vec(*b, 0);
    model.layers.push_back(std::move(w));
  }
  if (const std::size_t period = cfg.recycling_period(); period > 0) {
    model.recycling_table = *take("recycling_table", period, d, false);
  }
  if (!found.empty()) throw FormatError(where + ": unexpected tensor '" + found.begin()->first + "'");
  try {
    model.validate();
  } catch (const ConfigError& e) {
    throw FormatError(where + ": " + e.what());
  }
  return model;
}

template <std::floating_point T>
Model<T> load_model(const std::filesystem::path& manifest_path) {
  const auto manifest = read_manifest(manifest_path);
  return load_model<T>(manifest_path, blob_path_of(manifest_path, manifest));
}

// ---------------------------------------------------------------------------
// Token streams: "DCTS" | u32 precision (32) | u64 d | u64 count | count*d float32, all little-endian.

inline constexpr std::size_t kStreamHeaderBytes = 24;

template <std::floating_point T>
void save_stream(const std::filesystem::path& path, const Matrix<T>& tokens) {
  if (tokens.cols() == 0) throw FormatError("token stream needs d >= 1");
  std::vector<unsigned char> out{'D', 'C', 'T', 'S'};
  detail::put_u32(out, 32);
  detail::put_u64(out, tokens.cols());
  detail::put_u64(out, tokens.rows());
  out.reserve(kStreamHeaderBytes + 4 * tokens.size());
  for (T v : tokens.data()) detail::put_f32(out, v);
  detail::write_file(path, out);
}

template <std::floating_point T>
Matrix<T> load_stream(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  const std::string where = "token stream '" + path.string() + "'";
  if (bytes.size() < kStreamHeaderBytes || bytes[0] != 'D' || bytes[1] != 'C' || bytes[2] != 'T' || bytes[3] != 'S') {
    throw FormatError(where + ": missing DCTS header");
  }
  const auto precision = detail::get_u32(bytes, 4);
  if (precision != 32) throw FormatError(where + ": unsupported precision " + std::to_string(precision));
  const auto d = detail::get_u64(bytes, 8);
  const auto count = detail::get_u64(bytes, 16);
  if (d == 0) throw FormatError(where + ": d must be >= 1");
  const std::uint64_t payload = bytes.size() - kStreamHeaderBytes;
  if (count > payload / 4 / d || count * d * 4 != payload) {
    throw FormatError(where + ": payload is " + std::to_string(payload) + " bytes, header promises " +
                      std::to_string(count) + "x" + std::to_string(d) + " floats");
  }
  Matrix<T> m(count, d);
  for (std::size_t i = 0; i < m.size(); ++i) {
    const float f = detail::get_f32(bytes, kStreamHeaderBytes + 4 * i);
    if (!std::isfinite(f)) {
      throw FormatError(where + ": non-finite value at byte offset " + std::to_string(kStreamHeaderBytes + 4 * i));
    }
    m.data()[i] = static_cast<T>(f);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Reports (JSON, keys sorted)

inline json to_json(const DeltaReport& r) {
  json j;
  j["config"] = config_to_json(r.config);
  j["seed"] = r.seed;
  j["length"] = r.length;
  j["newest"] = r.newest;
  j["positions"] = r.positions;
  j["attention_delta"] = r.attention_delta;
  j["output_delta"] = r.output_delta;
  json diffs = json::array();
  for (const auto& m : r.attention_diff) {
    json rows = json::array();
    for (std::size_t i = 0; i < m.rows(); ++i) rows.push_back(std::vector<double>(m.row(i).begin(), m.row(i).end()));
    diffs.push_back(std::move(rows));
  }
  j["attention_diff"] = std::move(diffs);
  j["first_layer_reconstruction_error"] = r.first_layer_reconstruction_error;
  return j;
}

inline json to_json(const PropagationReport& r) {
  return {{"max_key_error", r.max_key_error},
          {"max_value_error", r.max_value_error},
          {"max_measured", r.max_measured},
          {"newest_query_gap", r.newest_query_gap}};
}

inline void save_report(const json& report, const std::filesystem::path& path) {
  detail::write_text(path, report.dump(2) + "\n");
}

inline void save_report(const DeltaReport& report, const std::filesystem::path& path) {
  save_report(to_json(report), path);
}

// ---------------------------------------------------------------------------
// Conversion of a non-continual config

struct ConversionResult {
  ModelConfig config;
  std::vector<std::string> warnings;
};

inline ConversionResult convert_config(const ModelConfig& in) {
  if (!is_circular(in.positional)) {
    throw ConfigError(
        "cannot convert: continual models need a circular positional embedding (one whose last and first "
        "positions are related, e.g. rope or recycling); absolute learned positions are not circular");
  }
  ConversionResult out{in, {}};
  out.config.mode = ExecutionMode::Continual;
  if (std::holds_alternative<NoPositional>(in.positional)) {
    out.warnings.push_back("model has no positional embedding; token order is only visible through the causal window");
  }
  if (in.mode == ExecutionMode::Continual) out.warnings.push_back("config is already continual");
  return out;
}

// Rewrites a manifest with a converted config. Tensors, checksum and blob are
// untouched; the blob reference is re-expressed relative to the new manifest.
inline std::vector<std::string> convert_manifest(const std::filesystem::path& in_manifest,
                                                 const std::filesystem::path& out_manifest) {
  auto manifest = read_manifest(in_manifest);
  ModelConfig cfg;
  try {
    cfg = config_from_json(manifest.at("config"));
  } catch (const json::exception& e) {
    throw FormatError("manifest '" + in_manifest.string() + "': " + e.what());
  }
  auto result = convert_config(cfg);
  const auto blob = std::filesystem::absolute(blob_path_of(in_manifest, manifest));
  const auto out_dir = std::filesystem::absolute(out_manifest).parent_path();
  manifest["config"] = config_to_json(result.config);
  manifest["blob"] = std::filesystem::relative(blob, out_dir).generic_string();
  detail::write_text(out_manifest, manifest.dump(2) + "\n");
  return result.warnings;
}

}  // namespace deepcot
