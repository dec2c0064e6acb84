#pragma once

// Persistence: versioned binary arrays (scenes, patches, checkpoints),
// key=value configs, schema-versioned CSV/JSON and git-style blob hashes.

#include <openssl/evp.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "eadlab/env.hpp"
#include "eadlab/error.hpp"
#include "eadlab/models.hpp"
#include "eadlab/tensor.hpp"
#include "json.hpp"

namespace eadlab {

namespace fs = std::filesystem;

inline constexpr std::string_view kSceneMagic = "EADSCN1";
inline constexpr std::string_view kPatchMagic = "EADPCH1";
inline constexpr std::string_view kCheckpointMagic = "EADCKP1";
inline constexpr std::string_view kSchemaVersion = "1.0";

// ---------------------------------------------------------------------------
// Bytes and hashes

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Writes via a sibling temp file and rename, so readers never see a torn file.
inline void write_file(const fs::path& path, std::string_view bytes) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

// SHA-1 of "blob <size>\0<bytes>", the identifier git assigns to file content.
inline std::string git_blob_hash(std::string_view bytes) {
  const std::string header = "blob " + std::to_string(bytes.size()) + '\0';
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx) throw IoError("sha1: context allocation failed");
  const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                  EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) == 1 && EVP_DigestFinal_ex(ctx, digest, &len) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) throw IoError("sha1: digest failed");
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int{digest[i]};
  return hex.str();
}

inline std::string file_hash(const fs::path& path) { return git_blob_hash(read_file(path)); }

namespace detail {
inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}
inline void put_f64(std::string& out, double d) {
  const auto v = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

class Reader {
 public:
  Reader(std::string_view bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}
  std::string_view take(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw IoError(what_ + ": truncated");
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint32_t u32() {
    auto s = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{static_cast<unsigned char>(s[i])} << (8 * i);
    return v;
  }
  double f64() {
    auto s = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{static_cast<unsigned char>(s[i])} << (8 * i);
    return std::bit_cast<double>(v);
  }
  bool done() const { return pos_ == bytes_.size(); }
  std::size_t position() const { return pos_; }

 private:
  std::string_view bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};
}  // namespace detail

// magic(7) | u32 rank | u32 dims[rank] | f64 values, all little-endian.
inline std::string encode_array(std::string_view magic, const Tensor& t) {
  std::string out(magic);
  detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
  for (double v : t.data()) detail::put_f64(out, v);
  return out;
}

inline Tensor decode_array(std::string_view magic, std::string_view bytes, const std::string& what) {
  detail::Reader r(bytes, what);
  if (r.take(magic.size()) != magic) throw IoError(what + ": bad magic, expected " + std::string(magic));
  const std::uint32_t rank = r.u32();
  if (rank > 8) throw IoError(what + ": implausible rank");
  Shape shape(rank);
  for (auto& d : shape) d = r.u32();
  std::vector<double> values(shape_size(shape));
  for (double& v : values) v = r.f64();
  if (!r.done()) throw IoError(what + ": trailing bytes");
  return Tensor(std::move(shape), std::move(values));
}

// ---------------------------------------------------------------------------
// key=value text

using KeyValues = std::map<std::string, std::string>;

inline KeyValues parse_key_values(std::string_view text, const std::string& what) {
  KeyValues kv;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(what + ":" + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(what + ":" + std::to_string(lineno) + ": empty key");
    if (kv.count(key)) throw ConfigError(what + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
    kv[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline std::string format_double(double v) {
  std::ostringstream ss;
  ss << std::setprecision(17) << v;
  return ss.str();
}

inline std::string format_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

// Typed view over a key=value config. Every key must be consumed by some
// getter before finish(), otherwise it is reported as unknown.
class Config {
 public:
  Config() = default;
  explicit Config(KeyValues kv, std::string source = "config") : kv_(std::move(kv)), source_(std::move(source)) {}

  static Config load(const fs::path& path) {
    if (!fs::exists(path)) throw IoError("config file not found: " + path.string());
    return Config(parse_key_values(read_file(path), path.string()), path.string());
  }

  bool has(const std::string& key) const { return kv_.count(key) > 0; }
  void set(const std::string& key, const std::string& value) { kv_[key] = value; }

  std::string get_string(const std::string& key, const std::string& fallback) {
    used_.insert(key);
    auto it = kv_.find(key);
    return it == kv_.end() ? fallback : it->second;
  }
  double get_double(const std::string& key, double fallback) {
    const std::string s = get_string(key, "");
    if (s.empty()) return fallback;
    try {
      std::size_t pos = 0;
      const double v = std::stod(s, &pos);
      if (pos != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ConfigError(source_ + ": '" + key + "' is not a number: " + s);
    }
  }
  long long get_int(const std::string& key, long long fallback) {
    const std::string s = get_string(key, "");
    if (s.empty()) return fallback;
    try {
      std::size_t pos = 0;
      const long long v = std::stoll(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ConfigError(source_ + ": '" + key + "' is not an integer: " + s);
    }
  }
  std::size_t get_size(const std::string& key, std::size_t fallback) {
    const long long v = get_int(key, static_cast<long long>(fallback));
    if (v < 0) throw ConfigError(source_ + ": '" + key + "' must be non-negative");
    return static_cast<std::size_t>(v);
  }
  bool get_bool(const std::string& key, bool fallback) {
    const std::string s = get_string(key, fallback ? "true" : "false");
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw ConfigError(source_ + ": '" + key + "' is not a boolean: " + s);
  }

  void finish() const {
    for (const auto& [k, v] : kv_) {
      if (!used_.count(k)) throw ConfigError(source_ + ": unknown key '" + k + "'");
    }
  }

  const KeyValues& values() const { return kv_; }

 private:
  KeyValues kv_;
  std::string source_ = "config";
  std::set<std::string> used_;
};

// ---------------------------------------------------------------------------
// Scenes and patches

inline KeyValues geometry_manifest(const Geometry& g) {
  return {{"image_size", std::to_string(g.image_size)},
          {"patch_size", std::to_string(g.patch_size)},
          {"camera_radius", format_double(g.camera_radius)},
          {"plane_half_extent", format_double(g.plane_half_extent)},
          {"anchor_x_min", format_double(g.anchor_x_min)},
          {"anchor_x_max", format_double(g.anchor_x_max)},
          {"anchor_y_min", format_double(g.anchor_y_min)},
          {"anchor_y_max", format_double(g.anchor_y_max)},
          {"yaw_min", format_double(g.bounds.yaw_min)},
          {"yaw_max", format_double(g.bounds.yaw_max)},
          {"pitch_min", format_double(g.bounds.pitch_min)},
          {"pitch_max", format_double(g.bounds.pitch_max)},
          {"a_max", format_double(g.a_max)}};
}

// Reads geometry keys from `c`, defaulting to `g`.
inline Geometry read_geometry(Config& c, Geometry g = {}) {
  g.image_size = c.get_size("image_size", g.image_size);
  g.texture_size = c.get_size("texture_size", g.texture_size);
  g.patch_size = c.get_size("patch_size", g.patch_size);
  g.camera_radius = c.get_double("camera_radius", g.camera_radius);
  g.plane_half_extent = c.get_double("plane_half_extent", g.plane_half_extent);
  g.anchor_x_min = c.get_double("anchor_x_min", g.anchor_x_min);
  g.anchor_x_max = c.get_double("anchor_x_max", g.anchor_x_max);
  g.anchor_y_min = c.get_double("anchor_y_min", g.anchor_y_min);
  g.anchor_y_max = c.get_double("anchor_y_max", g.anchor_y_max);
  g.bounds.yaw_min = c.get_double("yaw_min", g.bounds.yaw_min);
  g.bounds.yaw_max = c.get_double("yaw_max", g.bounds.yaw_max);
  g.bounds.pitch_min = c.get_double("pitch_min", g.bounds.pitch_min);
  g.bounds.pitch_max = c.get_double("pitch_max", g.bounds.pitch_max);
  g.a_max = c.get_double("a_max", g.a_max);
  return g;
}

// Writes <stem>.bin (texels) and <stem>.txt (label and geometry).
inline void save_scene(const fs::path& stem, const Scene& scene, const Geometry& g) {
  write_file(stem.string() + ".bin", encode_array(kSceneMagic, scene.base_texture));
  KeyValues kv = geometry_manifest(g);
  kv["format"] = std::string(kSceneMagic);
  kv["identity_label"] = std::to_string(scene.identity_label);
  kv["texture_size"] = std::to_string(scene.base_texture.dim(0));
  write_file(stem.string() + ".txt", format_key_values(kv));
}

struct LoadedScene {
  Scene scene;
  Geometry geometry;
};

inline LoadedScene load_scene(const fs::path& stem) {
  const std::string bin = stem.string() + ".bin", txt = stem.string() + ".txt";
  Config c(parse_key_values(read_file(txt), txt), txt);
  if (c.get_string("format", "") != kSceneMagic) throw IoError(txt + ": not a scene manifest");
  const int label = static_cast<int>(c.get_int("identity_label", -1));
  if (label < 0) throw IoError(txt + ": missing identity_label");
  const Geometry g = read_geometry(c);
  c.finish();
  Tensor texture = decode_array(kSceneMagic, read_file(bin), bin);
  if (texture.rank() != 3 || texture.dim(0) != g.texture_size) throw IoError(bin + ": texture shape disagrees with manifest");
  return {make_scene(label, std::move(texture), g), g};
}

inline void save_patch(const fs::path& path, const Patch& p) { write_file(path, encode_array(kPatchMagic, p.texels)); }

inline Patch load_patch(const fs::path& path) {
  Tensor t = decode_array(kPatchMagic, read_file(path), path.string());
  if (t.rank() != 3 || t.dim(2) != 3) throw IoError(path.string() + ": patch must be [Hp x Wp x 3]");
  return Patch{std::move(t)};
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// "EADCKP1\n", then text lines "meta <key> <value>" and
// "tensor <name> <d0>x<d1>... <offset> <count>", then "end\n", then the f64
// arrays back to back. Offsets are in bytes from the start of the array block.

using Meta = std::map<std::string, std::string>;

inline Meta model_meta(const ModelConfig& c) {
  return {{"model.input_size", std::to_string(c.input_size)},
          {"model.hidden", std::to_string(c.hidden)},
          {"model.feature", std::to_string(c.feature)},
          {"model.belief", std::to_string(c.belief)},
          {"model.num_classes", std::to_string(c.num_classes)},
          {"model.a_max", format_double(c.a_max)},
          {"model.fusion", c.fusion == Fusion::recurrent ? "recurrent" : "mean_pool"},
          {"model.movement", c.movement == Movement::learned  ? "learned"
                             : c.movement == Movement::random ? "random"
                                                              : "stationary"}};
}

inline std::string encode_checkpoint(const Defender& d, Meta meta = {}) {
  for (const auto& [k, v] : model_meta(d.config)) meta[k] = v;
  std::string header(kCheckpointMagic);
  header += "\n";
  for (const auto& [k, v] : meta) {
    if (k.find_first_of(" \n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw ContractError("checkpoint meta keys must not contain spaces or newlines");
    }
    header += "meta " + k + " " + v + "\n";
  }
  std::string arrays;
  for (const auto& p : d.parameters()) {
    std::string dims;
    for (std::size_t i = 0; i < p.value.rank(); ++i) dims += (i ? "x" : "") + std::to_string(p.value.dim(i));
    header += "tensor " + p.name + " " + dims + " " + std::to_string(arrays.size()) + " " +
              std::to_string(p.value.size()) + "\n";
    for (double v : p.value.data()) detail::put_f64(arrays, v);
  }
  header += "end\n";
  return header + arrays;
}

struct LoadedCheckpoint {
  Defender defender;
  Meta meta;
};

inline LoadedCheckpoint decode_checkpoint(std::string_view bytes, const std::string& what) {
  const auto end = bytes.find("\nend\n");
  if (bytes.substr(0, kCheckpointMagic.size() + 1) != std::string(kCheckpointMagic) + "\n" || end == std::string::npos) {
    throw IoError(what + ": not a checkpoint");
  }
  std::istringstream header{std::string(bytes.substr(kCheckpointMagic.size() + 1, end - kCheckpointMagic.size()))};
  const std::string_view block = bytes.substr(end + 5);
  Meta meta;
  struct Entry {
    Shape shape;
    std::size_t offset, count;
  };
  std::map<std::string, Entry> entries;
  std::string line;
  while (std::getline(header, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string kind, name;
    ls >> kind >> name;
    if (kind == "meta") {
      std::string value;
      std::getline(ls, value);
      meta[name] = value.empty() ? value : value.substr(1);
    } else if (kind == "tensor") {
      std::string dims;
      Entry e{};
      ls >> dims >> e.offset >> e.count;
      if (!ls) throw IoError(what + ": bad tensor line: " + line);
      std::istringstream ds(dims);
      std::string d;
      while (std::getline(ds, d, 'x')) e.shape.push_back(std::stoul(d));
      entries[name] = e;
    } else {
      throw IoError(what + ": unexpected header line: " + line);
    }
  }
  Config c(KeyValues(meta.begin(), meta.end()), what);
  ModelConfig mc;
  mc.input_size = c.get_size("model.input_size", mc.input_size);
  mc.hidden = c.get_size("model.hidden", mc.hidden);
  mc.feature = c.get_size("model.feature", mc.feature);
  mc.belief = c.get_size("model.belief", mc.belief);
  mc.num_classes = c.get_size("model.num_classes", mc.num_classes);
  mc.a_max = c.get_double("model.a_max", mc.a_max);
  const std::string fusion = c.get_string("model.fusion", "recurrent");
  const std::string movement = c.get_string("model.movement", "learned");
  if (fusion != "recurrent" && fusion != "mean_pool") throw IoError(what + ": unknown fusion " + fusion);
  mc.fusion = fusion == "recurrent" ? Fusion::recurrent : Fusion::mean_pool;
  if (movement == "learned") {
    mc.movement = Movement::learned;
  } else if (movement == "random") {
    mc.movement = Movement::random;
  } else if (movement == "stationary") {
    mc.movement = Movement::stationary;
  } else {
    throw IoError(what + ": unknown movement " + movement);
  }
  Defender d = make_defender(mc, 0);
  std::set<std::string> seen;
  for (const auto& p : d.parameters()) {
    auto it = entries.find(p.name);
    if (it == entries.end()) throw IoError(what + ": missing tensor " + p.name);
    const Entry& e = it->second;
    if (e.shape != p.value.shape() || e.count != p.value.size()) {
      throw IoError(what + ": tensor " + p.name + " has shape " + shape_str(e.shape) + ", expected " +
                    shape_str(p.value.shape()));
    }
    if (e.offset + 8 * e.count > block.size()) throw IoError(what + ": tensor " + p.name + " out of range");
    detail::Reader r(block.substr(e.offset, 8 * e.count), what);
    Tensor target = p.value;  // shares storage with d
    for (double& v : target.mutable_data()) v = r.f64();
    seen.insert(p.name);
  }
  if (seen.size() != entries.size()) throw IoError(what + ": unexpected extra tensors");
  for (const auto& [k, v] : model_meta(mc)) meta.erase(k);
  return {std::move(d), std::move(meta)};
}

inline void save_checkpoint(const fs::path& path, const Defender& d, const Meta& meta = {}) {
  write_file(path, encode_checkpoint(d, meta));
}

inline LoadedCheckpoint load_checkpoint(const fs::path& path) {
  return decode_checkpoint(read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Versioned CSV and JSON

inline std::string csv_header_line() { return "# schema_version=" + std::string(kSchemaVersion) + "\n"; }

inline void check_schema_version(const std::string& version, const std::string& what) {
  const auto dot = version.find('.');
  const std::string major = version.substr(0, dot);
  const std::string ours(kSchemaVersion.substr(0, kSchemaVersion.find('.')));
  if (major != ours) throw IoError(what + ": unsupported schema major version " + version);
}

struct CsvTable {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;
};

inline std::string format_csv(const CsvTable& t) {
  std::string out = csv_header_line();
  auto join = [](const std::vector<std::string>& cells) {
    std::string s;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (cells[i].find_first_of(",\n\"") != std::string::npos) throw ContractError("csv: cell needs quoting");
      s += (i ? "," : "") + cells[i];
    }
    return s + "\n";
  };
  out += join(t.columns);
  for (const auto& r : t.rows) {
    if (r.size() != t.columns.size()) throw ContractError("csv: row width disagrees with header");
    out += join(r);
  }
  return out;
}

inline CsvTable parse_csv(std::string_view text, const std::string& what) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line.rfind("# schema_version=", 0) != 0) throw IoError(what + ": missing schema_version");
  check_schema_version(line.substr(17), what);
  auto split = [](const std::string& l) {
    std::vector<std::string> cells;
    std::istringstream ls(l);
    std::string c;
    while (std::getline(ls, c, ',')) cells.push_back(c);
    if (!l.empty() && l.back() == ',') cells.emplace_back();
    return cells;
  };
  CsvTable t;
  if (!std::getline(in, line)) throw IoError(what + ": missing header row");
  t.columns = split(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split(line);
    if (cells.size() != t.columns.size()) throw IoError(what + ": ragged row");
    t.rows.push_back(std::move(cells));
  }
  return t;
}

using Json = nlohmann::json;

inline Json versioned_json() { return Json{{"schema_version", std::string(kSchemaVersion)}}; }

inline Json parse_versioned_json(std::string_view text, const std::string& what) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::exception& e) {
    throw IoError(what + ": " + e.what());
  }
  if (!j.is_object() || !j.contains("schema_version") || !j["schema_version"].is_string()) {
    throw IoError(what + ": missing schema_version");
  }
  check_schema_version(j["schema_version"].get<std::string>(), what);
  return j;
}

}  // namespace eadlab
