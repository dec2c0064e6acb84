#pragma once

// Procedural identity dataset: one textured scene per identity, and
// (scene, initial state) entries split into train and eval.

#include <cmath>
#include <numbers>
#include <vector>

#include "eadlab/env.hpp"
#include "eadlab/io.hpp"
#include "eadlab/rng.hpp"

namespace eadlab {

struct DataConfig {
  std::size_t num_identities = 8;
  std::size_t views = 8;
  double eval_fraction = 0.5;
  double identity_contrast = 0.05;
  std::uint64_t seed = 0;
  Geometry geometry;
};

struct Entry {
  std::size_t scene = 0;
  CameraState state;
};

struct Dataset {
  Geometry geometry;
  std::vector<Scene> scenes;  // scenes[k].identity_label == k
  std::vector<Entry> train;
  std::vector<Entry> eval;

  std::size_t num_classes() const { return scenes.size(); }
};

namespace detail {
inline std::vector<double> gaussian_kernel(double sigma) {
  const int radius = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(2 * radius + 1);
  double total = 0;
  for (int i = -radius; i <= radius; ++i) total += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : k) v /= total;
  return k;
}

// Zero-mean, unit-variance periodic Gaussian random field on a t x t grid.
inline std::vector<double> gaussian_field(std::size_t t, double sigma, Rng& rng) {
  std::vector<double> f(t * t);
  for (double& v : f) v = rng.normal();
  const auto k = gaussian_kernel(sigma);
  const int radius = static_cast<int>(k.size() / 2);
  const int n = static_cast<int>(t);
  for (int pass = 0; pass < 2; ++pass) {
    std::vector<double> g(t * t, 0.0);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < n; ++c)
        for (int i = -radius; i <= radius; ++i) {
          const int rr = pass == 0 ? r : ((r + i) % n + n) % n;
          const int cc = pass == 0 ? ((c + i) % n + n) % n : c;
          g[r * n + c] += k[i + radius] * f[rr * n + cc];
        }
    f = std::move(g);
  }
  double mean = 0, var = 0;
  for (double v : f) mean += v;
  mean /= static_cast<double>(f.size());
  for (double v : f) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(f.size()));
  for (double& v : f) v = (v - mean) / sd;
  return f;
}
}  // namespace detail

// A coloured Gaussian field shared by all identities plus a low-contrast
// identity-specific field and oriented grating. `contrast` scales the
// identity part; small values give small class margins.
inline Tensor identity_texture(std::size_t identity, std::size_t t, std::uint64_t seed, double contrast) {
  Rng shared(derive_seed(seed, "shared-texture"));
  Rng rng(derive_seed(seed, identity));
  std::vector<double> v(t * t * 3);
  const double angle = std::numbers::pi * static_cast<double>(identity) / 8.0 + rng.uniform(-0.1, 0.1);
  const double freq = 2.0 + static_cast<double>(identity % 3);
  for (std::size_t ch = 0; ch < 3; ++ch) {
    const auto base = detail::gaussian_field(t, 0.06 * static_cast<double>(t), shared);
    const auto own = detail::gaussian_field(t, 0.1 * static_cast<double>(t), rng);
    const double phase = rng.uniform(0, 2 * std::numbers::pi);
    for (std::size_t r = 0; r < t; ++r)
      for (std::size_t c = 0; c < t; ++c) {
        const double x = (static_cast<double>(c) + 0.5) / static_cast<double>(t);
        const double y = (static_cast<double>(r) + 0.5) / static_cast<double>(t);
        const double u = std::cos(angle) * x + std::sin(angle) * y;
        const double grating = std::sin(2 * std::numbers::pi * freq * u + phase);
        const double value = 0.5 + 0.15 * base[r * t + c] + contrast * (own[r * t + c] + grating);
        v[(r * t + c) * 3 + ch] = std::clamp(value, 0.0, 1.0);
      }
  }
  return Tensor(Shape{t, t, 3}, std::move(v));
}

inline CameraState uniform_state(const StateBounds& b, Rng& rng) {
  return {rng.uniform(b.yaw_min, b.yaw_max), rng.uniform(b.pitch_min, b.pitch_max)};
}

inline Dataset generate_dataset(const DataConfig& cfg) {
  if (cfg.num_identities < 2) throw ConfigError("dataset: need at least 2 identities");
  if (cfg.views == 0) throw ConfigError("dataset: views must be positive");
  if (cfg.eval_fraction < 0.0 || cfg.eval_fraction > 1.0) throw ConfigError("dataset: eval_fraction outside [0, 1]");
  Dataset ds;
  ds.geometry = cfg.geometry;
  for (std::size_t k = 0; k < cfg.num_identities; ++k) {
    ds.scenes.push_back(make_scene(static_cast<int>(k),
                                   identity_texture(k, cfg.geometry.texture_size, cfg.seed, cfg.identity_contrast), cfg.geometry));
  }
  Rng rng(derive_seed(cfg.seed, "views"));
  const auto n_eval = static_cast<std::size_t>(std::lround(cfg.eval_fraction * static_cast<double>(cfg.views)));
  for (std::size_t k = 0; k < cfg.num_identities; ++k) {
    for (std::size_t v = 0; v < cfg.views; ++v) {
      const Entry e{k, uniform_state(cfg.geometry.bounds, rng)};
      (v < n_eval ? ds.eval : ds.train).push_back(e);
    }
  }
  return ds;
}

inline CsvTable split_table(const Dataset& ds) {
  CsvTable t{{"split", "scene", "yaw", "pitch"}, {}};
  for (const auto* part : {&ds.train, &ds.eval}) {
    for (const auto& e : *part) {
      t.rows.push_back({part == &ds.train ? "train" : "eval", std::to_string(e.scene), format_double(e.state.yaw),
                        format_double(e.state.pitch)});
    }
  }
  return t;
}

inline std::string split_hash(const Dataset& ds) { return git_blob_hash(format_csv(split_table(ds))); }

inline std::string scene_stem(std::size_t k) {
  std::ostringstream ss;
  ss << "scene_" << std::setw(3) << std::setfill('0') << k;
  return ss.str();
}

// Files written, relative to dir.
inline std::vector<std::string> save_dataset(const fs::path& dir, const Dataset& ds) {
  fs::create_directories(dir);
  std::vector<std::string> files;
  for (std::size_t k = 0; k < ds.scenes.size(); ++k) {
    save_scene(dir / scene_stem(k), ds.scenes[k], ds.geometry);
    files.push_back(scene_stem(k) + ".bin");
    files.push_back(scene_stem(k) + ".txt");
  }
  const std::string split = format_csv(split_table(ds));
  write_file(dir / "split.csv", split);
  write_file(dir / "split_hash.txt", git_blob_hash(split) + "\n");
  files.push_back("split.csv");
  files.push_back("split_hash.txt");
  return files;
}

inline Dataset load_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("dataset directory not found: " + dir.string());
  Dataset ds;
  for (std::size_t k = 0; fs::exists(dir / (scene_stem(k) + ".bin")); ++k) {
    auto loaded = load_scene(dir / scene_stem(k));
    if (loaded.scene.identity_label != static_cast<int>(k)) throw IoError("dataset: scene label/index mismatch");
    if (k == 0) ds.geometry = loaded.geometry;
    ds.scenes.push_back(std::move(loaded.scene));
  }
  if (ds.scenes.empty()) throw IoError("dataset: no scenes in " + dir.string());
  const auto table = parse_csv(read_file(dir / "split.csv"), (dir / "split.csv").string());
  if (table.columns != std::vector<std::string>{"split", "scene", "yaw", "pitch"}) throw IoError("split.csv: bad columns");
  for (const auto& r : table.rows) {
    Entry e{std::stoul(r[1]), {std::stod(r[2]), std::stod(r[3])}};
    if (e.scene >= ds.scenes.size()) throw IoError("split.csv: scene index out of range");
    if (r[0] == "train") {
      ds.train.push_back(e);
    } else if (r[0] == "eval") {
      ds.eval.push_back(e);
    } else {
      throw IoError("split.csv: unknown split " + r[0]);
    }
  }
  return ds;
}

}  // namespace eadlab
