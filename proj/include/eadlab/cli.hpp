#pragma once

// Batch commands behind tools/eadlab. Each command writes one run directory
// <out>/<command>-<id8>/ where id8 is the first 8 hex digits of the hash of
// the effective config and input hashes. Work happens in a staging directory
// that is renamed into place on success; on failure the run directory holds
// only manifest.json with outcome "failed".

#include <chrono>
#include <cstdlib>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "eadlab/attacks.hpp"
#include "eadlab/data.hpp"
#include "eadlab/diag.hpp"
#include "eadlab/io.hpp"
#include "eadlab/train.hpp"

namespace eadlab::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kConfig = 2, kRuntime = 3, kDiagnosticFailed = 4 };

struct Options {
  fs::path config;
  fs::path data;
  fs::path out = "runs";
  fs::path checkpoint;
  fs::path patches;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
  std::string mode;  // diagnose only
};

struct RunManifest {
  std::string command;
  KeyValues config;
  std::uint64_t rng_seed = 0;
  std::map<std::string, std::string> inputs;     // name -> content hash
  std::map<std::string, std::string> artifacts;  // path relative to the run dir -> content hash
  double wall_time_s = 0.0;
  std::string outcome = "failed";
  std::string error;
  Json extra = Json::object();
  fs::path dir;

  Json to_json() const {
    Json j = versioned_json();
    j["command"] = command;
    j["config"] = config;
    j["rng_seed"] = rng_seed;
    j["inputs"] = inputs;
    j["artifacts"] = artifacts;
    j["wall_time_s"] = wall_time_s;
    j["outcome"] = outcome;
    if (!error.empty()) j["error"] = error;
    if (!extra.empty()) j["extra"] = extra;
    return j;
  }
};

inline constexpr const char* kManifestName = "manifest.json";

// Records the effective value of every key read so that the snapshot (and the
// run id) covers defaults as well as explicit settings.
class ConfigReader {
 public:
  explicit ConfigReader(Config c) : c_(std::move(c)) {}

  double num(const std::string& key, double fallback) { return record(key, c_.get_double(key, fallback)); }
  std::size_t size(const std::string& key, std::size_t fallback) { return record(key, c_.get_size(key, fallback)); }
  bool flag(const std::string& key, bool fallback) {
    const bool v = c_.get_bool(key, fallback);
    snapshot_[key] = v ? "true" : "false";
    return v;
  }
  std::string str(const std::string& key, const std::string& fallback) {
    return snapshot_[key] = c_.get_string(key, fallback);
  }
  std::optional<double> optional_num(const std::string& key) {
    if (!c_.has(key)) {
      c_.get_string(key, "");
      snapshot_[key] = "";
      return std::nullopt;
    }
    return record(key, c_.get_double(key, 0.0));
  }
  std::uint64_t seed(const Options& o) {
    const auto from_config = static_cast<std::uint64_t>(c_.get_size("seed", 0));
    const auto v = o.seed ? *o.seed : from_config;
    snapshot_["seed"] = std::to_string(v);
    return v;
  }
  Geometry geometry(const Geometry& g = {}) {
    const Geometry out = read_geometry(c_, g);
    for (const auto& [k, v] : geometry_manifest(out)) snapshot_[k] = v;
    snapshot_["texture_size"] = std::to_string(out.texture_size);
    return out;
  }
  void note(const std::string& key, const std::string& value) { snapshot_[key] = value; }
  void finish() const { c_.finish(); }
  const KeyValues& snapshot() const { return snapshot_; }

 private:
  double record(const std::string& key, double v) {
    snapshot_[key] = format_double(v);
    return v;
  }
  std::size_t record(const std::string& key, std::size_t v) {
    snapshot_[key] = std::to_string(v);
    return v;
  }

  Config c_;
  KeyValues snapshot_;
};

inline Config load_config(const fs::path& path, bool required) {
  if (path.empty()) {
    if (required) throw ConfigError("--config is required for this command");
    return Config(KeyValues{}, "defaults");
  }
  if (!fs::is_regular_file(path)) throw ConfigError("config file not found: " + path.string());
  return Config::load(path);
}

inline fs::path require_path(const fs::path& p, const char* flag) {
  if (p.empty()) throw ConfigError(std::string(flag) + " is required for this command");
  return p;
}

// Hash over "<name> <blob hash>" lines of every regular file under dir
// except run manifests, which carry wall time.
inline std::string directory_digest(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("directory not found: " + dir.string());
  std::vector<std::string> lines;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file() || e.path().filename() == kManifestName) continue;
    lines.push_back(fs::relative(e.path(), dir).generic_string() + " " + file_hash(e.path()));
  }
  std::sort(lines.begin(), lines.end());
  std::string all;
  for (const auto& l : lines) all += l + "\n";
  return git_blob_hash(all);
}

inline std::optional<std::string> read_outcome(const fs::path& dir) {
  const fs::path m = dir / kManifestName;
  if (!fs::exists(m)) return std::nullopt;
  try {
    return parse_versioned_json(read_file(m), m.string()).value("outcome", std::string());
  } catch (const Error&) {
    return std::string();
  }
}

class Run {
 public:
  Run(const std::string& command, KeyValues snapshot, std::uint64_t seed, std::map<std::string, std::string> inputs,
      const fs::path& out_root)
      : t0_(std::chrono::steady_clock::now()) {
    m_.command = command;
    m_.config = std::move(snapshot);
    m_.rng_seed = seed;
    m_.inputs = std::move(inputs);
    std::string id = "command=" + command + "\n" + format_key_values(m_.config);
    for (const auto& [k, v] : m_.inputs) id += "input." + k + "=" + v + "\n";
    const std::string name = command + "-" + git_blob_hash(id).substr(0, 8);
    final_ = out_root / name;
    staging_ = out_root / ("." + name + ".staging");
    if (fs::exists(final_)) {
      const auto outcome = read_outcome(final_);
      if (!outcome || *outcome != "failed") {
        throw IoError("run directory already exists: " + final_.string());
      }
    }
    fs::create_directories(out_root);
    fs::remove_all(staging_);
    fs::create_directories(staging_);
  }

  const fs::path& staging() const { return staging_; }
  RunManifest& manifest() { return m_; }

  void artifact(const std::string& rel, std::string_view bytes) {
    write_file(staging_ / rel, bytes);
    m_.artifacts[rel] = git_blob_hash(bytes);
  }
  // Records a file already written into the staging directory.
  void record(const std::string& rel) { m_.artifacts[rel] = file_hash(staging_ / rel); }

  RunManifest commit(const std::string& outcome) {
    m_.outcome = outcome;
    m_.wall_time_s = seconds();
    write_file(staging_ / kManifestName, m_.to_json().dump(2) + "\n");
    fs::remove_all(final_);
    fs::rename(staging_, final_);
    m_.dir = final_;
    return m_;
  }

  void fail(const std::string& message) noexcept {
    try {
      m_.outcome = "failed";
      m_.error = message;
      m_.artifacts.clear();
      m_.wall_time_s = seconds();
      fs::remove_all(staging_);
      fs::remove_all(final_);
      fs::create_directories(final_);
      write_file(final_ / kManifestName, m_.to_json().dump(2) + "\n");
      m_.dir = final_;
    } catch (...) {
    }
  }

  template <class F>
  RunManifest execute(F&& body) {
    try {
      m_.outcome = "success";
      body(*this);
      return commit(m_.outcome);
    } catch (const std::exception& e) {
      fail(e.what());
      throw;
    }
  }

 private:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
  }

  RunManifest m_;
  fs::path final_, staging_;
  std::chrono::steady_clock::time_point t0_;
};

// ---------------------------------------------------------------------------
// Config sections shared by several commands

inline ModelConfig read_model(ConfigReader& r, const Dataset& ds, const std::string& prefix = "") {
  ModelConfig m;
  m.input_size = ds.geometry.image_size * ds.geometry.image_size * 3;
  m.num_classes = ds.num_classes();
  m.a_max = ds.geometry.a_max;
  m.hidden = r.size(prefix + "hidden", m.hidden);
  m.feature = r.size(prefix + "feature", m.feature);
  m.belief = r.size(prefix + "belief", m.belief);
  const std::string fusion = r.str(prefix + "fusion", "recurrent");
  if (fusion == "recurrent") {
    m.fusion = Fusion::recurrent;
  } else if (fusion == "mean_pool") {
    m.fusion = Fusion::mean_pool;
  } else {
    throw ConfigError("fusion must be recurrent or mean_pool, got " + fusion);
  }
  const std::string movement = r.str(prefix + "movement", "learned");
  if (movement == "learned") {
    m.movement = Movement::learned;
  } else if (movement == "random") {
    m.movement = Movement::random;
  } else if (movement == "stationary") {
    m.movement = Movement::stationary;
  } else {
    throw ConfigError("movement must be learned, random or stationary, got " + movement);
  }
  return m;
}

inline TrainConfig read_train(ConfigReader& r, std::uint64_t seed) {
  TrainConfig t;
  t.epochs_offline = r.size("epochs_offline", t.epochs_offline);
  t.epochs_online = r.size("epochs_online", t.epochs_online);
  t.lr_offline = r.num("lr_offline", t.lr_offline);
  t.lr_online = r.num("lr_online", t.lr_online);
  t.batch_size = r.size("batch_size", t.batch_size);
  t.batch_size_online = r.size("batch_size_online", t.batch_size_online);
  t.batches_per_epoch = r.size("batches_per_epoch", t.batches_per_epoch);
  t.horizon = r.size("horizon", t.horizon);
  t.r_patch = r.num("r_patch", t.r_patch);
  t.offline_usap = r.flag("offline_usap", t.offline_usap);
  t.freeze_policy = r.flag("freeze_policy", t.freeze_policy);
  t.patch_size = r.size("patch_size", t.patch_size);
  t.noise_std = r.num("noise_std", t.noise_std);
  t.seed = seed;
  t.validate();
  return t;
}

inline AttackConfig read_attack(ConfigReader& r, std::uint64_t seed, const std::string& prefix = "",
                                AttackKind kind = AttackKind::eot) {
  AttackConfig a;
  a.kind = parse_attack_kind(r.str(prefix + "kind", to_string(kind)));
  a.iterations = r.size(prefix + "iterations", a.iterations);
  a.alpha = r.num(prefix + "alpha", a.alpha);
  a.momentum = r.num(prefix + "momentum", a.momentum);
  a.eot_samples = r.size(prefix + "eot_samples", a.eot_samples);
  a.horizon = r.size(prefix + "horizon", a.horizon);
  a.lagrange_c = r.num(prefix + "lagrange_c", a.lagrange_c);
  a.goal = parse_goal(r.str(prefix + "goal", to_string(a.goal)));
  a.epsilon = r.optional_num(prefix + "epsilon");
  a.patch_size = r.size(prefix + "patch_size", a.patch_size);
  a.seed = derive_seed(seed, "attack");
  a.validate();
  return a;
}

inline Protocol eval_protocol(const Dataset& ds, std::size_t horizon, std::uint64_t seed) {
  Protocol p;
  p.horizon = horizon;
  p.bounds = ds.geometry.bounds;
  p.movement_seed = derive_seed(seed, "eval-movement");
  return p;
}

inline std::string patch_name(std::size_t id) {
  std::ostringstream ss;
  ss << "patch_" << std::setw(4) << std::setfill('0') << id << ".bin";
  return ss.str();
}

inline CsvTable asr_table(const AsrReport& rep) {
  CsvTable t{{"scene_id", "goal", "success", "final_loss", "iterations"}, {}};
  for (const auto& r : rep.rows) {
    t.rows.push_back({std::to_string(r.scene_id), to_string(r.goal), r.success ? "1" : "0", format_double(r.final_loss),
                      std::to_string(r.iterations)});
  }
  return t;
}

inline LoadedCheckpoint checkpoint_for(const fs::path& path, const Dataset& ds) {
  auto ck = load_checkpoint(path);
  if (ck.defender.config.num_classes != ds.num_classes() ||
      ck.defender.config.input_size != ds.geometry.image_size * ds.geometry.image_size * 3) {
    throw ConfigError("checkpoint does not match the dataset's classes or image size");
  }
  return ck;
}

// ---------------------------------------------------------------------------
// Commands

inline RunManifest cmd_gen_data(const Options& o) {
  ConfigReader r(load_config(o.config, true));
  DataConfig cfg;
  cfg.num_identities = r.size("num_identities", cfg.num_identities);
  cfg.views = r.size("views", cfg.views);
  cfg.eval_fraction = r.num("eval_fraction", cfg.eval_fraction);
  cfg.identity_contrast = r.num("identity_contrast", cfg.identity_contrast);
  cfg.geometry = r.geometry(cfg.geometry);
  cfg.seed = r.seed(o);
  r.finish();
  const Dataset ds = generate_dataset(cfg);  // validates
  Run run("gen-data", r.snapshot(), cfg.seed, {}, o.out);
  return run.execute([&](Run& run) {
    for (const auto& f : save_dataset(run.staging(), ds)) run.record(f);
    run.manifest().extra["split_hash"] = split_hash(ds);
  });
}

inline RunManifest cmd_train(const Options& o) {
  ConfigReader r(load_config(o.config, true));
  const fs::path data = require_path(o.data, "--data");
  const Dataset ds = load_dataset(data);
  const std::uint64_t seed = r.seed(o);
  const ModelConfig mc = read_model(r, ds);
  const TrainConfig tc = read_train(r, seed);
  r.finish();
  if (tc.epochs_online > 0) {
    if (tc.horizon % 2 != 0) throw ConfigError("train: online horizon must be even");
    if (mc.movement != Movement::learned) throw ConfigError("train: online phase needs movement = learned");
  }
  Defender d = make_defender(mc, seed);
  Run run("train", r.snapshot(), seed, {{"data", directory_digest(data)}}, o.out);
  return run.execute([&](Run& run) {
    Json wall = Json::array();
    auto stats = train_offline(ds, d, tc);
    run.artifact("offline.ckpt", encode_checkpoint(d, {{"phase", "offline"}, {"seed", std::to_string(seed)}}));
    const auto online = train_online(ds, d, tc);
    run.artifact("online.ckpt", encode_checkpoint(d, {{"phase", "online"}, {"seed", std::to_string(seed)}}));
    stats.epochs.insert(stats.epochs.end(), online.epochs.begin(), online.epochs.end());
    run.artifact("metrics.csv", format_csv(metrics_table(stats.epochs)));
    for (const auto& e : stats.epochs) wall.push_back(e.wall_ms);
    run.manifest().extra["epoch_wall_ms"] = wall;
    run.manifest().extra["optimizer_steps"] = stats.optimizer_steps + online.optimizer_steps;
  });
}

inline RunManifest cmd_attack(const Options& o) {
  ConfigReader r(load_config(o.config, true));
  const fs::path data = require_path(o.data, "--data"), ckpt = require_path(o.checkpoint, "--checkpoint");
  const Dataset ds = load_dataset(data);
  const std::uint64_t seed = r.seed(o);
  const AttackConfig ac = read_attack(r, seed);
  const std::size_t count = r.size("targets", 0);
  const std::size_t horizon = r.size("eval_horizon", 4);
  r.finish();
  const Defender d = checkpoint_for(ckpt, ds).defender;
  const auto targets = spread_targets(ds, count);
  Run run("attack", r.snapshot(), seed, {{"data", directory_digest(data)}, {"checkpoint", file_hash(ckpt)}}, o.out);
  return run.execute([&](Run& run) {
    std::vector<Patch> patches;
    for (auto& res : attack_all(d, targets, ac, ds.geometry.bounds, o.jobs)) patches.push_back(std::move(res.patch));
    fs::create_directories(run.staging() / "patches");
    for (std::size_t i = 0; i < targets.size(); ++i) {
      run.artifact("patches/" + patch_name(targets[i].id), encode_array(kPatchMagic, patches[i].texels));
    }
    const auto rep = evaluate_asr(patches, targets, d, ac.goal, eval_protocol(ds, horizon, seed), ac.iterations);
    run.artifact("asr.csv", format_csv(asr_table(rep)));
    run.manifest().extra["asr"] = rep.asr();
  });
}

inline RunManifest cmd_eval(const Options& o) {
  ConfigReader r(load_config(o.config, false));
  const fs::path data = require_path(o.data, "--data"), ckpt = require_path(o.checkpoint, "--checkpoint");
  const Dataset ds = load_dataset(data);
  const std::uint64_t seed = r.seed(o);
  const std::size_t horizon = r.size("horizon", 4);
  r.finish();
  const Defender d = checkpoint_for(ckpt, ds).defender;
  const auto targets = eval_targets(ds);
  std::map<std::string, std::string> inputs{{"data", directory_digest(data)}, {"checkpoint", file_hash(ckpt)}};
  fs::path patch_dir;
  if (!o.patches.empty()) {
    patch_dir = fs::is_directory(o.patches / "patches") ? o.patches / "patches" : o.patches;
    inputs["patches"] = directory_digest(patch_dir);
  }
  Run run("eval", r.snapshot(), seed, inputs, o.out);
  return run.execute([&](Run& run) {
    const Protocol protocol = eval_protocol(ds, horizon, seed);
    Json summary = versioned_json();
    summary["n_targets"] = targets.size();
    summary["clean_acc"] = accuracy(d, targets, std::vector<const Patch*>(targets.size(), nullptr), protocol);
    if (!patch_dir.empty()) {
      std::vector<AttackTarget> hit;
      std::vector<Patch> patches;
      for (const auto& t : targets) {
        const fs::path p = patch_dir / patch_name(t.id);
        if (!fs::exists(p)) continue;
        hit.push_back(t);
        patches.push_back(load_patch(p));
      }
      if (hit.empty()) throw IoError("no patch files for any eval target in " + patch_dir.string());
      std::vector<const Patch*> ptrs;
      for (const auto& p : patches) ptrs.push_back(&p);
      summary["n_patched"] = hit.size();
      summary["patched_acc"] = accuracy(d, hit, ptrs, protocol);
    }
    run.artifact("eval.json", summary.dump(2) + "\n");
    run.manifest().extra = summary;
  });
}

inline RunManifest cmd_ablate(const Options& o) {
  ConfigReader r(load_config(o.config, true));
  const fs::path data = require_path(o.data, "--data");
  const Dataset ds = load_dataset(data);
  const std::uint64_t seed = r.seed(o);
  AblationConfig cfg;
  cfg.model = read_model(r, ds);
  cfg.train = read_train(r, seed);
  cfg.eot = read_attack(r, seed, "eot_", AttackKind::eot);
  cfg.usp = read_attack(r, seed, "usp_", AttackKind::usp_adaptive);
  cfg.eval_targets = r.size("eval_targets", 0);
  cfg.jobs = o.jobs;
  cfg.model_seed = seed;
  r.finish();
  if (cfg.train.horizon % 2 != 0) throw ConfigError("ablate: horizon must be even");
  Run run("ablate", r.snapshot(), seed, {{"data", directory_digest(data)}}, o.out);
  return run.execute([&](Run& run) {
    const auto rep = ablation_suite(ds, cfg);
    run.artifact("ablation.csv", format_csv(ablation_table(rep)));
    fs::create_directories(run.staging() / "models");
    for (std::size_t i = 0; i < rep.rows.size(); ++i) {
      run.artifact("models/" + rep.rows[i].variant + ".ckpt",
                   encode_checkpoint(rep.models[i], {{"variant", rep.rows[i].variant}}));
    }
  });
}

inline std::vector<std::size_t> parse_sizes(const std::string& text, const std::string& key) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t pos = 0;
      const long long v = std::stoll(item, &pos);
      if (pos != item.size() || v <= 0) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ConfigError("'" + key + "' must be a comma-separated list of positive integers: " + text);
    }
  }
  if (out.empty()) throw ConfigError("'" + key + "' is empty");
  return out;
}

inline DiagReport entropy_report(const Dataset& ds, const Defender& d, std::size_t count, std::size_t horizon,
                                 std::size_t resamples, bool usap, std::uint64_t seed) {
  const auto targets = spread_targets(ds, count);
  std::vector<Patch> patches;
  std::vector<const Patch*> ptrs(targets.size(), nullptr);
  if (usap) {
    for (const auto& t : targets) {
      Rng rng(derive_seed(derive_seed(seed, "usap-eval"), t.id));
      patches.push_back(sample_usap_patch(ds.geometry.patch_size, ds.geometry.patch_size, rng));
    }
    for (std::size_t i = 0; i < targets.size(); ++i) ptrs[i] = &patches[i];
  }
  const auto tr = entropy_trace(d, targets, ptrs, eval_protocol(ds, horizon, seed), resamples, seed);
  DiagReport r{"entropy", targets.size()};
  r.worst_case = tr.mean.back() - tr.mean.front();
  r.pass = tr.mean.back() <= tr.mean.front();
  for (std::size_t t = 0; t < tr.mean.size(); ++t) {
    r.details.push_back({{"step", t + 1}, {"mean", tr.mean[t]}, {"lo", tr.lo[t]}, {"hi", tr.hi[t]},
                         {"half_width", tr.half_width[t]}});
  }
  r.summary = {{"patched", usap ? "usap" : "clean"}, {"endpoint_cis_disjoint", tr.hi.back() < tr.lo.front()}};
  return r;
}

inline RunManifest cmd_diagnose(const Options& o) {
  ConfigReader r(load_config(o.config, false));
  const std::uint64_t seed = r.seed(o);
  r.note("mode", o.mode);
  std::map<std::string, std::string> inputs;
  std::function<DiagReport()> check;
  if (o.mode == "identity" || o.mode == "greedy") {
    const std::size_t n = r.size("instances", 20);
    check = [n, seed, mode = o.mode] { return mode == "identity" ? identity_report(n, seed) : greedy_report(n, seed); };
  } else if (o.mode == "infonce") {
    const std::size_t n = r.size("instances", 50), batches = r.size("batches", 200);
    const auto ks = parse_sizes(r.str("k_values", "2,4,8,16"), "k_values");
    check = [=] { return infonce_report(n, seed, ks, batches); };
  } else if (o.mode == "entropy") {
    const fs::path data = require_path(o.data, "--data"), ckpt = require_path(o.checkpoint, "--checkpoint");
    auto ds = std::make_shared<Dataset>(load_dataset(data));
    auto d = std::make_shared<Defender>(checkpoint_for(ckpt, *ds).defender);
    const std::size_t count = r.size("targets", 0), horizon = r.size("horizon", 4);
    const std::size_t resamples = r.size("resamples", 1000);
    const std::string patched = r.str("patched", "clean");
    if (patched != "clean" && patched != "usap") throw ConfigError("patched must be clean or usap, got " + patched);
    inputs = {{"data", directory_digest(data)}, {"checkpoint", file_hash(ckpt)}};
    check = [=] { return entropy_report(*ds, *d, count, horizon, resamples, patched == "usap", seed); };
  } else {
    throw ConfigError("diagnose mode must be entropy, infonce, identity or greedy, got '" + o.mode + "'");
  }
  r.finish();
  Run run("diagnose", r.snapshot(), seed, inputs, o.out);
  return run.execute([&](Run& run) {
    const DiagReport rep = check();
    run.artifact("diag.json", rep.to_json().dump(2) + "\n");
    run.manifest().extra["pass"] = rep.pass;
    if (!rep.pass) run.manifest().outcome = "diagnostic_failed";
  });
}

// ---------------------------------------------------------------------------
// Entry point

inline std::size_t default_jobs() {
  const char* env = std::getenv("EADLAB_JOBS");
  if (!env || !*env) return 1;
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(env, &pos);
    if (pos == std::string(env).size() && v >= 1) return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
  }
  throw ConfigError(std::string("EADLAB_JOBS must be a positive integer, got '") + env + "'");
}

inline int exit_code(const RunManifest& m) {
  if (m.outcome == "success") return kOk;
  return m.outcome == "diagnostic_failed" ? kDiagnosticFailed : kRuntime;
}

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Embodied active defense lab: data generation, training, attacks, evaluation and diagnostics"};
  app.name("eadlab");
  app.require_subcommand(1);
  Options o;
  std::uint64_t seed = 0;
  std::size_t jobs = 0;
  std::vector<std::pair<CLI::App*, RunManifest (*)(const Options&)>> commands;
  auto add = [&](const std::string& name, const std::string& help, RunManifest (*fn)(const Options&)) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config, "key=value config file");
    sub->add_option("--data", o.data, "dataset directory (a gen-data run directory)");
    sub->add_option("--out", o.out, "root for run directories")->capture_default_str();
    sub->add_option("--checkpoint", o.checkpoint, "EADCKP1 checkpoint");
    sub->add_option("--seed", seed, "overrides the config seed");
    sub->add_option("--jobs", jobs, "worker threads (default: $EADLAB_JOBS or 1)")->check(CLI::PositiveNumber);
    commands.emplace_back(sub, fn);
    return sub;
  };
  add("gen-data", "generate identity scenes and train/eval splits", cmd_gen_data);
  add("train", "offline then online training; writes checkpoints and metrics", cmd_train);
  add("attack", "optimize one patch per eval target and report ASR", cmd_attack);
  add("eval", "clean and patched accuracy", cmd_eval)->add_option("--patches", o.patches, "patch directory");
  add("ablate", "train and attack the four ablation variants", cmd_ablate);
  CLI::App* diag = add("diagnose", "information-theoretic checks; exit 4 when a check fails", cmd_diagnose);
  diag->add_option("mode", o.mode, "entropy | infonce | identity | greedy")
      ->required()
      ->check(CLI::IsMember({"entropy", "infonce", "identity", "greedy"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "eadlab: " << e.what() << "\n\n" << app.help();
    return kUsage;
  }

  for (const auto& [sub, fn] : commands) {
    if (!sub->parsed()) continue;
    try {
      if (sub->get_option("--seed")->count()) o.seed = seed;
      o.jobs = sub->get_option("--jobs")->count() ? jobs : default_jobs();
      const RunManifest m = fn(o);
      out << m.dir.string() << "\n";
      return exit_code(m);
    } catch (const ConfigError& e) {
      err << "eadlab " << sub->get_name() << ": config error: " << e.what() << "\n";
      return kConfig;
    } catch (const std::exception& e) {
      err << "eadlab " << sub->get_name() << ": error: " << e.what() << "\n";
      return kRuntime;
    }
  }
  return kUsage;
}

}  // namespace eadlab::cli
