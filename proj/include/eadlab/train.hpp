#pragma once

// Two-phase training of a Defender: an offline perception phase on
// random-action trajectories, then the online phase that updates perception
// and policy every second step on a two-step graph.

#include <chrono>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "eadlab/attacks.hpp"
#include "eadlab/data.hpp"
#include "eadlab/error.hpp"
#include "eadlab/models.hpp"
#include "eadlab/optim.hpp"
#include "eadlab/rng.hpp"

namespace eadlab {

struct TrainConfig {
  std::size_t epochs_offline = 50;
  std::size_t epochs_online = 50;
  double lr_offline = 1e-3;
  double lr_online = 1.5e-4;
  std::size_t batch_size = 64;         // offline
  std::size_t batch_size_online = 48;
  std::size_t batches_per_epoch = 0;   // 0: one pass over the training entries
  std::size_t horizon = 4;
  double r_patch = 0.4;
  bool offline_usap = true;
  bool freeze_policy = false;
  std::size_t patch_size = 10;
  double noise_std = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (r_patch < 0.0 || r_patch > 1.0) throw ConfigError("train: r_patch must lie in [0, 1]");
    if (horizon == 0) throw ConfigError("train: horizon must be >= 1");
    if (batch_size == 0 || batch_size_online == 0) throw ConfigError("train: batch sizes must be positive");
    if (lr_offline < 0.0 || lr_online < 0.0) throw ConfigError("train: learning rates must be >= 0");
    if (noise_std < 0.0) throw ConfigError("train: noise_std must be >= 0");
  }
};

struct EpochMetrics {
  std::size_t epoch = 0;
  std::string phase;
  double loss = 0.0;
  double clean_acc = std::numeric_limits<double>::quiet_NaN();
  double patched_acc = std::numeric_limits<double>::quiet_NaN();
  double wall_ms = 0.0;
  double patched_fraction = 0.0;
};

struct TrainStats {
  std::vector<EpochMetrics> epochs;
  std::size_t optimizer_steps = 0;
  std::size_t trajectories = 0;
};

// i.i.d. U(0, 1) texels.
inline Patch sample_usap_patch(std::size_t rows, std::size_t cols, Rng& rng) {
  std::vector<double> v(rows * cols * 3);
  for (double& x : v) x = rng.uniform();
  return Patch{Tensor(Shape{rows, cols, 3}, std::move(v))};
}

namespace detail {

struct Batch {
  std::vector<const Scene*> scenes;
  std::vector<int> labels;
  std::vector<Patch> patch_storage;
  std::vector<const Patch*> patches;
  std::vector<bool> patched;
  Tensor s0;
};

inline std::size_t batches_per_epoch(const TrainConfig& cfg, const Dataset& ds, std::size_t batch) {
  if (cfg.batches_per_epoch > 0) return cfg.batches_per_epoch;
  return std::max<std::size_t>(1, (ds.train.size() + batch - 1) / batch);
}

// Scenes come from shuffled training entries; initial states are fresh draws
// from the state box; each sample is patched with probability r_patch.
inline Batch make_batch(const Dataset& ds, std::vector<std::size_t>& order, std::size_t& cursor, std::size_t size,
                        double r_patch, std::size_t patch_size, Rng& rng) {
  Batch b;
  b.patch_storage.reserve(size);
  std::vector<CameraState> s0;
  for (std::size_t i = 0; i < size; ++i) {
    if (cursor == order.size()) {
      rng.shuffle(order);
      cursor = 0;
    }
    const Entry& e = ds.train[order[cursor++]];
    b.scenes.push_back(&ds.scenes[e.scene]);
    b.labels.push_back(ds.scenes[e.scene].identity_label);
    s0.push_back(uniform_state(ds.geometry.bounds, rng));
    const bool patched = rng.bernoulli(r_patch);
    b.patched.push_back(patched);
    if (patched) b.patch_storage.push_back(sample_usap_patch(patch_size, patch_size, rng));
  }
  std::size_t k = 0;
  for (bool p : b.patched) b.patches.push_back(p ? &b.patch_storage[k++] : nullptr);
  b.s0 = states_tensor(s0);
  return b;
}

struct SplitAccuracy {
  std::size_t clean_ok = 0, clean_n = 0, patched_ok = 0, patched_n = 0;

  void add(const Tensor& logits, const Batch& b) {
    const auto pred = argmax_rows(logits);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const bool ok = pred[i] == b.labels[i];
      if (b.patched[i]) {
        ++patched_n;
        patched_ok += ok;
      } else {
        ++clean_n;
        clean_ok += ok;
      }
    }
  }
  void write(EpochMetrics& m) const {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    m.clean_acc = clean_n ? static_cast<double>(clean_ok) / static_cast<double>(clean_n) : nan;
    m.patched_acc = patched_n ? static_cast<double>(patched_ok) / static_cast<double>(patched_n) : nan;
    m.patched_fraction = static_cast<double>(patched_n) / static_cast<double>(std::max<std::size_t>(1, clean_n + patched_n));
  }
};

inline std::vector<Tensor> parameter_tensors(const std::vector<NamedTensor>& named) {
  std::vector<Tensor> out;
  for (const auto& n : named) out.push_back(n.value);
  return out;
}

inline double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

// Perception-only training: BPTT through tau random-action steps, loss averaged
// over all steps. Policy parameters are untouched.
inline TrainStats train_offline(const Dataset& ds, Defender& d, const TrainConfig& cfg) {
  cfg.validate();
  if (ds.train.empty()) throw ConfigError("train: empty training split");
  Rng rng(derive_seed(cfg.seed, "offline"));
  Optimizer opt({OptimizerConfig::Kind::adam, cfg.lr_offline});
  auto params = detail::parameter_tensors(d.perception_parameters());
  std::vector<std::size_t> order(ds.train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = order.size();
  const double r_patch = cfg.offline_usap ? cfg.r_patch : 0.0;
  TrainStats stats;
  for (std::size_t epoch = 0; epoch < cfg.epochs_offline; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochMetrics m;
    m.epoch = epoch;
    m.phase = "offline";
    detail::SplitAccuracy acc;
    const std::size_t nb = detail::batches_per_epoch(cfg, ds, cfg.batch_size);
    for (std::size_t bi = 0; bi < nb; ++bi) {
      const auto batch = detail::make_batch(ds, order, cursor, cfg.batch_size, r_patch, cfg.patch_size, rng);
      Tape tape;
      const Defender w = d.watch(tape, true, false);
      RolloutOptions ro;
      ro.horizon = cfg.horizon;
      ro.bounds = ds.geometry.bounds;
      ro.movement = Movement::random;
      ro.action_rng = &rng;
      ro.noise = {cfg.noise_std, &rng};
      const auto traj = rollout(w, batch.scenes, batch.patches, batch.s0, ro);
      Tensor loss = Tensor::scalar(0.0);
      for (const auto& step : traj) loss = add(loss, softmax_cross_entropy(step.logits, batch.labels));
      loss = scale(loss, 1.0 / static_cast<double>(traj.size()));
      for (auto& p : params) p.zero_grad();
      tape.backward(loss);
      opt.step(params);
      ++stats.optimizer_steps;
      ++stats.trajectories;
      m.loss += loss.item() / static_cast<double>(nb);
      acc.add(traj.back().logits, batch);
    }
    acc.write(m);
    m.wall_ms = detail::elapsed_ms(t0);
    stats.epochs.push_back(m);
  }
  return stats;
}

// Online phase. Per trajectory and window (t, t+1): the entering belief and
// state are constants; b_t = f(o_t, b_{t-1}), a_t = pi(b_t),
// s_{t+1} = T(s_t, a_t), and the loss at t+1 is backpropagated to theta and
// phi before a single optimizer step. tau must be even.
inline TrainStats train_online(const Dataset& ds, Defender& d, const TrainConfig& cfg) {
  cfg.validate();
  if (cfg.horizon % 2 != 0) throw ConfigError("train: online horizon must be even");
  if (ds.train.empty()) throw ConfigError("train: empty training split");
  if (d.config.movement != Movement::learned) throw ConfigError("train: online phase needs a learned policy");
  Rng rng(derive_seed(cfg.seed, "online"));
  Optimizer opt({OptimizerConfig::Kind::adam, cfg.lr_online});
  auto named = d.perception_parameters();
  if (!cfg.freeze_policy) {
    for (auto& p : d.policy_parameters()) named.push_back(p);
  }
  auto params = detail::parameter_tensors(named);
  std::vector<std::size_t> order(ds.train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = order.size();
  const StateBounds& bounds = ds.geometry.bounds;
  TrainStats stats;
  for (std::size_t epoch = 0; epoch < cfg.epochs_online; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochMetrics m;
    m.epoch = epoch;
    m.phase = "online";
    detail::SplitAccuracy acc;
    const std::size_t nb = detail::batches_per_epoch(cfg, ds, cfg.batch_size_online);
    std::size_t windows = 0;
    for (std::size_t bi = 0; bi < nb; ++bi) {
      const auto batch =
          detail::make_batch(ds, order, cursor, cfg.batch_size_online, cfg.r_patch, cfg.patch_size, rng);
      const std::size_t n = batch.scenes.size();
      Tensor state = batch.s0;
      Tensor belief = initial_belief(d, n);
      Tensor last_logits;
      for (std::size_t t = 1; t < cfg.horizon; t += 2) {
        Tensor loss;
        {
          Tape tape;
          const Defender w = d.watch(tape, true, !cfg.freeze_policy);
          const ObservationNoise noise{cfg.noise_std, &rng};
          const auto p_t = perceive(w, observe_batch(batch.scenes, state, batch.patches, noise), belief, t);
          const Tensor next_state = transition(state, act(w, p_t.belief), bounds);
          const auto p_t1 = perceive(w, observe_batch(batch.scenes, next_state, batch.patches, noise), p_t.belief, t + 1);
          loss = softmax_cross_entropy(p_t1.logits, batch.labels);
          for (auto& p : params) p.zero_grad();
          tape.backward(loss);
          state = next_state.detach();
          belief = p_t1.belief.detach();
          last_logits = p_t1.logits.detach();
        }
        opt.step(params);
        ++stats.optimizer_steps;
        ++windows;
        m.loss += loss.item();
        // Move on from t+1 with the updated policy.
        if (t + 1 < cfg.horizon) state = transition(state, act(d, belief), bounds);
      }
      ++stats.trajectories;
      acc.add(last_logits, batch);
    }
    m.loss /= static_cast<double>(std::max<std::size_t>(1, windows));
    acc.write(m);
    m.wall_ms = detail::elapsed_ms(t0);
    stats.epochs.push_back(m);
  }
  return stats;
}

// Wall time stays out of the table so that reruns produce identical bytes.
inline CsvTable metrics_table(const std::vector<EpochMetrics>& epochs) {
  CsvTable t{{"epoch", "phase", "loss", "clean_acc", "patched_acc"}, {}};
  for (const auto& e : epochs) {
    t.rows.push_back({std::to_string(e.epoch), e.phase, format_double(e.loss), format_double(e.clean_acc),
                      format_double(e.patched_acc)});
  }
  return t;
}

// ---------------------------------------------------------------------------
// Ablation

inline std::vector<AttackTarget> eval_targets(const Dataset& ds, std::size_t limit = 0) {
  std::vector<AttackTarget> out;
  for (std::size_t i = 0; i < ds.eval.size(); ++i) {
    if (limit && out.size() == limit) break;
    out.push_back({&ds.scenes[ds.eval[i].scene], ds.eval[i].state, i});
  }
  return out;
}

// Every k-th eval entry so that a prefix-limited subset stays class-balanced.
inline std::vector<AttackTarget> spread_targets(const Dataset& ds, std::size_t count) {
  const auto all = eval_targets(ds);
  if (count == 0 || count >= all.size()) return all;
  std::vector<AttackTarget> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(all[i * all.size() / count]);
  return out;
}

struct AblationConfig {
  TrainConfig train;
  ModelConfig model;
  AttackConfig eot;
  AttackConfig usp;
  std::size_t eval_targets = 0;  // 0: all eval entries
  std::size_t jobs = 1;
  std::uint64_t model_seed = 0;
};

struct AblationRow {
  std::string variant;
  double clean_acc = 0.0;
  double asr_eot = 0.0;
  double asr_usp = 0.0;
  std::string split_hash;
};

struct AblationReport {
  std::vector<AblationRow> rows;
  std::vector<Defender> models;  // aligned with rows
};

inline CsvTable ablation_table(const AblationReport& r) {
  CsvTable t{{"variant", "clean_acc", "asr_eot", "asr_usp_adaptive", "split_hash"}, {}};
  for (const auto& row : r.rows) {
    t.rows.push_back({row.variant, format_double(row.clean_acc), format_double(row.asr_eot),
                      format_double(row.asr_usp), row.split_hash});
  }
  return t;
}

// Random Movement (mean-pooled features, random actions), Perception
// (recurrent, random actions), +Policy (online phase on clean data), +USAP
// (both phases with uniform patches). All share the dataset and seeds.
inline AblationReport ablation_suite(const Dataset& ds, const AblationConfig& cfg) {
  const std::string hash = split_hash(ds);
  const auto targets = spread_targets(ds, cfg.eval_targets);
  TrainConfig clean = cfg.train;
  clean.offline_usap = false;
  clean.r_patch = 0.0;

  ModelConfig pooled = cfg.model;
  pooled.fusion = Fusion::mean_pool;
  pooled.movement = Movement::random;
  pooled.belief = pooled.feature;
  Defender random_movement = make_defender(pooled, cfg.model_seed);
  train_offline(ds, random_movement, clean);

  ModelConfig recurrent = cfg.model;
  recurrent.fusion = Fusion::recurrent;
  recurrent.movement = Movement::random;
  Defender perception = make_defender(recurrent, cfg.model_seed);
  train_offline(ds, perception, clean);

  Defender with_policy = perception.clone();
  with_policy.config.movement = Movement::learned;
  train_online(ds, with_policy, clean);

  ModelConfig full_cfg = recurrent;
  full_cfg.movement = Movement::learned;
  Defender full = make_defender(full_cfg, cfg.model_seed);
  train_offline(ds, full, cfg.train);
  train_online(ds, full, cfg.train);

  AblationReport rep;
  const std::vector<std::pair<std::string, Defender*>> variants{
      {"random_movement", &random_movement}, {"perception", &perception}, {"policy", &with_policy}, {"usap", &full}};
  Protocol protocol;
  protocol.horizon = cfg.train.horizon;
  protocol.bounds = ds.geometry.bounds;
  protocol.movement_seed = derive_seed(cfg.train.seed, "eval-movement");
  for (const auto& [name, model] : variants) {
    AblationRow row;
    row.variant = name;
    row.split_hash = hash;
    row.clean_acc = accuracy(*model, targets, std::vector<const Patch*>(targets.size(), nullptr), protocol);
    auto patches_of = [&](const AttackConfig& a) {
      std::vector<Patch> out;
      for (auto& r : attack_all(*model, targets, a, ds.geometry.bounds, cfg.jobs)) out.push_back(std::move(r.patch));
      return out;
    };
    row.asr_eot = evaluate_asr(patches_of(cfg.eot), targets, *model, cfg.eot.goal, protocol).asr();
    row.asr_usp = evaluate_asr(patches_of(cfg.usp), targets, *model, cfg.usp.goal, protocol).asr();
    rep.rows.push_back(row);
    rep.models.push_back(*model);
  }
  return rep;
}

}  // namespace eadlab
