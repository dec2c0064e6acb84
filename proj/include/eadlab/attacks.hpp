#pragma once

// Momentum sign-gradient patch attacks on a Defender. Every attack ascends an
// objective J of the patch; dodging uses J = CE(y), impersonation
// J = -CE(target) with target = (y + 1) mod C.

#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "eadlab/env.hpp"
#include "eadlab/error.hpp"
#include "eadlab/models.hpp"
#include "eadlab/rng.hpp"
#include "eadlab/tensor.hpp"

namespace eadlab {

enum class AttackKind { mim, eot, usp_adaptive, perception_adaptive, policy_adaptive, pipeline_adaptive };
enum class Goal { dodging, impersonation };

inline std::string to_string(AttackKind k) {
  switch (k) {
    case AttackKind::mim: return "mim";
    case AttackKind::eot: return "eot";
    case AttackKind::usp_adaptive: return "usp_adaptive";
    case AttackKind::perception_adaptive: return "perception_adaptive";
    case AttackKind::policy_adaptive: return "policy_adaptive";
    case AttackKind::pipeline_adaptive: return "pipeline_adaptive";
  }
  return "?";
}

inline AttackKind parse_attack_kind(const std::string& s) {
  for (auto k : {AttackKind::mim, AttackKind::eot, AttackKind::usp_adaptive, AttackKind::perception_adaptive,
                 AttackKind::policy_adaptive, AttackKind::pipeline_adaptive}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown attack kind: " + s);
}

inline std::string to_string(Goal g) { return g == Goal::dodging ? "dodging" : "impersonation"; }

inline Goal parse_goal(const std::string& s) {
  if (s == "dodging") return Goal::dodging;
  if (s == "impersonation") return Goal::impersonation;
  throw ConfigError("unknown attack goal: " + s);
}

inline constexpr std::size_t kMaxPipelineHorizon = 8;

struct AttackConfig {
  AttackKind kind = AttackKind::eot;
  std::size_t iterations = 150;
  double alpha = 1.5 / 255.0;
  double momentum = 1.0;
  std::size_t eot_samples = 10;
  std::size_t horizon = 4;
  double lagrange_c = 100.0;
  Goal goal = Goal::dodging;
  std::uint64_t seed = 0;
  std::optional<double> epsilon;         // l_inf ball around the initial patch; off by default
  std::optional<StateBounds> eot_box;    // state box sampled by eot; defaults to the state bounds
  std::size_t patch_size = 10;

  void validate() const {
    if (!(alpha > 0.0)) throw ConfigError("attack: alpha must be > 0");
    if (momentum < 0.0) throw ConfigError("attack: momentum must be >= 0");
    if (eot_samples < 1) throw ConfigError("attack: eot_samples must be >= 1");
    if (horizon < 1) throw ConfigError("attack: horizon must be >= 1");
    if (kind == AttackKind::pipeline_adaptive && horizon > kMaxPipelineHorizon) {
      throw ConfigError("attack: pipeline_adaptive horizon must be <= 8");
    }
    if (epsilon && !(*epsilon > 0.0)) throw ConfigError("attack: epsilon must be > 0");
    if (patch_size == 0) throw ConfigError("attack: patch_size must be positive");
  }
};

// One attacked (scene, initial state) pair; id seeds all per-target randomness.
struct AttackTarget {
  const Scene* scene = nullptr;
  CameraState s1;
  std::size_t id = 0;
};

inline int goal_label(int label, Goal goal, std::size_t num_classes) {
  return goal == Goal::dodging ? label : static_cast<int>((static_cast<std::size_t>(label) + 1) % num_classes);
}

// Quantity the attacker ascends, averaged over rows.
inline Tensor task_objective(const Tensor& logits, int label, Goal goal) {
  const int y = goal_label(label, goal, logits.dim(1));
  const std::vector<int> labels(logits.dim(0), y);
  const Tensor ce = softmax_cross_entropy(logits, labels);
  return goal == Goal::dodging ? ce : neg(ce);
}

// ---------------------------------------------------------------------------
// MIM step

struct MimState {
  Patch patch;
  Tensor momentum;
};

// g' = mu g + grad / |grad|_1, p' = clamp01(p + alpha sign(g')). An all-zero
// gradient contributes nothing.
inline MimState mim_step(const Patch& p, const Tensor& grad, const Tensor& momentum_buf, double alpha, double mu) {
  if (grad.shape() != p.texels.shape() || momentum_buf.shape() != p.texels.shape()) {
    throw DimensionError("mim_step: patch, gradient and momentum shapes differ");
  }
  double l1 = 0.0;
  for (double g : grad.data()) l1 += std::abs(g);
  std::vector<double> buf(grad.size()), texels(grad.size());
  for (std::size_t i = 0; i < grad.size(); ++i) {
    buf[i] = mu * momentum_buf[i] + (l1 > 0.0 ? grad[i] / l1 : 0.0);
    const double s = buf[i] > 0.0 ? 1.0 : buf[i] < 0.0 ? -1.0 : 0.0;
    texels[i] = std::clamp(p.texels[i] + alpha * s, 0.0, 1.0);
  }
  return {Patch{Tensor(p.texels.shape(), std::move(texels))}, Tensor(grad.shape(), std::move(buf))};
}

inline Patch uniform_patch(std::size_t size, Rng& rng) {
  std::vector<double> v(size * size * 3);
  for (double& x : v) x = rng.uniform();
  return Patch{Tensor(Shape{size, size, 3}, std::move(v))};
}

// ---------------------------------------------------------------------------
// Objectives

struct ObjectiveValue {
  double total = 0.0;
  double loss_term = 0.0;
  double action_term = 0.0;  // policy_adaptive only: -mean_t |a_t|^2
  Tensor grad;               // dJ/dpatch
};

namespace detail {

inline Tensor sample_states(std::size_t m, const StateBounds& box, Rng& rng) {
  std::vector<double> v(2 * m);
  for (std::size_t i = 0; i < m; ++i) {
    v[2 * i] = rng.uniform(box.yaw_min, box.yaw_max);
    v[2 * i + 1] = rng.uniform(box.pitch_min, box.pitch_max);
  }
  return Tensor(Shape{m, 2}, std::move(v));
}

// Uniform superset of any policy: per-step actions cover the whole state range.
inline std::vector<Tensor> superset_actions(std::size_t m, std::size_t steps, const StateBounds& b, Rng& rng) {
  std::vector<Tensor> out;
  for (std::size_t t = 0; t < steps; ++t) out.push_back(sample_states(m, b, rng));
  return out;
}

inline Tensor repeat_state(const CameraState& s, std::size_t m) {
  return states_tensor(std::vector<CameraState>(m, s));
}

struct SurrogateDraw {
  Tensor s1;
  std::vector<Tensor> actions;
};

inline SurrogateDraw draw_surrogate(const AttackConfig& cfg, const StateBounds& bounds, Rng& rng) {
  SurrogateDraw d;
  d.s1 = sample_states(cfg.eot_samples, bounds, rng);
  d.actions = superset_actions(cfg.eot_samples, cfg.horizon - 1, bounds, rng);
  return d;
}

inline Trajectory surrogate_rollout(const Defender& d, const Scene& scene, const Patch* patch, const SurrogateDraw& draw,
                                    const AttackConfig& cfg, const StateBounds& bounds) {
  const std::size_t m = draw.s1.dim(0);
  RolloutOptions opt;
  opt.horizon = cfg.horizon;
  opt.bounds = bounds;
  opt.policy = [&](std::size_t t, const Tensor&) {
    return t < cfg.horizon ? draw.actions[t - 1] : Tensor(Shape{m, 2}, 0.0);
  };
  return rollout(d, std::vector<const Scene*>(m, &scene), std::vector<const Patch*>(m, patch), draw.s1, opt);
}

}  // namespace detail

// Evaluates the attack objective for `patch` and its patch gradient. Stochastic
// kinds draw their samples from `rng`.
inline ObjectiveValue attack_objective(const Defender& d, const AttackTarget& target, const Patch& patch,
                                       const AttackConfig& cfg, const StateBounds& bounds, Rng& rng) {
  const Scene& scene = *target.scene;
  const int label = scene.identity_label;
  Tape tape;
  const Patch p{tape.watch(patch.texels)};
  ObjectiveValue out;
  Tensor total;
  switch (cfg.kind) {
    case AttackKind::mim: {
      RolloutOptions opt;
      opt.horizon = cfg.horizon;
      opt.bounds = bounds;
      opt.movement = Movement::stationary;
      const auto traj = rollout(d, {&scene}, {&p}, detail::repeat_state(target.s1, 1), opt);
      total = task_objective(traj.back().logits, label, cfg.goal);
      break;
    }
    case AttackKind::eot: {
      const std::size_t m = cfg.eot_samples;
      const Tensor states = detail::sample_states(m, cfg.eot_box.value_or(bounds), rng);
      const Tensor obs = observe_batch(std::vector<const Scene*>(m, &scene), states, std::vector<const Patch*>(m, &p));
      total = task_objective(perceive(d, obs, initial_belief(d, m), 1).logits, label, cfg.goal);
      break;
    }
    case AttackKind::usp_adaptive: {
      const auto draw = detail::draw_surrogate(cfg, bounds, rng);
      const auto traj = detail::surrogate_rollout(d, scene, &p, draw, cfg, bounds);
      total = task_objective(traj.back().logits, label, cfg.goal);
      break;
    }
    case AttackKind::perception_adaptive: {
      const auto draw = detail::draw_surrogate(cfg, bounds, rng);
      const Patch benign = underlying_patch(scene, patch.height(), patch.width());
      const auto clean = detail::surrogate_rollout(d, scene, &benign, draw, cfg, bounds);
      const auto adv = detail::surrogate_rollout(d, scene, &p, draw, cfg, bounds);
      const Tensor diff = sub(adv.back().belief, clean.back().belief.detach());
      total = scale(sum(square(diff)), 1.0 / static_cast<double>(cfg.eot_samples));
      break;
    }
    case AttackKind::policy_adaptive: {
      // Stationary trajectory: the view at s1 is fed tau times.
      const Tensor obs = observe_batch({&scene}, detail::repeat_state(target.s1, 1), {&p});
      Tensor b = initial_belief(d, 1);
      Tensor logits;
      Tensor action_sq = Tensor::scalar(0.0);
      for (std::size_t t = 1; t <= cfg.horizon; ++t) {
        const auto per = perceive(d, obs, b, t);
        b = per.belief;
        logits = per.logits;
        action_sq = add(action_sq, sum(square(act(d, b))));
      }
      const Tensor loss_term = task_objective(logits, label, cfg.goal);
      const Tensor action_term = scale(action_sq, -1.0 / static_cast<double>(cfg.horizon));
      out.loss_term = loss_term.item();
      out.action_term = action_term.item();
      total = add(loss_term, scale(action_term, cfg.lagrange_c));
      break;
    }
    case AttackKind::pipeline_adaptive: {
      if (cfg.horizon > kMaxPipelineHorizon) throw ContractError("pipeline_adaptive: horizon must be <= 8");
      RolloutOptions opt;
      opt.horizon = cfg.horizon;
      opt.bounds = bounds;
      opt.movement = Movement::learned;
      const auto traj = rollout(d, {&scene}, {&p}, detail::repeat_state(target.s1, 1), opt);
      total = task_objective(traj.back().logits, label, cfg.goal);
      break;
    }
  }
  out.total = total.item();
  if (cfg.kind != AttackKind::policy_adaptive) out.loss_term = out.total;
  tape.backward(total);
  out.grad = Tensor(patch.texels.shape(), std::vector<double>(p.texels.grad().begin(), p.texels.grad().end()));
  return out;
}

struct AttackResult {
  Patch patch;
  std::vector<double> objective;    // value before each step
  std::vector<double> loss_terms;   // same, task part only
  std::vector<double> action_terms; // policy_adaptive action part
  double final_objective = 0.0;     // after the last step, on a fixed evaluation draw
};

inline AttackResult run_attack(const Defender& d, const AttackTarget& target, const AttackConfig& cfg,
                               const StateBounds& bounds, const Patch* initial = nullptr) {
  cfg.validate();
  if (!target.scene) throw ContractError("attack: target has no scene");
  Rng rng(derive_seed(cfg.seed, target.id));
  AttackResult r;
  r.patch = initial ? Patch{initial->texels.clone()} : uniform_patch(cfg.patch_size, rng);
  const Tensor start = r.patch.texels.clone();
  Tensor buf(r.patch.texels.shape(), 0.0);
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const auto v = attack_objective(d, target, r.patch, cfg, bounds, rng);
    r.objective.push_back(v.total);
    r.loss_terms.push_back(v.loss_term);
    r.action_terms.push_back(v.action_term);
    auto next = mim_step(r.patch, v.grad, buf, cfg.alpha, cfg.momentum);
    if (cfg.epsilon) {
      auto t = next.patch.texels.mutable_data();
      for (std::size_t i = 0; i < t.size(); ++i) {
        t[i] = std::clamp(t[i], std::max(0.0, start[i] - *cfg.epsilon), std::min(1.0, start[i] + *cfg.epsilon));
      }
    }
    r.patch = std::move(next.patch);
    buf = std::move(next.momentum);
  }
  Rng eval_rng(derive_seed(derive_seed(cfg.seed, target.id), "final"));
  r.final_objective = attack_objective(d, target, r.patch, cfg, bounds, eval_rng).total;
  return r;
}

// Runs `job(i)` for i in [0, n) on up to `jobs` threads; rethrows the first error.
template <class F>
void parallel_for(std::size_t n, std::size_t jobs, F&& job) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < jobs; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          job(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

inline std::vector<AttackResult> attack_all(const Defender& d, const std::vector<AttackTarget>& targets,
                                            const AttackConfig& cfg, const StateBounds& bounds, std::size_t jobs = 1) {
  std::vector<AttackResult> out(targets.size());
  parallel_for(targets.size(), jobs, [&](std::size_t i) { out[i] = run_attack(d, targets[i], cfg, bounds); });
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

// How the defender is queried: its final prediction after `horizon` steps from
// s1. Random movement draws from a stream seeded by (movement_seed, target id).
struct Protocol {
  std::size_t horizon = 4;
  StateBounds bounds;
  std::uint64_t movement_seed = 0;
};

// Per-step logits [B x C] for each target, with patches[i] applied (nullptr =
// clean). Detached from any tape.
inline std::vector<Tensor> protocol_logits(const Defender& d, const std::vector<AttackTarget>& targets,
                                           const std::vector<const Patch*>& patches, const Protocol& protocol) {
  if (targets.size() != patches.size()) throw ContractError("protocol rollout: one patch slot per target");
  if (targets.empty()) return std::vector<Tensor>(protocol.horizon, Tensor(Shape{0, d.config.num_classes}, 0.0));
  std::vector<const Scene*> scenes;
  std::vector<CameraState> s1;
  std::vector<Rng> rngs;
  for (const auto& t : targets) {
    scenes.push_back(t.scene);
    s1.push_back(t.s1);
    rngs.emplace_back(derive_seed(protocol.movement_seed, t.id));
  }
  RolloutOptions opt;
  opt.horizon = protocol.horizon;
  opt.bounds = protocol.bounds;
  if (d.config.movement == Movement::random) {
    opt.policy = [&](std::size_t, const Tensor&) {
      std::vector<double> v;
      for (auto& r : rngs) {
        v.push_back(r.uniform(-d.config.a_max, d.config.a_max));
        v.push_back(r.uniform(-d.config.a_max, d.config.a_max));
      }
      return Tensor(Shape{rngs.size(), 2}, std::move(v));
    };
  }
  Tape no_grad;  // keeps the rollout off any enclosing tape
  std::vector<Tensor> out;
  for (const auto& step : rollout(d, scenes, patches, states_tensor(s1), opt)) out.push_back(step.logits.detach());
  return out;
}

inline Tensor final_logits(const Defender& d, const std::vector<AttackTarget>& targets,
                           const std::vector<const Patch*>& patches, const Protocol& protocol) {
  return protocol_logits(d, targets, patches, protocol).back();
}

struct AsrRow {
  std::size_t scene_id = 0;
  Goal goal = Goal::dodging;
  bool success = false;
  double final_loss = 0.0;
  std::size_t iterations = 0;
};

struct AsrReport {
  std::vector<AsrRow> rows;

  double asr() const {
    if (rows.empty()) return 0.0;
    std::size_t s = 0;
    for (const auto& r : rows) s += r.success;
    return static_cast<double>(s) / static_cast<double>(rows.size());
  }
};

// final_loss is the cross-entropy towards the goal label: the true label when
// dodging, the target label when impersonating.
inline AsrReport evaluate_asr(const std::vector<Patch>& patches, const std::vector<AttackTarget>& targets,
                              const Defender& d, Goal goal, const Protocol& protocol, std::size_t iterations = 0) {
  if (patches.empty()) throw ContractError("evaluate_asr: no patches");
  if (patches.size() != targets.size()) throw ContractError("evaluate_asr: one patch per target required");
  std::vector<const Patch*> ptrs;
  for (const auto& p : patches) ptrs.push_back(&p);
  const Tensor logits = final_logits(d, targets, ptrs, protocol);
  const auto pred = argmax_rows(logits);
  AsrReport rep;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const int y = targets[i].scene->identity_label;
    const int want = goal_label(y, goal, d.config.num_classes);
    AsrRow row;
    row.scene_id = targets[i].id;
    row.goal = goal;
    row.success = goal == Goal::dodging ? pred[i] != y : pred[i] == want;
    row.final_loss = softmax_cross_entropy(slice_rows(logits, i, 1), std::vector<int>{want}).item();
    row.iterations = iterations;
    rep.rows.push_back(row);
  }
  return rep;
}

inline double accuracy(const Defender& d, const std::vector<AttackTarget>& targets,
                       const std::vector<const Patch*>& patches, const Protocol& protocol) {
  if (targets.empty()) throw ContractError("accuracy: no targets");
  const auto pred = argmax_rows(final_logits(d, targets, patches, protocol));
  std::size_t ok = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) ok += pred[i] == targets[i].scene->identity_label;
  return static_cast<double>(ok) / static_cast<double>(targets.size());
}

}  // namespace eadlab
