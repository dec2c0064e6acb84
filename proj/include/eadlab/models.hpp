#pragma once

// Defender: recurrent perception model f(o, b) -> (logits, b') and bounded
// deterministic policy pi(b) -> a. All functions are batched over rows.

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "eadlab/env.hpp"
#include "eadlab/error.hpp"
#include "eadlab/rng.hpp"
#include "eadlab/tensor.hpp"

namespace eadlab {

enum class Fusion { recurrent, mean_pool };
enum class Movement { learned, random, stationary };

struct ModelConfig {
  std::size_t input_size = 32 * 32 * 3;
  std::size_t hidden = 128;
  std::size_t feature = 64;
  std::size_t belief = 64;
  std::size_t num_classes = 8;
  double a_max = 0.175;
  Fusion fusion = Fusion::recurrent;
  Movement movement = Movement::learned;
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct Defender {
  ModelConfig config;
  // theta
  Tensor enc_w1, enc_b1, enc_w2, enc_b2;
  Tensor gru_wzx, gru_wzh, gru_bz;
  Tensor gru_wrx, gru_wrh, gru_br;
  Tensor gru_wnx, gru_wnh, gru_bn;
  Tensor head_w, head_b;
  // phi
  Tensor pol_w, pol_b;

  std::vector<NamedTensor> perception_parameters() const {
    std::vector<NamedTensor> p{{"enc_w1", enc_w1}, {"enc_b1", enc_b1}, {"enc_w2", enc_w2}, {"enc_b2", enc_b2}};
    if (config.fusion == Fusion::recurrent) {
      p.insert(p.end(), {{"gru_wzx", gru_wzx}, {"gru_wzh", gru_wzh}, {"gru_bz", gru_bz}, {"gru_wrx", gru_wrx},
                         {"gru_wrh", gru_wrh}, {"gru_br", gru_br}, {"gru_wnx", gru_wnx}, {"gru_wnh", gru_wnh},
                         {"gru_bn", gru_bn}});
    }
    p.insert(p.end(), {{"head_w", head_w}, {"head_b", head_b}});
    return p;
  }

  std::vector<NamedTensor> policy_parameters() const { return {{"pol_w", pol_w}, {"pol_b", pol_b}}; }

  std::vector<NamedTensor> parameters() const {
    auto p = perception_parameters();
    for (auto& q : policy_parameters()) p.push_back(std::move(q));
    return p;
  }

  // Deep copy; the result shares no storage with *this.
  Defender clone() const {
    Defender d = *this;
    d.for_each([](Tensor& t) { t = t.clone(); });
    return d;
  }

  // Leaves on `tape` sharing storage with these parameters, so gradients land
  // in this Defender's storages.
  Defender watch(Tape& tape, bool perception = true, bool policy = true) const {
    Defender d = *this;
    if (perception) {
      for (Tensor* t : d.perception_slots()) *t = tape.watch(*t);
    }
    if (policy) {
      d.pol_w = tape.watch(d.pol_w);
      d.pol_b = tape.watch(d.pol_b);
    }
    return d;
  }

  template <class F>
  void for_each(F&& f) {
    for (Tensor* t : all_slots()) f(*t);
  }

 private:
  std::vector<Tensor*> perception_slots() {
    std::vector<Tensor*> s{&enc_w1, &enc_b1, &enc_w2, &enc_b2};
    if (config.fusion == Fusion::recurrent) {
      s.insert(s.end(), {&gru_wzx, &gru_wzh, &gru_bz, &gru_wrx, &gru_wrh, &gru_br, &gru_wnx, &gru_wnh, &gru_bn});
    }
    s.insert(s.end(), {&head_w, &head_b});
    return s;
  }
  std::vector<Tensor*> all_slots() {
    auto s = perception_slots();
    s.push_back(&pol_w);
    s.push_back(&pol_b);
    return s;
  }
};

namespace detail {
inline Tensor uniform_init(Shape shape, double bound, Rng& rng) {
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(v));
}
}  // namespace detail

// Encoder and fusion weights ~ U(+-1/sqrt(fan_in)); biases and both heads zero.
inline Defender make_defender(const ModelConfig& cfg, std::uint64_t seed) {
  if (cfg.fusion == Fusion::mean_pool && cfg.feature != cfg.belief) {
    throw ConfigError("mean-pool fusion needs feature width == belief width");
  }
  if (cfg.num_classes < 2 || cfg.a_max <= 0.0) throw ConfigError("model: need >= 2 classes and a_max > 0");
  Rng rng(seed);
  auto w = [&](std::size_t in, std::size_t out) {
    return detail::uniform_init(Shape{in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  };
  Defender d;
  d.config = cfg;
  d.enc_w1 = w(cfg.input_size, cfg.hidden);
  d.enc_b1 = Tensor(Shape{cfg.hidden}, 0.0);
  d.enc_w2 = w(cfg.hidden, cfg.feature);
  d.enc_b2 = Tensor(Shape{cfg.feature}, 0.0);
  d.gru_wzx = w(cfg.feature, cfg.belief);
  d.gru_wzh = w(cfg.belief, cfg.belief);
  d.gru_bz = Tensor(Shape{cfg.belief}, 0.0);
  d.gru_wrx = w(cfg.feature, cfg.belief);
  d.gru_wrh = w(cfg.belief, cfg.belief);
  d.gru_br = Tensor(Shape{cfg.belief}, 0.0);
  d.gru_wnx = w(cfg.feature, cfg.belief);
  d.gru_wnh = w(cfg.belief, cfg.belief);
  d.gru_bn = Tensor(Shape{cfg.belief}, 0.0);
  d.head_w = Tensor(Shape{cfg.belief, cfg.num_classes}, 0.0);
  d.head_b = Tensor(Shape{cfg.num_classes}, 0.0);
  d.pol_w = Tensor(Shape{cfg.belief, 2}, 0.0);
  d.pol_b = Tensor(Shape{2}, 0.0);
  return d;
}

inline Tensor initial_belief(const Defender& d, std::size_t batch) { return Tensor(Shape{batch, d.config.belief}, 0.0); }

struct Perception {
  Tensor logits;  // [B x C]
  Tensor belief;  // [B x D]
};

// obs: [B x input_size] in [0, 1]; step is 1-based and only used by mean pooling.
inline Perception perceive(const Defender& d, const Tensor& obs, const Tensor& belief_prev, std::size_t step) {
  const auto& c = d.config;
  if (obs.rank() != 2 || obs.dim(1) != c.input_size) {
    throw DimensionError("perceive: observations must be [B x " + std::to_string(c.input_size) + "]");
  }
  if (belief_prev.rank() != 2 || belief_prev.dim(0) != obs.dim(0) || belief_prev.dim(1) != c.belief) {
    throw DimensionError("perceive: belief must be [B x " + std::to_string(c.belief) + "]");
  }
  if (step == 0) throw ContractError("perceive: step is 1-based");
  const Tensor h = relu(add_bias(matmul(add_scalar(obs, -0.5), d.enc_w1), d.enc_b1));
  const Tensor f = tanh(add_bias(matmul(h, d.enc_w2), d.enc_b2));
  Tensor b;
  if (c.fusion == Fusion::recurrent) {
    const Tensor z = sigmoid(add_bias(add(matmul(f, d.gru_wzx), matmul(belief_prev, d.gru_wzh)), d.gru_bz));
    const Tensor r = sigmoid(add_bias(add(matmul(f, d.gru_wrx), matmul(belief_prev, d.gru_wrh)), d.gru_br));
    const Tensor n =
        tanh(add_bias(add(matmul(f, d.gru_wnx), matmul(mul(r, belief_prev), d.gru_wnh)), d.gru_bn));
    b = add(mul(add_scalar(neg(z), 1.0), n), mul(z, belief_prev));
  } else {
    // Running mean of features: b_t = b_{t-1} + (f_t - b_{t-1}) / t.
    b = add(belief_prev, scale(sub(f, belief_prev), 1.0 / static_cast<double>(step)));
  }
  return {add_bias(matmul(b, d.head_w), d.head_b), b};
}

// a = a_max * tanh(b W + c), [B x 2] rows of (d_yaw, d_pitch). The
// pre-activation clamp keeps |a| < a_max strictly in floating point.
inline Tensor act(const Defender& d, const Tensor& belief) {
  constexpr double kPreMax = 18.0;
  return scale(tanh(clamp(add_bias(matmul(belief, d.pol_w), d.pol_b), -kPreMax, kPreMax)), d.config.a_max);
}

inline Tensor random_actions(std::size_t batch, double a_max, Rng& rng) {
  std::vector<double> v(batch * 2);
  for (double& x : v) x = rng.uniform(-a_max, a_max);
  return Tensor(Shape{batch, 2}, std::move(v));
}

struct Step {
  Tensor state;   // [B x 2]
  Tensor obs;     // [B x input_size]
  Tensor belief;  // [B x D]
  Tensor logits;  // [B x C]
  Tensor action;  // [B x 2]
};

using Trajectory = std::vector<Step>;

struct RolloutOptions {
  std::size_t horizon = 4;
  StateBounds bounds;
  // Overrides the defender's configured movement when set.
  std::optional<Movement> movement;
  Rng* action_rng = nullptr;  // required for random movement
  ObservationNoise noise;
  // Replaces movement entirely: action for 1-based step t given belief b_t.
  std::function<Tensor(std::size_t, const Tensor&)> policy;
};

// tau perceive/act steps; states advance by the clamped transition between
// steps and no transition follows the last action.
inline Trajectory rollout(const Defender& d, const std::vector<const Scene*>& scenes,
                          const std::vector<const Patch*>& patches, const Tensor& initial_states,
                          const RolloutOptions& opt) {
  if (opt.horizon == 0) throw ContractError("rollout: horizon must be >= 1");
  const std::size_t batch = scenes.size();
  const Movement movement = opt.movement.value_or(d.config.movement);
  if (!opt.policy && movement == Movement::random && !opt.action_rng) throw ContractError("rollout: random movement needs an rng");
  Trajectory traj;
  traj.reserve(opt.horizon);
  Tensor state = initial_states;
  Tensor belief = initial_belief(d, batch);
  for (std::size_t t = 1; t <= opt.horizon; ++t) {
    Step step;
    step.state = state;
    step.obs = observe_batch(scenes, state, patches, opt.noise);
    auto p = perceive(d, step.obs, belief, t);
    step.logits = p.logits;
    step.belief = p.belief;
    if (opt.policy) {
      step.action = opt.policy(t, p.belief);
    } else {
      switch (movement) {
        case Movement::learned:
          step.action = act(d, p.belief);
          break;
        case Movement::random:
          step.action = random_actions(batch, d.config.a_max, *opt.action_rng);
          break;
        case Movement::stationary:
          step.action = Tensor(Shape{batch, 2}, 0.0);
          break;
      }
    }
    belief = p.belief;
    if (t < opt.horizon) state = transition(state, step.action, opt.bounds);
    traj.push_back(std::move(step));
  }
  return traj;
}

inline std::vector<int> argmax_rows(const Tensor& logits) {
  std::vector<int> out(logits.dim(0));
  const std::size_t c = logits.dim(1);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

}  // namespace eadlab
