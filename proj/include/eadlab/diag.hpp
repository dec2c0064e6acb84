#pragma once

// Information-theoretic diagnostics. Exact quantities are enumerated on small
// discrete POMDPs in which the belief is the observation history; the
// InfoNCE estimator is sampled on the same worlds; entropy traces measure the
// trained Defender's predictive entropy along its own trajectories.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "eadlab/attacks.hpp"
#include "eadlab/error.hpp"
#include "eadlab/io.hpp"
#include "eadlab/rng.hpp"

namespace eadlab {

// ---------------------------------------------------------------------------
// Micro-POMDP

// A scene fixes the label and the observation law; a per-episode patch flag
// (on with probability patch_prob) switches to the scene's patched table.
struct DiscretePOMDP {
  std::size_t num_states = 0, num_actions = 0, num_obs = 0, num_labels = 0;
  std::vector<int> scene_labels;
  std::vector<double> scene_prior;  // [scenes]
  double patch_prob = 0.0;
  std::vector<double> initial;      // [S]
  std::vector<double> transition;   // [S x A x S]
  std::vector<double> observation;  // [scenes x S x 2 x O]

  std::size_t num_scenes() const { return scene_labels.size(); }
  double T(std::size_t s, std::size_t a, std::size_t s2) const {
    return transition[(s * num_actions + a) * num_states + s2];
  }
  double Z(std::size_t scene, std::size_t s, int flag, std::size_t o) const {
    return observation[((scene * num_states + s) * 2 + static_cast<std::size_t>(flag)) * num_obs + o];
  }
  double flag_prob(int flag) const { return flag ? patch_prob : 1.0 - patch_prob; }

  void validate() const {
    auto check_row = [](const double* row, std::size_t n, const char* what) {
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (!(row[i] >= 0.0)) throw DomainError(std::string("pomdp: negative probability in ") + what);
        total += row[i];
      }
      if (std::abs(total - 1.0) > 1e-12) throw DomainError(std::string("pomdp: ") + what + " row does not sum to 1");
    };
    if (!num_states || !num_actions || !num_obs || !num_labels || scene_labels.empty()) {
      throw DomainError("pomdp: empty dimension");
    }
    if (scene_prior.size() != num_scenes() || initial.size() != num_states ||
        transition.size() != num_states * num_actions * num_states ||
        observation.size() != num_scenes() * num_states * 2 * num_obs) {
      throw DimensionError("pomdp: table sizes disagree with dimensions");
    }
    for (int y : scene_labels)
      if (y < 0 || static_cast<std::size_t>(y) >= num_labels) throw DomainError("pomdp: scene label out of range");
    if (patch_prob < 0.0 || patch_prob > 1.0) throw DomainError("pomdp: patch_prob outside [0, 1]");
    check_row(scene_prior.data(), num_scenes(), "scene prior");
    check_row(initial.data(), num_states, "initial");
    for (std::size_t r = 0; r < num_states * num_actions; ++r) check_row(&transition[r * num_states], num_states, "transition");
    for (std::size_t r = 0; r < num_scenes() * num_states * 2; ++r) check_row(&observation[r * num_obs], num_obs, "observation");
  }
};

inline std::vector<double> dirichlet(std::size_t n, double concentration, Rng& rng) {
  std::vector<double> v(n);
  double total = 0.0;
  for (double& x : v) total += x = rng.gamma(concentration);
  for (double& x : v) x /= total;
  // Put the rounding residue on the largest entry so the row sums to 1 tightly.
  const auto big = std::max_element(v.begin(), v.end());
  *big += 1.0 - std::accumulate(v.begin(), v.end(), 0.0);
  return v;
}

// 2-4 states, 2-3 actions, 4-8 observations, 2-4 labels, one scene per label
// plus up to two extra scenes; every table row Dirichlet(1).
inline DiscretePOMDP random_pomdp(std::uint64_t seed) {
  Rng rng(derive_seed(seed, "micro-pomdp"));
  DiscretePOMDP m;
  m.num_states = 2 + rng.index(3);
  m.num_actions = 2 + rng.index(2);
  m.num_obs = 4 + rng.index(5);
  m.num_labels = 2 + rng.index(3);
  const std::size_t scenes = m.num_labels + rng.index(3);
  for (std::size_t k = 0; k < scenes; ++k) {
    m.scene_labels.push_back(k < m.num_labels ? static_cast<int>(k) : static_cast<int>(rng.index(m.num_labels)));
  }
  m.scene_prior = dirichlet(scenes, 1.0, rng);
  m.patch_prob = rng.uniform(0.1, 0.6);
  m.initial = dirichlet(m.num_states, 1.0, rng);
  for (std::size_t r = 0; r < m.num_states * m.num_actions; ++r) {
    const auto row = dirichlet(m.num_states, 1.0, rng);
    m.transition.insert(m.transition.end(), row.begin(), row.end());
  }
  for (std::size_t r = 0; r < scenes * m.num_states * 2; ++r) {
    const auto row = dirichlet(m.num_obs, 1.0, rng);
    m.observation.insert(m.observation.end(), row.begin(), row.end());
  }
  m.validate();
  return m;
}

// Action distribution after observing o_1..o_step (history.size() == step).
using DiscretePolicy = std::function<std::vector<double>(std::size_t step, const std::vector<int>& history)>;

inline DiscretePolicy uniform_policy(std::size_t actions) {
  return [actions](std::size_t, const std::vector<int>&) {
    return std::vector<double>(actions, 1.0 / static_cast<double>(actions));
  };
}

inline DiscretePolicy constant_policy(std::size_t actions, std::size_t a) {
  if (a >= actions) throw IndexError("constant_policy: action out of range");
  return [actions, a](std::size_t, const std::vector<int>&) {
    std::vector<double> p(actions, 0.0);
    p[a] = 1.0;
    return p;
  };
}

// History-dependent stochastic policy; rows are Dirichlet(1) draws keyed by
// (seed, step, history) so that repeated queries agree.
inline DiscretePolicy random_policy(std::size_t actions, std::uint64_t seed) {
  return [actions, seed](std::size_t step, const std::vector<int>& history) {
    std::uint64_t key = derive_seed(seed, step);
    for (int o : history) key = derive_seed(key, static_cast<std::uint64_t>(o));
    Rng rng(key);
    return dirichlet(actions, 1.0, rng);
  };
}

// Joint law of (y, h, o_t) with h = (o_1..o_{t-1}) encoded base num_obs,
// o_1 as the least significant digit.
struct JointTable {
  std::size_t labels = 0, histories = 0, obs = 0;
  std::vector<double> p;  // [labels x histories x obs]

  double& at(std::size_t y, std::size_t h, std::size_t o) { return p[(y * histories + h) * obs + o]; }
  double at(std::size_t y, std::size_t h, std::size_t o) const { return p[(y * histories + h) * obs + o]; }
};

inline constexpr double kMaxJointOutcomes = 1e6;

namespace detail {

inline std::size_t history_count(const DiscretePOMDP& m, std::size_t t) {
  double n = 1.0;
  for (std::size_t k = 1; k < t; ++k) n *= static_cast<double>(m.num_obs);
  const double outcomes = n * static_cast<double>(m.num_obs * m.num_scenes() * 2);
  if (outcomes > kMaxJointOutcomes) throw ContractError("pomdp: joint law too large to enumerate");
  return static_cast<std::size_t>(n);
}

inline std::vector<int> decode_history(std::size_t h, std::size_t length, std::size_t base) {
  std::vector<int> out(length);
  for (std::size_t k = 0; k < length; ++k) {
    out[k] = static_cast<int>(h % base);
    h /= base;
  }
  return out;
}

inline void check_policy_row(const std::vector<double>& row, std::size_t actions) {
  if (row.size() != actions) throw DimensionError("policy: row width differs from the action count");
  double total = 0.0;
  for (double v : row) {
    if (!(v >= 0.0)) throw DomainError("policy: negative probability");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-12) throw DomainError("policy: row does not sum to 1");
}

inline double xlogy_ratio(double p, double num, double den) { return p > 0.0 ? p * std::log(num / den) : 0.0; }

}  // namespace detail

// Forward recursion over alpha(scene, flag, h, s_k) = P(scene, flag, o_<k, s_k).
inline JointTable joint_forward(const DiscretePOMDP& m, const DiscretePolicy& policy, std::size_t t) {
  if (t == 0) throw ContractError("pomdp: t must be >= 1");
  m.validate();
  const std::size_t H = detail::history_count(m, t), S = m.num_states, O = m.num_obs, F = 2;
  const std::size_t scenes = m.num_scenes();
  JointTable j{m.num_labels, H, O, std::vector<double>(m.num_labels * H * O, 0.0)};
  // alpha indexed [scene][flag][h][s] with h over histories of the current length.
  std::vector<double> alpha(scenes * F * S, 0.0);
  for (std::size_t sc = 0; sc < scenes; ++sc)
    for (int f = 0; f < 2; ++f)
      for (std::size_t s = 0; s < S; ++s) alpha[(sc * F + f) * S + s] = m.scene_prior[sc] * m.flag_prob(f) * m.initial[s];
  std::size_t hist = 1;
  for (std::size_t k = 1; k <= t; ++k) {
    if (k == t) {
      for (std::size_t sc = 0; sc < scenes; ++sc)
        for (int f = 0; f < 2; ++f)
          for (std::size_t h = 0; h < hist; ++h)
            for (std::size_t s = 0; s < S; ++s) {
              const double a = alpha[((sc * F + f) * hist + h) * S + s];
              if (a == 0.0) continue;
              for (std::size_t o = 0; o < O; ++o) j.at(m.scene_labels[sc], h, o) += a * m.Z(sc, s, f, o);
            }
      break;
    }
    const std::size_t next_hist = hist * O;
    std::size_t place = 1;
    for (std::size_t i = 1; i < k; ++i) place *= O;
    // Policy rows for every extended history h' = h + o * O^(k-1).
    std::vector<std::vector<double>> rows(next_hist);
    for (std::size_t h2 = 0; h2 < next_hist; ++h2) {
      rows[h2] = policy(k, detail::decode_history(h2, k, O));
      detail::check_policy_row(rows[h2], m.num_actions);
    }
    std::vector<double> next(scenes * F * next_hist * S, 0.0);
    for (std::size_t sc = 0; sc < scenes; ++sc)
      for (int f = 0; f < 2; ++f)
        for (std::size_t h = 0; h < hist; ++h)
          for (std::size_t s = 0; s < S; ++s) {
            const double a = alpha[((sc * F + f) * hist + h) * S + s];
            if (a == 0.0) continue;
            for (std::size_t o = 0; o < O; ++o) {
              const double w = a * m.Z(sc, s, f, o);
              const std::size_t h2 = h + o * place;
              for (std::size_t act = 0; act < m.num_actions; ++act) {
                const double wa = w * rows[h2][act];
                if (wa == 0.0) continue;
                for (std::size_t s2 = 0; s2 < S; ++s2) next[((sc * F + f) * next_hist + h2) * S + s2] += wa * m.T(s, act, s2);
              }
            }
          }
    alpha = std::move(next);
    hist = next_hist;
  }
  return j;
}

// Depth-first sum over every complete path (scene, flag, s_1, o_1, a_1, ...,
// s_t, o_t): a second enumeration that shares no recursion with joint_forward.
inline JointTable joint_paths(const DiscretePOMDP& m, const DiscretePolicy& policy, std::size_t t) {
  if (t == 0) throw ContractError("pomdp: t must be >= 1");
  m.validate();
  const std::size_t H = detail::history_count(m, t), O = m.num_obs;
  JointTable j{m.num_labels, H, O, std::vector<double>(m.num_labels * H * O, 0.0)};
  std::vector<int> history;
  std::function<void(std::size_t, std::size_t, int, std::size_t, double)> visit =
      [&](std::size_t k, std::size_t sc, int f, std::size_t s, double prob) {
        for (std::size_t o = 0; o < O; ++o) {
          const double po = prob * m.Z(sc, s, f, o);
          if (po == 0.0) continue;
          if (k == t) {
            std::size_t h = 0;
            for (std::size_t i = history.size(); i-- > 0;) h = h * O + static_cast<std::size_t>(history[i]);
            j.at(m.scene_labels[sc], h, o) += po;
            continue;
          }
          history.push_back(static_cast<int>(o));
          const auto row = policy(k, history);
          detail::check_policy_row(row, m.num_actions);
          for (std::size_t a = 0; a < m.num_actions; ++a)
            for (std::size_t s2 = 0; s2 < m.num_states; ++s2) {
              const double p2 = po * row[a] * m.T(s, a, s2);
              if (p2 != 0.0) visit(k + 1, sc, f, s2, p2);
            }
          history.pop_back();
        }
      };
  for (std::size_t s = 0; s < m.num_states; ++s)
    for (int f = 0; f < 2; ++f)
      for (std::size_t sc = 0; sc < m.num_scenes(); ++sc)
        visit(1, sc, f, s, m.initial[s] * m.flag_prob(f) * m.scene_prior[sc]);
  return j;
}

struct Marginals {
  std::vector<double> y, h, yh, ho;  // p(y), p(h), p(y, h), p(h, o)
};

inline Marginals marginals(const JointTable& j) {
  Marginals mg{std::vector<double>(j.labels, 0.0), std::vector<double>(j.histories, 0.0),
               std::vector<double>(j.labels * j.histories, 0.0), std::vector<double>(j.histories * j.obs, 0.0)};
  for (std::size_t y = 0; y < j.labels; ++y)
    for (std::size_t h = 0; h < j.histories; ++h)
      for (std::size_t o = 0; o < j.obs; ++o) {
        const double p = j.at(y, h, o);
        mg.y[y] += p;
        mg.h[h] += p;
        mg.yh[y * j.histories + h] += p;
        mg.ho[h * j.obs + o] += p;
      }
  return mg;
}

// H(y | h) in nats.
inline double entropy_y_given_h(const JointTable& j) {
  const auto mg = marginals(j);
  double e = 0.0;
  for (std::size_t y = 0; y < j.labels; ++y)
    for (std::size_t h = 0; h < j.histories; ++h) e -= detail::xlogy_ratio(mg.yh[y * j.histories + h], mg.yh[y * j.histories + h], mg.h[h]);
  return e;
}

// H(y | h, o) in nats.
inline double entropy_y_given_ho(const JointTable& j) {
  const auto mg = marginals(j);
  double e = 0.0;
  for (std::size_t y = 0; y < j.labels; ++y)
    for (std::size_t h = 0; h < j.histories; ++h)
      for (std::size_t o = 0; o < j.obs; ++o) e -= detail::xlogy_ratio(j.at(y, h, o), j.at(y, h, o), mg.ho[h * j.obs + o]);
  return e;
}

// I(o; y | h) as the expected log density ratio p(y,h,o) p(h) / (p(y,h) p(h,o)).
inline double conditional_mi(const JointTable& j) {
  const auto mg = marginals(j);
  double mi = 0.0;
  for (std::size_t y = 0; y < j.labels; ++y)
    for (std::size_t h = 0; h < j.histories; ++h)
      for (std::size_t o = 0; o < j.obs; ++o) {
        const double p = j.at(y, h, o);
        mi += detail::xlogy_ratio(p, p * mg.h[h], mg.yh[y * j.histories + h] * mg.ho[h * j.obs + o]);
      }
  return mi;
}

// I(y; h, o) - I(y; h), each from its own unconditional density ratio.
inline double chain_rule_mi(const JointTable& j) {
  const auto mg = marginals(j);
  double with_o = 0.0, without_o = 0.0;
  for (std::size_t y = 0; y < j.labels; ++y)
    for (std::size_t h = 0; h < j.histories; ++h) {
      const double pyh = mg.yh[y * j.histories + h];
      without_o += detail::xlogy_ratio(pyh, pyh, mg.y[y] * mg.h[h]);
      for (std::size_t o = 0; o < j.obs; ++o) {
        const double p = j.at(y, h, o);
        with_o += detail::xlogy_ratio(p, p, mg.y[y] * mg.ho[h * j.obs + o]);
      }
    }
  return with_o - without_o;
}

inline double exact_conditional_mi(const DiscretePOMDP& m, const DiscretePolicy& policy, std::size_t t) {
  return conditional_mi(joint_forward(m, policy, t));
}

struct IdentityCheck {
  double lhs = 0.0;    // H(y|h) - H(y|h,o), forward enumeration
  double rhs = 0.0;    // I(o; y | h), path enumeration
  double chain = 0.0;  // I(y; h,o) - I(y; h), path enumeration
  double abs_diff = 0.0;
  double chain_diff = 0.0;
};

inline IdentityCheck entropy_identity_check(const DiscretePOMDP& m, const DiscretePolicy& policy, std::size_t t) {
  const JointTable fwd = joint_forward(m, policy, t);
  const JointTable paths = joint_paths(m, policy, t);
  IdentityCheck c;
  c.lhs = entropy_y_given_h(fwd) - entropy_y_given_ho(fwd);
  c.rhs = conditional_mi(paths);
  c.chain = chain_rule_mi(paths);
  c.abs_diff = std::abs(c.lhs - c.rhs);
  c.chain_diff = std::abs(c.chain - c.rhs);
  return c;
}

struct GreedyChoice {
  std::size_t action = 0;
  std::vector<double> decrease;  // per candidate action
};

// Best action at step t-1 for reducing label entropy at step t, with `base`
// acting before that; ties within 1e-12 go to the lowest index.
inline GreedyChoice greedy_policy_oracle(const DiscretePOMDP& m, std::size_t t, const DiscretePolicy& base) {
  if (t < 2) throw ContractError("greedy oracle: t must be >= 2 so that an action precedes o_t");
  GreedyChoice g;
  for (std::size_t a = 0; a < m.num_actions; ++a) {
    const DiscretePolicy candidate = [&, a](std::size_t step, const std::vector<int>& h) {
      return step + 1 == t ? constant_policy(m.num_actions, a)(step, h) : base(step, h);
    };
    const JointTable j = joint_forward(m, candidate, t);
    g.decrease.push_back(entropy_y_given_h(j) - entropy_y_given_ho(j));
  }
  for (std::size_t a = 1; a < g.decrease.size(); ++a) {
    if (g.decrease[a] > g.decrease[g.action] + 1e-12) g.action = a;
  }
  return g;
}

inline GreedyChoice greedy_policy_oracle(const DiscretePOMDP& m, std::size_t t) {
  return greedy_policy_oracle(m, t, uniform_policy(m.num_actions));
}

// ---------------------------------------------------------------------------
// InfoNCE

// Critic S(h, o, y).
using Scorer = std::function<double(const std::vector<int>& history, int o, int y)>;

// log p(y | h, o) - log p(y | h): the optimal critic up to terms in (h, o).
inline Scorer oracle_scorer(const DiscretePOMDP& m, const DiscretePolicy& policy, std::size_t t) {
  auto j = std::make_shared<JointTable>(joint_forward(m, policy, t));
  auto mg = std::make_shared<Marginals>(marginals(*j));
  const std::size_t base = m.num_obs;
  return [j, mg, base](const std::vector<int>& history, int o, int y) {
    std::size_t h = 0;
    for (std::size_t i = history.size(); i-- > 0;) h = h * base + static_cast<std::size_t>(history[i]);
    const double pyho = j->at(y, h, o), pho = mg->ho[h * j->obs + o];
    const double pyh = mg->yh[y * j->histories + h], ph = mg->h[h];
    if (pyho <= 0.0) return -std::numeric_limits<double>::infinity();
    return std::log(pyho / pho) - std::log(pyh / ph);
  };
}

struct BoundEstimate {
  double mean = 0.0;
  double stderr_ = 0.0;
  std::size_t batches = 0;
  std::size_t k = 0;
};

namespace detail {

inline std::size_t draw(const std::vector<double>& p, Rng& rng) {
  double u = rng.uniform(), acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (u < acc) return i;
  }
  for (std::size_t i = p.size(); i-- > 0;)
    if (p[i] > 0.0) return i;
  return 0;
}

}  // namespace detail

// Each batch simulates one history h = o_<t, then draws max(ks) pairs
// (o_i, y_i) from p(o_t, y | h) through the exact filter over
// (scene, flag, s_t). The estimate for batch size K uses the first K pairs:
// mean_i [S_ii - log sum_j exp S_ij] + log K, whose expectation lower-bounds
// I(o_t; y | h). Sharing pairs across K couples the estimates so that their
// differences are measured with less noise.
inline std::vector<BoundEstimate> infonce_sweep(const DiscretePOMDP& m, const DiscretePolicy& policy, std::size_t t,
                                                const Scorer& scorer, const std::vector<std::size_t>& ks,
                                                std::size_t batches, Rng& rng) {
  if (t == 0) throw ContractError("infonce: t must be >= 1");
  if (ks.empty() || batches == 0) throw ContractError("infonce: need batch sizes and a positive batch count");
  for (std::size_t k : ks)
    if (k == 0) throw ContractError("infonce: K must be positive");
  m.validate();
  const std::size_t S = m.num_states, scenes = m.num_scenes();
  const std::size_t k_max = *std::max_element(ks.begin(), ks.end());
  std::vector<std::vector<double>> values(ks.size());
  for (std::size_t b = 0; b < batches; ++b) {
    // Simulate the history and filter alpha(scene, flag, s) alongside.
    std::size_t sc = detail::draw(m.scene_prior, rng);
    const int f = rng.bernoulli(m.patch_prob) ? 1 : 0;
    std::size_t s = detail::draw(m.initial, rng);
    std::vector<double> alpha(scenes * 2 * S);
    for (std::size_t c = 0; c < scenes; ++c)
      for (int g = 0; g < 2; ++g)
        for (std::size_t x = 0; x < S; ++x) alpha[(c * 2 + g) * S + x] = m.scene_prior[c] * m.flag_prob(g) * m.initial[x];
    std::vector<int> history;
    for (std::size_t step = 1; step < t; ++step) {
      std::vector<double> zrow(m.num_obs);
      for (std::size_t o = 0; o < m.num_obs; ++o) zrow[o] = m.Z(sc, s, f, o);
      const int o = static_cast<int>(detail::draw(zrow, rng));
      history.push_back(o);
      const auto row = policy(step, history);
      detail::check_policy_row(row, m.num_actions);
      std::vector<double> trow(S);
      const std::size_t a = detail::draw(row, rng);
      for (std::size_t x = 0; x < S; ++x) trow[x] = m.T(s, a, x);
      s = detail::draw(trow, rng);
      std::vector<double> next(alpha.size(), 0.0);
      double total = 0.0;
      for (std::size_t c = 0; c < scenes; ++c)
        for (int g = 0; g < 2; ++g)
          for (std::size_t x = 0; x < S; ++x) {
            const double w = alpha[(c * 2 + g) * S + x] * m.Z(c, x, g, static_cast<std::size_t>(o));
            for (std::size_t act = 0; act < m.num_actions; ++act)
              for (std::size_t x2 = 0; x2 < S; ++x2) next[(c * 2 + g) * S + x2] += w * row[act] * m.T(x, act, x2);
          }
      for (double v : next) total += v;
      for (double& v : next) v /= total;
      alpha = std::move(next);
    }
    // Conditionally independent (o, y) draws given h.
    std::vector<int> os(k_max), ys(k_max);
    for (std::size_t i = 0; i < k_max; ++i) {
      const std::size_t cell = detail::draw(alpha, rng);
      const std::size_t c = cell / (2 * S), g = (cell / S) % 2, x = cell % S;
      std::vector<double> zrow(m.num_obs);
      for (std::size_t o = 0; o < m.num_obs; ++o) zrow[o] = m.Z(c, x, static_cast<int>(g), o);
      os[i] = static_cast<int>(detail::draw(zrow, rng));
      ys[i] = m.scene_labels[c];
    }
    std::vector<double> score(k_max * k_max);
    for (std::size_t i = 0; i < k_max; ++i)
      for (std::size_t j = 0; j < k_max; ++j) score[i * k_max + j] = scorer(history, os[i], ys[j]);
    for (std::size_t q = 0; q < ks.size(); ++q) {
      const std::size_t k = ks[q];
      double value = 0.0;
      for (std::size_t i = 0; i < k; ++i) {
        const double* row = &score[i * k_max];
        const double mx = *std::max_element(row, row + k);
        double lse = 0.0;
        for (std::size_t j = 0; j < k; ++j) lse += std::exp(row[j] - mx);
        value += row[i] - (mx + std::log(lse));
      }
      values[q].push_back(value / static_cast<double>(k) + std::log(static_cast<double>(k)));
    }
  }
  std::vector<BoundEstimate> out;
  for (std::size_t q = 0; q < ks.size(); ++q) {
    BoundEstimate e;
    e.batches = batches;
    e.k = ks[q];
    for (double v : values[q]) e.mean += v;
    e.mean /= static_cast<double>(batches);
    double var = 0.0;
    for (double v : values[q]) var += (v - e.mean) * (v - e.mean);
    var /= static_cast<double>(std::max<std::size_t>(1, batches - 1));
    e.stderr_ = std::sqrt(var / static_cast<double>(batches));
    out.push_back(e);
  }
  return out;
}

inline BoundEstimate infonce_bound(const DiscretePOMDP& m, const DiscretePolicy& policy, std::size_t t,
                                   const Scorer& scorer, std::size_t k, std::size_t batches, Rng& rng) {
  return infonce_sweep(m, policy, t, scorer, {k}, batches, rng).front();
}

// Spearman rank correlation (average ranks for ties).
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw ContractError("spearman: need two equal-length series");
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      for (std::size_t q = i; q <= j; ++q) r[idx[q]] = 0.5 * static_cast<double>(i + j) + 1.0;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n, mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double num = 0.0, da = 0.0, db = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (ra[i] - ma) * (rb[i] - mb);
    da += (ra[i] - ma) * (ra[i] - ma);
    db += (rb[i] - mb) * (rb[i] - mb);
  }
  if (da == 0.0 || db == 0.0) return 0.0;
  return num / std::sqrt(da * db);
}

// ---------------------------------------------------------------------------
// Predictive entropy of the Defender

// -sum softmax log softmax, in nats.
inline double predictive_entropy(std::span<const double> logits) {
  if (logits.empty()) throw ContractError("predictive_entropy: empty logits");
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : logits) {
    if (!std::isfinite(v)) throw NumericError("predictive_entropy: non-finite logit");
    mx = std::max(mx, v);
  }
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  const double log_z = std::log(z);
  double h = 0.0;
  for (double v : logits) {
    const double lp = v - mx - log_z;
    h -= std::exp(lp) * lp;
  }
  return std::max(0.0, h);
}

struct EntropyTrace {
  std::vector<double> mean;        // [tau]
  std::vector<double> lo, hi;      // bootstrap percentile 95% interval of the mean
  std::vector<double> half_width;  // (hi - lo) / 2
  std::vector<std::vector<double>> samples;  // [n x tau]
};

// Per-step predictive entropies of the defender along its protocol
// trajectories, with a 1000-resample bootstrap of each step's mean.
inline EntropyTrace entropy_trace(const Defender& d, const std::vector<AttackTarget>& targets,
                                  const std::vector<const Patch*>& patches, const Protocol& protocol,
                                  std::size_t resamples = 1000, std::uint64_t seed = 0) {
  if (targets.empty()) throw ContractError("entropy_trace: no targets");
  const auto logits = protocol_logits(d, targets, patches, protocol);
  const std::size_t n = targets.size(), tau = logits.size(), c = d.config.num_classes;
  EntropyTrace tr;
  tr.samples.assign(n, std::vector<double>(tau));
  for (std::size_t t = 0; t < tau; ++t)
    for (std::size_t i = 0; i < n; ++i) tr.samples[i][t] = predictive_entropy(logits[t].data().subspan(i * c, c));
  Rng rng(derive_seed(seed, "bootstrap"));
  for (std::size_t t = 0; t < tau; ++t) {
    double m = 0.0;
    for (std::size_t i = 0; i < n; ++i) m += tr.samples[i][t];
    tr.mean.push_back(m / static_cast<double>(n));
    std::vector<double> boot(resamples);
    for (double& b : boot) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += tr.samples[rng.index(n)][t];
      b = s / static_cast<double>(n);
    }
    std::sort(boot.begin(), boot.end());
    const auto q = [&](double p) {
      return boot.empty() ? tr.mean.back() : boot[std::min(boot.size() - 1, static_cast<std::size_t>(p * static_cast<double>(boot.size())))];
    };
    tr.lo.push_back(q(0.025));
    tr.hi.push_back(q(0.975));
    tr.half_width.push_back(0.5 * (tr.hi.back() - tr.lo.back()));
  }
  return tr;
}

// ---------------------------------------------------------------------------
// Reports

struct DiagReport {
  std::string check;
  std::size_t n_instances = 0;
  bool pass = true;
  double worst_case = 0.0;
  Json details = Json::array();
  Json summary = Json::object();

  Json to_json() const {
    Json j = versioned_json();
    j["check"] = check;
    j["n_instances"] = n_instances;
    j["pass"] = pass;
    j["worst_case"] = worst_case;
    j["summary"] = summary;
    j["details"] = details;
    return j;
  }
};

inline constexpr double kIdentityTolerance = 1e-10;

// Entropy-decrease identity and chain-rule cross-check on seeded instances,
// at t = 1..3 under a history-dependent random policy.
inline DiagReport identity_report(std::size_t instances, std::uint64_t seed) {
  DiagReport r{"identity", instances};
  for (std::size_t i = 0; i < instances; ++i) {
    const auto m = random_pomdp(derive_seed(seed, i));
    const auto policy = random_policy(m.num_actions, derive_seed(seed, 1000 + i));
    for (std::size_t t = 1; t <= 3; ++t) {
      if (static_cast<double>(m.num_scenes() * 2) * std::pow(static_cast<double>(m.num_obs), t) > kMaxJointOutcomes) continue;
      const auto c = entropy_identity_check(m, policy, t);
      const double worst = std::max(c.abs_diff, c.chain_diff);
      r.worst_case = std::max(r.worst_case, worst);
      r.pass = r.pass && worst <= kIdentityTolerance;
      r.details.push_back({{"instance", i}, {"t", t}, {"lhs", c.lhs}, {"rhs", c.rhs}, {"chain", c.chain},
                           {"abs_diff", c.abs_diff}, {"chain_diff", c.chain_diff}});
    }
  }
  return r;
}

// InfoNCE bound (oracle critic) against exact MI on seeded instances at t = 2
// for each batch size in `ks`. Passes when every estimate is within 3 stderr
// of the exact MI from below and the instance-averaged bound never decreases
// with K. worst_case is the largest (bound - MI) / stderr.
inline DiagReport infonce_report(std::size_t instances, std::uint64_t seed,
                                 const std::vector<std::size_t>& ks = {2, 4, 8, 16}, std::size_t batches = 200) {
  DiagReport r{"infonce", instances};
  r.worst_case = -std::numeric_limits<double>::infinity();
  std::vector<double> mean_by_k(ks.size(), 0.0);
  for (std::size_t i = 0; i < instances; ++i) {
    const auto m = random_pomdp(derive_seed(seed, i));
    const auto policy = random_policy(m.num_actions, derive_seed(seed, 1000 + i));
    const double mi = exact_conditional_mi(m, policy, 2);
    const auto scorer = oracle_scorer(m, policy, 2);
    Rng rng(derive_seed(seed, 2000 + i));
    const auto sweep = infonce_sweep(m, policy, 2, scorer, ks, batches, rng);
    for (std::size_t q = 0; q < ks.size(); ++q) {
      const auto& e = sweep[q];
      const bool ok = e.mean <= mi + 3.0 * e.stderr_;
      r.pass = r.pass && ok;
      if (e.stderr_ > 0) r.worst_case = std::max(r.worst_case, (e.mean - mi) / e.stderr_);
      mean_by_k[q] += e.mean / static_cast<double>(instances);
      r.details.push_back(
          {{"instance", i}, {"k", ks[q]}, {"exact_mi", mi}, {"bound", e.mean}, {"stderr", e.stderr_}, {"ok", ok}});
    }
  }
  bool monotone = true;
  for (std::size_t q = 1; q < ks.size(); ++q) monotone = monotone && mean_by_k[q] >= mean_by_k[q - 1];
  std::vector<double> kd(ks.begin(), ks.end());
  const double rho = ks.size() >= 2 ? spearman(kd, mean_by_k) : 0.0;
  r.pass = r.pass && monotone && rho >= 0.0;
  r.summary = {{"k", ks}, {"mean_bound", mean_by_k}, {"non_decreasing", monotone}, {"spearman", rho}};
  return r;
}

// Greedy choice re-checked against every alternative action.
inline DiagReport greedy_report(std::size_t instances, std::uint64_t seed) {
  DiagReport r{"greedy", instances};
  for (std::size_t i = 0; i < instances; ++i) {
    const auto m = random_pomdp(derive_seed(seed, i));
    const auto g = greedy_policy_oracle(m, 2);
    double gap = 0.0;  // how much any alternative beats the choice (<= 0 is correct)
    for (double v : g.decrease) gap = std::max(gap, v - g.decrease[g.action]);
    r.pass = r.pass && gap <= 1e-12;
    r.worst_case = std::max(r.worst_case, gap);
    r.details.push_back({{"instance", i}, {"action", g.action}, {"decrease", g.decrease}});
  }
  return r;
}

}  // namespace eadlab
