#include <gtest/gtest.h>

#include <cmath>

#include "eadlab/diag.hpp"
#include "eadlab/train.hpp"

namespace eadlab {
namespace {

// Four scenes with one label each; `informative(state)` decides whether that
// state's observation reveals the scene (one-hot) or is uniform noise.
DiscretePOMDP reveal_world(std::size_t states, std::size_t actions, const std::vector<bool>& informative,
                           const std::vector<double>& prior) {
  DiscretePOMDP m;
  m.num_states = states;
  m.num_actions = actions;
  m.num_obs = 4;
  m.num_labels = 4;
  m.scene_labels = {0, 1, 2, 3};
  m.scene_prior = prior;
  m.patch_prob = 0.3;
  m.initial.assign(states, 0.0);
  m.initial[0] = 1.0;
  m.transition.assign(states * actions * states, 0.0);
  for (std::size_t sc = 0; sc < 4; ++sc)
    for (std::size_t s = 0; s < states; ++s)
      for (int f = 0; f < 2; ++f)
        for (std::size_t o = 0; o < 4; ++o) m.observation.push_back(informative[s] ? (o == sc ? 1.0 : 0.0) : 0.25);
  return m;
}

double& trans(DiscretePOMDP& m, std::size_t s, std::size_t a, std::size_t s2) {
  return m.transition[(s * m.num_actions + a) * m.num_states + s2];
}

double entropy_of(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0) h -= v * std::log(v);
  return h;
}

const std::vector<double> kPrior{0.1, 0.2, 0.3, 0.4};

}  // namespace

TEST(PredictiveEntropy, MatchesDirectSum) {
  Rng rng(3);
  for (int n = 0; n < 100; ++n) {
    std::vector<double> z(2 + rng.index(9));
    for (double& v : z) v = rng.uniform(-5.0, 5.0);
    double total = 0.0;
    for (double v : z) total += std::exp(v);
    double direct = 0.0;
    for (double v : z) direct -= std::exp(v) / total * std::log(std::exp(v) / total);
    EXPECT_NEAR(predictive_entropy(z), direct, 1e-12);
  }
}

TEST(PredictiveEntropy, UniformAndDegenerateLimits) {
  EXPECT_NEAR(predictive_entropy(std::vector<double>(8, 0.7)), std::log(8.0), 1e-15);
  std::vector<double> one_hot(8, 0.0);
  one_hot[2] = 1e6;
  EXPECT_LE(predictive_entropy(one_hot), 1e-6);
  EXPECT_GE(predictive_entropy(one_hot), 0.0);
  EXPECT_THROW(predictive_entropy(std::vector<double>{}), ContractError);
}

TEST(MicroPomdp, GeneratorRespectsRangesAndRowSums) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto m = random_pomdp(seed);
    EXPECT_NO_THROW(m.validate());
    EXPECT_GE(m.num_states, 2u);
    EXPECT_LE(m.num_states, 4u);
    EXPECT_GE(m.num_actions, 2u);
    EXPECT_LE(m.num_actions, 3u);
    EXPECT_GE(m.num_obs, 4u);
    EXPECT_LE(m.num_obs, 8u);
    EXPECT_GE(m.num_labels, 2u);
    EXPECT_LE(m.num_labels, 4u);
  }
  auto bad = random_pomdp(1);
  bad.initial[0] += 1e-9;
  EXPECT_THROW(bad.validate(), DomainError);
}

TEST(MicroPomdp, JointTablesSumToOneAndRoutesAgree) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto m = random_pomdp(seed);
    const auto policy = random_policy(m.num_actions, seed);
    for (std::size_t t = 1; t <= 3; ++t) {
      const auto a = joint_forward(m, policy, t), b = joint_paths(m, policy, t);
      double total = 0.0, worst = 0.0;
      for (std::size_t i = 0; i < a.p.size(); ++i) {
        total += a.p[i];
        worst = std::max(worst, std::abs(a.p[i] - b.p[i]));
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
      EXPECT_LE(worst, 1e-15);
      EXPECT_NEAR(conditional_mi(a), conditional_mi(b), 1e-12);
    }
  }
}

TEST(MicroPomdp, RefusesOversizedEnumeration) {
  auto m = random_pomdp(2);
  EXPECT_THROW(joint_forward(m, uniform_policy(m.num_actions), 9), ContractError);
  EXPECT_THROW(joint_forward(m, uniform_policy(m.num_actions), 0), ContractError);
}

TEST(ExactMi, ZeroWhenObservationIgnoresLabel) {
  auto m = reveal_world(2, 2, {false, false}, kPrior);
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t a = 0; a < 2; ++a) trans(m, s, a, a) = 1.0;
  for (std::size_t t = 1; t <= 3; ++t) {
    EXPECT_NEAR(exact_conditional_mi(m, uniform_policy(2), t), 0.0, 1e-15);
    const auto c = entropy_identity_check(m, uniform_policy(2), t);
    EXPECT_NEAR(c.lhs, 0.0, 1e-12);
    EXPECT_NEAR(c.rhs, 0.0, 1e-12);
  }
}

TEST(ExactMi, BijectiveObservationRecoversLabelEntropy) {
  auto m = reveal_world(2, 2, {true, true}, kPrior);
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t a = 0; a < 2; ++a) trans(m, s, a, a) = 1.0;
  EXPECT_NEAR(exact_conditional_mi(m, uniform_policy(2), 1), entropy_of(kPrior), 1e-12);
  // Once o_1 names the scene, later observations add nothing.
  const auto j = joint_forward(m, uniform_policy(2), 2);
  EXPECT_NEAR(entropy_y_given_h(j), 0.0, 1e-12);
  EXPECT_NEAR(conditional_mi(j), 0.0, 1e-12);
}

TEST(ExactMi, EntropyIdentityOnTwentyInstances) {
  const auto r = identity_report(20, 5);
  EXPECT_TRUE(r.pass) << r.worst_case;
  EXPECT_LE(r.worst_case, 1e-10);
  EXPECT_GE(r.details.size(), 20u);
  for (const auto& d : r.details) EXPECT_GE(d["rhs"].get<double>(), -1e-12);
  const Json j = parse_versioned_json(r.to_json().dump(), "mem");
  EXPECT_EQ(j["check"], "identity");
}

TEST(Greedy, TiesGoToLowestIndex) {
  auto m = reveal_world(2, 3, {false, true}, kPrior);
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t a = 0; a < 3; ++a) trans(m, s, a, 0) = trans(m, s, a, 1) = 0.5;
  const auto g = greedy_policy_oracle(m, 2);
  EXPECT_EQ(g.action, 0u);
  EXPECT_NEAR(g.decrease[1], g.decrease[0], 1e-15);
  EXPECT_NEAR(g.decrease[2], g.decrease[0], 1e-15);
}

TEST(Greedy, PicksTheActionThatReachesTheInformativeState) {
  // Action 0 stays blind, 1 reaches the informative state, 2 flips a coin.
  auto m = reveal_world(2, 3, {false, true}, kPrior);
  for (std::size_t s = 0; s < 2; ++s) {
    trans(m, s, 0, 0) = 1.0;
    trans(m, s, 1, 1) = 1.0;
    trans(m, s, 2, 0) = trans(m, s, 2, 1) = 0.5;
  }
  const auto g = greedy_policy_oracle(m, 2);
  EXPECT_EQ(g.action, 1u);
  EXPECT_NEAR(g.decrease[0], 0.0, 1e-15);
  EXPECT_NEAR(g.decrease[1], entropy_of(kPrior), 1e-12);
  EXPECT_GT(g.decrease[2], 0.0);
  EXPECT_LT(g.decrease[2], g.decrease[1]);
  EXPECT_THROW(greedy_policy_oracle(m, 1), ContractError);
}

TEST(Greedy, ExhaustiveRecheck) {
  const auto r = greedy_report(20, 9);
  EXPECT_TRUE(r.pass);
  EXPECT_EQ(r.worst_case, 0.0);
}

TEST(InfoNce, SingleSampleBatchIsZero) {
  const auto m = random_pomdp(4);
  const auto policy = uniform_policy(m.num_actions);
  Rng rng(0);
  const auto e = infonce_bound(m, policy, 2, oracle_scorer(m, policy, 2), 1, 50, rng);
  EXPECT_EQ(e.mean, 0.0);
  EXPECT_EQ(e.stderr_, 0.0);
}

TEST(InfoNce, OracleCriticStaysBelowExactMi) {
  const auto r = infonce_report(50, 0);
  EXPECT_TRUE(r.pass) << r.worst_case;
  ASSERT_EQ(r.details.size(), 200u);
  for (const auto& d : r.details) {
    EXPECT_LE(d["bound"].get<double>(), std::log(d["k"].get<double>()) + 1e-12);
  }
  EXPECT_TRUE(r.summary["non_decreasing"].get<bool>());
}

TEST(InfoNce, BoundGrowsWithBatchSize) {
  const std::vector<std::size_t> ks{2, 4, 8, 16};
  std::vector<double> mean_by_k(ks.size(), 0.0);
  const std::size_t instances = 10;
  for (std::size_t i = 0; i < instances; ++i) {
    const auto m = random_pomdp(100 + i);
    const auto policy = random_policy(m.num_actions, i);
    Rng rng(i);
    const auto sweep = infonce_sweep(m, policy, 2, oracle_scorer(m, policy, 2), ks, 200, rng);
    for (std::size_t q = 0; q < ks.size(); ++q) mean_by_k[q] += sweep[q].mean / instances;
  }
  EXPECT_GE(spearman({2, 4, 8, 16}, mean_by_k), 0.0);
  EXPECT_GT(mean_by_k.back(), mean_by_k.front());
}

TEST(InfoNce, SweepPrefixMatchesSingleK) {
  const auto m = random_pomdp(6);
  const auto policy = random_policy(m.num_actions, 6);
  const auto scorer = oracle_scorer(m, policy, 3);
  Rng a(5), b(5);
  const auto sweep = infonce_sweep(m, policy, 3, scorer, {4}, 30, a);
  const auto single = infonce_bound(m, policy, 3, scorer, 4, 30, b);
  EXPECT_EQ(sweep[0].mean, single.mean);
  EXPECT_EQ(sweep[0].stderr_, single.stderr_);
}

TEST(Spearman, HandValues) {
  EXPECT_NEAR(spearman({1, 2, 3, 4}, {10, 20, 30, 40}), 1.0, 1e-15);
  EXPECT_NEAR(spearman({1, 2, 3, 4}, {4, 3, 2, 1}), -1.0, 1e-15);
  // Ranks (1,2,3) vs (1.5,1.5,3): r = 0.866...
  EXPECT_NEAR(spearman({1, 2, 3}, {5, 5, 9}), std::sqrt(3.0) / 2.0, 1e-12);
}

TEST(EntropyTrace, ShapeRangeAndBootstrapOrdering) {
  DataConfig dc;
  dc.views = 2;
  const Dataset ds = generate_dataset(dc);
  const Defender d = make_defender(ModelConfig{}, 4);
  const auto targets = eval_targets(ds);
  const std::vector<const Patch*> none(targets.size(), nullptr);
  Protocol one;
  one.horizon = 1;
  const auto single = entropy_trace(d, targets, none, one, 200, 1);
  EXPECT_EQ(single.mean.size(), 1u);

  const auto tr = entropy_trace(d, targets, none, Protocol{}, 1000, 1);
  ASSERT_EQ(tr.mean.size(), 4u);
  ASSERT_EQ(tr.samples.size(), targets.size());
  const auto logits = protocol_logits(d, targets, none, Protocol{});
  const std::size_t c = d.config.num_classes;
  for (std::size_t t = 0; t < 4; ++t) {
    double direct = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
      const double h = tr.samples[i][t];
      EXPECT_GE(h, 0.0);
      EXPECT_LE(h, std::log(static_cast<double>(c)) + 1e-12);
      direct += predictive_entropy(logits[t].data().subspan(i * c, c));
    }
    EXPECT_NEAR(tr.mean[t], direct / targets.size(), 1e-12);
    EXPECT_LE(tr.lo[t], tr.mean[t] + 1e-12);
    EXPECT_GE(tr.hi[t], tr.mean[t] - 1e-12);
    EXPECT_NEAR(tr.half_width[t], 0.5 * (tr.hi[t] - tr.lo[t]), 1e-15);
  }
}

}  // namespace eadlab
