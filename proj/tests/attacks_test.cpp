#include <gtest/gtest.h>

#include <cmath>

#include "eadlab/attacks.hpp"
#include "eadlab/io.hpp"
#include "eadlab/train.hpp"
#include "gradcheck.hpp"

namespace eadlab {
namespace {

using testing::random_tensor;

struct World {
  Dataset ds;
  Defender random_model;  // untrained encoder, random heads
  World() {
    DataConfig dc;
    dc.views = 4;
    ds = generate_dataset(dc);
    random_model = make_defender(ModelConfig{}, 3);
    Rng rng(8);
    for (double& v : random_model.head_w.mutable_data()) v = rng.uniform(-1, 1);
    for (double& v : random_model.pol_w.mutable_data()) v = rng.uniform(-0.3, 0.3);
  }
  AttackTarget target(std::size_t k, CameraState s1 = {0.05, -0.04}) const { return {&ds.scenes[k], s1, k}; }
  const StateBounds& bounds() const { return ds.geometry.bounds; }
};

const World& world() {
  static const World w;
  return w;
}

// Single-view classifier trained on the clean toy task.
const Defender& trained_single_view() {
  static const Defender d = [] {
    Defender m = make_defender(ModelConfig{}, 0);
    TrainConfig tc;
    tc.horizon = 1;
    tc.epochs_offline = 60;
    tc.offline_usap = false;
    tc.r_patch = 0.0;
    train_offline(world().ds, m, tc);
    return m;
  }();
  return d;
}

AttackConfig config(AttackKind kind, std::size_t n = 4) {
  AttackConfig c;
  c.kind = kind;
  c.iterations = n;
  c.eot_samples = 3;
  c.horizon = 2;
  c.seed = 5;
  return c;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  EXPECT_EQ(a.size(), b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::string parameter_hash(const Defender& d) { return git_blob_hash(encode_checkpoint(d)); }

}  // namespace

// ---------------------------------------------------------------------------
// mim_step

TEST(MimStep, ZeroIterationsReturnPatchUnchanged) {
  const auto& w = world();
  Rng rng(1);
  const Patch init{random_tensor({10, 10, 3}, rng, 0, 1)};
  for (auto kind : {AttackKind::mim, AttackKind::eot, AttackKind::usp_adaptive}) {
    const auto r = run_attack(w.random_model, w.target(0), config(kind, 0), w.bounds(), &init);
    EXPECT_EQ(max_abs_diff(r.patch.texels, init.texels), 0.0);
    EXPECT_TRUE(r.objective.empty());
  }
}

TEST(MimStep, PositiveGradientStepsEveryTexelByAlpha) {
  const Patch p{Tensor(Shape{2, 2, 3}, std::vector<double>{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.995, 1.0, 0.0})};
  Rng rng(2);
  const Tensor grad = random_tensor({2, 2, 3}, rng, 0.01, 2.0);
  const double alpha = 0.01;
  const auto s = mim_step(p, grad, Tensor(Shape{2, 2, 3}, 0.0), alpha, 0.0);
  for (std::size_t i = 0; i < p.texels.size(); ++i) {
    EXPECT_DOUBLE_EQ(s.patch.texels[i], std::min(1.0, p.texels[i] + alpha)) << i;
  }
}

TEST(MimStep, TwoMomentumStepsMatchHandUnrolledRecursion) {
  const std::vector<double> p0{0.5, 0.2, 0.9, 0.4};
  const std::vector<double> g1{0.3, -0.1, 0.2, -0.4};
  const std::vector<double> g2{-0.5, 0.05, 0.1, 0.6};
  const double alpha = 0.1, mu = 1.0;

  // Oracle: m1 = g1/|g1|_1, m2 = mu m1 + g2/|g2|_1, p_k = clamp(p_{k-1} + alpha sign(m_k)).
  const double l1a = 0.3 + 0.1 + 0.2 + 0.4, l1b = 0.5 + 0.05 + 0.1 + 0.6;
  std::vector<double> m1(4), m2(4), p1(4), p2(4);
  auto sgn = [](double v) { return v > 0 ? 1.0 : v < 0 ? -1.0 : 0.0; };
  for (int i = 0; i < 4; ++i) {
    m1[i] = g1[i] / l1a;
    p1[i] = std::clamp(p0[i] + alpha * sgn(m1[i]), 0.0, 1.0);
    m2[i] = mu * m1[i] + g2[i] / l1b;
    p2[i] = std::clamp(p1[i] + alpha * sgn(m2[i]), 0.0, 1.0);
  }

  auto tensor = [](const std::vector<double>& v) { return Tensor(Shape{2, 2, 1}, v); };
  const auto s1 = mim_step(Patch{tensor(p0)}, tensor(g1), tensor({0, 0, 0, 0}), alpha, mu);
  const auto s2 = mim_step(s1.patch, tensor(g2), s1.momentum, alpha, mu);
  for (int i = 0; i < 4; ++i) {
    EXPECT_NEAR(s1.momentum[i], m1[i], 1e-12);
    EXPECT_NEAR(s2.momentum[i], m2[i], 1e-12);
    EXPECT_NEAR(s1.patch.texels[i], p1[i], 1e-12);
    EXPECT_NEAR(s2.patch.texels[i], p2[i], 1e-12);
  }
}

TEST(MimStep, ZeroGradientWithoutMomentumKeepsPatch) {
  const Patch p{Tensor(Shape{2, 2, 3}, 0.3)};
  const auto s = mim_step(p, Tensor(Shape{2, 2, 3}, 0.0), Tensor(Shape{2, 2, 3}, 0.0), 0.1, 0.0);
  EXPECT_EQ(max_abs_diff(s.patch.texels, p.texels), 0.0);
  EXPECT_THROW(mim_step(p, Tensor(Shape{2, 2, 2}, 0.0), Tensor(Shape{2, 2, 3}, 0.0), 0.1, 0.0), DimensionError);
}

TEST(AttackConfigTest, ValidationRejectsBadValues) {
  const auto& w = world();
  auto bad = config(AttackKind::eot);
  bad.alpha = 0.0;
  EXPECT_THROW(run_attack(w.random_model, w.target(0), bad, w.bounds()), ConfigError);
  bad = config(AttackKind::eot);
  bad.eot_samples = 0;
  EXPECT_THROW(run_attack(w.random_model, w.target(0), bad, w.bounds()), ConfigError);
  bad = config(AttackKind::eot);
  bad.momentum = -1.0;
  EXPECT_THROW(run_attack(w.random_model, w.target(0), bad, w.bounds()), ConfigError);
  bad = config(AttackKind::pipeline_adaptive);
  bad.horizon = 9;
  EXPECT_THROW(run_attack(w.random_model, w.target(0), bad, w.bounds()), ConfigError);
  EXPECT_THROW(parse_attack_kind("fgsm"), ConfigError);
  EXPECT_THROW(parse_goal("evade"), ConfigError);
  EXPECT_EQ(parse_attack_kind("usp_adaptive"), AttackKind::usp_adaptive);
}

// ---------------------------------------------------------------------------
// Degenerate equivalences

TEST(Eot, SingleFrontalSampleIsMimAgainstThatView) {
  const auto& w = world();
  auto eot = config(AttackKind::eot, 6);
  eot.eot_samples = 1;
  eot.eot_box = StateBounds{0.0, 0.0, 0.0, 0.0};
  auto mim = config(AttackKind::mim, 6);
  mim.horizon = 1;
  const AttackTarget t = w.target(2, {0.0, 0.0});
  const auto a = run_attack(w.random_model, t, eot, w.bounds());
  const auto b = run_attack(w.random_model, t, mim, w.bounds());
  EXPECT_LE(max_abs_diff(a.objective, b.objective), 1e-12);
  EXPECT_LE(max_abs_diff(a.patch.texels, b.patch.texels), 1e-12);
}

TEST(UspAdaptive, SingleStepIsEot) {
  const auto& w = world();
  auto usp = config(AttackKind::usp_adaptive, 5);
  usp.horizon = 1;
  auto eot = config(AttackKind::eot, 5);
  const auto a = run_attack(w.random_model, w.target(1), usp, w.bounds());
  const auto b = run_attack(w.random_model, w.target(1), eot, w.bounds());
  EXPECT_LE(max_abs_diff(a.objective, b.objective), 1e-12);
  EXPECT_LE(max_abs_diff(a.patch.texels, b.patch.texels), 1e-12);
}

TEST(UspAdaptive, IdenticalSamplesAverageToSingleSampleGradient) {
  const auto& w = world();
  // A one-point state box forces every sampled start and action to coincide.
  const StateBounds point{0.1, 0.1, -0.05, -0.05};
  Rng init(4);
  const Patch p{random_tensor({10, 10, 3}, init, 0, 1)};
  auto one = config(AttackKind::usp_adaptive);
  one.horizon = 3;
  one.eot_samples = 1;
  auto many = one;
  many.eot_samples = 5;
  Rng r1(0), r2(0);
  const auto a = attack_objective(w.random_model, w.target(3), p, one, point, r1);
  const auto b = attack_objective(w.random_model, w.target(3), p, many, point, r2);
  EXPECT_NEAR(a.total, b.total, 1e-12);
  EXPECT_LE(max_abs_diff(a.grad, b.grad), 1e-12 * std::max(1.0, max_abs_diff(a.grad, Tensor(a.grad.shape(), 0.0))));
  EXPECT_GT(max_abs_diff(a.grad, Tensor(a.grad.shape(), 0.0)), 0.0);
}

TEST(PolicyAdaptive, ZeroLagrangeWeightIsFixedViewMim) {
  const auto& w = world();
  auto pol = config(AttackKind::policy_adaptive, 6);
  pol.horizon = 3;
  pol.lagrange_c = 0.0;
  auto mim = config(AttackKind::mim, 6);
  mim.horizon = 3;
  const auto a = run_attack(w.random_model, w.target(4), pol, w.bounds());
  const auto b = run_attack(w.random_model, w.target(4), mim, w.bounds());
  EXPECT_LE(max_abs_diff(a.objective, b.objective), 1e-12);
  EXPECT_LE(max_abs_diff(a.patch.texels, b.patch.texels), 1e-12);
}

TEST(PolicyAdaptive, TotalDecomposesIntoLossAndActionTerms) {
  const auto& w = world();
  auto pol = config(AttackKind::policy_adaptive, 8);
  pol.horizon = 4;
  const auto r = run_attack(w.random_model, w.target(5), pol, w.bounds());
  ASSERT_EQ(r.objective.size(), 8u);
  for (std::size_t i = 0; i < r.objective.size(); ++i) {
    EXPECT_NEAR(r.objective[i], r.loss_terms[i] + pol.lagrange_c * r.action_terms[i], 1e-12);
    EXPECT_LE(r.action_terms[i], 0.0);
  }
  EXPECT_LT(r.action_terms.front(), 0.0);
}

TEST(PipelineAdaptive, SingleStepIsFixedViewMim) {
  const auto& w = world();
  auto pipe = config(AttackKind::pipeline_adaptive, 6);
  pipe.horizon = 1;
  auto mim = config(AttackKind::mim, 6);
  mim.horizon = 1;
  const auto a = run_attack(w.random_model, w.target(6), pipe, w.bounds());
  const auto b = run_attack(w.random_model, w.target(6), mim, w.bounds());
  EXPECT_LE(max_abs_diff(a.objective, b.objective), 1e-12);
  EXPECT_LE(max_abs_diff(a.patch.texels, b.patch.texels), 1e-12);
}

TEST(PipelineAdaptive, PatchGradientMatchesFiniteDifferencesThroughUnroll) {
  const auto& w = world();
  auto cfg = config(AttackKind::pipeline_adaptive);
  cfg.horizon = 2;
  cfg.patch_size = 2;
  // Beliefs of the untrained encoder are small; a large policy gain makes the
  // patch move the camera noticeably.
  Defender d = w.random_model.clone();
  Rng gain(31);
  for (double& v : d.pol_w.mutable_data()) v = gain.uniform(-60, 60);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(100 + seed);
    const Patch p{random_tensor({2, 2, 3}, rng, 0.2, 0.8)};
    const AttackTarget t = w.target(seed % 8, {rng.uniform(-0.1, 0.1), rng.uniform(-0.05, 0.05)});
    Rng unused(0);
    const auto v = attack_objective(d, t, p, cfg, w.bounds(), unused);
    // The policy must actually move the camera for the check to cover it.
    {
      Tape tape;
      RolloutOptions opt;
      opt.horizon = 2;
      opt.bounds = w.bounds();
      const auto traj = rollout(d, {t.scene}, {&p}, detail::repeat_state(t.s1, 1), opt);
      ASSERT_GT(std::abs(traj[1].state.at(0, 0) - t.s1.yaw), 1e-3);
    }
    const double h = 1e-5;
    double max_diff = 0.0, max_ref = 0.0;
    for (std::size_t k = 0; k < p.texels.size(); ++k) {
      auto at = [&](double delta) {
        Patch q{p.texels.clone()};
        q.texels.mutable_data()[k] += delta;
        Rng r(0);
        return attack_objective(d, t, q, cfg, w.bounds(), r).total;
      };
      const double numeric = (at(h) - at(-h)) / (2 * h);
      max_diff = std::max(max_diff, std::abs(numeric - v.grad[k]));
      max_ref = std::max(max_ref, std::abs(numeric));
    }
    ASSERT_GT(max_ref, 0.0);
    EXPECT_LE(max_diff / max_ref, 1e-3) << "seed " << seed;
  }
}

// ---------------------------------------------------------------------------
// Perception attack objective

TEST(PerceptionAdaptive, UnderlyingContentGivesZeroObjectiveAndStays) {
  const auto& w = world();
  auto cfg = config(AttackKind::perception_adaptive, 5);
  cfg.horizon = 3;
  const Scene& scene = w.ds.scenes[2];
  const Patch benign = underlying_patch(scene, 10, 10);
  Rng rng(0);
  const auto v = attack_objective(w.random_model, w.target(2), benign, cfg, w.bounds(), rng);
  EXPECT_EQ(v.total, 0.0);
  EXPECT_EQ(max_abs_diff(v.grad, Tensor(v.grad.shape(), 0.0)), 0.0);
  const auto r = run_attack(w.random_model, w.target(2), cfg, w.bounds(), &benign);
  EXPECT_EQ(max_abs_diff(r.patch.texels, benign.texels), 0.0);
}

TEST(PerceptionAdaptive, ObjectiveIsMeanSquaredBeliefDistanceEitherWay) {
  const auto& w = world();
  auto cfg = config(AttackKind::perception_adaptive);
  cfg.horizon = 3;
  cfg.eot_samples = 4;
  const Scene& scene = w.ds.scenes[1];
  Rng init(9);
  const Patch adv{random_tensor({10, 10, 3}, init, 0, 1)};
  const Patch benign = underlying_patch(scene, 10, 10);

  Rng rng(77);
  const auto v = attack_objective(w.random_model, w.target(1), adv, cfg, w.bounds(), rng);

  // Oracle: replay the same surrogate draw and measure both directions.
  Rng replay(77);
  const auto draw = detail::draw_surrogate(cfg, w.bounds(), replay);
  Tape no_grad;
  const auto a = detail::surrogate_rollout(w.random_model, scene, &adv, draw, cfg, w.bounds()).back().belief;
  const auto b = detail::surrogate_rollout(w.random_model, scene, &benign, draw, cfg, w.bounds()).back().belief;
  double forward = 0.0, backward = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    forward += (a[i] - b[i]) * (a[i] - b[i]);
    backward += (b[i] - a[i]) * (b[i] - a[i]);
  }
  forward /= 4.0;
  backward /= 4.0;
  EXPECT_NEAR(v.total, forward, 1e-12);
  EXPECT_NEAR(v.total, backward, 1e-12);
  EXPECT_GT(v.total, 0.0);
}

// ---------------------------------------------------------------------------
// Invariants

TEST(Attacks, PatchStaysInUnitRangeAtEveryIteration) {
  const auto& w = world();
  for (auto kind : {AttackKind::mim, AttackKind::eot, AttackKind::usp_adaptive, AttackKind::policy_adaptive,
                    AttackKind::pipeline_adaptive, AttackKind::perception_adaptive}) {
    auto cfg = config(kind, 6);
    cfg.alpha = 0.3;  // large steps hit the clamp often
    const AttackTarget t = w.target(3);
    // Replays run_attack's loop, checking every intermediate patch.
    Rng rng(derive_seed(cfg.seed, t.id));
    MimState s{uniform_patch(cfg.patch_size, rng), Tensor(Shape{10, 10, 3}, 0.0)};
    std::size_t saturated = 0;
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
      const auto v = attack_objective(w.random_model, t, s.patch, cfg, w.bounds(), rng);
      s = mim_step(s.patch, v.grad, s.momentum, cfg.alpha, cfg.momentum);
      for (double x : s.patch.texels.data()) {
        ASSERT_GE(x, 0.0) << to_string(kind);
        ASSERT_LE(x, 1.0) << to_string(kind);
        saturated += x == 0.0 || x == 1.0;
      }
    }
    EXPECT_GT(saturated, 0u) << to_string(kind);
    const auto r = run_attack(w.random_model, t, cfg, w.bounds());
    EXPECT_EQ(max_abs_diff(r.patch.texels, s.patch.texels), 0.0) << to_string(kind);
  }
}

TEST(Attacks, DefenderParametersBitUnchanged) {
  const auto& w = world();
  const std::string before = parameter_hash(w.random_model);
  for (auto kind : {AttackKind::mim, AttackKind::eot, AttackKind::usp_adaptive, AttackKind::policy_adaptive,
                    AttackKind::pipeline_adaptive, AttackKind::perception_adaptive}) {
    run_attack(w.random_model, w.target(1), config(kind, 3), w.bounds());
    EXPECT_EQ(parameter_hash(w.random_model), before) << to_string(kind);
  }
}

TEST(Attacks, FixedSeedIsBitReproducible) {
  const auto& w = world();
  for (auto kind : {AttackKind::eot, AttackKind::usp_adaptive, AttackKind::perception_adaptive}) {
    const auto a = run_attack(w.random_model, w.target(2), config(kind, 4), w.bounds());
    const auto b = run_attack(w.random_model, w.target(2), config(kind, 4), w.bounds());
    EXPECT_EQ(max_abs_diff(a.patch.texels, b.patch.texels), 0.0);
    EXPECT_EQ(a.objective, b.objective);
    EXPECT_EQ(a.final_objective, b.final_objective);
    auto other = config(kind, 4);
    other.seed = 6;
    const auto c = run_attack(w.random_model, w.target(2), other, w.bounds());
    EXPECT_GT(max_abs_diff(a.patch.texels, c.patch.texels), 0.0);
  }
}

TEST(Attacks, ThreadedRunMatchesSerial) {
  const auto& w = world();
  std::vector<AttackTarget> targets;
  for (std::size_t k = 0; k < 4; ++k) targets.push_back(w.target(k));
  const auto cfg = config(AttackKind::eot, 3);
  const auto serial = attack_all(w.random_model, targets, cfg, w.bounds(), 1);
  const auto threaded = attack_all(w.random_model, targets, cfg, w.bounds(), 3);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    EXPECT_EQ(max_abs_diff(serial[i].patch.texels, threaded[i].patch.texels), 0.0);
  }
}

TEST(Attacks, EpsilonBallBoundsDistanceFromStart) {
  const auto& w = world();
  auto cfg = config(AttackKind::eot, 10);
  cfg.alpha = 0.02;
  cfg.epsilon = 0.05;
  Rng rng(3);
  const Patch init{random_tensor({10, 10, 3}, rng, 0, 1)};
  const auto r = run_attack(w.random_model, w.target(0), cfg, w.bounds(), &init);
  const double d = max_abs_diff(r.patch.texels, init.texels);
  EXPECT_LE(d, 0.05 + 1e-15);
  EXPECT_GT(d, 0.04);
}

// ---------------------------------------------------------------------------
// evaluate_asr

TEST(EvaluateAsr, RejectsEmptyOrMisalignedInput) {
  const auto& w = world();
  Protocol pr;
  EXPECT_THROW(evaluate_asr({}, {}, w.random_model, Goal::dodging, pr), ContractError);
  Rng rng(1);
  const std::vector<Patch> one{uniform_patch(10, rng)};
  EXPECT_THROW(evaluate_asr(one, {w.target(0), w.target(1)}, w.random_model, Goal::dodging, pr), ContractError);
}

TEST(EvaluateAsr, BenignPatchesOnAccurateModelGiveZeroAsr) {
  const auto& w = world();
  const Defender& d = trained_single_view();
  Protocol pr;
  pr.horizon = 1;
  const auto targets = eval_targets(w.ds);
  ASSERT_EQ(accuracy(d, targets, std::vector<const Patch*>(targets.size(), nullptr), pr), 1.0);
  std::vector<Patch> benign;
  for (const auto& t : targets) benign.push_back(underlying_patch(*t.scene, 10, 10));
  const auto rep = evaluate_asr(benign, targets, d, Goal::dodging, pr, 150);
  EXPECT_EQ(rep.asr(), 0.0);
  ASSERT_EQ(rep.rows.size(), targets.size());
  EXPECT_EQ(rep.rows[0].iterations, 150u);
  EXPECT_EQ(evaluate_asr(benign, targets, d, Goal::impersonation, pr).asr(), 0.0);
}

TEST(EvaluateAsr, RecountByPerSceneLoopMatchesExactly) {
  const auto& w = world();
  const Defender& d = trained_single_view();
  std::vector<AttackTarget> targets = eval_targets(w.ds);
  std::vector<Patch> patches;
  Rng rng(12);
  for (std::size_t i = 0; i < targets.size(); ++i) patches.push_back(uniform_patch(10, rng));
  for (auto goal : {Goal::dodging, Goal::impersonation}) {
    for (std::size_t horizon : {1u, 3u}) {
      Protocol pr;
      pr.horizon = horizon;
      const auto rep = evaluate_asr(patches, targets, d, goal, pr);
      std::size_t successes = 0;
      for (std::size_t i = 0; i < targets.size(); ++i) {
        const Tensor logits = final_logits(d, {targets[i]}, {&patches[i]}, pr);
        std::size_t best = 0;
        for (std::size_t c = 1; c < logits.dim(1); ++c)
          if (logits.at(0, c) > logits.at(0, best)) best = c;
        const int y = targets[i].scene->identity_label;
        const int target_label = (y + 1) % 8;
        const bool ok = goal == Goal::dodging ? static_cast<int>(best) != y : static_cast<int>(best) == target_label;
        EXPECT_EQ(rep.rows[i].success, ok) << i;
        double lse = 0.0, mx = logits.at(0, 0);
        for (std::size_t c = 0; c < logits.dim(1); ++c) mx = std::max(mx, logits.at(0, c));
        for (std::size_t c = 0; c < logits.dim(1); ++c) lse += std::exp(logits.at(0, c) - mx);
        const int want = goal == Goal::dodging ? y : target_label;
        EXPECT_NEAR(rep.rows[i].final_loss, mx + std::log(lse) - logits.at(0, want), 1e-12);
        successes += ok;
      }
      EXPECT_EQ(rep.asr(), static_cast<double>(successes) / static_cast<double>(targets.size()));
    }
  }
}

}  // namespace eadlab
