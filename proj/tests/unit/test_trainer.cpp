#include <cmath>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "repirl/baselines.hpp"
#include "repirl/error.hpp"
#include "repirl/eval.hpp"
#include "repirl/oracle.hpp"
#include "repirl/trainer.hpp"

using namespace repirl;
using testing::traj;

namespace {

// One-step MDP whose per-token reward for action a is r[a].
struct Bandit {
  TokenMdp mdp = make_synthetic_mdp(3, 1, std::nullopt);
  RewardParams reward = make_reward(mdp, Repr::tabular, {}, 4096, std::nullopt);

  void set(Token a, double v) {
    const auto c = reward.featurizer.context(mdp.prompt(0).tokens, {});
    reward.weights[reward.featurizer.slot(c, a)] = v;
  }
};

Trajectory with_logprobs(const PolicyParams& policy, const TokenMdp& mdp, Trajectory t) {
  t.behavior_logprobs = policy_step_logprobs(policy, mdp, t);
  return t;
}

Task trivial_task() {
  TaskSpec spec;
  spec.kind = TaskKind::copy_sort;
  spec.vocab_size = 3;
  spec.prompt_length = 1;
  spec.num_prompts = 1;
  spec.horizon = 2;
  return make_task(spec);
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("config defaults and validation") {
  TrainConfig cfg;
  CHECK(cfg.lambda_prm == 0.05);
  CHECK(cfg.entropy_coef == 0.001);
  CHECK(cfg.clip_ratio == 0.2);
  CHECK(cfg.n_rollouts == 4);
  CHECK(cfg.policy_lr == 5e-7);
  CHECK(cfg.reward_lr == 3e-8);
  CHECK(cfg.policy_grad_clip == 1.0);
  CHECK(cfg.reward_grad_clip == 10.0);
  CHECK(cfg.weight_log_clip == 20.0);
  CHECK_NOTHROW(cfg.validate());
  cfg.clip_ratio = 1.5;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("clip_ratio"), Error);
  cfg = TrainConfig{};
  cfg.filter_low = 0.9;
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("importance log-weights") {
  Bandit b;
  auto t = traj(0, {1});
  t.behavior_logprobs = std::vector<double>{0.0};
  CHECK(importance_log_weight(b.reward, b.mdp, t) == 0.0);
  b.set(1, 1.0);
  t.behavior_logprobs = std::vector<double>{-1.0};
  CHECK(importance_log_weight(b.reward, b.mdp, t) == doctest::Approx(2.0).epsilon(1e-15));
  t.behavior_logprobs = std::vector<double>{-50.0};
  CHECK(importance_log_weight(b.reward, b.mdp, t) == 20.0);
  t.behavior_logprobs.reset();
  try {
    importance_log_weight(b.reward, b.mdp, t);
    FAIL("expected missing_logprob");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::missing_logprob);
  }
}

TEST_CASE("normalized weights form a probability vector") {
  const std::vector<double> lw{-700.0, 0.0, 3.0, 800.0, 12.5};
  const auto w = normalized_weights(lw);
  double s = 0.0;
  for (double x : w) {
    CHECK(x >= 0.0);
    s += x;
  }
  CHECK(s == doctest::Approx(1.0).epsilon(1e-15));
  const std::vector<double> flat(4, 2.0);
  CHECK(effective_sample_size(normalized_weights(flat)) == doctest::Approx(4.0).epsilon(1e-14));
}

TEST_CASE("importance weights recover the partition function") {
  const auto mdp = make_synthetic_mdp(2, 4, Token{0});
  auto reward = make_reward(mdp, Repr::tabular, ContextSpec{2, true}, 4096, std::nullopt);
  testing::randomize(reward.weights, 12);
  const double z = std::exp(exact_partition(mdp, reward, 0).log_z);
  const auto uniform = make_policy(mdp);
  // E_pi[w] over the full enumeration
  double wsum = 0.0;
  for (const auto& t : enumerate_trajectories(mdp, mdp.prompt(0))) {
    const auto tt = with_logprobs(uniform, mdp, t);
    wsum += std::exp(importance_log_weight(reward, mdp, tt, 1e9) + policy_logprob(uniform, mdp, t));
  }
  CHECK(wsum == doctest::Approx(z).epsilon(1e-12));
  const auto rollouts = sample_rollouts(uniform, mdp, mdp.prompt(0), 100000, 77);
  double mc = 0.0;
  for (const auto& r : rollouts) mc += std::exp(importance_log_weight(reward, mdp, r, 1e9));
  mc /= static_cast<double>(rollouts.size());
  CHECK(std::abs(mc - z) / z < 0.02);
}

TEST_CASE("prm_loss values") {
  Bandit b;
  TrainConfig cfg;
  BatchSplit split;
  split.policy_failed = {traj(0, {0})};
  split.expert_pool = {traj(0, {1})};
  const std::vector<double> one{1.0};
  b.set(0, 0.3);
  b.set(1, 0.3);
  CHECK(prm_loss(b.reward, b.mdp, split, one, cfg)->loss == doctest::Approx(0.0));
  b.set(0, 0.2);
  b.set(1, 0.5);
  CHECK(prm_loss(b.reward, b.mdp, split, one, cfg)->loss == doctest::Approx(-0.3).epsilon(1e-15));

  split.policy_failed = {traj(0, {0}), traj(0, {1})};
  split.expert_pool = {traj(0, {2})};
  b.set(0, 0.0);
  b.set(1, 0.4);
  b.set(2, 0.1);
  const std::vector<double> w{1.0, 3.0};
  CHECK(prm_loss(b.reward, b.mdp, split, w, cfg)->loss == doctest::Approx(0.2).epsilon(1e-14));

  split.policy_failed.clear();
  CHECK_FALSE(prm_loss(b.reward, b.mdp, split, {}, cfg).has_value());
}

TEST_CASE("prm_loss gradient equals the exact IRL gradient under soft-optimal weights") {
  const auto mdp = make_synthetic_mdp(2, 3, Token{0});
  auto reward = make_reward(mdp, Repr::tabular, ContextSpec{2, true}, 4096, std::nullopt);
  testing::randomize(reward.weights, 8);
  const auto sol = soft_value_iteration(mdp, reward, 1.0, 0);
  BatchSplit split;
  std::vector<double> w;
  for (const auto& t : enumerate_trajectories(mdp, mdp.prompt(0))) {
    split.policy_failed.push_back(t);
    w.push_back(std::exp(sol.trajectory_log_prob(t)));
  }
  split.expert_pool = {traj(0, {1, 0}), traj(0, {1, 1, 0}), traj(0, {0})};
  TrainConfig cfg;
  cfg.loss_reward_norm = RewardNorm::sum;
  cfg.reward_grad_clip = 1e12;
  auto step = prm_loss(reward, mdp, split, w, cfg);
  REQUIRE(step);
  const auto exact = exact_irl_gradient(mdp, reward, split.expert_pool);
  for (auto& g : step->grad) g = -g;
  CHECK(testing::max_abs_diff(step->grad, exact) < 1e-8);
}

TEST_CASE("prm_loss clips the gradient") {
  Bandit b;
  TrainConfig cfg;
  cfg.reward_grad_clip = 0.1;
  BatchSplit split;
  split.policy_failed = {traj(0, {0})};
  split.expert_pool = {traj(0, {1})};
  const std::vector<double> one{1.0};
  const auto step = prm_loss(b.reward, b.mdp, split, one, cfg);
  double n = 0.0;
  for (double g : step->grad) n += g * g;
  CHECK(std::sqrt(n) == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(step->grad_norm == doctest::Approx(std::sqrt(2.0)).epsilon(1e-12));
}

TEST_CASE("advantage estimates") {
  auto rloo = [](std::vector<double> r) { return advantage_estimates(r, AdvEstimator::rloo); };
  const auto a = rloo({1, 0, 0, 0});
  CHECK(a[0] == doctest::Approx(1.0));
  for (int i = 1; i < 4; ++i) CHECK(a[i] == doctest::Approx(-1.0 / 3));
  for (double x : rloo({0.7, 0.7, 0.7})) CHECK(x == 0.0);
  CHECK(rloo({2, 0}) == std::vector<double>{2.0, -2.0});
  const auto g = advantage_estimates(std::vector<double>{1, 0, 0, 0}, AdvEstimator::grpo);
  CHECK(g[0] == doctest::Approx(1.732046).epsilon(1e-4));
  CHECK(g[1] == doctest::Approx(-0.577349).epsilon(1e-4));
  CHECK_THROWS_AS(rloo({1.0}), Error);
}

TEST_CASE("RLOO advantages sum to exactly zero") {
  Rng rng(3);
  for (int trial = 0; trial < 4000; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(15));
    std::vector<double> r(static_cast<std::size_t>(n));
    for (auto& x : r) {
      x = trial % 2 ? static_cast<double>(rng.below(2)) : rng.uniform() * 3.0 - 1.0;
    }
    double s = 0.0;
    for (double x : advantage_estimates(r, AdvEstimator::rloo)) s += x;
    REQUIRE(s == 0.0);
  }
}

TEST_CASE("combined reward") {
  TrainConfig cfg;
  CHECK(combined_reward(1.0, 0.4, cfg) == doctest::Approx(1.02).epsilon(1e-15));
  cfg.lambda_prm = 0.0;
  CHECK(combined_reward(1.0, 123.0, cfg) == 1.0);
  cfg.lambda_prm = 0.1;
  CHECK(combined_reward(0.0, -0.5, cfg) == doctest::Approx(-0.05).epsilon(1e-15));
  cfg.format_reward = true;
  CHECK(combined_reward(0.0, 0.0, cfg, false) == -1.0);
}

TEST_CASE("surrogate at the snapshot is the mean advantage") {
  const auto mdp = make_synthetic_mdp(3, 2, std::nullopt);
  auto policy = make_policy(mdp);
  testing::randomize(policy.logits, 6);
  TrainConfig cfg;
  cfg.entropy_coef = 0.0;
  const std::vector<Trajectory> rs{with_logprobs(policy, mdp, traj(0, {1, 2})),
                                   with_logprobs(policy, mdp, traj(0, {0, 0}))};
  const std::vector<double> adv{0.5, -1.5};
  std::vector<double> grad;
  const auto st = policy_objective(policy, policy, mdp, rs, adv, cfg, grad);
  CHECK(st.surrogate == doctest::Approx((0.5 * 2 - 1.5 * 2) / 4.0).epsilon(1e-14));
  // vanilla policy gradient of the advantage-weighted log-likelihood
  std::vector<double> x = policy.logits;
  auto obj = [&] {
    PolicyParams p = policy;
    p.logits = x;
    double s = 0.0;
    for (std::size_t i = 0; i < rs.size(); ++i) s += adv[i] * policy_logprob(p, mdp, rs[i]);
    return s / 4.0;
  };
  const auto fd = testing::finite_difference(obj, x);
  CHECK(testing::max_abs_diff(grad, fd) < 1e-8);
}

TEST_CASE("clipped branch is selected above 1 + epsilon") {
  const auto mdp = make_synthetic_mdp(2, 1, std::nullopt);
  const auto old = make_policy(mdp);
  auto policy = old;
  const auto c = policy.featurizer.context(mdp.prompt(0).tokens, {});
  policy.logits[policy.featurizer.slot(c, 0)] = std::log(3.0);  // p = 0.75, rho = 1.5
  TrainConfig cfg;
  cfg.entropy_coef = 0.0;
  const std::vector<Trajectory> rs{with_logprobs(old, mdp, traj(0, {0}))};
  const std::vector<double> adv{2.0};
  std::vector<double> grad;
  const auto st = policy_objective(policy, old, mdp, rs, adv, cfg, grad);
  CHECK(st.surrogate == doctest::Approx(1.2 * 2.0).epsilon(1e-14));
  for (double g : grad) CHECK(g == 0.0);
}

TEST_CASE("bandit update raises the positive-advantage action") {
  const auto mdp = make_synthetic_mdp(2, 1, std::nullopt);
  auto policy = make_policy(mdp);
  const FrozenPolicy old(policy);
  TrainConfig cfg;
  cfg.lr_scale = 1e5;
  const std::vector<Trajectory> rs{with_logprobs(policy, mdp, traj(0, {0})),
                                   with_logprobs(policy, mdp, traj(0, {1}))};
  const std::vector<double> adv{1.0, -1.0};
  const double before = std::exp(policy.log_probs(mdp, mdp.initial_state(0))[0]);
  policy_update(policy, old, mdp, rs, adv, cfg);
  const double after = std::exp(policy.log_probs(mdp, mdp.initial_state(0))[0]);
  CHECK(after > before);
}

TEST_CASE("prompt filter keeps interior accuracies") {
  TrainConfig cfg;
  const std::map<int, double> acc{{0, 0.9}, {1, 0.1}, {2, 0.5}, {3, 0.2}, {4, 0.8}};
  CHECK(prompt_filter(acc, cfg) == std::vector<int>{2, 3, 4});
}

TEST_CASE("zero epochs returns the initial parameters") {
  const auto task = trivial_task();
  const auto experts = make_expert_dataset(task.mdp, task.train_ids, 4, 1);
  TrainConfig cfg;
  cfg.epochs = 0;
  const auto res = run_repirl(task.mdp, experts, cfg);
  CHECK(res.metrics.iterations.empty());
  for (double l : res.policy.logits) CHECK(l == 0.0);
  for (double w : res.reward.weights) CHECK(w == 0.0);
}

TEST_CASE("trivial task is solved within 50 iterations") {
  const auto task = trivial_task();
  const auto experts = make_expert_dataset(task.mdp, task.train_ids, 4, 1);
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.batch_size = 1;
  cfg.lr_scale = 1e8;
  cfg.lambda_prm = 0.5;
  RunOptions opt;
  opt.train_ids = task.train_ids;
  const auto res = run_repirl(task.mdp, experts, cfg, opt);
  CHECK(res.metrics.iterations.size() == 50);
  CHECK(pass_at_1(res.policy, task.mdp, task.train_ids) == 1.0);
}

TEST_CASE("flags off reduces to outcome-only RLOO") {
  TaskSpec spec;
  spec.num_prompts = 16;
  spec.prompt_length = 3;
  spec.horizon = 6;
  const auto task = make_task(spec);
  const auto experts = make_expert_dataset(task.mdp, task.train_ids, 32, 2);
  TrainConfig cfg;
  cfg.lambda_prm = 0.0;
  cfg.use_importance_weights = false;
  cfg.promote_correct = false;
  cfg.lr_scale = 1e8;
  cfg.epochs = 10;
  cfg.batch_size = 8;
  cfg.seed = 5;
  RunOptions opt;
  opt.train_ids = task.train_ids;
  const auto a = run_repirl(task.mdp, experts, cfg, opt);
  const auto b = run_baseline(Method::rloo, task.mdp, experts, cfg, opt);
  CHECK(a.policy.logits == b.policy.logits);
  REQUIRE(a.metrics.iterations.size() == b.metrics.iterations.size());
  for (std::size_t i = 0; i < a.metrics.iterations.size(); ++i) {
    CHECK(a.metrics.iterations[i].mean_outcome == b.metrics.iterations[i].mean_outcome);
    CHECK(a.metrics.iterations[i].surrogate == b.metrics.iterations[i].surrogate);
  }
}

TEST_CASE("metrics are independent of the worker count") {
  TaskSpec spec;
  spec.num_prompts = 12;
  spec.prompt_length = 3;
  spec.horizon = 6;
  const auto task = make_task(spec);
  const auto experts = make_expert_dataset(task.mdp, task.train_ids, 24, 2);
  TrainConfig cfg;
  cfg.lr_scale = 1e8;
  cfg.epochs = 4;
  cfg.batch_size = 4;
  RunOptions opt;
  opt.train_ids = task.train_ids;
  std::string csv[2];
  for (int k = 0; k < 2; ++k) {
    cfg.workers = k == 0 ? 1 : 3;
    std::ostringstream out;
    write_metrics_csv(out, run_repirl(task.mdp, experts, cfg, opt).metrics);
    csv[k] = out.str();
  }
  CHECK(csv[0] == csv[1]);
}

TEST_CASE("importance-sampled gradient is consistent with the exact gradient") {
  const auto mdp = make_synthetic_mdp(2, 3, Token{0});
  auto reward = make_reward(mdp, Repr::tabular, ContextSpec{2, true}, 4096, std::nullopt);
  testing::randomize(reward.weights, 21);
  const std::vector<Trajectory> expert{traj(0, {1, 0}), traj(0, {1, 1, 1})};
  const auto exact = exact_irl_gradient(mdp, reward, expert);
  const auto est =
      importance_sampled_irl_gradient(mdp, reward, make_policy(mdp), expert, 20000, 4);
  int within = 0, total = 0;
  for (std::size_t k = 0; k < exact.size(); ++k) {
    if (exact[k] == 0.0 && est.stderr_[k] == 0.0) continue;
    ++total;
    if (std::abs(est.mean[k] - exact[k]) <= 3.0 * est.stderr_[k] + 1e-12) ++within;
  }
  REQUIRE(total > 0);
  CHECK(static_cast<double>(within) / total >= 0.9);
}

}
