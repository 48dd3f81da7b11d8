#include <cmath>
#include <map>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "repirl/error.hpp"
#include "repirl/models.hpp"
#include "repirl/numeric.hpp"

using namespace repirl;
using testing::traj;

TEST_SUITE("models") {

TEST_CASE("uniform policy log-probability of a length-3 trajectory") {
  const auto mdp = make_synthetic_mdp(4, 3, std::nullopt);
  const auto policy = make_policy(mdp);
  CHECK(policy_logprob(policy, mdp, traj(0, {1, 2, 3})) == doctest::Approx(3 * std::log(0.25)).epsilon(1e-12));
  CHECK(policy_logprob(policy, mdp, traj(0, {1, 2, 3})) == doctest::Approx(-4.158883).epsilon(1e-6));
}

TEST_CASE("certain policy has log-probability near zero") {
  const auto mdp = make_synthetic_mdp(3, 3, std::nullopt);
  auto policy = make_policy(mdp);
  const auto t = traj(0, {2, 1, 2});
  State s = mdp.initial_state(0);
  for (Token a : t.actions) {
    const auto c = policy.featurizer.context(mdp.prompt(0).tokens, s.prefix);
    policy.logits[policy.featurizer.slot(c, a)] = 40.0;
    s = mdp.step(s, a);
  }
  CHECK(std::abs(policy_logprob(policy, mdp, t)) < 1e-9);
}

TEST_CASE("log-probability equals per-step log-softmax recomputation") {
  const auto mdp = make_synthetic_mdp(3, 4, Token{0});
  auto policy = make_policy(mdp);
  testing::randomize(policy.logits, 42, 2.0);
  const auto t = traj(0, {2, 1, 2, 0});
  double want = 0.0;
  State s = mdp.initial_state(0);
  for (Token a : t.actions) {
    const auto c = policy.featurizer.context(mdp.prompt(0).tokens, s.prefix);
    std::vector<double> row(policy.row(c).begin(), policy.row(c).end());
    double z = 0.0;
    for (double l : row) z += std::exp(l);
    want += row[static_cast<std::size_t>(a)] - std::log(z);
    s = mdp.step(s, a);
  }
  CHECK(policy_logprob(policy, mdp, t) == doctest::Approx(want).epsilon(1e-12));
  const auto steps = policy_step_logprobs(policy, mdp, t);
  double sum = 0.0;
  for (double x : steps) sum += x;
  CHECK(sum == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("sample_rollouts records log-probabilities and matches enumeration frequencies") {
  const auto mdp = make_synthetic_mdp(2, 3, std::nullopt);
  const auto policy = make_policy(mdp);
  const auto four = sample_rollouts(policy, mdp, mdp.prompt(0), 4, 1);
  REQUIRE(four.size() == 4);
  for (const auto& r : four) {
    REQUIRE(r.behavior_logprobs.has_value());
    CHECK(r.behavior_logprobs->size() == r.actions.size());
  }
  const int n = 100000;
  const auto many = sample_rollouts(policy, mdp, mdp.prompt(0), n, 9);
  std::map<std::vector<Token>, int> freq;
  for (const auto& r : many) ++freq[r.actions];
  CHECK(freq.size() == 8);
  for (const auto& [seq, c] : freq) {
    CHECK(std::abs(static_cast<double>(c) / n - 0.125) < 0.005);
  }
}

TEST_CASE("deterministic policy yields identical rollouts") {
  const auto mdp = make_synthetic_mdp(3, 3, std::nullopt);
  auto policy = make_policy(mdp);
  for (std::size_t c = 0; c < policy.featurizer.num_contexts(); ++c) {
    policy.logits[policy.featurizer.slot(c, 1)] = 1e3;
  }
  const auto rs = sample_rollouts(policy, mdp, mdp.prompt(0), 5, 3);
  for (const auto& r : rs) CHECK(r.actions == rs[0].actions);
}

TEST_CASE("entropy values") {
  const auto mdp = make_synthetic_mdp(4, 2, std::nullopt);
  auto policy = make_policy(mdp);
  const auto s = mdp.initial_state(0);
  CHECK(policy_entropy(policy, mdp, s) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  const auto c = policy.featurizer.context(mdp.prompt(0).tokens, s.prefix);
  policy.logits[policy.featurizer.slot(c, 2)] = 60.0;
  CHECK(policy_entropy(policy, mdp, s) < 1e-20);

  const auto mdp2 = make_synthetic_mdp(2, 2, std::nullopt);
  auto p2 = make_policy(mdp2);
  const auto c2 = p2.featurizer.context(mdp2.prompt(0).tokens, {});
  p2.logits[p2.featurizer.slot(c2, 0)] = 1.0;
  const double a = std::exp(1.0) / (1.0 + std::exp(1.0));
  const double want = -(a * std::log(a) + (1 - a) * std::log(1 - a));
  CHECK(policy_entropy(p2, mdp2, mdp2.initial_state(0)) == doctest::Approx(want).epsilon(1e-12));
  CHECK(want == doctest::Approx(0.582203).epsilon(1e-6));
}

TEST_CASE("prm_score reads the table and the linear dot product") {
  const auto mdp = make_synthetic_mdp(3, 3, std::nullopt);
  auto reward = make_reward(mdp);
  const State s{0, {1}};
  CHECK(prm_score(reward, mdp, s, 2) == 0.0);
  const auto c = reward.featurizer.context(mdp.prompt(0).tokens, s.prefix);
  reward.weights[reward.featurizer.slot(c, 2)] = 0.7;
  CHECK(prm_score(reward, mdp, s, 2) == 0.7);

  auto lin = make_reward(mdp, Repr::linear, ContextSpec{2, true}, 64);
  testing::randomize(lin.weights, 8);
  double dot = 0.0;
  for (const auto& f : lin.features(mdp, s, 1)) dot += lin.weights[f.index] * f.value;
  CHECK(prm_score(lin, mdp, s, 1) == doctest::Approx(dot).epsilon(1e-15));
}

TEST_CASE("value clip bounds every emitted reward") {
  const auto mdp = make_synthetic_mdp(3, 3, std::nullopt);
  auto reward = make_reward(mdp, Repr::tabular, {}, 4096, 1.5);
  testing::randomize(reward.weights, 5, 10.0);
  for (const auto& t : enumerate_trajectories(mdp, mdp.prompt(0))) {
    for (double r : step_rewards(reward, mdp, t)) CHECK(std::abs(r) <= 1.5);
  }
}

TEST_CASE("trajectory reward sum and mean") {
  const auto mdp = make_synthetic_mdp(3, 2, std::nullopt);
  auto reward = make_reward(mdp);
  const auto t = traj(0, {1, 2});
  const auto zero = trajectory_reward(reward, mdp, t);
  CHECK(zero.sum == 0.0);
  CHECK(zero.mean == 0.0);
  State s = mdp.initial_state(0);
  const double vals[] = {0.2, 0.4};
  for (std::size_t i = 0; i < 2; ++i) {
    const auto c = reward.featurizer.context(mdp.prompt(0).tokens, s.prefix);
    reward.weights[reward.featurizer.slot(c, t.actions[i])] = vals[i];
    s = mdp.step(s, t.actions[i]);
  }
  const auto tr = trajectory_reward(reward, mdp, t);
  CHECK(tr.sum == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(tr.mean == doctest::Approx(0.3).epsilon(1e-15));
  const auto one = trajectory_reward(reward, mdp, traj(0, {1}));
  CHECK(one.sum == one.mean);
}

TEST_CASE("reward gradient matches finite differences") {
  const auto mdp = make_synthetic_mdp(3, 4, Token{0});
  auto reward = make_reward(mdp, Repr::linear, ContextSpec{2, true}, 32, std::nullopt);
  testing::randomize(reward.weights, 77);
  const auto t = traj(0, {2, 1, 1, 0});
  std::vector<double> g(reward.weights.size(), 0.0);
  accumulate_reward_gradient(reward, mdp, t, 1.0, g);
  const auto fd = testing::finite_difference(
      [&] { return trajectory_reward(reward, mdp, t).sum; }, reward.weights);
  CHECK(testing::max_abs_diff(g, fd) < 1e-8);
}

TEST_CASE("aligned contexts separate the prompt from generated tokens") {
  Featurizer f(Repr::tabular, ContextSpec{3, true}, 6);
  // same window [2 2 2] and aligned sentinel, different generated counts
  const std::vector<Token> p1{1, 2};
  const std::vector<Token> p2{2, 2, 2, 2};
  CHECK(f.context(p1, std::vector<Token>{2, 2}) != f.context(p2, std::vector<Token>{2, 2, 2, 2}));
  CHECK(f.context(p1, std::vector<Token>{2, 2}) == f.context(std::vector<Token>{3, 2}, std::vector<Token>{2, 2}));
}

TEST_CASE("checkpoints round trip") {
  const auto mdp = make_synthetic_mdp(4, 3, std::nullopt);
  auto policy = make_policy(mdp, Repr::linear, ContextSpec{2, false}, 16);
  testing::randomize(policy.logits, 3);
  std::stringstream ps;
  save_checkpoint(ps, policy);
  const auto back = load_policy_checkpoint(ps, 4);
  CHECK(back.featurizer == policy.featurizer);
  CHECK(back.logits == policy.logits);

  auto reward = make_reward(mdp, Repr::tabular, ContextSpec{1, true}, 4096, std::nullopt);
  testing::randomize(reward.weights, 4);
  std::stringstream rs;
  save_checkpoint(rs, reward);
  const auto rback = load_reward_checkpoint(rs, 4);
  CHECK(rback.weights == reward.weights);
  CHECK_FALSE(rback.value_clip.has_value());

  std::stringstream again;
  save_checkpoint(again, reward);
  CHECK_THROWS_AS(load_reward_checkpoint(again, 5), Error);
}

}
