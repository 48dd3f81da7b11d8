#include <cmath>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "json.hpp"
#include "repirl/error.hpp"
#include "repirl/eval.hpp"
#include "repirl/trainer.hpp"

using namespace repirl;
using testing::traj;

namespace {

Task small_parity(int prompts = 12) {
  TaskSpec spec;
  spec.num_prompts = prompts;
  spec.prompt_length = 3;
  spec.horizon = 6;
  return make_task(spec);
}

// Deterministic policy that replays one expert derivation per prompt.
PolicyParams expert_policy(const Task& task) {
  PolicyParams policy = make_policy(task.mdp, Repr::linear, ContextSpec{8, true}, 1 << 16);
  for (int id : task.train_ids) {
    const auto e = generate_expert(task.mdp, task.mdp.prompt(id), 1, 0)[0];
    State s = task.mdp.initial_state(id);
    for (Token a : e.actions) {
      const auto c = policy.featurizer.context(task.mdp.prompt(id).tokens, s.prefix);
      policy.logits[policy.featurizer.slot(c, a)] = 30.0;
      s = task.mdp.step(s, a);
    }
  }
  return policy;
}

StepRewardFn table(std::vector<double> per_action) {
  return [per_action](const State&, Token a) { return per_action[static_cast<std::size_t>(a)]; };
}

}  // namespace

TEST_SUITE("eval") {

TEST_CASE("pass@1 of an expert replay and of an eos-first policy") {
  const auto task = small_parity();
  CHECK(pass_at_1(expert_policy(task), task.mdp, task.train_ids) == 1.0);
  // uniform logits: greedy picks token 0, which is eos
  CHECK(pass_at_1(make_policy(task.mdp), task.mdp, task.train_ids) == 0.0);
}

TEST_CASE("greedy pass@1 ignores the seed and the worker count") {
  const auto task = small_parity();
  auto policy = make_policy(task.mdp);
  testing::randomize(policy.logits, 5, 3.0);
  const auto a = pass_at_1_detail(policy, task.mdp, task.train_ids, true, 1, 1);
  const auto b = pass_at_1_detail(policy, task.mdp, task.train_ids, true, 99, 4);
  CHECK(a.per_prompt == b.per_prompt);
  CHECK(a.mean == b.mean);
}

TEST_CASE("guessing the answer with the chain forced succeeds half the time") {
  TaskSpec spec;
  spec.num_prompts = 126;
  const auto task = make_task(spec);
  const ChainLayout L{2};
  Rng rng(2);
  double wins = 0.0;
  const int n = 1000;
  for (int i = 0; i < n; ++i) {
    const int id = task.train_ids[rng.below(task.train_ids.size())];
    const auto& p = task.mdp.prompt(id).tokens;
    std::vector<Token> a;
    int s = 0;
    for (Token t : p) {
      s = (s + L.value(t)) % 2;
      a.push_back(L.digit(s));
    }
    a.push_back(L.answer(static_cast<int>(rng.below(2))));
    a.push_back(0);
    wins += task.mdp.verify_outcome(traj(id, a));
  }
  CHECK(std::abs(wins / n - 0.5) <= 0.05);
}

TEST_CASE("best-of-n selection") {
  const std::vector<Trajectory> one{traj(0, {1})};
  CHECK(best_of_n_select(table({0, 0, 0}), one) == 0);
  const std::vector<Trajectory> two{traj(0, {1}), traj(0, {2})};
  CHECK(best_of_n_select(table({0, 0.1, 0.9}), two) == 1);
  CHECK(best_of_n_select(table({0, 0.5, 0.5}), two) == 0);
  // mean, not sum
  const std::vector<Trajectory> lens{traj(0, {1, 1, 1}), traj(0, {2})};
  CHECK(best_of_n_select(table({0, 0.4, 0.5}), lens) == 1);
  CHECK_THROWS_AS(best_of_n_select(table({0}), std::vector<Trajectory>{}), Error);
}

TEST_CASE("majority vote") {
  const AnswerExtractor first = [](const Trajectory& t) {
    return std::vector<Token>{t.actions.front()};
  };
  const std::vector<Trajectory> aab{traj(0, {1}), traj(0, {1}), traj(0, {2})};
  CHECK(majority_vote(aab, first) == std::vector<Token>{1});
  const std::vector<Trajectory> ab{traj(0, {2}), traj(0, {1})};
  CHECK(majority_vote(ab, first) == std::vector<Token>{2});
  const std::vector<Trajectory> single{traj(0, {3})};
  CHECK(majority_vote(single, first) == std::vector<Token>{3});
}

TEST_CASE("roc auc") {
  const std::vector<double> hi{0.9, 0.8};
  const std::vector<double> lo{0.1, 0.2};
  CHECK(roc_auc(hi, lo) == 1.0);
  CHECK(roc_auc(hi, hi) == 0.5);
  const std::vector<double> pos{0.9, 0.7};
  const std::vector<double> neg{0.8, 0.1};
  CHECK(roc_auc(pos, neg) == 0.75);
}

TEST_CASE("prm auc is invariant under increasing transforms") {
  const auto task = small_parity();
  auto reward = make_reward(task.mdp, Repr::tabular, {}, 4096, std::nullopt);
  testing::randomize(reward.weights, 3);
  const auto pos = make_expert_dataset(task.mdp, task.train_ids, 24, 1);
  const auto neg = random_trajectories(task.mdp, task.train_ids, 40, 2);
  const double base = prm_ranking_auc(reward, task.mdp, pos, neg);
  auto scaled = reward;
  for (auto& w : scaled.weights) w = 3.0 * w + 1.0;
  CHECK(prm_ranking_auc(scaled, task.mdp, pos, neg) == base);
  std::vector<double> ps, ns;
  for (const auto& t : pos) ps.push_back(std::exp(trajectory_reward(reward, task.mdp, t).mean));
  for (const auto& t : neg) ns.push_back(std::exp(trajectory_reward(reward, task.mdp, t).mean));
  CHECK(roc_auc(ps, ns) == base);
}

TEST_CASE("tts curves") {
  const auto task = small_parity();
  auto policy = make_policy(task.mdp);
  testing::randomize(policy.logits, 8, 1.5);
  TtsSpec spec;
  spec.n_grid = {1, 2, 4, 8};
  spec.seeds = 5;
  spec.workers = 2;
  const auto hidden = tts_curve(hidden_reward_fn(task.mdp), policy, task.mdp, task.train_ids, spec);
  REQUIRE(hidden.size() == 8);
  double prev = -1.0;
  double n1_best = 0.0, n1_vote = 0.0;
  for (const auto& p : hidden) {
    if (p.n == 1) (p.selector == "best_of_n" ? n1_best : n1_vote) = p.mean;
    if (p.selector != "best_of_n") continue;
    CHECK(p.mean >= prev);
    prev = p.mean;
  }
  CHECK(n1_best == n1_vote);

  spec.workers = 1;
  const auto again = tts_curve(hidden_reward_fn(task.mdp), policy, task.mdp, task.train_ids, spec);
  for (std::size_t i = 0; i < again.size(); ++i) CHECK(again[i].mean == hidden[i].mean);

  std::ostringstream csv;
  write_tts_csv(csv, hidden);
  CHECK(csv.str().rfind("n,selector,mean,stderr\n", 0) == 0);
}

TEST_CASE("eval report json") {
  EvalReport rep;
  rep.pass_at_1.per_prompt = {{0, 1.0}, {3, 0.0}};
  rep.pass_at_1.mean = 0.5;
  rep.prm_auc = 0.9;
  rep.tts.push_back(TtsPoint{4, "best_of_n", 0.7, 0.01});
  std::ostringstream out;
  write_eval_json(out, rep);
  const auto j = nlohmann::json::parse(out.str());
  CHECK(j["pass_at_1"] == 0.5);
  CHECK(j["per_prompt_pass_at_1"]["3"] == 0.0);
  CHECK(j["prm_auc"] == 0.9);
  CHECK(j["tts"][0]["selector"] == "best_of_n");
}

}
