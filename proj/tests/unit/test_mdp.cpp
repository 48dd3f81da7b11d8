#include <algorithm>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "repirl/error.hpp"
#include "repirl/mdp.hpp"

using namespace repirl;
using testing::parity_mdp;
using testing::traj;

TEST_SUITE("mdp") {

TEST_CASE("step appends the action") {
  TokenMdp mdp(6, 5, std::nullopt, {Prompt{0, {1}}}, TaskKind::synthetic);
  const State s{0, {3, 1}};
  const State next = mdp.step(s, 4);
  CHECK(next.prefix == std::vector<Token>{3, 1, 4});
  CHECK(next.t() == 3);
  const State e = mdp.step(mdp.initial_state(0), 0);
  CHECK(e.prefix == std::vector<Token>{0});
  CHECK(e.t() == 1);
}

TEST_CASE("step past the horizon or after eos fails") {
  TokenMdp mdp(3, 2, Token{0}, {Prompt{0, {1}}}, TaskKind::synthetic);
  try {
    mdp.step(State{0, {1, 1}}, 1);
    FAIL("expected step_limit");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::step_limit);
  }
  CHECK_THROWS_AS(mdp.step(State{0, {0}}, 1), Error);
  try {
    mdp.step(State{0, {}}, 7);
    FAIL("expected invalid_action");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::invalid_action);
  }
}

TEST_CASE("parity verification checks the running values and the answer") {
  const ChainLayout L{2};
  // bits 1,0,1 -> running parities 1,1,0
  auto mdp = parity_mdp({{L.digit(1), L.digit(0), L.digit(1)}});
  const std::vector<Token> chain{L.digit(1), L.digit(1), L.digit(0)};
  auto with = [&](Token answer) {
    auto a = chain;
    a.push_back(answer);
    a.push_back(0);
    return traj(0, a);
  };
  CHECK(mdp.verify_outcome(with(L.answer(0))) == 1.0);
  CHECK(mdp.verify_outcome(with(L.answer(1))) == 0.0);
  // a wrong intermediate value fails even with the right answer
  CHECK(mdp.verify_outcome(traj(0, {L.digit(1), L.digit(0), L.digit(0), L.answer(0), 0})) == 0.0);
  // filler tokens are ignored, missing eos is not
  CHECK(mdp.verify_outcome(traj(0, {L.digit(1), L.digit(1), L.digit(0), L.filler(), L.answer(0), 0})) ==
        1.0);
  CHECK(mdp.verify_outcome(traj(0, {L.digit(1), L.digit(1), L.digit(0), L.answer(0), L.filler()})) ==
        0.0);
}

TEST_CASE("parity prompt [1,1] verifies against brute-force running parities") {
  const ChainLayout L{2};
  const std::vector<int> bits{1, 1};
  std::vector<Token> actions;
  int s = 0;
  for (int b : bits) {
    s ^= b;
    actions.push_back(L.digit(s));
  }
  actions.push_back(L.answer(s));
  actions.push_back(0);
  CHECK(actions == std::vector<Token>{2, 1, 3, 0});
  auto mdp = parity_mdp({{L.digit(1), L.digit(1)}});
  CHECK(mdp.verify_outcome(traj(0, actions)) == 1.0);
}

TEST_CASE("copy_sort verification") {
  TokenMdp mdp(3, 4, Token{0}, {Prompt{0, {2, 1}}}, TaskKind::copy_sort);
  CHECK(mdp.verify_outcome(traj(0, {1, 2, 0})) == 1.0);
  CHECK(mdp.verify_outcome(traj(0, {2, 1, 0})) == 0.0);
  CHECK(mdp.verify_outcome(traj(0, {1, 2, 2, 2})) == 0.0);
}

TEST_CASE("generate_expert yields k verified, seed-deterministic trajectories") {
  TaskSpec spec;
  spec.num_prompts = 10;
  const auto task = make_task(spec);
  for (int id : task.train_ids) {
    const auto& p = task.mdp.prompt(id);
    const auto a = generate_expert(task.mdp, p, 4, 11);
    const auto b = generate_expert(task.mdp, p, 4, 11);
    REQUIRE(a.size() == 4);
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(task.mdp.verify_outcome(a[i]) == 1.0);
      CHECK(a[i].outcome == 1.0);
      CHECK(a[i].actions == b[i].actions);
      CHECK(a[i].source == Source::expert);
    }
  }
}

TEST_CASE("hidden reward is positive exactly along the expert derivation") {
  TaskSpec spec;
  spec.num_prompts = 8;
  const auto task = make_task(spec);
  for (int id : task.train_ids) {
    for (const auto& e : generate_expert(task.mdp, task.mdp.prompt(id), 2, 5)) {
      State s = task.mdp.initial_state(id);
      for (Token a : e.actions) {
        CHECK(task.mdp.hidden_reward(id, s.prefix, a) >= 0.0);
        s = task.mdp.step(s, a);
      }
    }
  }
  TokenMdp plain = make_synthetic_mdp(3, 2, Token{0});
  CHECK_THROWS_AS(plain.hidden_reward(0, {}, 1), Error);
}

TEST_CASE("enumeration counts") {
  auto count = [](const TokenMdp& mdp) {
    return enumerate_trajectories(mdp, mdp.prompt(0)).size();
  };
  CHECK(count(make_synthetic_mdp(2, 3, std::nullopt)) == 8);
  CHECK(count(make_synthetic_mdp(1, 5, std::nullopt)) == 1);
  const auto mdp = make_synthetic_mdp(3, 2, Token{0});
  const auto all = enumerate_trajectories(mdp, mdp.prompt(0));
  std::set<std::vector<Token>> got;
  for (const auto& t : all) got.insert(t.actions);
  const std::set<std::vector<Token>> want{{0}, {1, 0}, {1, 1}, {1, 2}, {2, 0}, {2, 1}, {2, 2}};
  CHECK(got == want);
}

TEST_CASE("enumeration refuses oversized instances") {
  const auto mdp = make_synthetic_mdp(6, 12, std::nullopt);
  try {
    enumerate_trajectories(mdp, mdp.prompt(0));
    FAIL("expected enumeration_too_large");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::enumeration_too_large);
  }
}

TEST_CASE("make_task splits prompts deterministically") {
  TaskSpec spec;
  spec.num_prompts = 20;
  spec.heldout_prompts = 7;
  const auto a = make_task(spec);
  const auto b = make_task(spec);
  CHECK(a.train_ids.size() == 20);
  CHECK(a.heldout_ids.size() == 7);
  CHECK(a.train_ids == b.train_ids);
  for (std::size_t i = 0; i < a.mdp.prompts().size(); ++i) {
    CHECK(a.mdp.prompts()[i].tokens == b.mdp.prompts()[i].tokens);
  }
  spec.horizon = 3;
  CHECK_THROWS_AS(make_task(spec), Error);
}

}
