#include "oracle_check.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "repirl/baselines.hpp"
#include "repirl/mdp.hpp"
#include "repirl/models.hpp"
#include "repirl/numeric.hpp"
#include "repirl/oracle.hpp"
#include "repirl/rng.hpp"

namespace repirl::tools {
namespace {

struct Instance {
  TokenMdp mdp;
  RewardParams reward;
  std::vector<Trajectory> expert;
};

RewardParams random_reward(const TokenMdp& mdp, Rng& rng) {
  auto r = make_reward(mdp, Repr::tabular, ContextSpec{2, true}, 4096, std::nullopt);
  for (auto& w : r.weights) w = 2.0 * rng.uniform() - 1.0;
  return r;
}

std::vector<Trajectory> sample_soft_optimal(const TokenMdp& mdp, const RewardParams& reward,
                                            int prompt_id, int k, Rng& rng) {
  const auto all = enumerate_trajectories(mdp, mdp.prompt(prompt_id));
  std::vector<double> logits;
  for (const auto& t : all) logits.push_back(trajectory_reward(reward, mdp, t).sum);
  const double lz = log_sum_exp(logits);
  std::vector<double> p;
  for (double l : logits) p.push_back(std::exp(l - lz));
  std::vector<Trajectory> out;
  for (int i = 0; i < k; ++i) {
    Trajectory t = all[rng.categorical(p)];
    t.source = Source::expert;
    out.push_back(std::move(t));
  }
  return out;
}

Instance make_instance(std::uint64_t seed, int i) {
  const int vocab = 2 + i % 2;
  const int horizon = 2 + i % 4;
  std::optional<Token> eos;
  if (i % 3 != 0) eos = 0;
  Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(i)}));
  auto mdp = make_synthetic_mdp(vocab, horizon, eos, 2);
  auto truth = random_reward(mdp, rng);
  std::vector<Trajectory> expert;
  for (int p = 0; p < 2; ++p) {
    auto e = sample_soft_optimal(mdp, truth, p, 3 + p, rng);
    expert.insert(expert.end(), e.begin(), e.end());
  }
  auto reward = random_reward(mdp, rng);
  return Instance{std::move(mdp), std::move(reward), std::move(expert)};
}

double distribution_error(const Instance& inst) {
  double err = 0.0;
  for (const auto& prompt : inst.mdp.prompts()) {
    const auto all = enumerate_trajectories(inst.mdp, prompt);
    std::vector<double> logits;
    for (const auto& t : all) logits.push_back(trajectory_reward(inst.reward, inst.mdp, t).sum);
    const double lz = log_sum_exp(logits);
    const auto sol = soft_value_iteration(inst.mdp, inst.reward, 1.0, prompt.id);
    for (std::size_t k = 0; k < all.size(); ++k) {
      const double p = std::exp(sol.trajectory_log_prob(all[k]));
      err = std::max(err, std::abs(p - std::exp(logits[k] - lz)));
    }
  }
  return err;
}

double marginal_error(const Instance& inst) {
  double err = 0.0;
  for (const auto& prompt : inst.mdp.prompts()) {
    const auto all = enumerate_trajectories(inst.mdp, prompt);
    std::vector<double> logits;
    for (const auto& t : all) logits.push_back(trajectory_reward(inst.reward, inst.mdp, t).sum);
    const double lz = log_sum_exp(logits);
    const auto msg = forward_backward(inst.mdp, inst.reward, prompt.id);
    const auto& tree = msg.tree;
    std::vector<double> visit(tree.size(), 0.0);
    std::map<int, double> depth_mass;
    for (std::size_t k = 0; k < all.size(); ++k) {
      const double p = std::exp(logits[k] - lz);
      std::size_t node = 0;
      for (Token a : all[k].actions) {
        node = tree.child(node, a);
        visit[node] += p;
        depth_mass[tree.node(node).depth] += p;
      }
    }
    for (std::size_t n = 1; n < tree.size(); ++n) {
      err = std::max(err, std::abs(msg.visitation[n] - visit[n]));
      const double dm = depth_mass[tree.node(n).depth];
      const double m = dm > 0.0 ? visit[n] / dm : 0.0;
      err = std::max(err, std::abs(msg.marginals[n] - m));
    }
  }
  return err;
}

double finite_difference_error(const Instance& inst) {
  const auto grad = exact_irl_gradient(inst.mdp, inst.reward, inst.expert);
  RewardParams r = inst.reward;
  const double h = 1e-5;
  double err = 0.0;
  for (std::size_t k = 0; k < r.weights.size(); ++k) {
    const double w = r.weights[k];
    r.weights[k] = w + h;
    const double up = irl_objective(inst.mdp, r, inst.expert);
    r.weights[k] = w - h;
    const double down = irl_objective(inst.mdp, r, inst.expert);
    r.weights[k] = w;
    err = std::max(err, std::abs((up - down) / (2.0 * h) - grad[k]));
  }
  return err;
}

double gan_error(const Instance& inst, std::uint64_t seed, int i) {
  auto policy = make_policy(inst.mdp, Repr::tabular, ContextSpec{2, true});
  Rng rng(derive_seed(seed, {0x67616eu, static_cast<std::uint64_t>(i)}));
  for (auto& l : policy.logits) l = rng.uniform() - 0.5;
  std::map<int, int> counts;
  for (const auto& e : inst.expert) ++counts[e.prompt_id];
  std::vector<MixtureSample> mixture;
  const double n = static_cast<double>(inst.expert.size());
  for (const auto& [id, c] : counts) {
    for (auto m : exact_mixture_samples(inst.mdp, inst.reward, policy, id)) {
      m.mass *= static_cast<double>(c) / n;
      mixture.push_back(std::move(m));
    }
  }
  const auto gan = gan_irl_gradient(inst.mdp, inst.reward, inst.expert, mixture);
  const auto exact = exact_irl_gradient(inst.mdp, inst.reward, inst.expert);
  double err = 0.0;
  for (std::size_t k = 0; k < gan.size(); ++k) err = std::max(err, std::abs(gan[k] - exact[k]));
  return err;
}

double dqo_residual(const Instance& inst) {
  const RewardParams reward = inst.reward;
  const TokenMdp& base = inst.mdp;
  const TokenMdp mdp(base.vocab_size(), base.horizon(), base.eos(), base.prompts(),
                     TaskKind::synthetic,
                     [&](const Prompt& p, std::span<const Token> prefix, Token a) {
                       return prm_score(reward, base, State{p.id, {prefix.begin(), prefix.end()}},
                                        a);
                     });
  double worst = 0.0;
  for (const auto& prompt : mdp.prompts()) {
    const auto sol = soft_value_iteration(mdp, hidden_reward_fn(mdp), 1.0, prompt.id);
    const auto all = enumerate_trajectories(mdp, prompt);
    const auto losses = dqo_losses(critics_from_solution(sol), log_policy_fn(sol), mdp, all, 1.0);
    worst = std::max({worst, losses.value_loss, losses.q_loss});
  }
  return worst;
}

}  // namespace

std::vector<CheckResult> run_oracle_checks(std::uint64_t seed, int instances) {
  std::vector<CheckResult> out{
      {"soft_value_iteration_matches_enumeration", 0.0, 1e-8, false},
      {"forward_backward_matches_enumeration", 0.0, 1e-10, false},
      {"irl_gradient_matches_finite_differences", 0.0, 1e-6, false},
      {"gan_irl_gradient_matches_irl_gradient", 0.0, 1e-10, false},
      {"dqo_residuals_vanish_at_soft_optimum", 0.0, 1e-16, false},
  };
  for (int i = 0; i < instances; ++i) {
    const auto inst = make_instance(seed, i);
    const double errs[] = {distribution_error(inst), marginal_error(inst),
                           finite_difference_error(inst), gan_error(inst, seed, i),
                           dqo_residual(inst)};
    for (std::size_t k = 0; k < out.size(); ++k) {
      out[k].max_error = std::max(out[k].max_error, errs[k]);
    }
  }
  for (auto& c : out) c.pass = c.max_error <= c.tolerance;
  return out;
}

}  // namespace repirl::tools
