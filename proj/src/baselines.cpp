#include "repirl/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "repirl/error.hpp"
#include "repirl/eval.hpp"
#include "repirl/numeric.hpp"
#include "repirl/parallel.hpp"
#include "repirl/rng.hpp"

namespace repirl {

std::vector<PreferencePair> make_preference_pairs(std::span<const Trajectory> expert,
                                                  std::span<const Trajectory> rollouts) {
  std::map<int, std::vector<const Trajectory*>> by_prompt;
  for (const auto& e : expert) by_prompt[e.prompt_id].push_back(&e);
  std::map<int, std::size_t> cursor;
  std::vector<PreferencePair> out;
  for (const auto& r : rollouts) {
    if (r.outcome != 0.0) continue;
    const auto it = by_prompt.find(r.prompt_id);
    if (it == by_prompt.end()) continue;
    auto& c = cursor[r.prompt_id];
    out.push_back({r.prompt_id, *it->second[c % it->second.size()], r});
    ++c;
  }
  return out;
}

double SoftCritics::v(const State& s) const {
  const auto it = v_table.find({s.prompt_id, s.prefix});
  return it == v_table.end() ? 0.0 : it->second;
}

double SoftCritics::q(const State& s, Token a) const {
  const auto it = q_table.find({{s.prompt_id, s.prefix}, a});
  return it == q_table.end() ? 0.0 : it->second;
}

LogPolicyFn log_policy_fn(const PolicyParams& policy, const TokenMdp& mdp) {
  return [&policy, &mdp](const State& s, Token a) {
    return policy.log_probs(mdp, s)[static_cast<std::size_t>(a)];
  };
}

SoftCritics critics_from_solution(const SoftSolution& solution) {
  SoftCritics c;
  const auto& tree = solution.tree;
  for (std::size_t i = 0; i < tree.size(); ++i) {
    StateKey key{tree.prompt_id(), tree.prefix(i)};
    c.v_table[key] = solution.v[i];
    if (tree.node(i).terminal) continue;
    for (Token a = 0; a < tree.vocab_size(); ++a) {
      c.q_table[{key, a}] = solution.q[tree.child(i, a)];
    }
  }
  return c;
}

LogPolicyFn log_policy_fn(const SoftSolution& solution) {
  return [&solution](const State& s, Token a) { return solution.log_policy(s.prefix, a); };
}

// ---------------------------------------------------------------------------
// Losses

namespace {

// grad[row] += scale * (e_a - softmax(row)); the gradient of scale * log pi(a|s).
void add_logprob_gradient(const PolicyParams& policy, const TokenMdp& mdp, const State& s,
                          Token a, double scale, std::vector<double>& grad) {
  const auto ctx = policy.featurizer.context(mdp.prompt(s.prompt_id).tokens, s.prefix);
  const auto lp = policy.log_probs(mdp, s);
  const std::size_t base = policy.featurizer.slot(ctx, 0);
  for (std::size_t j = 0; j < lp.size(); ++j) grad[base + j] -= scale * std::exp(lp[j]);
  grad[base + static_cast<std::size_t>(a)] += scale;
}

void add_trajectory_logprob_gradient(const PolicyParams& policy, const TokenMdp& mdp,
                                     const Trajectory& traj, double scale,
                                     std::vector<double>& grad) {
  State s{traj.prompt_id, {}};
  for (Token a : traj.actions) {
    add_logprob_gradient(policy, mdp, s, a, scale, grad);
    s.prefix.push_back(a);
  }
}

}  // namespace

LossAndGrad bc_loss(const PolicyParams& policy, const TokenMdp& mdp,
                    std::span<const Trajectory> expert) {
  std::size_t tokens = 0;
  for (const auto& e : expert) tokens += e.size();
  if (expert.empty() || tokens == 0) fail(ErrorKind::empty_set, "bc_loss needs expert tokens");
  LossAndGrad out;
  out.grad.assign(policy.logits.size(), 0.0);
  const double inv = 1.0 / static_cast<double>(tokens);
  for (const auto& e : expert) {
    for (double lp : policy_step_logprobs(policy, mdp, e)) out.loss -= lp * inv;
    add_trajectory_logprob_gradient(policy, mdp, e, -inv, out.grad);
  }
  out.grad_norm = l2_norm(out.grad);
  return out;
}

LossAndGrad dpo_loss(const PolicyParams& policy, const FrozenPolicy& ref, const TokenMdp& mdp,
                     const PreferencePair& pair, double beta) {
  const double dc = policy_logprob(policy, mdp, pair.chosen) -
                    policy_logprob(ref.params(), mdp, pair.chosen);
  const double dr = policy_logprob(policy, mdp, pair.rejected) -
                    policy_logprob(ref.params(), mdp, pair.rejected);
  const double z = beta * (dc - dr);
  LossAndGrad out;
  out.loss = -log_sigmoid(z);
  out.grad.assign(policy.logits.size(), 0.0);
  // d/dz [-log sigmoid(z)] = -(1 - sigmoid(z)) = -sigmoid(-z).
  const double g = -sigmoid(-z) * beta;
  add_trajectory_logprob_gradient(policy, mdp, pair.chosen, g, out.grad);
  add_trajectory_logprob_gradient(policy, mdp, pair.rejected, -g, out.grad);
  out.grad_norm = l2_norm(out.grad);
  return out;
}

DqoLosses dqo_losses(const SoftCritics& critics, const LogPolicyFn& log_policy,
                     const TokenMdp& mdp, std::span<const Trajectory> transitions, double beta) {
  if (!mdp.has_hidden_reward()) {
    fail(ErrorKind::annotation_required, "DQO needs per-step reward annotation");
  }
  DqoLosses out;
  std::size_t steps = 0;
  for (const auto& traj : transitions) {
    State s{traj.prompt_id, {}};
    for (Token a : traj.actions) {
      const double r = mdp.hidden_reward(s.prompt_id, s.prefix, a);
      const double q = critics.q(s, a);
      const double v = critics.v(s);
      const double rv = v - q + beta * log_policy(s, a);
      s.prefix.push_back(a);
      const double v_next = mdp.is_terminal(s.prefix) ? 0.0 : critics.v(s);
      const double rq = q - r - v_next;
      out.value_loss += rv * rv;
      out.q_loss += rq * rq;
      ++steps;
    }
  }
  if (steps > 0) {
    out.value_loss /= static_cast<double>(steps);
    out.q_loss /= static_cast<double>(steps);
  }
  return out;
}

double prime_implicit_reward(const PolicyParams& policy, const FrozenPolicy& ref,
                             const TokenMdp& mdp, const Trajectory& traj, int t, double beta) {
  if (t < 1 || static_cast<std::size_t>(t) > traj.size()) {
    fail(ErrorKind::index_out_of_range, "implicit reward step outside 1..|tau|");
  }
  const auto k = static_cast<std::size_t>(t - 1);
  State s{traj.prompt_id, {traj.actions.begin(), traj.actions.begin() + static_cast<std::ptrdiff_t>(k)}};
  const auto a = static_cast<std::size_t>(traj.actions[k]);
  return beta * (policy.log_probs(mdp, s)[a] - ref.params().log_probs(mdp, s)[a]);
}

LossAndGrad prime_prm_loss(const RewardParams& reward, const TokenMdp& mdp,
                           std::span<const Trajectory> expert_side,
                           std::span<const Trajectory> policy_side, double log_clip) {
  if (expert_side.empty() || policy_side.empty()) {
    fail(ErrorKind::empty_set, "prime_prm_loss needs both expert and policy trajectories");
  }
  LossAndGrad out;
  out.grad.assign(reward.weights.size(), 0.0);
  auto side = [&](std::span<const Trajectory> set, double sign) {
    const double inv = 1.0 / static_cast<double>(set.size());
    for (const auto& traj : set) {
      const double r = trajectory_reward(reward, mdp, traj).sum;
      const double e = std::exp(std::clamp(r, -log_clip, log_clip));
      // The loss is the negated objective.
      out.loss -= sign * e * inv;
      if (std::abs(r) <= log_clip) {
        accumulate_reward_gradient(reward, mdp, traj, -sign * e * inv, out.grad);
      }
    }
  };
  side(expert_side, 1.0);
  side(policy_side, -1.0);
  out.grad_norm = l2_norm(out.grad);
  return out;
}

std::vector<LabeledStep> mcts_labels(const TokenMdp& mdp, const PolicyParams& policy,
                                     std::span<const Trajectory> trajectories, int k,
                                     std::uint64_t seed, bool exact) {
  std::vector<LabeledStep> out;
  for (std::size_t i = 0; i < trajectories.size(); ++i) {
    const auto& traj = trajectories[i];
    State s{traj.prompt_id, {}};
    for (std::size_t t = 0; t < traj.size(); ++t) {
      const Token a = traj.actions[t];
      State next = s;
      next.prefix.push_back(a);
      double label;
      if (mdp.is_terminal(next.prefix)) {
        label = mdp.verify_outcome(traj);
      } else if (exact) {
        label = exact_success_probability(mdp, policy, next);
      } else {
        label = mcts_value_label(mdp, policy, next, k, derive_seed(seed, {i, t}));
      }
      out.push_back({s, a, label});
      s = std::move(next);
    }
  }
  return out;
}

LossAndGrad mcts_prm_loss(const RewardParams& reward, const TokenMdp& mdp,
                          std::span<const LabeledStep> labeled) {
  if (labeled.empty()) fail(ErrorKind::empty_set, "mcts_prm_loss needs labelled steps");
  LossAndGrad out;
  out.grad.assign(reward.weights.size(), 0.0);
  const double inv = 1.0 / static_cast<double>(labeled.size());
  for (const auto& step : labeled) {
    const double y = step.label;
    if (!(y >= 0.0 && y <= 1.0)) fail(ErrorKind::invalid_label, "label outside [0, 1]");
    const double r = prm_score(reward, mdp, step.state, step.action);
    out.loss -= inv * (y * log_sigmoid(r) + (1.0 - y) * log_sigmoid(-r));
    accumulate_step_gradient(reward, mdp, step.state, step.action, inv * (sigmoid(r) - y),
                             out.grad);
  }
  out.grad_norm = l2_norm(out.grad);
  return out;
}

std::vector<MixtureSample> exact_mixture_samples(const TokenMdp& mdp, const RewardParams& reward,
                                                 const PolicyParams& policy, int prompt_id) {
  const double log_z = exact_partition(mdp, reward, prompt_id).log_z;
  std::vector<MixtureSample> out;
  for (auto& traj : enumerate_trajectories(mdp, mdp.prompt(prompt_id))) {
    const double p_soft = std::exp(trajectory_reward(reward, mdp, traj).sum - log_z);
    const double p_pol = std::exp(policy_logprob(policy, mdp, traj));
    const double mu = 0.5 * p_soft + 0.5 * p_pol;
    out.push_back({std::move(traj), mu, mu});
  }
  return out;
}

namespace {

struct LogZCache {
  const TokenMdp& mdp;
  const RewardParams& reward;
  std::map<int, double> values;

  double operator()(int prompt_id) {
    auto it = values.find(prompt_id);
    if (it == values.end()) {
      it = values.emplace(prompt_id, exact_partition(mdp, reward, prompt_id).log_z).first;
    }
    return it->second;
  }
};

}  // namespace

std::vector<double> gan_irl_gradient(const TokenMdp& mdp, const RewardParams& reward,
                                     std::span<const Trajectory> expert,
                                     std::span<const MixtureSample> mixture) {
  if (expert.empty()) fail(ErrorKind::empty_set, "gan_irl_gradient needs expert trajectories");
  std::vector<double> grad(reward.weights.size(), 0.0);
  const double ne = static_cast<double>(expert.size());
  for (const auto& e : expert) accumulate_reward_gradient(reward, mdp, e, 1.0 / ne, grad);
  LogZCache log_z{mdp, reward, {}};
  for (const auto& m : mixture) {
    if (!(m.density > 0.0)) fail(ErrorKind::degenerate_sample, "mixture density is zero");
    const double p = std::exp(trajectory_reward(reward, mdp, m.traj).sum - log_z(m.traj.prompt_id));
    accumulate_reward_gradient(reward, mdp, m.traj, -m.mass * p / m.density, grad);
  }
  return grad;
}

double gan_irl_objective(const TokenMdp& mdp, const RewardParams& reward,
                         const PolicyParams& policy, std::span<const Trajectory> expert,
                         std::span<const MixtureSample> policy_side) {
  if (expert.empty() || policy_side.empty()) {
    fail(ErrorKind::empty_set, "gan_irl_objective needs both sides");
  }
  LogZCache log_z{mdp, reward, {}};
  // log D = log p~ - log(p~ + pi); log(1 - D) = log pi - log(p~ + pi).
  auto logs = [&](const Trajectory& traj) {
    const double lp = trajectory_reward(reward, mdp, traj).sum - log_z(traj.prompt_id);
    const double lq = policy_logprob(policy, mdp, traj);
    const double both[2] = {lp, lq};
    const double lse = log_sum_exp(both);
    return std::pair{lp - lse, lq - lse};
  };
  double obj = 0.0;
  for (const auto& e : expert) obj += logs(e).first / static_cast<double>(expert.size());
  for (const auto& m : policy_side) obj += m.mass * logs(m.traj).second;
  return obj;
}

// ---------------------------------------------------------------------------
// Training harness

const char* to_string(Method m) noexcept {
  switch (m) {
    case Method::repirl: return "repirl";
    case Method::bc: return "bc";
    case Method::dpo: return "dpo";
    case Method::prime: return "prime";
    case Method::mcts_prm: return "mcts_prm";
    case Method::dqo: return "dqo";
    case Method::rloo: return "rloo";
  }
  return "?";
}

Method parse_method(const std::string& text) {
  for (Method m : {Method::repirl, Method::bc, Method::dpo, Method::prime, Method::mcts_prm,
                   Method::dqo, Method::rloo}) {
    if (text == to_string(m)) return m;
  }
  fail(ErrorKind::parse, "unknown method '" + text + "'");
}

namespace {

std::vector<int> prompts_of(std::span<const Trajectory> expert) {
  std::set<int> ids;
  for (const auto& e : expert) ids.insert(e.prompt_id);
  return {ids.begin(), ids.end()};
}

// Shared scaffolding: parameter init, batch schedule and per-iteration
// bookkeeping. `step` performs one update for a batch.
template <class Step>
TrainResult run_loop(const TokenMdp& mdp, std::span<const Trajectory> expert,
                     const TrainConfig& cfg, const RunOptions& options, Step&& step) {
  cfg.validate();
  if (expert.empty()) fail(ErrorKind::empty_set, "training needs expert trajectories");
  TrainResult result{
      options.init_policy ? *options.init_policy
                          : make_policy(mdp, cfg.policy_repr,
                                        {cfg.policy_context_order, cfg.aligned_input},
                                        cfg.table_size),
      options.init_reward ? *options.init_reward
                          : make_reward(mdp, cfg.reward_repr,
                                        {cfg.reward_context_order, cfg.aligned_input},
                                        cfg.table_size, cfg.value_clip),
      {}};
  result.metrics.lr_scale = cfg.lr_scale;
  const auto train_ids = options.train_ids.empty() ? prompts_of(expert) : options.train_ids;
  int iteration = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& batch : epoch_batches(train_ids, cfg.batch_size, epoch, cfg.seed)) {
      if (cfg.max_iterations > 0 && iteration >= cfg.max_iterations) break;
      IterationMetrics m;
      m.iteration = iteration;
      m.epoch = epoch;
      step(result, batch, iteration, m);
      ++iteration;
      if (cfg.eval_interval > 0 && iteration % cfg.eval_interval == 0) {
        m.pass_at_1_train = pass_at_1(result.policy, mdp, train_ids, true, 0, cfg.workers);
        m.pass_at_1_heldout =
            pass_at_1(result.policy, mdp, options.heldout_ids, true, 0, cfg.workers);
      }
      result.metrics.iterations.push_back(m);
      if (options.on_checkpoint && cfg.checkpoint_interval > 0 &&
          iteration % cfg.checkpoint_interval == 0) {
        options.on_checkpoint(iteration, result.policy, result.reward);
      }
    }
    if (cfg.max_iterations > 0 && iteration >= cfg.max_iterations) break;
  }
  return result;
}

std::vector<std::vector<Trajectory>> batch_rollouts(const PolicyParams& policy,
                                                    const TokenMdp& mdp,
                                                    const std::vector<int>& batch,
                                                    const TrainConfig& cfg, int iteration) {
  std::vector<std::vector<Trajectory>> groups(batch.size());
  const auto seed = rollout_seed(cfg.seed, iteration);
  parallel_for(batch.size(), cfg.workers, [&](std::size_t i) {
    groups[i] = sample_rollouts(policy, mdp, mdp.prompt(batch[i]), cfg.n_rollouts, seed);
  });
  return groups;
}

double mean_outcome(const std::vector<std::vector<Trajectory>>& groups) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& g : groups) {
    for (const auto& r : g) {
      total += r.outcome;
      ++n;
    }
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

void descend(std::vector<double>& params, std::vector<double>& grad, double lr, double clip) {
  clip_by_norm(grad, clip);
  for (std::size_t k = 0; k < grad.size(); ++k) params[k] -= lr * grad[k];
}

std::map<int, std::vector<Trajectory>> group_by_prompt(std::span<const Trajectory> expert) {
  std::map<int, std::vector<Trajectory>> out;
  for (const auto& e : expert) out[e.prompt_id].push_back(e);
  return out;
}

std::vector<Trajectory> batch_experts(const std::map<int, std::vector<Trajectory>>& by_prompt,
                                      const std::vector<int>& batch) {
  std::vector<Trajectory> out;
  for (int id : batch) {
    if (auto it = by_prompt.find(id); it != by_prompt.end()) {
      out.insert(out.end(), it->second.begin(), it->second.end());
    }
  }
  return out;
}

}  // namespace

TrainResult run_baseline(Method method, const TokenMdp& mdp, std::span<const Trajectory> expert,
                         const TrainConfig& cfg, const RunOptions& options) {
  const double policy_lr = cfg.policy_lr * cfg.lr_scale;
  const auto by_prompt = group_by_prompt(expert);

  switch (method) {
    case Method::repirl:
      return run_repirl(mdp, expert, cfg, options);

    case Method::prime: {
      TrainConfig c = cfg;
      c.reward_objective = RewardObjective::prime;
      return run_repirl(mdp, expert, c, options);
    }

    case Method::mcts_prm: {
      TrainConfig c = cfg;
      c.reward_objective = RewardObjective::mcts;
      c.promote_correct = false;
      return run_repirl(mdp, expert, c, options);
    }

    case Method::bc:
      return run_loop(mdp, expert, cfg, options,
                      [&](TrainResult& res, const std::vector<int>& batch, int, IterationMetrics& m) {
                        const auto data = batch_experts(by_prompt, batch);
                        if (data.empty()) return;
                        auto lg = bc_loss(res.policy, mdp, data);
                        m.surrogate = lg.loss;
                        m.policy_grad_norm = lg.grad_norm;
                        descend(res.policy.logits, lg.grad, policy_lr, cfg.policy_grad_clip);
                      });

    case Method::dpo: {
      std::optional<FrozenPolicy> ref;
      return run_loop(
          mdp, expert, cfg, options,
          [&](TrainResult& res, const std::vector<int>& batch, int iteration, IterationMetrics& m) {
            if (!ref) ref.emplace(res.policy);
            const auto groups = batch_rollouts(res.policy, mdp, batch, cfg, iteration);
            m.mean_outcome = mean_outcome(groups);
            std::vector<Trajectory> flat;
            for (const auto& g : groups) flat.insert(flat.end(), g.begin(), g.end());
            const auto pairs = make_preference_pairs(batch_experts(by_prompt, batch), flat);
            m.n_failed = static_cast<int>(pairs.size());
            if (pairs.empty()) return;
            std::vector<double> grad(res.policy.logits.size(), 0.0);
            const double inv = 1.0 / static_cast<double>(pairs.size());
            for (const auto& pair : pairs) {
              const auto lg = dpo_loss(res.policy, *ref, mdp, pair, cfg.beta);
              m.surrogate += lg.loss * inv;
              for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += lg.grad[k] * inv;
            }
            m.policy_grad_norm = l2_norm(grad);
            descend(res.policy.logits, grad, policy_lr, cfg.policy_grad_clip);
          });
    }

    case Method::dqo: {
      if (!mdp.has_hidden_reward()) {
        fail(ErrorKind::annotation_required, "DQO needs per-step reward annotation");
      }
      // Critic V over full states; Q reparameterised as V(s) + beta log pi(a|s),
      // so the value residual vanishes and both V and pi descend the Q residual.
      SoftCritics critics;
      const double critic_lr = cfg.reward_lr * cfg.lr_scale;
      return run_loop(
          mdp, expert, cfg, options,
          [&](TrainResult& res, const std::vector<int>& batch, int iteration, IterationMetrics& m) {
            const auto groups = batch_rollouts(res.policy, mdp, batch, cfg, iteration);
            m.mean_outcome = mean_outcome(groups);
            std::vector<Trajectory> data = batch_experts(by_prompt, batch);
            for (const auto& g : groups) data.insert(data.end(), g.begin(), g.end());
            std::size_t steps = 0;
            for (const auto& t : data) steps += t.size();
            if (steps == 0) return;
            const double inv = 1.0 / static_cast<double>(steps);
            std::vector<double> grad(res.policy.logits.size(), 0.0);
            std::map<StateKey, double> v_grad;
            double loss = 0.0;
            for (const auto& traj : data) {
              State s{traj.prompt_id, {}};
              for (Token a : traj.actions) {
                const double r = mdp.hidden_reward(s.prompt_id, s.prefix, a);
                const double lp = res.policy.log_probs(mdp, s)[static_cast<std::size_t>(a)];
                const double v = critics.v(s);
                State next = s;
                next.prefix.push_back(a);
                const bool terminal = mdp.is_terminal(next.prefix);
                const double v_next = terminal ? 0.0 : critics.v(next);
                const double delta = v + cfg.beta * lp - r - v_next;
                loss += delta * delta * inv;
                v_grad[{s.prompt_id, s.prefix}] += 2.0 * delta * inv;
                if (!terminal) v_grad[{next.prompt_id, next.prefix}] -= 2.0 * delta * inv;
                add_logprob_gradient(res.policy, mdp, s, a, 2.0 * delta * cfg.beta * inv, grad);
                s = std::move(next);
              }
            }
            m.prm_loss = loss;
            m.policy_grad_norm = l2_norm(grad);
            descend(res.policy.logits, grad, policy_lr, cfg.policy_grad_clip);
            for (const auto& [key, g] : v_grad) critics.v_table[key] -= critic_lr * g;
          });
    }

    case Method::rloo:
      return run_loop(
          mdp, expert, cfg, options,
          [&](TrainResult& res, const std::vector<int>& batch, int iteration, IterationMetrics& m) {
            const FrozenPolicy old(res.policy);
            const auto groups = batch_rollouts(res.policy, mdp, batch, cfg, iteration);
            m.mean_outcome = mean_outcome(groups);
            std::vector<Trajectory> flat;
            std::vector<double> advantages;
            for (const auto& g : groups) {
              std::vector<double> rewards;
              for (const auto& r : g) rewards.push_back(r.outcome);
              const auto adv = advantage_estimates(rewards, AdvEstimator::rloo);
              flat.insert(flat.end(), g.begin(), g.end());
              advantages.insert(advantages.end(), adv.begin(), adv.end());
            }
            const auto stats = policy_update(res.policy, old, mdp, flat, advantages, cfg);
            m.surrogate = stats.surrogate;
            m.entropy = stats.entropy;
            m.policy_grad_norm = stats.grad_norm;
          });
  }
  fail(ErrorKind::config, "unknown method");
}

}  // namespace repirl
