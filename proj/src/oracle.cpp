#include "repirl/oracle.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <ostream>
#include <string>

#include "repirl/error.hpp"
#include "repirl/numeric.hpp"
#include "repirl/rng.hpp"

namespace repirl {

StepRewardFn reward_fn(const RewardParams& reward, const TokenMdp& mdp) {
  return [&reward, &mdp](const State& s, Token a) { return prm_score(reward, mdp, s, a); };
}

StepRewardFn hidden_reward_fn(const TokenMdp& mdp) {
  if (!mdp.has_hidden_reward()) {
    fail(ErrorKind::annotation_required, "MDP has no hidden per-token reward");
  }
  return [&mdp](const State& s, Token a) { return mdp.hidden_reward(s.prompt_id, s.prefix, a); };
}

// ---------------------------------------------------------------------------
// EpisodeTree

EpisodeTree::EpisodeTree(const TokenMdp& mdp, int prompt_id, std::uint64_t cap)
    : prompt_id_(prompt_id), vocab_size_(mdp.vocab_size()) {
  check_enumerable(mdp, cap);
  (void)mdp.prompt(prompt_id);
  nodes_.push_back(Node{-1, -1, 0, mdp.is_terminal({}), 0});
  std::vector<Token> prefix;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].terminal) continue;
    prefix = this->prefix(i);
    nodes_[i].first_child = nodes_.size();
    prefix.push_back(0);
    for (Token a = 0; a < vocab_size_; ++a) {
      prefix.back() = a;
      nodes_.push_back(Node{static_cast<int>(i), a, nodes_[i].depth + 1, mdp.is_terminal(prefix), 0});
    }
  }
}

std::vector<Token> EpisodeTree::prefix(std::size_t i) const {
  std::vector<Token> out(static_cast<std::size_t>(nodes_[i].depth));
  for (auto n = static_cast<int>(i); nodes_[static_cast<std::size_t>(n)].parent >= 0;
       n = nodes_[static_cast<std::size_t>(n)].parent) {
    const auto& node = nodes_[static_cast<std::size_t>(n)];
    out[static_cast<std::size_t>(node.depth - 1)] = node.action;
  }
  return out;
}

std::size_t EpisodeTree::find(std::span<const Token> prefix) const {
  std::size_t n = 0;
  for (Token a : prefix) {
    if (nodes_[n].terminal || a < 0 || a >= vocab_size_) {
      fail(ErrorKind::lookup, "prefix is not a reachable state");
    }
    n = child(n, a);
  }
  return n;
}

std::vector<double> EpisodeTree::edge_rewards(const StepRewardFn& r) const {
  std::vector<double> out(nodes_.size(), 0.0);
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].terminal) continue;
    const State s{prompt_id_, prefix(i)};
    for (Token a = 0; a < vocab_size_; ++a) out[child(i, a)] = r(s, a);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Soft value iteration

double SoftSolution::q_value(std::span<const Token> prefix, Token a) const {
  return q[tree.child(tree.find(prefix), a)];
}

double SoftSolution::v_value(std::span<const Token> prefix) const { return v[tree.find(prefix)]; }

double SoftSolution::log_policy(std::span<const Token> prefix, Token a) const {
  const auto n = tree.find(prefix);
  if (tree.node(n).terminal) fail(ErrorKind::lookup, "no policy at a terminal state");
  return log_pi[tree.child(n, a)];
}

double SoftSolution::policy(std::span<const Token> prefix, Token a) const {
  return std::exp(log_policy(prefix, a));
}

double SoftSolution::trajectory_log_prob(const Trajectory& traj) const {
  std::size_t n = 0;
  double lp = 0.0;
  for (Token a : traj.actions) {
    if (tree.node(n).terminal) fail(ErrorKind::lookup, "trajectory continues past termination");
    n = tree.child(n, a);
    lp += log_pi[n];
  }
  if (!tree.node(n).terminal) fail(ErrorKind::lookup, "trajectory is not complete");
  return lp;
}

SoftSolution soft_value_iteration(const TokenMdp& mdp, const StepRewardFn& reward, double beta,
                                  int prompt_id, std::uint64_t cap) {
  if (!(beta > 0.0)) fail(ErrorKind::config, "soft value iteration needs beta > 0");
  SoftSolution sol{EpisodeTree(mdp, prompt_id, cap), beta, {}, {}, {}};
  const auto& tree = sol.tree;
  const auto r = tree.edge_rewards(reward);
  sol.q.assign(tree.size(), 0.0);
  sol.v.assign(tree.size(), 0.0);
  sol.log_pi.assign(tree.size(), 0.0);
  std::vector<double> scaled(static_cast<std::size_t>(tree.vocab_size()));
  // Children always follow their parent in BFS order, so a reverse sweep is
  // a valid backward induction.
  for (std::size_t i = tree.size(); i-- > 0;) {
    const auto& node = tree.node(i);
    if (node.terminal) continue;
    for (Token a = 0; a < tree.vocab_size(); ++a) {
      const auto c = tree.child(i, a);
      sol.q[c] = r[c] + sol.v[c];
      scaled[static_cast<std::size_t>(a)] = sol.q[c] / beta;
    }
    sol.v[i] = beta * log_sum_exp(scaled);
    for (Token a = 0; a < tree.vocab_size(); ++a) {
      const auto c = tree.child(i, a);
      sol.log_pi[c] = (sol.q[c] - sol.v[i]) / beta;
    }
  }
  return sol;
}

SoftSolution soft_value_iteration(const TokenMdp& mdp, const RewardParams& reward, double beta,
                                  int prompt_id, std::uint64_t cap) {
  return soft_value_iteration(mdp, reward_fn(reward, mdp), beta, prompt_id, cap);
}

// ---------------------------------------------------------------------------
// Forward/backward

OccupancyMessages forward_backward(const TokenMdp& mdp, const StepRewardFn& reward, int prompt_id,
                                   std::uint64_t cap) {
  OccupancyMessages msg{EpisodeTree(mdp, prompt_id, cap), {}, {}, {}, {}, 0.0};
  const auto& tree = msg.tree;
  const auto r = tree.edge_rewards(reward);
  const std::size_t n = tree.size();
  msg.log_forward.assign(n, 0.0);
  msg.log_backward.assign(n, 0.0);
  msg.visitation.assign(n, 0.0);
  msg.marginals.assign(n, 0.0);

  // alpha(s_t) = exp(r(s_{t-1}, a_{t-1})) alpha(s_{t-1}); each state has a
  // single predecessor in the prefix tree.
  for (std::size_t i = 1; i < n; ++i) {
    const auto p = static_cast<std::size_t>(tree.node(i).parent);
    msg.log_forward[i] = msg.log_forward[p] + r[i];
  }
  std::vector<double> terms(static_cast<std::size_t>(tree.vocab_size()));
  for (std::size_t i = n; i-- > 0;) {
    if (tree.node(i).terminal) continue;
    for (Token a = 0; a < tree.vocab_size(); ++a) {
      const auto c = tree.child(i, a);
      terms[static_cast<std::size_t>(a)] = r[c] + msg.log_backward[c];
    }
    msg.log_backward[i] = log_sum_exp(terms);
  }
  msg.log_z = msg.log_backward[0];

  std::map<int, double> step_mass;
  for (std::size_t i = 1; i < n; ++i) {
    const auto p = static_cast<std::size_t>(tree.node(i).parent);
    msg.visitation[i] = std::exp(msg.log_forward[p] + r[i] + msg.log_backward[i] - msg.log_z);
    step_mass[tree.node(p).depth] += msg.visitation[i];
  }
  for (std::size_t i = 1; i < n; ++i) {
    const int t = tree.node(static_cast<std::size_t>(tree.node(i).parent)).depth;
    msg.marginals[i] = msg.visitation[i] / step_mass[t];
  }
  return msg;
}

OccupancyMessages forward_backward(const TokenMdp& mdp, const RewardParams& reward, int prompt_id,
                                   std::uint64_t cap) {
  return forward_backward(mdp, reward_fn(reward, mdp), prompt_id, cap);
}

PartitionValue exact_partition(const TokenMdp& mdp, const RewardParams& reward, int prompt_id,
                               std::uint64_t cap) {
  const EpisodeTree tree(mdp, prompt_id, cap);
  const auto r = tree.edge_rewards(reward_fn(reward, mdp));
  std::vector<double> log_beta(tree.size(), 0.0);
  std::vector<double> terms(static_cast<std::size_t>(tree.vocab_size()));
  for (std::size_t i = tree.size(); i-- > 0;) {
    if (tree.node(i).terminal) continue;
    for (Token a = 0; a < tree.vocab_size(); ++a) {
      const auto c = tree.child(i, a);
      terms[static_cast<std::size_t>(a)] = r[c] + log_beta[c];
    }
    log_beta[i] = log_sum_exp(terms);
  }
  return {log_beta[0]};
}

// ---------------------------------------------------------------------------
// IRL objective and gradient

namespace {

std::map<int, std::size_t> prompt_counts(std::span<const Trajectory> expert) {
  std::map<int, std::size_t> counts;
  for (const auto& e : expert) ++counts[e.prompt_id];
  return counts;
}

}  // namespace

double irl_objective(const TokenMdp& mdp, const RewardParams& reward,
                     std::span<const Trajectory> expert, std::uint64_t cap) {
  if (expert.empty()) fail(ErrorKind::empty_set, "IRL objective needs expert trajectories");
  const double n = static_cast<double>(expert.size());
  double j = 0.0;
  for (const auto& e : expert) j += trajectory_reward(reward, mdp, e).sum / n;
  for (const auto& [prompt_id, count] : prompt_counts(expert)) {
    j -= static_cast<double>(count) / n * exact_partition(mdp, reward, prompt_id, cap).log_z;
  }
  return j;
}

std::vector<double> exact_irl_gradient(const TokenMdp& mdp, const RewardParams& reward,
                                       std::span<const Trajectory> expert, std::uint64_t cap) {
  if (expert.empty()) fail(ErrorKind::empty_set, "IRL gradient needs expert trajectories");
  const double n = static_cast<double>(expert.size());
  std::vector<double> grad(reward.weights.size(), 0.0);
  for (const auto& e : expert) accumulate_reward_gradient(reward, mdp, e, 1.0 / n, grad);
  for (const auto& [prompt_id, count] : prompt_counts(expert)) {
    const auto msg = forward_backward(mdp, reward, prompt_id, cap);
    const double share = static_cast<double>(count) / n;
    const auto& tree = msg.tree;
    for (std::size_t i = 0; i < tree.size(); ++i) {
      if (tree.node(i).terminal) continue;
      const State s = tree.state(i);
      for (Token a = 0; a < tree.vocab_size(); ++a) {
        const double mass = msg.visitation[tree.child(i, a)];
        if (mass != 0.0) accumulate_step_gradient(reward, mdp, s, a, -share * mass, grad);
      }
    }
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Completion values

double mcts_value_label(const TokenMdp& mdp, const PolicyParams& policy, const State& state,
                        int k, std::uint64_t seed) {
  if (k < 1) fail(ErrorKind::config, "mcts_value_label needs k >= 1");
  int wins = 0;
  std::vector<double> p;
  for (int i = 0; i < k; ++i) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(i)}));
    State s = state;
    while (!mdp.is_terminal(s.prefix)) {
      p = policy.probs(mdp, s);
      s.prefix.push_back(static_cast<Token>(rng.categorical(p)));
    }
    Trajectory traj{s.prompt_id, std::move(s.prefix), std::nullopt, 0.0, Source::policy};
    if (mdp.verify_outcome(traj) == 1.0) ++wins;
  }
  return static_cast<double>(wins) / static_cast<double>(k);
}

namespace {

double success_from(const TokenMdp& mdp, const PolicyParams& policy, State& s) {
  if (mdp.is_terminal(s.prefix)) {
    Trajectory traj{s.prompt_id, s.prefix, std::nullopt, 0.0, Source::policy};
    return mdp.verify_outcome(traj);
  }
  const auto p = policy.probs(mdp, s);
  double total = 0.0;
  for (Token a = 0; a < mdp.vocab_size(); ++a) {
    s.prefix.push_back(a);
    total += p[static_cast<std::size_t>(a)] * success_from(mdp, policy, s);
    s.prefix.pop_back();
  }
  return total;
}

}  // namespace

double exact_success_probability(const TokenMdp& mdp, const PolicyParams& policy,
                                 const State& state) {
  State s = state;
  return success_from(mdp, policy, s);
}

// ---------------------------------------------------------------------------
// Dumps

namespace {

std::string state_key(const EpisodeTree& tree, std::size_t node) {
  std::string key = "p" + std::to_string(tree.prompt_id()) + ":";
  const auto prefix = tree.prefix(node);
  for (std::size_t i = 0; i < prefix.size(); ++i) {
    if (i) key += ' ';
    key += std::to_string(prefix[i]);
  }
  return key;
}

void row(std::ostream& out, const char* kind, const std::string& key, double value) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  out << kind << ',' << key << ',' << buf << '\n';
}

}  // namespace

void dump_soft_solution(std::ostream& out, const SoftSolution& sol) {
  out << "repirl-oracle-dump=1\nkind=soft_solution\nbeta=" << sol.beta << "\n";
  out << "param_kind,key,value\n";
  const auto& tree = sol.tree;
  for (std::size_t i = 0; i < tree.size(); ++i) {
    const auto key = state_key(tree, i);
    row(out, "v", key, sol.v[i]);
    if (tree.node(i).terminal) continue;
    for (Token a = 0; a < tree.vocab_size(); ++a) {
      const auto c = tree.child(i, a);
      const auto edge = key + "|" + std::to_string(a);
      row(out, "q", edge, sol.q[c]);
      row(out, "pi", edge, std::exp(sol.log_pi[c]));
    }
  }
}

void dump_occupancy(std::ostream& out, const OccupancyMessages& msg) {
  out << "repirl-oracle-dump=1\nkind=occupancy\n";
  out << "param_kind,key,value\n";
  const auto& tree = msg.tree;
  for (std::size_t i = 0; i < tree.size(); ++i) {
    const auto key = state_key(tree, i);
    row(out, "log_alpha", key, msg.log_forward[i]);
    row(out, "log_beta", key, msg.log_backward[i]);
    if (tree.node(i).terminal) continue;
    for (Token a = 0; a < tree.vocab_size(); ++a) {
      row(out, "mu", key + "|" + std::to_string(a), msg.marginals[tree.child(i, a)]);
    }
  }
}

}  // namespace repirl
