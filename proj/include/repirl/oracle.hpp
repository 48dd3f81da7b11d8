#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

#include "repirl/mdp.hpp"
#include "repirl/models.hpp"

namespace repirl {

// Per-step reward used by the exact solvers: r(s, a).
using StepRewardFn = std::function<double(const State&, Token)>;

StepRewardFn reward_fn(const RewardParams& reward, const TokenMdp& mdp);
StepRewardFn hidden_reward_fn(const TokenMdp& mdp);

// Every reachable full-prefix state of one prompt, in breadth-first order.
// Children of a non-terminal node occupy V consecutive slots starting at
// first_child, so child(n, a) = first_child + a.
class EpisodeTree {
 public:
  struct Node {
    int parent;
    Token action;  // action that led here; -1 at the root
    int depth;
    bool terminal;
    std::size_t first_child;
  };

  EpisodeTree(const TokenMdp& mdp, int prompt_id, std::uint64_t cap = kDefaultEnumerationCap);

  int prompt_id() const noexcept { return prompt_id_; }
  int vocab_size() const noexcept { return vocab_size_; }
  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_[i]; }
  std::size_t child(std::size_t i, Token a) const {
    return nodes_[i].first_child + static_cast<std::size_t>(a);
  }

  std::vector<Token> prefix(std::size_t i) const;
  State state(std::size_t i) const { return State{prompt_id_, prefix(i)}; }
  // Node reached by a prefix; throws lookup if it leaves the tree.
  std::size_t find(std::span<const Token> prefix) const;

  // r(parent state, action) for every non-root node; 0 at the root.
  std::vector<double> edge_rewards(const StepRewardFn& r) const;

 private:
  int prompt_id_;
  int vocab_size_;
  std::vector<Node> nodes_;
};

// Soft-optimal solution of the max-entropy objective under a fixed reward:
// Q(s,a) = r(s,a) + V(s'), V(s) = beta log sum_a exp(Q(s,a)/beta), V = 0 at
// terminal states, pi*(a|s) = exp((Q(s,a) - V(s))/beta).
struct SoftSolution {
  EpisodeTree tree;
  double beta;
  std::vector<double> q;       // indexed by child node: Q(parent, action)
  std::vector<double> v;       // indexed by node
  std::vector<double> log_pi;  // indexed by child node

  double q_value(std::span<const Token> prefix, Token a) const;
  double v_value(std::span<const Token> prefix) const;
  double policy(std::span<const Token> prefix, Token a) const;
  double log_policy(std::span<const Token> prefix, Token a) const;
  // Sum of log pi* along a complete trajectory.
  double trajectory_log_prob(const Trajectory& traj) const;
};

SoftSolution soft_value_iteration(const TokenMdp& mdp, const StepRewardFn& reward, double beta,
                                  int prompt_id, std::uint64_t cap = kDefaultEnumerationCap);
SoftSolution soft_value_iteration(const TokenMdp& mdp, const RewardParams& reward, double beta,
                                  int prompt_id, std::uint64_t cap = kDefaultEnumerationCap);

struct PartitionValue {
  double log_z;
};

// log of the sum over feasible trajectories of exp(sum_t r(s_t, a_t)).
PartitionValue exact_partition(const TokenMdp& mdp, const RewardParams& reward, int prompt_id,
                               std::uint64_t cap = kDefaultEnumerationCap);

// Forward/backward messages of the trajectory energy model. Stored in the log
// domain; visitation[n] is P(trajectory passes through edge n) and
// marginals[n] renormalises visitation over edges leaving depth-t states.
struct OccupancyMessages {
  EpisodeTree tree;
  std::vector<double> log_forward;   // log alpha, per node
  std::vector<double> log_backward;  // log beta, per node
  std::vector<double> visitation;    // per child node
  std::vector<double> marginals;     // per child node
  double log_z;
};

OccupancyMessages forward_backward(const TokenMdp& mdp, const StepRewardFn& reward, int prompt_id,
                                   std::uint64_t cap = kDefaultEnumerationCap);
OccupancyMessages forward_backward(const TokenMdp& mdp, const RewardParams& reward, int prompt_id,
                                   std::uint64_t cap = kDefaultEnumerationCap);

// J(phi) = mean over experts of [r_phi(tau_i) - log z(x_i)], with z taken per
// prompt since trajectories are conditioned on it.
double irl_objective(const TokenMdp& mdp, const RewardParams& reward,
                     std::span<const Trajectory> expert,
                     std::uint64_t cap = kDefaultEnumerationCap);

// dJ/dphi = E_expert[grad r(tau)] - E_soft-opt[grad r(tau)], the second term
// from forward/backward visitation.
std::vector<double> exact_irl_gradient(const TokenMdp& mdp, const RewardParams& reward,
                                       std::span<const Trajectory> expert,
                                       std::uint64_t cap = kDefaultEnumerationCap);

// Fraction of k policy completions from `state` that verify correct.
double mcts_value_label(const TokenMdp& mdp, const PolicyParams& policy, const State& state,
                        int k, std::uint64_t seed);

// Exact success probability of completing `state` under the policy.
double exact_success_probability(const TokenMdp& mdp, const PolicyParams& policy,
                                 const State& state);

void dump_soft_solution(std::ostream& out, const SoftSolution& solution);
void dump_occupancy(std::ostream& out, const OccupancyMessages& messages);

}  // namespace repirl
