#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "repirl/mdp.hpp"
#include "repirl/models.hpp"
#include "repirl/oracle.hpp"
#include "repirl/trainer.hpp"

namespace repirl {

struct PreferencePair {
  int prompt_id = 0;
  Trajectory chosen;
  Trajectory rejected;
};

// Chosen: a dataset expert for the prompt (cycled); rejected: each failed
// rollout. Prompts without a failed rollout contribute nothing.
std::vector<PreferencePair> make_preference_pairs(std::span<const Trajectory> expert,
                                                  std::span<const Trajectory> rollouts);

using StateKey = std::pair<int, std::vector<Token>>;

// Tabular V and Q over full states; missing entries read as 0.
struct SoftCritics {
  std::map<StateKey, double> v_table;
  std::map<std::pair<StateKey, Token>, double> q_table;

  double v(const State& s) const;
  double q(const State& s, Token a) const;
};

using LogPolicyFn = std::function<double(const State&, Token)>;

LogPolicyFn log_policy_fn(const PolicyParams& policy, const TokenMdp& mdp);

// Critics holding the soft-optimal Q*, V* of an oracle solution.
SoftCritics critics_from_solution(const SoftSolution& solution);
LogPolicyFn log_policy_fn(const SoftSolution& solution);

// Mean over expert tokens of -log pi(a_t | s_t); gradient w.r.t. the logits.
LossAndGrad bc_loss(const PolicyParams& policy, const TokenMdp& mdp,
                    std::span<const Trajectory> expert);

// -log sigmoid(beta [(log pi - log pi_ref)(chosen) - (log pi - log pi_ref)(rejected)]).
LossAndGrad dpo_loss(const PolicyParams& policy, const FrozenPolicy& ref, const TokenMdp& mdp,
                     const PreferencePair& pair, double beta);

struct DqoLosses {
  double value_loss = 0.0;  // mean (V(s) - Q(s,a) + beta log pi(a|s))^2
  double q_loss = 0.0;      // mean (Q(s,a) - r(s,a) - V(s'))^2
};

// Squared soft Bellman residuals over every step of the transitions, with
// per-step rewards from the MDP's hidden annotation and V = 0 at terminals.
DqoLosses dqo_losses(const SoftCritics& critics, const LogPolicyFn& log_policy,
                     const TokenMdp& mdp, std::span<const Trajectory> transitions, double beta);

// beta * log(pi(a_{t-1} | s_{t-1}) / pi_ref(a_{t-1} | s_{t-1})) for 1 <= t <= |tau|.
double prime_implicit_reward(const PolicyParams& policy, const FrozenPolicy& ref,
                             const TokenMdp& mdp, const Trajectory& traj, int t, double beta);

// Loss -(mean_expert exp r(tau) - mean_policy exp r(tau)); r(tau) clamped to
// +-log_clip inside the exponential (no gradient where clamped).
LossAndGrad prime_prm_loss(const RewardParams& reward, const TokenMdp& mdp,
                           std::span<const Trajectory> expert_side,
                           std::span<const Trajectory> policy_side, double log_clip = 20.0);

struct LabeledStep {
  State state;
  Token action = 0;
  double label = 0.0;
};

// Completion-value labels for every step of the trajectories: the success
// rate of policy completions after taking a_t (the outcome at terminals).
// Exact success probabilities replace sampling when `exact` is set.
std::vector<LabeledStep> mcts_labels(const TokenMdp& mdp, const PolicyParams& policy,
                                     std::span<const Trajectory> trajectories, int k,
                                     std::uint64_t seed, bool exact = false);

// Mean binary cross-entropy between sigmoid(r(s, a)) and the label.
LossAndGrad mcts_prm_loss(const RewardParams& reward, const TokenMdp& mdp,
                          std::span<const LabeledStep> labeled);

// A trajectory drawn from the mixture mu; `mass` is its weight in the
// expectation (1/N for Monte Carlo draws, mu(tau) for exact enumeration) and
// `density` is mu(tau).
struct MixtureSample {
  Trajectory traj;
  double density = 0.0;
  double mass = 0.0;
};

// Exact enumeration of mu = 1/2 soft-opt + 1/2 pi_theta for one prompt.
std::vector<MixtureSample> exact_mixture_samples(const TokenMdp& mdp, const RewardParams& reward,
                                                 const PolicyParams& policy, int prompt_id);

// E_expert[grad r] - E_mu[(p~/mu~) grad r], p~ = exp(r(tau) - log z) with z
// exact per prompt and held constant.
std::vector<double> gan_irl_gradient(const TokenMdp& mdp, const RewardParams& reward,
                                     std::span<const Trajectory> expert,
                                     std::span<const MixtureSample> mixture);

// E_expert[log D] + E_policy[log(1 - D)], D = p~/(p~ + pi_theta), with the
// policy-side expectation taken over the given (sample, mass) list.
double gan_irl_objective(const TokenMdp& mdp, const RewardParams& reward,
                         const PolicyParams& policy, std::span<const Trajectory> expert,
                         std::span<const MixtureSample> policy_side);

enum class Method { repirl, bc, dpo, prime, mcts_prm, dqo, rloo };

const char* to_string(Method m) noexcept;
Method parse_method(const std::string& text);

// Trains the given method with the shared seeding, batching and metrics of
// run_repirl. rloo is outcome-only RLOO with no reward model.
TrainResult run_baseline(Method method, const TokenMdp& mdp, std::span<const Trajectory> expert,
                         const TrainConfig& cfg, const RunOptions& options = {});

}  // namespace repirl
