#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "repirl/mdp.hpp"
#include "repirl/models.hpp"

namespace repirl {

enum class AdvEstimator { rloo, grpo };
enum class RewardNorm { mean, sum };
// How the PRM is fitted inside the dual loop: importance-weighted IRL,
// PRIME's exponential-mean objective (no importance weights), or
// cross-entropy on Monte Carlo completion labels.
enum class RewardObjective { irl, prime, mcts };

const char* to_string(AdvEstimator e) noexcept;
const char* to_string(RewardNorm n) noexcept;
const char* to_string(RewardObjective o) noexcept;
AdvEstimator parse_adv_estimator(const std::string& text);
RewardNorm parse_reward_norm(const std::string& text);
RewardObjective parse_reward_objective(const std::string& text);

struct TrainConfig {
  double beta = 1.0;
  double lambda_prm = 0.05;
  double outcome_weight = 1.0;
  int n_rollouts = 4;
  double policy_lr = 5e-7;
  double reward_lr = 3e-8;
  double lr_scale = 1e4;
  double clip_ratio = 0.2;
  double entropy_coef = 0.001;
  double policy_grad_clip = 1.0;
  double reward_grad_clip = 10.0;
  AdvEstimator adv_estimator = AdvEstimator::rloo;
  bool promote_correct = true;
  bool use_importance_weights = true;
  double filter_low = 0.2;
  double filter_high = 0.8;
  bool filter_prompts = false;
  bool format_reward = false;
  double weight_log_clip = 20.0;
  RewardNorm loss_reward_norm = RewardNorm::mean;
  RewardObjective reward_objective = RewardObjective::irl;
  int mcts_samples = 8;  // completions per labelled state
  bool train_reward = true;
  bool train_policy = true;
  double pseudo_expert_capacity_factor = 4.0;
  std::optional<double> value_clip = 10.0;
  Repr policy_repr = Repr::tabular;
  Repr reward_repr = Repr::tabular;
  int policy_context_order = 3;
  int reward_context_order = 3;
  bool aligned_input = true;
  std::size_t table_size = 4096;
  int epochs = 1;
  int batch_size = 16;  // prompts per iteration
  int max_iterations = 0;  // 0: no cap beyond epochs
  int eval_interval = 1;   // iterations between pass@1 evaluations; 0 disables
  int checkpoint_interval = 0;
  int workers = 1;
  std::uint64_t seed = 0;

  // Throws a config error naming the offending field.
  void validate() const;
};

// Outcome-based split of one batch.
struct BatchSplit {
  std::vector<Trajectory> policy_failed;
  std::vector<Trajectory> expert_pool;
};

// log w = sum_t r_phi(s_t, a_t) - sum_t log pi(a_t | s_t), using the recorded
// behaviour log-probabilities, clipped to +-log_clip.
double importance_log_weight(const RewardParams& reward, const TokenMdp& mdp,
                             const Trajectory& traj, double log_clip = 20.0);

// Self-normalised weights exp(lw_i) / sum_j exp(lw_j), via log-sum-exp.
std::vector<double> normalized_weights(std::span<const double> log_weights);

// Kish effective sample size (sum w)^2 / sum w^2.
double effective_sample_size(std::span<const double> weights);

struct LossAndGrad {
  double loss = 0.0;
  std::vector<double> grad;
  double grad_norm = 0.0;  // before clipping
};

// L = sum_i w_i rbar(tau_i) / sum_i w_i - mean_expert rbar(tau). Weights are
// constants. Returns nullopt (skip) when no failed rollouts are present.
// rbar is the per-token mean or the sum per cfg.loss_reward_norm; the
// gradient is clipped to cfg.reward_grad_clip.
std::optional<LossAndGrad> prm_loss(const RewardParams& reward, const TokenMdp& mdp,
                                    const BatchSplit& split, std::span<const double> weights,
                                    const TrainConfig& cfg);

std::vector<double> advantage_estimates(std::span<const double> rewards, AdvEstimator mode);

double combined_reward(double outcome, double prm_mean, const TrainConfig& cfg,
                       bool has_answer_marker = true);

struct PolicyStepStats {
  double surrogate = 0.0;
  double entropy = 0.0;
  double grad_norm = 0.0;
  std::size_t tokens = 0;
};

// One ascent step on mean_t[min(rho A, clip(rho) A)] + entropy_coef mean_t H.
// Rollouts must carry behaviour log-probabilities of the snapshot policy.
PolicyStepStats policy_update(PolicyParams& policy, const FrozenPolicy& old,
                              const TokenMdp& mdp, std::span<const Trajectory> rollouts,
                              std::span<const double> advantages, const TrainConfig& cfg);

// Surrogate objective and its gradient (ascent direction, unclipped) without
// applying it. rho_t = pi(a_t|s_t) / pi_old(a_t|s_t).
PolicyStepStats policy_objective(const PolicyParams& policy, const PolicyParams& old,
                                 const TokenMdp& mdp,
                                 std::span<const Trajectory> rollouts,
                                 std::span<const double> advantages, const TrainConfig& cfg,
                                 std::vector<double>& grad);

// Prompts with low <= accuracy <= high.
std::vector<int> prompt_filter(const std::map<int, double>& accuracy, const TrainConfig& cfg);

// Importance-sampled IRL gradient: mean_expert grad r(tau) minus the
// self-normalised weighted mean of grad r over n rollouts of `sampler`
// (trajectory sums, unclipped weights). stderr holds delta-method errors.
struct GradientEstimate {
  std::vector<double> mean;
  std::vector<double> stderr_;
};
GradientEstimate importance_sampled_irl_gradient(const TokenMdp& mdp, const RewardParams& reward,
                                                 const PolicyParams& sampler,
                                                 std::span<const Trajectory> expert, int n,
                                                 std::uint64_t seed);

struct IterationMetrics {
  int iteration = 0;
  int epoch = 0;
  double mean_outcome = 0.0;
  double prm_expert_mean = 0.0;
  double prm_policy_mean = 0.0;
  double prm_loss = 0.0;
  bool reward_skipped = false;
  double reward_grad_norm = 0.0;
  double surrogate = 0.0;
  double entropy = 0.0;
  double policy_grad_norm = 0.0;
  double ess = 0.0;
  int n_failed = 0;
  int n_promoted = 0;
  int n_filtered = 0;
  double pass_at_1_train = 0.0;
  double pass_at_1_heldout = 0.0;
};

struct RunMetrics {
  std::vector<IterationMetrics> iterations;
  double lr_scale = 0.0;
};

void write_metrics_csv(std::ostream& out, const RunMetrics& metrics);
void write_run_summary_json(std::ostream& out, const RunMetrics& metrics,
                            const std::string& method);

struct TrainResult {
  PolicyParams policy;
  RewardParams reward;
  RunMetrics metrics;
};

// Dataset of `total` expert trajectories spread round robin over the prompts.
std::vector<Trajectory> make_expert_dataset(const TokenMdp& mdp, std::span<const int> prompt_ids,
                                            int total, std::uint64_t seed);

// Called every cfg.checkpoint_interval iterations with the live parameters.
using CheckpointHook =
    std::function<void(int iteration, const PolicyParams&, const RewardParams&)>;

struct RunOptions {
  std::vector<int> train_ids;    // prompts iterated over; all dataset prompts if empty
  std::vector<int> heldout_ids;  // evaluated only
  std::optional<PolicyParams> init_policy;
  std::optional<RewardParams> init_reward;
  CheckpointHook on_checkpoint;
};

// The full dual loop: rollouts, verification, promotion, importance-weighted
// PRM update, re-scoring with the updated PRM, policy update.
TrainResult run_repirl(const TokenMdp& mdp, std::span<const Trajectory> expert,
                       const TrainConfig& cfg, const RunOptions& options = {});

// Prompt order for one epoch, split into batches.
std::vector<std::vector<int>> epoch_batches(std::span<const int> ids, int batch_size,
                                            int epoch, std::uint64_t seed);

// Rollout stream seed for one iteration.
std::uint64_t rollout_seed(std::uint64_t seed, int iteration);

}  // namespace repirl
