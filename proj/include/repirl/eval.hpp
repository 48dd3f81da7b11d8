#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "repirl/mdp.hpp"
#include "repirl/models.hpp"
#include "repirl/oracle.hpp"

namespace repirl {

inline constexpr double kTtsTemperature = 0.8;

struct PassAtOne {
  std::map<int, double> per_prompt;
  double mean = 0.0;
};

// One rollout per prompt: greedy (lowest-token tie break) or sampled.
PassAtOne pass_at_1_detail(const PolicyParams& policy, const TokenMdp& mdp,
                           std::span<const int> prompt_ids, bool greedy = true,
                           std::uint64_t seed = 0, int workers = 1);
double pass_at_1(const PolicyParams& policy, const TokenMdp& mdp,
                 std::span<const int> prompt_ids, bool greedy = true, std::uint64_t seed = 0,
                 int workers = 1);

// Index of the rollout with the largest mean per-token reward; first on ties.
std::size_t best_of_n_select(const StepRewardFn& reward, std::span<const Trajectory> rollouts);
std::size_t best_of_n_select(const RewardParams& reward, const TokenMdp& mdp,
                             std::span<const Trajectory> rollouts);

using AnswerExtractor = std::function<std::vector<Token>(const Trajectory&)>;

// Most frequent extracted answer; ties go to the answer seen first.
std::vector<Token> majority_vote(std::span<const Trajectory> rollouts,
                                 const AnswerExtractor& extract);

// ROC-AUC of scores separating positives from negatives; ties count one half.
double roc_auc(std::span<const double> positives, std::span<const double> negatives);

// AUC of mean per-token PRM reward, experts versus the given negatives.
double prm_ranking_auc(const RewardParams& reward, const TokenMdp& mdp,
                       std::span<const Trajectory> positives,
                       std::span<const Trajectory> negatives);

// Uniform-random feasible trajectories, count per prompt, round robin.
std::vector<Trajectory> random_trajectories(const TokenMdp& mdp, std::span<const int> prompt_ids,
                                            int count, std::uint64_t seed);

struct TtsPoint {
  int n = 0;
  std::string selector;  // "best_of_n" or "majority_vote"
  double mean = 0.0;
  double stderr_ = 0.0;
};

struct TtsSpec {
  std::vector<int> n_grid{1, 4, 16};
  int seeds = 20;
  std::uint64_t base_seed = 0;
  double temperature = kTtsTemperature;
  int workers = 1;
};

// For each seed and prompt, draws max(n_grid) samples once; each n uses the
// first n of them, so sample sets are nested across the grid.
std::vector<TtsPoint> tts_curve(const StepRewardFn& reward, const PolicyParams& policy,
                                const TokenMdp& mdp, std::span<const int> prompt_ids,
                                const TtsSpec& spec);
std::vector<TtsPoint> tts_curve(const RewardParams& reward, const PolicyParams& policy,
                                const TokenMdp& mdp, std::span<const int> prompt_ids,
                                const TtsSpec& spec);

struct EvalReport {
  PassAtOne pass_at_1;
  std::optional<double> prm_auc;
  std::vector<TtsPoint> tts;
};

void write_eval_json(std::ostream& out, const EvalReport& report);
void write_tts_csv(std::ostream& out, std::span<const TtsPoint> points);

}  // namespace repirl
