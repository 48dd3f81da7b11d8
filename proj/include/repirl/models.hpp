#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "repirl/mdp.hpp"

namespace repirl {

enum class Repr { tabular, linear };

const char* to_string(Repr repr) noexcept;
Repr parse_repr(const std::string& text);

// What part of the state a tabular/linear model conditions on: the last
// `order` tokens of [prompt || prefix]. With aligned_input the key also holds
// the prompt token aligned with the current step (a sentinel past the
// prompt's end) and how many window tokens were generated rather than given.
struct ContextSpec {
  int order = 3;
  bool aligned_input = true;

  bool operator==(const ContextSpec&) const = default;
};

struct Feature {
  std::size_t index;
  double value;
};

// Maps a (state, action) pair to a parameter slot. Tabular contexts are exact
// mixed-radix codes; linear contexts hash that code into `table_size` buckets
// (one-hot feature per bucket and action).
class Featurizer {
 public:
  Featurizer(Repr repr, ContextSpec spec, int vocab_size, std::size_t table_size = 4096);

  Repr repr() const noexcept { return repr_; }
  const ContextSpec& spec() const noexcept { return spec_; }
  int vocab_size() const noexcept { return vocab_size_; }
  std::size_t table_size() const noexcept { return table_size_; }
  std::size_t num_contexts() const noexcept { return num_contexts_; }
  std::size_t num_params() const noexcept {
    return num_contexts_ * static_cast<std::size_t>(vocab_size_);
  }

  std::size_t context(std::span<const Token> prompt, std::span<const Token> prefix) const;
  std::size_t slot(std::size_t context, Token action) const noexcept {
    return context * static_cast<std::size_t>(vocab_size_) + static_cast<std::size_t>(action);
  }

  bool operator==(const Featurizer&) const = default;

 private:
  Repr repr_;
  ContextSpec spec_;
  int vocab_size_;
  std::size_t table_size_;
  std::size_t num_contexts_;
};

// Softmax policy pi_theta(a | s) over raw logits, one row per context.
struct PolicyParams {
  Featurizer featurizer;
  std::vector<double> logits;

  explicit PolicyParams(Featurizer f)
      : featurizer(std::move(f)), logits(featurizer.num_params(), 0.0) {}

  std::span<const double> row(std::size_t context) const {
    return {logits.data() + featurizer.slot(context, 0),
            static_cast<std::size_t>(featurizer.vocab_size())};
  }
  std::span<double> row(std::size_t context) {
    return {logits.data() + featurizer.slot(context, 0),
            static_cast<std::size_t>(featurizer.vocab_size())};
  }

  // log pi(. | s) with the logits divided by `temperature`.
  std::vector<double> log_probs(const TokenMdp& mdp, const State& state,
                                double temperature = 1.0) const;
  std::vector<double> probs(const TokenMdp& mdp, const State& state,
                            double temperature = 1.0) const;
};

// Read-only snapshot used as pi_ref or pi_old.
class FrozenPolicy {
 public:
  explicit FrozenPolicy(PolicyParams params) : params_(std::move(params)) {}
  const PolicyParams& params() const noexcept { return params_; }

 private:
  PolicyParams params_;
};

// Process reward model r_phi(s, a).
struct RewardParams {
  Featurizer featurizer;
  std::vector<double> weights;
  std::optional<double> value_clip = 10.0;

  explicit RewardParams(Featurizer f, std::optional<double> clip = 10.0)
      : featurizer(std::move(f)), weights(featurizer.num_params(), 0.0), value_clip(clip) {}

  std::vector<Feature> features(const TokenMdp& mdp, const State& state, Token action) const;
};

PolicyParams make_policy(const TokenMdp& mdp, Repr repr = Repr::tabular, ContextSpec spec = {},
                         std::size_t table_size = 4096);
RewardParams make_reward(const TokenMdp& mdp, Repr repr = Repr::tabular, ContextSpec spec = {},
                         std::size_t table_size = 4096, std::optional<double> value_clip = 10.0);

// Sum over steps of log pi_theta(a_t | s_t).
double policy_logprob(const PolicyParams& policy, const TokenMdp& mdp, const Trajectory& traj);

// Per-step log pi_theta(a_t | s_t).
std::vector<double> policy_step_logprobs(const PolicyParams& policy, const TokenMdp& mdp,
                                         const Trajectory& traj);

// n rollouts with behaviour log-probabilities recorded. Rollout i draws from
// the stream derive_seed(seed, {prompt id, i}).
std::vector<Trajectory> sample_rollouts(const PolicyParams& policy, const TokenMdp& mdp,
                                        const Prompt& prompt, int n, std::uint64_t seed,
                                        double temperature = 1.0);

// Argmax decoding, ties broken towards the lowest token id.
Trajectory greedy_rollout(const PolicyParams& policy, const TokenMdp& mdp, const Prompt& prompt);

double policy_entropy(const PolicyParams& policy, const TokenMdp& mdp, const State& state);

double prm_score(const RewardParams& reward, const TokenMdp& mdp, const State& state,
                 Token action);

struct TrajectoryReward {
  double sum;
  double mean;
};

TrajectoryReward trajectory_reward(const RewardParams& reward, const TokenMdp& mdp,
                                   const Trajectory& traj);

// Per-step r_phi(s_t, a_t).
std::vector<double> step_rewards(const RewardParams& reward, const TokenMdp& mdp,
                                 const Trajectory& traj);

// grad += scale * d r_phi(s, a) / d phi; zero where the value clip is active.
void accumulate_step_gradient(const RewardParams& reward, const TokenMdp& mdp, const State& state,
                              Token action, double scale, std::span<double> grad);

// grad += scale * d r_phi(tau) / d phi. Clipped steps contribute nothing.
void accumulate_reward_gradient(const RewardParams& reward, const TokenMdp& mdp,
                                const Trajectory& traj, double scale, std::span<double> grad);

// Checkpoints: a header of `key=value` lines, then `param_kind,key,value`
// rows for every nonzero parameter.
void save_checkpoint(std::ostream& out, const PolicyParams& policy);
void save_checkpoint(std::ostream& out, const RewardParams& reward);
PolicyParams load_policy_checkpoint(std::istream& in, int expected_vocab_size);
RewardParams load_reward_checkpoint(std::istream& in, int expected_vocab_size);

}  // namespace repirl
