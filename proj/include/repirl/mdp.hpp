#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace repirl {

using Token = int;

// Which synthetic reasoning task a TokenMdp verifies. `synthetic` has no
// verifiable answer (every outcome is 0); it backs the small oracle instances.
enum class TaskKind { parity_chain, arithmetic_chain, copy_sort, synthetic };

enum class Source { expert, policy, promoted };

const char* to_string(TaskKind kind) noexcept;
const char* to_string(Source source) noexcept;
TaskKind parse_task_kind(const std::string& text);
Source parse_source(const std::string& text);

struct Prompt {
  int id = 0;
  std::vector<Token> tokens;
};

// s_t = [x, y_0 .. y_{t-1}]; the prompt is referenced by id.
struct State {
  int prompt_id = 0;
  std::vector<Token> prefix;

  int t() const noexcept { return static_cast<int>(prefix.size()); }
  bool operator==(const State&) const = default;
};

struct Trajectory {
  int prompt_id = 0;
  std::vector<Token> actions;
  // Per-token log-probability under the sampling policy; absent for experts.
  std::optional<std::vector<double>> behavior_logprobs;
  double outcome = 0.0;
  Source source = Source::policy;

  std::size_t size() const noexcept { return actions.size(); }
};

// Ground-truth per-token reward, visible to generators and evaluation only.
using HiddenReward =
    std::function<double(const Prompt&, std::span<const Token> prefix, Token action)>;

// Deterministic token-level MDP. Transitions append the action to the prefix;
// an episode ends at the first eos or at the horizon. Immutable once built.
class TokenMdp {
 public:
  TokenMdp(int vocab_size, int horizon, std::optional<Token> eos,
           std::vector<Prompt> prompts, TaskKind kind, HiddenReward hidden = {});

  int vocab_size() const noexcept { return vocab_size_; }
  int horizon() const noexcept { return horizon_; }
  std::optional<Token> eos() const noexcept { return eos_; }
  TaskKind task_kind() const noexcept { return kind_; }
  const std::vector<Prompt>& prompts() const noexcept { return prompts_; }
  bool has_hidden_reward() const noexcept { return static_cast<bool>(hidden_); }

  const Prompt& prompt(int id) const;
  State initial_state(int prompt_id) const;

  // True once the prefix reached the horizon or ended with eos.
  bool is_terminal(std::span<const Token> prefix) const noexcept;

  State step(const State& state, Token action) const;

  double verify_outcome(const Trajectory& traj) const;

  // Final answer segment as read by the verifier; empty when the trajectory
  // carries no well-formed answer. Chain tasks return the running values
  // (fillers dropped) followed by the answer token, so a correct outcome
  // needs the whole chain and not just the final value.
  std::vector<Token> extract_answer(const Trajectory& traj) const;
  std::vector<Token> expected_answer(int prompt_id) const;

  // Whether the trajectory contains the task's answer-marker token.
  bool has_answer_marker(const Trajectory& traj) const;

  double hidden_reward(int prompt_id, std::span<const Token> prefix, Token action) const;

  // Numeric base of arithmetic/parity chains (2 for parity).
  int chain_modulus() const noexcept { return modulus_; }

 private:
  int vocab_size_;
  int horizon_;
  std::optional<Token> eos_;
  std::vector<Prompt> prompts_;
  std::vector<int> index_of_id_;
  TaskKind kind_;
  HiddenReward hidden_;
  int modulus_ = 0;
};

// Token layout of the chain tasks (parity and arithmetic): eos = 0, digit d
// is token 1 + d, answer "= d" is token 1 + m + d, token 1 + 2m is a filler
// step the experts may insert before answering.
struct ChainLayout {
  int modulus;

  Token digit(int d) const noexcept { return 1 + d; }
  Token answer(int d) const noexcept { return 1 + modulus + d; }
  Token filler() const noexcept { return 1 + 2 * modulus; }
  bool is_digit(Token t) const noexcept { return t >= 1 && t <= modulus; }
  bool is_answer(Token t) const noexcept { return t > modulus && t <= 2 * modulus; }
  int value(Token t) const noexcept { return is_digit(t) ? t - 1 : t - 1 - modulus; }
};

struct TaskSpec {
  TaskKind kind = TaskKind::parity_chain;
  int vocab_size = 6;
  int horizon = 8;
  int prompt_length = 6;  // prompts of every length 1..prompt_length
  int num_prompts = 64;
  int heldout_prompts = 0;
  std::uint64_t seed = 0;
};

struct Task {
  TokenMdp mdp;
  std::vector<int> train_ids;
  std::vector<int> heldout_ids;
};

// Enumerates every prompt up to spec.prompt_length, subsamples train and
// held-out sets by seed, and attaches the task's hidden reward.
Task make_task(const TaskSpec& spec);

// Synthetic (unverified) MDP for oracle studies; prompt i is [i mod V].
TokenMdp make_synthetic_mdp(int vocab_size, int horizon, std::optional<Token> eos,
                            int num_prompts = 1);

std::vector<Trajectory> generate_expert(const TokenMdp& mdp, const Prompt& prompt, int k,
                                        std::uint64_t seed);

inline constexpr std::uint64_t kDefaultEnumerationCap = 2'000'000;

// Throws enumeration_too_large unless V^T <= cap.
void check_enumerable(const TokenMdp& mdp, std::uint64_t cap = kDefaultEnumerationCap);

std::vector<Trajectory> enumerate_trajectories(const TokenMdp& mdp, const Prompt& prompt,
                                               std::uint64_t cap = kDefaultEnumerationCap);

}  // namespace repirl
