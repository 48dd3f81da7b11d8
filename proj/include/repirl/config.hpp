#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "repirl/baselines.hpp"
#include "repirl/mdp.hpp"
#include "repirl/trainer.hpp"

namespace repirl {

struct EvalConfig {
  bool greedy = true;
  std::vector<int> tts_n_grid{1, 4, 16};
  int tts_seeds = 20;
  double tts_temperature = 0.8;
  int auc_negatives = 256;
  // Train only on prompts the initial policy fails under greedy decoding.
  bool hard_problems = false;
};

struct ExperimentConfig {
  TaskSpec task;
  int expert_count = 200;
  Method method = Method::repirl;
  TrainConfig train;
  EvalConfig eval;
};

// key = value lines under [task], [train] and [eval] headers; '#' starts a
// comment. Overrides are `key=value` or `section.key=value` and win over the
// file. Unknown keys and malformed lines throw with the line number.
ExperimentConfig parse_config(std::istream& in, std::span<const std::string> overrides = {});
ExperimentConfig parse_config_file(const std::string& path,
                                   std::span<const std::string> overrides = {});

// Every field, fully resolved, in the same format parse_config reads.
void write_config(std::ostream& out, const ExperimentConfig& cfg);
std::string config_text(const ExperimentConfig& cfg);

// 64-bit FNV-1a.
std::uint64_t fnv1a(const std::string& text);

// Trajectory dataset: one record per line, tab-separated key=value fields
// prompt_id, tokens (space separated), outcome, source, optional logprobs.
void write_trajectories(std::ostream& out, std::span<const Trajectory> trajectories);
std::vector<Trajectory> read_trajectories(std::istream& in);

}  // namespace repirl
