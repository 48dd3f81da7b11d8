#include "repirl/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>

#include "json.hpp"

#include "repirl/error.hpp"
#include "repirl/parallel.hpp"
#include "repirl/rng.hpp"

namespace repirl {

PassAtOne pass_at_1_detail(const PolicyParams& policy, const TokenMdp& mdp,
                           std::span<const int> prompt_ids, bool greedy, std::uint64_t seed,
                           int workers) {
  PassAtOne out;
  if (prompt_ids.empty()) return out;
  std::vector<double> solved(prompt_ids.size(), 0.0);
  parallel_for(prompt_ids.size(), workers, [&](std::size_t i) {
    const auto& prompt = mdp.prompt(prompt_ids[i]);
    solved[i] = greedy ? greedy_rollout(policy, mdp, prompt).outcome
                       : sample_rollouts(policy, mdp, prompt, 1, seed).front().outcome;
  });
  double total = 0.0;
  for (std::size_t i = 0; i < prompt_ids.size(); ++i) {
    out.per_prompt[prompt_ids[i]] = solved[i];
    total += solved[i];
  }
  out.mean = total / static_cast<double>(prompt_ids.size());
  return out;
}

double pass_at_1(const PolicyParams& policy, const TokenMdp& mdp,
                 std::span<const int> prompt_ids, bool greedy, std::uint64_t seed,
                 int workers) {
  return pass_at_1_detail(policy, mdp, prompt_ids, greedy, seed, workers).mean;
}

std::size_t best_of_n_select(const StepRewardFn& reward, std::span<const Trajectory> rollouts) {
  if (rollouts.empty()) fail(ErrorKind::empty_set, "best_of_n_select needs rollouts");
  std::size_t best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < rollouts.size(); ++i) {
    const auto& traj = rollouts[i];
    if (traj.actions.empty()) fail(ErrorKind::empty_trajectory, "rollout has no tokens");
    State s{traj.prompt_id, {}};
    double sum = 0.0;
    for (Token a : traj.actions) {
      sum += reward(s, a);
      s.prefix.push_back(a);
    }
    const double score = sum / static_cast<double>(traj.size());
    if (score > best_score) {
      best_score = score;
      best = i;
    }
  }
  return best;
}

std::size_t best_of_n_select(const RewardParams& reward, const TokenMdp& mdp,
                             std::span<const Trajectory> rollouts) {
  return best_of_n_select(reward_fn(reward, mdp), rollouts);
}

std::vector<Token> majority_vote(std::span<const Trajectory> rollouts,
                                 const AnswerExtractor& extract) {
  if (rollouts.empty()) fail(ErrorKind::empty_set, "majority_vote needs rollouts");
  std::vector<std::vector<Token>> answers;
  std::vector<int> counts;
  for (const auto& traj : rollouts) {
    auto ans = extract(traj);
    const auto it = std::find(answers.begin(), answers.end(), ans);
    if (it == answers.end()) {
      answers.push_back(std::move(ans));
      counts.push_back(1);
    } else {
      ++counts[static_cast<std::size_t>(it - answers.begin())];
    }
  }
  const auto best = std::max_element(counts.begin(), counts.end()) - counts.begin();
  return answers[static_cast<std::size_t>(best)];
}

double roc_auc(std::span<const double> positives, std::span<const double> negatives) {
  if (positives.empty() || negatives.empty()) {
    fail(ErrorKind::empty_set, "AUC needs positives and negatives");
  }
  double wins = 0.0;
  for (double p : positives) {
    for (double n : negatives) {
      if (p > n) {
        wins += 1.0;
      } else if (p == n) {
        wins += 0.5;
      }
    }
  }
  return wins / (static_cast<double>(positives.size()) * static_cast<double>(negatives.size()));
}

double prm_ranking_auc(const RewardParams& reward, const TokenMdp& mdp,
                       std::span<const Trajectory> positives,
                       std::span<const Trajectory> negatives) {
  auto scores = [&](std::span<const Trajectory> set) {
    std::vector<double> out;
    out.reserve(set.size());
    for (const auto& t : set) out.push_back(trajectory_reward(reward, mdp, t).mean);
    return out;
  };
  const auto pos = scores(positives);
  const auto neg = scores(negatives);
  return roc_auc(pos, neg);
}

std::vector<Trajectory> random_trajectories(const TokenMdp& mdp, std::span<const int> prompt_ids,
                                            int count, std::uint64_t seed) {
  if (prompt_ids.empty()) fail(ErrorKind::empty_set, "random_trajectories needs prompts");
  std::vector<Trajectory> out;
  out.reserve(static_cast<std::size_t>(std::max(count, 0)));
  const auto v = static_cast<std::uint64_t>(mdp.vocab_size());
  for (int i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(i)}));
    Trajectory traj;
    traj.prompt_id = prompt_ids[static_cast<std::size_t>(i) % prompt_ids.size()];
    traj.source = Source::policy;
    while (!mdp.is_terminal(traj.actions)) traj.actions.push_back(static_cast<Token>(rng.below(v)));
    traj.outcome = mdp.verify_outcome(traj);
    out.push_back(std::move(traj));
  }
  return out;
}

namespace {

struct TtsCell {
  std::vector<double> best;   // per n index
  std::vector<double> major;  // per n index
};

}  // namespace

std::vector<TtsPoint> tts_curve(const StepRewardFn& reward, const PolicyParams& policy,
                                const TokenMdp& mdp, std::span<const int> prompt_ids,
                                const TtsSpec& spec) {
  if (spec.n_grid.empty() || prompt_ids.empty() || spec.seeds < 1) {
    fail(ErrorKind::config, "tts_curve needs an n grid, prompts and at least one seed");
  }
  for (int n : spec.n_grid) {
    if (n < 1) fail(ErrorKind::config, "tts_curve n values must be >= 1");
  }
  const int n_max = *std::max_element(spec.n_grid.begin(), spec.n_grid.end());
  const std::size_t grid = spec.n_grid.size();
  const std::size_t cells = static_cast<std::size_t>(spec.seeds) * prompt_ids.size();
  std::vector<TtsCell> results(cells);
  const AnswerExtractor extract = [&mdp](const Trajectory& t) { return mdp.extract_answer(t); };

  parallel_for(cells, spec.workers, [&](std::size_t c) {
    const auto seed_index = static_cast<std::uint64_t>(c / prompt_ids.size());
    const auto& prompt = mdp.prompt(prompt_ids[c % prompt_ids.size()]);
    const auto samples = sample_rollouts(policy, mdp, prompt, n_max,
                                         derive_seed(spec.base_seed, {seed_index}),
                                         spec.temperature);
    const auto expected = mdp.expected_answer(prompt.id);
    auto& cell = results[c];
    cell.best.resize(grid);
    cell.major.resize(grid);
    for (std::size_t g = 0; g < grid; ++g) {
      const std::span<const Trajectory> head(samples.data(),
                                             static_cast<std::size_t>(spec.n_grid[g]));
      cell.best[g] = head[best_of_n_select(reward, head)].outcome;
      const auto voted = majority_vote(head, extract);
      cell.major[g] = !voted.empty() && voted == expected ? 1.0 : 0.0;
    }
  });

  // Accuracy per seed (mean over prompts), then mean and standard error
  // across seeds.
  auto summarize = [&](std::size_t g, bool best) {
    std::vector<double> per_seed(static_cast<std::size_t>(spec.seeds), 0.0);
    for (std::size_t c = 0; c < cells; ++c) {
      per_seed[c / prompt_ids.size()] += best ? results[c].best[g] : results[c].major[g];
    }
    double mean = 0.0;
    for (double& x : per_seed) {
      x /= static_cast<double>(prompt_ids.size());
      mean += x;
    }
    mean /= static_cast<double>(per_seed.size());
    double var = 0.0;
    for (double x : per_seed) var += (x - mean) * (x - mean);
    const double k = static_cast<double>(per_seed.size());
    const double se = per_seed.size() > 1 ? std::sqrt(var / (k - 1.0) / k) : 0.0;
    return std::pair{mean, se};
  };

  std::vector<TtsPoint> out;
  for (std::size_t g = 0; g < grid; ++g) {
    const auto [bm, bs] = summarize(g, true);
    out.push_back({spec.n_grid[g], "best_of_n", bm, bs});
    const auto [mm, ms] = summarize(g, false);
    out.push_back({spec.n_grid[g], "majority_vote", mm, ms});
  }
  return out;
}

std::vector<TtsPoint> tts_curve(const RewardParams& reward, const PolicyParams& policy,
                                const TokenMdp& mdp, std::span<const int> prompt_ids,
                                const TtsSpec& spec) {
  return tts_curve(reward_fn(reward, mdp), policy, mdp, prompt_ids, spec);
}

void write_eval_json(std::ostream& out, const EvalReport& report) {
  nlohmann::ordered_json j;
  j["pass_at_1"] = report.pass_at_1.mean;
  auto& per = j["per_prompt_pass_at_1"] = nlohmann::ordered_json::object();
  for (const auto& [id, v] : report.pass_at_1.per_prompt) per[std::to_string(id)] = v;
  j["prm_auc"] = report.prm_auc ? nlohmann::ordered_json(*report.prm_auc) : nullptr;
  auto& tts = j["tts"] = nlohmann::ordered_json::array();
  for (const auto& p : report.tts) {
    tts.push_back({{"n", p.n}, {"selector", p.selector}, {"mean", p.mean}, {"stderr", p.stderr_}});
  }
  out << j.dump(2) << '\n';
}

void write_tts_csv(std::ostream& out, std::span<const TtsPoint> points) {
  out << "n,selector,mean,stderr\n";
  char buf[64];
  for (const auto& p : points) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g", p.mean, p.stderr_);
    out << p.n << ',' << p.selector << ',' << buf << '\n';
  }
}

}  // namespace repirl
