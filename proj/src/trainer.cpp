#include "repirl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <set>

#include "json.hpp"

#include "repirl/baselines.hpp"
#include "repirl/error.hpp"
#include "repirl/eval.hpp"
#include "repirl/numeric.hpp"
#include "repirl/parallel.hpp"
#include "repirl/rng.hpp"

namespace repirl {

const char* to_string(AdvEstimator e) noexcept {
  return e == AdvEstimator::rloo ? "rloo" : "grpo";
}

const char* to_string(RewardNorm n) noexcept { return n == RewardNorm::mean ? "mean" : "sum"; }

const char* to_string(RewardObjective o) noexcept {
  switch (o) {
    case RewardObjective::irl: return "irl";
    case RewardObjective::prime: return "prime";
    case RewardObjective::mcts: return "mcts";
  }
  return "?";
}

AdvEstimator parse_adv_estimator(const std::string& text) {
  if (text == "rloo") return AdvEstimator::rloo;
  if (text == "grpo") return AdvEstimator::grpo;
  fail(ErrorKind::parse, "unknown advantage estimator '" + text + "'");
}

RewardNorm parse_reward_norm(const std::string& text) {
  if (text == "mean") return RewardNorm::mean;
  if (text == "sum") return RewardNorm::sum;
  fail(ErrorKind::parse, "unknown reward normalisation '" + text + "'");
}

RewardObjective parse_reward_objective(const std::string& text) {
  if (text == "irl") return RewardObjective::irl;
  if (text == "prime") return RewardObjective::prime;
  if (text == "mcts") return RewardObjective::mcts;
  fail(ErrorKind::parse, "unknown reward objective '" + text + "'");
}

void TrainConfig::validate() const {
  auto require = [](bool ok, const char* key, const char* what) {
    if (!ok) fail(ErrorKind::config, std::string(key) + ": " + what);
  };
  require(beta > 0.0, "beta", "must be > 0");
  require(lambda_prm >= 0.0, "lambda_prm", "must be >= 0");
  require(std::isfinite(outcome_weight), "outcome_weight", "must be finite");
  require(n_rollouts >= 2, "n_rollouts", "must be >= 2");
  require(policy_lr >= 0.0, "policy_lr", "must be >= 0");
  require(reward_lr >= 0.0, "reward_lr", "must be >= 0");
  require(lr_scale > 0.0, "lr_scale", "must be > 0");
  require(clip_ratio > 0.0 && clip_ratio < 1.0, "clip_ratio", "must lie in (0, 1)");
  require(entropy_coef >= 0.0, "entropy_coef", "must be >= 0");
  require(policy_grad_clip > 0.0, "policy_grad_clip", "must be > 0");
  require(reward_grad_clip > 0.0, "reward_grad_clip", "must be > 0");
  require(filter_low >= 0.0 && filter_high <= 1.0, "accuracy_filter", "bounds must lie in [0, 1]");
  require(filter_low < filter_high, "accuracy_filter", "low must be < high");
  require(weight_log_clip > 0.0, "weight_log_clip", "must be > 0");
  require(mcts_samples >= 1, "mcts_samples", "must be >= 1");
  require(pseudo_expert_capacity_factor >= 0.0, "pseudo_expert_capacity_factor", "must be >= 0");
  require(!value_clip || *value_clip > 0.0, "value_clip", "must be > 0");
  require(policy_context_order >= 0, "policy_context_order", "must be >= 0");
  require(reward_context_order >= 0, "reward_context_order", "must be >= 0");
  require(table_size >= 1, "table_size", "must be >= 1");
  require(epochs >= 0, "epochs", "must be >= 0");
  require(batch_size >= 1, "batch_size", "must be >= 1");
  require(max_iterations >= 0, "max_iterations", "must be >= 0");
  require(eval_interval >= 0, "eval_interval", "must be >= 0");
  require(checkpoint_interval >= 0, "checkpoint_interval", "must be >= 0");
  require(workers >= 1, "workers", "must be >= 1");
}

// ---------------------------------------------------------------------------
// Importance weights and the PRM loss

double importance_log_weight(const RewardParams& reward, const TokenMdp& mdp,
                             const Trajectory& traj, double log_clip) {
  if (!traj.behavior_logprobs) {
    fail(ErrorKind::missing_logprob, "importance weight needs behaviour log-probabilities");
  }
  double lw = trajectory_reward(reward, mdp, traj).sum;
  for (double lp : *traj.behavior_logprobs) lw -= lp;
  return std::clamp(lw, -log_clip, log_clip);
}

std::vector<double> normalized_weights(std::span<const double> log_weights) {
  if (log_weights.empty()) return {};
  const double lse = log_sum_exp(log_weights);
  std::vector<double> w(log_weights.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::exp(log_weights[i] - lse);
  return w;
}

double effective_sample_size(std::span<const double> weights) {
  double s = 0.0;
  double s2 = 0.0;
  for (double w : weights) {
    s += w;
    s2 += w * w;
  }
  return s2 > 0.0 ? s * s / s2 : 0.0;
}

namespace {

double normalized_reward(const RewardParams& reward, const TokenMdp& mdp, const Trajectory& traj,
                         RewardNorm norm) {
  const auto r = trajectory_reward(reward, mdp, traj);
  return norm == RewardNorm::mean ? r.mean : r.sum;
}

double norm_scale(const Trajectory& traj, RewardNorm norm) {
  return norm == RewardNorm::mean ? 1.0 / static_cast<double>(traj.size()) : 1.0;
}

}  // namespace

std::optional<LossAndGrad> prm_loss(const RewardParams& reward, const TokenMdp& mdp,
                                    const BatchSplit& split, std::span<const double> weights,
                                    const TrainConfig& cfg) {
  if (split.policy_failed.empty()) return std::nullopt;
  if (split.expert_pool.empty()) fail(ErrorKind::config, "reward update needs expert trajectories");
  if (weights.size() != split.policy_failed.size()) {
    fail(ErrorKind::config, "one importance weight per failed rollout is required");
  }
  double wsum = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) fail(ErrorKind::degenerate_sample, "invalid weight");
    wsum += w;
  }
  if (!(wsum > 0.0)) fail(ErrorKind::degenerate_sample, "importance weights sum to zero");

  LossAndGrad out;
  out.grad.assign(reward.weights.size(), 0.0);
  const auto norm = cfg.loss_reward_norm;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const auto& traj = split.policy_failed[i];
    const double w = weights[i] / wsum;
    out.loss += w * normalized_reward(reward, mdp, traj, norm);
    accumulate_reward_gradient(reward, mdp, traj, w * norm_scale(traj, norm), out.grad);
  }
  const double ne = static_cast<double>(split.expert_pool.size());
  for (const auto& traj : split.expert_pool) {
    out.loss -= normalized_reward(reward, mdp, traj, norm) / ne;
    accumulate_reward_gradient(reward, mdp, traj, -norm_scale(traj, norm) / ne, out.grad);
  }
  out.grad_norm = clip_by_norm(out.grad, cfg.reward_grad_clip);
  return out;
}

// ---------------------------------------------------------------------------
// Advantages and rewards

std::vector<double> advantage_estimates(std::span<const double> rewards, AdvEstimator mode) {
  const std::size_t n = rewards.size();
  if (n < 2) fail(ErrorKind::group_too_small, "advantage estimation needs at least 2 rollouts");
  double total = 0.0;
  for (double r : rewards) total += r;
  std::vector<double> out(n);
  const double nd = static_cast<double>(n);
  if (mode == AdvEstimator::rloo) {
    // A_i = R_i - (S - R_i)/(n-1) = (n R_i - S)/(n-1). The last entry takes
    // the rounding residual so the group sums to exactly zero.
    double head = 0.0;
    for (std::size_t i = 0; i + 1 < n; ++i) {
      out[i] = (nd * rewards[i] - total) / (nd - 1.0);
      head += out[i];
    }
    out[n - 1] = -head;
    return out;
  }
  const double mean = total / nd;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / nd);
  for (std::size_t i = 0; i < n; ++i) out[i] = (rewards[i] - mean) / (sd + 1e-8);
  return out;
}

double combined_reward(double outcome, double prm_mean, const TrainConfig& cfg,
                       bool has_answer_marker) {
  double r = cfg.outcome_weight * outcome + cfg.lambda_prm * prm_mean;
  if (cfg.format_reward && !has_answer_marker) r -= 1.0;
  return r;
}

// ---------------------------------------------------------------------------
// Policy update

PolicyStepStats policy_objective(const PolicyParams& policy, const PolicyParams& old,
                                 const TokenMdp& mdp, std::span<const Trajectory> rollouts,
                                 std::span<const double> advantages, const TrainConfig& cfg,
                                 std::vector<double>& grad) {
  if (advantages.size() != rollouts.size()) {
    fail(ErrorKind::config, "one advantage per rollout is required");
  }
  grad.assign(policy.logits.size(), 0.0);
  PolicyStepStats stats;
  for (const auto& traj : rollouts) {
    if (!traj.behavior_logprobs) {
      fail(ErrorKind::missing_logprob, "policy update needs behaviour log-probabilities");
    }
    stats.tokens += traj.size();
  }
  if (stats.tokens == 0) return stats;
  const double inv_n = 1.0 / static_cast<double>(stats.tokens);
  const double lo = 1.0 - cfg.clip_ratio;
  const double hi = 1.0 + cfg.clip_ratio;
  const auto v = static_cast<std::size_t>(mdp.vocab_size());

  for (std::size_t i = 0; i < rollouts.size(); ++i) {
    const auto& traj = rollouts[i];
    const double adv = advantages[i];
    const auto& prompt = mdp.prompt(traj.prompt_id).tokens;
    State s{traj.prompt_id, {}};
    for (Token a : traj.actions) {
      const auto ctx = policy.featurizer.context(prompt, s.prefix);
      const auto lp = policy.log_probs(mdp, s);
      const auto old_lp = old.log_probs(mdp, s);
      const auto ai = static_cast<std::size_t>(a);
      const double rho = std::exp(lp[ai] - old_lp[ai]);
      const double unclipped = rho * adv;
      const double clipped = std::clamp(rho, lo, hi) * adv;
      double h = 0.0;
      for (double l : lp) h -= std::exp(l) * l;
      stats.entropy += h * inv_n;
      const std::size_t base = policy.featurizer.slot(ctx, 0);
      if (unclipped <= clipped) {
        stats.surrogate += unclipped * inv_n;
        const double g = adv * rho * inv_n;
        for (std::size_t j = 0; j < v; ++j) grad[base + j] -= g * std::exp(lp[j]);
        grad[base + ai] += g;
      } else {
        stats.surrogate += clipped * inv_n;
      }
      if (cfg.entropy_coef > 0.0) {
        const double c = cfg.entropy_coef * inv_n;
        for (std::size_t j = 0; j < v; ++j) grad[base + j] -= c * std::exp(lp[j]) * (lp[j] + h);
      }
      s.prefix.push_back(a);
    }
  }
  return stats;
}

PolicyStepStats policy_update(PolicyParams& policy, const FrozenPolicy& old,
                              const TokenMdp& mdp, std::span<const Trajectory> rollouts,
                              std::span<const double> advantages, const TrainConfig& cfg) {
  std::vector<double> grad;
  auto stats = policy_objective(policy, old.params(), mdp, rollouts, advantages, cfg, grad);
  stats.grad_norm = clip_by_norm(grad, cfg.policy_grad_clip);
  const double lr = cfg.policy_lr * cfg.lr_scale;
  for (std::size_t k = 0; k < grad.size(); ++k) policy.logits[k] += lr * grad[k];
  return stats;
}

std::vector<int> prompt_filter(const std::map<int, double>& accuracy, const TrainConfig& cfg) {
  std::vector<int> keep;
  for (const auto& [id, acc] : accuracy) {
    if (acc >= cfg.filter_low && acc <= cfg.filter_high) keep.push_back(id);
  }
  return keep;
}

// ---------------------------------------------------------------------------
// Estimator check

GradientEstimate importance_sampled_irl_gradient(const TokenMdp& mdp, const RewardParams& reward,
                                                 const PolicyParams& sampler,
                                                 std::span<const Trajectory> expert, int n,
                                                 std::uint64_t seed) {
  if (expert.empty()) fail(ErrorKind::empty_set, "gradient estimate needs expert trajectories");
  const std::size_t p = reward.weights.size();
  GradientEstimate out{std::vector<double>(p, 0.0), std::vector<double>(p, 0.0)};
  const double ne = static_cast<double>(expert.size());
  for (const auto& e : expert) accumulate_reward_gradient(reward, mdp, e, 1.0 / ne, out.mean);

  std::map<int, std::size_t> counts;
  for (const auto& e : expert) ++counts[e.prompt_id];
  const double inf = std::numeric_limits<double>::infinity();
  for (const auto& [prompt_id, count] : counts) {
    const double share = static_cast<double>(count) / ne;
    const auto rollouts = sample_rollouts(sampler, mdp, mdp.prompt(prompt_id), n, seed);
    std::vector<double> lw(rollouts.size());
    for (std::size_t i = 0; i < rollouts.size(); ++i) {
      lw[i] = importance_log_weight(reward, mdp, rollouts[i], inf);
    }
    const auto w = normalized_weights(lw);
    // Sparse per-rollout gradients; then the self-normalised mean and the
    // delta-method variance sum_i w_i^2 (g_i - est)^2.
    std::vector<double> est(p, 0.0), sq(p, 0.0), lin(p, 0.0);
    double w2 = 0.0;
    std::vector<double> g(p, 0.0);
    std::vector<std::size_t> touched;
    for (std::size_t i = 0; i < rollouts.size(); ++i) {
      touched.clear();
      State s{prompt_id, {}};
      for (Token a : rollouts[i].actions) {
        for (const auto& f : reward.features(mdp, s, a)) touched.push_back(f.index);
        accumulate_step_gradient(reward, mdp, s, a, 1.0, g);
        s.prefix.push_back(a);
      }
      std::sort(touched.begin(), touched.end());
      touched.erase(std::unique(touched.begin(), touched.end()), touched.end());
      const double wi = w[i];
      w2 += wi * wi;
      for (auto k : touched) {
        est[k] += wi * g[k];
        lin[k] += wi * wi * g[k];
        sq[k] += wi * wi * g[k] * g[k];
        g[k] = 0.0;
      }
    }
    for (std::size_t k = 0; k < p; ++k) {
      const double var = std::max(0.0, sq[k] - 2.0 * est[k] * lin[k] + est[k] * est[k] * w2);
      out.mean[k] -= share * est[k];
      out.stderr_[k] += share * share * var;
    }
  }
  for (double& v : out.stderr_) v = std::sqrt(v);
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

namespace {

std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

}  // namespace

void write_metrics_csv(std::ostream& out, const RunMetrics& metrics) {
  out << "iteration,epoch,mean_outcome,prm_expert_mean,prm_policy_mean,prm_loss,reward_skipped,"
         "reward_grad_norm,surrogate,entropy,policy_grad_norm,ess,n_failed,n_promoted,"
         "n_filtered,pass_at_1_train,pass_at_1_heldout\n";
  for (const auto& m : metrics.iterations) {
    out << m.iteration << ',' << m.epoch << ',' << fmt(m.mean_outcome) << ','
        << fmt(m.prm_expert_mean) << ',' << fmt(m.prm_policy_mean) << ',' << fmt(m.prm_loss)
        << ',' << (m.reward_skipped ? 1 : 0) << ',' << fmt(m.reward_grad_norm) << ','
        << fmt(m.surrogate) << ',' << fmt(m.entropy) << ',' << fmt(m.policy_grad_norm) << ','
        << fmt(m.ess) << ',' << m.n_failed << ',' << m.n_promoted << ',' << m.n_filtered << ','
        << fmt(m.pass_at_1_train) << ',' << fmt(m.pass_at_1_heldout) << '\n';
  }
}

void write_run_summary_json(std::ostream& out, const RunMetrics& metrics,
                            const std::string& method) {
  nlohmann::ordered_json j;
  j["method"] = method;
  j["iterations"] = metrics.iterations.size();
  j["lr_scale"] = metrics.lr_scale;
  if (!metrics.iterations.empty()) {
    const auto& last = metrics.iterations.back();
    j["final"] = {{"mean_outcome", last.mean_outcome},
                  {"prm_expert_mean", last.prm_expert_mean},
                  {"prm_policy_mean", last.prm_policy_mean},
                  {"prm_loss", last.prm_loss},
                  {"entropy", last.entropy},
                  {"ess", last.ess},
                  {"pass_at_1_train", last.pass_at_1_train},
                  {"pass_at_1_heldout", last.pass_at_1_heldout}};
    int skipped = 0;
    for (const auto& m : metrics.iterations) skipped += m.reward_skipped ? 1 : 0;
    j["reward_updates_skipped"] = skipped;
  }
  out << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Dual loop

std::vector<Trajectory> make_expert_dataset(const TokenMdp& mdp, std::span<const int> prompt_ids,
                                            int total, std::uint64_t seed) {
  if (prompt_ids.empty()) fail(ErrorKind::empty_set, "expert dataset needs prompts");
  if (total < 1) fail(ErrorKind::config, "expert dataset needs at least one trajectory");
  const auto n = static_cast<int>(prompt_ids.size());
  std::vector<Trajectory> out;
  out.reserve(static_cast<std::size_t>(total));
  for (int j = 0; j < n; ++j) {
    const int k = total / n + (j < total % n ? 1 : 0);
    if (k == 0) continue;
    auto trajs = generate_expert(mdp, mdp.prompt(prompt_ids[static_cast<std::size_t>(j)]), k, seed);
    for (auto& t : trajs) out.push_back(std::move(t));
  }
  return out;
}

std::vector<std::vector<int>> epoch_batches(std::span<const int> ids, int batch_size, int epoch,
                                            std::uint64_t seed) {
  std::vector<int> order(ids.begin(), ids.end());
  Rng rng(derive_seed(seed, {0x6570'6f63ULL, static_cast<std::uint64_t>(epoch)}));
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[rng.below(i)]);
  }
  std::vector<std::vector<int>> out;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(order.size(), i + static_cast<std::size_t>(batch_size));
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

std::uint64_t rollout_seed(std::uint64_t seed, int iteration) {
  return derive_seed(seed, {0x726f'6c6cULL, static_cast<std::uint64_t>(iteration)});
}

namespace {

std::vector<int> dataset_prompts(std::span<const Trajectory> expert) {
  std::set<int> ids;
  for (const auto& e : expert) ids.insert(e.prompt_id);
  return {ids.begin(), ids.end()};
}

void record_pass_at_1(IterationMetrics& m, const PolicyParams& policy, const TokenMdp& mdp,
                      const std::vector<int>& train_ids, const RunOptions& options,
                      const TrainConfig& cfg, bool due) {
  if (!due) return;
  m.pass_at_1_train = pass_at_1(policy, mdp, train_ids, true, 0, cfg.workers);
  m.pass_at_1_heldout = pass_at_1(policy, mdp, options.heldout_ids, true, 0, cfg.workers);
}

}  // namespace

TrainResult run_repirl(const TokenMdp& mdp, std::span<const Trajectory> expert,
                       const TrainConfig& cfg, const RunOptions& options) {
  cfg.validate();
  if (expert.empty()) fail(ErrorKind::empty_set, "run_repirl needs expert trajectories");
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
  auto& policy = result.policy;
  auto& reward = result.reward;
  result.metrics.lr_scale = cfg.lr_scale;

  const auto train_ids = options.train_ids.empty() ? dataset_prompts(expert) : options.train_ids;
  std::map<int, std::vector<const Trajectory*>> experts_by_prompt;
  for (const auto& e : expert) experts_by_prompt[e.prompt_id].push_back(&e);

  std::deque<Trajectory> buffer;
  const auto capacity = static_cast<std::size_t>(
      std::floor(cfg.pseudo_expert_capacity_factor * static_cast<double>(expert.size())));
  const double reward_lr = cfg.reward_lr * cfg.lr_scale;
  const auto n = static_cast<std::size_t>(cfg.n_rollouts);

  int iteration = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& batch : epoch_batches(train_ids, cfg.batch_size, epoch, cfg.seed)) {
      if (cfg.max_iterations > 0 && iteration >= cfg.max_iterations) break;
      IterationMetrics m;
      m.iteration = iteration;
      m.epoch = epoch;
      const FrozenPolicy old(policy);

      // Rollouts (outcomes verified at sampling time).
      std::vector<std::vector<Trajectory>> groups(batch.size());
      const auto seed = rollout_seed(cfg.seed, iteration);
      parallel_for(batch.size(), cfg.workers, [&](std::size_t i) {
        groups[i] = sample_rollouts(policy, mdp, mdp.prompt(batch[i]), cfg.n_rollouts, seed);
      });

      // Split: dataset experts for the batch, promoted rollouts, buffer.
      BatchSplit split;
      std::vector<Trajectory> promoted;
      double outcome_total = 0.0;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        if (auto it = experts_by_prompt.find(batch[i]); it != experts_by_prompt.end()) {
          for (const auto* e : it->second) split.expert_pool.push_back(*e);
        }
        for (const auto& r : groups[i]) {
          outcome_total += r.outcome;
          if (r.outcome == 1.0) {
            if (cfg.promote_correct) {
              Trajectory p = r;
              p.source = Source::promoted;
              promoted.push_back(std::move(p));
            }
          } else {
            split.policy_failed.push_back(r);
          }
        }
      }
      for (const auto& p : promoted) split.expert_pool.push_back(p);
      for (const auto& b : buffer) split.expert_pool.push_back(b);
      for (auto& p : promoted) {
        buffer.push_back(std::move(p));
        if (buffer.size() > capacity) buffer.pop_front();
      }
      m.mean_outcome = outcome_total / static_cast<double>(batch.size() * n);
      m.n_failed = static_cast<int>(split.policy_failed.size());
      m.n_promoted = static_cast<int>(promoted.size());

      // Importance weights on the failed rollouts.
      std::vector<double> lw(split.policy_failed.size(), 0.0);
      if (cfg.use_importance_weights) {
        for (std::size_t i = 0; i < lw.size(); ++i) {
          lw[i] = importance_log_weight(reward, mdp, split.policy_failed[i], cfg.weight_log_clip);
        }
      }
      const auto w = normalized_weights(lw);
      m.ess = effective_sample_size(w);

      // Reward update.
      if (cfg.train_reward) {
        std::optional<LossAndGrad> step;
        switch (cfg.reward_objective) {
          case RewardObjective::irl:
            step = prm_loss(reward, mdp, split, w, cfg);
            break;
          case RewardObjective::prime: {
            std::vector<Trajectory> all;
            for (const auto& g : groups) all.insert(all.end(), g.begin(), g.end());
            step = prime_prm_loss(reward, mdp, split.expert_pool, all, cfg.weight_log_clip);
            step->grad_norm = clip_by_norm(step->grad, cfg.reward_grad_clip);
            break;
          }
          case RewardObjective::mcts: {
            std::vector<Trajectory> all;
            for (const auto& g : groups) all.insert(all.end(), g.begin(), g.end());
            const auto labels = mcts_labels(mdp, old.params(), all, cfg.mcts_samples,
                                            derive_seed(seed, {0x6d63ULL}));
            step = mcts_prm_loss(reward, mdp, labels);
            step->grad_norm = clip_by_norm(step->grad, cfg.reward_grad_clip);
            break;
          }
        }
        if (step) {
          m.prm_loss = step->loss;
          m.reward_grad_norm = step->grad_norm;
          for (std::size_t k = 0; k < step->grad.size(); ++k) {
            reward.weights[k] -= reward_lr * step->grad[k];
          }
        } else {
          m.reward_skipped = true;
        }
      }

      // Score with the updated PRM; combined rewards and advantages.
      std::vector<std::vector<double>> prm_means(batch.size());
      parallel_for(batch.size(), cfg.workers, [&](std::size_t i) {
        for (const auto& r : groups[i]) {
          prm_means[i].push_back(trajectory_reward(reward, mdp, r).mean);
        }
      });
      double policy_prm = 0.0;
      for (const auto& pm : prm_means) {
        for (double x : pm) policy_prm += x;
      }
      m.prm_policy_mean = policy_prm / static_cast<double>(batch.size() * n);
      double expert_prm = 0.0;
      for (const auto& e : split.expert_pool) expert_prm += trajectory_reward(reward, mdp, e).mean;
      m.prm_expert_mean = expert_prm / static_cast<double>(split.expert_pool.size());

      std::map<int, double> accuracy;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        double acc = 0.0;
        for (const auto& r : groups[i]) acc += r.outcome;
        accuracy[batch[i]] = acc / static_cast<double>(n);
      }
      std::set<int> kept;
      if (cfg.filter_prompts) {
        for (int id : prompt_filter(accuracy, cfg)) kept.insert(id);
      }

      std::vector<Trajectory> flat;
      std::vector<double> advantages;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        if (cfg.filter_prompts && !kept.count(batch[i])) {
          ++m.n_filtered;
          continue;
        }
        std::vector<double> rewards(n);
        for (std::size_t j = 0; j < n; ++j) {
          const auto& r = groups[i][j];
          rewards[j] = combined_reward(r.outcome, prm_means[i][j], cfg, mdp.has_answer_marker(r));
        }
        const auto adv = advantage_estimates(rewards, cfg.adv_estimator);
        for (std::size_t j = 0; j < n; ++j) {
          flat.push_back(groups[i][j]);
          advantages.push_back(adv[j]);
        }
      }
      if (cfg.train_policy && !flat.empty()) {
        const auto stats = policy_update(policy, old, mdp, flat, advantages, cfg);
        m.surrogate = stats.surrogate;
        m.entropy = stats.entropy;
        m.policy_grad_norm = stats.grad_norm;
      }

      ++iteration;
      record_pass_at_1(m, policy, mdp, train_ids, options, cfg,
                       cfg.eval_interval > 0 && iteration % cfg.eval_interval == 0);
      result.metrics.iterations.push_back(m);
      if (options.on_checkpoint && cfg.checkpoint_interval > 0 &&
          iteration % cfg.checkpoint_interval == 0) {
        options.on_checkpoint(iteration, policy, reward);
      }
    }
    if (cfg.max_iterations > 0 && iteration >= cfg.max_iterations) break;
  }
  return result;
}

}  // namespace repirl
