#include "repirl/models.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

#include "repirl/error.hpp"
#include "repirl/numeric.hpp"
#include "repirl/rng.hpp"

namespace repirl {

namespace {

constexpr std::size_t kMaxTabularParams = std::size_t{1} << 22;

}  // namespace

const char* to_string(Repr repr) noexcept {
  return repr == Repr::tabular ? "tabular" : "linear";
}

Repr parse_repr(const std::string& text) {
  if (text == "tabular") return Repr::tabular;
  if (text == "linear") return Repr::linear;
  fail(ErrorKind::parse, "unknown repr '" + text + "'");
}

Featurizer::Featurizer(Repr repr, ContextSpec spec, int vocab_size, std::size_t table_size)
    : repr_(repr), spec_(spec), vocab_size_(vocab_size), table_size_(table_size) {
  if (vocab_size_ < 1) fail(ErrorKind::config, "featurizer vocab_size must be >= 1");
  if (spec_.order < 0) fail(ErrorKind::config, "context order must be >= 0");
  if (repr_ == Repr::linear) {
    if (table_size_ == 0) fail(ErrorKind::config, "linear table_size must be >= 1");
    num_contexts_ = table_size_;
    return;
  }
  const int digits = spec_.order + (spec_.aligned_input ? 1 : 0);
  const std::size_t base = static_cast<std::size_t>(vocab_size_) + 1;
  std::size_t n = 1;
  for (int i = 0; i < digits; ++i) {
    if (n > kMaxTabularParams / base) {
      fail(ErrorKind::config, "tabular context table too large; use linear repr or a "
                              "smaller context order");
    }
    n *= base;
  }
  if (spec_.aligned_input) n *= static_cast<std::size_t>(spec_.order) + 1;
  if (n * static_cast<std::size_t>(vocab_size_) > kMaxTabularParams) {
    fail(ErrorKind::config, "tabular parameter table too large");
  }
  num_contexts_ = n;
}

std::size_t Featurizer::context(std::span<const Token> prompt,
                                std::span<const Token> prefix) const {
  const std::size_t pad = static_cast<std::size_t>(vocab_size_);
  const std::size_t base = pad + 1;
  const std::size_t total = prompt.size() + prefix.size();
  auto token_at = [&](std::size_t i) -> std::size_t {
    return static_cast<std::size_t>(i < prompt.size() ? prompt[i] : prefix[i - prompt.size()]);
  };

  std::size_t code = 0;
  std::uint64_t hash = 0x243f6a8885a308d3ULL;
  auto push = [&](std::size_t digit) {
    code = code * base + digit;
    hash = splitmix64(hash ^ (digit + 1));
  };
  if (spec_.aligned_input) {
    const std::size_t t = prefix.size();
    push(t < prompt.size() ? static_cast<std::size_t>(prompt[t]) : pad);
  }
  const std::size_t order = static_cast<std::size_t>(spec_.order);
  for (std::size_t j = 0; j < order; ++j) {
    // Oldest window slot first; left-padded when the sequence is short.
    const std::size_t back = order - j;
    push(back <= total ? token_at(total - back) : pad);
  }
  if (spec_.aligned_input) {
    // Number of generated tokens inside the window, so prompt and prefix
    // tokens with equal ids stay distinguishable.
    const std::size_t gen = std::min(prefix.size(), order);
    code = code * (order + 1) + gen;
    hash = splitmix64(hash ^ (gen + 0x9e37ULL));
  }
  if (repr_ == Repr::tabular) return code;
  return static_cast<std::size_t>(hash % table_size_);
}

std::vector<double> PolicyParams::log_probs(const TokenMdp& mdp, const State& state,
                                            double temperature) const {
  const auto ctx = featurizer.context(mdp.prompt(state.prompt_id).tokens, state.prefix);
  auto r = row(ctx);
  std::vector<double> out(r.begin(), r.end());
  if (temperature != 1.0) {
    for (double& x : out) x /= temperature;
  }
  log_softmax_inplace(out);
  return out;
}

std::vector<double> PolicyParams::probs(const TokenMdp& mdp, const State& state,
                                        double temperature) const {
  auto out = log_probs(mdp, state, temperature);
  for (double& x : out) x = std::exp(x);
  return out;
}

std::vector<Feature> RewardParams::features(const TokenMdp& mdp, const State& state,
                                            Token action) const {
  const auto ctx = featurizer.context(mdp.prompt(state.prompt_id).tokens, state.prefix);
  return {Feature{featurizer.slot(ctx, action), 1.0}};
}

PolicyParams make_policy(const TokenMdp& mdp, Repr repr, ContextSpec spec,
                         std::size_t table_size) {
  return PolicyParams(Featurizer(repr, spec, mdp.vocab_size(), table_size));
}

RewardParams make_reward(const TokenMdp& mdp, Repr repr, ContextSpec spec,
                         std::size_t table_size, std::optional<double> value_clip) {
  return RewardParams(Featurizer(repr, spec, mdp.vocab_size(), table_size), value_clip);
}

std::vector<double> policy_step_logprobs(const PolicyParams& policy, const TokenMdp& mdp,
                                         const Trajectory& traj) {
  std::vector<double> out;
  out.reserve(traj.size());
  State s = mdp.initial_state(traj.prompt_id);
  for (Token a : traj.actions) {
    out.push_back(policy.log_probs(mdp, s)[static_cast<std::size_t>(a)]);
    s.prefix.push_back(a);
  }
  return out;
}

double policy_logprob(const PolicyParams& policy, const TokenMdp& mdp, const Trajectory& traj) {
  double total = 0.0;
  for (double lp : policy_step_logprobs(policy, mdp, traj)) total += lp;
  return total;
}

std::vector<Trajectory> sample_rollouts(const PolicyParams& policy, const TokenMdp& mdp,
                                        const Prompt& prompt, int n, std::uint64_t seed,
                                        double temperature) {
  if (n < 1) fail(ErrorKind::config, "sample_rollouts needs n >= 1");
  std::vector<Trajectory> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(prompt.id),
                               static_cast<std::uint64_t>(i)}));
    Trajectory traj;
    traj.prompt_id = prompt.id;
    traj.source = Source::policy;
    std::vector<double> lps;
    State s = mdp.initial_state(prompt.id);
    std::vector<double> p(static_cast<std::size_t>(mdp.vocab_size()));
    while (!mdp.is_terminal(s.prefix)) {
      const auto lp = policy.log_probs(mdp, s, temperature);
      for (std::size_t j = 0; j < lp.size(); ++j) p[j] = std::exp(lp[j]);
      const auto a = static_cast<Token>(rng.categorical(p));
      lps.push_back(lp[static_cast<std::size_t>(a)]);
      s.prefix.push_back(a);
    }
    traj.actions = std::move(s.prefix);
    traj.behavior_logprobs = std::move(lps);
    traj.outcome = mdp.verify_outcome(traj);
    out.push_back(std::move(traj));
  }
  return out;
}

Trajectory greedy_rollout(const PolicyParams& policy, const TokenMdp& mdp, const Prompt& prompt) {
  Trajectory traj;
  traj.prompt_id = prompt.id;
  traj.source = Source::policy;
  std::vector<double> lps;
  State s = mdp.initial_state(prompt.id);
  while (!mdp.is_terminal(s.prefix)) {
    const auto lp = policy.log_probs(mdp, s);
    // max_element returns the first maximum, i.e. the lowest token id.
    const auto a = static_cast<Token>(std::max_element(lp.begin(), lp.end()) - lp.begin());
    lps.push_back(lp[static_cast<std::size_t>(a)]);
    s.prefix.push_back(a);
  }
  traj.actions = std::move(s.prefix);
  traj.behavior_logprobs = std::move(lps);
  traj.outcome = mdp.verify_outcome(traj);
  return traj;
}

double policy_entropy(const PolicyParams& policy, const TokenMdp& mdp, const State& state) {
  const auto lp = policy.log_probs(mdp, state);
  double h = 0.0;
  for (double l : lp) h -= std::exp(l) * l;
  return std::max(0.0, h);
}

double prm_score(const RewardParams& reward, const TokenMdp& mdp, const State& state,
                 Token action) {
  if (action < 0 || action >= mdp.vocab_size()) {
    fail(ErrorKind::invalid_action, "prm_score action outside vocabulary");
  }
  double r = 0.0;
  for (const auto& f : reward.features(mdp, state, action)) r += reward.weights[f.index] * f.value;
  if (reward.value_clip) r = std::clamp(r, -*reward.value_clip, *reward.value_clip);
  return r;
}

std::vector<double> step_rewards(const RewardParams& reward, const TokenMdp& mdp,
                                 const Trajectory& traj) {
  std::vector<double> out;
  out.reserve(traj.size());
  State s = mdp.initial_state(traj.prompt_id);
  for (Token a : traj.actions) {
    out.push_back(prm_score(reward, mdp, s, a));
    s.prefix.push_back(a);
  }
  return out;
}

TrajectoryReward trajectory_reward(const RewardParams& reward, const TokenMdp& mdp,
                                   const Trajectory& traj) {
  if (traj.actions.empty()) fail(ErrorKind::empty_trajectory, "trajectory has no tokens");
  double sum = 0.0;
  for (double r : step_rewards(reward, mdp, traj)) sum += r;
  return {sum, sum / static_cast<double>(traj.size())};
}

void accumulate_step_gradient(const RewardParams& reward, const TokenMdp& mdp, const State& state,
                              Token action, double scale, std::span<double> grad) {
  const auto feats = reward.features(mdp, state, action);
  double raw = 0.0;
  for (const auto& f : feats) raw += reward.weights[f.index] * f.value;
  if (reward.value_clip && std::abs(raw) > *reward.value_clip) return;
  for (const auto& f : feats) grad[f.index] += scale * f.value;
}

void accumulate_reward_gradient(const RewardParams& reward, const TokenMdp& mdp,
                                const Trajectory& traj, double scale, std::span<double> grad) {
  State s = mdp.initial_state(traj.prompt_id);
  for (Token a : traj.actions) {
    accumulate_step_gradient(reward, mdp, s, a, scale, grad);
    s.prefix.push_back(a);
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr const char* kRowHeader = "param_kind,key,value";

std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

void write_header(std::ostream& out, const char* kind, const Featurizer& f) {
  out << "repirl-checkpoint=1\n"
      << "kind=" << kind << '\n'
      << "repr=" << to_string(f.repr()) << '\n'
      << "context_order=" << f.spec().order << '\n'
      << "aligned_input=" << (f.spec().aligned_input ? 1 : 0) << '\n'
      << "vocab_size=" << f.vocab_size() << '\n'
      << "table_size=" << f.table_size() << '\n';
}

void write_rows(std::ostream& out, const char* row_kind, const std::vector<double>& params) {
  out << kRowHeader << '\n';
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i] != 0.0) out << row_kind << ',' << i << ',' << format_double(params[i]) << '\n';
  }
}

struct ParsedCheckpoint {
  std::map<std::string, std::string> header;
  std::vector<std::pair<std::size_t, double>> rows;
  std::string row_kind;
};

ParsedCheckpoint parse_checkpoint(std::istream& in) {
  ParsedCheckpoint out;
  std::string line;
  int lineno = 0;
  bool in_rows = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (!in_rows) {
      if (line == kRowHeader) {
        in_rows = true;
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        fail(ErrorKind::parse, "checkpoint line " + std::to_string(lineno) + ": expected key=value");
      }
      out.header[line.substr(0, eq)] = line.substr(eq + 1);
      continue;
    }
    std::istringstream row(line);
    std::string kind, key, value;
    if (!std::getline(row, kind, ',') || !std::getline(row, key, ',') ||
        !std::getline(row, value)) {
      fail(ErrorKind::parse, "checkpoint line " + std::to_string(lineno) + ": malformed row");
    }
    if (out.row_kind.empty()) out.row_kind = kind;
    try {
      out.rows.emplace_back(std::stoull(key), std::stod(value));
    } catch (const std::exception&) {
      fail(ErrorKind::parse, "checkpoint line " + std::to_string(lineno) + ": bad number");
    }
  }
  if (!in_rows) fail(ErrorKind::parse, "checkpoint is missing the parameter table");
  return out;
}

const std::string& header_field(const ParsedCheckpoint& ck, const std::string& key) {
  auto it = ck.header.find(key);
  if (it == ck.header.end()) fail(ErrorKind::parse, "checkpoint header lacks '" + key + "'");
  return it->second;
}

Featurizer featurizer_from(const ParsedCheckpoint& ck, const char* kind, int expected_vocab) {
  if (header_field(ck, "repirl-checkpoint") != "1") {
    fail(ErrorKind::parse, "unsupported checkpoint version");
  }
  if (header_field(ck, "kind") != kind) {
    fail(ErrorKind::config, std::string("checkpoint is not a ") + kind + " checkpoint");
  }
  const int vocab = std::stoi(header_field(ck, "vocab_size"));
  if (vocab != expected_vocab) {
    fail(ErrorKind::config, "checkpoint vocab_size " + std::to_string(vocab) +
                                " does not match task vocab_size " +
                                std::to_string(expected_vocab));
  }
  ContextSpec spec;
  spec.order = std::stoi(header_field(ck, "context_order"));
  spec.aligned_input = header_field(ck, "aligned_input") == "1";
  return Featurizer(parse_repr(header_field(ck, "repr")), spec, vocab,
                    std::stoull(header_field(ck, "table_size")));
}

void fill_rows(const ParsedCheckpoint& ck, std::vector<double>& params) {
  for (const auto& [i, v] : ck.rows) {
    if (i >= params.size()) fail(ErrorKind::parse, "checkpoint parameter index out of range");
    params[i] = v;
  }
}

}  // namespace

void save_checkpoint(std::ostream& out, const PolicyParams& policy) {
  write_header(out, "policy", policy.featurizer);
  write_rows(out, "logit", policy.logits);
}

void save_checkpoint(std::ostream& out, const RewardParams& reward) {
  write_header(out, "reward", reward.featurizer);
  out << "value_clip=" << (reward.value_clip ? format_double(*reward.value_clip) : "none")
      << '\n';
  write_rows(out, "weight", reward.weights);
}

PolicyParams load_policy_checkpoint(std::istream& in, int expected_vocab_size) {
  const auto ck = parse_checkpoint(in);
  PolicyParams policy(featurizer_from(ck, "policy", expected_vocab_size));
  fill_rows(ck, policy.logits);
  return policy;
}

RewardParams load_reward_checkpoint(std::istream& in, int expected_vocab_size) {
  const auto ck = parse_checkpoint(in);
  const auto& clip = header_field(ck, "value_clip");
  std::optional<double> value_clip;
  if (clip != "none") value_clip = std::stod(clip);
  RewardParams reward(featurizer_from(ck, "reward", expected_vocab_size), value_clip);
  fill_rows(ck, reward.weights);
  return reward;
}

}  // namespace repirl
