#include "repirl/mdp.hpp"

#include <algorithm>
#include <numeric>

#include "repirl/error.hpp"
#include "repirl/rng.hpp"

namespace repirl {

const char* to_string(TaskKind kind) noexcept {
  switch (kind) {
    case TaskKind::parity_chain: return "parity_chain";
    case TaskKind::arithmetic_chain: return "arithmetic_chain";
    case TaskKind::copy_sort: return "copy_sort";
    case TaskKind::synthetic: return "synthetic";
  }
  return "unknown";
}

const char* to_string(Source source) noexcept {
  switch (source) {
    case Source::expert: return "expert";
    case Source::policy: return "policy";
    case Source::promoted: return "promoted";
  }
  return "unknown";
}

TaskKind parse_task_kind(const std::string& text) {
  for (auto k : {TaskKind::parity_chain, TaskKind::arithmetic_chain, TaskKind::copy_sort,
                 TaskKind::synthetic}) {
    if (text == to_string(k)) return k;
  }
  fail(ErrorKind::parse, "unknown task_kind '" + text + "'");
}

Source parse_source(const std::string& text) {
  for (auto s : {Source::expert, Source::policy, Source::promoted}) {
    if (text == to_string(s)) return s;
  }
  fail(ErrorKind::parse, "unknown trajectory source '" + text + "'");
}

namespace {

int chain_modulus_for(TaskKind kind, int vocab_size) {
  switch (kind) {
    case TaskKind::parity_chain: return 2;
    case TaskKind::arithmetic_chain: return (vocab_size - 2) / 2;
    default: return 0;
  }
}

int chain_sum(const Prompt& prompt, const ChainLayout& layout, std::size_t upto) {
  int s = 0;
  for (std::size_t i = 0; i < upto && i < prompt.tokens.size(); ++i) {
    s = (s + layout.value(prompt.tokens[i])) % layout.modulus;
  }
  return s;
}

std::vector<Token> sorted_copy(const std::vector<Token>& xs) {
  std::vector<Token> out = xs;
  std::sort(out.begin(), out.end());
  return out;
}

double chain_hidden_reward(const ChainLayout& layout, Token eos, const Prompt& prompt,
                           std::span<const Token> prefix, Token action) {
  const bool answered = std::any_of(prefix.begin(), prefix.end(),
                                    [&](Token t) { return layout.is_answer(t); });
  if (answered) return action == eos ? 0.0 : -1.0;
  const std::size_t t = prefix.size();
  const std::size_t len = prompt.tokens.size();
  if (t < len) {
    return action == layout.digit(chain_sum(prompt, layout, t + 1)) ? 1.0 : -1.0;
  }
  if (action == layout.answer(chain_sum(prompt, layout, len))) return 2.0;
  if (action == layout.filler()) return 0.0;
  return -1.0;
}

double sort_hidden_reward(Token eos, const Prompt& prompt, std::span<const Token> prefix,
                          Token action) {
  const auto target = sorted_copy(prompt.tokens);
  const std::size_t t = prefix.size();
  if (t < target.size()) return action == target[t] ? 1.0 : -1.0;
  if (t == target.size()) return action == eos ? 2.0 : -1.0;
  return -1.0;
}

}  // namespace

TokenMdp::TokenMdp(int vocab_size, int horizon, std::optional<Token> eos,
                   std::vector<Prompt> prompts, TaskKind kind, HiddenReward hidden)
    : vocab_size_(vocab_size),
      horizon_(horizon),
      eos_(eos),
      prompts_(std::move(prompts)),
      kind_(kind),
      hidden_(std::move(hidden)),
      modulus_(chain_modulus_for(kind, vocab_size)) {
  if (vocab_size_ < 1) fail(ErrorKind::config, "vocab_size must be >= 1");
  if (horizon_ < 1) fail(ErrorKind::config, "horizon must be >= 1");
  if (eos_ && (*eos_ < 0 || *eos_ >= vocab_size_)) {
    fail(ErrorKind::config, "eos token out of vocabulary range");
  }
  if (prompts_.empty()) fail(ErrorKind::config, "TokenMdp requires at least one prompt");
  int max_id = 0;
  for (const auto& p : prompts_) {
    if (p.id < 0) fail(ErrorKind::config, "prompt ids must be non-negative");
    max_id = std::max(max_id, p.id);
    for (Token t : p.tokens) {
      if (t < 0 || t >= vocab_size_) {
        fail(ErrorKind::config, "prompt " + std::to_string(p.id) + " has token out of range");
      }
    }
  }
  index_of_id_.assign(static_cast<std::size_t>(max_id) + 1, -1);
  for (std::size_t i = 0; i < prompts_.size(); ++i) {
    int& slot = index_of_id_[static_cast<std::size_t>(prompts_[i].id)];
    if (slot != -1) fail(ErrorKind::config, "duplicate prompt id " + std::to_string(prompts_[i].id));
    slot = static_cast<int>(i);
  }
  if (modulus_ != 0) {
    if (modulus_ < 2 || vocab_size_ < 2 * modulus_ + 2) {
      fail(ErrorKind::config, std::string(to_string(kind_)) + " needs vocab_size >= " +
                                  std::to_string(2 * std::max(modulus_, 2) + 2));
    }
    if (eos_ != 0) fail(ErrorKind::config, "chain tasks use token 0 as eos");
  }
  if (kind_ == TaskKind::copy_sort && eos_ != 0) {
    fail(ErrorKind::config, "copy_sort uses token 0 as eos");
  }
}

const Prompt& TokenMdp::prompt(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= index_of_id_.size() ||
      index_of_id_[static_cast<std::size_t>(id)] < 0) {
    fail(ErrorKind::lookup, "unknown prompt id " + std::to_string(id));
  }
  return prompts_[static_cast<std::size_t>(index_of_id_[static_cast<std::size_t>(id)])];
}

State TokenMdp::initial_state(int prompt_id) const {
  (void)prompt(prompt_id);
  return State{prompt_id, {}};
}

bool TokenMdp::is_terminal(std::span<const Token> prefix) const noexcept {
  if (static_cast<int>(prefix.size()) >= horizon_) return true;
  return eos_ && !prefix.empty() && prefix.back() == *eos_;
}

State TokenMdp::step(const State& state, Token action) const {
  if (state.t() >= horizon_) {
    fail(ErrorKind::step_limit, "step beyond horizon " + std::to_string(horizon_));
  }
  if (is_terminal(state.prefix)) fail(ErrorKind::step_limit, "step after eos");
  if (action < 0 || action >= vocab_size_) {
    fail(ErrorKind::invalid_action, "action " + std::to_string(action) + " outside vocabulary");
  }
  State next = state;
  next.prefix.push_back(action);
  return next;
}

std::vector<Token> TokenMdp::extract_answer(const Trajectory& traj) const {
  const auto& a = traj.actions;
  switch (kind_) {
    case TaskKind::parity_chain:
    case TaskKind::arithmetic_chain: {
      const ChainLayout layout{modulus_};
      auto it = std::find_if(a.begin(), a.end(), [&](Token t) { return layout.is_answer(t); });
      if (it == a.end() || it + 1 == a.end() || *(it + 1) != *eos_) return {};
      std::vector<Token> out;
      for (auto j = a.begin(); j != it; ++j) {
        if (*j != layout.filler()) out.push_back(*j);
      }
      out.push_back(*it);
      return out;
    }
    case TaskKind::copy_sort: {
      auto it = std::find(a.begin(), a.end(), *eos_);
      if (it == a.end()) return {};
      return std::vector<Token>(a.begin(), it);
    }
    case TaskKind::synthetic: return {};
  }
  return {};
}

std::vector<Token> TokenMdp::expected_answer(int prompt_id) const {
  const Prompt& p = prompt(prompt_id);
  switch (kind_) {
    case TaskKind::parity_chain:
    case TaskKind::arithmetic_chain: {
      const ChainLayout layout{modulus_};
      std::vector<Token> out;
      for (std::size_t i = 1; i <= p.tokens.size(); ++i) {
        out.push_back(layout.digit(chain_sum(p, layout, i)));
      }
      out.push_back(layout.answer(chain_sum(p, layout, p.tokens.size())));
      return out;
    }
    case TaskKind::copy_sort: return sorted_copy(p.tokens);
    case TaskKind::synthetic: return {};
  }
  return {};
}

double TokenMdp::verify_outcome(const Trajectory& traj) const {
  const auto expected = expected_answer(traj.prompt_id);
  if (kind_ == TaskKind::synthetic) return 0.0;
  const auto got = extract_answer(traj);
  if (kind_ != TaskKind::copy_sort && got.empty()) return 0.0;
  // copy_sort additionally needs the eos that closes the answer.
  if (kind_ == TaskKind::copy_sort &&
      std::find(traj.actions.begin(), traj.actions.end(), *eos_) == traj.actions.end()) {
    return 0.0;
  }
  return got == expected ? 1.0 : 0.0;
}

bool TokenMdp::has_answer_marker(const Trajectory& traj) const {
  const auto& a = traj.actions;
  switch (kind_) {
    case TaskKind::parity_chain:
    case TaskKind::arithmetic_chain: {
      const ChainLayout layout{modulus_};
      return std::any_of(a.begin(), a.end(), [&](Token t) { return layout.is_answer(t); });
    }
    case TaskKind::copy_sort: return std::find(a.begin(), a.end(), *eos_) != a.end();
    case TaskKind::synthetic: return false;
  }
  return false;
}

double TokenMdp::hidden_reward(int prompt_id, std::span<const Token> prefix,
                               Token action) const {
  if (!hidden_) fail(ErrorKind::annotation_required, "MDP has no hidden per-token reward");
  return hidden_(prompt(prompt_id), prefix, action);
}

namespace {

// All sequences over `alphabet` of length 1..max_len in (length, lex) order.
std::vector<std::vector<Token>> enumerate_prompts(const std::vector<Token>& alphabet,
                                                  int max_len) {
  std::vector<std::vector<Token>> out;
  std::vector<std::vector<Token>> layer{{}};
  for (int len = 1; len <= max_len; ++len) {
    std::vector<std::vector<Token>> next;
    next.reserve(layer.size() * alphabet.size());
    for (const auto& s : layer) {
      for (Token t : alphabet) {
        auto e = s;
        e.push_back(t);
        next.push_back(std::move(e));
      }
    }
    if (out.size() + next.size() > 1'000'000) {
      fail(ErrorKind::enumeration_too_large, "prompt enumeration exceeds 1e6 prompts");
    }
    out.insert(out.end(), next.begin(), next.end());
    layer = std::move(next);
  }
  return out;
}

}  // namespace

Task make_task(const TaskSpec& spec) {
  if (spec.prompt_length < 1) fail(ErrorKind::config, "prompt_length must be >= 1");
  if (spec.num_prompts < 1) fail(ErrorKind::config, "num_prompts must be >= 1");
  if (spec.heldout_prompts < 0) fail(ErrorKind::config, "heldout_prompts must be >= 0");
  if (spec.vocab_size < 1 || spec.vocab_size > 64) {
    fail(ErrorKind::config, "vocab_size must lie in [1, 64]");
  }

  std::vector<Token> alphabet;
  HiddenReward hidden;
  int min_horizon = 0;
  switch (spec.kind) {
    case TaskKind::parity_chain:
    case TaskKind::arithmetic_chain: {
      const int m = chain_modulus_for(spec.kind, spec.vocab_size);
      if (m < 2 || spec.vocab_size < 2 * m + 2) {
        fail(ErrorKind::config, std::string(to_string(spec.kind)) + " needs vocab_size >= 6");
      }
      const ChainLayout layout{m};
      for (int d = 0; d < m; ++d) alphabet.push_back(layout.digit(d));
      hidden = [layout](const Prompt& p, std::span<const Token> prefix, Token a) {
        return chain_hidden_reward(layout, 0, p, prefix, a);
      };
      min_horizon = spec.prompt_length + 2;
      break;
    }
    case TaskKind::copy_sort: {
      if (spec.vocab_size < 2) fail(ErrorKind::config, "copy_sort needs vocab_size >= 2");
      for (Token t = 1; t < spec.vocab_size; ++t) alphabet.push_back(t);
      hidden = [](const Prompt& p, std::span<const Token> prefix, Token a) {
        return sort_hidden_reward(0, p, prefix, a);
      };
      min_horizon = spec.prompt_length + 1;
      break;
    }
    case TaskKind::synthetic:
      fail(ErrorKind::config, "synthetic MDPs are built with make_synthetic_mdp");
  }
  if (spec.horizon < min_horizon) {
    fail(ErrorKind::config, "horizon " + std::to_string(spec.horizon) +
                                " too short for prompt_length " +
                                std::to_string(spec.prompt_length));
  }

  const auto all = enumerate_prompts(alphabet, spec.prompt_length);
  std::vector<std::size_t> order(all.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(spec.seed, {0x7072u}));
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[rng.below(i)]);
  }
  const std::size_t n_train = std::min<std::size_t>(order.size(), spec.num_prompts);
  const std::size_t n_held =
      std::min<std::size_t>(order.size() - n_train, spec.heldout_prompts);
  std::vector<std::size_t> train(order.begin(), order.begin() + n_train);
  std::vector<std::size_t> held(order.begin() + n_train, order.begin() + n_train + n_held);
  std::sort(train.begin(), train.end());
  std::sort(held.begin(), held.end());

  std::vector<Prompt> prompts;
  std::vector<int> train_ids;
  std::vector<int> heldout_ids;
  int id = 0;
  for (auto i : train) {
    train_ids.push_back(id);
    prompts.push_back(Prompt{id++, all[i]});
  }
  for (auto i : held) {
    heldout_ids.push_back(id);
    prompts.push_back(Prompt{id++, all[i]});
  }
  return Task{TokenMdp(spec.vocab_size, spec.horizon, 0, std::move(prompts), spec.kind,
                       std::move(hidden)),
              std::move(train_ids), std::move(heldout_ids)};
}

TokenMdp make_synthetic_mdp(int vocab_size, int horizon, std::optional<Token> eos,
                            int num_prompts) {
  std::vector<Prompt> prompts;
  for (int i = 0; i < num_prompts; ++i) prompts.push_back(Prompt{i, {i % vocab_size}});
  return TokenMdp(vocab_size, horizon, eos, std::move(prompts), TaskKind::synthetic);
}

std::vector<Trajectory> generate_expert(const TokenMdp& mdp, const Prompt& prompt, int k,
                                        std::uint64_t seed) {
  if (k < 1) fail(ErrorKind::config, "generate_expert needs k >= 1");
  (void)mdp.prompt(prompt.id);
  const int len = static_cast<int>(prompt.tokens.size());
  std::vector<Trajectory> out;
  out.reserve(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(prompt.id),
                               static_cast<std::uint64_t>(i)}));
    Trajectory traj;
    traj.prompt_id = prompt.id;
    traj.source = Source::expert;
    switch (mdp.task_kind()) {
      case TaskKind::parity_chain:
      case TaskKind::arithmetic_chain: {
        const ChainLayout layout{mdp.chain_modulus()};
        if (len + 2 > mdp.horizon()) fail(ErrorKind::config, "prompt too long for horizon");
        int s = 0;
        for (Token t : prompt.tokens) {
          s = (s + layout.value(t)) % layout.modulus;
          traj.actions.push_back(layout.digit(s));
        }
        // Redundant but harmless step before answering, when it fits.
        if (len + 3 <= mdp.horizon() && rng.uniform() < 0.5) {
          traj.actions.push_back(layout.filler());
        }
        traj.actions.push_back(layout.answer(s));
        traj.actions.push_back(0);
        break;
      }
      case TaskKind::copy_sort: {
        if (len + 1 > mdp.horizon()) fail(ErrorKind::config, "prompt too long for horizon");
        traj.actions = sorted_copy(prompt.tokens);
        traj.actions.push_back(0);
        break;
      }
      case TaskKind::synthetic:
        fail(ErrorKind::config, "synthetic MDPs have no expert");
    }
    traj.outcome = mdp.verify_outcome(traj);
    out.push_back(std::move(traj));
  }
  return out;
}

void check_enumerable(const TokenMdp& mdp, std::uint64_t cap) {
  std::uint64_t count = 1;
  for (int t = 0; t < mdp.horizon(); ++t) {
    if (count > cap / static_cast<std::uint64_t>(mdp.vocab_size())) {
      fail(ErrorKind::enumeration_too_large,
           "V^T exceeds enumeration cap " + std::to_string(cap));
    }
    count *= static_cast<std::uint64_t>(mdp.vocab_size());
  }
}

std::vector<Trajectory> enumerate_trajectories(const TokenMdp& mdp, const Prompt& prompt,
                                               std::uint64_t cap) {
  check_enumerable(mdp, cap);
  (void)mdp.prompt(prompt.id);
  std::vector<Trajectory> out;
  std::vector<Token> prefix;
  prefix.reserve(static_cast<std::size_t>(mdp.horizon()));
  // Iterative DFS in lexicographic order.
  auto emit = [&] {
    Trajectory traj;
    traj.prompt_id = prompt.id;
    traj.actions = prefix;
    traj.outcome = mdp.verify_outcome(traj);
    out.push_back(std::move(traj));
  };
  prefix.push_back(0);
  while (!prefix.empty()) {
    if (mdp.is_terminal(prefix)) {
      emit();
      // Advance to the next sibling, popping exhausted levels.
      while (!prefix.empty() && prefix.back() + 1 >= mdp.vocab_size()) prefix.pop_back();
      if (!prefix.empty()) ++prefix.back();
    } else {
      prefix.push_back(0);
    }
  }
  return out;
}

}  // namespace repirl
