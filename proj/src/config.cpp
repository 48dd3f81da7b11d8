#include "repirl/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <istream>
#include <ostream>
#include <sstream>

#include "repirl/error.hpp"

namespace repirl {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

double to_double(const std::string& v) {
  std::size_t pos = 0;
  double x = 0.0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size()) fail(ErrorKind::parse, "expected a number, got '" + v + "'");
  return x;
}

template <class Int>
Int to_int(const std::string& v) {
  Int x{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    fail(ErrorKind::parse, "expected an integer, got '" + v + "'");
  }
  return x;
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  fail(ErrorKind::parse, "expected a boolean, got '" + v + "'");
}

std::vector<std::string> split(const std::string& v, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(trim(item));
  return out;
}

struct Field {
  const char* section;
  const char* key;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define REAL(sec, name, expr)                                                       \
  Field {                                                                           \
    sec, name, [](ExperimentConfig& c, const std::string& v) { c.expr = to_double(v); }, \
        [](const ExperimentConfig& c) { return fmt(c.expr); }                       \
  }
#define INT(sec, name, type, expr)                                                      \
  Field {                                                                               \
    sec, name, [](ExperimentConfig& c, const std::string& v) { c.expr = to_int<type>(v); }, \
        [](const ExperimentConfig& c) { return std::to_string(c.expr); }                \
  }
#define BOOL(sec, name, expr)                                                       \
  Field {                                                                           \
    sec, name, [](ExperimentConfig& c, const std::string& v) { c.expr = to_bool(v); }, \
        [](const ExperimentConfig& c) { return std::string(c.expr ? "true" : "false"); } \
  }
#define ENUM(sec, name, expr, parse)                                              \
  Field {                                                                         \
    sec, name, [](ExperimentConfig& c, const std::string& v) { c.expr = parse(v); }, \
        [](const ExperimentConfig& c) { return std::string(to_string(c.expr)); }  \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      ENUM("task", "task_kind", task.kind, parse_task_kind),
      INT("task", "vocab_size", int, task.vocab_size),
      INT("task", "horizon", int, task.horizon),
      INT("task", "prompt_length", int, task.prompt_length),
      INT("task", "num_prompts", int, task.num_prompts),
      INT("task", "heldout_prompts", int, task.heldout_prompts),
      INT("task", "seed", std::uint64_t, task.seed),
      INT("task", "expert_count", int, expert_count),

      ENUM("train", "method", method, parse_method),
      REAL("train", "beta", train.beta),
      REAL("train", "lambda_prm", train.lambda_prm),
      REAL("train", "outcome_weight", train.outcome_weight),
      INT("train", "n_rollouts", int, train.n_rollouts),
      REAL("train", "policy_lr", train.policy_lr),
      REAL("train", "reward_lr", train.reward_lr),
      REAL("train", "lr_scale", train.lr_scale),
      REAL("train", "clip_ratio", train.clip_ratio),
      REAL("train", "entropy_coef", train.entropy_coef),
      REAL("train", "policy_grad_clip", train.policy_grad_clip),
      REAL("train", "reward_grad_clip", train.reward_grad_clip),
      ENUM("train", "adv_estimator", train.adv_estimator, parse_adv_estimator),
      BOOL("train", "promote_correct", train.promote_correct),
      BOOL("train", "use_importance_weights", train.use_importance_weights),
      Field{"train", "accuracy_filter",
            [](ExperimentConfig& c, const std::string& v) {
              const auto parts = split(v, ',');
              if (parts.size() != 2) fail(ErrorKind::parse, "accuracy_filter expects low,high");
              c.train.filter_low = to_double(parts[0]);
              c.train.filter_high = to_double(parts[1]);
            },
            [](const ExperimentConfig& c) {
              return fmt(c.train.filter_low) + "," + fmt(c.train.filter_high);
            }},
      BOOL("train", "filter_prompts", train.filter_prompts),
      BOOL("train", "format_reward", train.format_reward),
      REAL("train", "weight_log_clip", train.weight_log_clip),
      ENUM("train", "loss_reward_norm", train.loss_reward_norm, parse_reward_norm),
      ENUM("train", "reward_objective", train.reward_objective, parse_reward_objective),
      INT("train", "mcts_samples", int, train.mcts_samples),
      BOOL("train", "train_reward", train.train_reward),
      BOOL("train", "train_policy", train.train_policy),
      REAL("train", "pseudo_expert_capacity_factor", train.pseudo_expert_capacity_factor),
      Field{"train", "value_clip",
            [](ExperimentConfig& c, const std::string& v) {
              if (v == "none") {
                c.train.value_clip.reset();
              } else {
                c.train.value_clip = to_double(v);
              }
            },
            [](const ExperimentConfig& c) {
              return c.train.value_clip ? fmt(*c.train.value_clip) : std::string("none");
            }},
      ENUM("train", "policy_repr", train.policy_repr, parse_repr),
      ENUM("train", "reward_repr", train.reward_repr, parse_repr),
      INT("train", "policy_context_order", int, train.policy_context_order),
      INT("train", "reward_context_order", int, train.reward_context_order),
      BOOL("train", "aligned_input", train.aligned_input),
      INT("train", "table_size", std::size_t, train.table_size),
      INT("train", "epochs", int, train.epochs),
      INT("train", "batch_size", int, train.batch_size),
      INT("train", "max_iterations", int, train.max_iterations),
      INT("train", "eval_interval", int, train.eval_interval),
      INT("train", "checkpoint_interval", int, train.checkpoint_interval),
      INT("train", "workers", int, train.workers),
      INT("train", "seed", std::uint64_t, train.seed),

      BOOL("eval", "greedy", eval.greedy),
      Field{"eval", "tts_n_grid",
            [](ExperimentConfig& c, const std::string& v) {
              c.eval.tts_n_grid.clear();
              for (const auto& p : split(v, ',')) c.eval.tts_n_grid.push_back(to_int<int>(p));
            },
            [](const ExperimentConfig& c) {
              std::string s;
              for (std::size_t i = 0; i < c.eval.tts_n_grid.size(); ++i) {
                if (i) s += ',';
                s += std::to_string(c.eval.tts_n_grid[i]);
              }
              return s;
            }},
      INT("eval", "tts_seeds", int, eval.tts_seeds),
      REAL("eval", "tts_temperature", eval.tts_temperature),
      INT("eval", "auc_negatives", int, eval.auc_negatives),
      BOOL("eval", "hard_problems", eval.hard_problems),
  };
  return table;
}

#undef REAL
#undef INT
#undef BOOL
#undef ENUM

const Field* find_field(const std::string& section, const std::string& key) {
  for (const auto& f : fields()) {
    if (key == f.key && (section.empty() || section == f.section)) return &f;
  }
  return nullptr;
}

void apply(ExperimentConfig& cfg, const std::string& section, const std::string& key,
           const std::string& value, const std::string& where) {
  const Field* f = find_field(section, key);
  if (!f) {
    fail(ErrorKind::config, where + "unknown key '" + key + "'" +
                                (section.empty() ? "" : " in [" + section + "]"));
  }
  try {
    f->set(cfg, value);
  } catch (const Error& e) {
    fail(e.kind(), where + key + ": " + e.what());
  }
}

void validate(const ExperimentConfig& cfg) {
  cfg.train.validate();
  if (cfg.expert_count < 1) fail(ErrorKind::config, "expert_count: must be >= 1");
  if (cfg.eval.tts_seeds < 1) fail(ErrorKind::config, "tts_seeds: must be >= 1");
  if (!(cfg.eval.tts_temperature > 0.0)) fail(ErrorKind::config, "tts_temperature: must be > 0");
  if (cfg.eval.auc_negatives < 1) fail(ErrorKind::config, "auc_negatives: must be >= 1");
  if (cfg.eval.tts_n_grid.empty()) fail(ErrorKind::config, "tts_n_grid: must not be empty");
  for (int n : cfg.eval.tts_n_grid) {
    if (n < 1) fail(ErrorKind::config, "tts_n_grid: entries must be >= 1");
  }
}

}  // namespace

ExperimentConfig parse_config(std::istream& in, std::span<const std::string> overrides) {
  ExperimentConfig cfg;
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(lineno) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') fail(ErrorKind::parse, where + "unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (section != "task" && section != "train" && section != "eval") {
        fail(ErrorKind::config, where + "unknown section [" + section + "]");
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(ErrorKind::parse, where + "expected key = value");
    if (section.empty()) fail(ErrorKind::parse, where + "key outside a section");
    apply(cfg, section, trim(line.substr(0, eq)), trim(line.substr(eq + 1)), where);
  }
  for (const auto& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos) fail(ErrorKind::parse, "override '" + ov + "': expected key=value");
    std::string key = trim(ov.substr(0, eq));
    std::string sec;
    if (const auto dot = key.find('.'); dot != std::string::npos) {
      sec = key.substr(0, dot);
      key = key.substr(dot + 1);
    }
    apply(cfg, sec, key, trim(ov.substr(eq + 1)), "override: ");
  }
  validate(cfg);
  return cfg;
}

ExperimentConfig parse_config_file(const std::string& path,
                                   std::span<const std::string> overrides) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot read config '" + path + "'");
  return parse_config(in, overrides);
}

void write_config(std::ostream& out, const ExperimentConfig& cfg) {
  std::string section;
  for (const auto& f : fields()) {
    if (section != f.section) {
      if (!section.empty()) out << '\n';
      section = f.section;
      out << '[' << section << "]\n";
    }
    out << f.key << " = " << f.get(cfg) << '\n';
  }
}

std::string config_text(const ExperimentConfig& cfg) {
  std::ostringstream ss;
  write_config(ss, cfg);
  return ss.str();
}

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Trajectory datasets

void write_trajectories(std::ostream& out, std::span<const Trajectory> trajectories) {
  for (const auto& t : trajectories) {
    out << "prompt_id=" << t.prompt_id << "\ttokens=";
    for (std::size_t i = 0; i < t.actions.size(); ++i) out << (i ? " " : "") << t.actions[i];
    out << "\toutcome=" << (t.outcome == 1.0 ? 1 : 0) << "\tsource=" << to_string(t.source);
    if (t.behavior_logprobs) {
      out << "\tlogprobs=";
      for (std::size_t i = 0; i < t.behavior_logprobs->size(); ++i) {
        out << (i ? " " : "") << fmt((*t.behavior_logprobs)[i]);
      }
    }
    out << '\n';
  }
}

std::vector<Trajectory> read_trajectories(std::istream& in) {
  std::vector<Trajectory> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const std::string where = "line " + std::to_string(lineno) + ": ";
    Trajectory t;
    bool has_prompt = false, has_tokens = false, has_outcome = false, has_source = false;
    try {
      for (const auto& field : split(line, '\t')) {
        const auto eq = field.find('=');
        if (eq == std::string::npos) fail(ErrorKind::parse, "expected key=value field");
        const auto key = field.substr(0, eq);
        const auto value = field.substr(eq + 1);
        if (key == "prompt_id") {
          t.prompt_id = to_int<int>(value);
          has_prompt = true;
        } else if (key == "tokens") {
          for (const auto& tok : split(value, ' ')) {
            if (!tok.empty()) t.actions.push_back(to_int<int>(tok));
          }
          has_tokens = true;
        } else if (key == "outcome") {
          const int o = to_int<int>(value);
          if (o != 0 && o != 1) fail(ErrorKind::parse, "outcome must be 0 or 1");
          t.outcome = o;
          has_outcome = true;
        } else if (key == "source") {
          t.source = parse_source(value);
          has_source = true;
        } else if (key == "logprobs") {
          std::vector<double> lps;
          for (const auto& x : split(value, ' ')) {
            if (!x.empty()) lps.push_back(to_double(x));
          }
          t.behavior_logprobs = std::move(lps);
        } else {
          fail(ErrorKind::parse, "unknown field '" + key + "'");
        }
      }
    } catch (const Error& e) {
      fail(e.kind(), where + e.what());
    }
    if (!has_prompt || !has_tokens || !has_outcome || !has_source) {
      fail(ErrorKind::parse, where + "missing one of prompt_id, tokens, outcome, source");
    }
    if (t.behavior_logprobs && t.behavior_logprobs->size() != t.actions.size()) {
      fail(ErrorKind::parse, where + "logprobs length differs from tokens");
    }
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace repirl
