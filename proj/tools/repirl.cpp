#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "oracle_check.hpp"
#include "repirl/baselines.hpp"
#include "repirl/config.hpp"
#include "repirl/error.hpp"
#include "repirl/eval.hpp"
#include "repirl/mdp.hpp"
#include "repirl/rng.hpp"
#include "repirl/trainer.hpp"

namespace fs = std::filesystem;
using namespace repirl;

namespace {

constexpr const char* kVersion = "0.1.0";

struct Invocation {
  std::string command;
  std::string config;
  std::string out;
  std::string from;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
  bool force = false;
  int seeds = 5;
};

// Output file whose presence marks a completed command.
const char* completion_file(const std::string& command) {
  if (command == "gen-data") return "expert.tsv";
  if (command == "train") return "metrics.csv";
  if (command == "eval") return "eval.json";
  if (command == "tts") return "tts.csv";
  if (command == "ablate") return "ablation.csv";
  return "oracle_check.txt";
}

std::string hex64(std::uint64_t x) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(x));
  return buf;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot write " + path.string());
  return out;
}

std::ifstream open_in(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot read " + path.string());
  return in;
}

ExperimentConfig load_config(const Invocation& inv, const fs::path& dir) {
  std::vector<std::string> overrides = inv.sets;
  if (inv.seed) overrides.push_back("train.seed=" + std::to_string(*inv.seed));
  if (!inv.config.empty()) return parse_config_file(inv.config, overrides);
  if (fs::exists(dir / "resolved_config.ini")) {
    return parse_config_file((dir / "resolved_config.ini").string(), overrides);
  }
  std::istringstream empty;
  return parse_config(empty, overrides);
}

fs::path resolve_out(const Invocation& inv, const ExperimentConfig& cfg) {
  if (!inv.out.empty()) return inv.out;
  const char* root = std::getenv("REPIRL_OUT_ROOT");
  const fs::path base = root && *root ? root : "runs";
  return base / (std::string(to_string(cfg.method)) + "-" + hex64(fnv1a(config_text(cfg))).substr(0, 8));
}

std::uint64_t expert_seed(const ExperimentConfig& cfg) {
  return derive_seed(cfg.task.seed, {0x657870u});
}

std::vector<Trajectory> load_or_make_experts(const ExperimentConfig& cfg, const Task& task,
                                             const fs::path& dir) {
  if (fs::exists(dir / "expert.tsv")) {
    auto in = open_in(dir / "expert.tsv");
    return read_trajectories(in);
  }
  return make_expert_dataset(task.mdp, task.train_ids, cfg.expert_count, expert_seed(cfg));
}

PolicyParams load_policy(const fs::path& path, const TokenMdp& mdp) {
  auto in = open_in(path);
  return load_policy_checkpoint(in, mdp.vocab_size());
}

RewardParams load_reward(const fs::path& path, const TokenMdp& mdp) {
  auto in = open_in(path);
  return load_reward_checkpoint(in, mdp.vocab_size());
}

void write_manifest(const fs::path& dir, const Invocation& inv, const ExperimentConfig& cfg) {
  nlohmann::ordered_json j;
  if (fs::exists(dir / "manifest.json")) {
    auto in = open_in(dir / "manifest.json");
    j = nlohmann::ordered_json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object()) j = nlohmann::ordered_json::object();
  }
  j["version"] = kVersion;
  j["config_hash"] = hex64(fnv1a(config_text(cfg)));
  j["seed"] = cfg.train.seed;
  j["task_seed"] = cfg.task.seed;
  j["commands"][inv.command] = {{"config_hash", hex64(fnv1a(config_text(cfg)))},
                                {"seed", cfg.train.seed},
                                {"status", "complete"}};
  auto out = open_out(dir / "manifest.json");
  out << j.dump(2) << '\n';
}

void write_resolved_config(const fs::path& dir, const ExperimentConfig& cfg) {
  auto out = open_out(dir / "resolved_config.ini");
  write_config(out, cfg);
}

// Prompts the initial greedy policy never solves.
std::vector<int> hard_prompts(const PolicyParams& policy, const Task& task) {
  const auto detail = pass_at_1_detail(policy, task.mdp, task.train_ids);
  std::vector<int> out;
  for (const auto& [id, v] : detail.per_prompt) {
    if (v == 0.0) out.push_back(id);
  }
  return out;
}

void cmd_gen_data(const fs::path& dir, const ExperimentConfig& cfg) {
  const auto task = make_task(cfg.task);
  const auto experts =
      make_expert_dataset(task.mdp, task.train_ids, cfg.expert_count, expert_seed(cfg));
  auto out = open_out(dir / "prompts.tsv");
  out << "prompt_id\tsplit\ttokens\n";
  auto row = [&](int id, const char* split) {
    out << id << '\t' << split << '\t';
    const auto& toks = task.mdp.prompt(id).tokens;
    for (std::size_t i = 0; i < toks.size(); ++i) out << (i ? " " : "") << toks[i];
    out << '\n';
  };
  for (int id : task.train_ids) row(id, "train");
  for (int id : task.heldout_ids) row(id, "heldout");
  auto ex = open_out(dir / "expert.tsv");
  write_trajectories(ex, experts);
  std::cout << "wrote " << experts.size() << " expert trajectories over "
            << task.train_ids.size() << " train prompts to " << dir.string() << '\n';
}

void cmd_train(const fs::path& dir, const ExperimentConfig& cfg, const Invocation& inv) {
  const auto task = make_task(cfg.task);
  const auto experts = load_or_make_experts(cfg, task, dir);
  RunOptions opt;
  opt.train_ids = task.train_ids;
  opt.heldout_ids = task.heldout_ids;
  if (!inv.from.empty()) {
    const fs::path from = inv.from;
    if (fs::exists(from / "policy.ckpt")) opt.init_policy = load_policy(from / "policy.ckpt", task.mdp);
    if (fs::exists(from / "reward.ckpt")) opt.init_reward = load_reward(from / "reward.ckpt", task.mdp);
  }
  if (cfg.eval.hard_problems) {
    const auto init = opt.init_policy
                          ? *opt.init_policy
                          : make_policy(task.mdp, cfg.train.policy_repr,
                                        ContextSpec{cfg.train.policy_context_order,
                                                    cfg.train.aligned_input},
                                        cfg.train.table_size);
    opt.train_ids = hard_prompts(init, task);
    if (opt.train_ids.empty()) fail(ErrorKind::empty_set, "no unsolved prompts for hard-problem mode");
  }
  if (cfg.train.checkpoint_interval > 0) {
    fs::create_directories(dir / "checkpoints");
    opt.on_checkpoint = [&](int it, const PolicyParams& p, const RewardParams& r) {
      char name[32];
      std::snprintf(name, sizeof name, "iter_%06d", it);
      auto po = open_out(dir / "checkpoints" / (std::string(name) + "_policy.ckpt"));
      save_checkpoint(po, p);
      auto ro = open_out(dir / "checkpoints" / (std::string(name) + "_reward.ckpt"));
      save_checkpoint(ro, r);
    };
  }
  const auto result = run_baseline(cfg.method, task.mdp, experts, cfg.train, opt);
  {
    auto po = open_out(dir / "policy.ckpt");
    save_checkpoint(po, result.policy);
    auto ro = open_out(dir / "reward.ckpt");
    save_checkpoint(ro, result.reward);
  }
  {
    auto s = open_out(dir / "summary.json");
    write_run_summary_json(s, result.metrics, to_string(cfg.method));
  }
  auto m = open_out(dir / "metrics.csv");
  write_metrics_csv(m, result.metrics);
  if (!result.metrics.iterations.empty()) {
    const auto& last = result.metrics.iterations.back();
    std::printf("trained %s for %zu iterations: pass@1 train %.4f heldout %.4f\n",
                to_string(cfg.method), result.metrics.iterations.size(), last.pass_at_1_train,
                last.pass_at_1_heldout);
  }
}

void cmd_eval(const fs::path& dir, const ExperimentConfig& cfg) {
  const auto task = make_task(cfg.task);
  const auto policy = load_policy(dir / "policy.ckpt", task.mdp);
  std::optional<RewardParams> reward;
  if (fs::exists(dir / "reward.ckpt")) reward = load_reward(dir / "reward.ckpt", task.mdp);
  const auto experts = load_or_make_experts(cfg, task, dir);
  auto report_for = [&](const std::vector<int>& ids) {
    EvalReport rep;
    rep.pass_at_1 = pass_at_1_detail(policy, task.mdp, ids, cfg.eval.greedy,
                                     derive_seed(cfg.train.seed, {0x6576u}), cfg.train.workers);
    if (reward) {
      const auto neg = random_trajectories(task.mdp, task.train_ids, cfg.eval.auc_negatives,
                                           derive_seed(cfg.train.seed, {0x6e6567u}));
      rep.prm_auc = prm_ranking_auc(*reward, task.mdp, experts, neg);
    }
    return rep;
  };
  const bool has_heldout = !task.heldout_ids.empty();
  const auto main = report_for(has_heldout ? task.heldout_ids : task.train_ids);
  if (has_heldout) {
    auto t = open_out(dir / "eval_train.json");
    write_eval_json(t, report_for(task.train_ids));
  }
  auto out = open_out(dir / "eval.json");
  write_eval_json(out, main);
  std::printf("pass@1 (%s) %.4f", has_heldout ? "heldout" : "train", main.pass_at_1.mean);
  if (main.prm_auc) std::printf(", prm auc %.4f", *main.prm_auc);
  std::printf("\n");
}

void cmd_tts(const fs::path& dir, const ExperimentConfig& cfg) {
  const auto task = make_task(cfg.task);
  const auto policy = load_policy(dir / "policy.ckpt", task.mdp);
  const auto reward = load_reward(dir / "reward.ckpt", task.mdp);
  TtsSpec spec;
  spec.n_grid = cfg.eval.tts_n_grid;
  spec.seeds = cfg.eval.tts_seeds;
  spec.base_seed = derive_seed(cfg.train.seed, {0x747473u});
  spec.temperature = cfg.eval.tts_temperature;
  spec.workers = cfg.train.workers;
  const auto& ids = task.heldout_ids.empty() ? task.train_ids : task.heldout_ids;
  const auto points = tts_curve(reward, policy, task.mdp, ids, spec);
  auto out = open_out(dir / "tts.csv");
  write_tts_csv(out, points);
  for (const auto& p : points) {
    std::printf("n=%-3d %-13s %.4f +- %.4f\n", p.n, p.selector.c_str(), p.mean, p.stderr_);
  }
}

struct Variant {
  const char* name;
  bool importance_weights;
  bool promote;
};

void cmd_ablate(const fs::path& dir, const ExperimentConfig& cfg, int seeds) {
  if (seeds < 2) fail(ErrorKind::config, "seeds: ablate needs at least 2 seeds");
  const auto task = make_task(cfg.task);
  const auto experts = load_or_make_experts(cfg, task, dir);
  const Variant variants[] = {{"full", true, true},
                              {"no_importance_weights", false, true},
                              {"no_promotion", true, false},
                              {"no_importance_weights_no_promotion", false, false}};
  RunOptions opt;
  opt.train_ids = task.train_ids;
  opt.heldout_ids = task.heldout_ids;
  auto csv = open_out(dir / "ablation.csv.tmp");
  csv << "variant,seed,pass_at_1_train,pass_at_1_heldout\n";
  nlohmann::ordered_json summary = nlohmann::ordered_json::array();
  for (const auto& v : variants) {
    std::vector<double> finals;
    for (int s = 0; s < seeds; ++s) {
      TrainConfig tc = cfg.train;
      tc.use_importance_weights = v.importance_weights;
      tc.promote_correct = v.promote;
      tc.seed = cfg.train.seed + static_cast<std::uint64_t>(s);
      const auto res = run_repirl(task.mdp, experts, tc, opt);
      const auto& last = res.metrics.iterations.back();
      char buf[96];
      std::snprintf(buf, sizeof buf, "%.17g,%.17g", last.pass_at_1_train, last.pass_at_1_heldout);
      csv << v.name << ',' << tc.seed << ',' << buf << '\n';
      finals.push_back(last.pass_at_1_train);
    }
    double mean = 0.0;
    for (double f : finals) mean += f / static_cast<double>(finals.size());
    double var = 0.0;
    for (double f : finals) var += (f - mean) * (f - mean);
    var /= static_cast<double>(finals.size() - 1);
    const double se = std::sqrt(var / static_cast<double>(finals.size()));
    summary.push_back({{"variant", v.name}, {"mean_pass_at_1", mean}, {"stderr", se}});
    std::printf("%-36s pass@1 %.4f +- %.4f\n", v.name, mean, se);
  }
  csv.close();
  auto js = open_out(dir / "ablation.json");
  js << summary.dump(2) << '\n';
  js.close();
  fs::rename(dir / "ablation.csv.tmp", dir / "ablation.csv");
}

bool cmd_oracle_check(const fs::path& dir, const ExperimentConfig& cfg) {
  const auto results = tools::run_oracle_checks(cfg.train.seed);
  std::ostringstream text;
  bool all = true;
  for (const auto& r : results) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s %s max_error=%.3e tolerance=%.0e\n",
                  r.pass ? "PASS" : "FAIL", r.name.c_str(), r.max_error, r.tolerance);
    text << buf;
    all = all && r.pass;
  }
  std::cout << text.str();
  auto out = open_out(dir / "oracle_check.txt");
  out << text.str();
  return all;
}

int run(const Invocation& inv) {
  fs::path dir = inv.out;
  ExperimentConfig cfg = load_config(inv, dir);
  if (dir.empty()) dir = resolve_out(inv, cfg);
  fs::create_directories(dir);
  const fs::path done = dir / completion_file(inv.command);
  if (fs::exists(done) && !fs::exists(dir / "FAILED") && !inv.force) {
    fail(ErrorKind::config, "run directory " + dir.string() + " already holds a completed " +
                                inv.command + " (use --force to overwrite)");
  }
  fs::remove(dir / "FAILED");
  try {
    write_resolved_config(dir, cfg);
    bool ok = true;
    if (inv.command == "gen-data") cmd_gen_data(dir, cfg);
    else if (inv.command == "train") cmd_train(dir, cfg, inv);
    else if (inv.command == "eval") cmd_eval(dir, cfg);
    else if (inv.command == "tts") cmd_tts(dir, cfg);
    else if (inv.command == "ablate") cmd_ablate(dir, cfg, inv.seeds);
    else ok = cmd_oracle_check(dir, cfg);
    write_manifest(dir, inv, cfg);
    return ok ? 0 : 1;
  } catch (const std::exception& e) {
    std::ofstream marker(dir / "FAILED");
    marker << inv.command << ": " << e.what() << '\n';
    throw;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rePIRL: inverse RL of process rewards on token-level MDPs"};
  app.require_subcommand(1);
  Invocation inv;
  const std::pair<const char*, const char*> commands[] = {
      {"gen-data", "sample the expert dataset (expert.tsv)"},
      {"train", "train policy and reward (policy.ckpt, reward.ckpt, metrics.csv)"},
      {"eval", "pass@1 and PRM ranking AUC (eval.json)"},
      {"tts", "best-of-n vs majority vote curve (tts.csv)"},
      {"ablate", "importance-weight and promotion ablations (ablation.csv)"},
      {"oracle-check", "compare estimators to exact enumeration on small MDPs"}};
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", inv.config, "key=value config file")->check(CLI::ExistingFile);
    sub->add_option("--out", inv.out, "run directory (default: $REPIRL_OUT_ROOT/<method>-<hash>)");
    sub->add_option("--seed", inv.seed, "run seed (train.seed)");
    sub->add_option("--set", inv.sets, "override key=value or section.key=value")
        ->allow_extra_args(false);
    sub->add_flag("--force", inv.force, "overwrite a completed run");
    if (std::string(name) == "train") {
      sub->add_option("--from", inv.from, "run directory with initial policy/reward checkpoints");
    }
    if (std::string(name) == "ablate") sub->add_option("--seeds", inv.seeds, "seeds per variant");
    sub->callback([&inv, name] { inv.command = name; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    return run(inv);
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.kind()) << "]: " << e.what() << '\n';
  } catch (const std::exception& e) {
    std::cerr << "error [internal]: " << e.what() << '\n';
  }
  return 2;
}
