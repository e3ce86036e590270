// Command-line front end: train, eval, hv, profile.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mobo/runner.hpp"
#include "mobo/trainer.hpp"

using namespace mobo;

namespace {

// Flags override their config keys: file first, then every flag the user set.
struct Overrides {
  std::vector<std::pair<CLI::Option*, std::pair<std::string, std::string*>>> entries;

  void bind(CLI::App* cmd, const std::string& flag, const std::string& key,
            const std::string& help, std::string* storage) {
    CLI::Option* opt = cmd->add_option(flag, *storage, help);
    entries.push_back({opt, {key, storage}});
  }
  void apply(Config& cfg) const {
    for (const auto& [opt, kv] : entries)
      if (opt->count() > 0) cfg.set(kv.first, *kv.second);
  }
};

TrainerConfig trainer_config_from(const Config& cfg) {
  TrainerConfig tc;
  tc.task = cfg;
  tc.model.n_layers = cfg.get_int("model.layers", tc.model.n_layers);
  tc.model.n_heads = cfg.get_int("model.heads", tc.model.n_heads);
  tc.model.hidden = cfg.get_int("model.hidden", tc.model.hidden);
  tc.model.dropout = cfg.get_double("model.dropout", tc.model.dropout);
  tc.model.window = cfg.get_int("model.window", tc.model.window);
  tc.model.k = cfg.get_int("task.k", tc.model.k);
  tc.gamma = cfg.get_double("train.gamma", tc.gamma);
  tc.lr = cfg.get_double("train.lr", tc.lr);
  tc.weight_decay = cfg.get_double("train.weight_decay", tc.weight_decay);
  tc.batch = cfg.get_int("train.batch", tc.batch);
  tc.r_demo = cfg.get_double("train.r_demo", tc.r_demo);
  tc.eps_greedy = cfg.get_double("train.eps_greedy", tc.eps_greedy);
  tc.target_sync_every = cfg.get_int("train.target_sync", tc.target_sync_every);
  tc.episodes = cfg.get_int("train.episodes", tc.episodes);
  tc.horizon = cfg.get_int("train.horizon", tc.horizon);
  tc.temperature = cfg.get_double("train.temperature", tc.temperature);
  tc.buffer_capacity = cfg.get_int("train.buffer", tc.buffer_capacity);
  tc.priority_alpha = cfg.get_double("train.priority_alpha", tc.priority_alpha);
  tc.checkpoint_every = cfg.get_int("train.checkpoint_every", tc.checkpoint_every);
  tc.demo_ehvi_samples = cfg.get_int("train.demo_samples", tc.demo_ehvi_samples);
  tc.max_stored_candidates = cfg.get_int("train.candidate_cap", tc.max_stored_candidates);
  tc.gp_refit_every = cfg.get_int("train.gp_refit_every", tc.gp_refit_every);
  tc.out_checkpoint = cfg.get_str("train.out", "");
  tc.log_path = cfg.get_str("train.log", "");
  return tc;
}

std::unique_ptr<Policy> make_policy(const std::string& name, const Config& cfg,
                                    std::set<std::string>& used_ids) {
  std::unique_ptr<Policy> policy;
  if (name == "random") {
    policy = std::make_unique<RandomSearchPolicy>();
  } else if (name == "ehvi") {
    policy = std::make_unique<EhviPolicy>(cfg.get_int("eval.ehvi_samples", 64));
  } else if (name == "sucb") {
    policy = std::make_unique<ScalarizedUcbPolicy>(cfg.get_double("eval.sucb_beta", 2.0));
  } else if (name.rfind("boformer:", 0) == 0) {
    // Several checkpoints may be compared side by side; number them so the
    // CSV policy column stays unambiguous.
    std::string id = "boformer";
    for (int n = 2; used_ids.count(id); ++n) id = "boformer" + std::to_string(n);
    policy = std::make_unique<SeqPolicy>(SeqQModel::load_checkpoint(name.substr(9)), id);
  } else {
    throw CLI::ValidationError(
        "--policy", "unknown policy '" + name + "' (use boformer:<ckpt>, ehvi, sucb, random)");
  }
  if (!used_ids.insert(policy->id()).second)
    throw CLI::ValidationError("--policy", "policy '" + name + "' given twice");
  return policy;
}

std::vector<std::vector<double>> read_numeric_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    bool numeric = true;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        double v = std::stod(cell, &used);
        if (used == 0) throw std::invalid_argument(cell);
        row.push_back(v);
      } catch (const std::exception&) {
        numeric = false;
        break;
      }
    }
    if (numeric && !row.empty()) rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::VectorXd parse_vector(const std::string& text) {
  std::vector<double> vals;
  std::stringstream ss(text);
  std::string cell;
  while (std::getline(ss, cell, ',')) vals.push_back(std::stod(cell));
  return Eigen::Map<Eigen::VectorXd>(vals.data(), static_cast<int>(vals.size()));
}

int run_train(const std::string& config_path, const Overrides& over, const std::string& resume,
              const std::string& transfer_from, bool onpolicy) {
  Config cfg = config_path.empty() ? Config{} : Config::from_file(config_path);
  over.apply(cfg);
  TrainerConfig tc = trainer_config_from(cfg);
  std::uint64_t seed = cfg.get_u64("train.seed", 0);

  std::vector<EpisodeLogRow> rows;
  if (!transfer_from.empty()) {
    SeqQModel source = SeqQModel::load_checkpoint(transfer_from);
    SeqQModel moved = transfer_retrain_embedding(source, tc.model.k, tc, seed, &rows);
    std::printf("transfer: %d -> %d objectives, %zu episodes\n", source.config().k, tc.model.k,
                rows.size());
  } else if (!resume.empty()) {
    std::string meta;
    SeqQModel model = SeqQModel::load_checkpoint(resume, &meta);
    int done = 0;
    if (!meta.empty()) done = nlohmann::json::parse(meta).value("episodes", 0);
    Trainer trainer(tc, seed, std::move(model), {}, done);
    rows = onpolicy ? trainer.train_onpolicy() : trainer.train();
    std::printf("resumed at episode %d, ran %zu more\n", done, rows.size());
  } else {
    Trainer trainer(tc, seed);
    rows = onpolicy ? trainer.train_onpolicy() : trainer.train();
  }
  if (!rows.empty())
    std::printf("episodes=%zu final_loss=%.17g final_hv=%.17g\n", rows.size(),
                rows.back().loss, rows.back().episode_hv);
  if (!tc.out_checkpoint.empty()) std::printf("checkpoint: %s\n", tc.out_checkpoint.c_str());
  if (!tc.log_path.empty()) std::printf("log: %s\n", tc.log_path.c_str());
  return 0;
}

int run_eval(const std::string& config_path, const Overrides& over,
             const std::vector<std::string>& policy_names, const std::string& out_dir) {
  Config cfg = config_path.empty() ? Config{} : Config::from_file(config_path);
  over.apply(cfg);
  if (policy_names.empty()) throw CLI::ValidationError("--policy", "at least one policy");

  std::vector<std::unique_ptr<Policy>> owned;
  std::vector<Policy*> policies;
  std::set<std::string> used_ids;
  for (const auto& name : policy_names) {
    owned.push_back(make_policy(name, cfg, used_ids));
    policies.push_back(owned.back().get());
  }

  RunnerOptions opt;
  opt.gp_refit_every = cfg.get_int("eval.gp_refit_every", opt.gp_refit_every);
  SuiteReport report =
      evaluate_suite(policies, cfg, cfg.get_int("eval.episodes", 20),
                     cfg.get_int("eval.horizon", 50), cfg.get_u64("eval.seed", 0), opt);

  std::filesystem::create_directories(out_dir);
  write_curves_csv(out_dir + "/curves.csv", report.records);
  write_summary_csv(out_dir + "/summary.csv", report.summary);
  write_profile_csv(out_dir + "/profile.csv", report.profiles);
  for (const auto& row : report.summary)
    std::printf("%s mean_final_hv=%.17g stderr=%.17g\n", row.policy.c_str(),
                row.mean_final_hv, row.stderr_final_hv);
  std::printf("wrote %s/{curves,summary,profile}.csv\n", out_dir.c_str());
  return 0;
}

int run_hv(const std::string& points_path, const std::string& ref_text, std::int64_t mc_samples,
           std::uint64_t seed) {
  auto rows = read_numeric_csv(points_path);
  if (rows.empty()) throw std::runtime_error("no numeric rows in " + points_path);
  const int k = static_cast<int>(rows[0].size());
  PointList points;
  for (auto& row : rows) {
    if (static_cast<int>(row.size()) != k)
      throw std::runtime_error("ragged rows in " + points_path);
    points.push_back(Eigen::Map<Eigen::VectorXd>(row.data(), k));
  }
  Point ref = ref_text.empty() ? Point(Eigen::VectorXd::Zero(k)) : parse_vector(ref_text);
  if (ref.size() != k) throw std::runtime_error("--ref dimension mismatch");

  if (mc_samples > 0) {
    Point ideal = ref;
    for (const auto& p : points) ideal = ideal.cwiseMax(p);
    HVEstimate est = hypervolume_mc(points, ref, ideal, mc_samples, seed);
    std::printf("%.17g stderr=%.17g n=%lld\n", est.value, est.stderr_,
                static_cast<long long>(est.n_samples));
  } else {
    PointList front;
    for (int i : pareto_front(points)) front.push_back(points[i]);
    std::printf("%.17g\n", hypervolume_exact(front, ref));
  }
  return 0;
}

int run_profile(const std::string& curves_path, const std::string& out_path, int tau_points) {
  std::ifstream in(curves_path);
  if (!in) throw std::runtime_error("cannot open: " + curves_path);
  std::string line;
  // header: policy,task_seed,step,hv,regret
  std::map<std::pair<std::string, std::string>, std::pair<int, std::pair<double, double>>> last;
  std::vector<std::pair<std::string, std::string>> order;
  bool first = true;
  while (std::getline(in, line)) {
    if (first) {
      first = false;
      continue;
    }
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string policy, seed, step_s, hv_s, regret_s;
    std::getline(ss, policy, ',');
    std::getline(ss, seed, ',');
    std::getline(ss, step_s, ',');
    std::getline(ss, hv_s, ',');
    std::getline(ss, regret_s, ',');
    int step = std::stoi(step_s);
    auto key = std::make_pair(policy, seed);
    auto it = last.find(key);
    if (it == last.end()) {
      order.push_back(key);
      last[key] = {step, {std::stod(hv_s), std::stod(regret_s)}};
    } else if (step > it->second.first) {
      it->second = {step, {std::stod(hv_s), std::stod(regret_s)}};
    }
  }
  if (last.empty()) throw std::runtime_error("no data rows in " + curves_path);

  std::vector<EpisodeRecord> records;
  for (const auto& key : order) {
    const auto& [step, hr] = last[key];
    EpisodeRecord rec;
    rec.policy_id = key.first;
    rec.hv_star = hr.first + hr.second;  // hv + regret at the final step
    StepRecord s;
    s.t = step;
    s.hv = hr.first;
    s.regret = hr.second;
    rec.steps.push_back(s);
    records.push_back(rec);
  }
  std::vector<double> tau(tau_points);
  for (int i = 0; i < tau_points; ++i) tau[i] = i / static_cast<double>(tau_points - 1);
  write_profile_csv(out_path, performance_profile(records, tau));
  std::printf("wrote %s\n", out_path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-objective Bayesian optimization toolkit"};
  app.require_subcommand(1);

  // train ----------------------------------------------------------------
  auto* train = app.add_subcommand("train", "Train the sequence-model acquisition policy");
  std::string tr_config, tr_resume, tr_transfer;
  bool tr_onpolicy = false;
  Overrides tr_over;
  train->add_option("--config", tr_config, "key=value config file");
  std::string tr_episodes, tr_seed, tr_out, tr_log, tr_lr, tr_gamma, tr_horizon, tr_rdemo,
      tr_suite, tr_grid, tr_k, tr_noise, tr_layers, tr_heads, tr_hidden, tr_window, tr_dropout,
      tr_batch, tr_buffer, tr_sync, tr_temp, tr_wd, tr_eps, tr_ckpt_every, tr_demo_samples,
      tr_cand_cap, tr_gp_refit, tr_alpha;
  tr_over.bind(train, "--episodes", "train.episodes", "training episodes", &tr_episodes);
  tr_over.bind(train, "--seed", "train.seed", "master seed", &tr_seed);
  tr_over.bind(train, "--out", "train.out", "checkpoint output path", &tr_out);
  tr_over.bind(train, "--log", "train.log", "episode log CSV path", &tr_log);
  tr_over.bind(train, "--lr", "train.lr", "learning rate", &tr_lr);
  tr_over.bind(train, "--gamma", "train.gamma", "discount factor", &tr_gamma);
  tr_over.bind(train, "--horizon", "train.horizon", "episode length", &tr_horizon);
  tr_over.bind(train, "--r-demo", "train.r_demo", "demo episode probability", &tr_rdemo);
  tr_over.bind(train, "--batch", "train.batch", "trajectories per update", &tr_batch);
  tr_over.bind(train, "--buffer", "train.buffer", "replay capacity", &tr_buffer);
  tr_over.bind(train, "--target-sync", "train.target_sync", "episodes between target syncs",
               &tr_sync);
  tr_over.bind(train, "--temperature", "train.temperature", "softmax temperature (<=0 greedy)",
               &tr_temp);
  tr_over.bind(train, "--weight-decay", "train.weight_decay", "decoupled weight decay", &tr_wd);
  tr_over.bind(train, "--eps-greedy", "train.eps_greedy", "uniform exploration rate", &tr_eps);
  tr_over.bind(train, "--checkpoint-every", "train.checkpoint_every",
               "periodic checkpoint interval", &tr_ckpt_every);
  tr_over.bind(train, "--demo-samples", "train.demo_samples", "demo policy MC samples",
               &tr_demo_samples);
  tr_over.bind(train, "--candidate-cap", "train.candidate_cap",
               "stored candidate rows per step", &tr_cand_cap);
  tr_over.bind(train, "--gp-refit-every", "train.gp_refit_every",
               "surrogate refit period during training (0 = generating lengthscales)",
               &tr_gp_refit);
  tr_over.bind(train, "--priority-alpha", "train.priority_alpha", "replay priority exponent",
               &tr_alpha);
  tr_over.bind(train, "--suite", "task.suite", "task family", &tr_suite);
  tr_over.bind(train, "--grid", "task.grid_n", "grid points per task", &tr_grid);
  tr_over.bind(train, "--k", "task.k", "number of objectives", &tr_k);
  tr_over.bind(train, "--noise", "task.noise_std", "observation noise", &tr_noise);
  tr_over.bind(train, "--layers", "model.layers", "attention blocks", &tr_layers);
  tr_over.bind(train, "--heads", "model.heads", "attention heads", &tr_heads);
  tr_over.bind(train, "--hidden", "model.hidden", "model width", &tr_hidden);
  tr_over.bind(train, "--window", "model.window", "history window", &tr_window);
  tr_over.bind(train, "--dropout", "model.dropout", "dropout rate", &tr_dropout);
  train->add_option("--resume", tr_resume, "resume from checkpoint");
  train->add_option("--transfer-from", tr_transfer,
                    "retrain only the embedding of this checkpoint for task.k objectives");
  train->add_flag("--onpolicy", tr_onpolicy, "per-step on-policy updates, no replay buffer");

  // eval -----------------------------------------------------------------
  auto* eval = app.add_subcommand("eval", "Evaluate acquisition policies on held-out tasks");
  std::string ev_config, ev_out_dir = ".";
  std::vector<std::string> ev_policies;
  Overrides ev_over;
  eval->add_option("--config", ev_config, "key=value config file");
  eval->add_option("--policy", ev_policies,
                   "policy spec (boformer:<ckpt>, ehvi, sucb, random); repeatable");
  eval->add_option("--out-dir", ev_out_dir, "directory for curves/summary/profile CSVs");
  std::string ev_suite, ev_episodes, ev_horizon, ev_seed, ev_grid, ev_k, ev_noise, ev_samples,
      ev_refit;
  ev_over.bind(eval, "--suite", "task.suite", "task family", &ev_suite);
  ev_over.bind(eval, "--episodes", "eval.episodes", "evaluation episodes", &ev_episodes);
  ev_over.bind(eval, "--horizon", "eval.horizon", "steps per episode", &ev_horizon);
  ev_over.bind(eval, "--seed", "eval.seed", "evaluation seed", &ev_seed);
  ev_over.bind(eval, "--grid", "task.grid_n", "grid points per task", &ev_grid);
  ev_over.bind(eval, "--k", "task.k", "number of objectives", &ev_k);
  ev_over.bind(eval, "--noise", "task.noise_std", "observation noise", &ev_noise);
  ev_over.bind(eval, "--ehvi-samples", "eval.ehvi_samples", "EHVI MC samples", &ev_samples);
  ev_over.bind(eval, "--gp-refit-every", "eval.gp_refit_every", "surrogate refit period",
               &ev_refit);

  // hv ---------------------------------------------------------------------
  auto* hv = app.add_subcommand("hv", "Hypervolume of a point set");
  std::string hv_points, hv_ref;
  std::int64_t hv_mc = 0;
  std::uint64_t hv_seed = 0;
  hv->add_option("--points", hv_points, "CSV of objective vectors (rows)")->required();
  hv->add_option("--ref", hv_ref, "reference point, comma separated (default zeros)");
  hv->add_option("--mc", hv_mc, "Monte-Carlo samples (0 = exact sweep)");
  hv->add_option("--seed", hv_seed, "Monte-Carlo seed");

  // profile ----------------------------------------------------------------
  auto* profile = app.add_subcommand("profile", "Performance profile from an eval curves CSV");
  std::string pf_curves, pf_out = "profile.csv";
  int pf_tau = 51;
  profile->add_option("--curves", pf_curves, "curves.csv from eval")->required();
  profile->add_option("--out", pf_out, "output CSV path");
  profile->add_option("--tau-points", pf_tau, "threshold grid size")->check(CLI::Range(2, 10001));

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return run_train(tr_config, tr_over, tr_resume, tr_transfer, tr_onpolicy);
    if (eval->parsed()) return run_eval(ev_config, ev_over, ev_policies, ev_out_dir);
    if (hv->parsed()) return run_hv(hv_points, hv_ref, hv_mc, hv_seed);
    if (profile->parsed()) return run_profile(pf_curves, pf_out, pf_tau);
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return 1;
  }
  return 0;
}
