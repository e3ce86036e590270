// End-to-end acceptance checks.  Each test case prints exactly one verdict
// line "[criterion N] <name>: PASS|FAIL"; the ctest registrations match on
// that line, so a criterion passes only if its verdict says so.

#include <doctest.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mobo/runner.hpp"
#include "mobo/trainer.hpp"
#include "oracles.hpp"

using namespace mobo;

namespace {

double seconds_since(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void verdict(int n, const char* name, bool pass) {
  std::printf("[criterion %d] %s: %s\n", n, name, pass ? "PASS" : "FAIL");
  std::fflush(stdout);
  REQUIRE(pass);
}

// ---- shared desk-scale configuration -------------------------------------

Config task_config(int k, int grid_n, double noise) {
  Config c;
  c.set("task.suite", "rbf-gp");
  c.set("task.grid_n", std::to_string(grid_n));
  c.set("task.noise_std", std::to_string(noise));
  c.set("task.k", std::to_string(k));
  c.set("task.kappa_max", "0");
  c.set("task.lengthscale_low", "0.1");
  c.set("task.lengthscale_high", "0.4");
  return c;
}

TrainerConfig desk_trainer(int k) {
  TrainerConfig tc;
  tc.model.n_layers = 2;
  tc.model.n_heads = 4;
  tc.model.hidden = 32;
  tc.model.dropout = 0.1;
  tc.model.window = 16;
  tc.model.k = k;
  tc.task = task_config(k, 256, 0.05);
  tc.gamma = 0.95;
  tc.lr = 1e-3;
  tc.weight_decay = 1e-5;
  tc.batch = 8;
  tc.r_demo = 0.25;
  tc.eps_greedy = 0.1;
  tc.target_sync_every = 5;
  tc.episodes = 300;
  tc.horizon = 50;
  tc.temperature = 1.0;
  tc.buffer_capacity = 64;
  tc.priority_alpha = 0.6;
  tc.checkpoint_every = 100;
  tc.demo_ehvi_samples = 64;
  tc.max_stored_candidates = 256;
  tc.gp_refit_every = 5;  // surrogate features then match the deployment runner's
  return tc;
}

const char* kK2Checkpoint = "acceptance_k2.bin";

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int sh(const std::string& cmd) { return std::system(cmd.c_str()); }

}  // namespace

TEST_CASE("criterion 1: hypervolume oracle equivalence") {
  auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(20260816);
  bool pass = true;
  int checked = 0;
  double worst_ratio = 0.0;
  for (int k : {2, 3}) {
    for (int rep = 0; rep < 20; ++rep) {
      std::vector<Eigen::VectorXd> front = oracles::random_front(k, 30, rng);
      PointList pts(front.begin(), front.end());
      Point ref = Eigen::VectorXd::Zero(k);
      Point ideal = ref;
      for (const auto& p : pts) ideal = ideal.cwiseMax(p);
      double exact = hypervolume_exact(pts, ref);
      HVEstimate mc = hypervolume_mc(pts, ref, ideal, 1000000, 1000 + rep + 100 * k);
      double tol = std::max(3.0 * mc.stderr_, 0.01 * exact);
      double err = std::abs(exact - mc.value);
      worst_ratio = std::max(worst_ratio, tol > 0 ? err / tol : 0.0);
      if (err > tol) pass = false;
      ++checked;
    }
  }
  double elapsed = seconds_since(t0);
  std::printf("  %d fronts checked, worst |exact-mc|/tol = %.3f, %.1f s\n", checked,
              worst_ratio, elapsed);
  if (elapsed >= 60.0) pass = false;
  verdict(1, "hypervolume oracle equivalence", pass);
}

TEST_CASE("criterion 2: gp posterior oracle equivalence") {
  auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 seeder(77);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double ell = 0.25, s2 = 1.3, noise = 0.01;
  auto rbf = [&](const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    return s2 * std::exp(-(a - b).squaredNorm() / (2.0 * ell * ell));
  };

  bool pass = true;
  double worst_rel = 0.0, worst_interp = 0.0;
  for (int n = 1; n <= 20; ++n) {
    Eigen::MatrixXd x(n, 2);
    Eigen::VectorXd y(n);
    for (int i = 0; i < n; ++i) {
      x(i, 0) = u01(seeder);
      x(i, 1) = u01(seeder);
      y[i] = std::sin(3 * x(i, 0)) + 0.5 * std::cos(5 * x(i, 1)) + 0.1 * u01(seeder);
    }
    Eigen::MatrixXd q(16, 2);
    for (int i = 0; i < 16; ++i) {
      q(i, 0) = u01(seeder);
      q(i, 1) = u01(seeder);
    }

    KernelSpec spec;
    spec.kind = KernelSpec::Kind::kRbf;
    spec.lengthscale = ell;
    spec.signal_variance = s2;
    spec.noise_variance = noise;
    GPModel gp(spec, 2);
    for (int i = 0; i < n; ++i) gp.add(x.row(i).transpose(), y[i]);
    PosteriorSummary got = gp.posterior(q);

    Eigen::MatrixXd gram(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        gram(i, j) = rbf(x.row(i).transpose(), x.row(j).transpose()) + (i == j ? noise : 0.0);
    Eigen::MatrixXd cross(16, n);
    for (int i = 0; i < 16; ++i)
      for (int j = 0; j < n; ++j)
        cross(i, j) = rbf(q.row(i).transpose(), x.row(j).transpose());
    auto oracle =
        oracles::gp_posterior_dense(gram, cross, Eigen::VectorXd::Constant(16, s2), y);
    for (int i = 0; i < 16; ++i) {
      double rm = std::abs(got.mean[i] - oracle.mean[i]) / std::max(1.0, std::abs(oracle.mean[i]));
      double os = std::sqrt(std::max(oracle.var[i], 0.0));
      double rs = std::abs(got.sd[i] - os) / std::max(1.0, os);
      worst_rel = std::max({worst_rel, rm, rs});
    }

    // Noiseless interpolation at the observed inputs.
    KernelSpec clean = spec;
    clean.noise_variance = 0.0;
    GPModel interp(clean, 2);
    for (int i = 0; i < n; ++i) interp.add(x.row(i).transpose(), y[i]);
    PosteriorSummary at_obs = interp.posterior(x);
    for (int i = 0; i < n; ++i)
      worst_interp = std::max(worst_interp, std::abs(at_obs.mean[i] - y[i]));
  }
  double elapsed = seconds_since(t0);
  std::printf("  worst posterior rel err %.3e, worst interpolation err %.3e, %.1f s\n",
              worst_rel, worst_interp, elapsed);
  if (worst_rel > 1e-8 || worst_interp > 1e-6 || elapsed >= 10.0) pass = false;
  verdict(2, "gp posterior oracle equivalence", pass);
}

TEST_CASE("criterion 3: full finite-difference gradient check") {
  auto t0 = std::chrono::steady_clock::now();
  ModelConfig mc;
  mc.n_layers = 2;
  mc.n_heads = 2;
  mc.hidden = 16;
  mc.dropout = 0.0;
  mc.window = 8;
  mc.k = 2;
  SeqQModel model(mc);
  Rng rng(314159);
  model.init_params(rng);
  auto& head = model.params().at("head.w");
  for (int i = 0; i < head.rows(); ++i) head(i, 0) = rnorm(rng, 0.0, 0.3);

  const int f = mc.feature_dim();
  auto rand_frame = [&](double reward) {
    ObservationFrame fr;
    fr.features = Eigen::VectorXd::NullaryExpr(f, [&] { return runif(rng); });
    fr.reward = reward;
    fr.target_q = runif(rng);
    return fr;
  };
  std::vector<SeqQModel::BatchItem> batch(2);
  batch[0].candidate = rand_frame(0.0);
  batch[0].td_target = 0.3;
  batch[1].history = {rand_frame(0.2), rand_frame(0.7), rand_frame(0.1)};
  batch[1].candidate = rand_frame(0.0);
  batch[1].td_target = 0.7;

  auto loss_fn = [&]() {
    double total = 0.0;
    for (const auto& item : batch) {
      double r = model.forward(item.history, item.candidate) - item.td_target;
      total += r * r;
    }
    return total;
  };

  ParameterStore grads;
  model.backward(batch, grads, SeqQModel::Reduction::kSum);

  bool pass = true;
  long n_params = 0;
  double worst_rel = 0.0;
  const double h = 1e-5;
  for (const auto& name : model.params().names()) {
    Eigen::MatrixXd& p = model.params().at(name);
    const Eigen::MatrixXd& g = grads.at(name);
    for (int i = 0; i < p.rows(); ++i) {
      for (int j = 0; j < p.cols(); ++j) {
        double keep = p(i, j);
        p(i, j) = keep + h;
        double up = loss_fn();
        p(i, j) = keep - h;
        double down = loss_fn();
        p(i, j) = keep;
        double fd = (up - down) / (2.0 * h);
        double diff = std::abs(fd - g(i, j));
        ++n_params;
        if (diff <= 1e-6) continue;  // near-zero gradients: absolute threshold
        double rel = diff / std::max(std::abs(fd), std::abs(g(i, j)));
        worst_rel = std::max(worst_rel, rel);
        if (rel > 1e-4) pass = false;
      }
    }
  }
  double elapsed = seconds_since(t0);
  std::printf("  %ld parameters, worst relative deviation %.3e, %.1f s\n", n_params, worst_rel,
              elapsed);
  if (elapsed >= 300.0) pass = false;
  verdict(3, "full finite-difference gradient check", pass);
}

TEST_CASE("criterion 4: lookback identifiability separation") {
  auto t0 = std::chrono::steady_clock::now();
  IdentifiabilityPair pair = make_identifiability_pair();
  REQUIRE(pair.delta >= 0.1);
  REQUIRE((pair.a.frames[2].array() == pair.b.frames[2].array()).all());

  auto fit = [&](int window) {
    ModelConfig mc;
    mc.n_layers = 2;
    mc.n_heads = 2;
    mc.hidden = 16;
    mc.dropout = 0.0;
    mc.window = window;
    mc.k = 2;
    SeqQModel model(mc);
    Rng rng(424242);
    model.init_params(rng);

    auto item_of = [&](const Trajectory& traj) {
      SeqQModel::BatchItem item;
      std::vector<ObservationFrame> aug;
      for (int t = 0; t < 2; ++t)
        aug.push_back(ObservationFrame{traj.frames[t], traj.rewards[t], 0.0});
      const int keep = std::min<int>(2, window - 1);
      item.history.assign(aug.end() - keep, aug.end());
      item.candidate.features = traj.frames[2];
      item.td_target = traj.rewards[2];
      return item;
    };
    std::vector<SeqQModel::BatchItem> batch = {item_of(pair.a), item_of(pair.b)};

    AdamState adam(model.params());
    double loss = 0.0;
    for (int s = 0; s < 500; ++s) {
      ParameterStore grads;
      loss = model.backward(batch, grads, SeqQModel::Reduction::kSum);
      adam.step(model.params(), grads, 3e-3, 0.0);
    }
    return loss;
  };

  double floor_bound = pair.delta * pair.delta / 2.0;
  double reach_bound = pair.delta * pair.delta / 50.0;
  double w1 = fit(1);
  double w8 = fit(8);
  double elapsed = seconds_since(t0);
  std::printf("  delta=%.6f  window-1 loss %.6f (floor %.6f)  window-8 loss %.6f (goal %.6f), %.1f s\n",
              pair.delta, w1, floor_bound, w8, reach_bound, elapsed);
  bool pass = w1 >= floor_bound * (1.0 - 1e-12) && w8 <= reach_bound && elapsed < 600.0;
  verdict(4, "lookback identifiability separation", pass);
}

TEST_CASE("criterion 5: reward telescoping and caps") {
  bool pass = true;
  double worst_gap = 0.0;
  for (int e = 0; e < 100; ++e) {
    int k = (e % 2 == 0) ? 2 : 3;
    Config cfg = task_config(k, 64, 0.1);
    cfg.set("task.kappa_max", "0.1");
    EpisodeTask task = make_task_from_config(cfg, 50000 + e);
    Rng rng(60000 + e);
    ParetoArchive archive(task.reference_point);
    double sum_raw = 0.0;
    for (int t = 0; t < 12; ++t) {
      int idx = rint(rng, task.grid_n());
      double raw = archive.push(evaluate(task, idx, rng));
      sum_raw += raw;
      double reward = normalized_reward(raw, task.hv_star, archive.hv());
      if (!std::isfinite(reward) || reward < 0.0 || reward > 100.0) pass = false;
    }
    worst_gap = std::max(worst_gap, std::abs(sum_raw - archive.hv()));
  }
  std::printf("  worst |sum(raw) - final hv| over 100 episodes = %.3e\n", worst_gap);
  if (worst_gap > 1e-9) pass = false;
  verdict(5, "reward telescoping and caps", pass);
}

TEST_CASE("criterion 6: desk-scale training efficacy") {
  auto t0 = std::chrono::steady_clock::now();
  TrainerConfig tc = desk_trainer(2);
  tc.out_checkpoint = kK2Checkpoint;
  Trainer trainer(tc, 7);
  std::vector<EpisodeLogRow> rows = trainer.train();
  REQUIRE(rows.size() == 300);
  double train_time = seconds_since(t0);

  SeqPolicy learned(SeqQModel::load_checkpoint(kK2Checkpoint));
  RandomSearchPolicy random;
  EhviPolicy ehvi(64);
  SuiteReport report = evaluate_suite({&learned, &random, &ehvi}, task_config(2, 256, 0.05), 50,
                                      50, 777001);
  double bo = report.summary[0].mean_final_hv;
  double rnd = report.summary[1].mean_final_hv;
  double demo = report.summary[2].mean_final_hv;
  double elapsed = seconds_since(t0);
  std::printf("  mean final hv: learned %.4f  random %.4f  demo %.4f  (train %.0f s, total %.0f s)\n",
              bo, rnd, demo, train_time, elapsed);
  std::printf("  needs: learned - random >= 0.05 (got %.4f) and learned >= 0.9*demo (got %.4f vs %.4f)\n",
              bo - rnd, bo, 0.9 * demo);
  bool pass = (bo >= rnd + 0.05) && (bo >= 0.9 * demo);
  verdict(6, "desk-scale training efficacy", pass);
}

TEST_CASE("criterion 7: rule-based baseline ordering") {
  auto t0 = std::chrono::steady_clock::now();
  EhviPolicy ehvi(64);
  ScalarizedUcbPolicy sucb(2.0);
  RandomSearchPolicy random;
  SuiteReport report =
      evaluate_suite({&ehvi, &sucb, &random}, task_config(2, 256, 0.05), 20, 50, 31415);
  double e = report.summary[0].mean_final_hv;
  double s = report.summary[1].mean_final_hv;
  double r = report.summary[2].mean_final_hv;
  double elapsed = seconds_since(t0);
  std::printf("  mean final hv: ehvi %.4f  sucb %.4f  random %.4f  (%.0f s)\n", e, s, r, elapsed);
  if (e - s < 0.01) std::printf("  FLAG: ehvi-sucb gap %.4f below 0.01, inspect\n", e - s);
  if (s - r < 0.01) std::printf("  FLAG: sucb-random gap %.4f below 0.01, inspect\n", s - r);
  bool pass = (e >= s) && (s >= r) && elapsed < 900.0;
  verdict(7, "rule-based baseline ordering", pass);
}

TEST_CASE("criterion 8: bit-identical reruns through the command line") {
  const std::string cli = MOBO_CLI_PATH;
  const std::string dir = "acceptance_cli_tmp";
  sh("rm -rf " + dir);
  sh("mkdir -p " + dir);

  const std::string train_flags =
      " train --suite rbf-gp --grid 32 --k 2 --noise 0.05 --episodes 5 --horizon 10"
      " --layers 2 --heads 2 --hidden 16 --window 8 --lr 1e-3 --seed 7";
  bool pass = true;
  if (sh(cli + train_flags + " --log " + dir + "/t1.csv > " + dir + "/t1.out"))
    pass = false;
  if (sh(cli + train_flags + " --log " + dir + "/t2.csv > " + dir + "/t2.out"))
    pass = false;
  if (read_file(dir + "/t1.csv") != read_file(dir + "/t2.csv")) pass = false;
  if (read_file(dir + "/t1.csv").empty()) pass = false;

  const std::string eval_flags =
      " eval --policy ehvi --policy random --suite rbf-gp --grid 32 --k 2 --noise 0.1"
      " --episodes 3 --horizon 8 --seed 7 --ehvi-samples 32";
  if (sh(cli + eval_flags + " --out-dir " + dir + "/e1 > /dev/null"))
    pass = false;
  if (sh(cli + eval_flags + " --out-dir " + dir + "/e2 > /dev/null"))
    pass = false;
  for (const char* f : {"curves.csv", "summary.csv", "profile.csv"}) {
    std::string a = read_file(dir + "/e1/" + f);
    if (a.empty() || a != read_file(dir + "/e2/" + f)) pass = false;
  }
  std::printf("  train logs and eval CSVs compared byte-for-byte\n");
  sh("rm -rf " + dir);
  verdict(8, "bit-identical reruns through the command line", pass);
}

TEST_CASE("criterion 9: embedding-only transfer to three objectives") {
  auto t0 = std::chrono::steady_clock::now();
  std::ifstream probe(kK2Checkpoint);
  REQUIRE_MESSAGE(probe.good(), "criterion 6 must run first to produce the source checkpoint");
  probe.close();
  SeqQModel source = SeqQModel::load_checkpoint(kK2Checkpoint);

  TrainerConfig transfer_cfg = desk_trainer(3);
  transfer_cfg.episodes = 100;
  // With the backbone frozen, the whole TD error lands on ~300 embedding
  // parameters, so the fine-tuning step scale must shrink accordingly.
  transfer_cfg.lr = 1e-5;
  SeqQModel moved = transfer_retrain_embedding(source, 3, transfer_cfg, 8);
  double transfer_time = seconds_since(t0);

  TrainerConfig scratch_cfg = desk_trainer(3);
  Trainer scratch(scratch_cfg, 9);
  scratch.train();
  double scratch_time = seconds_since(t0) - transfer_time;

  SeqPolicy transfer_policy(moved, "transfer");
  SeqPolicy scratch_policy(scratch.policy(), "scratch");
  SuiteReport report = evaluate_suite({&transfer_policy, &scratch_policy},
                                      task_config(3, 256, 0.05), 20, 50, 888001);
  double t = report.summary[0].mean_final_hv;
  double s = report.summary[1].mean_final_hv;
  double elapsed = seconds_since(t0);
  std::printf("  mean final hv: transfer(100 ep) %.4f  scratch(300 ep) %.4f  (transfer %.0f s, scratch %.0f s, total %.0f s)\n",
              t, s, transfer_time, scratch_time, elapsed);
  std::printf("  needs: transfer >= 0.9*scratch (got %.4f vs %.4f)\n", t, 0.9 * s);
  bool pass = t >= 0.9 * s;
  verdict(9, "embedding-only transfer to three objectives", pass);
}
