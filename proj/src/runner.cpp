#include "mobo/runner.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include <boost/random/sobol.hpp>
#include <boost/random/uniform_real_distribution.hpp>

namespace mobo {

namespace {

Eigen::MatrixXd candidate_features(const MultiPosterior& post, int t, int horizon) {
  const int n = static_cast<int>(post.mean.rows());
  const int k = static_cast<int>(post.mean.cols());
  Eigen::MatrixXd feats(n, 3 * k + 1);
  feats.leftCols(k) = post.mean;
  feats.middleCols(k, k) = post.sd;
  feats.middleCols(2 * k, k) = post.best.transpose().replicate(n, 1);
  feats.col(3 * k).setConstant(static_cast<double>(t) / horizon);
  return feats;
}

double fract(double x) { return x - std::floor(x); }

}  // namespace

int RandomSearchPolicy::select(const MultiPosterior& post, const ParetoArchive&, int, int,
                               Rng& rng) {
  return random_policy(static_cast<int>(post.mean.rows()), rng);
}

int EhviPolicy::select(const MultiPosterior& post, const ParetoArchive& archive, int, int,
                       Rng& rng) {
  return ehvi_mc(post, archive, n_samples_, rng).argmax;
}

int ScalarizedUcbPolicy::select(const MultiPosterior& post, const ParetoArchive&, int, int,
                                Rng& rng) {
  Eigen::VectorXd w = draw_simplex_weights(static_cast<int>(post.mean.cols()), rng);
  return scalarized_ucb(post, w, beta_).argmax;
}

SeqPolicy::SeqPolicy(SeqQModel model, std::string id) : model_(std::move(model)),
      id_(std::move(id)) {}

std::vector<ObservationFrame> SeqPolicy::window() const {
  const int keep =
      std::min<int>(static_cast<int>(history_.size()), model_.config().window - 1);
  return {history_.end() - keep, history_.end()};
}

int SeqPolicy::select(const MultiPosterior& post, const ParetoArchive&, int t, int horizon,
                      Rng&) {
  Eigen::VectorXd q = model_.forward_candidates(window(), candidate_features(post, t, horizon));
  return argmax_lowest(q);
}

void SeqPolicy::observe(const Eigen::VectorXd& frame, double reward) {
  ObservationFrame cand;
  cand.features = frame;
  double qbar = model_.forward(window(), cand);
  history_.push_back(ObservationFrame{frame, reward, qbar});
}

EpisodeRecord run_episode(Policy& policy, const EpisodeTask& task, int horizon, Rng& policy_rng,
                          Rng& noise_rng, const RunnerOptions& opt) {
  if (horizon < 1) throw std::invalid_argument("run_episode: horizon must be >= 1");
  if (policy.k() != 0 && policy.k() != task.k)
    throw ConfigError("run_episode: policy built for " + std::to_string(policy.k()) +
                      " objectives, task has " + std::to_string(task.k));

  policy.reset();
  KernelSpec spec;
  spec.kind = opt.kernel;
  spec.signal_variance = opt.signal_variance;
  spec.noise_variance = std::max(task.noise_std * task.noise_std, 1e-8);
  std::vector<GPModel> gps;
  for (int j = 0; j < task.k; ++j) gps.emplace_back(spec, task.dim);
  ParetoArchive archive(task.reference_point);

  EpisodeRecord rec;
  rec.policy_id = policy.id();
  rec.hv_star = task.hv_star;
  rec.steps.reserve(horizon);

  for (int t = 1; t <= horizon; ++t) {
    if (opt.gp_refit_every > 0 && t > 1 && (t - 1) % opt.gp_refit_every == 0)
      for (auto& gp : gps) gp.fit_lengthscale_mll(opt.lengthscale_low, opt.lengthscale_high);

    MultiPosterior post;
    post.mean.resize(task.grid_n(), task.k);
    post.sd.resize(task.grid_n(), task.k);
    post.best.resize(task.k);
    for (int j = 0; j < task.k; ++j) {
      PosteriorSummary s = gps[j].posterior(task.grid);
      post.mean.col(j) = s.mean;
      post.sd.col(j) = s.sd;
      post.best[j] = s.best_observed;
    }

    auto t0 = std::chrono::steady_clock::now();
    int idx = policy.select(post, archive, t, horizon, policy_rng);
    std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - t0;
    if (idx < 0 || idx >= task.grid_n())
      throw std::logic_error("run_episode: policy returned an out-of-grid index");

    Eigen::VectorXd y = evaluate(task, idx, noise_rng);
    double raw = archive.push(y);
    double reward = normalized_reward(raw, task.hv_star, archive.hv());

    Eigen::VectorXd frame(3 * task.k + 1);
    frame.head(task.k) = post.mean.row(idx);
    frame.segment(task.k, task.k) = post.sd.row(idx);
    frame.segment(2 * task.k, task.k) = post.best;
    frame[3 * task.k] = static_cast<double>(t) / horizon;
    policy.observe(frame, reward);

    for (int j = 0; j < task.k; ++j) gps[j].add(task.grid.row(idx).transpose(), y[j]);

    StepRecord step;
    step.t = t;
    step.chosen = idx;
    step.y = y;
    step.hv = archive.hv();
    step.regret = simple_regret(task.hv_star, archive.hv());
    step.seconds = elapsed.count();
    rec.steps.push_back(std::move(step));
  }
  return rec;
}

EpisodeRecord run_episode(Policy& policy, const EpisodeTask& task, int horizon, Rng& rng,
                          const RunnerOptions& opt) {
  return run_episode(policy, task, horizon, rng, rng, opt);
}

Eigen::VectorXd continuous_argmax(const BatchScorer& score, const BoxDomain& box, int n_global,
                                  int m_top, int k_local, Rng& rng) {
  if (n_global < m_top || m_top < 1 || k_local < 1)
    throw std::invalid_argument("continuous_argmax: need n_global >= m_top >= 1, k_local >= 1");
  const int d = box.dim;
  Eigen::VectorXd side = box.upper - box.lower;

  // Randomly shifted Sobol sweep of the whole box.
  Eigen::VectorXd shift(d);
  for (int j = 0; j < d; ++j) shift[j] = runif(rng);
  boost::random::sobol qrng(static_cast<unsigned>(d));
  boost::random::uniform_real_distribution<double> u01(0.0, 1.0);
  auto next_unit = [&](Eigen::VectorXd& u) {
    for (int j = 0; j < d; ++j) u[j] = fract(u01(qrng) + shift[j]);
  };

  Eigen::MatrixXd global(n_global, d);
  Eigen::VectorXd u(d);
  for (int i = 0; i < n_global; ++i) {
    next_unit(u);
    global.row(i) = (box.lower.array() + u.array() * side.array()).transpose();
  }
  Eigen::VectorXd gscore = score(global);

  int best_idx = argmax_lowest(gscore);
  double best_val = gscore[best_idx];
  Eigen::VectorXd best_point = global.row(best_idx).transpose();

  std::vector<int> order(n_global);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return gscore[a] > gscore[b]; });

  for (int m = 0; m < m_top; ++m) {
    Eigen::VectorXd center = global.row(order[m]).transpose();
    // Local box: 10% of the domain side, clipped to the domain.
    Eigen::VectorXd lo = (center - 0.05 * side).cwiseMax(box.lower);
    Eigen::VectorXd hi = (center + 0.05 * side).cwiseMin(box.upper);
    Eigen::MatrixXd local(k_local, d);
    local.row(0) = center.transpose();  // k_local = 1 degenerates to the center
    for (int i = 1; i < k_local; ++i) {
      next_unit(u);
      local.row(i) = (lo.array() + u.array() * (hi - lo).array()).transpose();
    }
    Eigen::VectorXd lscore = score(local);
    for (int i = 0; i < k_local; ++i) {
      if (lscore[i] > best_val) {
        best_val = lscore[i];
        best_point = local.row(i).transpose();
      }
    }
  }
  return best_point;
}

std::vector<double> default_tau_grid() {
  std::vector<double> tau(51);
  for (int i = 0; i <= 50; ++i) tau[i] = i / 50.0;
  return tau;
}

SuiteReport evaluate_suite(const std::vector<Policy*>& policies, const Config& task_cfg,
                           int episodes, int horizon, std::uint64_t seed,
                           const RunnerOptions& opt) {
  if (policies.empty()) throw std::invalid_argument("evaluate_suite: no policies");
  if (episodes < 1 || horizon < 1)
    throw std::invalid_argument("evaluate_suite: episodes and horizon must be >= 1");

  const int n_pol = static_cast<int>(policies.size());
  std::vector<std::vector<EpisodeRecord>> per_policy(n_pol);
  for (int e = 0; e < episodes; ++e) {
    std::uint64_t task_seed = derive_seed(seed, static_cast<std::uint64_t>(e));
    EpisodeTask task = make_task_from_config(task_cfg, task_seed);
    for (int p = 0; p < n_pol; ++p) {
      // One noise stream per episode, identical across policies; policy
      // randomness lives on its own stream so pairing survives any number of
      // internal draws.
      Rng noise_rng(derive_seed(task_seed, 1));
      Rng policy_rng(derive_seed(task_seed, 1000 + static_cast<std::uint64_t>(p)));
      EpisodeRecord rec = run_episode(*policies[p], task, horizon, policy_rng, noise_rng, opt);
      rec.task_seed = task_seed;
      per_policy[p].push_back(std::move(rec));
    }
  }

  SuiteReport report;
  for (int p = 0; p < n_pol; ++p) {
    std::vector<double> curve(horizon, 0.0);
    double mean = 0.0;
    for (const auto& rec : per_policy[p]) {
      mean += rec.final_hv() / episodes;
      for (int t = 0; t < horizon; ++t) curve[t] += rec.steps[t].hv / episodes;
    }
    double var = 0.0;
    for (const auto& rec : per_policy[p]) {
      double d = rec.final_hv() - mean;
      var += d * d;
    }
    double stderr_hv = episodes > 1 ? std::sqrt(var / (episodes - 1) / episodes) : 0.0;
    report.summary.push_back(SuiteSummaryRow{policies[p]->id(), mean, stderr_hv});
    report.mean_curves.push_back(std::move(curve));
    for (auto& rec : per_policy[p]) report.records.push_back(std::move(rec));
  }
  report.profiles = performance_profile(report.records, default_tau_grid());
  return report;
}

std::vector<ProfileCurve> performance_profile(const std::vector<EpisodeRecord>& records,
                                              const std::vector<double>& tau_grid) {
  if (records.empty()) throw std::invalid_argument("performance_profile: no records");
  if (!std::is_sorted(tau_grid.begin(), tau_grid.end()))
    throw std::invalid_argument("performance_profile: tau grid must be sorted ascending");

  std::vector<std::string> ids;
  for (const auto& rec : records)
    if (std::find(ids.begin(), ids.end(), rec.policy_id) == ids.end())
      ids.push_back(rec.policy_id);

  std::vector<ProfileCurve> curves;
  for (const auto& id : ids) {
    ProfileCurve curve;
    curve.policy = id;
    curve.tau = tau_grid;
    curve.fraction.assign(tau_grid.size(), 0.0);
    int count = 0;
    for (const auto& rec : records) {
      if (rec.policy_id != id) continue;
      ++count;
      double ratio = rec.hv_star > 0.0 ? rec.final_hv() / rec.hv_star : 1.0;
      for (std::size_t j = 0; j < tau_grid.size(); ++j)
        if (ratio >= tau_grid[j]) curve.fraction[j] += 1.0;
    }
    for (auto& f : curve.fraction) f /= count;
    curves.push_back(std::move(curve));
  }
  return curves;
}

namespace {

FILE* open_csv(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "w");
  if (f == nullptr) throw std::runtime_error("cannot open for writing: " + path);
  return f;
}

}  // namespace

void write_curves_csv(const std::string& path, const std::vector<EpisodeRecord>& records) {
  FILE* f = open_csv(path);
  std::fprintf(f, "policy,task_seed,step,hv,regret\n");
  for (const auto& rec : records)
    for (const auto& s : rec.steps)
      std::fprintf(f, "%s,%llu,%d,%.17g,%.17g\n", rec.policy_id.c_str(),
                   static_cast<unsigned long long>(rec.task_seed), s.t, s.hv, s.regret);
  std::fclose(f);
}

void write_summary_csv(const std::string& path, const std::vector<SuiteSummaryRow>& summary) {
  FILE* f = open_csv(path);
  std::fprintf(f, "policy,mean_final_hv,stderr\n");
  for (const auto& row : summary)
    std::fprintf(f, "%s,%.17g,%.17g\n", row.policy.c_str(), row.mean_final_hv,
                 row.stderr_final_hv);
  std::fclose(f);
}

void write_profile_csv(const std::string& path, const std::vector<ProfileCurve>& profiles) {
  FILE* f = open_csv(path);
  std::fprintf(f, "policy,tau,fraction\n");
  for (const auto& curve : profiles)
    for (std::size_t j = 0; j < curve.tau.size(); ++j)
      std::fprintf(f, "%s,%.17g,%.17g\n", curve.policy.c_str(), curve.tau[j],
                   curve.fraction[j]);
  std::fclose(f);
}

IdentifiabilityPair make_identifiability_pair() {
  IdentifiabilityPair out;
  const int k = 2;

  // Shared 5-point grid in objective space.  Point 4 dominates everything, so
  // once it is in the archive nothing else can improve; points 0 and 1 bank
  // the two flanks instead, leaving point 3 a real improvement.
  Eigen::MatrixXd v(5, k);
  v << 0.9, 0.1,
       0.1, 0.9,
       0.3, 0.3,
       0.55, 0.55,
       0.9, 0.9;
  out.values = v;
  Point ref = Eigen::VectorXd::Zero(k);

  PointList pts;
  for (int i = 0; i < v.rows(); ++i) pts.push_back(v.row(i).transpose());
  PointList front;
  for (int i : pareto_front(pts)) front.push_back(pts[i]);
  out.hv_star = hypervolume_exact(front, ref);

  // Constructed posterior-feature tables.  Step 1 is the shared flat prior;
  // step 3's table is byte-identical across scenarios (same means and sds,
  // and both scenarios have seen per-objective maxima of 0.9) even though the
  // archives differ -- which is the whole point of the fixture.
  auto prior_row = [&] {
    Eigen::VectorXd f(3 * k + 1);
    f << 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0 / 3.0;
    return f;
  }();

  auto table = [&](const Eigen::MatrixXd& mu, double sd, const Eigen::VectorXd& best,
                   double phase) {
    Eigen::MatrixXd tbl(v.rows(), 3 * k + 1);
    tbl.leftCols(k) = mu;
    tbl.middleCols(k, k).setConstant(sd);
    tbl.middleCols(2 * k, k) = best.transpose().replicate(v.rows(), 1);
    tbl.col(3 * k).setConstant(phase);
    return tbl;
  };

  // After one observation the means are pulled part way toward truth around
  // the observed point; by step 3 both posteriors have settled on the values.
  Eigen::MatrixXd mu_a2(5, k), mu_b2(5, k);
  mu_a2 << 0.88, 0.12, 0.2, 0.2, 0.25, 0.2, 0.4, 0.3, 0.6, 0.35;
  mu_b2 << 0.5, 0.5, 0.2, 0.5, 0.3, 0.4, 0.5, 0.55, 0.88, 0.88;
  Eigen::VectorXd best_a2(k), best_b2(k), best_3(k);
  best_a2 << 0.9, 0.1;
  best_b2 << 0.9, 0.9;
  best_3 << 0.9, 0.9;

  Eigen::MatrixXd cands_a2 = table(mu_a2, 0.35, best_a2, 2.0 / 3.0);
  Eigen::MatrixXd cands_b2 = table(mu_b2, 0.35, best_b2, 2.0 / 3.0);
  Eigen::MatrixXd cands_3 = table(v, 0.05, best_3, 1.0);

  auto build = [&](const std::vector<int>& chosen, const Eigen::MatrixXd& cands2,
                   std::uint64_t seed) {
    Trajectory traj;
    traj.task_seed = seed;
    ParetoArchive archive(ref);
    const std::vector<const Eigen::MatrixXd*> tables = {nullptr, &cands2, &cands_3};
    for (int t = 0; t < 3; ++t) {
      int idx = chosen[t];
      double raw = archive.push(v.row(idx).transpose());
      double reward = normalized_reward(raw, out.hv_star, archive.hv());
      traj.chosen.push_back(idx);
      traj.frames.push_back(t == 0 ? prior_row : tables[t]->row(idx).transpose());
      traj.rewards.push_back(reward);
      traj.hv_curve.push_back(archive.hv());
      if (t >= 1) traj.candidates.push_back(*tables[t]);
    }
    return traj;
  };

  out.a = build({0, 1, 3}, cands_a2, 0);
  out.b = build({4, 2, 3}, cands_b2, 1);
  out.delta = std::abs(out.a.rewards.back() - out.b.rewards.back());
  return out;
}

}  // namespace mobo
