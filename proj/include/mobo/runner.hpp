#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mobo/acquisition.hpp"
#include "mobo/config.hpp"
#include "mobo/objectives.hpp"
#include "mobo/pareto.hpp"
#include "mobo/qmodel.hpp"
#include "mobo/rng.hpp"
#include "mobo/trainer.hpp"

namespace mobo {

// One acquisition step of a deployment episode.
struct StepRecord {
  int t = 0;
  int chosen = 0;
  Eigen::VectorXd y;       // observed (noisy) objective vector
  double hv = 0.0;         // archive hypervolume after the push
  double regret = 0.0;     // hv_star - hv, clipped at 0
  double seconds = 0.0;    // wall clock spent selecting the point
};

struct EpisodeRecord {
  std::string policy_id;
  std::uint64_t task_seed = 0;
  double hv_star = 0.0;
  std::vector<StepRecord> steps;

  double final_hv() const { return steps.empty() ? 0.0 : steps.back().hv; }
};

// An acquisition policy drives one episode at a time: reset() at the start,
// then alternating select() / observe() calls.
class Policy {
 public:
  virtual ~Policy() = default;

  virtual std::string id() const = 0;
  // Number of objectives the policy is bound to; 0 means any.
  virtual int k() const { return 0; }
  virtual void reset() {}
  virtual int select(const MultiPosterior& post, const ParetoArchive& archive, int t, int horizon,
                     Rng& rng) = 0;
  // Called once the chosen point has been evaluated.  `frame` holds the
  // chosen candidate's posterior features at selection time.
  virtual void observe(const Eigen::VectorXd& frame, double reward) {}
};

class RandomSearchPolicy : public Policy {
 public:
  std::string id() const override { return "random"; }
  int select(const MultiPosterior& post, const ParetoArchive& archive, int t, int horizon,
             Rng& rng) override;
};

class EhviPolicy : public Policy {
 public:
  explicit EhviPolicy(int n_samples = 128) : n_samples_(n_samples) {}
  std::string id() const override { return "ehvi"; }
  int select(const MultiPosterior& post, const ParetoArchive& archive, int t, int horizon,
             Rng& rng) override;

 private:
  int n_samples_;
};

// Scalarized UCB with a fresh simplex weight draw each step.
class ScalarizedUcbPolicy : public Policy {
 public:
  explicit ScalarizedUcbPolicy(double beta = 2.0) : beta_(beta) {}
  std::string id() const override { return "sucb"; }
  int select(const MultiPosterior& post, const ParetoArchive& archive, int t, int horizon,
             Rng& rng) override;

 private:
  double beta_;
};

// Sequence-model Q policy.  Keeps its own reward/value-augmented history; the
// same loaded network scores candidates and produces the value tokens.
class SeqPolicy : public Policy {
 public:
  explicit SeqPolicy(SeqQModel model, std::string id = "boformer");

  std::string id() const override { return id_; }
  int k() const override { return model_.config().k; }
  void reset() override { history_.clear(); }
  int select(const MultiPosterior& post, const ParetoArchive& archive, int t, int horizon,
             Rng& rng) override;
  void observe(const Eigen::VectorXd& frame, double reward) override;

  // State inspection / restore (diagnostics, mid-episode checkpointing).
  const std::vector<ObservationFrame>& history() const { return history_; }
  void set_history(std::vector<ObservationFrame> h) { history_ = std::move(h); }
  const SeqQModel& model() const { return model_; }

 private:
  std::vector<ObservationFrame> window() const;

  SeqQModel model_;
  std::string id_;
  std::vector<ObservationFrame> history_;
};

struct RunnerOptions {
  // Deployment surrogate: Matern-5/2 with an online marginal-likelihood
  // lengthscale refit every gp_refit_every steps (0 disables refitting).
  KernelSpec::Kind kernel = KernelSpec::Kind::kMatern52;
  int gp_refit_every = 5;
  double lengthscale_low = 0.05;
  double lengthscale_high = 2.0;
  double signal_variance = 1.0;
};

// One evaluation episode: posterior -> select -> evaluate -> archive push,
// recording hypervolume and regret after every step.  The two-stream form
// keeps observation noise paired across policies regardless of how many
// random draws each policy consumes.
EpisodeRecord run_episode(Policy& policy, const EpisodeTask& task, int horizon, Rng& policy_rng,
                          Rng& noise_rng, const RunnerOptions& opt = {});
EpisodeRecord run_episode(Policy& policy, const EpisodeTask& task, int horizon, Rng& rng,
                          const RunnerOptions& opt = {});

// Scores a batch of points (rows) under some acquisition value.
using BatchScorer = std::function<Eigen::VectorXd(const Eigen::MatrixXd&)>;

// Continuous-domain acquisition argmax: a randomly shifted Sobol sweep of the
// box, then k_local-point local Sobol grids (10% of the domain side, clipped)
// around the m_top best global points.  Each local grid includes its center,
// so m_top = n_global with k_local = 1 reduces to plain grid argmax.
Eigen::VectorXd continuous_argmax(const BatchScorer& score, const BoxDomain& box, int n_global,
                                  int m_top, int k_local, Rng& rng);

struct SuiteSummaryRow {
  std::string policy;
  double mean_final_hv = 0.0;
  double stderr_final_hv = 0.0;
};

// Fraction of episodes whose normalized final hypervolume reaches each
// threshold; non-increasing in tau by construction.
struct ProfileCurve {
  std::string policy;
  std::vector<double> tau;
  std::vector<double> fraction;
};

struct SuiteReport {
  std::vector<EpisodeRecord> records;
  std::vector<SuiteSummaryRow> summary;
  std::vector<ProfileCurve> profiles;
  // Per policy, mean archive hypervolume after each step (length = horizon).
  std::vector<std::vector<double>> mean_curves;
};

std::vector<double> default_tau_grid();

// Paired-seed evaluation: episode e draws task seed derive_seed(seed, e); all
// policies face the same task instance and identical observation-noise
// streams within an episode.
SuiteReport evaluate_suite(const std::vector<Policy*>& policies, const Config& task_cfg,
                           int episodes, int horizon, std::uint64_t seed,
                           const RunnerOptions& opt = {});

std::vector<ProfileCurve> performance_profile(const std::vector<EpisodeRecord>& records,
                                              const std::vector<double>& tau_grid);

// CSV emitters (17 significant digits, one header row).
void write_curves_csv(const std::string& path, const std::vector<EpisodeRecord>& records);
void write_summary_csv(const std::string& path, const std::vector<SuiteSummaryRow>& summary);
void write_profile_csv(const std::string& path, const std::vector<ProfileCurve>& profiles);

// A two-scenario lookback fixture over a shared 2-objective grid: both
// trajectories end on byte-identical candidate frames, yet the correct value
// of that candidate differs by `delta` because the earlier picks shaped the
// archives differently.  Any scorer of the final frame alone must value both
// the same; a scorer with enough lookback can separate them.
struct IdentifiabilityPair {
  Trajectory a, b;
  Eigen::MatrixXd values;  // grid's noiseless objective values (rows = points)
  double hv_star = 0.0;
  double delta = 0.0;      // |correct final-step reward difference|
};

IdentifiabilityPair make_identifiability_pair();

}  // namespace mobo
