#pragma once

#include <Eigen/Dense>
#include <functional>
#include <string>
#include <vector>

#include "mobo/config.hpp"
#include "mobo/gp.hpp"
#include "mobo/pareto.hpp"
#include "mobo/rng.hpp"

namespace mobo {

// Axis-aligned input domain.  Evaluators take points in the canonical unit
// cube and map them into each function's standard box internally.
struct BoxDomain {
  int dim = 0;
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;

  static BoxDomain unit(int dim);
};

// One black-box problem family: K objective evaluators over a shared domain.
// Evaluators are deterministic functions of the unit-cube point; for the
// GP-sampled suites they are attached per task, not here.
struct ObjectiveSuite {
  std::string name;
  int k = 0;
  int dim = 0;
  BoxDomain box;
  std::vector<std::function<double(const Eigen::VectorXd&)>> objectives;
  bool gp_sampled = false;
  KernelSpec::Kind gp_kernel = KernelSpec::Kind::kRbf;
};

// A concrete, discretized episode problem: grid, normalized values, noise and
// perturbation parameters, reference point and best attainable hypervolume.
struct EpisodeTask {
  std::string suite_name;
  int k = 0;
  int dim = 0;
  Eigen::MatrixXd grid;    // N x dim points in the unit cube
  Eigen::MatrixXd values;  // N x K noiseless objective values, min-max normalized to [0,1]
  double noise_std = 0.1;     // observation noise standard deviation
  double perturb_scale = 0.0; // per-episode multiplicative perturbation (kappa)
  Point reference_point;      // all zeros in normalized space
  double hv_star = 0.0;       // exact hypervolume of the grid's Pareto front
  Eigen::VectorXd raw_min;    // per-objective normalization constants
  Eigen::VectorXd raw_max;
  // For GP-sampled tasks: the lengthscale that generated each objective, so a
  // training-time surrogate can use the known kernel.  Empty for closed forms.
  Eigen::VectorXd gen_lengthscales;

  int grid_n() const { return static_cast<int>(grid.rows()); }
};

// Named function combinations (closed forms, negated to maximization) and the
// GP-sampled families:
//   AR  = Ackley + Rosenbrock        ARa = Ackley + Rastrigin
//   BC  = Branin + Currin            DRa = Dixon-Price + Rastrigin
//   BCD = Branin + Currin + Dixon-Price (K = 3)
//   rbf-gp / matern-gp = per-task GP samples.
// BC/BCD require dim = 2; the others accept any dim >= 2.
ObjectiveSuite make_synthetic_suite(const std::string& name, int dim);

// n low-discrepancy (Sobol) points scaled into the box.  A random offset drawn
// from rng shifts the sequence modulo 1, so distinct seeds give distinct grids
// while preserving low discrepancy.
Eigen::MatrixXd discretize_domain(const BoxDomain& box, int n, Rng& rng);

// Exact joint GP sample over arbitrary points: values ~ N(0, K(points)).
// The covariance factorization escalates diagonal jitter before giving up.
Eigen::VectorXd sample_gp_values(KernelSpec::Kind kind, double lengthscale,
                                 const Eigen::MatrixXd& points, Rng& rng);

// Normalizes raw objective values over the grid, draws the per-episode
// perturbation kappa ~ Uniform[0, kappa_max], sets the zero reference point
// and computes hv_star.  Degenerate objectives (constant over the grid) raise
// ConfigError.
EpisodeTask finalize_values(const std::string& suite_name, const Eigen::MatrixXd& grid,
                            const Eigen::MatrixXd& raw_values, double noise_std, Rng& rng,
                            double kappa_max = 0.1);

// finalize_values applied to a closed-form suite's evaluations over the grid.
EpisodeTask finalize_task(const ObjectiveSuite& suite, const Eigen::MatrixXd& grid,
                          double noise_std, Rng& rng, double kappa_max = 0.1);

// Builds a task whose K objectives are independent exact GP draws over a fresh
// Sobol grid, each with lengthscale ~ Uniform[lengthscale_low, lengthscale_high].
EpisodeTask sample_gp_task(KernelSpec::Kind kernel, double lengthscale_low,
                           double lengthscale_high, int dim, int k, int grid_n,
                           double noise_std, Rng& rng, double kappa_max = 0.1);

// Noiseless observation: perturbed normalized values (1 - kappa) * v[idx].
Eigen::VectorXd evaluate_noiseless(const EpisodeTask& task, int idx);

// Full observation model: noiseless value plus i.i.d. N(0, noise_std^2) noise.
Eigen::VectorXd evaluate(const EpisodeTask& task, int idx, Rng& rng);

// Task construction from config keys (task.suite, task.grid_n, task.noise_std,
// task.k, task.kappa_max, task.lengthscale_low/high) and a seed.  The seed
// fully determines the task.
EpisodeTask make_task_from_config(const Config& cfg, std::uint64_t seed);

}  // namespace mobo
