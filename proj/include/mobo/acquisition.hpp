#pragma once

#include <Eigen/Dense>
#include <vector>

#include "mobo/gp.hpp"
#include "mobo/pareto.hpp"
#include "mobo/rng.hpp"

namespace mobo {

// Posterior over the shared candidate grid, one column block per objective.
struct MultiPosterior {
  Eigen::MatrixXd mean;  // N x K
  Eigen::MatrixXd sd;    // N x K
  Eigen::VectorXd best;  // K running maxima of noisy observations (y*)
};

struct AcquisitionScore {
  Eigen::VectorXd scores;  // one per grid point, all finite
  int argmax = 0;          // lowest index among maximal scores
};

// Lowest-index argmax over a score vector.
int argmax_lowest(const Eigen::VectorXd& scores);

// Monte-Carlo expected hypervolume improvement.  For each candidate, draws
// n_samples values from the diagonal Gaussian posterior and averages the
// hypervolume improvement a clone of the archive would gain from pushing each
// draw.  Every candidate consumes its own derived RNG stream, so parallel and
// sequential evaluation agree exactly.
AcquisitionScore ehvi_mc(const MultiPosterior& post, const ParetoArchive& archive,
                         int n_samples, Rng& rng);

// Uniform draw from the probability simplex (Dirichlet(1,...,1) via
// exponential spacings).
Eigen::VectorXd draw_simplex_weights(int k, Rng& rng);

// Tchebycheff-scalarized upper confidence bound:
//   score(x) = min_i weights[i] * (mu_i(x) + beta * sd_i(x)).
// Callers redraw the weights each acquisition step.
AcquisitionScore scalarized_ucb(const MultiPosterior& post, const Eigen::VectorXd& weights,
                                double beta);

// Uniform random grid index.
int random_policy(int grid_size, Rng& rng);

// The trainer's demo policy: argmax of ehvi_mc at its default sample count.
int demo_select(const MultiPosterior& post, const ParetoArchive& archive, Rng& rng,
                int n_samples = 128);

}  // namespace mobo
