#include "mobo/acquisition.hpp"

#include <cmath>
#include <stdexcept>

namespace mobo {

int argmax_lowest(const Eigen::VectorXd& scores) {
  int best = 0;
  for (int i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best]) best = i;
  return best;
}

AcquisitionScore ehvi_mc(const MultiPosterior& post, const ParetoArchive& archive,
                         int n_samples, Rng& rng) {
  if (n_samples < 1) throw std::invalid_argument("ehvi_mc: n_samples must be >= 1");
  const int n = static_cast<int>(post.mean.rows());
  const int k = static_cast<int>(post.mean.cols());
  if (archive.ref().size() != k) throw std::invalid_argument("ehvi_mc: objective count mismatch");

  const std::uint64_t base = rng();
  AcquisitionScore out;
  out.scores.resize(n);
  Point y(k);
  for (int c = 0; c < n; ++c) {
    Rng crng(derive_seed(base, static_cast<std::uint64_t>(c)));
    double acc = 0.0;
    for (int s = 0; s < n_samples; ++s) {
      for (int j = 0; j < k; ++j) y[j] = post.mean(c, j) + post.sd(c, j) * rnorm(crng);
      ParetoArchive clone = archive;
      acc += clone.push(y);
    }
    out.scores[c] = acc / n_samples;
  }
  out.argmax = argmax_lowest(out.scores);
  return out;
}

Eigen::VectorXd draw_simplex_weights(int k, Rng& rng) {
  Eigen::VectorXd w(k);
  double total = 0.0;
  for (int i = 0; i < k; ++i) {
    // -log(U) is Exp(1); normalized exponentials are uniform on the simplex.
    w[i] = -std::log(std::max(runif(rng), 1e-300));
    total += w[i];
  }
  return w / total;
}

AcquisitionScore scalarized_ucb(const MultiPosterior& post, const Eigen::VectorXd& weights,
                                double beta) {
  const int n = static_cast<int>(post.mean.rows());
  const int k = static_cast<int>(post.mean.cols());
  if (weights.size() != k) throw std::invalid_argument("scalarized_ucb: weight length mismatch");
  if (beta < 0.0) throw std::invalid_argument("scalarized_ucb: beta must be >= 0");

  AcquisitionScore out;
  out.scores.resize(n);
  for (int c = 0; c < n; ++c) {
    // Zero-weight objectives are excluded from the min: a weight of exactly 0
    // means "ignore this objective", not "this objective scores 0".
    double m = std::numeric_limits<double>::infinity();
    for (int j = 0; j < k; ++j) {
      if (weights[j] == 0.0) continue;
      m = std::min(m, weights[j] * (post.mean(c, j) + beta * post.sd(c, j)));
    }
    out.scores[c] = std::isfinite(m) ? m : 0.0;
  }
  out.argmax = argmax_lowest(out.scores);
  return out;
}

int random_policy(int grid_size, Rng& rng) {
  if (grid_size < 1) throw std::invalid_argument("random_policy: empty grid");
  return rint(rng, grid_size);
}

int demo_select(const MultiPosterior& post, const ParetoArchive& archive, Rng& rng,
                int n_samples) {
  return ehvi_mc(post, archive, n_samples, rng).argmax;
}

}  // namespace mobo
