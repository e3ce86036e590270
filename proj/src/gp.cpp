#include "mobo/gp.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

namespace mobo {

KernelSpec::Kind kernel_kind_from_string(const std::string& name) {
  if (name == "rbf") return KernelSpec::Kind::kRbf;
  if (name == "matern52") return KernelSpec::Kind::kMatern52;
  throw std::invalid_argument("unknown kernel kind: " + name);
}

Eigen::MatrixXd kernel_eval(const KernelSpec& spec, const Eigen::MatrixXd& a,
                            const Eigen::MatrixXd& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("kernel_eval: dimension mismatch");
  if (spec.lengthscale <= 0.0) throw std::invalid_argument("kernel_eval: lengthscale must be > 0");
  // Pairwise squared distances via the expansion |a-b|^2 = |a|^2 + |b|^2 - 2ab.
  Eigen::VectorXd a2 = a.rowwise().squaredNorm();
  Eigen::VectorXd b2 = b.rowwise().squaredNorm();
  Eigen::MatrixXd sq = (-2.0 * a * b.transpose());
  sq.colwise() += a2;
  sq.rowwise() += b2.transpose();
  sq = sq.cwiseMax(0.0);  // guard tiny negatives from cancellation

  const double s2 = spec.signal_variance;
  const double ell = spec.lengthscale;
  Eigen::MatrixXd out(a.rows(), b.rows());
  switch (spec.kind) {
    case KernelSpec::Kind::kRbf:
      out = (sq / (-2.0 * ell * ell)).array().exp() * s2;
      break;
    case KernelSpec::Kind::kMatern52: {
      const double c = std::sqrt(5.0) / ell;
      Eigen::ArrayXXd r = sq.array().sqrt();
      out = (s2 * (1.0 + c * r + (5.0 / (3.0 * ell * ell)) * sq.array()) * (-c * r).exp()).matrix();
      break;
    }
  }
  return out;
}

GPModel::GPModel(KernelSpec spec, int dim) : spec_(spec), dim_(dim) {
  if (dim <= 0) throw std::invalid_argument("GPModel: dim must be positive");
  x_.resize(0, dim);
  y_.resize(0);
}

void GPModel::add(const Eigen::VectorXd& x, double y) {
  if (x.size() != dim_) throw std::invalid_argument("GPModel::add: dimension mismatch");
  x_.conservativeResize(x_.rows() + 1, Eigen::NoChange);
  x_.row(x_.rows() - 1) = x.transpose();
  y_.conservativeResize(y_.size() + 1);
  y_[y_.size() - 1] = y;
  fitted_ = false;
}

void GPModel::fit() {
  ensure_fitted();
}

void GPModel::ensure_fitted() const {
  if (fitted_) return;
  const int n = static_cast<int>(y_.size());
  if (n == 0) {
    fitted_ = true;
    jitter_used_ = 0.0;
    return;
  }
  Eigen::MatrixXd gram = kernel_eval(spec_, x_, x_);
  gram.diagonal().array() += spec_.noise_variance;

  jitter_used_ = 0.0;
  llt_.compute(gram);
  if (llt_.info() != Eigen::Success) {
    for (double jitter = 1e-6; jitter <= 1e-2 * (1.0 + 1e-12); jitter *= 10.0) {
      Eigen::MatrixXd bumped = gram;
      bumped.diagonal().array() += jitter;
      llt_.compute(bumped);
      if (llt_.info() == Eigen::Success) {
        jitter_used_ = jitter;
        break;
      }
    }
    if (llt_.info() != Eigen::Success)
      throw NumericalError("GPModel::fit: covariance not positive definite even with jitter 1e-2");
  }
  alpha_ = llt_.solve(y_);
  fitted_ = true;
}

PosteriorSummary GPModel::posterior(const Eigen::MatrixXd& queries) const {
  if (queries.cols() != dim_) throw std::invalid_argument("GPModel::posterior: dimension mismatch");
  ensure_fitted();
  const int m = static_cast<int>(queries.rows());
  PosteriorSummary out;
  out.best_observed = best_observed();
  if (y_.size() == 0) {
    out.mean = Eigen::VectorXd::Zero(m);
    out.sd = Eigen::VectorXd::Constant(m, std::sqrt(spec_.signal_variance));
    return out;
  }
  Eigen::MatrixXd cross = kernel_eval(spec_, queries, x_);  // m x n
  out.mean = cross * alpha_;
  // var = k(x,x) - || L^-1 k* ||^2, and k(x,x) = signal variance (stationary).
  Eigen::MatrixXd v = llt_.matrixL().solve(cross.transpose());  // n x m
  Eigen::VectorXd var =
      (Eigen::VectorXd::Constant(m, spec_.signal_variance) - v.colwise().squaredNorm().transpose())
          .cwiseMax(0.0);
  out.sd = var.cwiseSqrt();
  return out;
}

double GPModel::log_marginal() const {
  ensure_fitted();
  const int n = static_cast<int>(y_.size());
  if (n == 0) return 0.0;
  double logdet_half = llt_.matrixLLT().diagonal().array().log().sum();
  return -0.5 * y_.dot(alpha_) - logdet_half - 0.5 * n * std::log(2.0 * M_PI);
}

void GPModel::set_lengthscale(double value) {
  if (value <= 0.0) throw std::invalid_argument("set_lengthscale: must be > 0");
  spec_.lengthscale = value;
  fitted_ = false;
}

double GPModel::fit_lengthscale_mll(double lo, double hi) {
  if (!(lo > 0.0) || hi < lo) throw std::invalid_argument("fit_lengthscale_mll: bad bounds");
  if (y_.size() == 0) return spec_.lengthscale;
  if (lo == hi) {  // collapsed interval: nothing to search
    set_lengthscale(lo);
    ensure_fitted();
    return lo;
  }

  // Pin the signal variance to the spread of the data; keep noise as is.
  double mean = y_.mean();
  double var = 0.0;
  if (y_.size() >= 2) var = (y_.array() - mean).square().sum() / (y_.size() - 1);
  spec_.signal_variance = std::max(var, 1e-8);

  auto mll_at = [&](double ell) {
    spec_.lengthscale = ell;
    fitted_ = false;
    try {
      ensure_fitted();
      return log_marginal();
    } catch (const NumericalError&) {
      return -std::numeric_limits<double>::infinity();
    }
  };

  // Stage 1: 32-point log-spaced scan.
  constexpr int kGrid = 32;
  const double llo = std::log(lo), lhi = std::log(hi);
  std::vector<double> grid(kGrid), score(kGrid);
  int best = 0;
  for (int i = 0; i < kGrid; ++i) {
    grid[i] = std::exp(llo + (lhi - llo) * i / (kGrid - 1));
    score[i] = mll_at(grid[i]);
    if (score[i] > score[best]) best = i;
  }
  if (!std::isfinite(score[best])) {
    // Nothing evaluable: keep the geometric mid-bound rather than crash.
    std::fprintf(stderr, "warning: lengthscale fit found no finite candidate; using mid-bound\n");
    double mid = std::exp(0.5 * (llo + lhi));
    spec_.lengthscale = mid;
    fitted_ = false;
    return mid;
  }

  // Stage 2: golden-section refinement between the neighbors of the best point
  // (in log space, where the grid is uniform).
  double a = std::log(grid[std::max(best - 1, 0)]);
  double b = std::log(grid[std::min(best + 1, kGrid - 1)]);
  const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
  double x1 = b - gr * (b - a), x2 = a + gr * (b - a);
  double f1 = mll_at(std::exp(x1)), f2 = mll_at(std::exp(x2));
  for (int it = 0; it < 40 && (b - a) > 1e-7; ++it) {
    if (f1 < f2) {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + gr * (b - a);
      f2 = mll_at(std::exp(x2));
    } else {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - gr * (b - a);
      f1 = mll_at(std::exp(x1));
    }
  }
  double refined = f1 > f2 ? std::exp(x1) : std::exp(x2);
  double refined_score = std::max(f1, f2);
  double chosen = refined_score >= score[best] ? refined : grid[best];

  spec_.lengthscale = chosen;
  fitted_ = false;
  ensure_fitted();
  return chosen;
}

}  // namespace mobo
