#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>
#include <vector>

namespace mobo {

// Raised when a linear-algebra step cannot be stabilized.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct KernelSpec {
  enum class Kind { kRbf, kMatern52 };
  Kind kind = Kind::kMatern52;
  double lengthscale = 0.2;
  double signal_variance = 1.0;
  double noise_variance = 0.01;
};

KernelSpec::Kind kernel_kind_from_string(const std::string& name);

// Cross-covariance block between two point sets (rows are points).
Eigen::MatrixXd kernel_eval(const KernelSpec& spec, const Eigen::MatrixXd& a,
                            const Eigen::MatrixXd& b);

struct PosteriorSummary {
  Eigen::VectorXd mean;
  Eigen::VectorXd sd;
  double best_observed = 0.0;  // running max of targets; 0 with no observations
};

// Single-output Gaussian-process regressor.  The surrogate for a K-objective
// problem is K independent models sharing the same inputs.
class GPModel {
 public:
  GPModel(KernelSpec spec, int dim);

  void add(const Eigen::VectorXd& x, double y);

  // Factorizes the observation covariance.  Tries the plain matrix first so a
  // well-posed noiseless model interpolates exactly; on a failed Cholesky,
  // retries with diagonal jitter escalating 1e-6 -> 1e-2 and throws
  // NumericalError only when even that fails.
  void fit();

  // Posterior mean/deviation at the query rows.  With no observations this is
  // the prior (mean 0, sd = sqrt(signal_variance)).  Variances are clamped at
  // zero before the square root.
  PosteriorSummary posterior(const Eigen::MatrixXd& queries) const;

  // Maximizes the log marginal likelihood over the lengthscale: a 32-point
  // log-spaced grid scan followed by golden-section refinement around the best
  // grid point.  The signal variance is pinned to the sample variance of the
  // targets and the noise variance stays as configured.  Returns the chosen
  // lengthscale and leaves the model fitted with it.
  double fit_lengthscale_mll(double lo, double hi);

  double log_marginal() const;  // of the fitted model

  int n() const { return static_cast<int>(y_.size()); }
  int dim() const { return dim_; }
  double best_observed() const { return y_.size() ? y_.maxCoeff() : 0.0; }
  const KernelSpec& spec() const { return spec_; }
  void set_lengthscale(double value);
  double jitter_used() const { return jitter_used_; }

 private:
  void ensure_fitted() const;

  KernelSpec spec_;
  int dim_;
  Eigen::MatrixXd x_;  // n x dim
  Eigen::VectorXd y_;

  // Fitted state (mutable: posterior() refits lazily after adds).
  mutable bool fitted_ = false;
  mutable Eigen::LLT<Eigen::MatrixXd> llt_;
  mutable Eigen::VectorXd alpha_;
  mutable double jitter_used_ = 0.0;
};

}  // namespace mobo
