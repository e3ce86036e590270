#include "mobo/objectives.hpp"

#include <boost/random/sobol.hpp>
#include <cmath>

namespace mobo {

namespace {

// Affine map from the unit cube into a function's standard evaluation box.
Eigen::VectorXd into_box(const Eigen::VectorXd& u, double lo, double hi) {
  return (lo + (hi - lo) * u.array()).matrix();
}

// Classic test functions, written as minimization forms on their literature
// boxes; suite evaluators negate them.

double ackley(const Eigen::VectorXd& u) {
  Eigen::VectorXd x = into_box(u, -32.768, 32.768);
  const double a = 20.0, b = 0.2, c = 2.0 * M_PI;
  const double d = static_cast<double>(x.size());
  double s1 = x.squaredNorm() / d;
  double s2 = (c * x.array()).cos().sum() / d;
  return -a * std::exp(-b * std::sqrt(s1)) - std::exp(s2) + a + std::exp(1.0);
}

double rastrigin(const Eigen::VectorXd& u) {
  Eigen::VectorXd x = into_box(u, -5.12, 5.12);
  const double d = static_cast<double>(x.size());
  return 10.0 * d + (x.array().square() - 10.0 * (2.0 * M_PI * x.array()).cos()).sum();
}

double rosenbrock(const Eigen::VectorXd& u) {
  Eigen::VectorXd x = into_box(u, -5.0, 10.0);
  double s = 0.0;
  for (int i = 0; i + 1 < x.size(); ++i) {
    double a = x[i + 1] - x[i] * x[i];
    double b = x[i] - 1.0;
    s += 100.0 * a * a + b * b;
  }
  return s;
}

double branin(const Eigen::VectorXd& u) {
  double x1 = -5.0 + 15.0 * u[0];
  double x2 = 15.0 * u[1];
  const double a = 1.0, b = 5.1 / (4.0 * M_PI * M_PI), c = 5.0 / M_PI;
  const double r = 6.0, s = 10.0, t = 1.0 / (8.0 * M_PI);
  double inner = x2 - b * x1 * x1 + c * x1 - r;
  return a * inner * inner + s * (1.0 - t) * std::cos(x1) + s;
}

double currin(const Eigen::VectorXd& u) {
  double x1 = u[0], x2 = u[1];
  // The exponential factor tends to 1 as x2 -> 0.
  double factor = x2 == 0.0 ? 1.0 : 1.0 - std::exp(-1.0 / (2.0 * x2));
  double num = 2300.0 * x1 * x1 * x1 + 1900.0 * x1 * x1 + 2092.0 * x1 + 60.0;
  double den = 100.0 * x1 * x1 * x1 + 500.0 * x1 * x1 + 4.0 * x1 + 20.0;
  return factor * num / den;
}

double dixon_price(const Eigen::VectorXd& u) {
  Eigen::VectorXd x = into_box(u, -10.0, 10.0);
  double s = (x[0] - 1.0) * (x[0] - 1.0);
  for (int i = 1; i < x.size(); ++i) {
    double a = 2.0 * x[i] * x[i] - x[i - 1];
    s += (i + 1) * a * a;
  }
  return s;
}

using RawFn = double (*)(const Eigen::VectorXd&);

std::function<double(const Eigen::VectorXd&)> negated(RawFn f) {
  return [f](const Eigen::VectorXd& u) { return -f(u); };
}

}  // namespace

BoxDomain BoxDomain::unit(int dim) {
  if (dim <= 0) throw std::invalid_argument("BoxDomain: dim must be positive");
  BoxDomain b;
  b.dim = dim;
  b.lower = Eigen::VectorXd::Zero(dim);
  b.upper = Eigen::VectorXd::Ones(dim);
  return b;
}

ObjectiveSuite make_synthetic_suite(const std::string& name, int dim) {
  if (dim < 2) throw ConfigError("suite '" + name + "': dim must be >= 2");
  ObjectiveSuite s;
  s.name = name;
  s.dim = dim;
  s.box = BoxDomain::unit(dim);

  auto require_dim2 = [&] {
    if (dim != 2) throw ConfigError("suite '" + name + "' is defined for dim = 2 only");
  };

  if (name == "AR") {
    s.objectives = {negated(&ackley), negated(&rosenbrock)};
  } else if (name == "ARa") {
    s.objectives = {negated(&ackley), negated(&rastrigin)};
  } else if (name == "BC") {
    require_dim2();
    s.objectives = {negated(&branin), negated(&currin)};
  } else if (name == "DRa") {
    s.objectives = {negated(&dixon_price), negated(&rastrigin)};
  } else if (name == "BCD") {
    require_dim2();
    s.objectives = {negated(&branin), negated(&currin), negated(&dixon_price)};
  } else if (name == "rbf-gp" || name == "matern-gp") {
    s.gp_sampled = true;
    s.gp_kernel = name == "rbf-gp" ? KernelSpec::Kind::kRbf : KernelSpec::Kind::kMatern52;
    s.k = 2;  // default; overridden by task.k
    return s;
  } else {
    throw ConfigError("unknown suite: " + name);
  }
  s.k = static_cast<int>(s.objectives.size());
  return s;
}

Eigen::MatrixXd discretize_domain(const BoxDomain& box, int n, Rng& rng) {
  if (n < 2) throw std::invalid_argument("discretize_domain: n must be >= 2");
  // Cranley-Patterson rotation: one uniform offset per dimension, applied
  // modulo 1 to the raw Sobol sequence.
  Eigen::VectorXd shift(box.dim);
  for (int d = 0; d < box.dim; ++d) shift[d] = runif(rng);

  boost::random::sobol sobol(static_cast<std::size_t>(box.dim));
  const double denom = static_cast<double>(boost::random::sobol::max()) + 1.0;
  Eigen::MatrixXd grid(n, box.dim);
  for (int i = 0; i < n; ++i) {
    for (int d = 0; d < box.dim; ++d) {
      double u = static_cast<double>(sobol()) / denom;
      u += shift[d];
      u -= std::floor(u);
      grid(i, d) = box.lower[d] + (box.upper[d] - box.lower[d]) * u;
    }
  }
  return grid;
}

Eigen::VectorXd sample_gp_values(KernelSpec::Kind kind, double lengthscale,
                                 const Eigen::MatrixXd& points, Rng& rng) {
  KernelSpec spec;
  spec.kind = kind;
  spec.lengthscale = lengthscale;
  spec.signal_variance = 1.0;
  spec.noise_variance = 0.0;
  Eigen::MatrixXd gram = kernel_eval(spec, points, points);

  Eigen::LLT<Eigen::MatrixXd> llt;
  // Dense sampling covariances are routinely near-singular, so the ladder
  // starts smaller than the model-fitting one.
  for (double jitter = 0.0; jitter <= 1e-2 * (1 + 1e-12);
       jitter = jitter == 0.0 ? 1e-10 : jitter * 10.0) {
    Eigen::MatrixXd bumped = gram;
    bumped.diagonal().array() += jitter;
    llt.compute(bumped);
    if (llt.info() == Eigen::Success) break;
  }
  if (llt.info() != Eigen::Success)
    throw NumericalError("sample_gp_values: covariance factorization failed");

  Eigen::VectorXd z(points.rows());
  for (int i = 0; i < z.size(); ++i) z[i] = rnorm(rng);
  return Eigen::MatrixXd(llt.matrixL()) * z;
}

EpisodeTask finalize_values(const std::string& suite_name, const Eigen::MatrixXd& grid,
                            const Eigen::MatrixXd& raw_values, double noise_std, Rng& rng,
                            double kappa_max) {
  if (grid.rows() == 0) throw ConfigError("finalize_values: empty grid");
  if (raw_values.rows() != grid.rows())
    throw std::invalid_argument("finalize_values: grid/value row mismatch");
  const int n = static_cast<int>(grid.rows());
  const int k = static_cast<int>(raw_values.cols());

  EpisodeTask task;
  task.suite_name = suite_name;
  task.k = k;
  task.dim = static_cast<int>(grid.cols());
  task.grid = grid;
  task.noise_std = noise_std;
  task.raw_min = raw_values.colwise().minCoeff();
  task.raw_max = raw_values.colwise().maxCoeff();
  for (int j = 0; j < k; ++j) {
    if (!(task.raw_max[j] - task.raw_min[j] > 1e-12))
      throw ConfigError("objective " + std::to_string(j) + " is constant over the grid");
  }
  task.values.resize(n, k);
  for (int j = 0; j < k; ++j)
    task.values.col(j) =
        (raw_values.col(j).array() - task.raw_min[j]) / (task.raw_max[j] - task.raw_min[j]);

  task.perturb_scale = kappa_max > 0.0 ? runif(rng, 0.0, kappa_max) : 0.0;
  task.reference_point = Point::Zero(k);

  PointList pts;
  pts.reserve(n);
  for (int i = 0; i < n; ++i) pts.push_back(task.values.row(i).transpose());
  auto front = pareto_front(pts);
  PointList front_pts;
  for (int i : front) front_pts.push_back(pts[i]);
  task.hv_star = hypervolume_exact(front_pts, task.reference_point);
  return task;
}

EpisodeTask finalize_task(const ObjectiveSuite& suite, const Eigen::MatrixXd& grid,
                          double noise_std, Rng& rng, double kappa_max) {
  if (suite.gp_sampled)
    throw std::invalid_argument("finalize_task: GP suites are built by sample_gp_task");
  const int n = static_cast<int>(grid.rows());
  Eigen::MatrixXd raw(n, suite.k);
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd u = grid.row(i).transpose();
    for (int j = 0; j < suite.k; ++j) raw(i, j) = suite.objectives[j](u);
  }
  return finalize_values(suite.name, grid, raw, noise_std, rng, kappa_max);
}

EpisodeTask sample_gp_task(KernelSpec::Kind kernel, double lengthscale_low,
                           double lengthscale_high, int dim, int k, int grid_n,
                           double noise_std, Rng& rng, double kappa_max) {
  if (!(lengthscale_low > 0.0) || lengthscale_high < lengthscale_low)
    throw std::invalid_argument("sample_gp_task: bad lengthscale interval");
  BoxDomain box = BoxDomain::unit(dim);
  Eigen::MatrixXd grid = discretize_domain(box, grid_n, rng);
  Eigen::MatrixXd raw(grid_n, k);
  Eigen::VectorXd ells(k);
  for (int j = 0; j < k; ++j) {
    ells[j] = lengthscale_low == lengthscale_high
                  ? lengthscale_low
                  : runif(rng, lengthscale_low, lengthscale_high);
    raw.col(j) = sample_gp_values(kernel, ells[j], grid, rng);
  }
  std::string name = kernel == KernelSpec::Kind::kRbf ? "rbf-gp" : "matern-gp";
  EpisodeTask task = finalize_values(name, grid, raw, noise_std, rng, kappa_max);
  task.gen_lengthscales = ells;
  return task;
}

Eigen::VectorXd evaluate_noiseless(const EpisodeTask& task, int idx) {
  if (idx < 0 || idx >= task.grid_n())
    throw std::out_of_range("evaluate: grid index out of range");
  return (1.0 - task.perturb_scale) * task.values.row(idx).transpose();
}

Eigen::VectorXd evaluate(const EpisodeTask& task, int idx, Rng& rng) {
  Eigen::VectorXd y = evaluate_noiseless(task, idx);
  for (int j = 0; j < task.k; ++j) y[j] += task.noise_std == 0.0 ? 0.0 : rnorm(rng, 0.0, task.noise_std);
  return y;
}

EpisodeTask make_task_from_config(const Config& cfg, std::uint64_t seed) {
  std::string suite_name = cfg.get_str("task.suite", "rbf-gp");
  int grid_n = cfg.get_int("task.grid_n", 512);
  if (grid_n < 2 || grid_n > 5000) throw ConfigError("task.grid_n must lie in [2, 5000]");
  double noise_std = cfg.get_double("task.noise_std", 0.1);
  if (noise_std < 0.0) throw ConfigError("task.noise_std must be >= 0");
  double kappa_max = cfg.get_double("task.kappa_max", 0.1);
  int dim = cfg.get_int("task.dim", 2);
  Rng rng(derive_seed(seed, 17));

  ObjectiveSuite suite = make_synthetic_suite(suite_name, dim);
  if (suite.gp_sampled) {
    int k = cfg.get_int("task.k", 2);
    if (k < 2) throw ConfigError("task.k must be >= 2");
    double lo = cfg.get_double("task.lengthscale_low", 0.1);
    double hi = cfg.get_double("task.lengthscale_high", 0.4);
    return sample_gp_task(suite.gp_kernel, lo, hi, dim, k, grid_n, noise_std, rng, kappa_max);
  }
  Eigen::MatrixXd grid = discretize_domain(suite.box, grid_n, rng);
  return finalize_task(suite, grid, noise_std, rng, kappa_max);
}

}  // namespace mobo
