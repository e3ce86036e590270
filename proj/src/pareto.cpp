#include "mobo/pareto.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "mobo/rng.hpp"

namespace mobo {

bool dominates(const Point& a, const Point& b) {
  if (a.size() != b.size()) throw std::invalid_argument("dominates: dimension mismatch");
  bool strict = false;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    if (a[i] < b[i]) return false;
    if (a[i] > b[i]) strict = true;
  }
  return strict;
}

std::vector<int> pareto_front(const PointList& points) {
  const int n = static_cast<int>(points.size());
  std::vector<int> out;
  for (int i = 0; i < n; ++i) {
    bool keep = true;
    for (int j = 0; j < n && keep; ++j) {
      if (j == i) continue;
      if (dominates(points[j], points[i])) keep = false;
      // Duplicates: only the first occurrence survives.
      if (j < i && points[j] == points[i]) keep = false;
    }
    if (keep) out.push_back(i);
  }
  return out;
}

namespace {

// 2-D hypervolume by a descending sweep over the first coordinate.  Points at
// or below the reference in either coordinate contribute nothing.
double hv2(PointList pts, const Point& ref) {
  std::erase_if(pts, [&](const Point& p) { return p[0] <= ref[0] || p[1] <= ref[1]; });
  std::sort(pts.begin(), pts.end(), [](const Point& a, const Point& b) {
    if (a[0] != b[0]) return a[0] > b[0];
    return a[1] > b[1];
  });
  double hv = 0.0;
  double y_prev = ref[1];
  for (const Point& p : pts) {
    if (p[1] > y_prev) {
      hv += (p[0] - ref[0]) * (p[1] - y_prev);
      y_prev = p[1];
    }
  }
  return hv;
}

// Staircase of mutually non-dominated 2-D points keyed by x ascending (so y is
// descending).  insert() returns the area the new point adds above the
// reference corner (u1, u2).
class Staircase2 {
 public:
  Staircase2(double u1, double u2) : u1_(u1), u2_(u2) {}

  double insert(double x, double y) {
    if (x <= u1_ || y <= u2_) return 0.0;
    // Dominated (or equal) iff some point with x' >= x has y' >= y.
    auto succ = stairs_.lower_bound(x);
    if (succ != stairs_.end() && succ->second >= y) return 0.0;
    double y_right = succ != stairs_.end() ? succ->second : u2_;
    // Walk left over the points this one dominates, accumulating strips.
    double gain = 0.0;
    double x_hi = x;
    double y_base = y_right;
    auto it = succ;
    while (it != stairs_.begin()) {
      auto prev = std::prev(it);
      if (prev->second > y) break;  // first survivor to the left
      gain += (x_hi - prev->first) * (y - y_base);
      x_hi = prev->first;
      y_base = prev->second;
      it = stairs_.erase(prev);
    }
    double x_low = it == stairs_.begin() ? u1_ : std::prev(it)->first;
    gain += (x_hi - x_low) * (y - y_base);
    stairs_.emplace(x, y);
    return gain;
  }

 private:
  double u1_, u2_;
  std::map<double, double> stairs_;
};

// 3-D hypervolume: sweep the third coordinate downward; between consecutive
// levels the covered area is the 2-D hypervolume of the points already seen,
// maintained incrementally by the staircase.
double hv3(PointList pts, const Point& ref) {
  std::erase_if(pts, [&](const Point& p) {
    return p[0] <= ref[0] || p[1] <= ref[1] || p[2] <= ref[2];
  });
  std::sort(pts.begin(), pts.end(), [](const Point& a, const Point& b) { return a[2] > b[2]; });
  Staircase2 stairs(ref[0], ref[1]);
  double hv = 0.0;
  double area = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    area += stairs.insert(pts[i][0], pts[i][1]);
    double z_next = i + 1 < pts.size() ? pts[i + 1][2] : ref[2];
    hv += area * (pts[i][2] - z_next);
  }
  return hv;
}

}  // namespace

double hypervolume_exact(const PointList& points, const Point& ref) {
  for (const Point& p : points)
    if (p.size() != ref.size()) throw std::invalid_argument("hypervolume_exact: dimension mismatch");
  switch (ref.size()) {
    case 2:
      return hv2(points, ref);
    case 3:
      return hv3(points, ref);
    default:
      throw std::invalid_argument("hypervolume_exact: only K = 2 and K = 3 are supported");
  }
}

HVEstimate hypervolume_mc(const PointList& points, const Point& ref, const Point& ideal,
                          std::int64_t n_samples, std::uint64_t seed) {
  const Eigen::Index k = ref.size();
  if (ideal.size() != k) throw std::invalid_argument("hypervolume_mc: dimension mismatch");
  if (n_samples < 1) throw std::invalid_argument("hypervolume_mc: n_samples must be >= 1");
  double box = 1.0;
  for (Eigen::Index i = 0; i < k; ++i) box *= std::max(ideal[i] - ref[i], 0.0);
  if (box == 0.0 || points.empty()) return {0.0, 0.0, n_samples};

  Rng rng(seed);
  Point z(k);
  std::int64_t hits = 0;
  for (std::int64_t s = 0; s < n_samples; ++s) {
    for (Eigen::Index i = 0; i < k; ++i) z[i] = runif(rng, ref[i], ideal[i]);
    for (const Point& p : points) {
      bool covered = true;
      for (Eigen::Index i = 0; i < k; ++i)
        if (z[i] > p[i]) {
          covered = false;
          break;
        }
      if (covered) {
        ++hits;
        break;
      }
    }
  }
  const double n = static_cast<double>(n_samples);
  const double phat = static_cast<double>(hits) / n;
  // Unbiased Bernoulli sample variance.
  const double var = n > 1 ? phat * (1.0 - phat) * n / (n - 1.0) : 0.0;
  return {box * phat, box * std::sqrt(var / n), n_samples};
}

ParetoArchive::ParetoArchive(Point ref) : ref_(std::move(ref)) {}

double ParetoArchive::push(const Point& y) {
  if (y.size() != ref_.size()) throw std::invalid_argument("ParetoArchive::push: dimension mismatch");
  Point clipped = y.cwiseMax(ref_);
  for (const Point& p : points_)
    if (p == clipped || dominates(p, clipped)) return 0.0;
  std::erase_if(points_, [&](const Point& p) { return dominates(clipped, p); });
  points_.push_back(clipped);
  double hv_new = hypervolume_exact(points_, ref_);
  double gain = std::max(hv_new - hv_, 0.0);
  hv_ += gain;
  return gain;
}

double normalized_reward(double raw_improvement, double hv_star, double hv_now) {
  constexpr double kDivFloor = 1e-6;
  constexpr double kCap = 100.0;
  double denom = std::max(hv_star - hv_now, kDivFloor);
  return std::min(raw_improvement / denom, kCap);
}

}  // namespace mobo
