#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <vector>

namespace mobo {

// Objective vectors; larger is better in every coordinate.
using Point = Eigen::VectorXd;
using PointList = std::vector<Point>;

// True iff a weakly exceeds b everywhere and strictly somewhere.
bool dominates(const Point& a, const Point& b);

// Indices of the non-dominated points, in input order.  Exact duplicates keep
// only the first occurrence.
std::vector<int> pareto_front(const PointList& points);

// Hypervolume of the dominated region between `ref` (lower corner) and the
// points.  Exact sweep algorithms for K = 2 and K = 3; throws
// std::invalid_argument for other K.
double hypervolume_exact(const PointList& points, const Point& ref);

struct HVEstimate {
  double value = 0.0;
  double stderr_ = 0.0;  // standard error: sample stddev / sqrt(n)
  std::int64_t n_samples = 0;
};

// Monte-Carlo hypervolume: uniform samples in the box [ref, ideal], counting
// those dominated by some point.  Works for any K.
HVEstimate hypervolume_mc(const PointList& points, const Point& ref, const Point& ideal,
                          std::int64_t n_samples, std::uint64_t seed);

// Mutually non-dominated point set with running hypervolume.  Values pushed
// below the reference in some coordinate are clipped to it, so they add zero
// volume in that direction; dominated pushes leave the archive unchanged and
// newly dominated members are evicted.  The running value telescopes: the sum
// of returned improvements equals the current hypervolume.
class ParetoArchive {
 public:
  ParetoArchive(Point ref);

  // Adds one observation; returns the raw hypervolume improvement (>= 0).
  double push(const Point& y);

  double hv() const { return hv_; }
  const PointList& points() const { return points_; }
  const Point& ref() const { return ref_; }
  int size() const { return static_cast<int>(points_.size()); }

 private:
  Point ref_;
  PointList points_;  // surviving antichain, in insertion order
  double hv_ = 0.0;
};

// Hypervolume-improvement reward scaled by the remaining gap to `hv_star`
// (the best attainable value).  `hv_now` is the archive value after the push.
// The denominator is floored at 1e-6 and the reward is capped at 100.
double normalized_reward(double raw_improvement, double hv_star, double hv_now);

// Gap between the best attainable hypervolume and the attained one, floored
// at zero (noise can push the attained value past the noise-free optimum).
inline double simple_regret(double hv_star, double hv_now) {
  return std::max(hv_star - hv_now, 0.0);
}

}  // namespace mobo
