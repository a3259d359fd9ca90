#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "mixedsi/errors.hpp"
#include "mixedsi/estimation.hpp"

namespace mixedsi {

enum class Method { BS, MC, BO, BE, VT };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::BS: return "BS";
    case Method::MC: return "MC";
    case Method::BO: return "BO";
    case Method::BE: return "BE";
    case Method::VT: return "VT";
  }
  return "?";
}

struct CriticalValue {
  double value = 0.0;
  Method method = Method::BS;
  double alpha = 0.05;
  std::optional<VectorXd> per_cluster;  // Beran only
};

struct Interval {
  double center = 0.0;
  double half_width = 0.0;
  double lower = 0.0;
  double upper = 0.0;
};

struct SimultaneousIntervals {
  std::vector<Interval> clusters;
  CriticalValue critical;
  double level = 0.95;

  VectorXd widths() const {
    VectorXd w(static_cast<Index>(clusters.size()));
    for (std::size_t d = 0; d < clusters.size(); ++d) w(static_cast<Index>(d)) = 2.0 * clusters[d].half_width;
    return w;
  }
};

struct ContrastTest {
  MatrixXd A;
  VectorXd h;
  VectorXd t_values;
  std::vector<bool> decisions;
  double statistic = 0.0;  // t_H = max_d |t_{H_d}|
  bool reject = false;
  CriticalValue critical;
};

/// max_d |numerator_d / scale_d| with scales floored at kScaleFloor.
inline double max_abs_stat(const VectorXd& numerators, const VectorXd& scales) {
  if (numerators.size() != scales.size()) throw Error(ErrorCode::ShapeMismatch, "numerators and scales differ in length");
  double best = 0.0;
  for (Index d = 0; d < numerators.size(); ++d) {
    best = std::max(best, std::abs(numerators(d)) / std::max(scales(d), kScaleFloor));
  }
  return best;
}

/// Sets lower/upper so that upper - center == center - lower holds in
/// floating point; half_width may move by a few ulps.
inline void place_symmetric(Interval& iv, double center, double half_width) {
  iv.center = center;
  const double a = std::abs(center);
  double h = half_width;
  if (std::isfinite(h) && std::isfinite(center)) {
    if (h <= a) {
      h = (a + h) - a;
    } else {
      for (int i = 0; i < 256 && (center + h) - center != center - (center - h); ++i) h = std::nextafter(h, 0.0);
    }
  }
  iv.half_width = h;
  iv.lower = center - h;
  iv.upper = center + h;
}

inline SimultaneousIntervals build_spi(const VectorXd& centers, const VectorXd& scales, const CriticalValue& critical) {
  check_alpha(critical.alpha);
  if (centers.size() != scales.size()) throw Error(ErrorCode::ShapeMismatch, "centers and scales differ in length");
  const bool beran = critical.method == Method::BE;
  if (beran && !critical.per_cluster) {
    throw Error(ErrorCode::MissingPerCluster, "Beran critical value without per-cluster values");
  }
  if (beran && critical.per_cluster->size() != centers.size()) {
    throw Error(ErrorCode::ShapeMismatch, "per-cluster critical values do not match cluster count");
  }
  SimultaneousIntervals out;
  out.critical = critical;
  out.level = 1.0 - critical.alpha;
  out.clusters.resize(static_cast<std::size_t>(centers.size()));
  for (Index d = 0; d < centers.size(); ++d) {
    const double c = beran ? (*critical.per_cluster)(d) : critical.value;
    auto& iv = out.clusters[static_cast<std::size_t>(d)];
    place_symmetric(iv, centers(d), c * scales(d));
  }
  return out;
}

inline SimultaneousIntervals build_spi(const FitResult& fit, const CriticalValue& critical) {
  return build_spi(fit.mu_hat, fit.scale, critical);
}

/// True iff every truth_d lies in its closed interval.
inline bool covers_all(const SimultaneousIntervals& intervals, const VectorXd& truth) {
  if (static_cast<Index>(intervals.clusters.size()) != truth.size()) {
    throw Error(ErrorCode::ShapeMismatch, "truth length does not match interval count");
  }
  for (Index d = 0; d < truth.size(); ++d) {
    const auto& iv = intervals.clusters[static_cast<std::size_t>(d)];
    if (!(truth(d) >= iv.lower && truth(d) <= iv.upper)) return false;
  }
  return true;
}

/// Standard errors of the contrasts A mu_hat, combining per-cluster
/// variances as independent: sqrt(sum_j a_dj^2 var_j).
inline VectorXd contrast_scales(const MatrixXd& A, const VectorXd& scales) {
  if (A.cols() != scales.size()) throw Error(ErrorCode::ShapeMismatch, "contrast matrix columns must equal D");
  return (A.array().square().matrix() * scales.array().square().matrix()).cwiseSqrt();
}

inline VectorXd t_statistics(const VectorXd& estimates, const VectorXd& scales, const VectorXd& h) {
  if (estimates.size() != scales.size() || estimates.size() != h.size()) {
    throw Error(ErrorCode::ShapeMismatch, "estimates, scales and h must have equal length");
  }
  VectorXd t(estimates.size());
  for (Index d = 0; d < t.size(); ++d) t(d) = (estimates(d) - h(d)) / std::max(scales(d), kScaleFloor);
  return t;
}

/// Global max-type test of H0: A mu = h. Ties (t == c) reject.
inline ContrastTest single_step_test(const VectorXd& mu_hat_h, const VectorXd& scales_h, const VectorXd& h,
                                     const CriticalValue& critical) {
  ContrastTest out;
  out.h = h;
  out.t_values = t_statistics(mu_hat_h, scales_h, h);
  out.critical = critical;
  out.decisions.resize(static_cast<std::size_t>(h.size()));
  for (Index d = 0; d < h.size(); ++d) {
    out.decisions[static_cast<std::size_t>(d)] = std::abs(out.t_values(d)) >= critical.value;
    out.statistic = std::max(out.statistic, std::abs(out.t_values(d)));
  }
  out.reject = out.statistic >= critical.value;
  return out;
}

/// Quantile of max_{d in subset} |t_d| under the null.
using SubsetQuantile = std::function<double(std::span<const Index>)>;

/// Romano-Wolf step-down: retest the surviving hypotheses against the
/// quantile of their own max statistic until nothing new is rejected.
/// Returns the rejected indices in increasing order.
inline std::vector<Index> step_down_test(const VectorXd& t_values, const SubsetQuantile& quantile, double alpha) {
  check_alpha(alpha);
  std::vector<Index> active(static_cast<std::size_t>(t_values.size()));
  for (Index d = 0; d < t_values.size(); ++d) active[static_cast<std::size_t>(d)] = d;
  std::vector<Index> rejected;
  double previous = std::numeric_limits<double>::infinity();
  while (!active.empty()) {
    const double c = quantile(active);
    if (c > previous) {
      throw Error(ErrorCode::ProviderInconsistent, "subset quantile increased after removing hypotheses");
    }
    previous = c;
    std::vector<Index> keep;
    bool any = false;
    for (Index d : active) {
      if (std::abs(t_values(d)) >= c) {
        rejected.push_back(d);
        any = true;
      } else {
        keep.push_back(d);
      }
    }
    if (!any) break;
    active = std::move(keep);
  }
  std::sort(rejected.begin(), rejected.end());
  return rejected;
}

}  // namespace mixedsi
