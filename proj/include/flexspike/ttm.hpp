#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "flexspike/tensor.hpp"

namespace flexspike {

inline constexpr double kGroupingEpsilon = 0.01;

// Contiguous partition of l frames into k groups. boundaries[i] is the
// 1-based index of the first frame of group i; ties in the rounding are
// pushed down by the epsilon shift.
struct GroupingPlan {
  std::size_t l = 0;
  std::size_t k = 0;
  double epsilon = kGroupingEpsilon;
  std::vector<std::size_t> boundaries;

  std::size_t group_begin(std::size_t g) const { return boundaries[g] - 1; }  // 0-based
  std::size_t group_end(std::size_t g) const {
    return g + 1 < k ? boundaries[g + 1] - 1 : l;
  }
  std::size_t group_size(std::size_t g) const { return group_end(g) - group_begin(g); }
};

inline GroupingPlan group_boundaries(std::size_t l, std::size_t k,
                                     double epsilon = kGroupingEpsilon) {
  if (k == 0) throw ConfigError("group_boundaries: k must be >= 1");
  if (k > l)
    throw ConfigError("group_boundaries: k=" + std::to_string(k) + " exceeds l=" +
                      std::to_string(l));
  GroupingPlan plan{l, k, epsilon, {}};
  plan.boundaries.resize(k);
  for (std::size_t i = 1; i <= k; ++i) {
    const double c = static_cast<double>((i - 1) * l) / static_cast<double>(k) - epsilon;
    plan.boundaries[i - 1] = static_cast<std::size_t>(std::floor(c + 0.5)) + 1;
  }
  // Cheap structural checks; the policy guarantees these for valid (l, k).
  if (plan.boundaries[0] != 1) throw NumericError("group_boundaries: first boundary must be 1");
  for (std::size_t i = 1; i < k; ++i)
    if (plan.boundaries[i] <= plan.boundaries[i - 1])
      throw NumericError("group_boundaries: boundaries must be strictly increasing");
  if (plan.boundaries[k - 1] > l) throw NumericError("group_boundaries: boundary exceeds l");
  return plan;
}

namespace detail {

inline std::pair<std::size_t, std::size_t> split_time(const Tensor& x) {
  if (x.ndim() < 1) throw ConfigError("ttm: empty tensor");
  const std::size_t t = x.dim(0);
  return {t, t ? x.size() / t : 0};
}

inline Shape with_time(const Tensor& x, std::size_t t) {
  Shape s = x.shape();
  s[0] = t;
  return s;
}

}  // namespace detail

// l frames -> k frames, summing each group (plan over l frames).
inline Tensor group_sum(const Tensor& x, const GroupingPlan& plan) {
  auto [t, step] = detail::split_time(x);
  if (t != plan.l) throw ConfigError("group_sum: frame count mismatch");
  Tensor out(detail::with_time(x, plan.k));
  for (std::size_t g = 0; g < plan.k; ++g) {
    double* og = out.data() + g * step;
    for (std::size_t f = plan.group_begin(g); f < plan.group_end(g); ++f) {
      const double* xf = x.data() + f * step;
      for (std::size_t i = 0; i < step; ++i) og[i] += xf[i];
    }
  }
  return out;
}

// k frames -> l frames, replicating frame g into every frame of group g.
inline Tensor group_replicate(const Tensor& x, const GroupingPlan& plan) {
  auto [t, step] = detail::split_time(x);
  if (t != plan.k) throw ConfigError("group_replicate: frame count mismatch");
  Tensor out(detail::with_time(x, plan.l));
  for (std::size_t g = 0; g < plan.k; ++g) {
    const double* xg = x.data() + g * step;
    for (std::size_t f = plan.group_begin(g); f < plan.group_end(g); ++f)
      std::copy(xg, xg + step, out.data() + f * step);
  }
  return out;
}

inline Tensor ttm_downsample(const Tensor& x, std::size_t t_out,
                             double epsilon = kGroupingEpsilon) {
  const std::size_t t_in = x.dim(0);
  if (t_out > t_in) throw ConfigError("ttm_downsample: t_out exceeds t_in");
  if (t_out == t_in) return x;
  return group_sum(x, group_boundaries(t_in, t_out, epsilon));
}

inline Tensor ttm_upsample(const Tensor& x, std::size_t t_out,
                           double epsilon = kGroupingEpsilon) {
  const std::size_t t_in = x.dim(0);
  if (t_out < t_in) throw ConfigError("ttm_upsample: t_out below t_in");
  if (t_out == t_in) return x;
  return group_replicate(x, group_boundaries(t_out, t_in, epsilon));
}

inline Tensor ttm_apply(const Tensor& x, std::size_t t_out, double epsilon = kGroupingEpsilon) {
  if (t_out == 0) throw ConfigError("ttm_apply: t_out must be >= 1");
  const std::size_t t_in = x.dim(0);
  if (t_out == t_in) return x;
  return t_out < t_in ? ttm_downsample(x, t_out, epsilon) : ttm_upsample(x, t_out, epsilon);
}

}  // namespace flexspike
