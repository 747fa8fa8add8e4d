#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "freshness/ctmc.hpp"
#include "freshness/errors.hpp"
#include "freshness/transition_integrals.hpp"

namespace freshness {

// Piecewise-constant estimator for one anchor state: stage k holds value
// values[k] over [boundaries[k], boundaries[k+1]).
struct StateStages {
  std::vector<double> boundaries;  // starts at 0, ends at +inf
  std::vector<int> values;         // one state per stage
};

// Universal estimator representation: one stage list per anchor state.
// Martingale is the one-stage plan, tau-MAP the (at most) two-stage plan.
struct StagePlan {
  std::vector<StateStages> per_state;

  int n_states() const { return static_cast<int>(per_state.size()); }
};

// MAP transition points from anchor state `state`: the estimate equals
// values[k] between times[k-1] and times[k] (values has one extra entry).
struct MapPoints {
  int state = 0;
  std::vector<double> times;
  std::vector<int> values;
  bool truncated = false;    // complex spectrum, or a switch in the last cell
  bool tie_warning = false;  // some grid point had a sub-1e-12 leading gap
};

inline void validate_plan(const StagePlan& plan, int n_states) {
  if (plan.n_states() != n_states)
    throw ParseError("stage plan does not cover every state");
  for (const auto& st : plan.per_state) {
    if (st.boundaries.size() != st.values.size() + 1)
      throw ParseError("stage plan needs exactly one more boundary than values");
    if (st.boundaries.front() != 0.0 || !std::isinf(st.boundaries.back()))
      throw ParseError("stage boundaries must run from 0 to inf");
    for (size_t k = 0; k + 1 < st.boundaries.size(); ++k)
      if (!(st.boundaries[k] <= st.boundaries[k + 1]))
        throw ParseError("stage boundaries must be nondecreasing");
    for (int v : st.values)
      if (v < 0 || v >= n_states) throw ParseError("stage value out of range");
  }
}

// Drop empty stages and merge equal-valued neighbors.
inline StagePlan canonicalize(StagePlan plan) {
  for (auto& st : plan.per_state) {
    StateStages out;
    out.boundaries.push_back(0.0);
    for (size_t k = 0; k < st.values.size(); ++k) {
      double hi = st.boundaries[k + 1];
      if (st.boundaries[k] == hi) continue;
      if (!out.values.empty() && out.values.back() == st.values[k]) {
        out.boundaries.back() = hi;
      } else {
        out.values.push_back(st.values[k]);
        out.boundaries.push_back(hi);
      }
    }
    st = std::move(out);
  }
  return plan;
}

// Stage lookup: the unique k with age in [boundaries[k], boundaries[k+1]).
inline int evaluate(const StagePlan& plan, int last_sample, double age) {
  if (age < 0.0) throw InvalidRate("age must be nonnegative");
  const auto& st = plan.per_state.at(last_sample);
  auto it = std::upper_bound(st.boundaries.begin(), st.boundaries.end(), age);
  int k = static_cast<int>(it - st.boundaries.begin()) - 1;
  return st.values[std::min<size_t>(k, st.values.size() - 1)];
}

inline StagePlan martingale_plan(const Ctmc& chain) {
  StagePlan plan;
  plan.per_state.resize(chain.n_states);
  for (int i = 0; i < chain.n_states; ++i) {
    plan.per_state[i].boundaries = {0.0, kInf};
    plan.per_state[i].values = {i};
  }
  return plan;
}

// Smallest index attaining max pi (ties within 1e-12).
inline int stationary_mode(const Ctmc& chain) {
  double best = chain.stationary.maxCoeff();
  for (int i = 0; i < chain.n_states; ++i)
    if (chain.stationary(i) >= best - 1e-12) return i;
  return chain.n_states - 1;
}

// Hold the sample until age tau, then switch to the stationary mode.
inline StagePlan tau_map_plan(const Ctmc& chain, double tau) {
  if (!(tau >= 0.0)) throw InvalidRate("tau must be nonnegative");
  int mode = stationary_mode(chain);
  StagePlan plan;
  plan.per_state.resize(chain.n_states);
  for (int i = 0; i < chain.n_states; ++i) {
    auto& st = plan.per_state[i];
    if (i == mode || std::isinf(tau)) {
      st.boundaries = {0.0, kInf};
      st.values = {i};
    } else {
      st.boundaries = {0.0, tau, kInf};
      st.values = {i, mode};
    }
  }
  return canonicalize(std::move(plan));
}

namespace detail {

constexpr double kArgmaxTieTol = 1e-12;
constexpr double kBisectionTol = 1e-10;

// Leading state of a probability row, smallest index among near-ties.
inline int row_argmax(const Vector& row, bool* tied) {
  double best = row.maxCoeff();
  for (int j = 0; j < row.size(); ++j)
    if (row(j) >= best - kArgmaxTieTol) {
      if (tied)
        *tied = (j + 1 < row.size() &&
                 row.segment(j + 1, row.size() - j - 1).maxCoeff() >=
                     best - kArgmaxTieTol);
      return j;
    }
  return static_cast<int>(row.size()) - 1;
}

}  // namespace detail

// Grid scan of argmax_j P_ij(t) over [0, horizon] with bisection refinement
// of each detected switch.
inline MapPoints map_transition_points(const TransitionKernel& kernel, int i,
                                       double horizon, double grid_step) {
  if (!(horizon > 0.0) || !(grid_step > 0.0))
    throw InvalidRate("horizon and grid_step must be positive");
  MapPoints out;
  out.state = i;
  out.truncated = kernel.spectrum().kind == SpectrumKind::ComplexSpectrum;

  const int cells = std::max<int>(1, static_cast<int>(std::ceil(horizon / grid_step)));
  int prev = i;  // P(0) = I
  out.values.push_back(prev);
  double t_prev = 0.0;
  for (int m = 1; m <= cells; ++m) {
    double t = std::min(m * grid_step, horizon);
    bool tied = false;
    int cur = detail::row_argmax(kernel.row(i, t), &tied);
    out.tie_warning |= tied;
    if (cur != prev) {
      // Refine the crossing of the two leading probabilities.
      double lo = t_prev, hi = t;
      while (hi - lo > detail::kBisectionTol) {
        double mid = 0.5 * (lo + hi);
        (kernel.prob(i, prev, mid) > kernel.prob(i, cur, mid) ? lo : hi) = mid;
      }
      out.times.push_back(0.5 * (lo + hi));
      out.values.push_back(cur);
      if (m == cells) out.truncated = true;
      prev = cur;
    }
    t_prev = t;
  }
  return out;
}

inline double default_grid_step(const Ctmc& chain) {
  return 0.01 / chain.max_exit_rate();
}

// Horizon past which transients are below e^{-30}: 30 over the slowest
// nonzero decay scale (real part of the subdominant eigenvalue).
inline double default_horizon(const TransitionKernel& kernel) {
  if (kernel.reversible()) return 30.0 / kernel.decomposition()->spectral_gap();
  Eigen::EigenSolver<Matrix> solver(kernel.chain().generator, false);
  if (solver.info() != Eigen::Success)
    throw NumericalFailure("generator eigensolver failed");
  double slowest = kInf;
  for (int k = 0; k < solver.eigenvalues().size(); ++k) {
    double re = -solver.eigenvalues()(k).real();
    if (re > 1e-10) slowest = std::min(slowest, re);
  }
  if (!std::isfinite(slowest))
    throw NumericalFailure("no decaying eigenvalue found");
  return 30.0 / slowest;
}

inline MapPoints map_transition_points(const TransitionKernel& kernel, int i) {
  return map_transition_points(kernel, i, default_horizon(kernel),
                               default_grid_step(kernel.chain()));
}

inline std::vector<MapPoints> all_map_points(const TransitionKernel& kernel,
                                             double horizon, double grid_step) {
  std::vector<MapPoints> out;
  out.reserve(kernel.chain().n_states);
  for (int i = 0; i < kernel.chain().n_states; ++i)
    out.push_back(map_transition_points(kernel, i, horizon, grid_step));
  return out;
}

// Age past which the MAP estimate from every anchor has settled.
inline double tau_star(const std::vector<MapPoints>& points) {
  double last = 0.0;
  for (const auto& p : points)
    if (!p.times.empty()) last = std::max(last, p.times.back());
  return last;
}

// argmax_j of the sampling-weighted occupancy integral over one stage.
inline int stage_value(const TransitionKernel& kernel, int i, double mu_i,
                       double t_lo, double t_hi) {
  if (!(t_lo >= 0.0) || !(t_lo < t_hi))
    throw InvalidRate("stage interval must satisfy 0 <= t_lo < t_hi");
  if (mu_i < 0.0) throw InvalidRate("sampling rate must be nonnegative");
  const Ctmc& chain = kernel.chain();
  if (mu_i == 0.0 && std::isinf(t_hi)) {
    // Limit of the integral criterion: the stationary mode wins.
    return stationary_mode(chain);
  }
  int best = 0;
  double best_value = -kInf;
  for (int j = 0; j < chain.n_states; ++j) {
    double v = weighted_transition_integral(kernel, i, j, mu_i, t_lo, t_hi);
    if (v > best_value) {
      best_value = v;
      best = j;
    }
  }
  return best;
}

// Fill stage values for given boundary lists: first stage holds the anchor,
// later stages take the integral argmax.
inline StateStages p_map_state(const TransitionKernel& kernel, int i,
                               double mu_i, const std::vector<double>& b) {
  StateStages st;
  st.boundaries = b;
  st.values.resize(b.size() - 1);
  st.values[0] = i;
  for (size_t k = 1; k + 1 < b.size(); ++k)
    st.values[k] = b[k] == b[k + 1]
                       ? st.values[k - 1]
                       : stage_value(kernel, i, mu_i, b[k], b[k + 1]);
  return st;
}

inline StagePlan p_map_plan(const TransitionKernel& kernel, const Vector& mu,
                            const std::vector<std::vector<double>>& boundaries) {
  const Ctmc& chain = kernel.chain();
  if (static_cast<int>(boundaries.size()) != chain.n_states)
    throw InvalidRate("one boundary list per state required");
  if (mu.size() != chain.n_states)
    throw InvalidRate("one sampling rate per state required");
  StagePlan plan;
  plan.per_state.resize(chain.n_states);
  for (int i = 0; i < chain.n_states; ++i)
    plan.per_state[i] = p_map_state(kernel, i, mu(i), boundaries[i]);
  validate_plan(plan, chain.n_states);
  return canonicalize(std::move(plan));
}

// Boundary lists from MAP transition points, optionally keeping only a
// per-state prefix of the points.
inline std::vector<std::vector<double>> boundaries_from_points(
    const std::vector<MapPoints>& points, int max_points = -1) {
  std::vector<std::vector<double>> out(points.size());
  for (size_t i = 0; i < points.size(); ++i) {
    size_t n = points[i].times.size();
    if (max_points >= 0) n = std::min<size_t>(n, max_points);
    out[i].push_back(0.0);
    out[i].insert(out[i].end(), points[i].times.begin(),
                  points[i].times.begin() + n);
    out[i].push_back(kInf);
  }
  return out;
}

enum class EstimatorKind { Martingale, TauMap, PMap };

struct EstimatorSpec {
  EstimatorKind kind = EstimatorKind::PMap;
  double tau = kInf;                            // TauMap switch age
  std::vector<std::vector<double>> boundaries;  // PMap; empty: use MAP points
};

inline std::vector<std::vector<double>> resolved_boundaries(
    const TransitionKernel& kernel, const EstimatorSpec& spec) {
  if (!spec.boundaries.empty()) return spec.boundaries;
  return boundaries_from_points(all_map_points(
      kernel, default_horizon(kernel), default_grid_step(kernel.chain())));
}

// The plan an estimator kind induces at the given per-state sampling rates.
// Only PMap stage values actually depend on the rates.
inline StagePlan induced_plan(const TransitionKernel& kernel,
                              const EstimatorSpec& spec, const Vector& rates) {
  switch (spec.kind) {
    case EstimatorKind::Martingale:
      return martingale_plan(kernel.chain());
    case EstimatorKind::TauMap:
      return tau_map_plan(kernel.chain(), spec.tau);
    case EstimatorKind::PMap:
      return p_map_plan(kernel, rates, resolved_boundaries(kernel, spec));
  }
  throw InvalidRate("unknown estimator kind");
}

}  // namespace freshness
