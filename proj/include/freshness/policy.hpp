#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>
#include <utility>
#include <vector>

#include "freshness/analysis.hpp"
#include "freshness/ctmc.hpp"
#include "freshness/errors.hpp"
#include "freshness/estimators.hpp"
#include "freshness/sampling_policy.hpp"
#include "freshness/transition_integrals.hpp"

namespace freshness {

inline std::vector<double> geometric_grid(double lo, double hi, int n) {
  if (!(lo > 0.0) || !(hi > lo) || !std::isfinite(hi))
    throw InvalidRate("rate grid needs 0 < lo < hi < inf");
  if (n < 2) throw InvalidRate("rate grid needs at least two points");
  std::vector<double> grid(n);
  double span = std::log(hi / lo);
  for (int k = 0; k < n; ++k) grid[k] = lo * std::exp(span * k / (n - 1.0));
  grid.front() = lo;
  grid.back() = hi;
  return grid;
}

// Average-reward semi-Markov decision model over anchor states. Choosing
// rate mu at anchor i earns the epoch's expected fresh time minus gamma per
// sample, holds 1/mu on average, and moves the anchor by the source's
// resampling distribution.
struct SmdpModel {
  std::vector<double> actions;  // ascending sampling rates
  std::vector<Matrix> trans;    // per action: anchor transition matrix
  Matrix fresh_time;            // (state, action) expected fresh time per epoch
  double gamma = 0.0;           // price charged per sample

  int n_states() const { return static_cast<int>(fresh_time.rows()); }
  int n_actions() const { return static_cast<int>(actions.size()); }
  double reward(int i, int a) const { return fresh_time(i, a) - gamma; }
  double sojourn(int a) const { return 1.0 / actions[a]; }
};

namespace detail {

// Stage list anchor i follows at sampling rate mu. Only PMap stage values
// depend on the rate; bounds carries the per-state boundary lists.
inline StateStages policy_stages(const TransitionKernel& kernel,
                                 const EstimatorSpec& spec,
                                 const std::vector<std::vector<double>>& bounds,
                                 int i, double mu) {
  StateStages st;
  switch (spec.kind) {
    case EstimatorKind::Martingale:
      st.boundaries = {0.0, kInf};
      st.values = {i};
      return st;
    case EstimatorKind::TauMap: {
      int mode = stationary_mode(kernel.chain());
      if (i == mode || std::isinf(spec.tau)) {
        st.boundaries = {0.0, kInf};
        st.values = {i};
      } else if (spec.tau == 0.0) {
        st.boundaries = {0.0, kInf};
        st.values = {mode};
      } else {
        st.boundaries = {0.0, spec.tau, kInf};
        st.values = {i, mode};
      }
      return st;
    }
    case EstimatorKind::PMap:
      return p_map_state(kernel, i, mu, bounds.at(i));
  }
  throw InvalidRate("unknown estimator kind");
}

}  // namespace detail

inline SmdpModel build_smdp(const TransitionKernel& kernel,
                            const EstimatorSpec& spec, double gamma,
                            const std::vector<double>& grid) {
  if (grid.empty()) throw InvalidRate("action grid must be nonempty");
  if (!std::is_sorted(grid.begin(), grid.end()))
    throw InvalidRate("action grid must be ascending");
  if (!(grid.front() > 0.0) || !std::isfinite(grid.back()))
    throw InvalidRate("action rates must be positive and finite");
  if (!(gamma >= 0.0)) throw InvalidRate("gamma must be nonnegative");

  const int s = kernel.chain().n_states;
  const int n_act = static_cast<int>(grid.size());
  SmdpModel model;
  model.actions = grid;
  model.gamma = gamma;
  model.trans.assign(n_act, Matrix::Zero(s, s));
  model.fresh_time = Matrix::Zero(s, n_act);
  std::vector<std::vector<double>> bounds;
  if (spec.kind == EstimatorKind::PMap)
    bounds = resolved_boundaries(kernel, spec);

  auto fill_action = [&](int a) {
    double mu = grid[a];
    for (int i = 0; i < s; ++i) {
      StateStages st = detail::policy_stages(kernel, spec, bounds, i, mu);
      double fresh = freshness_integral(kernel, st, i, mu);
      if (!std::isfinite(fresh) || fresh > 1.0 / mu + 1e-9)
        throw NumericalFailure("expected fresh time exceeds the epoch length");
      model.fresh_time(i, a) = fresh;
      double row_sum = 0.0;
      for (int j = 0; j < s; ++j) {
        double p = resampling_transition(kernel, i, j, mu);
        model.trans[a](i, j) = p;
        row_sum += p;
      }
      if (std::abs(row_sum - 1.0) > 1e-9)
        throw NumericalFailure("resampling distribution does not sum to one");
    }
  };

  // Cells are independent; split the action axis across a few threads.
  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex failure_lock;
  auto worker = [&]() {
    try {
      for (int a = next.fetch_add(1); a < n_act; a = next.fetch_add(1))
        fill_action(a);
    } catch (...) {
      std::lock_guard<std::mutex> hold(failure_lock);
      if (!failure) failure = std::current_exception();
    }
  };
  unsigned n_threads = std::min<unsigned>(
      {std::max(1u, std::thread::hardware_concurrency()), 8u,
       static_cast<unsigned>(n_act)});
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(n_threads);
    for (unsigned k = 0; k < n_threads; ++k) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
  return model;
}

struct PolicyIterationResult {
  SamplingPolicy policy;          // simple, rates taken from the action grid
  double gain = 0.0;              // time-average reward
  std::vector<int> action_index;  // chosen grid index per state
};

namespace detail {

// Gain and bias of a fixed policy: h(i) = R - g H + sum_j P(i,j) h(j) with
// h(0) = 0; unknowns are (g, h_1 .. h_{S-1}).
inline std::pair<double, Vector> gain_and_bias(const SmdpModel& model,
                                               const std::vector<int>& act) {
  const int s = model.n_states();
  Matrix a = Matrix::Zero(s, s);
  Vector b(s);
  for (int i = 0; i < s; ++i) {
    const Matrix& p = model.trans[act[i]];
    a(i, 0) = model.sojourn(act[i]);
    for (int j = 1; j < s; ++j) a(i, j) = (i == j ? 1.0 : 0.0) - p(i, j);
    b(i) = model.reward(i, act[i]);
  }
  Vector x = a.partialPivLu().solve(b);
  double scale = 1.0 + b.cwiseAbs().maxCoeff();
  if (!x.allFinite() || (a * x - b).cwiseAbs().maxCoeff() > 1e-8 * scale)
    throw SingularSystem("policy evaluation system is singular");
  Vector h = Vector::Zero(s);
  for (int j = 1; j < s; ++j) h(j) = x(j);
  return {x(0), h};
}

// Stationary law of a stochastic matrix.
inline Vector chain_stationary(const Matrix& p) {
  const int s = static_cast<int>(p.rows());
  Matrix m = p.transpose() - Matrix::Identity(s, s);
  m.row(s - 1).setOnes();
  Vector rhs = Vector::Zero(s);
  rhs(s - 1) = 1.0;
  Vector nu = m.partialPivLu().solve(rhs);
  if (!nu.allFinite() || (m * nu - rhs).cwiseAbs().maxCoeff() > 1e-9)
    throw SingularSystem("anchor chain has no unique stationary law");
  nu = nu.cwiseMax(0.0);
  nu /= nu.sum();
  return nu;
}

// One grid action per state, or a two-action mixture at a single state.
struct GridMix {
  int a = -1;
  int b = -1;
  double p_a = 1.0;
};

struct EmbeddedStats {
  double omega = 0.0;
  double mbf = 0.0;
  Vector fresh;  // expected fresh time per epoch by anchor
};

// Renewal-reward readout of a (possibly randomized) grid policy through the
// stationary law of the embedded anchor chain.
inline EmbeddedStats embedded_stats(const SmdpModel& model,
                                    const std::vector<GridMix>& mix) {
  const int s = model.n_states();
  Matrix p = Matrix::Zero(s, s);
  Vector hold(s), fresh(s);
  for (int i = 0; i < s; ++i) {
    const GridMix& m = mix[i];
    p.row(i) = model.trans[m.a].row(i) * m.p_a;
    hold(i) = m.p_a * model.sojourn(m.a);
    fresh(i) = m.p_a * model.fresh_time(i, m.a);
    if (m.b >= 0) {
      p.row(i) += model.trans[m.b].row(i) * (1.0 - m.p_a);
      hold(i) += (1.0 - m.p_a) * model.sojourn(m.b);
      fresh(i) += (1.0 - m.p_a) * model.fresh_time(i, m.b);
    }
  }
  Vector nu = chain_stationary(p);
  double cycle = nu.dot(hold);
  EmbeddedStats out;
  out.omega = 1.0 / cycle;
  out.mbf = nu.dot(fresh) / cycle;
  out.fresh = fresh;
  return out;
}

}  // namespace detail

inline PolicyIterationResult policy_iteration(const SmdpModel& model) {
  const int s = model.n_states();
  const int n_act = model.n_actions();
  std::vector<int> act(s, 0);
  for (int round = 0; round < 1000; ++round) {
    auto [gain, h] = detail::gain_and_bias(model, act);
    bool changed = false;
    for (int i = 0; i < s; ++i) {
      double keep = -kInf;
      int best = 0;
      double best_value = -kInf;
      for (int a = 0; a < n_act; ++a) {
        double v = model.reward(i, a) - gain * model.sojourn(a) +
                   model.trans[a].row(i).dot(h);
        if (a == act[i]) keep = v;
        if (v > best_value) {
          best_value = v;
          best = a;
        }
      }
      // Switch only on a real improvement so exact ties cannot cycle.
      if (best != act[i] &&
          best_value > keep + 1e-13 * (1.0 + std::abs(keep))) {
        act[i] = best;
        changed = true;
      }
    }
    if (!changed) {
      PolicyIterationResult out;
      out.action_index = act;
      out.gain = gain;
      out.policy.rates = Vector(s);
      for (int i = 0; i < s; ++i) out.policy.rates(i) = model.actions[act[i]];
      return out;
    }
  }
  throw NoConvergence("policy iteration did not stabilize within 1000 rounds");
}

// Exact MBF and average sampling rate of a policy under an estimator kind.
// Simple policies go through the joint source and estimator chain; a
// randomized policy goes through the embedded anchor chain.
inline MbfReport evaluate_policy(const TransitionKernel& kernel,
                                 const EstimatorSpec& spec,
                                 const SamplingPolicy& policy) {
  const Ctmc& chain = kernel.chain();
  const int s = chain.n_states;
  validate_policy(policy, s);
  if (policy.is_simple())
    return mbf_general(kernel, induced_plan(kernel, spec, policy.rates),
                       policy.rates);

  std::vector<std::vector<double>> bounds;
  if (spec.kind == EstimatorKind::PMap)
    bounds = resolved_boundaries(kernel, spec);
  Matrix p = Matrix::Zero(s, s);
  Vector hold = Vector::Zero(s), fresh = Vector::Zero(s);
  for (int i = 0; i < s; ++i) {
    std::vector<std::pair<double, double>> parts{{policy.rates(i), 1.0}};
    if (i == policy.randomized_state)
      parts = {{policy.rates(i), policy.prob},
               {policy.other_rate, 1.0 - policy.prob}};
    for (auto [rate, weight] : parts) {
      for (int j = 0; j < s; ++j)
        p(i, j) += weight * resampling_transition(kernel, i, j, rate);
      hold(i) += weight / rate;
      fresh(i) +=
          weight * freshness_integral(
                       kernel, detail::policy_stages(kernel, spec, bounds, i, rate),
                       i, rate);
    }
  }
  Vector nu = detail::chain_stationary(p);
  double cycle = nu.dot(hold);
  MbfReport report;
  report.method = "embedded-chain";
  report.mbf = nu.dot(fresh) / cycle;
  report.per_state_freshness = fresh;
  report.avg_sampling_rate = 1.0 / cycle;
  return report;
}

struct ConstrainedSolution {
  SamplingPolicy policy;
  MbfReport report;
  double gamma = 0.0;           // multiplier at the returned policy
  double policy_epsilon = 0.0;  // multiplier gap pinning the one-sided policies
  std::vector<std::pair<double, double>> omega_trace;  // (gamma, omega) visits
};

// Best sampling-rate allocation with average rate at most the budget. A
// price per sample is bisected until either some simple policy lands on the
// budget or the two policies bracketing the jump are randomized at a single
// state to meet it exactly.
inline ConstrainedSolution solve_constrained(const TransitionKernel& kernel,
                                             const EstimatorSpec& spec,
                                             double budget,
                                             std::vector<double> grid = {},
                                             double bisect_tol = 1e-4) {
  if (!(budget > 0.0) || !std::isfinite(budget))
    throw InvalidRate("budget must be positive and finite");
  if (grid.empty()) grid = geometric_grid(1e-3 * budget, 10.0 * budget, 64);
  if (budget <= grid.front())
    throw BudgetInfeasible("budget does not exceed the smallest grid rate");

  const Ctmc& chain = kernel.chain();
  const int s = chain.n_states;
  SmdpModel model = build_smdp(kernel, spec, 0.0, grid);
  ConstrainedSolution sol;

  auto check_trace = [&]() {
    auto sorted = sol.omega_trace;
    std::sort(sorted.begin(), sorted.end());
    for (size_t k = 1; k < sorted.size(); ++k)
      if (sorted[k].second >
          sorted[k - 1].second + 1e-9 * std::max(1.0, budget))
        throw NumericalFailure("sampling rate increased with the price");
  };
  auto omega_of = [&](const Vector& rates) {
    return avg_sampling_rate(chain, rates);
  };
  // A finite grid can strand every candidate below the off-grid uniform
  // allocation, which always meets the budget exactly; never return a
  // policy the uniform one beats.
  auto prefer_uniform = [&]() {
    SamplingPolicy uniform_policy = SamplingPolicy::uniform(s, budget);
    MbfReport uniform_report = evaluate_policy(kernel, spec, uniform_policy);
    if (uniform_report.mbf > sol.report.mbf) {
      sol.policy = std::move(uniform_policy);
      sol.report = std::move(uniform_report);
    }
    return sol;
  };
  auto finish_simple = [&](Vector rates, double gamma_here, bool constrained) {
    sol.policy = SamplingPolicy{};
    sol.policy.rates = std::move(rates);
    sol.gamma = gamma_here;
    check_trace();
    sol.report = evaluate_policy(kernel, spec, sol.policy);
    return constrained ? prefer_uniform() : sol;
  };

  PolicyIterationResult unconstrained = policy_iteration(model);
  double omega0 = omega_of(unconstrained.policy.rates);
  sol.omega_trace.emplace_back(0.0, omega0);
  if (omega0 <= budget)
    return finish_simple(unconstrained.policy.rates, 0.0, false);

  // Bracket the jump: raise the price until sampling drops below the budget.
  double gamma_lo = 0.0, gamma_hi = 1.0;
  std::vector<int> act_over = unconstrained.action_index;
  std::vector<int> act_under;
  for (int tries = 0;; ++tries, gamma_hi *= 2.0) {
    if (tries > 120)
      throw NoConvergence("no price brings sampling under the budget");
    model.gamma = gamma_hi;
    PolicyIterationResult cand = policy_iteration(model);
    double w = omega_of(cand.policy.rates);
    sol.omega_trace.emplace_back(gamma_hi, w);
    if (std::abs(w - budget) <= bisect_tol * budget)
      return finish_simple(cand.policy.rates, gamma_hi, true);
    if (w <= budget) {
      act_under = cand.action_index;
      break;
    }
    gamma_lo = gamma_hi;
    act_over = cand.action_index;
  }

  // Bisect the price; stop once the interval pins both one-sided policies.
  while (gamma_hi - gamma_lo > 1e-12 * std::max(1.0, gamma_hi)) {
    double mid = 0.5 * (gamma_lo + gamma_hi);
    model.gamma = mid;
    PolicyIterationResult cand = policy_iteration(model);
    double w = omega_of(cand.policy.rates);
    sol.omega_trace.emplace_back(mid, w);
    if (std::abs(w - budget) <= bisect_tol * budget)
      return finish_simple(cand.policy.rates, mid, true);
    if (w > budget) {
      gamma_lo = mid;
      act_over = cand.action_index;
    } else {
      gamma_hi = mid;
      act_under = cand.action_index;
    }
  }
  sol.policy_epsilon = gamma_hi - gamma_lo;
  sol.gamma = 0.5 * (gamma_lo + gamma_hi);

  // No simple policy lands on the budget. Sweep hybrids that follow the
  // over-budget policy on a growing state prefix and the under-budget one
  // elsewhere; the first prefix that crosses the budget marks the state to
  // randomize.
  auto hybrid = [&](int k) {
    std::vector<int> act(s);
    for (int i = 0; i < s; ++i) act[i] = i < k ? act_over[i] : act_under[i];
    return act;
  };
  auto rates_of = [&](const std::vector<int>& act) {
    Vector r(s);
    for (int i = 0; i < s; ++i) r(i) = model.actions[act[i]];
    return r;
  };

  int cross = -1;
  for (int k = 1; k <= s; ++k) {
    Vector r = rates_of(hybrid(k));
    double w = omega_of(r);
    if (std::abs(w - budget) <= bisect_tol * budget)
      return finish_simple(std::move(r), sol.gamma, true);
    if (w > budget) {
      cross = k;
      break;
    }
  }
  if (cross < 1)
    throw NumericalFailure("hybrid sweep never crossed the budget");
  int rs = cross - 1;
  int a_over = act_over[rs], a_under = act_under[rs];
  if (a_over == a_under)
    throw NumericalFailure("crossing state does not change its action");

  std::vector<detail::GridMix> mix(s);
  for (int i = 0; i < s; ++i) {
    if (i == rs) {
      mix[i].a = a_over;
      mix[i].b = a_under;
    } else {
      mix[i].a = i < rs ? act_over[i] : act_under[i];
    }
  }
  double p_lo = 0.0, p_hi = 1.0, p = 0.5;
  for (int it = 0;; ++it) {
    if (it > 200)
      throw NoConvergence("budget randomization did not converge");
    p = 0.5 * (p_lo + p_hi);
    mix[rs].p_a = p;
    double w = detail::embedded_stats(model, mix).omega;
    if (std::abs(w - budget) <= bisect_tol * budget) break;
    (w > budget ? p_hi : p_lo) = p;
  }

  sol.policy = SamplingPolicy{};
  sol.policy.rates = rates_of(hybrid(cross));
  sol.policy.randomized_state = rs;
  sol.policy.other_rate = model.actions[a_under];
  sol.policy.prob = p;
  validate_policy(sol.policy, s);
  check_trace();
  sol.report = evaluate_policy(kernel, spec, sol.policy);
  return prefer_uniform();
}

}  // namespace freshness
