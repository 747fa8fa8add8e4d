#pragma once

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <cmath>
#include <limits>

#include "freshness/ctmc.hpp"
#include "freshness/errors.hpp"

namespace freshness {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

namespace detail {

constexpr double kQuadratureRelTol = 1e-8;   // contract: fail beyond this
constexpr double kQuadratureTarget = 1e-11;  // requested from the integrator
constexpr int kQuadratureMaxDepth = 15;

// (e^{-x a} - e^{-x b}) / x, stable as x -> 0 and for b = inf.
inline double exp_difference_over(double x, double a, double b) {
  if (std::isinf(b)) return std::exp(-x * a) / x;
  return std::exp(-x * a) * (-std::expm1(-x * (b - a))) / x;
}

template <typename F>
double adaptive_integral(F&& f, double lo, double hi) {
  double error = 0.0;
  double value = boost::math::quadrature::gauss_kronrod<double, 15>::integrate(
      f, lo, hi, kQuadratureMaxDepth, kQuadratureTarget, &error);
  if (!std::isfinite(value) ||
      error > kQuadratureRelTol * std::max(std::abs(value), 1e-12))
    throw QuadratureFailure("adaptive quadrature missed the target tolerance");
  return value;
}

// Smallest probed time at which row i of P(t) sits on pi to within the
// uniformization noise floor; beyond it the tail integral is analytic.
inline double stationarity_time(const TransitionKernel& kernel, int i,
                                double t_lo) {
  const Vector& pi = kernel.chain().stationary;
  double t = std::max(t_lo, 1.0 / kernel.chain().max_exit_rate());
  for (int iter = 0; iter < 60; ++iter) {
    if ((kernel.row(i, t) - pi).cwiseAbs().maxCoeff() < 2e-11) return t;
    t *= 2.0;
  }
  throw QuadratureFailure("transition row never reached stationarity");
}

}  // namespace detail

// int_{t_lo}^{t_hi} P_ij(t) e^{-mu t} dt. Reversible chains get the spectral
// closed form; everything else adaptive Gauss-Kronrod, with the unbounded
// tail mapped through u = e^{-mu t}.
inline double weighted_transition_integral(const TransitionKernel& kernel,
                                           int i, int j, double mu,
                                           double t_lo, double t_hi) {
  if (!(t_lo >= 0.0) || !(t_lo < t_hi))
    throw InvalidRate("integration interval must satisfy 0 <= t_lo < t_hi");
  if (mu < 0.0) throw InvalidRate("sampling rate must be nonnegative");
  if (mu == 0.0 && std::isinf(t_hi))
    throw InvalidRate("unweighted integral over an unbounded interval diverges");

  if (const SpectralDecomposition* dec = kernel.decomposition()) {
    double sum = 0.0;
    for (int k = 0; k < dec->size(); ++k) {
      double x = dec->decay_rates(k) + mu;
      double factor = x > 0.0 ? detail::exp_difference_over(x, t_lo, t_hi)
                              : t_hi - t_lo;
      sum += dec->vectors(k, i) * dec->vectors(k, j) * factor;
    }
    return dec->sqrt_pi(j) / dec->sqrt_pi(i) * sum;
  }

  // Unbounded stages: integrate numerically up to a detected stationarity
  // time (capped where e^{-mu t} underflows) and add the exact pi tail.
  double cut = t_hi;
  if (std::isinf(t_hi))
    cut = std::min(detail::stationarity_time(kernel, i, t_lo),
                   t_lo + 800.0 / mu);
  auto f = [&](double t) { return kernel.prob(i, j, t) * std::exp(-mu * t); };
  double value = cut > t_lo ? detail::adaptive_integral(f, t_lo, cut) : 0.0;
  if (std::isinf(t_hi))
    value += kernel.chain().stationary(j) * std::exp(-mu * cut) / mu;
  return value;
}

// int_0^inf P_ij(t) mu e^{-mu t} dt: where the chain lands when the next
// exponential(mu) query fires. Closed form is mu/(mu + d_k) weighted.
inline double resampling_transition(const TransitionKernel& kernel, int i,
                                    int j, double mu) {
  if (mu <= 0.0) throw InvalidRate("resampling rate must be positive");
  return mu * weighted_transition_integral(kernel, i, j, mu, 0.0, kInf);
}

}  // namespace freshness
