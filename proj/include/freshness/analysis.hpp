#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "freshness/ctmc.hpp"
#include "freshness/errors.hpp"
#include "freshness/estimators.hpp"
#include "freshness/transition_integrals.hpp"

namespace freshness {

// Stationary law of the joint (source, estimate-anchor) chain.
struct JointStationary {
  Vector psi;                 // length S*S, index i*S + j
  Vector estimator_marginal;  // pi_tilde_j = sum_i psi(i, j)
  Vector source_marginal;     // sum_j psi(i, j), equals pi

  double operator()(int i, int j) const {
    int s = static_cast<int>(estimator_marginal.size());
    return psi(i * s + j);
  }
};

// One term of the spectral MBF expansion (stage index < 0 marks the tau-MAP
// b-coefficients, which have no stage dimension).
struct CoefficientEntry {
  int state;
  int eigen_index;
  int stage;
  double value;
};

struct MbfReport {
  double mbf = 0.0;
  Vector per_state_freshness;  // E[F_{i, mu_i}]
  double avg_sampling_rate = 0.0;
  std::string method;  // "joint-chain", "spectral" or "quadrature"
  std::vector<CoefficientEntry> coefficients;
};

// Generator of (X(t), anchor): source moves at q, the anchor snaps to the
// source at rate mu_{anchor}, and a query in a fresh state changes nothing.
inline Matrix build_joint_generator(const Ctmc& chain, const Vector& mu) {
  const int s = chain.n_states;
  if (mu.size() != s) throw InvalidRate("one sampling rate per state required");
  for (int j = 0; j < s; ++j)
    if (!(mu(j) > 0.0) || !std::isfinite(mu(j)))
      throw InvalidRate("sampling rates must be positive and finite");
  Matrix q = Matrix::Zero(s * s, s * s);
  auto idx = [s](int i, int j) { return i * s + j; };
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < s; ++j) {
      int row = idx(i, j);
      for (int k = 0; k < s; ++k)
        if (k != i) q(row, idx(k, j)) = chain.generator(i, k);
      if (i != j) {
        q(row, idx(i, i)) = mu(j);
        q(row, row) = chain.generator(i, i) - mu(j);
      } else {
        q(row, row) = chain.generator(i, i);
      }
    }
  return q;
}

inline JointStationary joint_stationary(const Ctmc& chain, const Vector& mu) {
  const int s = chain.n_states;
  Matrix qm = build_joint_generator(chain, mu);
  Matrix a = qm.transpose();
  a.row(s * s - 1).setOnes();
  Vector b = Vector::Zero(s * s);
  b(s * s - 1) = 1.0;
  Vector psi = a.partialPivLu().solve(b);
  if (!psi.allFinite() || (a * psi - b).cwiseAbs().maxCoeff() > 1e-9)
    throw SingularSystem("joint stationary solve did not converge");
  for (int n = 0; n < psi.size(); ++n) {
    if (psi(n) < -1e-12)
      throw SingularSystem("joint stationary distribution has a negative entry");
    if (psi(n) < 0.0) psi(n) = 0.0;
  }
  psi /= psi.sum();
  JointStationary js;
  js.psi = std::move(psi);
  js.estimator_marginal = Vector::Zero(s);
  js.source_marginal = Vector::Zero(s);
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < s; ++j) {
      js.estimator_marginal(j) += js.psi(i * s + j);
      js.source_marginal(i) += js.psi(i * s + j);
    }
  return js;
}

inline double avg_sampling_rate(const JointStationary& js, const Vector& mu) {
  return js.estimator_marginal.dot(mu);
}

inline double avg_sampling_rate(const Ctmc& chain, const Vector& mu) {
  return avg_sampling_rate(joint_stationary(chain, mu), mu);
}

// MBF of the hold-last-sample estimator: the diagonal mass of psi.
inline MbfReport mbf_martingale(const Ctmc& chain, const Vector& mu) {
  const int s = chain.n_states;
  JointStationary js = joint_stationary(chain, mu);
  MbfReport report;
  report.method = "joint-chain";
  report.per_state_freshness = Vector::Zero(s);
  for (int i = 0; i < s; ++i) {
    double diag = js(i, i);
    report.mbf += diag;
    // Renewal-reward split: psi_ii = mu_i pi_tilde_i E[F_{i, mu_i}].
    report.per_state_freshness(i) = diag / (mu(i) * js.estimator_marginal(i));
  }
  report.avg_sampling_rate = avg_sampling_rate(js, mu);
  return report;
}

// E[F_{i, mu_i}]: expected fresh time accumulated between two samples,
// summed stage by stage against the stage values.
inline double freshness_integral(const TransitionKernel& kernel,
                                 const StateStages& st, int i, double mu_i) {
  if (!(mu_i > 0.0)) throw InvalidRate("sampling rate must be positive");
  double total = 0.0;
  for (size_t k = 0; k < st.values.size(); ++k) {
    if (st.boundaries[k] == st.boundaries[k + 1]) continue;
    total += weighted_transition_integral(kernel, i, st.values[k], mu_i,
                                          st.boundaries[k], st.boundaries[k + 1]);
  }
  return total;
}

inline double freshness_integral(const TransitionKernel& kernel,
                                 const StagePlan& plan, int i, double mu_i) {
  return freshness_integral(kernel, plan.per_state.at(i), i, mu_i);
}

// Renewal-reward assembly: E[Delta] = sum_i mu_i pi_tilde_i E[F_{i, mu_i}].
inline MbfReport mbf_general(const TransitionKernel& kernel,
                             const StagePlan& plan, const Vector& mu) {
  const Ctmc& chain = kernel.chain();
  validate_plan(plan, chain.n_states);
  JointStationary js = joint_stationary(chain, mu);
  MbfReport report;
  report.method = kernel.reversible() ? "spectral" : "quadrature";
  report.per_state_freshness = Vector::Zero(chain.n_states);
  for (int i = 0; i < chain.n_states; ++i) {
    double ef = freshness_integral(kernel, plan, i, mu(i));
    report.per_state_freshness(i) = ef;
    report.mbf += mu(i) * js.estimator_marginal(i) * ef;
  }
  report.avg_sampling_rate = avg_sampling_rate(js, mu);
  return report;
}

// Spectral expansion of the p-MAP MBF with its a-coefficient breakdown.
inline MbfReport mbf_p_map_closed(const TransitionKernel& kernel,
                                  const StagePlan& plan, const Vector& mu) {
  const SpectralDecomposition* dec = kernel.decomposition();
  if (!dec) throw NotReversible("closed-form MBF requires a reversible chain");
  const Ctmc& chain = kernel.chain();
  validate_plan(plan, chain.n_states);
  JointStationary js = joint_stationary(chain, mu);
  MbfReport report;
  report.method = "spectral";
  report.per_state_freshness = Vector::Zero(chain.n_states);
  for (int i = 0; i < chain.n_states; ++i) {
    const auto& st = plan.per_state[i];
    double state_sum = 0.0;
    for (int j = 0; j < chain.n_states; ++j) {
      for (size_t k = 0; k < st.values.size(); ++k) {
        int target = st.values[k];
        double x = dec->decay_rates(j) + mu(i);
        double a = dec->sqrt_pi(target) / dec->sqrt_pi(i) *
                   js.estimator_marginal(i) * dec->vectors(j, i) *
                   dec->vectors(j, target) * mu(i) / x;
        double span = std::exp(-x * st.boundaries[k]) -
                      (std::isinf(st.boundaries[k + 1])
                           ? 0.0
                           : std::exp(-x * st.boundaries[k + 1]));
        state_sum += a * span;
        report.coefficients.push_back(
            {i, j, static_cast<int>(k), a});
      }
    }
    report.mbf += state_sum;
    report.per_state_freshness(i) =
        state_sum / (mu(i) * js.estimator_marginal(i));
  }
  report.avg_sampling_rate = avg_sampling_rate(js, mu);
  return report;
}

// Two-stage closed form with its b-coefficient breakdown.
inline MbfReport mbf_tau_map_closed(const TransitionKernel& kernel, double tau,
                                    const Vector& mu) {
  const SpectralDecomposition* dec = kernel.decomposition();
  if (!dec) throw NotReversible("closed-form MBF requires a reversible chain");
  if (!(tau >= 0.0)) throw InvalidRate("tau must be nonnegative");
  const Ctmc& chain = kernel.chain();
  int mode = stationary_mode(chain);
  JointStationary js = joint_stationary(chain, mu);
  MbfReport report;
  report.method = "spectral";
  report.per_state_freshness = Vector::Zero(chain.n_states);
  for (int i = 0; i < chain.n_states; ++i) {
    double state_sum = 0.0;
    for (int j = 0; j < chain.n_states; ++j) {
      double x = dec->decay_rates(j) + mu(i);
      double uji = dec->vectors(j, i);
      double hold = js.estimator_marginal(i) * uji * uji;
      double b = hold - dec->sqrt_pi(mode) / dec->sqrt_pi(i) *
                            js.estimator_marginal(i) * uji *
                            dec->vectors(j, mode);
      double damp = std::isinf(tau) ? 0.0 : std::exp(-x * tau);
      state_sum += mu(i) / x * (hold - b * damp);
      report.coefficients.push_back({i, j, -1, b});
    }
    report.mbf += state_sum;
    report.per_state_freshness(i) =
        state_sum / (mu(i) * js.estimator_marginal(i));
  }
  report.avg_sampling_rate = avg_sampling_rate(js, mu);
  return report;
}

}  // namespace freshness
