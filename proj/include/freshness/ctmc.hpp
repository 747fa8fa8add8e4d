#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "freshness/errors.hpp"

namespace freshness {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// One off-diagonal generator entry, states 0-based.
struct RateEntry {
  int from;
  int to;
  double rate;
};

// Finite irreducible CTMC: generator with zero row sums and its stationary law.
struct Ctmc {
  int n_states = 0;
  Matrix generator;    // q(i,j) >= 0 off the diagonal, q(i,i) = -sum of row
  Vector stationary;   // pi, strictly positive, sums to 1
  std::string label;

  double exit_rate(int i) const { return -generator(i, i); }
  double max_exit_rate() const { return -generator.diagonal().minCoeff(); }
};

enum class SpectrumKind { Reversible, RealSpectrum, ComplexSpectrum };

struct SpectrumClass {
  SpectrumKind kind;
  double max_imag = 0.0;  // largest |Im| among generator eigenvalues
};

// Eigensystem of the symmetrized generator Pi^{1/2} Q Pi^{-1/2} of a
// reversible chain. Row k of `vectors` is the orthonormal eigenvector for
// decay rate d_k; d(0) == 0 and the rest are strictly positive.
struct SpectralDecomposition {
  Vector decay_rates;
  Matrix vectors;  // vectors(k, i)
  Vector sqrt_pi;

  int size() const { return static_cast<int>(decay_rates.size()); }
  // Second-smallest decay rate: the chain's slowest mixing scale.
  double spectral_gap() const { return decay_rates(1); }
};

namespace detail {

// Strong connectivity of the positive-rate digraph: every state reachable
// from state 0 in both the graph and its reverse.
inline bool strongly_connected(const Matrix& q) {
  const int n = static_cast<int>(q.rows());
  if (n <= 1) return true;
  auto reaches_all = [&](bool transpose) {
    std::vector<char> seen(n, 0);
    std::vector<int> stack{0};
    seen[0] = 1;
    int count = 1;
    while (!stack.empty()) {
      int u = stack.back();
      stack.pop_back();
      for (int v = 0; v < n; ++v) {
        double r = transpose ? q(v, u) : q(u, v);
        if (u != v && r > 0.0 && !seen[v]) {
          seen[v] = 1;
          ++count;
          stack.push_back(v);
        }
      }
    }
    return count == n;
  };
  return reaches_all(false) && reaches_all(true);
}

// Stationary solve: pi Q = 0 with the last balance equation replaced by the
// normalization sum(pi) = 1.
inline Vector stationary_distribution(const Matrix& q) {
  const int n = static_cast<int>(q.rows());
  Matrix a = q.transpose();
  a.row(n - 1).setOnes();
  Vector b = Vector::Zero(n);
  b(n - 1) = 1.0;
  Vector pi = a.partialPivLu().solve(b);
  double residual = (a * pi - b).cwiseAbs().maxCoeff();
  if (!pi.allFinite() || residual > 1e-9)
    throw NumericalFailure("stationary solve did not converge");
  for (int i = 0; i < n; ++i)
    if (pi(i) <= 0.0) throw NumericalFailure("stationary distribution has a nonpositive entry");
  pi /= pi.sum();
  return pi;
}

constexpr double kUniformizationSplit = 50.0;  // max Lambda*t per Poisson sum
constexpr int kUniformizationCap = 2000;

// e^{Qt} by uniformization: Poisson-weighted powers of I + Q/Lambda,
// truncated when the remaining tail mass drops below 1e-12. Large Lambda*t
// is halved recursively and squared so the n = 0 weight never underflows.
inline Matrix uniformized_exponential(const Matrix& q, double t) {
  const int n = static_cast<int>(q.rows());
  if (t == 0.0) return Matrix::Identity(n, n);
  const double lambda = -q.diagonal().minCoeff();
  if (lambda <= 0.0) return Matrix::Identity(n, n);
  if (lambda * t > kUniformizationSplit) {
    Matrix half = uniformized_exponential(q, t / 2.0);
    return half * half;
  }
  const double lt = lambda * t;
  Matrix kernel = Matrix::Identity(n, n) + q / lambda;
  Matrix power = Matrix::Identity(n, n);
  Matrix acc = Matrix::Zero(n, n);
  double weight = std::exp(-lt);
  double cumulative = 0.0;
  for (int k = 0;; ++k) {
    acc += weight * power;
    cumulative += weight;
    if (1.0 - cumulative < 1e-12) break;
    if (k >= kUniformizationCap)
      throw NumericalFailure("uniformization did not converge within the iteration cap");
    power = power * kernel;
    weight *= lt / (k + 1);
  }
  return acc;
}

// Row i of e^{Qt}; same scheme with vector iterates.
inline Vector uniformized_row(const Matrix& q, int i, double t) {
  const int n = static_cast<int>(q.rows());
  Vector e = Vector::Zero(n);
  e(i) = 1.0;
  if (t == 0.0) return e;
  const double lambda = -q.diagonal().minCoeff();
  if (lambda <= 0.0) return e;
  if (lambda * t > kUniformizationSplit) {
    Matrix p = uniformized_exponential(q, t);
    return p.row(i).transpose();
  }
  const double lt = lambda * t;
  Matrix kernel = Matrix::Identity(n, n) + q / lambda;
  Eigen::RowVectorXd iterate = e.transpose();
  Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(n);
  double weight = std::exp(-lt);
  double cumulative = 0.0;
  for (int k = 0;; ++k) {
    acc += weight * iterate;
    cumulative += weight;
    if (1.0 - cumulative < 1e-12) break;
    if (k >= kUniformizationCap)
      throw NumericalFailure("uniformization did not converge within the iteration cap");
    iterate = iterate * kernel;
    weight *= lt / (k + 1);
  }
  return acc.transpose();
}

}  // namespace detail

inline Ctmc build_ctmc(int n_states, const std::vector<RateEntry>& entries,
                       std::string label = {}) {
  if (n_states < 1) throw InvalidRate("chain needs at least one state");
  Matrix q = Matrix::Zero(n_states, n_states);
  for (const auto& e : entries) {
    if (e.from < 0 || e.from >= n_states || e.to < 0 || e.to >= n_states)
      throw InvalidRate("rate entry index out of range");
    if (e.from == e.to) throw InvalidRate("diagonal rate entries are not allowed");
    if (!std::isfinite(e.rate) || e.rate < 0.0)
      throw InvalidRate("rates must be finite and nonnegative");
    q(e.from, e.to) += e.rate;
  }
  q.diagonal() = -q.rowwise().sum();
  if (!detail::strongly_connected(q))
    throw NotIrreducible("positive-rate graph is not strongly connected");
  Ctmc chain;
  chain.n_states = n_states;
  chain.generator = std::move(q);
  chain.stationary = detail::stationary_distribution(chain.generator);
  chain.label = std::move(label);
  return chain;
}

inline bool detailed_balance_holds(const Ctmc& chain, double rel_tol = 1e-10) {
  const int n = chain.n_states;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      double a = chain.stationary(i) * chain.generator(i, j);
      double b = chain.stationary(j) * chain.generator(j, i);
      double scale = std::max(std::abs(a), std::abs(b));
      if (std::abs(a - b) > rel_tol * scale) return false;
    }
  return true;
}

inline SpectrumClass classify_spectrum(const Ctmc& chain) {
  if (detailed_balance_holds(chain)) return {SpectrumKind::Reversible, 0.0};
  Eigen::EigenSolver<Matrix> solver(chain.generator, /*computeEigenvectors=*/false);
  if (solver.info() != Eigen::Success)
    throw NumericalFailure("generator eigensolver failed");
  const auto& eigs = solver.eigenvalues();
  double max_abs = 0.0, max_imag = 0.0;
  for (int k = 0; k < eigs.size(); ++k) {
    max_abs = std::max(max_abs, std::abs(eigs(k)));
    max_imag = std::max(max_imag, std::abs(eigs(k).imag()));
  }
  if (max_imag < 1e-9 * max_abs) return {SpectrumKind::RealSpectrum, 0.0};
  return {SpectrumKind::ComplexSpectrum, max_imag};
}

inline SpectralDecomposition spectral_decompose(const Ctmc& chain) {
  if (!detailed_balance_holds(chain))
    throw NotReversible("spectral decomposition requires a time-reversible chain");
  const int n = chain.n_states;
  Vector sqrt_pi = chain.stationary.cwiseSqrt();
  Matrix sym = sqrt_pi.asDiagonal() * chain.generator *
               sqrt_pi.cwiseInverse().asDiagonal();
  sym = 0.5 * (sym + sym.transpose());  // kill asymmetric roundoff
  Eigen::SelfAdjointEigenSolver<Matrix> solver(sym);
  if (solver.info() != Eigen::Success)
    throw NumericalFailure("symmetric eigensolver failed");
  SpectralDecomposition dec;
  dec.decay_rates = Vector(n);
  dec.vectors = Matrix(n, n);
  dec.sqrt_pi = std::move(sqrt_pi);
  // Eigen sorts ascending (most negative first); flip so d(0) = 0 leads.
  for (int k = 0; k < n; ++k) {
    dec.decay_rates(k) = -solver.eigenvalues()(n - 1 - k);
    dec.vectors.row(k) = solver.eigenvectors().col(n - 1 - k).transpose();
  }
  if (std::abs(dec.decay_rates(0)) > 1e-10)
    throw NumericalFailure("leading decay rate is not zero");
  dec.decay_rates(0) = 0.0;
  if (n > 1 && dec.decay_rates(1) <= 1e-10)
    throw NumericalFailure("second decay rate is not strictly positive");
  return dec;
}

// P_{ij}(t) from the spectral form: sqrt(pi_j/pi_i) sum_k u_{ki} u_{kj} e^{-d_k t}.
inline double spectral_transition_prob(const SpectralDecomposition& dec, int i,
                                       int j, double t) {
  double sum = 0.0;
  for (int k = 0; k < dec.size(); ++k)
    sum += dec.vectors(k, i) * dec.vectors(k, j) *
           std::exp(-dec.decay_rates(k) * t);
  return dec.sqrt_pi(j) / dec.sqrt_pi(i) * sum;
}

// Full row i of P(t) from the spectral form.
inline Vector spectral_transition_row(const SpectralDecomposition& dec, int i,
                                      double t) {
  const int n = dec.size();
  Vector weights(n);
  for (int k = 0; k < n; ++k)
    weights(k) = dec.vectors(k, i) * std::exp(-dec.decay_rates(k) * t);
  Vector row = dec.vectors.transpose() * weights;
  row.array() *= dec.sqrt_pi.array() / dec.sqrt_pi(i);
  return row;
}

namespace detail {

inline double clamp_probability(double raw) {
  double clamped = std::clamp(raw, 0.0, 1.0);
  if (std::abs(raw - clamped) >= 1e-9)
    throw NumericalFailure("transition probability out of [0,1] beyond tolerance");
  return clamped;
}

}  // namespace detail

// P_{ij}(t): spectral closed form when a decomposition is supplied,
// uniformization otherwise.
inline double transition_prob(const Ctmc& chain, const SpectralDecomposition* dec,
                              int i, int j, double t) {
  if (t < 0.0) throw InvalidRate("transition_prob requires t >= 0");
  double raw = dec ? spectral_transition_prob(*dec, i, j, t)
                   : detail::uniformized_row(chain.generator, i, t)(j);
  return detail::clamp_probability(raw);
}

inline Vector transition_row(const Ctmc& chain, const SpectralDecomposition* dec,
                             int i, double t) {
  Vector row = dec ? spectral_transition_row(*dec, i, t)
                   : detail::uniformized_row(chain.generator, i, t);
  for (int j = 0; j < row.size(); ++j) row(j) = detail::clamp_probability(row(j));
  return row;
}

inline Matrix transition_matrix(const Ctmc& chain, double t) {
  if (t < 0.0) throw InvalidRate("transition_matrix requires t >= 0");
  Matrix p = detail::uniformized_exponential(chain.generator, t);
  for (int i = 0; i < p.rows(); ++i)
    for (int j = 0; j < p.cols(); ++j) p(i, j) = detail::clamp_probability(p(i, j));
  return p;
}

// Chain plus its spectrum classification, with the eigendecomposition cached
// whenever the chain is reversible. Evaluation picks the closed form when it
// can and falls back to uniformization otherwise.
class TransitionKernel {
 public:
  explicit TransitionKernel(const Ctmc& chain, bool allow_spectral = true)
      : chain_(&chain), spectrum_(classify_spectrum(chain)) {
    if (allow_spectral && spectrum_.kind == SpectrumKind::Reversible)
      dec_.emplace(spectral_decompose(chain));
  }

  const Ctmc& chain() const { return *chain_; }
  const SpectrumClass& spectrum() const { return spectrum_; }
  bool reversible() const { return dec_.has_value(); }
  const SpectralDecomposition* decomposition() const {
    return dec_ ? &*dec_ : nullptr;
  }

  double prob(int i, int j, double t) const {
    return transition_prob(*chain_, decomposition(), i, j, t);
  }
  Vector row(int i, double t) const {
    return transition_row(*chain_, decomposition(), i, t);
  }

 private:
  const Ctmc* chain_;
  SpectrumClass spectrum_;
  std::optional<SpectralDecomposition> dec_;
};

}  // namespace freshness
