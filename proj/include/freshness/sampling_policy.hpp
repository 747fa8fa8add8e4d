#pragma once

#include <cmath>

#include "freshness/ctmc.hpp"
#include "freshness/errors.hpp"

namespace freshness {

// State-dependent sampling rates. A simple policy is one rate per state; a
// semi-simple policy additionally randomizes one state between its primary
// rate and other_rate, picking the primary with probability prob.
struct SamplingPolicy {
  Vector rates;
  int randomized_state = -1;
  double other_rate = 0.0;
  double prob = 1.0;

  bool is_simple() const { return randomized_state < 0; }

  double expected_rate(int i) const {
    if (i != randomized_state) return rates(i);
    return prob * rates(i) + (1.0 - prob) * other_rate;
  }

  static SamplingPolicy uniform(int n_states, double rate) {
    SamplingPolicy p;
    p.rates = Vector::Constant(n_states, rate);
    return p;
  }
};

inline void validate_policy(const SamplingPolicy& policy, int n_states) {
  if (policy.rates.size() != n_states)
    throw InvalidRate("policy needs one rate per state");
  for (int i = 0; i < n_states; ++i)
    if (!(policy.rates(i) > 0.0) || !std::isfinite(policy.rates(i)))
      throw InvalidRate("sampling rates must be positive and finite");
  if (!policy.is_simple()) {
    if (policy.randomized_state >= n_states)
      throw InvalidRate("randomized state out of range");
    if (!(policy.other_rate > 0.0) || !std::isfinite(policy.other_rate))
      throw InvalidRate("randomized rate must be positive and finite");
    if (!(policy.prob > 0.0) || !(policy.prob < 1.0))
      throw InvalidRate("randomization probability must lie in (0, 1)");
  }
}

}  // namespace freshness
