#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "freshness/ctmc.hpp"
#include "freshness/errors.hpp"
#include "freshness/estimators.hpp"
#include "freshness/sampling_policy.hpp"

namespace freshness {

struct SimConfig {
  std::uint64_t seed = 1;
  long n_samples = 100000;
  long warmup_samples = -1;  // negative: 1% of n_samples
  int n_batches = 50;
};

struct SimResult {
  double empirical_mbf = 0.0;
  double std_error = 0.0;
  double empirical_omega = 0.0;
  Vector empirical_pi_tilde;          // time share per estimator anchor
  Vector empirical_source_occupancy;  // time share per source state
  double elapsed_sim_time = 0.0;      // post-warmup simulated time
  long n_samples = 0;                 // post-warmup epochs
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// mt19937_64 with fixed bit-to-double mappings, so results are identical
// across standard libraries.
class SimRng {
 public:
  explicit SimRng(std::uint64_t seed) : gen_(seed) {}

  double uniform() { return (gen_() >> 11) * 0x1.0p-53; }

  double exponential(double rate) {
    if (!(rate > 0.0)) return kInf;
    return -std::log1p(-uniform()) / rate;
  }

  // Index into a cumulative-probability table (last entry 1).
  int pick(const std::vector<double>& cumulative) {
    double u = uniform();
    for (size_t k = 0; k + 1 < cumulative.size(); ++k)
      if (u < cumulative[k]) return static_cast<int>(k);
    return static_cast<int>(cumulative.size()) - 1;
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace detail

// Time inside [lo, hi) that the plan's stage list for one anchor spends on
// `value`. The simulator slices every inter-event interval through this, so
// freshness accrues exactly, with no time discretization.
inline double stage_overlap(const StateStages& st, int value, double lo,
                            double hi) {
  double total = 0.0;
  for (size_t k = 0; k < st.values.size(); ++k) {
    if (st.values[k] != value) continue;
    double a = std::max(lo, st.boundaries[k]);
    double b = std::min(hi, st.boundaries[k + 1]);
    if (b > a) total += b - a;
  }
  return total;
}

inline SimResult simulate(const Ctmc& chain, const StagePlan& plan,
                          const SamplingPolicy& policy,
                          const SimConfig& config) {
  const int s = chain.n_states;
  validate_plan(plan, s);
  validate_policy(policy, s);
  if (config.n_samples < 1) throw InvalidRate("n_samples must be at least 1");
  long warmup = config.warmup_samples >= 0 ? config.warmup_samples
                                           : config.n_samples / 100;
  if (warmup >= config.n_samples)
    throw InvalidRate("warmup must leave at least one accumulated epoch");
  int n_batches = std::max(1, config.n_batches);

  // Flatten chain data for the event loop.
  std::vector<double> exit_rate(s);
  std::vector<std::vector<double>> jump_cdf(s);
  std::vector<double> pi_cdf(s);
  {
    double acc = 0.0;
    for (int i = 0; i < s; ++i) {
      exit_rate[i] = chain.exit_rate(i);
      acc += chain.stationary(i);
      pi_cdf[i] = acc;
      jump_cdf[i].reserve(s);
      double jacc = 0.0;
      for (int j = 0; j < s; ++j) {
        if (j != i && exit_rate[i] > 0.0)
          jacc += chain.generator(i, j) / exit_rate[i];
        jump_cdf[i].push_back(jacc);
      }
      // Pin the tail at exactly 1 so roundoff cannot select the self state.
      for (int j = s - 1; j >= 0; --j) {
        jump_cdf[i][j] = 1.0;
        if (j != i) break;
      }
    }
    pi_cdf[s - 1] = 1.0;
  }

  detail::SimRng rng(config.seed);
  int source = rng.pick(pi_cdf);
  int anchor = source;  // a sample is taken at t = 0

  const long accumulated = config.n_samples - warmup;
  const long batch_size = std::max<long>(1, accumulated / n_batches);

  SimResult result;
  result.empirical_pi_tilde = Vector::Zero(s);
  result.empirical_source_occupancy = Vector::Zero(s);
  double total_fresh = 0.0;
  std::vector<double> batch_fresh, batch_time;
  double cur_fresh = 0.0, cur_time = 0.0;

  for (long epoch = 0; epoch < config.n_samples; ++epoch) {
    bool record = epoch >= warmup;
    double mu = policy.rates(anchor);
    if (anchor == policy.randomized_state && rng.uniform() >= policy.prob)
      mu = policy.other_rate;
    double query_at = rng.exponential(mu);
    const StateStages& st = plan.per_state[anchor];

    double fresh = 0.0;
    double t = 0.0;
    while (t < query_at) {
      double seg_end = std::min(t + rng.exponential(exit_rate[source]), query_at);
      fresh += stage_overlap(st, source, t, seg_end);
      if (record) result.empirical_source_occupancy(source) += seg_end - t;
      if (seg_end >= query_at) break;
      source = rng.pick(jump_cdf[source]);
      t = seg_end;
    }

    if (record) {
      total_fresh += fresh;
      result.empirical_pi_tilde(anchor) += query_at;
      cur_fresh += fresh;
      cur_time += query_at;
      long done = epoch - warmup + 1;
      if (done % batch_size == 0 || done == accumulated) {
        batch_fresh.push_back(cur_fresh);
        batch_time.push_back(cur_time);
        cur_fresh = cur_time = 0.0;
      }
    }
    anchor = source;
  }

  result.elapsed_sim_time = result.empirical_pi_tilde.sum();
  result.n_samples = accumulated;
  result.empirical_mbf = total_fresh / result.elapsed_sim_time;
  result.empirical_omega = accumulated / result.elapsed_sim_time;
  result.empirical_pi_tilde /= result.elapsed_sim_time;
  result.empirical_source_occupancy /= result.elapsed_sim_time;

  // Batch-means standard error on the per-batch freshness ratios.
  size_t b = batch_fresh.size();
  if (b >= 2) {
    double mean = 0.0;
    for (size_t k = 0; k < b; ++k) mean += batch_fresh[k] / batch_time[k];
    mean /= b;
    double var = 0.0;
    for (size_t k = 0; k < b; ++k) {
      double d = batch_fresh[k] / batch_time[k] - mean;
      var += d * d;
    }
    result.std_error = std::sqrt(var / (b * (b - 1.0)));
  }
  return result;
}

inline std::uint64_t derive_seed(std::uint64_t seed, long rep) {
  return detail::splitmix64(
      seed ^ detail::splitmix64(0x517cc1b727220a95ULL *
                                static_cast<std::uint64_t>(rep + 1)));
}

inline std::vector<SimResult> replicate(const Ctmc& chain,
                                        const StagePlan& plan,
                                        const SamplingPolicy& policy,
                                        const SimConfig& config, int n_reps) {
  if (n_reps < 1) throw InvalidRate("n_reps must be at least 1");
  std::vector<SimResult> results;
  results.reserve(n_reps);
  for (int r = 0; r < n_reps; ++r) {
    SimConfig derived = config;
    derived.seed = derive_seed(config.seed, r);
    results.push_back(simulate(chain, plan, policy, derived));
  }
  return results;
}

// Time-weighted merge; the pooled error combines within-run errors, so the
// merge is associative and order-independent.
inline SimResult pool(const std::vector<SimResult>& results) {
  if (results.empty()) throw InvalidRate("nothing to pool");
  SimResult out;
  int s = static_cast<int>(results.front().empirical_pi_tilde.size());
  out.empirical_pi_tilde = Vector::Zero(s);
  out.empirical_source_occupancy = Vector::Zero(s);
  double fresh = 0.0, var = 0.0;
  for (const auto& r : results) {
    double t = r.elapsed_sim_time;
    fresh += r.empirical_mbf * t;
    var += (r.std_error * t) * (r.std_error * t);
    out.empirical_pi_tilde += r.empirical_pi_tilde * t;
    out.empirical_source_occupancy += r.empirical_source_occupancy * t;
    out.elapsed_sim_time += t;
    out.n_samples += r.n_samples;
  }
  out.empirical_mbf = fresh / out.elapsed_sim_time;
  out.std_error = std::sqrt(var) / out.elapsed_sim_time;
  out.empirical_omega = out.n_samples / out.elapsed_sim_time;
  out.empirical_pi_tilde /= out.elapsed_sim_time;
  out.empirical_source_occupancy /= out.elapsed_sim_time;
  return out;
}

}  // namespace freshness
