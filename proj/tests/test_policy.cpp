#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "freshness/policy.hpp"
#include "freshness/simulate.hpp"

using namespace freshness;

namespace {

Ctmc sym2() { return build_ctmc(2, {{0, 1, 1.0}, {1, 0, 1.0}}); }
Ctmc asym2() { return build_ctmc(2, {{0, 1, 2.0}, {1, 0, 1.0}}); }

Ctmc bdc3() {
  return build_ctmc(
      3, {{0, 1, 1.0}, {1, 0, 1.0}, {1, 2, 1.0}, {2, 1, 1.0}});
}

Ctmc bdc4() {
  return build_ctmc(4,
                    {{0, 1, 1.0},
                     {1, 0, 0.4},
                     {1, 2, 0.8},
                     {2, 1, 0.6},
                     {2, 3, 0.5},
                     {3, 2, 1.0}});
}

Ctmc ring4() {
  return build_ctmc(
      4, {{0, 1, 1.0}, {1, 2, 0.75}, {2, 3, 1.0}, {3, 0, 0.75}});
}

// Time-average reward of one fixed action choice, computed from scratch:
// stationary law of the chosen anchor rows, then the renewal-reward ratio.
double policy_gain(const SmdpModel& model, const std::vector<int>& act) {
  const int s = model.n_states();
  Matrix p(s, s);
  for (int i = 0; i < s; ++i) p.row(i) = model.trans[act[i]].row(i);
  Matrix m = p.transpose() - Matrix::Identity(s, s);
  m.row(s - 1).setOnes();
  Vector rhs = Vector::Zero(s);
  rhs(s - 1) = 1.0;
  Vector nu = m.fullPivLu().solve(rhs);
  double reward = 0.0, time = 0.0;
  for (int i = 0; i < s; ++i) {
    reward += nu(i) * (model.fresh_time(i, act[i]) - model.gamma);
    time += nu(i) / model.actions[act[i]];
  }
  return reward / time;
}

std::pair<double, std::vector<int>> brute_best(const SmdpModel& model) {
  const int s = model.n_states(), n = model.n_actions();
  long total = 1;
  for (int i = 0; i < s; ++i) total *= n;
  std::vector<int> act(s), best_act(s, 0);
  double best = -kInf;
  for (long code = 0; code < total; ++code) {
    long rem = code;
    for (int i = 0; i < s; ++i) {
      act[i] = static_cast<int>(rem % n);
      rem /= n;
    }
    double g = policy_gain(model, act);
    if (g > best) {
      best = g;
      best_act = act;
    }
  }
  return {best, best_act};
}

bool budget_met(const ConstrainedSolution& sol, double budget) {
  return std::abs(sol.report.avg_sampling_rate - budget) <= 1e-4 * budget ||
         (sol.gamma == 0.0 && sol.report.avg_sampling_rate <= budget);
}

const EstimatorSpec kMartingale{EstimatorKind::Martingale, kInf, {}};

}  // namespace

TEST_CASE("geometric rate grid") {
  auto g = geometric_grid(0.001, 10.0, 64);
  REQUIRE(g.size() == 64);
  CHECK(g.front() == 0.001);
  CHECK(g.back() == 10.0);
  CHECK(std::is_sorted(g.begin(), g.end()));
  double ratio = g[1] / g[0];
  for (size_t k = 2; k < g.size(); ++k)
    CHECK(g[k] / g[k - 1] == Catch::Approx(ratio).epsilon(1e-9));

  auto two = geometric_grid(1.0, 4.0, 2);
  CHECK(two == std::vector<double>{1.0, 4.0});

  CHECK_THROWS_AS(geometric_grid(0.0, 1.0, 4), InvalidRate);
  CHECK_THROWS_AS(geometric_grid(2.0, 1.0, 4), InvalidRate);
  CHECK_THROWS_AS(geometric_grid(1.0, 2.0, 1), InvalidRate);
}

TEST_CASE("decision model construction") {
  Ctmc a = asym2();
  TransitionKernel k(a);
  std::vector<double> grid{0.5, 1.0, 2.0, 1e4};
  SmdpModel model = build_smdp(k, kMartingale, 0.25, grid);

  SECTION("transition integrals match closed forms") {
    // 1 - P00 under Exp(1) sampling: 2/3 - (2/3)/4.
    CHECK(model.trans[1](0, 1) == Catch::Approx(0.5).margin(1e-12));
    // P00 under Exp(1/2): 1/3 + (2/3)(0.5/3.5).
    CHECK(model.trans[0](0, 0) == Catch::Approx(3.0 / 7).margin(1e-12));
    for (size_t g = 0; g < grid.size(); ++g)
      for (int i = 0; i < 2; ++i)
        CHECK(model.trans[g].row(i).sum() == Catch::Approx(1.0).margin(1e-9));
    // Near-instant resampling pins the anchor on the current state.
    CHECK(model.trans[3](0, 0) > 0.99);
    CHECK(model.trans[3](1, 1) > 0.99);
  }

  SECTION("sojourn, price, and reward bounds") {
    CHECK(model.sojourn(2) == 0.5);
    CHECK(model.gamma == 0.25);
    CHECK(model.reward(1, 2) == model.fresh_time(1, 2) - 0.25);
    for (int i = 0; i < model.n_states(); ++i)
      for (int g = 0; g < model.n_actions(); ++g) {
        CHECK(std::isfinite(model.fresh_time(i, g)));
        CHECK(model.fresh_time(i, g) <= 1.0 / grid[g] + 1e-9);
        CHECK(model.fresh_time(i, g) > 0.0);
      }
  }

  SECTION("fresh time on the symmetric chain") {
    Ctmc s2 = sym2();
    TransitionKernel ks(s2);
    SmdpModel m2 = build_smdp(ks, kMartingale, 0.0, {1.0, 3.0});
    // 1/(2 mu) + 1/(2 (mu + 2)).
    CHECK(m2.fresh_time(0, 0) == Catch::Approx(2.0 / 3).margin(1e-12));
    CHECK(m2.fresh_time(1, 1) == Catch::Approx(4.0 / 15).margin(1e-12));
  }

  SECTION("stagewise argmax dominates holding the anchor") {
    Ctmc b = bdc4();
    TransitionKernel kb(b);
    EstimatorSpec pmap;
    std::vector<double> g4{0.05, 0.3, 1.0, 4.0};
    SmdpModel mp = build_smdp(kb, pmap, 0.0, g4);
    SmdpModel mm = build_smdp(kb, kMartingale, 0.0, g4);
    for (int i = 0; i < 4; ++i)
      for (int g = 0; g < 4; ++g)
        CHECK(mp.fresh_time(i, g) >= mm.fresh_time(i, g) - 1e-12);
  }

  SECTION("input validation") {
    CHECK_THROWS_AS(build_smdp(k, kMartingale, 0.0, {}), InvalidRate);
    CHECK_THROWS_AS(build_smdp(k, kMartingale, 0.0, {2.0, 1.0}), InvalidRate);
    CHECK_THROWS_AS(build_smdp(k, kMartingale, 0.0, {0.0, 1.0}), InvalidRate);
    CHECK_THROWS_AS(build_smdp(k, kMartingale, -0.1, {1.0, 2.0}), InvalidRate);
  }
}

TEST_CASE("policy iteration matches exhaustive enumeration") {
  SECTION("two states, full grid, several prices") {
    Ctmc a = asym2();
    TransitionKernel k(a);
    auto grid = geometric_grid(0.1, 5.0, 6);
    SmdpModel model = build_smdp(k, kMartingale, 0.0, grid);
    for (double gamma : {0.0, 0.3, 2.0}) {
      model.gamma = gamma;
      PolicyIterationResult pi = policy_iteration(model);
      auto brute = brute_best(model);
      INFO("gamma = " << gamma);
      CHECK(pi.gain == Catch::Approx(brute.first).margin(1e-10));
      CHECK(policy_gain(model, pi.action_index) ==
            Catch::Approx(brute.first).margin(1e-12));
    }
  }

  SECTION("rate-dependent stage values") {
    Ctmc a = asym2();
    TransitionKernel k(a);
    EstimatorSpec pmap;
    SmdpModel model = build_smdp(k, pmap, 0.7, geometric_grid(0.2, 4.0, 5));
    PolicyIterationResult pi = policy_iteration(model);
    CHECK(pi.gain == Catch::Approx(brute_best(model).first).margin(1e-10));
  }

  SECTION("three states") {
    Ctmc b = bdc3();
    TransitionKernel k(b);
    SmdpModel model = build_smdp(k, kMartingale, 0.4, geometric_grid(0.05, 8.0, 5));
    PolicyIterationResult pi = policy_iteration(model);
    CHECK(pi.gain == Catch::Approx(brute_best(model).first).margin(1e-10));
  }

  SECTION("price extremes pick the grid ends") {
    Ctmc a = asym2();
    TransitionKernel k(a);
    auto grid = geometric_grid(0.1, 5.0, 6);
    SmdpModel model = build_smdp(k, kMartingale, 0.0, grid);
    PolicyIterationResult free_sampling = policy_iteration(model);
    CHECK(free_sampling.policy.rates(0) == 5.0);
    CHECK(free_sampling.policy.rates(1) == 5.0);
    auto brute = brute_best(model);
    CHECK(brute.second == std::vector<int>{5, 5});
    model.gamma = 1e3;
    PolicyIterationResult costly = policy_iteration(model);
    CHECK(costly.policy.rates(0) == 0.1);
    CHECK(costly.policy.rates(1) == 0.1);
  }

  SECTION("gain equals freshness minus priced sampling") {
    Ctmc a = asym2();
    TransitionKernel k(a);
    SmdpModel model = build_smdp(k, kMartingale, 0.3, geometric_grid(0.1, 5.0, 12));
    PolicyIterationResult pi = policy_iteration(model);
    MbfReport rep = mbf_general(k, martingale_plan(a), pi.policy.rates);
    CHECK(pi.gain ==
          Catch::Approx(rep.mbf - 0.3 * rep.avg_sampling_rate).margin(1e-9));
  }
}

TEST_CASE("constrained budget solver") {
  Ctmc s2 = sym2();
  TransitionKernel ks(s2);

  SECTION("budget on the grid lands exactly and stays symmetric") {
    auto grid = geometric_grid(0.01, 2.0, 24);
    double budget = grid[15];
    ConstrainedSolution sol = solve_constrained(ks, kMartingale, budget, grid);
    REQUIRE(sol.policy.is_simple());
    CHECK(sol.policy.rates(0) == sol.policy.rates(1));
    CHECK(sol.policy.rates(0) == budget);
    CHECK(std::abs(sol.report.avg_sampling_rate - budget) <= 1e-4 * budget);
  }

  SECTION("off-grid budget on a symmetric chain falls back to uniform") {
    // Grid mixtures sit on a chord under the concave freshness curve, so
    // the uniform allocation at the budget itself must win.
    std::vector<double> grid{0.2, 0.5, 1.0, 2.0, 5.0};
    double budget = 0.8123;
    ConstrainedSolution sol = solve_constrained(ks, kMartingale, budget, grid);
    REQUIRE(sol.policy.is_simple());
    CHECK(sol.policy.rates(0) == budget);
    CHECK(sol.policy.rates(1) == budget);
    CHECK(std::abs(sol.report.avg_sampling_rate - budget) <= 1e-9);
    MbfReport direct = mbf_martingale(s2, Vector::Constant(2, budget));
    CHECK(sol.report.mbf == Catch::Approx(direct.mbf).margin(1e-9));
  }

  SECTION("uneven chain randomizes a single state") {
    Ctmc b = bdc4();
    TransitionKernel kb(b);
    std::vector<double> grid{0.01, 0.04, 0.16, 0.64};
    double budget = 0.1;
    ConstrainedSolution sol = solve_constrained(kb, kMartingale, budget, grid);
    REQUIRE_FALSE(sol.policy.is_simple());
    CHECK(sol.policy.randomized_state == 2);  // the stationary mode is starved
    CHECK(sol.policy.prob > 0.0);
    CHECK(sol.policy.prob < 1.0);
    CHECK(std::abs(sol.report.avg_sampling_rate - budget) <= 1e-4 * budget);
    auto on_grid = [&](double r) {
      return std::find(grid.begin(), grid.end(), r) != grid.end();
    };
    for (int i = 0; i < 4; ++i) CHECK(on_grid(sol.policy.rates(i)));
    CHECK(on_grid(sol.policy.other_rate));
    CHECK(sol.policy.rates(sol.policy.randomized_state) !=
          sol.policy.other_rate);
    CHECK(sol.policy_epsilon > 0.0);
    CHECK(sol.policy_epsilon < 1e-9);
    MbfReport uniform =
        evaluate_policy(kb, kMartingale, SamplingPolicy::uniform(4, budget));
    CHECK(sol.report.mbf > uniform.mbf + 0.05);

    // The randomized allocation holds up against the event simulator.
    SimConfig cfg;
    cfg.seed = 31;
    cfg.n_samples = 200000;
    SimResult sim = simulate(b, martingale_plan(b), sol.policy, cfg);
    CHECK(std::abs(sim.empirical_mbf - sol.report.mbf) <=
          std::max(3.0 * sim.std_error, 0.005));
    CHECK(std::abs(sim.empirical_omega - budget) < 0.02 * budget);
  }

  SECTION("ample budget returns the unconstrained policy") {
    std::vector<double> grid{0.5, 1.0, 2.0};
    ConstrainedSolution sol = solve_constrained(ks, kMartingale, 3.0, grid);
    CHECK(sol.gamma == 0.0);
    CHECK(sol.policy.rates(0) == 2.0);
    CHECK(sol.policy.rates(1) == 2.0);
    CHECK(sol.report.avg_sampling_rate <= 3.0);
  }

  SECTION("budget below the grid floor is infeasible") {
    std::vector<double> grid{0.5, 1.0, 2.0};
    CHECK_THROWS_AS(solve_constrained(ks, kMartingale, 0.3, grid),
                    BudgetInfeasible);
    CHECK_THROWS_AS(solve_constrained(ks, kMartingale, 0.5, grid),
                    BudgetInfeasible);
  }

  SECTION("sampling rate never rises with the price") {
    ConstrainedSolution sol = solve_constrained(ks, kMartingale, 0.37);
    auto trace = sol.omega_trace;
    REQUIRE(trace.size() >= 2);
    std::sort(trace.begin(), trace.end());
    CHECK(trace.front().first == 0.0);
    CHECK(trace.front().second > 0.37);
    for (size_t k = 1; k < trace.size(); ++k)
      CHECK(trace[k].second <= trace[k - 1].second + 1e-9);
    CHECK(budget_met(sol, 0.37));
  }
}

TEST_CASE("state-dependent allocation beats uniform sampling") {
  Ctmc b = bdc4();
  TransitionKernel kb(b);

  SECTION("hold-last estimator at a tight budget") {
    double budget = 0.1;
    ConstrainedSolution sol = solve_constrained(kb, kMartingale, budget);
    MbfReport uniform =
        evaluate_policy(kb, kMartingale, SamplingPolicy::uniform(4, budget));
    CHECK(sol.report.mbf > uniform.mbf + 0.05);
    CHECK(budget_met(sol, budget));
  }

  SECTION("integral-argmax estimator stays feasible and competitive") {
    EstimatorSpec pmap;
    double budget = 0.1;
    ConstrainedSolution sol =
        solve_constrained(kb, pmap, budget, geometric_grid(1e-3, 1.0, 24));
    MbfReport uniform =
        evaluate_policy(kb, pmap, SamplingPolicy::uniform(4, budget));
    CHECK(sol.report.mbf >= uniform.mbf - 1e-9);
    CHECK(budget_met(sol, budget));
  }

  SECTION("threshold estimator") {
    EstimatorSpec tmap{EstimatorKind::TauMap, 3.2206146213956526, {}};
    double budget = 0.1;
    ConstrainedSolution sol =
        solve_constrained(kb, tmap, budget, geometric_grid(1e-3, 1.0, 24));
    MbfReport uniform =
        evaluate_policy(kb, tmap, SamplingPolicy::uniform(4, budget));
    CHECK(sol.report.mbf >= uniform.mbf - 1e-9);
    CHECK(budget_met(sol, budget));
  }

  SECTION("oscillating ring goes through quadrature") {
    Ctmc r = ring4();
    TransitionKernel kr(r);
    double budget = 0.5;
    ConstrainedSolution sol =
        solve_constrained(kr, kMartingale, budget, geometric_grid(0.05, 5.0, 8));
    MbfReport uniform =
        evaluate_policy(kr, kMartingale, SamplingPolicy::uniform(4, budget));
    CHECK(sol.report.mbf >= uniform.mbf - 1e-9);
    CHECK(budget_met(sol, budget));
  }
}

TEST_CASE("randomized policy evaluation routes agree") {
  Ctmc s2 = sym2();
  TransitionKernel ks(s2);

  SECTION("a mixture of equal rates reduces to the simple policy") {
    SamplingPolicy mixed;
    mixed.rates = Vector::Constant(2, 1.0);
    mixed.randomized_state = 0;
    mixed.other_rate = 1.0;
    mixed.prob = 0.37;
    MbfReport via_embedded = evaluate_policy(ks, kMartingale, mixed);
    MbfReport via_joint = mbf_martingale(s2, Vector::Constant(2, 1.0));
    CHECK(via_embedded.mbf == Catch::Approx(via_joint.mbf).margin(1e-9));
    CHECK(via_embedded.avg_sampling_rate ==
          Catch::Approx(via_joint.avg_sampling_rate).margin(1e-9));
  }

  SECTION("vanishing randomization approaches the simple policy") {
    SamplingPolicy nearly;
    nearly.rates = Vector::Constant(2, 1.0);
    nearly.randomized_state = 0;
    nearly.other_rate = 4.0;
    nearly.prob = 1.0 - 1e-9;
    MbfReport rep = evaluate_policy(ks, kMartingale, nearly);
    MbfReport simple = mbf_martingale(s2, Vector::Constant(2, 1.0));
    CHECK(rep.mbf == Catch::Approx(simple.mbf).margin(1e-6));
  }

  SECTION("asymmetric mixture against the event simulator") {
    Ctmc a = asym2();
    TransitionKernel ka(a);
    SamplingPolicy ssp;
    ssp.rates = Vector(2);
    ssp.rates << 2.0, 0.7;
    ssp.randomized_state = 0;
    ssp.other_rate = 0.4;
    ssp.prob = 0.35;
    MbfReport rep = evaluate_policy(ka, kMartingale, ssp);
    SimConfig cfg;
    cfg.seed = 77;
    cfg.n_samples = 200000;
    SimResult sim = simulate(a, martingale_plan(a), ssp, cfg);
    CHECK(std::abs(sim.empirical_mbf - rep.mbf) <=
          std::max(3.0 * sim.std_error, 0.005));
    CHECK(std::abs(sim.empirical_omega - rep.avg_sampling_rate) <
          0.02 * rep.avg_sampling_rate);
  }
}
