#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cwm/planner.hpp"

using namespace cwm;
using plan::CemParams;
using plan::EndpointCandidate;

namespace {

world::WorldConfig test_world() {
  world::WorldConfig w;
  w.max_step = 0.1;
  w.max_turn = 1.6;
  return w;
}

// Deterministic stub: cost is the squared distance of the candidate's
// endpoint to a target, recovered from the action sequence.
class QuadraticBackend final : public plan::RolloutBackend {
 public:
  QuadraticBackend(double tx, double ty, double tphi) : tx_(tx), ty_(ty), tphi_(tphi) {}
  std::vector<double> evaluate(const std::vector<std::vector<world::Action>>& seqs, int rollouts,
                               Rng&, plan::PhaseTimers& timers) override {
    std::vector<double> costs;
    for (const auto& seq : seqs) {
      double ux = 0.0, uy = 0.0, phi = 0.0;
      for (const auto& a : seq) {
        ux += a.dx;
        uy += a.dy;
        phi += a.dyaw;
      }
      timers.rollout_calls += static_cast<int64_t>(seq.size()) * rollouts;
      const double c = (ux - tx_) * (ux - tx_) + (uy - ty_) * (uy - ty_) +
                       0.25 * (phi - tphi_) * (phi - tphi_);
      costs.push_back(c);
    }
    return costs;
  }

 private:
  double tx_, ty_, tphi_;
};

}  // namespace

TEST_CASE("to_action_seq splits translation evenly, rotation last") {
  const auto w = test_world();
  const auto zero = plan::to_action_seq({0.0, 0.0, 0.0}, 8, w);
  CHECK(zero.size() == 8);
  for (const auto& a : zero) {
    CHECK(a.dx == 0.0f);
    CHECK(a.dy == 0.0f);
    CHECK(a.dyaw == 0.0f);
  }

  const auto seq = plan::to_action_seq({0.8, 0.0, M_PI / 2}, 8, w);
  for (int t = 0; t < 7; ++t) {
    CHECK(seq[static_cast<size_t>(t)].dx == doctest::Approx(0.1));
    CHECK(seq[static_cast<size_t>(t)].dy == doctest::Approx(0.0));
    CHECK(seq[static_cast<size_t>(t)].dyaw == 0.0f);
  }
  CHECK(seq[7].dx == doctest::Approx(0.1));
  CHECK(seq[7].dyaw == doctest::Approx(M_PI / 2));

  const auto one = plan::to_action_seq({0.05, -0.03, 0.4}, 1, w);
  CHECK(one.size() == 1);
  CHECK(one[0].dx == doctest::Approx(0.05));
  CHECK(one[0].dy == doctest::Approx(-0.03));
  CHECK(one[0].dyaw == doctest::Approx(0.4));

  CHECK_THROWS_AS(plan::to_action_seq({2.0, 0.0, 0.0}, 8, w), ValidationError);
  CHECK_THROWS_AS(plan::to_action_seq({0.0, 0.0, 2.0}, 8, w), ValidationError);
}

TEST_CASE("elite refit matches hand-computed statistics on a 10-candidate fixture") {
  // Fixed fixture: cost ranks candidates by index except a few swaps.
  std::vector<EndpointCandidate> candidates = {
      {0.10, 0.20, 0.05},  {0.30, -0.10, 0.00}, {-0.20, 0.15, -0.10}, {0.05, 0.05, 0.20},
      {0.25, 0.25, -0.05}, {0.40, 0.00, 0.10},  {-0.10, -0.20, 0.15}, {0.15, 0.30, -0.20},
      {0.00, 0.10, 0.00},  {0.20, -0.05, 0.08}};
  std::vector<double> costs = {0.9, 0.1, 0.5, 0.3, 0.2, 1.5, 1.1, 0.7, 0.25, 1.3};
  const int k = 5;
  const auto refit = plan::select_elites_and_refit(candidates, costs, k);
  // elites by cost: indices 1 (0.1), 4 (0.2), 8 (0.25), 3 (0.3), 2 (0.5)
  CHECK(refit.elite_indices == std::vector<int>{1, 4, 8, 3, 2});

  const int elite[] = {1, 4, 8, 3, 2};
  double mean[3] = {0, 0, 0};
  for (int idx : elite) {
    mean[0] += candidates[static_cast<size_t>(idx)].ux;
    mean[1] += candidates[static_cast<size_t>(idx)].uy;
    mean[2] += candidates[static_cast<size_t>(idx)].phi;
  }
  for (double& m : mean) m /= k;
  double cov[3][3] = {};
  for (int idx : elite) {
    const double d[3] = {candidates[static_cast<size_t>(idx)].ux - mean[0],
                         candidates[static_cast<size_t>(idx)].uy - mean[1],
                         candidates[static_cast<size_t>(idx)].phi - mean[2]};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) cov[i][j] += d[i] * d[j];
  }
  for (int i = 0; i < 3; ++i) {
    CHECK(refit.mean[static_cast<size_t>(i)] == doctest::Approx(mean[i]).epsilon(1e-14));
    for (int j = 0; j < 3; ++j)
      CHECK(refit.cov[static_cast<size_t>(i)][static_cast<size_t>(j)] ==
            doctest::Approx(cov[i][j] / k).epsilon(1e-14));
  }
}

TEST_CASE("refit validates inputs") {
  std::vector<EndpointCandidate> c(3);
  std::vector<double> costs{1.0, 2.0};
  CHECK_THROWS_AS(plan::select_elites_and_refit(c, costs, 2), ValidationError);
  costs.push_back(3.0);
  CHECK_THROWS_AS(plan::select_elites_and_refit(c, costs, 4), ValidationError);
}

TEST_CASE("cem finds the quadratic optimum with a couple of iterations") {
  const auto w = test_world();
  CemParams params = CemParams::defaults(w);
  params.population = 64;
  params.iterations = 3;
  params.rollouts_per_candidate = 2;
  QuadraticBackend backend(0.45, -0.3, 0.5);
  Rng rng(12);
  const auto result = plan::cem_plan(backend, params, w, rng);
  // Small-K CEM shrinks the proposal quickly, so expect coarse convergence.
  CHECK(std::abs(result.best_candidate.ux - 0.45) < 0.1);
  CHECK(std::abs(result.best_candidate.uy + 0.3) < 0.1);
  CHECK(std::abs(result.best_candidate.phi - 0.5) < 0.25);
  CHECK(result.best_cost < 0.03);
  CHECK(result.best_cost == doctest::Approx(*std::min_element(result.cost_table.begin(),
                                                              result.cost_table.end())));
  // argmin contract: the returned sequence reproduces the best candidate
  const auto seq = plan::to_action_seq(result.best_candidate, params.horizon, w);
  REQUIRE(seq.size() == result.action_sequence.size());
  for (size_t i = 0; i < seq.size(); ++i) {
    CHECK(seq[i].dx == result.action_sequence[i].dx);
    CHECK(seq[i].dy == result.action_sequence[i].dy);
    CHECK(seq[i].dyaw == result.action_sequence[i].dyaw);
  }
}

TEST_CASE("cem is deterministic under a fixed seed") {
  const auto w = test_world();
  CemParams params = CemParams::defaults(w);
  params.population = 20;
  params.iterations = 2;
  QuadraticBackend backend(0.2, 0.2, 0.0);
  Rng a(3), b(3);
  const auto ra = plan::cem_plan(backend, params, w, a);
  const auto rb = plan::cem_plan(backend, params, w, b);
  CHECK(ra.best_candidate.ux == rb.best_candidate.ux);
  CHECK(ra.best_candidate.uy == rb.best_candidate.uy);
  CHECK(ra.best_candidate.phi == rb.best_candidate.phi);
  CHECK(ra.cost_table == rb.cost_table);
}

TEST_CASE("cem params validate") {
  const auto w = test_world();
  CemParams params = CemParams::defaults(w);
  params.elites = params.population + 1;
  QuadraticBackend backend(0, 0, 0);
  Rng rng(1);
  CHECK_THROWS_AS(plan::cem_plan(backend, params, w, rng), ValidationError);
  CemParams zero_sigma = CemParams::defaults(w);
  zero_sigma.proposal_sigma[0] = 0.0;
  CHECK_THROWS_AS(plan::cem_plan(backend, zero_sigma, w, rng), ValidationError);
}

TEST_CASE("oracle planning with the goal at the start returns a near-null candidate") {
  world::WorldConfig w;  // defaults: max_step 0.05, max_turn 0.25
  const world::Pose start{0.45f, 0.55f, 0.2f};
  const auto goal_obs = world::render(start, w);
  plan::OracleBackend backend(w, start, goal_obs);
  CemParams params = CemParams::defaults(w);
  params.iterations = 2;
  Rng rng(2024);
  const auto result = plan::cem_plan(backend, params, w, rng);
  CHECK(std::hypot(result.best_candidate.ux, result.best_candidate.uy) <= 0.05);
  CHECK(std::abs(result.best_candidate.phi) <= 0.1);
}

TEST_CASE("oracle planning reaches a translated goal within 0.05 after execution") {
  world::WorldConfig w;
  const world::Pose start{0.35f, 0.5f, 0.0f};
  world::Pose goal = start;
  goal.x += 0.3f;
  const auto goal_obs = world::render(goal, w);
  plan::OracleBackend backend(w, start, goal_obs);
  CemParams params = CemParams::defaults(w);
  params.iterations = 3;  // iteration count is free here; the preset run lives in acceptance
  Rng rng(7);
  const auto result = plan::cem_plan(backend, params, w, rng);
  world::Pose pose = start;
  for (const auto& a : result.action_sequence) pose = world::step(pose, a, w);
  CHECK(std::hypot(pose.x - goal.x, pose.y - goal.y) <= 0.05);
}

TEST_CASE("closed loop with the goal at the start succeeds in zero steps") {
  world::WorldConfig w;
  const world::Pose start{0.5f, 0.5f, 0.0f};
  int plans = 0;
  plan::PlannerFn planner = [&](const plan::ClosedLoopResult&, Rng&) {
    ++plans;
    plan::PlanResult r;
    r.action_sequence.assign(4, world::Action{});
    return r;
  };
  Rng rng(1);
  const auto result = plan::closed_loop_run(w, start, start, planner, 2, 10, 0.05, rng);
  CHECK(result.success);
  CHECK(result.steps_used == 0);
  CHECK(plans == 0);
}

TEST_CASE("oracle closed loop reaches a reachable goal") {
  world::WorldConfig w;
  const world::Pose start{0.4f, 0.4f, 0.3f};
  world::Pose goal = start;
  goal.x += 0.25f;
  goal.y += 0.1f;
  const auto goal_obs = world::render(goal, w);
  CemParams params = CemParams::defaults(w);
  plan::PlannerFn planner = [&](const plan::ClosedLoopResult& so_far, Rng& prng) {
    plan::OracleBackend backend(w, so_far.trajectory.back(), goal_obs);
    return plan::cem_plan(backend, params, w, prng);
  };
  Rng rng(5);
  const auto result = plan::closed_loop_run(w, start, goal, planner, 2, 16, 0.05, rng);
  CHECK(result.success);
  CHECK(result.steps_used > 0);
  CHECK(result.trajectory.size() == static_cast<size_t>(result.steps_used) + 1);
}

TEST_CASE("latent cost: identity, symmetry, dimension check") {
  fsq::FsqLevels levels;
  tok::CompactCode a{0, 100, 2000, 63999};
  tok::CompactCode b{5, 100, 1999, 0};
  CHECK(plan::latent_cost(a, a, levels) == 0.0);
  CHECK(plan::latent_cost(a, b, levels) == doctest::Approx(plan::latent_cost(b, a, levels)));
  CHECK(plan::latent_cost(a, b, levels) > 0.0);
  tok::CompactCode c{1, 2};
  CHECK_THROWS_AS(plan::latent_cost(a, c, levels), DimensionError);
}
