#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <memory>
#include <vector>

#include "cwm/tokenizer.hpp"
#include "cwm/toy_world.hpp"
#include "cwm/world_model.hpp"

namespace cwm::plan {

using tok::CompactCode;

struct CemParams {
  int population = 80;
  int elites = 5;
  int iterations = 1;
  int rollouts_per_candidate = 3;
  int horizon = 8;
  std::array<double, 3> proposal_mean{0.0, 0.0, 0.0};
  std::array<double, 3> proposal_sigma{0.0, 0.0, 0.0};
  bool full_covariance = true;

  void validate() const;
  // Supp preset sizes with the proposal scaled from the world's bounds:
  // sigma = (0.3*max_step*H, 0.3*max_step*H, 0.5*max_turn).
  static CemParams defaults(const world::WorldConfig& world);
};

// Straight-line endpoint parameterization: one translation plus a final
// yaw rotation.
struct EndpointCandidate {
  double ux = 0.0;
  double uy = 0.0;
  double phi = 0.0;
};

// Even translation split across H steps; rotation applied only at the last.
std::vector<world::Action> to_action_seq(const EndpointCandidate& c, int horizon,
                                         const world::WorldConfig& world);

struct PhaseTimers {
  double rollout_seconds = 0.0;
  double decode_seconds = 0.0;
  double cost_seconds = 0.0;
  int64_t rollout_calls = 0;
  int64_t decode_calls = 0;
  int64_t cost_calls = 0;
};

struct PlanResult {
  EndpointCandidate best_candidate;
  double best_cost = 0.0;
  std::vector<world::Action> action_sequence;
  std::vector<EndpointCandidate> candidates;  // final iteration
  std::vector<double> cost_table;             // final iteration, per candidate
  std::array<double, 3> refit_mean{};
  std::array<std::array<double, 3>, 3> refit_cov{};
  PhaseTimers timers;
  double total_seconds = 0.0;
};

class RolloutBackend {
 public:
  virtual ~RolloutBackend() = default;
  // Mean final-frame cost over `rollouts` stochastic rollouts per candidate.
  virtual std::vector<double> evaluate(const std::vector<std::vector<world::Action>>& seqs,
                                       int rollouts, Rng& rng, PhaseTimers& timers) = 0;
};

// Ground-truth simulator wired behind the rollout interface; cost is mean
// per-pixel L1 between the final true render and the goal render.
class OracleBackend : public RolloutBackend {
 public:
  OracleBackend(const world::WorldConfig& cfg, const world::Pose& start,
                const world::Observation& goal_obs);
  std::vector<double> evaluate(const std::vector<std::vector<world::Action>>& seqs, int rollouts,
                               Rng& rng, PhaseTimers& timers) override;

 private:
  world::WorldConfig cfg_;
  world::Pose start_;
  world::Observation goal_;
};

enum class CostMode { kPixel, kLatent };

double latent_cost(const CompactCode& a, const CompactCode& b, const fsq::FsqLevels& levels);
// Mean per-pixel L1 (pixels in [0,1]) between the decode-pipeline outputs
// of the two codes; decoding is seeded so identical codes cost exactly 0.
double pixel_cost(const CompactCode& a, const CompactCode& b, const tok::Tokenizer& tokenizer,
                  uint64_t decode_seed = 0x9E3779B9u);

// Learned world model behind the rollout interface. The goal latent (and,
// in pixel mode, its decode) is computed once and cached.
class WmBackend : public RolloutBackend {
 public:
  WmBackend(const wm::WorldModel* model, const tok::Tokenizer* tokenizer,
            std::vector<CompactCode> history, CompactCode z_goal, CostMode mode,
            int sampling_steps, uint64_t decode_seed = 0x9E3779B9u);
  std::vector<double> evaluate(const std::vector<std::vector<world::Action>>& seqs, int rollouts,
                               Rng& rng, PhaseTimers& timers) override;

 private:
  const wm::WorldModel* model_;
  const tok::Tokenizer* tokenizer_;
  std::vector<CompactCode> history_;
  CompactCode z_goal_;
  CostMode mode_;
  int sampling_steps_;
  uint64_t decode_seed_;
  std::vector<float> goal_pixels_;  // pixel mode cache, [0,1]
};

struct RefitResult {
  std::array<double, 3> mean{};
  std::array<std::array<double, 3>, 3> cov{};
  std::vector<int> elite_indices;  // sorted by (cost, index)
};

// Top-K selection and Gaussian refit (elite mean and population covariance
// over the elites), in deterministic index order.
RefitResult select_elites_and_refit(const std::vector<EndpointCandidate>& candidates,
                                    const std::vector<double>& costs, int k);

PlanResult cem_plan(RolloutBackend& backend, const CemParams& params,
                    const world::WorldConfig& world, Rng& rng);

void write_plan_report(const std::filesystem::path& prefix, const PlanResult& result);

struct ClosedLoopResult {
  std::vector<world::Pose> trajectory;
  std::vector<world::Observation> observations;
  std::vector<world::Action> executed;
  bool success = false;
  int steps_used = 0;
  bool aborted = false;
};

// Receives the loop state so far (current pose/observation at the back,
// full executed history available for world-model context windows).
using PlannerFn = std::function<PlanResult(const ClosedLoopResult& so_far, Rng& rng)>;

// Receding-horizon loop: plan, execute the first replan_every actions in
// the true environment, re-observe, repeat. Success when the position is
// within `tolerance` of the goal.
ClosedLoopResult closed_loop_run(const world::WorldConfig& cfg, const world::Pose& start,
                                 const world::Pose& goal, const PlannerFn& planner,
                                 int replan_every, int max_steps, double tolerance, Rng& rng);

}  // namespace cwm::plan
