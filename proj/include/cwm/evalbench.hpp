#pragma once

#include <filesystem>
#include <vector>

#include "cwm/idm.hpp"
#include "cwm/planner.hpp"
#include "cwm/toy_world.hpp"

namespace cwm::bench {

// Poses re-expressed relative to the trajectory's initial frame; the first
// pose becomes the identity.
struct Trajectory {
  std::vector<world::Pose> poses;

  static Trajectory from_raw(const std::vector<world::Pose>& raw);
};

struct AteResult {
  double position_rmse = 0.0;
  double yaw_rmse = 0.0;  // reported separately
};

AteResult ate(const Trajectory& pred, const Trajectory& gt);
AteResult rpe(const Trajectory& pred, const Trajectory& gt);

// Mean L1 gap between conditioning actions and the actions an IDM recovers
// from consecutive generated frames. `generated` includes `context` leading
// frames; transition j pairs frames (context-1+j, context+j) with action j.
double ape(const std::vector<tok::CompactCode>& generated,
           const std::vector<world::Action>& conditioning_actions, const idm::IdmModel& model,
           int context, Rng& rng);

struct LatencyBreakdown {
  int token_count = 0;
  double rollout_seconds = 0.0;
  double decode_seconds = 0.0;
  double cost_seconds = 0.0;
  double total_seconds = 0.0;
  int64_t rollout_calls = 0;
  int64_t decode_calls = 0;
  int64_t cost_calls = 0;
};

struct BenchParams {
  std::vector<int> token_counts{8, 16, 64, 256};
  int trials = 4;  // first trial discarded, median of the rest
  int population = 6;
  int horizon = 2;
  int rollouts_per_candidate = 1;
  int sampling_steps = 2;
  int dim = 128;
  int depth = 4;
  int heads = 4;
  plan::CostMode cost_mode = plan::CostMode::kLatent;
};

// Synthetic-weight planning latency: runs cem_plan per token count with
// instrumented phase timers and reports the per-phase medians.
std::vector<LatencyBreakdown> bench_latency(const BenchParams& params,
                                            const world::WorldConfig& world, uint64_t seed);

struct ReportInputs {
  std::vector<std::pair<std::string, double>> metrics;
  std::vector<LatencyBreakdown> latency;
  std::vector<std::pair<std::string, world::Observation>> images;
  std::string summary;
};

// CSV tables, P6 pixmaps and a plain-text summary under out_dir.
void emit_report(const ReportInputs& results, const std::filesystem::path& out_dir);

void write_observation_ppm(const world::Observation& obs, const std::filesystem::path& path);

}  // namespace cwm::bench
