#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cwm/errors.hpp"
#include "cwm/rng.hpp"

namespace cwm::world {

// Poses and actions are stored as f32 so that replaying recorded actions
// through step() reproduces recorded poses exactly.
struct Pose {
  float x = 0.0f;
  float y = 0.0f;
  float yaw = 0.0f;  // radians in (-pi, pi]
};

struct Action {
  float dx = 0.0f;
  float dy = 0.0f;
  float dyaw = 0.0f;
};

struct Observation {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> pixels;  // H*W*3 row-major RGB

  size_t size() const { return pixels.size(); }
};

struct WorldConfig {
  int image_size = 64;
  int patch_size = 8;
  double max_step = 0.05;   // per-axis translation bound
  double max_turn = 0.25;   // yaw bound, radians
  double view_span = 0.60;  // arena units visible across the image
  bool body_frame = false;  // default: world-frame action deltas

  int patches_per_side() const { return image_size / patch_size; }
  int n_patches() const { return patches_per_side() * patches_per_side(); }
};

struct Episode {
  std::vector<Observation> observations;
  std::vector<Action> actions;  // size = observations.size() - 1
  std::vector<Pose> poses;      // ground truth, evaluation only

  void validate() const;
};

float wrap_angle(double yaw);

// Unit-arena clamped kinematics; each step spans a fixed 0.25 s interval.
Pose step(const Pose& pose, const Action& action, const WorldConfig& cfg);

// Deterministic egocentric raster: a view_span window of the arena
// translated by (-x, -y) and rotated by -yaw. Textured background plus
// fixed colored landmarks; outside-arena area renders as a dark border.
Observation render(const Pose& pose, const WorldConfig& cfg);

// World-frame color sample, exposed for oracle-style checks.
void arena_color(double wx, double wy, double rgb_out[3]);

struct DatasetParams {
  int n_episodes = 64;
  int episode_length = 32;     // frames per episode
  double momentum = 0.78;      // velocity smoothing of the random walk
  double dwell_prob = 0.06;    // chance per step to start a stationary hold
  int dwell_min = 1;
  int dwell_max = 3;
};

struct DatasetManifest {
  std::vector<std::string> episode_files;
  std::vector<int> frame_counts;
  std::string config_hash;
};

// Momentum-smoothed random-walk episodes executed through step + render.
DatasetManifest generate_dataset(const DatasetParams& params, uint64_t seed,
                                 const WorldConfig& cfg, const std::filesystem::path& out_dir);

void write_episode(const std::filesystem::path& path, const Episode& ep);
Episode read_episode(const std::filesystem::path& path);

void write_manifest(const std::filesystem::path& path, const DatasetManifest& m);
DatasetManifest read_manifest(const std::filesystem::path& path);

}  // namespace cwm::world
