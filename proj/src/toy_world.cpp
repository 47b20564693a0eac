#include "cwm/toy_world.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "cwm/io.hpp"

namespace cwm::world {

namespace fs = std::filesystem;

namespace {

constexpr double kPi = 3.14159265358979323846;

struct Landmark {
  double x, y, radius;
  double r, g, b;
};

// Fixed layout; positions chosen so any pose sees at least part of one
// landmark or the arena border within the default view span.
constexpr Landmark kLandmarks[] = {
    {0.22, 0.26, 0.085, 0.93, 0.18, 0.16},  // red
    {0.78, 0.24, 0.085, 0.98, 0.85, 0.12},  // yellow
    {0.50, 0.55, 0.075, 0.15, 0.80, 0.92},  // cyan
    {0.24, 0.78, 0.085, 0.88, 0.20, 0.86},  // magenta
    {0.76, 0.79, 0.085, 0.22, 0.85, 0.25},  // green
};

}  // namespace

void Episode::validate() const {
  if (observations.empty()) throw ValidationError("Episode: no observations");
  if (actions.size() + 1 != observations.size() || poses.size() != observations.size())
    throw ValidationError("Episode: length invariant violated (T observations, T-1 actions, T poses)");
}

float wrap_angle(double yaw) {
  double w = std::fmod(yaw + kPi, 2.0 * kPi);
  if (w < 0.0) w += 2.0 * kPi;
  w -= kPi;
  // fmod puts the seam at -pi; the convention here is (-pi, pi].
  if (w == -kPi) w = kPi;
  return static_cast<float>(w);
}

Pose step(const Pose& pose, const Action& action, const WorldConfig& cfg) {
  const double tol = 1e-6;
  if (std::abs(action.dx) > cfg.max_step + tol || std::abs(action.dy) > cfg.max_step + tol ||
      std::abs(action.dyaw) > cfg.max_turn + tol)
    throw ValidationError("step: action exceeds (max_step, max_turn) bounds");

  double dx = action.dx;
  double dy = action.dy;
  if (cfg.body_frame) {
    const double c = std::cos(pose.yaw), s = std::sin(pose.yaw);
    const double bx = dx, by = dy;
    dx = c * bx - s * by;
    dy = s * bx + c * by;
  }
  Pose next;
  next.x = static_cast<float>(std::clamp(static_cast<double>(pose.x) + dx, 0.0, 1.0));
  next.y = static_cast<float>(std::clamp(static_cast<double>(pose.y) + dy, 0.0, 1.0));
  next.yaw = wrap_angle(static_cast<double>(pose.yaw) + static_cast<double>(action.dyaw));
  return next;
}

void arena_color(double wx, double wy, double rgb[3]) {
  if (wx < 0.0 || wx > 1.0 || wy < 0.0 || wy > 1.0) {
    rgb[0] = 0.10;
    rgb[1] = 0.10;
    rgb[2] = 0.13;
    return;
  }
  // Low-frequency texture keyed to world coordinates; not rotation
  // symmetric, so yaw is observable everywhere.
  const double two_pi = 2.0 * kPi;
  rgb[0] = 0.46 + 0.30 * std::sin(two_pi * (1.7 * wx + 0.3 * wy));
  rgb[1] = 0.46 + 0.30 * std::sin(two_pi * (0.4 * wx + 2.1 * wy) + 1.1);
  rgb[2] = 0.46 + 0.30 * std::sin(two_pi * (1.2 * wx - 1.4 * wy) + 2.3);
  for (const Landmark& lm : kLandmarks) {
    const double d = std::hypot(wx - lm.x, wy - lm.y);
    if (d < lm.radius) {
      // One-pixel-ish soft rim keeps the image smooth under small motion.
      const double edge = std::clamp((lm.radius - d) / 0.012, 0.0, 1.0);
      rgb[0] = rgb[0] + edge * (lm.r - rgb[0]);
      rgb[1] = rgb[1] + edge * (lm.g - rgb[1]);
      rgb[2] = rgb[2] + edge * (lm.b - rgb[2]);
    }
  }
}

Observation render(const Pose& pose, const WorldConfig& cfg) {
  Observation obs;
  obs.height = cfg.image_size;
  obs.width = cfg.image_size;
  obs.pixels.resize(static_cast<size_t>(cfg.image_size) * cfg.image_size * 3);

  const double c = std::cos(pose.yaw), s = std::sin(pose.yaw);
  const double span = cfg.view_span;
  uint8_t* out = obs.pixels.data();
  for (int i = 0; i < cfg.image_size; ++i) {
    const double v = (static_cast<double>(i) + 0.5) / cfg.image_size - 0.5;
    for (int j = 0; j < cfg.image_size; ++j) {
      const double u = (static_cast<double>(j) + 0.5) / cfg.image_size - 0.5;
      const double ox = u * span, oy = v * span;
      const double wx = pose.x + c * ox - s * oy;
      const double wy = pose.y + s * ox + c * oy;
      double rgb[3];
      arena_color(wx, wy, rgb);
      for (int ch = 0; ch < 3; ++ch)
        *out++ = static_cast<uint8_t>(std::clamp(rgb[ch], 0.0, 1.0) * 255.0 + 0.5);
    }
  }
  return obs;
}

void write_episode(const fs::path& path, const Episode& ep) {
  ep.validate();
  io::BinWriter w(path);
  w.magic("CWM1");
  w.u32(1);  // version
  const auto T = static_cast<uint32_t>(ep.observations.size());
  w.u32(T);
  w.u32(static_cast<uint32_t>(ep.observations[0].height));
  w.u32(static_cast<uint32_t>(ep.observations[0].width));
  w.u32(3);
  w.u32(3);  // action_dim
  for (const auto& o : ep.observations) w.u8s(o.pixels.data(), o.pixels.size());
  for (const auto& a : ep.actions) {
    w.f32(a.dx);
    w.f32(a.dy);
    w.f32(a.dyaw);
  }
  for (const auto& p : ep.poses) {
    w.f32(p.x);
    w.f32(p.y);
    w.f32(p.yaw);
  }
  w.close();
}

Episode read_episode(const fs::path& path) {
  io::BinReader r(path);
  r.expect_magic("CWM1");
  const uint32_t version = r.u32();
  if (version != 1) throw IoError("unsupported episode version in " + path.string());
  const uint32_t T = r.u32();
  const uint32_t H = r.u32();
  const uint32_t W = r.u32();
  const uint32_t C = r.u32();
  const uint32_t action_dim = r.u32();
  if (C != 3 || action_dim != 3) throw IoError("unexpected channel/action layout in " + path.string());
  if (T < 1) throw IoError("empty episode in " + path.string());
  Episode ep;
  ep.observations.resize(T);
  for (auto& o : ep.observations) {
    o.height = static_cast<int>(H);
    o.width = static_cast<int>(W);
    o.pixels.resize(static_cast<size_t>(H) * W * C);
    r.u8s(o.pixels.data(), o.pixels.size());
  }
  ep.actions.resize(T - 1);
  for (auto& a : ep.actions) {
    a.dx = r.f32();
    a.dy = r.f32();
    a.dyaw = r.f32();
  }
  ep.poses.resize(T);
  for (auto& p : ep.poses) {
    p.x = r.f32();
    p.y = r.f32();
    p.yaw = r.f32();
  }
  ep.validate();
  return ep;
}

void write_manifest(const fs::path& path, const DatasetManifest& m) {
  std::ostringstream ss;
  ss << "config_hash " << m.config_hash << "\n";
  for (size_t i = 0; i < m.episode_files.size(); ++i)
    ss << m.episode_files[i] << " " << m.frame_counts[i] << "\n";
  io::write_text_file(path, ss.str());
}

DatasetManifest read_manifest(const fs::path& path) {
  DatasetManifest m;
  std::istringstream in(io::read_text_file(path));
  std::string key;
  if (!(in >> key >> m.config_hash) || key != "config_hash")
    throw IoError("manifest missing config_hash header: " + path.string());
  std::string file;
  int frames = 0;
  while (in >> file >> frames) {
    m.episode_files.push_back(file);
    m.frame_counts.push_back(frames);
  }
  return m;
}

namespace {

std::string world_config_hash(const WorldConfig& cfg, const DatasetParams& params, uint64_t seed) {
  std::ostringstream ss;
  ss << cfg.image_size << "|" << cfg.patch_size << "|" << cfg.max_step << "|" << cfg.max_turn
     << "|" << cfg.view_span << "|" << cfg.body_frame << "|" << params.n_episodes << "|"
     << params.episode_length << "|" << params.momentum << "|" << params.dwell_prob << "|"
     << seed;
  return io::hex64(fnv1a64(ss.str()));
}

}  // namespace

DatasetManifest generate_dataset(const DatasetParams& params, uint64_t seed,
                                 const WorldConfig& cfg, const fs::path& out_dir) {
  if (params.n_episodes < 0) throw ValidationError("generate_dataset: negative episode count");
  if (params.n_episodes > 0 && params.episode_length < 6)
    throw ValidationError("generate_dataset: episode_length must be >= 6");
  std::error_code ec;
  fs::create_directories(out_dir, ec);

  DatasetManifest manifest;
  manifest.config_hash = world_config_hash(cfg, params, seed);

  Rng root = Rng::for_module(seed, "toy_world.dataset");
  for (int e = 0; e < params.n_episodes; ++e) {
    Rng rng = root.fork(static_cast<uint64_t>(e));
    Episode ep;
    Pose pose;
    pose.x = static_cast<float>(rng.uniform(0.12, 0.88));
    pose.y = static_cast<float>(rng.uniform(0.12, 0.88));
    pose.yaw = wrap_angle(rng.uniform(-kPi, kPi));
    ep.poses.push_back(pose);
    ep.observations.push_back(render(pose, cfg));

    double vx = 0.0, vy = 0.0, vyaw = 0.0;
    int dwell = 0;
    for (int t = 0; t + 1 < params.episode_length; ++t) {
      if (dwell == 0 && rng.uniform() < params.dwell_prob)
        dwell = params.dwell_min + rng.uniform_int(params.dwell_max - params.dwell_min + 1);
      Action a;
      if (dwell > 0) {
        --dwell;
        vx = vy = vyaw = 0.0;
      } else {
        const double m = params.momentum;
        vx = m * vx + (1.0 - m) * rng.normal() * cfg.max_step * 1.6;
        vy = m * vy + (1.0 - m) * rng.normal() * cfg.max_step * 1.6;
        vyaw = m * vyaw + (1.0 - m) * rng.normal() * cfg.max_turn * 1.6;
        a.dx = static_cast<float>(std::clamp(vx, -cfg.max_step, cfg.max_step));
        a.dy = static_cast<float>(std::clamp(vy, -cfg.max_step, cfg.max_step));
        a.dyaw = static_cast<float>(std::clamp(vyaw, -cfg.max_turn, cfg.max_turn));
      }
      pose = step(pose, a, cfg);
      ep.actions.push_back(a);
      ep.poses.push_back(pose);
      ep.observations.push_back(render(pose, cfg));
    }

    char name[32];
    std::snprintf(name, sizeof name, "episode_%04d.cwm", e);
    write_episode(out_dir / name, ep);
    manifest.episode_files.emplace_back(name);
    manifest.frame_counts.push_back(params.episode_length);
  }
  write_manifest(out_dir / "manifest.txt", manifest);
  return manifest;
}

}  // namespace cwm::world
