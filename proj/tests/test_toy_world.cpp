#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "cwm/io.hpp"
#include "cwm/toy_world.hpp"

using namespace cwm;
using world::Action;
using world::Pose;
using world::WorldConfig;

namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* name) {
  const auto dir = fs::temp_directory_path() / "cwm_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

double pixel_l1(const world::Observation& a, const world::Observation& b) {
  double d = 0.0;
  for (size_t i = 0; i < a.pixels.size(); ++i)
    d += std::abs(static_cast<double>(a.pixels[i]) - static_cast<double>(b.pixels[i]));
  return d / static_cast<double>(a.pixels.size());
}

}  // namespace

TEST_CASE("step: zero action keeps the pose") {
  WorldConfig cfg;
  const Pose p{0.5f, 0.5f, 0.0f};
  const Pose q = world::step(p, Action{0, 0, 0}, cfg);
  CHECK(q.x == p.x);
  CHECK(q.y == p.y);
  CHECK(q.yaw == p.yaw);
}

TEST_CASE("step: direct addition within bounds") {
  WorldConfig cfg;
  cfg.max_step = 0.1;
  cfg.max_turn = 1.6;
  const Pose q = world::step(Pose{0.5f, 0.5f, 0.0f},
                             Action{0.1f, 0.0f, static_cast<float>(M_PI / 2)}, cfg);
  CHECK(q.x == doctest::Approx(0.6).epsilon(1e-6));
  CHECK(q.y == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(q.yaw == doctest::Approx(M_PI / 2).epsilon(1e-6));
}

TEST_CASE("step clamps at the arena boundary") {
  WorldConfig cfg;
  cfg.max_step = 0.1;
  const Pose q = world::step(Pose{0.99f, 0.5f, 0.0f}, Action{0.1f, 0.0f, 0.0f}, cfg);
  CHECK(q.x == doctest::Approx(1.0));
  CHECK(q.y == doctest::Approx(0.5));
}

TEST_CASE("step rejects out-of-bound actions") {
  WorldConfig cfg;
  CHECK_THROWS_AS(world::step(Pose{0.5f, 0.5f, 0.0f},
                              Action{static_cast<float>(cfg.max_step * 2), 0, 0}, cfg),
                  ValidationError);
}

TEST_CASE("step composition is consistent") {
  WorldConfig cfg;
  const Action a1{0.03f, -0.02f, 0.1f};
  const Action a2{-0.01f, 0.04f, -0.2f};
  Pose p{0.4f, 0.6f, 0.3f};
  const Pose via = world::step(world::step(p, a1, cfg), a2, cfg);
  Pose q = p;
  for (const Action& a : {a1, a2}) q = world::step(q, a, cfg);
  CHECK(via.x == q.x);
  CHECK(via.y == q.y);
  CHECK(via.yaw == q.yaw);
}

TEST_CASE("body-frame option rotates the translation") {
  WorldConfig cfg;
  cfg.body_frame = true;
  cfg.max_step = 0.1;
  const Pose q = world::step(Pose{0.5f, 0.5f, static_cast<float>(M_PI / 2)},
                             Action{0.1f, 0.0f, 0.0f}, cfg);
  CHECK(q.x == doctest::Approx(0.5).epsilon(1e-5));
  CHECK(q.y == doctest::Approx(0.6).epsilon(1e-5));
}

TEST_CASE("yaw wraps to (-pi, pi]") {
  CHECK(world::wrap_angle(M_PI) == doctest::Approx(M_PI));
  CHECK(world::wrap_angle(-M_PI) == doctest::Approx(M_PI));
  CHECK(world::wrap_angle(3 * M_PI / 2) == doctest::Approx(-M_PI / 2));
}

TEST_CASE("render is deterministic") {
  WorldConfig cfg;
  const Pose p{0.37f, 0.61f, 0.8f};
  const auto a = world::render(p, cfg);
  const auto b = world::render(p, cfg);
  CHECK(a.pixels == b.pixels);
  CHECK(a.pixels.size() == static_cast<size_t>(64 * 64 * 3));
}

TEST_CASE("opposite yaws render differently") {
  WorldConfig cfg;
  Rng rng(17);
  for (int i = 0; i < 20; ++i) {
    Pose p;
    p.x = static_cast<float>(rng.uniform(0.2, 0.8));
    p.y = static_cast<float>(rng.uniform(0.2, 0.8));
    p.yaw = static_cast<float>(rng.uniform(-3.0, 3.0));
    Pose q = p;
    q.yaw = world::wrap_angle(p.yaw + M_PI);
    CHECK(pixel_l1(world::render(p, cfg), world::render(q, cfg)) > 0.0);
  }
}

TEST_CASE("render separates poses more than 0.05 apart") {
  WorldConfig cfg;
  Rng rng(18);
  for (int i = 0; i < 1000; ++i) {
    Pose p, q;
    p.x = static_cast<float>(rng.uniform(0.0, 1.0));
    p.y = static_cast<float>(rng.uniform(0.0, 1.0));
    p.yaw = static_cast<float>(rng.uniform(-3.1, 3.1));
    q.x = static_cast<float>(rng.uniform(0.0, 1.0));
    q.y = static_cast<float>(rng.uniform(0.0, 1.0));
    q.yaw = p.yaw;
    if (std::hypot(p.x - q.x, p.y - q.y) <= 0.05) continue;
    REQUIRE(pixel_l1(world::render(p, cfg), world::render(q, cfg)) > 0.0);
  }
}

TEST_CASE("a pose at a landmark center sees the landmark color in the image center") {
  WorldConfig cfg;
  // First landmark is red-ish at (0.22, 0.26).
  const auto obs = world::render(Pose{0.22f, 0.26f, 0.0f}, cfg);
  const int mid = 32;
  double r = 0, g = 0, b = 0;
  int count = 0;
  for (int i = mid - 4; i < mid + 4; ++i)
    for (int j = mid - 4; j < mid + 4; ++j) {
      const size_t at = (static_cast<size_t>(i) * 64 + j) * 3;
      r += obs.pixels[at];
      g += obs.pixels[at + 1];
      b += obs.pixels[at + 2];
      ++count;
    }
  CHECK(r / count > 180.0);
  CHECK(g / count < 110.0);
  CHECK(b / count < 110.0);
}

TEST_CASE("episode IO round-trips and validates the length invariant") {
  WorldConfig cfg;
  world::Episode ep;
  Pose p{0.5f, 0.5f, 0.1f};
  ep.poses.push_back(p);
  ep.observations.push_back(world::render(p, cfg));
  for (int t = 0; t < 3; ++t) {
    const Action a{0.01f, -0.01f, 0.05f};
    p = world::step(p, a, cfg);
    ep.actions.push_back(a);
    ep.poses.push_back(p);
    ep.observations.push_back(world::render(p, cfg));
  }
  const auto dir = temp_dir("episode_io");
  world::write_episode(dir / "ep.cwm", ep);
  const auto back = world::read_episode(dir / "ep.cwm");
  CHECK(back.observations.size() == 4);
  CHECK(back.actions.size() == 3);
  CHECK(back.poses.size() == 4);
  CHECK(back.observations[2].pixels == ep.observations[2].pixels);
  CHECK(back.actions[1].dx == ep.actions[1].dx);
  CHECK(back.poses[3].yaw == ep.poses[3].yaw);

  world::Episode broken = ep;
  broken.actions.push_back(Action{});
  CHECK_THROWS_AS(world::write_episode(dir / "bad.cwm", broken), ValidationError);
}

TEST_CASE("generate_dataset: zero episodes yields an empty manifest") {
  const auto dir = temp_dir("empty_dataset");
  world::DatasetParams params;
  params.n_episodes = 0;
  const auto manifest = world::generate_dataset(params, 1, WorldConfig{}, dir);
  CHECK(manifest.episode_files.empty());
  const auto back = world::read_manifest(dir / "manifest.txt");
  CHECK(back.episode_files.empty());
  CHECK(back.config_hash == manifest.config_hash);
}

TEST_CASE("generate_dataset is byte-identical across runs with the same seed") {
  world::DatasetParams params;
  params.n_episodes = 3;
  params.episode_length = 10;
  const auto d1 = temp_dir("dataset_a");
  const auto d2 = temp_dir("dataset_b");
  world::generate_dataset(params, 99, WorldConfig{}, d1);
  world::generate_dataset(params, 99, WorldConfig{}, d2);
  CHECK(io::hash_directory(d1) == io::hash_directory(d2));

  const auto d3 = temp_dir("dataset_c");
  world::generate_dataset(params, 100, WorldConfig{}, d3);
  CHECK(io::hash_directory(d1) != io::hash_directory(d3));
}

TEST_CASE("generated actions stay within bounds and poses replay exactly") {
  WorldConfig cfg;
  world::DatasetParams params;
  params.n_episodes = 4;
  params.episode_length = 24;
  const auto dir = temp_dir("dataset_replay");
  const auto manifest = world::generate_dataset(params, 7, cfg, dir);
  for (const auto& name : manifest.episode_files) {
    const auto ep = world::read_episode(dir / name);
    for (const auto& a : ep.actions) {
      REQUIRE(std::abs(a.dx) <= cfg.max_step + 1e-9);
      REQUIRE(std::abs(a.dy) <= cfg.max_step + 1e-9);
      REQUIRE(std::abs(a.dyaw) <= cfg.max_turn + 1e-9);
    }
    Pose p = ep.poses[0];
    for (size_t t = 0; t < ep.actions.size(); ++t) {
      p = world::step(p, ep.actions[t], cfg);
      REQUIRE(p.x == ep.poses[t + 1].x);
      REQUIRE(p.y == ep.poses[t + 1].y);
      REQUIRE(p.yaw == ep.poses[t + 1].yaw);
    }
  }
}

TEST_CASE("generate_dataset rejects too-short episodes") {
  world::DatasetParams params;
  params.n_episodes = 1;
  params.episode_length = 3;
  CHECK_THROWS_AS(world::generate_dataset(params, 1, WorldConfig{}, temp_dir("too_short")),
                  ValidationError);
}
