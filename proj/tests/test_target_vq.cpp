#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "cwm/target_vq.hpp"

using namespace cwm;
using tok::TargetVq;
using tok::VqConfig;

namespace {

// Small synthetic frames so the unit tests stay fast; the full-size VQ is
// exercised by the acceptance pipeline.
VqConfig tiny_config() {
  VqConfig cfg;
  cfg.image_size = 16;
  cfg.codebook = 32;
  cfg.code_dim = 8;
  cfg.base_channels = 8;
  cfg.steps = 1500;
  cfg.batch = 8;
  cfg.lr = 2e-3;
  cfg.warmup = 20;
  return cfg;
}

world::Observation synth_frame(int size, double phase) {
  world::Observation obs;
  obs.height = size;
  obs.width = size;
  obs.pixels.resize(static_cast<size_t>(size) * size * 3);
  for (int i = 0; i < size; ++i)
    for (int j = 0; j < size; ++j) {
      const double u = static_cast<double>(j) / size;
      const double v = static_cast<double>(i) / size;
      const size_t at = (static_cast<size_t>(i) * size + j) * 3;
      obs.pixels[at] = static_cast<uint8_t>(127.5 + 110.0 * std::sin(6.28 * (u + phase)));
      obs.pixels[at + 1] = static_cast<uint8_t>(127.5 + 110.0 * std::sin(6.28 * (v - phase)));
      obs.pixels[at + 2] = static_cast<uint8_t>(127.5 + 110.0 * std::cos(6.28 * (u + v + phase)));
    }
  return obs;
}

std::vector<world::Observation> synth_corpus(int n, int size) {
  std::vector<world::Observation> out;
  for (int i = 0; i < n; ++i) out.push_back(synth_frame(size, 0.08 * i));
  return out;
}

}  // namespace

TEST_CASE("encode is deterministic and in range; decode validates tokens") {
  const auto cfg = tiny_config();
  TargetVq vq(cfg, 7);
  const auto obs = synth_frame(cfg.image_size, 0.3);
  const auto a = vq.encode(obs);
  const auto b = vq.encode(obs);
  CHECK(a == b);
  CHECK(static_cast<int>(a.size()) == cfg.n_cells());
  for (int t : a) {
    CHECK(t >= 0);
    CHECK(t < cfg.codebook);
  }

  tok::TargetCode bad(static_cast<size_t>(cfg.n_cells()), 0);
  bad[0] = cfg.codebook;
  CHECK_THROWS_AS(vq.decode(bad), RangeError);
  CHECK_THROWS_AS(vq.decode(tok::TargetCode{1, 2}), DimensionError);
}

TEST_CASE("resolution mismatch is rejected") {
  TargetVq vq(tiny_config(), 7);
  CHECK_THROWS_AS(vq.encode(synth_frame(32, 0.0)), DimensionError);
}

TEST_CASE("empty dataset is a validation error") {
  TargetVq vq(tiny_config(), 7);
  CHECK_THROWS_AS(vq.train({}, {}, 1), ValidationError);
}

TEST_CASE("training reduces reconstruction error on a small corpus") {
  const auto cfg = tiny_config();
  TargetVq vq(cfg, 7);
  const auto corpus = synth_corpus(12, cfg.image_size);
  std::vector<const world::Observation*> frames;
  for (const auto& f : corpus) frames.push_back(&f);
  const double before = vq.reconstruction_mse(corpus[0]);
  const auto stats = vq.train(frames, {frames[0], frames[5]}, 3);
  const double after = vq.reconstruction_mse(corpus[0]);
  CHECK(after < before);
  CHECK(after < 0.01);
  CHECK(stats.codebook_usage > 0.0);
}

TEST_CASE("all-same-token code decodes to a near-uniform image") {
  const auto cfg = tiny_config();
  TargetVq vq(cfg, 7);
  const tok::TargetCode uniform(static_cast<size_t>(cfg.n_cells()), 3);
  const auto obs = vq.decode(uniform);
  double mean = 0.0;
  for (uint8_t p : obs.pixels) mean += p;
  mean /= static_cast<double>(obs.pixels.size());
  double var = 0.0;
  for (uint8_t p : obs.pixels) var += (p - mean) * (p - mean);
  var /= static_cast<double>(obs.pixels.size());
  CHECK(std::sqrt(var) < 40.0);
}

TEST_CASE("save/load reproduces encodings exactly") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "cwm_tests" / "vq_ckpt";
  fs::create_directories(dir);
  auto quick = tiny_config();
  quick.steps = 60;
  const auto corpus = synth_corpus(6, quick.image_size);
  std::vector<const world::Observation*> frames;
  for (const auto& f : corpus) frames.push_back(&f);
  TargetVq trained(quick, 7);
  trained.train(frames, {}, 3);
  trained.save(dir / "w.bin");

  TargetVq loaded(quick, 99);
  loaded.load(dir / "w.bin");
  CHECK(loaded.encode(corpus[2]) == trained.encode(corpus[2]));
  CHECK(loaded.content_hash() == trained.content_hash());
}
