#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "cwm/world_model.hpp"

using namespace cwm;
using wm::LatentEpisode;
using wm::Variant;
using wm::WmConfig;
using wm::WorldModel;

namespace {

WmConfig tiny_ar() {
  WmConfig c;
  c.variant = Variant::kAutoregressive;
  c.n_tokens = 4;
  c.tau = 3;
  c.dim = 48;
  c.depth = 2;
  c.heads = 4;
  c.mlp_ratio = 2;
  c.sampling_steps = 2;
  c.steps = 40;
  c.batch = 6;
  c.lr = 1e-3;
  c.warmup = 5;
  return c;
}

WmConfig tiny_bc() {
  WmConfig c = tiny_ar();
  c.variant = Variant::kBlockCausal;
  c.tau = 2;
  c.horizon = 3;
  return c;
}

std::vector<LatentEpisode> synth_episodes(int count, int frames, int n_tokens, uint64_t seed) {
  Rng rng(seed);
  const auto k = static_cast<int>(fsq::FsqLevels{}.codebook_size());
  std::vector<LatentEpisode> out(static_cast<size_t>(count));
  for (auto& ep : out) {
    ep.n_tokens = n_tokens;
    for (int t = 0; t < frames; ++t) {
      tok::CompactCode code(static_cast<size_t>(n_tokens));
      for (auto& c : code) c = static_cast<fsq::CodeIndex>(rng.uniform_int(k));
      ep.codes.push_back(code);
      if (t + 1 < frames)
        ep.actions.push_back({static_cast<float>(rng.uniform(-0.05, 0.05)),
                              static_cast<float>(rng.uniform(-0.05, 0.05)),
                              static_cast<float>(rng.uniform(-0.2, 0.2))});
    }
  }
  return out;
}

}  // namespace

TEST_CASE("latent episode files round-trip") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "cwm_tests" / "latents";
  fs::create_directories(dir);
  const auto eps = synth_episodes(1, 5, 4, 3);
  wm::write_latent_episode(dir / "e.cwml", eps[0]);
  const auto back = wm::read_latent_episode(dir / "e.cwml");
  CHECK(back.n_tokens == 4);
  CHECK(back.codes == eps[0].codes);
  CHECK(back.actions.size() == 4);
  CHECK(back.actions[2].dyaw == eps[0].actions[2].dyaw);
}

TEST_CASE("sliding window keeps exactly the last min(k + initial, tau) frames") {
  const auto eps = synth_episodes(1, 8, 4, 5);
  wm::SlidingWindow win({eps[0].codes[0]}, 3);
  CHECK(win.frames().size() == 1);
  for (int k = 1; k < 6; ++k) {
    win.push(eps[0].codes[static_cast<size_t>(k)]);
    const size_t expect = std::min<size_t>(static_cast<size_t>(k) + 1, 3);
    REQUIRE(win.frames().size() == expect);
    // contents are the most recent frames, oldest first
    for (size_t i = 0; i < expect; ++i)
      REQUIRE(win.frames()[i] == eps[0].codes[static_cast<size_t>(k) + 1 - expect + i]);
  }
  CHECK_THROWS_AS(wm::SlidingWindow({}, 2), ValidationError);
}

TEST_CASE("AR training starts at the uniform baseline ln K") {
  auto cfg = tiny_ar();
  cfg.steps = 2;
  WorldModel model(cfg, 17);
  const auto eps = synth_episodes(4, 8, cfg.n_tokens, 11);
  const auto stats = model.train(eps, 17);
  CHECK(stats.initial_loss == doctest::Approx(std::log(64000.0)).epsilon(0.05));
}

TEST_CASE("BC training starts at the uniform baseline ln K") {
  auto cfg = tiny_bc();
  cfg.steps = 2;
  cfg.batch = 3;
  WorldModel model(cfg, 17);
  const auto eps = synth_episodes(4, 8, cfg.n_tokens, 12);
  const auto stats = model.train(eps, 17);
  CHECK(stats.initial_loss == doctest::Approx(std::log(64000.0)).epsilon(0.05));
}

TEST_CASE("training validates episode lengths against the window") {
  WorldModel ar(tiny_ar(), 17);
  CHECK_THROWS_AS(ar.train(synth_episodes(2, 3, 4, 1), 17), ValidationError);
  WorldModel bc(tiny_bc(), 17);
  CHECK_THROWS_AS(bc.train(synth_episodes(2, 5, 4, 1), 17), ValidationError);
}

TEST_CASE("rollout contracts: empty actions, output count, validation") {
  WorldModel model(tiny_ar(), 17);
  const auto eps = synth_episodes(1, 6, 4, 13);
  Rng rng(3);
  CHECK(model.rollout_ar({eps[0].codes[0]}, {}, 2, rng).empty());

  std::vector<world::Action> actions(5, world::Action{0.01f, 0.0f, 0.0f});
  const auto out = model.rollout_ar({eps[0].codes[0], eps[0].codes[1]}, actions, 2, rng);
  CHECK(out.size() == actions.size());
  for (const auto& code : out) CHECK(code.size() == 4);

  CHECK_THROWS_AS(model.rollout_ar({}, actions, 2, rng), ValidationError);
  const std::vector<tok::CompactCode> too_long(5, eps[0].codes[0]);
  CHECK_THROWS_AS(model.rollout_ar(too_long, actions, 2, rng), ValidationError);
}

TEST_CASE("rollout is reproducible under a fixed seed") {
  WorldModel model(tiny_ar(), 17);
  const auto eps = synth_episodes(1, 6, 4, 14);
  std::vector<world::Action> actions(4, world::Action{0.02f, -0.01f, 0.1f});
  Rng a(77), b(77);
  const auto ra = model.rollout_ar({eps[0].codes[0]}, actions, 2, a);
  const auto rb = model.rollout_ar({eps[0].codes[0]}, actions, 2, b);
  CHECK(ra == rb);
}

TEST_CASE("variant mismatch raises usage errors") {
  WorldModel ar(tiny_ar(), 17);
  WorldModel bc(tiny_bc(), 17);
  const auto eps = synth_episodes(1, 8, 4, 15);
  std::vector<world::Action> actions(3, world::Action{});
  Rng rng(1);
  CHECK_THROWS_AS(bc.rollout_ar({eps[0].codes[0]}, actions, 2, rng), UsageError);
  std::vector<tok::CompactCode> ctx(2, eps[0].codes[0]);
  CHECK_THROWS_AS(ar.predict_parallel(ctx, actions, 2, rng), UsageError);
  CHECK_THROWS_AS(ar.bc_future_logits(ctx, actions, std::vector<int>(12, -1)), UsageError);
}

TEST_CASE("block-causal attention mask: frames see <= t+i, actions see <= t+i-1") {
  WorldModel bc(tiny_bc(), 17);
  const int n = 4, tau = 2, h = 3;
  const auto& mask = bc.bc_mask(h);
  const int len = (tau + h) * n + h;
  REQUIRE(mask.tq == len);

  // position helpers
  auto ctx_pos = [&](int frame, int tok) { return frame * n + tok; };
  auto act_pos = [&](int j) { return tau * n + j * (n + 1); };
  auto fut_pos = [&](int j, int tok) { return tau * n + j * (n + 1) + 1 + tok; };
  auto allowed = [&](int q, int k) { return mask.allow[static_cast<size_t>(q) * len + k] != 0; };

  // future frame j attends: all context, futures <= j, actions <= j
  for (int j = 0; j < h; ++j) {
    CHECK(allowed(fut_pos(j, 0), ctx_pos(0, 1)));
    CHECK(allowed(fut_pos(j, 0), ctx_pos(tau - 1, 3)));
    for (int i = 0; i < h; ++i) {
      CHECK(allowed(fut_pos(j, 0), fut_pos(i, 2)) == (i <= j));
      CHECK(allowed(fut_pos(j, 0), act_pos(i)) == (i <= j));
    }
  }
  // context frame s attends frames <= s only, never future or actions
  CHECK(allowed(ctx_pos(1, 0), ctx_pos(0, 2)));
  CHECK_FALSE(allowed(ctx_pos(0, 0), ctx_pos(1, 2)));
  CHECK_FALSE(allowed(ctx_pos(1, 0), act_pos(0)));
  CHECK_FALSE(allowed(ctx_pos(1, 0), fut_pos(0, 0)));
  // action j attends frames <= its preceding frame and actions <= j
  CHECK(allowed(act_pos(1), fut_pos(0, 1)));
  CHECK_FALSE(allowed(act_pos(0), fut_pos(0, 0)));
  CHECK(allowed(act_pos(2), act_pos(1)));
  CHECK_FALSE(allowed(act_pos(1), act_pos(2)));
}

TEST_CASE("block-causal logits are bit-invariant to later actions and frames") {
  auto cfg = tiny_bc();
  cfg.steps = 4;  // move the zero-initialized heads off zero so probes bite
  WorldModel bc(cfg, 17);
  const auto eps = synth_episodes(1, 8, cfg.n_tokens, 16);
  bc.train(synth_episodes(3, 8, cfg.n_tokens, 44), 17);
  const int n = cfg.n_tokens, h = cfg.horizon;
  std::vector<tok::CompactCode> ctx(eps[0].codes.begin(), eps[0].codes.begin() + cfg.tau);
  std::vector<world::Action> actions(static_cast<size_t>(h), world::Action{0.01f, 0.02f, 0.0f});
  std::vector<int> future(static_cast<size_t>(h) * n, -1);
  future[0] = 123;  // partially revealed first future frame
  const auto base = bc.bc_future_logits(ctx, actions, future);

  // Perturb the last action: frames before it must be bit-identical.
  auto actions2 = actions;
  actions2.back().dx = 0.09f;
  const auto pert = bc.bc_future_logits(ctx, actions2, future);
  const int per_frame = n * bc.total_levels();
  for (int j = 0; j + 1 < h; ++j)
    for (int i = 0; i < per_frame; ++i)
      REQUIRE(base[static_cast<size_t>(j) * per_frame + i] ==
              pert[static_cast<size_t>(j) * per_frame + i]);
  // and the last frame must actually change
  bool changed = false;
  for (int i = 0; i < per_frame; ++i)
    if (base[static_cast<size_t>(h - 1) * per_frame + i] !=
        pert[static_cast<size_t>(h - 1) * per_frame + i])
      changed = true;
  CHECK(changed);

  // Perturb a token of the last future frame: earlier frames unchanged.
  auto future2 = future;
  future2[static_cast<size_t>(h - 1) * n] = 77;
  const auto pert2 = bc.bc_future_logits(ctx, actions, future2);
  for (int j = 0; j + 1 < h; ++j)
    for (int i = 0; i < per_frame; ++i)
      REQUIRE(base[static_cast<size_t>(j) * per_frame + i] ==
              pert2[static_cast<size_t>(j) * per_frame + i]);
}

TEST_CASE("predict_parallel: H=1 limit, output count, reproducibility") {
  auto cfg = tiny_bc();
  WorldModel bc(cfg, 17);
  const auto eps = synth_episodes(1, 8, cfg.n_tokens, 18);
  std::vector<tok::CompactCode> ctx(eps[0].codes.begin(), eps[0].codes.begin() + cfg.tau);

  Rng r1(5), r2(5);
  const auto one = bc.predict_parallel(ctx, {world::Action{0.01f, 0.0f, 0.0f}}, 2, r1);
  CHECK(one.size() == 1);
  CHECK(one[0].size() == 4);

  std::vector<world::Action> actions(3, world::Action{0.0f, 0.01f, 0.05f});
  Rng r3(9), r4(9);
  CHECK(bc.predict_parallel(ctx, actions, 4, r3) == bc.predict_parallel(ctx, actions, 4, r4));
  CHECK(bc.predict_parallel(ctx, {}, 2, r2).empty());

  std::vector<tok::CompactCode> bad_ctx(1, eps[0].codes[0]);
  CHECK_THROWS_AS(bc.predict_parallel(bad_ctx, actions, 2, r2), ValidationError);
}

TEST_CASE("scaled BC sampling steps follow the 100-for-14 rule") {
  CHECK(wm::WmConfig::scaled_bc_steps(14, 16) == 100);
  CHECK(wm::WmConfig::scaled_bc_steps(7, 16) == 50);
  CHECK(wm::WmConfig::scaled_bc_steps(1, 16) == 7);
  CHECK(wm::WmConfig::scaled_bc_steps(1, 4) == 4);  // clamped to H*N
}

TEST_CASE("checkpoint round-trip preserves rollouts") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "cwm_tests" / "wm_ckpt";
  fs::create_directories(dir);
  auto cfg = tiny_ar();
  cfg.steps = 10;
  WorldModel model(cfg, 17);
  const auto eps = synth_episodes(3, 8, cfg.n_tokens, 19);
  model.train(eps, 17);
  model.save(dir / "w.bin");

  WorldModel loaded(cfg, 999);
  loaded.load(dir / "w.bin");
  std::vector<world::Action> actions(3, world::Action{0.01f, 0.0f, 0.0f});
  Rng a(4), b(4);
  CHECK(model.rollout_ar({eps[0].codes[0]}, actions, 2, a) ==
        loaded.rollout_ar({eps[0].codes[0]}, actions, 2, b));
}
