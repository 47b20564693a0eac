#include "cwm/target_vq.hpp"

#include <cmath>

namespace cwm::tok {

std::vector<float> observation_to_float(const world::Observation& obs) {
  std::vector<float> out(obs.pixels.size());
  for (size_t i = 0; i < obs.pixels.size(); ++i)
    out[i] = static_cast<float>(obs.pixels[i]) / 255.0f;
  return out;
}

TargetVq::TargetVq(const VqConfig& cfg, uint64_t seed) : cfg_(cfg) {
  Rng rng = Rng::for_module(seed, "target_vq.init");
  const int c = cfg_.base_channels;
  const int cd = cfg_.code_dim;
  auto convw = [&](const std::string& name, int k, int cin, int cout) {
    return params_.add(name, {k * k * cin, cout}, nn::xavier_init<float>(rng, k * k * cin, cout));
  };
  auto convb = [&](const std::string& name, int cout) {
    return params_.add_const_init(name, {cout}, 0.0f);
  };
  enc_w1_ = convw("enc1.w", 4, 3, c);
  enc_b1_ = convb("enc1.b", c);
  enc_w2_ = convw("enc2.w", 4, c, 2 * c);
  enc_b2_ = convb("enc2.b", 2 * c);
  enc_w3_ = convw("enc3.w", 4, 2 * c, 2 * c);
  enc_b3_ = convb("enc3.b", 2 * c);
  enc_w4_ = convw("enc4.w", 3, 2 * c, cd);
  enc_b4_ = convb("enc4.b", cd);
  codebook_ = params_.add("codebook", {cfg_.codebook, cd}, nn::normal_init<float>(rng, 0.5));
  dec_w1_ = convw("dec1.w", 3, cd, 2 * c);
  dec_b1_ = convb("dec1.b", 2 * c);
  // transposed conv weights are [Cin, k*k*Cout]
  dec_w2_ = params_.add("dec2.w", {2 * c, 4 * 4 * 2 * c}, nn::xavier_init<float>(rng, 2 * c, 16 * 2 * c));
  dec_b2_ = convb("dec2.b", 2 * c);
  dec_w3_ = params_.add("dec3.w", {2 * c, 4 * 4 * c}, nn::xavier_init<float>(rng, 2 * c, 16 * c));
  dec_b3_ = convb("dec3.b", c);
  dec_w4_ = params_.add("dec4.w", {c, 4 * 4 * 3}, nn::xavier_init<float>(rng, c, 16 * 3));
  dec_b4_ = convb("dec4.b", 3);
}

nn::Tensor TargetVq::encode_latent(const std::vector<const world::Observation*>& obs) const {
  const int b = static_cast<int>(obs.size());
  const int hw = cfg_.image_size;
  std::vector<float> pixels(static_cast<size_t>(b) * hw * hw * 3);
  for (int i = 0; i < b; ++i) {
    const auto f = observation_to_float(*obs[static_cast<size_t>(i)]);
    std::copy(f.begin(), f.end(), pixels.begin() + static_cast<int64_t>(i) * hw * hw * 3);
  }
  auto x = nn::Tensor::from({b, hw, hw, 3}, std::move(pixels));
  auto h1 = nn::silu(nn::conv2d(x, enc_w1_, enc_b1_, 4, 2, 1));
  auto h2 = nn::silu(nn::conv2d(h1, enc_w2_, enc_b2_, 4, 2, 1));
  auto h3 = nn::silu(nn::conv2d(h2, enc_w3_, enc_b3_, 4, 2, 1));
  return nn::conv2d(h3, enc_w4_, enc_b4_, 3, 1, 1);
}

nn::Tensor TargetVq::decode_latent(const nn::Tensor& z) const {
  auto h1 = nn::silu(nn::conv2d(z, dec_w1_, dec_b1_, 3, 1, 1));
  auto h2 = nn::silu(nn::conv2d_transpose(h1, dec_w2_, dec_b2_, 4, 2, 1));
  auto h3 = nn::silu(nn::conv2d_transpose(h2, dec_w3_, dec_b3_, 4, 2, 1));
  return nn::conv2d_transpose(h3, dec_w4_, dec_b4_, 4, 2, 1);
}

void TargetVq::nearest_codes(const float* z, int n, std::vector<int>& out) const {
  const int cd = cfg_.code_dim;
  const int k = cfg_.codebook;
  out.resize(static_cast<size_t>(n));
  const float* cb = codebook_.data();
  nn::parallel_for(n, [&](int i) {
    const float* zi = z + static_cast<int64_t>(i) * cd;
    int best = 0;
    float best_d = 1e30f;
    for (int j = 0; j < k; ++j) {
      const float* cj = cb + static_cast<int64_t>(j) * cd;
      float d = 0.0f;
      for (int c = 0; c < cd; ++c) {
        const float t = zi[c] - cj[c];
        d += t * t;
      }
      if (d < best_d) {
        best_d = d;
        best = j;
      }
    }
    out[static_cast<size_t>(i)] = best;
  });
}

TargetVq::TrainStats TargetVq::train(const std::vector<const world::Observation*>& frames,
                                     const std::vector<const world::Observation*>& holdout,
                                     uint64_t seed, const std::function<void(int, double)>& log) {
  if (frames.empty()) throw ValidationError("target VQ train: empty dataset");
  Rng rng = Rng::for_module(seed, "target_vq.train");
  nn::AdamW opt(params_, cfg_.lr);
  const int cd = cfg_.code_dim;

  std::vector<int64_t> code_last_used(static_cast<size_t>(cfg_.codebook), 0);
  double smoothed = 0.0, loss_at_50 = 0.0;
  for (int step = 0; step < cfg_.steps; ++step) {
    std::vector<const world::Observation*> batch;
    for (int i = 0; i < cfg_.batch; ++i)
      batch.push_back(frames[static_cast<size_t>(rng.uniform_int(static_cast<int>(frames.size())))]);

    opt.zero_grad();
    auto z_e = encode_latent(batch);
    const int cells = static_cast<int>(z_e.numel()) / cd;
    std::vector<int> codes;
    nearest_codes(z_e.data(), cells, codes);
    for (int idx : codes) code_last_used[static_cast<size_t>(idx)] = step;

    std::vector<float> zq_values(static_cast<size_t>(cells) * cd);
    for (int i = 0; i < cells; ++i)
      std::copy_n(codebook_.data() + static_cast<int64_t>(codes[static_cast<size_t>(i)]) * cd, cd,
                  zq_values.begin() + static_cast<int64_t>(i) * cd);

    // Straight-through reconstruction path.
    auto z_q = nn::straight_through(z_e, zq_values);
    auto logits = decode_latent(z_q);
    auto recon = nn::sigmoid(logits);
    std::vector<float> target(static_cast<size_t>(batch.size()) * cfg_.image_size * cfg_.image_size * 3);
    for (size_t i = 0; i < batch.size(); ++i) {
      const auto f = observation_to_float(*batch[i]);
      std::copy(f.begin(), f.end(),
                target.begin() + static_cast<int64_t>(i) * cfg_.image_size * cfg_.image_size * 3);
    }
    auto recon_loss = nn::mse_loss(recon, target);

    // Codebook pulls toward (detached) encoder outputs; commitment pulls the
    // encoder toward its assigned codes.
    std::vector<float> ze_values(z_e.data(), z_e.data() + z_e.numel());
    auto picked = nn::embedding(codebook_, codes);
    auto codebook_loss = nn::mse_loss(picked, ze_values);
    auto commit_loss = nn::mse_loss(z_e, zq_values);
    auto loss = nn::add(recon_loss, nn::add(codebook_loss, nn::scale(commit_loss, cfg_.commitment)));

    const double lval = loss.item();
    if (!std::isfinite(lval))
      throw TrainingDivergence("target VQ: loss is not finite at step " + std::to_string(step));
    nn::backward(loss);
    opt.clip_global_norm(1.0);
    opt.step(nn::lr_schedule(step, cfg_.steps, cfg_.warmup));
    smoothed = step == 0 ? lval : 0.98 * smoothed + 0.02 * lval;
    if (step == 50) loss_at_50 = smoothed;
    if (step == 500 && smoothed >= loss_at_50)
      throw TrainingDivergence("target VQ: loss has not decreased over the first 500 steps");
    if (log && step % 100 == 0) log(step, smoothed);

    // Reseed codebook entries unused for a while from current encoder
    // outputs; keeps usage healthy on a small corpus.
    if (step > 0 && step % 200 == 0) {
      for (int j = 0; j < cfg_.codebook; ++j) {
        if (step - code_last_used[static_cast<size_t>(j)] > 200) {
          const int src = rng.uniform_int(cells);
          std::copy_n(z_e.data() + static_cast<int64_t>(src) * cd, cd,
                      codebook_.data() + static_cast<int64_t>(j) * cd);
          code_last_used[static_cast<size_t>(j)] = step;
        }
      }
    }
  }

  TrainStats stats;
  stats.final_loss = smoothed;
  if (!holdout.empty()) {
    double mse = 0.0;
    std::vector<uint8_t> used(static_cast<size_t>(cfg_.codebook), 0);
    for (const auto* obs : holdout) {
      mse += reconstruction_mse(*obs);
      for (int idx : encode(*obs)) used[static_cast<size_t>(idx)] = 1;
    }
    stats.holdout_mse = mse / static_cast<double>(holdout.size());
    stats.codebook_usage =
        static_cast<double>(std::count(used.begin(), used.end(), uint8_t{1})) / cfg_.codebook;
  }
  return stats;
}

TargetCode TargetVq::encode(const world::Observation& obs) const {
  if (obs.width != cfg_.image_size || obs.height != cfg_.image_size)
    throw DimensionError("target VQ: observation resolution mismatch");
  nn::NoGradGuard ng;
  auto z_e = encode_latent({&obs});
  std::vector<int> codes;
  nearest_codes(z_e.data(), cfg_.n_cells(), codes);
  return codes;
}

world::Observation TargetVq::decode(const TargetCode& code) const {
  if (static_cast<int>(code.size()) != cfg_.n_cells())
    throw DimensionError("target VQ decode: expected " + std::to_string(cfg_.n_cells()) +
                         " tokens");
  for (int idx : code)
    if (idx < 0 || idx >= cfg_.codebook)
      throw RangeError("target VQ decode: token index " + std::to_string(idx) + " out of range");
  nn::NoGradGuard ng;
  const int side = cfg_.cells_per_side();
  const int cd = cfg_.code_dim;
  std::vector<float> z(static_cast<size_t>(side) * side * cd);
  for (int i = 0; i < cfg_.n_cells(); ++i)
    std::copy_n(codebook_.data() + static_cast<int64_t>(code[static_cast<size_t>(i)]) * cd, cd,
                z.begin() + static_cast<int64_t>(i) * cd);
  auto zt = nn::Tensor::from({1, side, side, cd}, std::move(z));
  auto recon = nn::sigmoid(decode_latent(zt));
  world::Observation obs;
  obs.height = cfg_.image_size;
  obs.width = cfg_.image_size;
  obs.pixels.resize(static_cast<size_t>(cfg_.image_size) * cfg_.image_size * 3);
  for (size_t i = 0; i < obs.pixels.size(); ++i)
    obs.pixels[i] = static_cast<uint8_t>(std::clamp(recon.data()[i], 0.0f, 1.0f) * 255.0f + 0.5f);
  return obs;
}

double TargetVq::reconstruction_mse(const world::Observation& obs) const {
  const auto recon = decode(encode(obs));
  double mse = 0.0;
  for (size_t i = 0; i < obs.pixels.size(); ++i) {
    const double d = (static_cast<double>(obs.pixels[i]) - static_cast<double>(recon.pixels[i])) / 255.0;
    mse += d * d;
  }
  return mse / static_cast<double>(obs.pixels.size());
}

}  // namespace cwm::tok
