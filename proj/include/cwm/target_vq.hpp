#pragma once

#include <filesystem>
#include <functional>
#include <vector>

#include "cwm/nn.hpp"
#include "cwm/toy_world.hpp"

namespace cwm::tok {

using TargetCode = std::vector<int>;  // one entry per spatial cell, in [0, codebook)

struct VqConfig {
  int image_size = 64;
  int codebook = 512;
  int code_dim = 16;
  int base_channels = 32;
  double commitment = 0.25;
  int steps = 1500;
  int batch = 16;
  double lr = 3e-4;
  int warmup = 50;

  int cells_per_side() const { return image_size / 8; }  // three stride-2 stages
  int n_cells() const { return cells_per_side() * cells_per_side(); }
};

// Small convolutional VQ autoencoder with an 8x spatial downsample. Serves
// as the frozen target tokenizer whose codes the generative decoder
// predicts.
class TargetVq {
 public:
  TargetVq(const VqConfig& cfg, uint64_t seed);

  struct TrainStats {
    double final_loss = 0.0;
    double holdout_mse = 0.0;
    double codebook_usage = 0.0;  // fraction of entries used on holdout
  };

  // Throws TrainingDivergence if the loss has not decreased over the first
  // 500 steps or becomes non-finite.
  TrainStats train(const std::vector<const world::Observation*>& frames,
                   const std::vector<const world::Observation*>& holdout, uint64_t seed,
                   const std::function<void(int, double)>& log = {});

  TargetCode encode(const world::Observation& obs) const;
  world::Observation decode(const TargetCode& code) const;

  double reconstruction_mse(const world::Observation& obs) const;  // pixels in [0,1]

  const VqConfig& config() const { return cfg_; }
  uint64_t content_hash() const { return params_.value_hash(); }
  void save(const std::filesystem::path& path) const { params_.save(path); }
  void load(const std::filesystem::path& path) { params_.load(path); }

 private:
  nn::Tensor encode_latent(const std::vector<const world::Observation*>& obs) const;  // [B,h,w,code_dim]
  nn::Tensor decode_latent(const nn::Tensor& z) const;  // [B,H,W,3] pre-sigmoid
  void nearest_codes(const float* z, int n, std::vector<int>& out) const;

  VqConfig cfg_;
  nn::ParamStore params_;
  nn::Tensor enc_w1_, enc_b1_, enc_w2_, enc_b2_, enc_w3_, enc_b3_, enc_w4_, enc_b4_;
  nn::Tensor codebook_;
  nn::Tensor dec_w1_, dec_b1_, dec_w2_, dec_b2_, dec_w3_, dec_b3_, dec_w4_, dec_b4_;
};

std::vector<float> observation_to_float(const world::Observation& obs);  // [0,1] NHWC

}  // namespace cwm::tok
