#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "cwm/fsq.hpp"
#include "cwm/nn.hpp"
#include "cwm/tokenizer.hpp"
#include "cwm/toy_world.hpp"

namespace cwm::idm {

using tok::CompactCode;

struct DiffusionSchedule {
  int timesteps = 1000;
  std::vector<double> alpha_bar;  // [0..timesteps], cumulative signal fraction
  std::vector<double> beta;       // [1..timesteps] at index t-1, in (0, 1)

  static DiffusionSchedule squared_cosine(int timesteps);
};

struct IdmConfig {
  int n_tokens = 16;
  fsq::FsqLevels levels;
  int action_dim = 3;
  int enc_dim = 128;
  int enc_depth = 4;
  int enc_heads = 4;
  int mlp_ratio = 4;
  int hidden = 128;
  int mlp_layers = 4;
  int timesteps = 1000;
  int steps = 1600;
  int batch = 64;
  double lr = 3e-4;
  int warmup = 100;
};

// Noise-prediction MLP with sinusoidal timestep features and FiLM
// conditioning between layers. Templated so gradient checks can run the
// identical computation in double precision.
template <class S>
struct DenoiserT {
  std::vector<nn::LinearLayerT<S>> layers;
  std::vector<nn::LinearLayerT<S>> films;  // cond -> 2*hidden (scale, shift), zero-init
  nn::LinearLayerT<S> in_proj, time_mlp, out_proj;
  int hidden = 0;

  static DenoiserT make(nn::ParamStoreT<S>& ps, const std::string& prefix, int action_dim,
                        int hidden, int n_layers, Rng& rng) {
    DenoiserT d;
    d.hidden = hidden;
    d.in_proj = nn::LinearLayerT<S>::make(ps, prefix + ".in", action_dim, hidden, rng);
    d.time_mlp = nn::LinearLayerT<S>::make(ps, prefix + ".time", hidden, hidden, rng);
    for (int i = 0; i < n_layers; ++i) {
      d.layers.push_back(nn::LinearLayerT<S>::make(ps, prefix + ".l" + std::to_string(i), hidden,
                                                   hidden, rng));
      d.films.push_back(nn::LinearLayerT<S>::make(ps, prefix + ".film" + std::to_string(i), hidden,
                                                  2 * hidden, rng, /*zero_init=*/true));
    }
    d.out_proj = nn::LinearLayerT<S>::make(ps, prefix + ".out", hidden, action_dim, rng,
                                           /*zero_init=*/true);
    return d;
  }

  // noisy: [B, A]; cond: [B, hidden]; t_frac in [0, 1] per sample.
  nn::TensorT<S> fwd(const nn::TensorT<S>& noisy, const nn::TensorT<S>& cond,
                     const std::vector<double>& t_frac) const {
    const int b = noisy.dim(0);
    std::vector<S> temb(static_cast<size_t>(b) * hidden);
    for (int i = 0; i < b; ++i)
      nn::sinusoidal_embed(t_frac[static_cast<size_t>(i)] * 1000.0, hidden,
                           temb.data() + static_cast<int64_t>(i) * hidden);
    auto cond_total = nn::add(
        cond, time_mlp.fwd(nn::TensorT<S>::from({b, hidden}, std::move(temb))));
    auto h = in_proj.fwd(noisy);
    for (size_t i = 0; i < layers.size(); ++i) {
      h = nn::silu(layers[i].fwd(h));
      auto film = films[i].fwd(nn::silu(cond_total));
      auto sc = nn::slice_cols(film, 0, hidden);
      auto sh = nn::slice_cols(film, hidden, hidden);
      h = nn::modulate(h, sc, sh);
    }
    return out_proj.fwd(h);
  }
};

using Denoiser = DenoiserT<float>;

struct IdmMetrics {
  double l1 = 0.0;
  double r2 = 0.0;
  bool r2_defined = true;  // false when ground-truth variance is zero
};

// Mean absolute error over all components; R^2 computed per component then
// averaged.
IdmMetrics idm_metrics(const std::vector<world::Action>& predictions,
                       const std::vector<world::Action>& ground_truths);

struct FramePair {
  CompactCode before;
  CompactCode after;
  world::Action action;
};

// Inverse dynamics model: a transformer over the two frames' compact
// tokens pooled into a conditioning vector, and a DDPM action denoiser.
class IdmModel {
 public:
  IdmModel(const IdmConfig& cfg, uint64_t seed);

  struct TrainStats {
    double initial_loss = 0.0;
    double final_loss = 0.0;
  };
  TrainStats train(const std::vector<FramePair>& pairs, uint64_t seed,
                   const std::function<void(int, double)>& log = {});

  world::Action predict(const CompactCode& before, const CompactCode& after, Rng& rng,
                        bool zero_conditioning = false) const;
  std::vector<world::Action> predict_batch(const std::vector<FramePair>& pairs, Rng& rng,
                                           bool zero_conditioning = false) const;

  bool trained() const { return trained_; }
  const IdmConfig& config() const { return cfg_; }
  const DiffusionSchedule& schedule() const { return schedule_; }
  uint64_t content_hash() const { return params_.value_hash(); }
  void save(const std::filesystem::path& path) const { params_.save(path); }
  void load(const std::filesystem::path& path) {
    params_.load(path);
    trained_ = true;
  }

 private:
  nn::Tensor encode_pairs(const std::vector<const FramePair*>& pairs) const;  // [B, hidden]

  IdmConfig cfg_;
  DiffusionSchedule schedule_;
  nn::ParamStore params_;
  bool trained_ = false;

  nn::LinearLayer token_lift_;
  nn::Tensor token_pos_;
  nn::Tensor frame_slot_;  // [2, enc_dim]
  std::vector<nn::EncoderBlock> enc_blocks_;
  nn::LayerNormLayer enc_final_ln_;
  nn::LinearLayer pool_proj_;  // enc_dim -> hidden
  Denoiser denoiser_;
  nn::Tensor action_stats_;  // [2, action_dim]
};

}  // namespace cwm::idm
