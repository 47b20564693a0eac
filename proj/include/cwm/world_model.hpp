#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <vector>

#include "cwm/fsq.hpp"
#include "cwm/masking.hpp"
#include "cwm/nn.hpp"
#include "cwm/tokenizer.hpp"
#include "cwm/toy_world.hpp"

namespace cwm::wm {

using tok::CompactCode;

enum class Variant { kAutoregressive, kBlockCausal };

struct WmConfig {
  Variant variant = Variant::kAutoregressive;
  int n_tokens = 16;
  fsq::FsqLevels levels;
  int action_dim = 3;
  int tau = 4;     // AR history window; BC context length
  int horizon = 6; // BC training horizon
  int dim = 256;
  int depth = 6;
  int heads = 8;
  int mlp_ratio = 4;
  bool action_conditioning = true;  // ablation: zero the action input
  bool history_mask = true;         // AR training-time history masking
  double history_mask_max = 0.5;
  double infer_history_mask = 0.2;
  int sampling_steps = 8;  // AR per-frame default (8 for N=16, 4 for N=8)
  int steps = 1600;
  int batch = 32;
  double lr = 3e-4;
  int warmup = 100;

  // 100 steps for H=14 in the reference setup, scaled proportionally.
  static int scaled_bc_steps(int horizon, int n_tokens) {
    const int s = static_cast<int>(std::lround(100.0 * horizon / 14.0));
    return std::clamp(s, 1, horizon * n_tokens);
  }
};

// Pre-encoded episode ("CWML"): per-frame compact codes plus actions.
struct LatentEpisode {
  int n_tokens = 0;
  int action_dim = 3;
  std::vector<CompactCode> codes;      // T frames
  std::vector<world::Action> actions;  // T-1

  int frames() const { return static_cast<int>(codes.size()); }
};

void write_latent_episode(const std::filesystem::path& path, const LatentEpisode& ep);
LatentEpisode read_latent_episode(const std::filesystem::path& path);

// AR rollout history window: keeps the most recent min(pushed + initial,
// tau) frames.
class SlidingWindow {
 public:
  SlidingWindow(std::vector<CompactCode> initial, int tau) : frames_(std::move(initial)), tau_(tau) {
    if (frames_.empty()) throw ValidationError("SlidingWindow: initial history must be non-empty");
    if (static_cast<int>(frames_.size()) > tau_)
      throw ValidationError("SlidingWindow: initial history longer than tau");
  }
  void push(CompactCode code) {
    frames_.push_back(std::move(code));
    if (static_cast<int>(frames_.size()) > tau_) frames_.erase(frames_.begin());
  }
  const std::vector<CompactCode>& frames() const { return frames_; }

 private:
  std::vector<CompactCode> frames_;
  int tau_;
};

// Distribution over a full FSQ code index, factorized per channel; the
// joint probability of index z is the product of its digits' channel
// probabilities.
class FsqCategorical {
 public:
  FsqCategorical() = default;
  FsqCategorical(const fsq::FsqLevels* levels, std::vector<double> channel_probs)
      : levels_(levels), probs_(std::move(channel_probs)) {}

  int sample(Rng& rng) const;
  double prob(int code_index) const;
  bool valid(double tol) const;

 private:
  const fsq::FsqLevels* levels_ = nullptr;
  std::vector<double> probs_;  // concatenated per-channel blocks
};

// Action-conditioned latent world model over CompactCodes. The AR variant
// predicts one frame per call from a fixed history window (actions via
// adaptive normalization, history via cross-attention); the block-causal
// variant predicts H future frames in parallel under a block-causal mask.
class WorldModel {
 public:
  WorldModel(const WmConfig& cfg, uint64_t seed);

  Variant variant() const { return cfg_.variant; }
  const WmConfig& config() const { return cfg_; }

  struct TrainStats {
    double initial_loss = 0.0;
    double final_loss = 0.0;
  };
  TrainStats train(const std::vector<LatentEpisode>& episodes, uint64_t seed,
                   const std::function<void(int, double)>& log = {});

  // Mean masked-token cross entropy on held-out episodes (deterministic
  // masks derived from `seed`), for paired-ablation comparisons.
  double heldout_ce(const std::vector<LatentEpisode>& episodes, uint64_t seed) const;

  std::vector<CompactCode> rollout_ar(const std::vector<CompactCode>& history,
                                      const std::vector<world::Action>& actions,
                                      int sampling_steps, Rng& rng) const;

  // Candidate b uses histories[b] / actions[b] / rngs[b]; forward passes
  // are batched across candidates.
  std::vector<std::vector<CompactCode>> rollout_ar_batch(
      const std::vector<std::vector<CompactCode>>& histories,
      const std::vector<std::vector<world::Action>>& actions, int sampling_steps,
      std::vector<Rng>& rngs) const;

  std::vector<CompactCode> predict_parallel(const std::vector<CompactCode>& context,
                                            const std::vector<world::Action>& actions,
                                            int sampling_steps, Rng& rng) const;

  // Deterministic logits of every future-frame token position, laid out
  // [H*N, sum(levels)]; used by causality probes. Future tokens enter fully
  // masked except where `future_tokens` provides a value (>= 0).
  std::vector<float> bc_future_logits(const std::vector<CompactCode>& context,
                                      const std::vector<world::Action>& actions,
                                      const std::vector<int>& future_tokens) const;

  const nn::AttnMask& bc_mask(int horizon) const;

  uint64_t content_hash() const { return params_.value_hash(); }
  void save(const std::filesystem::path& path) const { params_.save(path); }
  void load(const std::filesystem::path& path) { params_.load(path); }

  int total_levels() const { return total_levels_; }

 private:
  struct ArBlock {
    nn::LayerNormLayer ln1, ln2, ln_cross;
    nn::MhaLayer self_attn, cross_attn;
    nn::MlpLayer mlp;
    nn::LinearLayer ada;  // cond -> 6*dim (s1,b1,g1,s2,b2,g2), zero-init
  };

  nn::Tensor embed_frames(const std::vector<int>& tokens, const std::vector<uint8_t>& masked,
                          int batch, int n_frames, int slot_offset) const;
  nn::Tensor action_cond(const std::vector<float>& window_actions, int batch) const;
  nn::Tensor ar_logits(const std::vector<int>& future_tokens,
                       const std::vector<uint8_t>& future_masked, const nn::Tensor& cond,
                       const std::function<std::pair<nn::Tensor, nn::Tensor>(const ArBlock&)>& kv,
                       int batch) const;
  nn::Tensor bc_logits_tensor(const std::vector<int>& frame_tokens,
                              const std::vector<uint8_t>& frame_masked,
                              const std::vector<float>& actions, int batch, int horizon) const;
  FsqCategorical row_distribution(const float* logits_row) const;
  double factored_ce(const nn::Tensor& logits, const std::vector<int>& target_codes,
                     const std::vector<double>& weights, nn::Tensor* loss_out) const;

  WmConfig cfg_;
  nn::ParamStore params_;
  int total_levels_ = 0;
  std::vector<int> channel_offsets_;

  nn::LinearLayer token_lift_;
  nn::Tensor mask_emb_;
  nn::Tensor token_pos_;
  nn::Tensor frame_slot_;
  nn::Tensor action_stats_;  // [2, action_dim] mean/std, buffer

  // AR
  nn::LinearLayer act_mlp1_, act_mlp2_;
  std::vector<ArBlock> ar_blocks_;
  nn::LayerNormLayer ar_final_ln_;
  nn::LinearLayer ar_head_;

  // BC
  nn::LinearLayer act_proj_;
  nn::Tensor act_type_;
  std::vector<nn::EncoderBlock> bc_blocks_;
  nn::LayerNormLayer bc_head_ln_;
  nn::LinearLayer bc_ada_;
  nn::LinearLayer bc_head_;
  mutable std::map<int, nn::AttnMask> bc_mask_cache_;
};

}  // namespace cwm::wm
