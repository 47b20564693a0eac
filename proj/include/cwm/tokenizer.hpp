#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <vector>

#include "cwm/backbone.hpp"
#include "cwm/fsq.hpp"
#include "cwm/masking.hpp"
#include "cwm/nn.hpp"
#include "cwm/target_vq.hpp"

namespace cwm::tok {

using CompactCode = std::vector<fsq::CodeIndex>;  // N token indices

struct TokenizerConfig {
  int n_tokens = 16;
  fsq::FsqLevels levels;
  int resampler_dim = 128;
  int resampler_depth = 5;
  int resampler_heads = 4;
  int decoder_dim = 256;
  int decoder_depth = 6;
  int decoder_heads = 8;
  int mlp_ratio = 4;
  int decode_steps = 16;  // default sampling steps of the generative decoder
  int steps = 1400;
  int batch = 16;
  double lr = 1e-4;
  int warmup = 100;
  bool conditional = true;  // false: ablation decoder with no compact stream
};

// Per-frame training/eval record: frozen backbone features plus frozen
// target-VQ codes. Computing these once up front keeps the training loop on
// the trainable parameters only.
struct EncodedFrame {
  std::vector<float> features;  // [n_patches * feat_dim]
  TargetCode target;            // [n_cells]
};

std::vector<EncodedFrame> prepare_frames(const FeatureProvider& backbone, const TargetVq& vq,
                                         const std::vector<const world::Observation*>& frames);

// Compact tokenizer: cross-attention latent resampler over frozen backbone
// features, an FSQ bottleneck, and a conditional masked generative decoder
// that predicts target-VQ codes from compact tokens.
class Tokenizer {
 public:
  Tokenizer(const TokenizerConfig& cfg, const FeatureProvider* backbone, const TargetVq* vq,
            uint64_t seed);

  CompactCode encode(const world::Observation& obs) const;
  std::vector<CompactCode> encode_frames(const std::vector<EncodedFrame>& frames) const;

  // Final resampler layer's cross-attention weights, head-averaged, one map
  // per compact token over the patch grid. Rows sum to 1.
  std::vector<std::vector<float>> attention_maps(const world::Observation& obs) const;

  TargetCode decode_compact(const CompactCode& code, int steps, Rng& rng) const;
  world::Observation reconstruct(const world::Observation& obs, Rng& rng) const;

  struct TrainStats {
    double initial_loss = 0.0;
    double final_loss = 0.0;
  };
  TrainStats train(const std::vector<EncodedFrame>& data, uint64_t seed,
                   const std::function<void(int, double)>& log = {});

  // Mean held-out cross-entropy of masked target tokens at a fixed mask
  // ratio. Masks are derived from (seed, frame index) only, so conditional
  // and unconditional models see identical masks.
  double masked_ce(const std::vector<EncodedFrame>& data, double mask_ratio, uint64_t seed) const;

  const TokenizerConfig& config() const { return cfg_; }
  const FeatureProvider* backbone() const { return backbone_; }
  const TargetVq* target_vq() const { return vq_; }
  uint64_t content_hash() const { return params_.value_hash(); }
  void save(const std::filesystem::path& path) const { params_.save(path); }
  void load(const std::filesystem::path& path) { params_.load(path); }

 private:
  struct DualBlock {
    nn::LayerNormLayer ln_c1, ln_c2, ln_t1, ln_t2;
    nn::LinearLayer qc, kc, vc, oc, qt, kt, vt, ot;
    nn::MlpLayer mlp_c, mlp_t;
  };

  // Bounded resampler outputs [B, N, channels] before quantization.
  nn::Tensor resampler_fwd(const nn::Tensor& features, std::vector<float>* final_cross_probs) const;
  // Decoder logits [B * n_cells, codebook] given compact level vectors and
  // target tokens (mask::kMaskedToken where masked).
  nn::Tensor decoder_fwd(const nn::Tensor& compact_levels, const std::vector<int>& target_tokens,
                         int batch) const;
  nn::Tensor features_tensor(const std::vector<const EncodedFrame*>& batch) const;

  TokenizerConfig cfg_;
  const FeatureProvider* backbone_;
  const TargetVq* vq_;
  nn::ParamStore params_;

  // resampler
  nn::Tensor queries_;
  nn::LinearLayer feat_proj_;
  struct ResamplerBlock {
    nn::LayerNormLayer ln1, ln2, ln3;
    nn::MhaLayer self_attn, cross_attn;
    nn::MlpLayer mlp;
  };
  std::vector<ResamplerBlock> res_blocks_;
  nn::LayerNormLayer res_final_ln_;
  nn::LinearLayer res_head_;

  // decoder
  nn::LinearLayer compact_lift_;
  nn::Tensor compact_pos_;
  nn::Tensor target_embed_;  // [codebook + 1, D]; last row is the mask token
  nn::Tensor target_pos_;
  std::vector<DualBlock> dec_blocks_;
  nn::LayerNormLayer dec_final_ln_;
  nn::LinearLayer dec_head_;
};

}  // namespace cwm::tok
