#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cwm/nn.hpp"
#include "cwm/toy_world.hpp"

namespace cwm::tok {

// Frozen per-patch feature source. Implementations must be deterministic:
// identical pixels produce identical features.
class FeatureProvider {
 public:
  virtual ~FeatureProvider() = default;
  virtual int n_patches() const = 0;
  virtual int feat_dim() const = 0;
  virtual void features_into(const world::Observation& obs, float* out) const = 0;
  virtual std::string id() const = 0;
  virtual uint64_t content_hash() const = 0;
};

struct BackboneConfig {
  int image_size = 64;
  int patch_size = 8;
  int dim = 96;
  int depth = 3;
  int heads = 4;
  int mlp_ratio = 4;
  double mask_ratio = 0.5;
  int steps = 900;
  int batch = 32;
  double lr = 3e-4;
  int warmup = 50;

  int n_patches() const { return (image_size / patch_size) * (image_size / patch_size); }
  int patch_dim() const { return patch_size * patch_size * 3; }
};

// Small patch transformer pretrained with masked-patch prediction on the
// toy corpus, then used frozen. Stands in for a vision foundation model;
// the tokenizer only depends on the FeatureProvider interface.
class PatchBackbone : public FeatureProvider {
 public:
  PatchBackbone(const BackboneConfig& cfg, uint64_t seed);

  // Returns final smoothed training loss. Throws TrainingDivergence on NaN.
  double pretrain(const std::vector<const world::Observation*>& frames, uint64_t seed,
                  const std::function<void(int, double)>& log = {});

  int n_patches() const override { return cfg_.n_patches(); }
  int feat_dim() const override { return cfg_.dim; }
  void features_into(const world::Observation& obs, float* out) const override;
  std::string id() const override { return "patch-transformer"; }
  uint64_t content_hash() const override { return params_.value_hash(); }

  void save(const std::filesystem::path& path) const { params_.save(path); }
  void load(const std::filesystem::path& path) { params_.load(path); }

  const BackboneConfig& config() const { return cfg_; }

  // Normalized patch pixels, row-major patches: [n_patches, patch_dim].
  static void patchify(const world::Observation& obs, int patch_size, float* out);

 private:
  nn::Tensor embed_batch(const std::vector<std::vector<float>>& patch_batch,
                         const std::vector<std::vector<uint8_t>>* mask_flags) const;

  BackboneConfig cfg_;
  nn::ParamStore params_;
  nn::LinearLayer patch_embed_;
  nn::Tensor pos_emb_;
  nn::Tensor mask_token_;
  std::vector<nn::EncoderBlock> blocks_;
  nn::LayerNormLayer final_ln_;
  nn::LinearLayer pred_head_;  // training only
};

// Reads per-frame "CWMF" files from a directory, keyed by the FNV-1a hash
// of the observation's pixel bytes. This is the ingestion path for
// externally exported features.
class FileFeatureProvider : public FeatureProvider {
 public:
  FileFeatureProvider(std::filesystem::path dir, int n_patches, int feat_dim);

  int n_patches() const override { return n_patches_; }
  int feat_dim() const override { return feat_dim_; }
  void features_into(const world::Observation& obs, float* out) const override;
  std::string id() const override { return "file:" + dir_.string(); }
  uint64_t content_hash() const override;

  static std::filesystem::path file_for(const std::filesystem::path& dir,
                                        const world::Observation& obs);

 private:
  std::filesystem::path dir_;
  int n_patches_;
  int feat_dim_;
};

void write_feature_file(const std::filesystem::path& path, int n_patches, int feat_dim,
                        const float* data);

// Exports every frame's features as CWMF files usable by FileFeatureProvider.
void export_features(const FeatureProvider& provider,
                     const std::vector<const world::Observation*>& frames,
                     const std::filesystem::path& dir);

}  // namespace cwm::tok
