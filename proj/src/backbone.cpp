#include "cwm/backbone.hpp"

#include <cmath>

#include "cwm/io.hpp"
#include "cwm/masking.hpp"

namespace cwm::tok {

namespace fs = std::filesystem;

void PatchBackbone::patchify(const world::Observation& obs, int patch_size, float* out) {
  const int side = obs.width / patch_size;
  const int pd = patch_size * patch_size * 3;
  for (int pi = 0; pi < side; ++pi)
    for (int pj = 0; pj < side; ++pj) {
      float* dst = out + (static_cast<int64_t>(pi) * side + pj) * pd;
      for (int r = 0; r < patch_size; ++r)
        for (int c = 0; c < patch_size; ++c) {
          const int y = pi * patch_size + r;
          const int x = pj * patch_size + c;
          const uint8_t* px = obs.pixels.data() + (static_cast<size_t>(y) * obs.width + x) * 3;
          float* cell = dst + (static_cast<int64_t>(r) * patch_size + c) * 3;
          for (int ch = 0; ch < 3; ++ch)
            cell[ch] = static_cast<float>(px[ch]) / 127.5f - 1.0f;
        }
    }
}

PatchBackbone::PatchBackbone(const BackboneConfig& cfg, uint64_t seed) : cfg_(cfg) {
  Rng rng = Rng::for_module(seed, "backbone.init");
  const int d = cfg_.dim;
  patch_embed_ = nn::LinearLayer::make(params_, "patch_embed", cfg_.patch_dim(), d, rng);
  pos_emb_ = params_.add("pos_emb", {cfg_.n_patches(), d}, nn::normal_init<float>(rng, 0.02));
  mask_token_ = params_.add("mask_token", {d}, nn::normal_init<float>(rng, 0.02));
  for (int i = 0; i < cfg_.depth; ++i)
    blocks_.push_back(nn::EncoderBlock::make(params_, "block" + std::to_string(i), d, cfg_.heads,
                                             d * cfg_.mlp_ratio, rng));
  final_ln_ = nn::LayerNormLayer::make(params_, "final_ln", d);
  pred_head_ = nn::LinearLayer::make(params_, "pred_head", d, cfg_.patch_dim(), rng);
}

nn::Tensor PatchBackbone::embed_batch(const std::vector<std::vector<float>>& patch_batch,
                                      const std::vector<std::vector<uint8_t>>* mask_flags) const {
  const int b = static_cast<int>(patch_batch.size());
  const int p = cfg_.n_patches();
  const int pd = cfg_.patch_dim();
  std::vector<float> flat(static_cast<size_t>(b) * p * pd);
  for (int i = 0; i < b; ++i)
    std::copy(patch_batch[static_cast<size_t>(i)].begin(), patch_batch[static_cast<size_t>(i)].end(),
              flat.begin() + static_cast<int64_t>(i) * p * pd);
  auto x = nn::Tensor::from({b * p, pd}, std::move(flat));
  auto emb = patch_embed_.fwd(x);
  if (mask_flags) {
    std::vector<uint8_t> rows(static_cast<size_t>(b) * p);
    for (int i = 0; i < b; ++i)
      std::copy((*mask_flags)[static_cast<size_t>(i)].begin(),
                (*mask_flags)[static_cast<size_t>(i)].end(),
                rows.begin() + static_cast<int64_t>(i) * p);
    emb = nn::replace_masked_rows(emb, mask_token_, rows);
  }
  auto tokens = nn::reshape(emb, {b, p, cfg_.dim});
  tokens = nn::add_time_broadcast(tokens, pos_emb_);
  for (const auto& blk : blocks_) tokens = blk.fwd(tokens);
  return final_ln_.fwd(tokens);
}

double PatchBackbone::pretrain(const std::vector<const world::Observation*>& frames,
                               uint64_t seed, const std::function<void(int, double)>& log) {
  if (frames.empty()) throw ValidationError("backbone pretrain: empty dataset");
  Rng rng = Rng::for_module(seed, "backbone.train");
  nn::AdamW opt(params_, cfg_.lr);
  const int p = cfg_.n_patches();
  const int pd = cfg_.patch_dim();

  // Patch tensors are precomputed once; the corpus fits in memory.
  std::vector<std::vector<float>> all_patches(frames.size(),
                                              std::vector<float>(static_cast<size_t>(p) * pd));
  for (size_t i = 0; i < frames.size(); ++i)
    patchify(*frames[i], cfg_.patch_size, all_patches[i].data());

  double smoothed = 0.0;
  for (int step = 0; step < cfg_.steps; ++step) {
    std::vector<std::vector<float>> batch;
    std::vector<std::vector<uint8_t>> flags;
    std::vector<float> targets;
    std::vector<float> weights;
    for (int i = 0; i < cfg_.batch; ++i) {
      const auto& patches = all_patches[static_cast<size_t>(rng.uniform_int(static_cast<int>(frames.size())))];
      std::vector<uint8_t> f(static_cast<size_t>(p), 0);
      for (int j = 0; j < p; ++j)
        if (rng.uniform() < cfg_.mask_ratio) f[static_cast<size_t>(j)] = 1;
      batch.push_back(patches);
      targets.insert(targets.end(), patches.begin(), patches.end());
      for (int j = 0; j < p; ++j)
        for (int k = 0; k < pd; ++k)
          weights.push_back(f[static_cast<size_t>(j)] ? 1.0f : 0.0f);
      flags.push_back(std::move(f));
    }
    opt.zero_grad();
    auto feats = embed_batch(batch, &flags);
    auto pred = pred_head_.fwd(feats);
    auto loss = nn::mse_loss(pred, targets, weights);
    const double lval = loss.item();
    if (!std::isfinite(lval))
      throw TrainingDivergence("backbone pretrain: loss is not finite at step " +
                               std::to_string(step));
    nn::backward(loss);
    opt.clip_global_norm(1.0);
    opt.step(nn::lr_schedule(step, cfg_.steps, cfg_.warmup));
    smoothed = step == 0 ? lval : 0.98 * smoothed + 0.02 * lval;
    if (log && step % 100 == 0) log(step, smoothed);
  }
  return smoothed;
}

void PatchBackbone::features_into(const world::Observation& obs, float* out) const {
  if (obs.width != cfg_.image_size || obs.height != cfg_.image_size)
    throw DimensionError("backbone: observation resolution mismatch");
  nn::NoGradGuard ng;
  std::vector<std::vector<float>> batch(1, std::vector<float>(
      static_cast<size_t>(cfg_.n_patches()) * cfg_.patch_dim()));
  patchify(obs, cfg_.patch_size, batch[0].data());
  auto feats = embed_batch(batch, nullptr);
  std::copy_n(feats.data(), feats.numel(), out);
}

FileFeatureProvider::FileFeatureProvider(fs::path dir, int n_patches, int feat_dim)
    : dir_(std::move(dir)), n_patches_(n_patches), feat_dim_(feat_dim) {
  if (!fs::is_directory(dir_))
    throw IoError("feature ingestion directory not found: " + dir_.string());
}

fs::path FileFeatureProvider::file_for(const fs::path& dir, const world::Observation& obs) {
  const uint64_t h = fnv1a64(obs.pixels.data(), obs.pixels.size());
  return dir / (io::hex64(h) + ".cwmf");
}

void FileFeatureProvider::features_into(const world::Observation& obs, float* out) const {
  const auto path = file_for(dir_, obs);
  if (!fs::exists(path))
    throw IoError("feature ingestion: no feature file for this observation: " + path.string());
  io::BinReader r(path);
  r.expect_magic("CWMF");
  const uint32_t np = r.u32();
  const uint32_t fd = r.u32();
  if (static_cast<int>(np) != n_patches_ || static_cast<int>(fd) != feat_dim_)
    throw IoError("feature ingestion: file " + path.string() + " has shape " +
                  std::to_string(np) + "x" + std::to_string(fd) + ", expected " +
                  std::to_string(n_patches_) + "x" + std::to_string(feat_dim_));
  r.f32s(out, static_cast<size_t>(np) * fd);
}

uint64_t FileFeatureProvider::content_hash() const { return io::hash_directory(dir_); }

void write_feature_file(const fs::path& path, int n_patches, int feat_dim, const float* data) {
  io::BinWriter w(path);
  w.magic("CWMF");
  w.u32(static_cast<uint32_t>(n_patches));
  w.u32(static_cast<uint32_t>(feat_dim));
  w.f32s(data, static_cast<size_t>(n_patches) * feat_dim);
  w.close();
}

void export_features(const FeatureProvider& provider,
                     const std::vector<const world::Observation*>& frames, const fs::path& dir) {
  fs::create_directories(dir);
  std::vector<float> buf(static_cast<size_t>(provider.n_patches()) * provider.feat_dim());
  for (const auto* obs : frames) {
    provider.features_into(*obs, buf.data());
    write_feature_file(FileFeatureProvider::file_for(dir, *obs), provider.n_patches(),
                       provider.feat_dim(), buf.data());
  }
}

}  // namespace cwm::tok
