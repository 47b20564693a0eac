#include "cwm/tokenizer.hpp"

#include <cmath>

namespace cwm::tok {

std::vector<EncodedFrame> prepare_frames(const FeatureProvider& backbone, const TargetVq& vq,
                                         const std::vector<const world::Observation*>& frames) {
  std::vector<EncodedFrame> out(frames.size());
  const size_t feat_len = static_cast<size_t>(backbone.n_patches()) * backbone.feat_dim();
  for (size_t i = 0; i < frames.size(); ++i) {
    out[i].features.resize(feat_len);
    backbone.features_into(*frames[i], out[i].features.data());
    out[i].target = vq.encode(*frames[i]);
  }
  return out;
}

Tokenizer::Tokenizer(const TokenizerConfig& cfg, const FeatureProvider* backbone,
                     const TargetVq* vq, uint64_t seed)
    : cfg_(cfg), backbone_(backbone), vq_(vq) {
  cfg_.levels.validate();
  Rng rng = Rng::for_module(seed, "tokenizer.init");
  const int rd = cfg_.resampler_dim;
  const int dd = cfg_.decoder_dim;
  const int channels = cfg_.levels.channels();
  const int n_cells = vq_ ? vq_->config().n_cells() : 64;
  const int codebook = vq_ ? vq_->config().codebook : 512;

  if (cfg_.conditional) {
    if (!backbone_) throw StateError("tokenizer: conditional model needs a feature provider");
    queries_ = params_.add("queries", {cfg_.n_tokens, rd}, nn::normal_init<float>(rng, 0.02));
    feat_proj_ = nn::LinearLayer::make(params_, "feat_proj", backbone_->feat_dim(), rd, rng);
    for (int i = 0; i < cfg_.resampler_depth; ++i) {
      ResamplerBlock b;
      const std::string p = "res" + std::to_string(i);
      b.ln1 = nn::LayerNormLayer::make(params_, p + ".ln1", rd);
      b.ln2 = nn::LayerNormLayer::make(params_, p + ".ln2", rd);
      b.ln3 = nn::LayerNormLayer::make(params_, p + ".ln3", rd);
      b.self_attn = nn::MhaLayer::make(params_, p + ".self", rd, cfg_.resampler_heads, rng);
      b.cross_attn = nn::MhaLayer::make(params_, p + ".cross", rd, cfg_.resampler_heads, rng);
      b.mlp = nn::MlpLayer::make(params_, p + ".mlp", rd, rd * cfg_.mlp_ratio, rng);
      res_blocks_.push_back(std::move(b));
    }
    res_final_ln_ = nn::LayerNormLayer::make(params_, "res_final_ln", rd);
    // Affine re-initialized to identity before training (collapse remedy).
    res_final_ln_.reset_identity();
    res_head_ = nn::LinearLayer::make(params_, "res_head", rd, channels, rng);
    // Small head keeps early bounded outputs near the level grid's center.
    for (int64_t i = 0; i < res_head_.w.numel(); ++i) res_head_.w.data()[i] *= 0.3f;

    compact_lift_ = nn::LinearLayer::make(params_, "compact_lift", channels, dd, rng);
    compact_pos_ = params_.add("compact_pos", {cfg_.n_tokens, dd}, nn::normal_init<float>(rng, 0.02));
  }

  target_embed_ = params_.add("target_embed", {codebook + 1, dd}, nn::normal_init<float>(rng, 0.02));
  target_pos_ = params_.add("target_pos", {n_cells, dd}, nn::normal_init<float>(rng, 0.02));
  for (int i = 0; i < cfg_.decoder_depth; ++i) {
    DualBlock b;
    const std::string p = "dec" + std::to_string(i);
    if (cfg_.conditional) {
      b.ln_c1 = nn::LayerNormLayer::make(params_, p + ".ln_c1", dd);
      b.ln_c2 = nn::LayerNormLayer::make(params_, p + ".ln_c2", dd);
      b.qc = nn::LinearLayer::make(params_, p + ".qc", dd, dd, rng);
      b.kc = nn::LinearLayer::make(params_, p + ".kc", dd, dd, rng);
      b.vc = nn::LinearLayer::make(params_, p + ".vc", dd, dd, rng);
      b.oc = nn::LinearLayer::make(params_, p + ".oc", dd, dd, rng);
      b.mlp_c = nn::MlpLayer::make(params_, p + ".mlp_c", dd, dd * cfg_.mlp_ratio, rng);
    }
    b.ln_t1 = nn::LayerNormLayer::make(params_, p + ".ln_t1", dd);
    b.ln_t2 = nn::LayerNormLayer::make(params_, p + ".ln_t2", dd);
    b.qt = nn::LinearLayer::make(params_, p + ".qt", dd, dd, rng);
    b.kt = nn::LinearLayer::make(params_, p + ".kt", dd, dd, rng);
    b.vt = nn::LinearLayer::make(params_, p + ".vt", dd, dd, rng);
    b.ot = nn::LinearLayer::make(params_, p + ".ot", dd, dd, rng);
    b.mlp_t = nn::MlpLayer::make(params_, p + ".mlp_t", dd, dd * cfg_.mlp_ratio, rng);
    dec_blocks_.push_back(std::move(b));
  }
  dec_final_ln_ = nn::LayerNormLayer::make(params_, "dec_final_ln", dd);
  dec_head_ = nn::LinearLayer::make(params_, "dec_head", dd, codebook, rng, /*zero_init=*/true);
}

nn::Tensor Tokenizer::features_tensor(const std::vector<const EncodedFrame*>& batch) const {
  const int b = static_cast<int>(batch.size());
  const int p = backbone_->n_patches();
  const int fd = backbone_->feat_dim();
  std::vector<float> flat(static_cast<size_t>(b) * p * fd);
  for (int i = 0; i < b; ++i)
    std::copy(batch[static_cast<size_t>(i)]->features.begin(),
              batch[static_cast<size_t>(i)]->features.end(),
              flat.begin() + static_cast<int64_t>(i) * p * fd);
  return nn::Tensor::from({b, p, fd}, std::move(flat));
}

nn::Tensor Tokenizer::resampler_fwd(const nn::Tensor& features,
                                    std::vector<float>* final_cross_probs) const {
  const int b = features.dim(0);
  const int rd = cfg_.resampler_dim;
  auto feats = feat_proj_.fwd(features);

  std::vector<int> qidx(static_cast<size_t>(b) * cfg_.n_tokens);
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < cfg_.n_tokens; ++j)
      qidx[static_cast<size_t>(i) * cfg_.n_tokens + j] = j;
  auto x = nn::reshape(nn::embedding(queries_, qidx), {b, cfg_.n_tokens, rd});

  for (size_t i = 0; i < res_blocks_.size(); ++i) {
    const auto& blk = res_blocks_[i];
    auto xs = blk.ln1.fwd(x);
    x = nn::add(x, blk.self_attn.fwd(xs, xs));
    const bool capture = final_cross_probs && i + 1 == res_blocks_.size();
    if (capture) {
      auto qp = blk.cross_attn.q.fwd(blk.ln2.fwd(x));
      auto kp = blk.cross_attn.k.fwd(feats);
      auto vp = blk.cross_attn.v.fwd(feats);
      x = nn::add(x, blk.cross_attn.o.fwd(nn::attention(qp, kp, vp, blk.cross_attn.heads, nullptr,
                                                        final_cross_probs)));
    } else {
      x = nn::add(x, blk.cross_attn.fwd(blk.ln2.fwd(x), feats));
    }
    x = nn::add(x, blk.mlp.fwd(blk.ln3.fwd(x)));
  }
  return nn::tanh_act(res_head_.fwd(res_final_ln_.fwd(x)));
}

nn::Tensor Tokenizer::decoder_fwd(const nn::Tensor& compact_levels,
                                  const std::vector<int>& target_tokens, int batch) const {
  const int dd = cfg_.decoder_dim;
  const int n_cells = vq_ ? vq_->config().n_cells() : 64;
  const int codebook = vq_ ? vq_->config().codebook : 512;
  const int mask_id = codebook;

  std::vector<int> ids(target_tokens.size());
  for (size_t i = 0; i < target_tokens.size(); ++i) {
    const int t = target_tokens[i];
    if (t != mask::kMaskedToken && (t < 0 || t >= codebook))
      throw RangeError("decoder: target token out of range");
    ids[i] = t == mask::kMaskedToken ? mask_id : t;
  }
  auto xt = nn::reshape(nn::embedding(target_embed_, ids), {batch, n_cells, dd});
  xt = nn::add_time_broadcast(xt, target_pos_);

  if (!cfg_.conditional) {
    for (const auto& blk : dec_blocks_) {
      auto tn = blk.ln_t1.fwd(xt);
      auto attn = nn::attention(blk.qt.fwd(tn), blk.kt.fwd(tn), blk.vt.fwd(tn), cfg_.decoder_heads);
      xt = nn::add(xt, blk.ot.fwd(attn));
      xt = nn::add(xt, blk.mlp_t.fwd(blk.ln_t2.fwd(xt)));
    }
    return nn::linear(dec_final_ln_.fwd(xt), dec_head_.w, dec_head_.b);
  }

  auto xc = nn::add_time_broadcast(compact_lift_.fwd(compact_levels), compact_pos_);
  const int n = cfg_.n_tokens;
  for (const auto& blk : dec_blocks_) {
    // Per-stream projections fused through joint self-attention.
    auto cn = blk.ln_c1.fwd(xc);
    auto tn = blk.ln_t1.fwd(xt);
    auto q = nn::concat_time(blk.qc.fwd(cn), blk.qt.fwd(tn));
    auto k = nn::concat_time(blk.kc.fwd(cn), blk.kt.fwd(tn));
    auto v = nn::concat_time(blk.vc.fwd(cn), blk.vt.fwd(tn));
    auto attn = nn::attention(q, k, v, cfg_.decoder_heads);
    xc = nn::add(xc, blk.oc.fwd(nn::slice_time(attn, 0, n)));
    xt = nn::add(xt, blk.ot.fwd(nn::slice_time(attn, n, n_cells)));
    xc = nn::add(xc, blk.mlp_c.fwd(blk.ln_c2.fwd(xc)));
    xt = nn::add(xt, blk.mlp_t.fwd(blk.ln_t2.fwd(xt)));
  }
  return nn::linear(dec_final_ln_.fwd(xt), dec_head_.w, dec_head_.b);
}

std::vector<CompactCode> Tokenizer::encode_frames(const std::vector<EncodedFrame>& frames) const {
  if (!cfg_.conditional) throw StateError("unconditional decoder has no encoder");
  nn::NoGradGuard ng;
  std::vector<CompactCode> out;
  out.reserve(frames.size());
  const int channels = cfg_.levels.channels();
  constexpr int kChunk = 64;
  for (size_t at = 0; at < frames.size(); at += kChunk) {
    std::vector<const EncodedFrame*> batch;
    for (size_t i = at; i < std::min(frames.size(), at + kChunk); ++i) batch.push_back(&frames[i]);
    auto bounded = resampler_fwd(features_tensor(batch), nullptr);
    for (size_t i = 0; i < batch.size(); ++i) {
      CompactCode code(static_cast<size_t>(cfg_.n_tokens));
      for (int t = 0; t < cfg_.n_tokens; ++t) {
        const float* row = bounded.data() + (static_cast<int64_t>(i) * cfg_.n_tokens + t) * channels;
        code[static_cast<size_t>(t)] =
            fsq::quantize(std::span<const float>(row, static_cast<size_t>(channels)), cfg_.levels);
      }
      out.push_back(std::move(code));
    }
  }
  return out;
}

CompactCode Tokenizer::encode(const world::Observation& obs) const {
  if (!backbone_) throw StateError("tokenizer: no feature provider configured");
  std::vector<EncodedFrame> one(1);
  one[0].features.resize(static_cast<size_t>(backbone_->n_patches()) * backbone_->feat_dim());
  backbone_->features_into(obs, one[0].features.data());
  return encode_frames(one)[0];
}

std::vector<std::vector<float>> Tokenizer::attention_maps(const world::Observation& obs) const {
  if (!backbone_) throw StateError("tokenizer: no feature provider configured");
  nn::NoGradGuard ng;
  std::vector<EncodedFrame> one(1);
  one[0].features.resize(static_cast<size_t>(backbone_->n_patches()) * backbone_->feat_dim());
  backbone_->features_into(obs, one[0].features.data());
  std::vector<const EncodedFrame*> batch{&one[0]};
  std::vector<float> probs;  // [1, H, N, P]
  (void)resampler_fwd(features_tensor(batch), &probs);
  const int h = cfg_.resampler_heads;
  const int n = cfg_.n_tokens;
  const int p = backbone_->n_patches();
  std::vector<std::vector<float>> maps(static_cast<size_t>(n), std::vector<float>(static_cast<size_t>(p), 0.0f));
  for (int head = 0; head < h; ++head)
    for (int t = 0; t < n; ++t)
      for (int j = 0; j < p; ++j)
        maps[static_cast<size_t>(t)][static_cast<size_t>(j)] +=
            probs[(static_cast<size_t>(head) * n + t) * p + j] / static_cast<float>(h);
  return maps;
}

TargetCode Tokenizer::decode_compact(const CompactCode& code, int steps, Rng& rng) const {
  if (!cfg_.conditional) throw StateError("unconditional decoder takes no compact code");
  const int n_cells = vq_->config().n_cells();
  const int codebook = vq_->config().codebook;
  if (static_cast<int>(code.size()) != cfg_.n_tokens)
    throw DimensionError("decode_compact: expected " + std::to_string(cfg_.n_tokens) + " tokens");
  if (steps < 1 || steps > n_cells)
    throw ConfigError("decode_compact: steps must be in [1, n_cells]");
  nn::NoGradGuard ng;

  const int channels = cfg_.levels.channels();
  std::vector<float> levels(static_cast<size_t>(cfg_.n_tokens) * channels);
  for (int t = 0; t < cfg_.n_tokens; ++t)
    fsq::code_to_vector_f(code[static_cast<size_t>(t)], cfg_.levels,
                          levels.data() + static_cast<int64_t>(t) * channels);
  auto compact = nn::Tensor::from({1, cfg_.n_tokens, channels}, levels);

  auto predictor = [&](const std::vector<int>& tokens, const std::vector<uint8_t>&) {
    auto logits = decoder_fwd(compact, tokens, 1);
    std::vector<mask::DenseCategorical> out;
    out.reserve(static_cast<size_t>(n_cells));
    for (int cell = 0; cell < n_cells; ++cell) {
      const float* row = logits.data() + static_cast<int64_t>(cell) * codebook;
      double mx = row[0];
      for (int j = 1; j < codebook; ++j) mx = std::max(mx, static_cast<double>(row[j]));
      std::vector<double> p(static_cast<size_t>(codebook));
      double sum = 0.0;
      for (int j = 0; j < codebook; ++j) {
        p[static_cast<size_t>(j)] = std::exp(static_cast<double>(row[j]) - mx);
        sum += p[static_cast<size_t>(j)];
      }
      for (auto& v : p) v /= sum;
      out.emplace_back(std::move(p));
    }
    return out;
  };
  const auto tokens = mask::iterative_unmask<mask::DenseCategorical>(predictor, n_cells, steps, rng);
  return TargetCode(tokens.begin(), tokens.end());
}

world::Observation Tokenizer::reconstruct(const world::Observation& obs, Rng& rng) const {
  return vq_->decode(decode_compact(encode(obs), cfg_.decode_steps, rng));
}

Tokenizer::TrainStats Tokenizer::train(const std::vector<EncodedFrame>& data, uint64_t seed,
                                       const std::function<void(int, double)>& log) {
  if (data.empty()) throw ValidationError("tokenizer train: empty dataset");
  Rng rng = Rng::for_module(seed, "tokenizer.train");
  nn::AdamW opt(params_, cfg_.lr);
  const int n_cells = vq_->config().n_cells();
  const int channels = cfg_.levels.channels();

  TrainStats stats;
  double smoothed = 0.0;
  for (int step = 0; step < cfg_.steps; ++step) {
    std::vector<const EncodedFrame*> batch;
    for (int i = 0; i < cfg_.batch; ++i)
      batch.push_back(&data[static_cast<size_t>(rng.uniform_int(static_cast<int>(data.size())))]);
    const int b = static_cast<int>(batch.size());

    opt.zero_grad();

    nn::Tensor compact;
    if (cfg_.conditional) {
      auto bounded = resampler_fwd(features_tensor(batch), nullptr);
      // FSQ with a straight-through estimator: forward uses the level grid,
      // gradients flow to the bounded activations.
      std::vector<float> quantized(static_cast<size_t>(bounded.numel()));
      const int rows = b * cfg_.n_tokens;
      for (int r = 0; r < rows; ++r) {
        const float* src = bounded.data() + static_cast<int64_t>(r) * channels;
        const auto code = fsq::quantize(std::span<const float>(src, static_cast<size_t>(channels)),
                                        cfg_.levels);
        fsq::code_to_vector_f(code, cfg_.levels, quantized.data() + static_cast<int64_t>(r) * channels);
      }
      compact = nn::straight_through(bounded, quantized);
    }

    std::vector<int> tokens(static_cast<size_t>(b) * n_cells);
    std::vector<int> targets(static_cast<size_t>(b) * n_cells);
    std::vector<double> weights(static_cast<size_t>(b) * n_cells, 0.0);
    for (int i = 0; i < b; ++i) {
      const auto st = mask::sample_training_mask(n_cells, rng);
      for (int cell = 0; cell < n_cells; ++cell) {
        const size_t at = static_cast<size_t>(i) * n_cells + cell;
        const int tok = batch[static_cast<size_t>(i)]->target[static_cast<size_t>(cell)];
        targets[at] = tok;
        tokens[at] = st.masked[static_cast<size_t>(cell)] ? mask::kMaskedToken : tok;
        weights[at] = st.masked[static_cast<size_t>(cell)] ? 1.0 : 0.0;
      }
    }

    auto logits = decoder_fwd(compact, tokens, b);
    auto loss = nn::cross_entropy(logits, targets, weights);
    const double lval = loss.item();
    if (!std::isfinite(lval))
      throw TrainingDivergence("tokenizer train: loss is not finite at step " +
                               std::to_string(step) + " (lr " + std::to_string(cfg_.lr) + ")");
    nn::backward(loss);
    opt.clip_global_norm(1.0);
    opt.step(nn::lr_schedule(step, cfg_.steps, cfg_.warmup));
    if (step == 0) {
      stats.initial_loss = lval;
      smoothed = lval;
    }
    smoothed = 0.98 * smoothed + 0.02 * lval;
    if (log && step % 100 == 0) log(step, smoothed);
  }
  stats.final_loss = smoothed;
  return stats;
}

double Tokenizer::masked_ce(const std::vector<EncodedFrame>& data, double mask_ratio,
                            uint64_t seed) const {
  if (data.empty()) throw ValidationError("masked_ce: empty dataset");
  nn::NoGradGuard ng;
  const int n_cells = vq_->config().n_cells();
  const int channels = cfg_.levels.channels();
  const int n_masked = std::max(1, static_cast<int>(std::ceil(mask_ratio * n_cells)));

  double total = 0.0;
  int64_t count = 0;
  constexpr int kChunk = 32;
  for (size_t at = 0; at < data.size(); at += kChunk) {
    std::vector<const EncodedFrame*> batch;
    for (size_t i = at; i < std::min(data.size(), at + kChunk); ++i) batch.push_back(&data[i]);
    const int b = static_cast<int>(batch.size());

    nn::Tensor compact;
    if (cfg_.conditional) {
      auto bounded = resampler_fwd(features_tensor(batch), nullptr);
      std::vector<float> quantized(static_cast<size_t>(bounded.numel()));
      const int rows = b * cfg_.n_tokens;
      for (int r = 0; r < rows; ++r) {
        const float* src = bounded.data() + static_cast<int64_t>(r) * channels;
        const auto code = fsq::quantize(std::span<const float>(src, static_cast<size_t>(channels)),
                                        cfg_.levels);
        fsq::code_to_vector_f(code, cfg_.levels, quantized.data() + static_cast<int64_t>(r) * channels);
      }
      compact = nn::Tensor::from(bounded.shape(), std::move(quantized));
    }

    std::vector<int> tokens(static_cast<size_t>(b) * n_cells);
    std::vector<int> targets(static_cast<size_t>(b) * n_cells);
    std::vector<double> weights(static_cast<size_t>(b) * n_cells, 0.0);
    for (int i = 0; i < b; ++i) {
      // Mask layout depends only on (seed, absolute frame index) so paired
      // models are evaluated on identical masks.
      Rng mask_rng(splitmix64(seed ^ (0x9E37 + at + static_cast<size_t>(i))));
      std::vector<int> order(static_cast<size_t>(n_cells));
      for (int c = 0; c < n_cells; ++c) order[static_cast<size_t>(c)] = c;
      for (int c = 0; c < n_masked; ++c) {
        const int j = c + mask_rng.uniform_int(n_cells - c);
        std::swap(order[static_cast<size_t>(c)], order[static_cast<size_t>(j)]);
      }
      for (int cell = 0; cell < n_cells; ++cell) {
        const size_t pos = static_cast<size_t>(i) * n_cells + cell;
        targets[pos] = batch[static_cast<size_t>(i)]->target[static_cast<size_t>(cell)];
        tokens[pos] = targets[pos];
      }
      for (int c = 0; c < n_masked; ++c) {
        const size_t pos = static_cast<size_t>(i) * n_cells + order[static_cast<size_t>(c)];
        tokens[pos] = mask::kMaskedToken;
        weights[pos] = 1.0;
      }
    }
    auto logits = decoder_fwd(compact, tokens, b);
    auto loss = nn::cross_entropy(logits, targets, weights);
    total += static_cast<double>(loss.item()) * (b * n_masked);
    count += static_cast<int64_t>(b) * n_masked;
  }
  return total / static_cast<double>(count);
}

}  // namespace cwm::tok
