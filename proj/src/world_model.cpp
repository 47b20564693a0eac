#include "cwm/world_model.hpp"

#include <algorithm>
#include <cmath>

#include "cwm/io.hpp"

namespace cwm::wm {

void write_latent_episode(const std::filesystem::path& path, const LatentEpisode& ep) {
  if (ep.codes.empty()) throw ValidationError("latent episode: no frames");
  if (ep.actions.size() + 1 != ep.codes.size())
    throw ValidationError("latent episode: action count must be frames - 1");
  io::BinWriter w(path);
  w.magic("CWML");
  w.u32(static_cast<uint32_t>(ep.codes.size()));
  w.u32(static_cast<uint32_t>(ep.n_tokens));
  w.u32(static_cast<uint32_t>(ep.action_dim));
  for (const auto& code : ep.codes) {
    if (static_cast<int>(code.size()) != ep.n_tokens)
      throw ValidationError("latent episode: inconsistent token count");
    w.u32s(code.data(), code.size());
  }
  for (const auto& a : ep.actions) {
    w.f32(a.dx);
    w.f32(a.dy);
    w.f32(a.dyaw);
  }
  w.close();
}

LatentEpisode read_latent_episode(const std::filesystem::path& path) {
  io::BinReader r(path);
  r.expect_magic("CWML");
  LatentEpisode ep;
  const uint32_t t = r.u32();
  ep.n_tokens = static_cast<int>(r.u32());
  ep.action_dim = static_cast<int>(r.u32());
  if (t < 1 || ep.n_tokens < 1 || ep.action_dim != 3)
    throw IoError("latent episode header malformed: " + path.string());
  ep.codes.resize(t, CompactCode(static_cast<size_t>(ep.n_tokens)));
  for (auto& code : ep.codes) r.u32s(code.data(), code.size());
  ep.actions.resize(t - 1);
  for (auto& a : ep.actions) {
    a.dx = r.f32();
    a.dy = r.f32();
    a.dyaw = r.f32();
  }
  return ep;
}

int FsqCategorical::sample(Rng& rng) const {
  uint64_t index = 0;
  const auto& lv = levels_->levels;
  // Compose sampled digits little-endian (channel 0 least significant).
  std::vector<int> digits(lv.size());
  int off = 0;
  for (size_t c = 0; c < lv.size(); ++c) {
    const double u = rng.uniform();
    double acc = 0.0;
    int pick = lv[c] - 1;
    for (int k = 0; k < lv[c]; ++k) {
      acc += probs_[static_cast<size_t>(off + k)];
      if (u < acc) {
        pick = k;
        break;
      }
    }
    digits[c] = pick;
    off += lv[c];
  }
  for (int c = static_cast<int>(lv.size()) - 1; c >= 0; --c)
    index = index * static_cast<uint64_t>(lv[static_cast<size_t>(c)]) +
            static_cast<uint64_t>(digits[static_cast<size_t>(c)]);
  return static_cast<int>(index);
}

double FsqCategorical::prob(int code_index) const {
  const auto digits = fsq::index_to_digits(static_cast<fsq::CodeIndex>(code_index), *levels_);
  double p = 1.0;
  int off = 0;
  for (size_t c = 0; c < digits.size(); ++c) {
    p *= probs_[static_cast<size_t>(off + digits[c])];
    off += levels_->levels[c];
  }
  return p;
}

bool FsqCategorical::valid(double tol) const {
  int off = 0;
  for (int l : levels_->levels) {
    double sum = 0.0;
    for (int k = 0; k < l; ++k) {
      const double p = probs_[static_cast<size_t>(off + k)];
      if (p < 0.0 || !std::isfinite(p)) return false;
      sum += p;
    }
    if (std::abs(sum - 1.0) > tol) return false;
    off += l;
  }
  return true;
}

WorldModel::WorldModel(const WmConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.levels.validate();
  Rng rng = Rng::for_module(seed, "world_model.init");
  const int d = cfg_.dim;
  const int channels = cfg_.levels.channels();
  total_levels_ = 0;
  for (int l : cfg_.levels.levels) {
    channel_offsets_.push_back(total_levels_);
    total_levels_ += l;
  }

  token_lift_ = nn::LinearLayer::make(params_, "token_lift", channels, d, rng);
  mask_emb_ = params_.add("mask_emb", {d}, nn::normal_init<float>(rng, 0.02));
  token_pos_ = params_.add("token_pos", {cfg_.n_tokens, d}, nn::normal_init<float>(rng, 0.02));
  const int slots = cfg_.variant == Variant::kAutoregressive ? cfg_.tau + 1
                                                             : cfg_.tau + cfg_.horizon;
  frame_slot_ = params_.add("frame_slot", {slots, d}, nn::normal_init<float>(rng, 0.02));
  action_stats_ = params_.add_buffer("action_stats", {2, cfg_.action_dim});
  for (int i = 0; i < cfg_.action_dim; ++i) {
    action_stats_.data()[i] = 0.0f;                    // mean
    action_stats_.data()[cfg_.action_dim + i] = 1.0f;  // std
  }

  if (cfg_.variant == Variant::kAutoregressive) {
    act_mlp1_ = nn::LinearLayer::make(params_, "act_mlp1", cfg_.tau * cfg_.action_dim, d, rng);
    act_mlp2_ = nn::LinearLayer::make(params_, "act_mlp2", d, d, rng);
    for (int i = 0; i < cfg_.depth; ++i) {
      ArBlock b;
      const std::string p = "ar" + std::to_string(i);
      b.ln1 = nn::LayerNormLayer::make(params_, p + ".ln1", d);
      b.ln2 = nn::LayerNormLayer::make(params_, p + ".ln2", d);
      b.ln_cross = nn::LayerNormLayer::make(params_, p + ".ln_cross", d);
      b.self_attn = nn::MhaLayer::make(params_, p + ".self", d, cfg_.heads, rng);
      b.cross_attn = nn::MhaLayer::make(params_, p + ".cross", d, cfg_.heads, rng);
      b.mlp = nn::MlpLayer::make(params_, p + ".mlp", d, d * cfg_.mlp_ratio, rng);
      b.ada = nn::LinearLayer::make(params_, p + ".ada", d, 6 * d, rng, /*zero_init=*/true);
      ar_blocks_.push_back(std::move(b));
    }
    ar_final_ln_ = nn::LayerNormLayer::make(params_, "ar_final_ln", d);
    ar_head_ = nn::LinearLayer::make(params_, "ar_head", d, total_levels_, rng, /*zero_init=*/true);
  } else {
    act_proj_ = nn::LinearLayer::make(params_, "act_proj", cfg_.action_dim, d, rng);
    act_type_ = params_.add("act_type", {1, d}, nn::normal_init<float>(rng, 0.02));
    for (int i = 0; i < cfg_.depth; ++i)
      bc_blocks_.push_back(nn::EncoderBlock::make(params_, "bc" + std::to_string(i), d, cfg_.heads,
                                                  d * cfg_.mlp_ratio, rng));
    bc_head_ln_ = nn::LayerNormLayer::make(params_, "bc_head_ln", d);
    bc_ada_ = nn::LinearLayer::make(params_, "bc_ada", d, 2 * d, rng, /*zero_init=*/true);
    bc_head_ = nn::LinearLayer::make(params_, "bc_head", d, total_levels_, rng, /*zero_init=*/true);
  }
}

nn::Tensor WorldModel::embed_frames(const std::vector<int>& tokens,
                                    const std::vector<uint8_t>& masked, int batch, int n_frames,
                                    int slot_offset) const {
  const int n = cfg_.n_tokens;
  const int channels = cfg_.levels.channels();
  const int rows = batch * n_frames * n;
  if (static_cast<int>(tokens.size()) != rows || static_cast<int>(masked.size()) != rows)
    throw DimensionError("embed_frames: token/mask layout mismatch");

  std::vector<float> levels(static_cast<size_t>(rows) * channels, 0.0f);
  for (int r = 0; r < rows; ++r) {
    if (masked[static_cast<size_t>(r)]) continue;
    const int code = tokens[static_cast<size_t>(r)];
    if (code < 0) throw ValidationError("embed_frames: unmasked position without a token");
    fsq::code_to_vector_f(static_cast<fsq::CodeIndex>(code), cfg_.levels,
                          levels.data() + static_cast<int64_t>(r) * channels);
  }
  auto lifted = token_lift_.fwd(nn::Tensor::from({rows, channels}, std::move(levels)));
  lifted = nn::replace_masked_rows(lifted, mask_emb_, masked);

  std::vector<int> tok_idx(static_cast<size_t>(rows));
  std::vector<int> slot_idx(static_cast<size_t>(rows));
  const int max_slot = frame_slot_.dim(0) - 1;
  for (int r = 0; r < rows; ++r) {
    tok_idx[static_cast<size_t>(r)] = r % n;
    slot_idx[static_cast<size_t>(r)] = std::min(max_slot, slot_offset + (r / n) % n_frames);
  }
  auto x = nn::add(lifted, nn::embedding(token_pos_, tok_idx));
  x = nn::add(x, nn::embedding(frame_slot_, slot_idx));
  return nn::reshape(x, {batch, n_frames * n, cfg_.dim});
}

nn::Tensor WorldModel::action_cond(const std::vector<float>& window_actions, int batch) const {
  const int in = cfg_.tau * cfg_.action_dim;
  std::vector<float> data(window_actions);
  if (static_cast<int>(data.size()) != batch * in)
    throw DimensionError("action_cond: expected tau*action_dim actions per sample");
  if (!cfg_.action_conditioning) std::fill(data.begin(), data.end(), 0.0f);
  auto a = nn::Tensor::from({batch, in}, std::move(data));
  return act_mlp2_.fwd(nn::silu(act_mlp1_.fwd(a)));
}

nn::Tensor WorldModel::ar_logits(
    const std::vector<int>& future_tokens, const std::vector<uint8_t>& future_masked,
    const nn::Tensor& cond,
    const std::function<std::pair<nn::Tensor, nn::Tensor>(const ArBlock&)>& kv, int batch) const {
  const int d = cfg_.dim;
  auto x = embed_frames(future_tokens, future_masked, batch, 1, cfg_.tau);
  for (const auto& blk : ar_blocks_) {
    auto ada = blk.ada.fwd(nn::silu(cond));
    auto s1 = nn::slice_cols(ada, 0, d);
    auto b1 = nn::slice_cols(ada, d, d);
    auto g1 = nn::slice_cols(ada, 2 * d, d);
    auto s2 = nn::slice_cols(ada, 3 * d, d);
    auto b2 = nn::slice_cols(ada, 4 * d, d);
    auto g2 = nn::slice_cols(ada, 5 * d, d);
    auto xs = nn::modulate(blk.ln1.fwd(x), s1, b1);
    x = nn::add(x, nn::scale_rows(blk.self_attn.fwd(xs, xs), g1));
    const auto [kp, vp] = kv(blk);
    x = nn::add(x, blk.cross_attn.fwd_cached(blk.ln_cross.fwd(x), kp, vp));
    x = nn::add(x, nn::scale_rows(blk.mlp.fwd(nn::modulate(blk.ln2.fwd(x), s2, b2)), g2));
  }
  return ar_head_.fwd(ar_final_ln_.fwd(x));
}

FsqCategorical WorldModel::row_distribution(const float* row) const {
  std::vector<double> probs(static_cast<size_t>(total_levels_));
  int off = 0;
  for (int l : cfg_.levels.levels) {
    double mx = row[off];
    for (int k = 1; k < l; ++k) mx = std::max(mx, static_cast<double>(row[off + k]));
    double sum = 0.0;
    for (int k = 0; k < l; ++k) {
      probs[static_cast<size_t>(off + k)] = std::exp(static_cast<double>(row[off + k]) - mx);
      sum += probs[static_cast<size_t>(off + k)];
    }
    for (int k = 0; k < l; ++k) probs[static_cast<size_t>(off + k)] /= sum;
    off += l;
  }
  return FsqCategorical(&cfg_.levels, std::move(probs));
}

double WorldModel::factored_ce(const nn::Tensor& logits, const std::vector<int>& target_codes,
                               const std::vector<double>& weights, nn::Tensor* loss_out) const {
  const int rows = logits.rows();
  auto logits2d = nn::reshape(logits, {rows, total_levels_});
  nn::Tensor loss;
  for (size_t c = 0; c < cfg_.levels.levels.size(); ++c) {
    std::vector<int> digit_targets(static_cast<size_t>(rows), 0);
    for (int r = 0; r < rows; ++r) {
      if (weights[static_cast<size_t>(r)] == 0.0) continue;
      digit_targets[static_cast<size_t>(r)] =
          fsq::index_to_digits(static_cast<fsq::CodeIndex>(target_codes[static_cast<size_t>(r)]),
                               cfg_.levels)[c];
    }
    auto slice = nn::slice_cols(logits2d, channel_offsets_[c], cfg_.levels.levels[c]);
    auto ce = nn::cross_entropy(slice, digit_targets, weights);
    loss = loss.defined() ? nn::add(loss, ce) : ce;
  }
  if (loss_out) *loss_out = loss;
  return loss.item();
}

namespace {

struct ArWindow {
  std::vector<int> hist_tokens;
  std::vector<uint8_t> hist_masked;
  std::vector<float> window_actions;  // normalized later
};

// Left-pads short histories by repeating the oldest frame with zero actions,
// matching the rollout convention.
ArWindow build_window(const LatentEpisode& ep, int t, int tau, int n_tokens) {
  ArWindow w;
  w.hist_tokens.resize(static_cast<size_t>(tau) * n_tokens);
  w.hist_masked.assign(static_cast<size_t>(tau) * n_tokens, 0);
  w.window_actions.assign(static_cast<size_t>(tau) * 3, 0.0f);
  for (int k = 0; k < tau; ++k) {
    const int src = std::max(0, t - tau + 1 + k);
    for (int i = 0; i < n_tokens; ++i)
      w.hist_tokens[static_cast<size_t>(k) * n_tokens + i] =
          static_cast<int>(ep.codes[static_cast<size_t>(src)][static_cast<size_t>(i)]);
    const int aidx = t - tau + 1 + k;
    if (aidx >= 0) {
      w.window_actions[static_cast<size_t>(k) * 3 + 0] = ep.actions[static_cast<size_t>(aidx)].dx;
      w.window_actions[static_cast<size_t>(k) * 3 + 1] = ep.actions[static_cast<size_t>(aidx)].dy;
      w.window_actions[static_cast<size_t>(k) * 3 + 2] = ep.actions[static_cast<size_t>(aidx)].dyaw;
    }
  }
  return w;
}

}  // namespace

WorldModel::TrainStats WorldModel::train(const std::vector<LatentEpisode>& episodes, uint64_t seed,
                                         const std::function<void(int, double)>& log) {
  if (episodes.empty()) throw ValidationError("world model train: no episodes");
  for (const auto& ep : episodes) {
    if (ep.n_tokens != cfg_.n_tokens)
      throw ValidationError("world model train: token count mismatch with config");
    if (cfg_.variant == Variant::kAutoregressive) {
      if (cfg_.tau >= ep.frames())
        throw ValidationError("world model train: history window must be shorter than episodes");
    } else if (ep.frames() < cfg_.tau + cfg_.horizon + 1) {
      throw ValidationError("world model train: episodes shorter than context + horizon + 1");
    }
  }

  // Dataset-level action standardization, stored with the checkpoint.
  {
    double mean[3] = {0, 0, 0}, var[3] = {0, 0, 0};
    int64_t count = 0;
    for (const auto& ep : episodes)
      for (const auto& a : ep.actions) {
        const double v[3] = {a.dx, a.dy, a.dyaw};
        for (int i = 0; i < 3; ++i) mean[i] += v[i];
        ++count;
      }
    for (int i = 0; i < 3; ++i) mean[i] /= static_cast<double>(count);
    for (const auto& ep : episodes)
      for (const auto& a : ep.actions) {
        const double v[3] = {a.dx, a.dy, a.dyaw};
        for (int i = 0; i < 3; ++i) var[i] += (v[i] - mean[i]) * (v[i] - mean[i]);
      }
    for (int i = 0; i < 3; ++i) {
      action_stats_.data()[i] = static_cast<float>(mean[i]);
      action_stats_.data()[3 + i] =
          static_cast<float>(std::max(1e-6, std::sqrt(var[i] / static_cast<double>(count))));
    }
  }

  Rng rng = Rng::for_module(seed, "world_model.train");
  nn::AdamW opt(params_, cfg_.lr);
  const int n = cfg_.n_tokens;
  TrainStats stats;
  double smoothed = 0.0;

  for (int step = 0; step < cfg_.steps; ++step) {
    opt.zero_grad();
    nn::Tensor loss;

    if (cfg_.variant == Variant::kAutoregressive) {
      const int b = cfg_.batch;
      std::vector<int> hist_tokens(static_cast<size_t>(b) * cfg_.tau * n);
      std::vector<uint8_t> hist_masked(static_cast<size_t>(b) * cfg_.tau * n, 0);
      std::vector<float> window_actions(static_cast<size_t>(b) * cfg_.tau * 3, 0.0f);
      std::vector<int> future_tokens(static_cast<size_t>(b) * n);
      std::vector<uint8_t> future_masked(static_cast<size_t>(b) * n, 0);
      std::vector<int> targets(static_cast<size_t>(b) * n);
      std::vector<double> weights(static_cast<size_t>(b) * n, 0.0);

      for (int i = 0; i < b; ++i) {
        const auto& ep = episodes[static_cast<size_t>(rng.uniform_int(static_cast<int>(episodes.size())))];
        const int t = rng.uniform_int(ep.frames() - 1);
        auto w = build_window(ep, t, cfg_.tau, n);
        std::copy(w.hist_tokens.begin(), w.hist_tokens.end(),
                  hist_tokens.begin() + static_cast<int64_t>(i) * cfg_.tau * n);
        std::copy(w.window_actions.begin(), w.window_actions.end(),
                  window_actions.begin() + static_cast<int64_t>(i) * cfg_.tau * 3);
        if (cfg_.history_mask) {
          for (int k = 0; k < cfg_.tau; ++k) {
            const double ratio = rng.uniform() * cfg_.history_mask_max;
            const int n_mask = static_cast<int>(ratio * n);
            std::vector<int> order(static_cast<size_t>(n));
            for (int j = 0; j < n; ++j) order[static_cast<size_t>(j)] = j;
            for (int j = 0; j < n_mask; ++j) {
              const int pick = j + rng.uniform_int(n - j);
              std::swap(order[static_cast<size_t>(j)], order[static_cast<size_t>(pick)]);
              hist_masked[(static_cast<size_t>(i) * cfg_.tau + k) * n +
                          static_cast<size_t>(order[static_cast<size_t>(j)])] = 1;
            }
          }
        }
        const auto st = mask::sample_training_mask(n, rng);
        for (int j = 0; j < n; ++j) {
          const size_t at = static_cast<size_t>(i) * n + j;
          const int code = static_cast<int>(ep.codes[static_cast<size_t>(t + 1)][static_cast<size_t>(j)]);
          targets[at] = code;
          future_masked[at] = st.masked[static_cast<size_t>(j)];
          future_tokens[at] = st.masked[static_cast<size_t>(j)] ? mask::kMaskedToken : code;
          weights[at] = st.masked[static_cast<size_t>(j)] ? 1.0 : 0.0;
        }
      }
      // normalize actions
      for (int i = 0; i < b * cfg_.tau; ++i)
        for (int c = 0; c < 3; ++c)
          window_actions[static_cast<size_t>(i) * 3 + c] =
              (window_actions[static_cast<size_t>(i) * 3 + c] - action_stats_.data()[c]) /
              action_stats_.data()[3 + c];

      auto hist_emb = embed_frames(hist_tokens, hist_masked, b, cfg_.tau, 0);
      auto cond = action_cond(window_actions, b);
      auto kv = [&](const ArBlock& blk) { return blk.cross_attn.project_kv(hist_emb); };
      auto logits = ar_logits(future_tokens, future_masked, cond, kv, b);
      factored_ce(logits, targets, weights, &loss);
    } else {
      const int b = cfg_.batch;
      const int h = cfg_.horizon;
      const int f = cfg_.tau + h;
      std::vector<int> frame_tokens(static_cast<size_t>(b) * f * n);
      std::vector<uint8_t> frame_masked(static_cast<size_t>(b) * f * n, 0);
      std::vector<float> actions(static_cast<size_t>(b) * h * 3);
      std::vector<int> targets(static_cast<size_t>(b) * h * n);
      std::vector<double> weights(static_cast<size_t>(b) * h * n, 0.0);
      for (int i = 0; i < b; ++i) {
        const auto& ep = episodes[static_cast<size_t>(rng.uniform_int(static_cast<int>(episodes.size())))];
        const int s = rng.uniform_int(ep.frames() - f);
        for (int k = 0; k < f; ++k)
          for (int j = 0; j < n; ++j)
            frame_tokens[(static_cast<size_t>(i) * f + k) * n + j] =
                static_cast<int>(ep.codes[static_cast<size_t>(s + k)][static_cast<size_t>(j)]);
        for (int j = 0; j < h; ++j) {
          const auto& a = ep.actions[static_cast<size_t>(s + cfg_.tau - 1 + j)];
          actions[(static_cast<size_t>(i) * h + j) * 3 + 0] = (a.dx - action_stats_.data()[0]) / action_stats_.data()[3];
          actions[(static_cast<size_t>(i) * h + j) * 3 + 1] = (a.dy - action_stats_.data()[1]) / action_stats_.data()[4];
          actions[(static_cast<size_t>(i) * h + j) * 3 + 2] = (a.dyaw - action_stats_.data()[2]) / action_stats_.data()[5];
        }
        // Independent mask ratio per future frame (discrete diffusion forcing).
        for (int j = 0; j < h; ++j) {
          const auto st = mask::sample_training_mask(n, rng);
          for (int tkn = 0; tkn < n; ++tkn) {
            const size_t fpos = (static_cast<size_t>(i) * f + cfg_.tau + j) * n + tkn;
            const size_t tpos = (static_cast<size_t>(i) * h + j) * n + tkn;
            targets[tpos] = frame_tokens[fpos];
            weights[tpos] = st.masked[static_cast<size_t>(tkn)] ? 1.0 : 0.0;
            if (st.masked[static_cast<size_t>(tkn)]) {
              frame_masked[fpos] = 1;
              frame_tokens[fpos] = mask::kMaskedToken;
            }
          }
        }
      }
      auto logits = bc_logits_tensor(frame_tokens, frame_masked, actions, b, h);
      factored_ce(logits, targets, weights, &loss);
    }

    const double lval = loss.item();
    if (!std::isfinite(lval))
      throw TrainingDivergence("world model train: loss is not finite at step " +
                               std::to_string(step));
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

double WorldModel::heldout_ce(const std::vector<LatentEpisode>& episodes, uint64_t seed) const {
  if (cfg_.variant != Variant::kAutoregressive)
    throw UsageError("heldout_ce: implemented for the autoregressive variant");
  if (episodes.empty()) throw ValidationError("heldout_ce: no episodes");
  nn::NoGradGuard ng;
  const int n = cfg_.n_tokens;
  double total = 0.0;
  int64_t count = 0;
  int window_index = 0;
  for (const auto& ep : episodes) {
    for (int t = cfg_.tau - 1; t + 1 < ep.frames(); t += 2) {
      Rng rng(splitmix64(seed ^ static_cast<uint64_t>(0xABCD + window_index)));
      ++window_index;
      auto w = build_window(ep, t, cfg_.tau, n);
      std::vector<uint8_t> hist_masked(w.hist_tokens.size(), 0);
      std::vector<int> future_tokens(static_cast<size_t>(n));
      std::vector<uint8_t> future_masked(static_cast<size_t>(n), 0);
      std::vector<int> targets(static_cast<size_t>(n));
      std::vector<double> weights(static_cast<size_t>(n), 0.0);
      const auto st = mask::sample_training_mask(n, rng);
      for (int j = 0; j < n; ++j) {
        const int code = static_cast<int>(ep.codes[static_cast<size_t>(t + 1)][static_cast<size_t>(j)]);
        targets[static_cast<size_t>(j)] = code;
        future_masked[static_cast<size_t>(j)] = st.masked[static_cast<size_t>(j)];
        future_tokens[static_cast<size_t>(j)] =
            st.masked[static_cast<size_t>(j)] ? mask::kMaskedToken : code;
        weights[static_cast<size_t>(j)] = st.masked[static_cast<size_t>(j)] ? 1.0 : 0.0;
      }
      for (size_t i = 0; i < w.window_actions.size(); ++i) {
        const int c = static_cast<int>(i % 3);
        w.window_actions[i] = (w.window_actions[i] - action_stats_.data()[c]) /
                              action_stats_.data()[3 + c];
      }
      auto hist_emb = embed_frames(w.hist_tokens, hist_masked, 1, cfg_.tau, 0);
      auto cond = action_cond(w.window_actions, 1);
      auto kv = [&](const ArBlock& blk) { return blk.cross_attn.project_kv(hist_emb); };
      auto logits = ar_logits(future_tokens, future_masked, cond, kv, 1);
      const int masked_count = st.masked_count();
      total += factored_ce(logits, targets, weights, nullptr) * masked_count;
      count += masked_count;
    }
  }
  return total / static_cast<double>(count);
}

std::vector<CompactCode> WorldModel::rollout_ar(const std::vector<CompactCode>& history,
                                                const std::vector<world::Action>& actions,
                                                int sampling_steps, Rng& rng) const {
  std::vector<Rng> rngs{rng.fork(0)};
  auto out = rollout_ar_batch({history}, {actions}, sampling_steps, rngs);
  return out[0];
}

std::vector<std::vector<CompactCode>> WorldModel::rollout_ar_batch(
    const std::vector<std::vector<CompactCode>>& histories,
    const std::vector<std::vector<world::Action>>& actions, int sampling_steps,
    std::vector<Rng>& rngs) const {
  if (cfg_.variant != Variant::kAutoregressive)
    throw UsageError("rollout_ar: checkpoint is block-causal; use predict_parallel");
  const int b = static_cast<int>(histories.size());
  if (static_cast<int>(actions.size()) != b || static_cast<int>(rngs.size()) != b)
    throw DimensionError("rollout_ar_batch: batch size mismatch");
  if (b == 0) return {};
  const size_t h_count = actions[0].size();
  for (const auto& a : actions)
    if (a.size() != h_count) throw DimensionError("rollout_ar_batch: ragged action sequences");
  std::vector<std::vector<CompactCode>> out(static_cast<size_t>(b));
  if (h_count == 0) return out;
  for (const auto& h : histories) {
    if (h.empty()) throw ValidationError("rollout_ar: history must be non-empty");
    if (static_cast<int>(h.size()) > cfg_.tau)
      throw ValidationError("rollout_ar: history longer than the model's window");
    for (const auto& code : h)
      if (static_cast<int>(code.size()) != cfg_.n_tokens)
        throw DimensionError("rollout_ar: token count mismatch");
  }
  if (sampling_steps <= 0) sampling_steps = cfg_.sampling_steps;
  sampling_steps = std::min(sampling_steps, cfg_.n_tokens);

  nn::NoGradGuard ng;
  const int n = cfg_.n_tokens;
  const int tau = cfg_.tau;
  std::vector<SlidingWindow> windows;
  windows.reserve(static_cast<size_t>(b));
  for (const auto& h : histories) windows.emplace_back(h, tau);
  std::vector<std::vector<world::Action>> past(static_cast<size_t>(b));

  const int hist_mask_count =
      static_cast<int>(std::lround(cfg_.infer_history_mask * n));

  for (size_t step_h = 0; step_h < h_count; ++step_h) {
    std::vector<int> hist_tokens(static_cast<size_t>(b) * tau * n);
    std::vector<uint8_t> hist_masked(static_cast<size_t>(b) * tau * n, 0);
    std::vector<float> window_actions(static_cast<size_t>(b) * tau * 3, 0.0f);
    for (int i = 0; i < b; ++i) {
      const auto& win = windows[static_cast<size_t>(i)].frames();
      for (int k = 0; k < tau; ++k) {
        const int src = std::max(0, static_cast<int>(win.size()) - tau + k);
        for (int j = 0; j < n; ++j)
          hist_tokens[(static_cast<size_t>(i) * tau + k) * n + j] =
              static_cast<int>(win[static_cast<size_t>(src)][static_cast<size_t>(j)]);
        // Slightly masked history at inference.
        if (cfg_.history_mask && hist_mask_count > 0) {
          std::vector<int> order(static_cast<size_t>(n));
          for (int j = 0; j < n; ++j) order[static_cast<size_t>(j)] = j;
          for (int j = 0; j < hist_mask_count; ++j) {
            const int pick = j + rngs[static_cast<size_t>(i)].uniform_int(n - j);
            std::swap(order[static_cast<size_t>(j)], order[static_cast<size_t>(pick)]);
            hist_masked[(static_cast<size_t>(i) * tau + k) * n +
                        static_cast<size_t>(order[static_cast<size_t>(j)])] = 1;
          }
        }
      }
      // Window actions: previously executed actions, newest last = current.
      auto& pa = past[static_cast<size_t>(i)];
      for (int k = 0; k < tau; ++k) {
        const int rel = tau - 1 - k;  // 0 = current action
        const world::Action* a = nullptr;
        if (rel == 0)
          a = &actions[static_cast<size_t>(i)][step_h];
        else if (static_cast<int>(pa.size()) >= rel)
          a = &pa[pa.size() - static_cast<size_t>(rel)];
        if (a) {
          const float raw[3] = {a->dx, a->dy, a->dyaw};
          for (int c = 0; c < 3; ++c)
            window_actions[(static_cast<size_t>(i) * tau + k) * 3 + c] =
                (raw[c] - action_stats_.data()[c]) / action_stats_.data()[3 + c];
        } else {
          for (int c = 0; c < 3; ++c)
            window_actions[(static_cast<size_t>(i) * tau + k) * 3 + c] =
                (0.0f - action_stats_.data()[c]) / action_stats_.data()[3 + c];
        }
      }
    }

    auto hist_emb = embed_frames(hist_tokens, hist_masked, b, tau, 0);
    auto cond = action_cond(window_actions, b);
    // History K/V per block are fixed for the whole unmask loop.
    std::vector<std::pair<nn::Tensor, nn::Tensor>> cached;
    cached.reserve(ar_blocks_.size());
    for (const auto& blk : ar_blocks_) cached.push_back(blk.cross_attn.project_kv(hist_emb));

    std::vector<mask::UnmaskController> ctls;
    ctls.reserve(static_cast<size_t>(b));
    for (int i = 0; i < b; ++i) ctls.emplace_back(n, sampling_steps);

    while (!ctls[0].done()) {
      std::vector<int> future_tokens(static_cast<size_t>(b) * n);
      std::vector<uint8_t> future_masked(static_cast<size_t>(b) * n);
      for (int i = 0; i < b; ++i) {
        std::copy(ctls[static_cast<size_t>(i)].tokens().begin(),
                  ctls[static_cast<size_t>(i)].tokens().end(),
                  future_tokens.begin() + static_cast<int64_t>(i) * n);
        std::copy(ctls[static_cast<size_t>(i)].masked().begin(),
                  ctls[static_cast<size_t>(i)].masked().end(),
                  future_masked.begin() + static_cast<int64_t>(i) * n);
      }
      size_t blk_i = 0;
      auto kv = [&](const ArBlock&) { return cached[blk_i++]; };
      auto logits = ar_logits(future_tokens, future_masked, cond, kv, b);
      for (int i = 0; i < b; ++i) {
        std::vector<FsqCategorical> dists;
        dists.reserve(static_cast<size_t>(n));
        for (int j = 0; j < n; ++j)
          dists.push_back(row_distribution(logits.data() +
                                           (static_cast<int64_t>(i) * n + j) * total_levels_));
        ctls[static_cast<size_t>(i)].advance(dists, rngs[static_cast<size_t>(i)]);
      }
    }

    for (int i = 0; i < b; ++i) {
      CompactCode code(static_cast<size_t>(n));
      for (int j = 0; j < n; ++j)
        code[static_cast<size_t>(j)] =
            static_cast<fsq::CodeIndex>(ctls[static_cast<size_t>(i)].tokens()[static_cast<size_t>(j)]);
      out[static_cast<size_t>(i)].push_back(code);
      windows[static_cast<size_t>(i)].push(code);
      past[static_cast<size_t>(i)].push_back(actions[static_cast<size_t>(i)][step_h]);
    }
  }
  return out;
}

const nn::AttnMask& WorldModel::bc_mask(int horizon) const {
  const auto it = bc_mask_cache_.find(horizon);
  if (it != bc_mask_cache_.end()) return it->second;
  const int n = cfg_.n_tokens;
  const int tau = cfg_.tau;
  const int len = (tau + horizon) * n + horizon;
  // rank(frame s) = 2s, rank(action j) = 2(tau+j) - 1; keys with rank <=
  // query rank are visible.
  std::vector<int> rank(static_cast<size_t>(len));
  int at = 0;
  for (int s = 0; s < tau; ++s)
    for (int j = 0; j < n; ++j) rank[static_cast<size_t>(at++)] = 2 * s;
  for (int j = 0; j < horizon; ++j) {
    rank[static_cast<size_t>(at++)] = 2 * (tau + j) - 1;
    for (int k = 0; k < n; ++k) rank[static_cast<size_t>(at++)] = 2 * (tau + j);
  }
  nn::AttnMask mask;
  mask.tq = len;
  mask.tk = len;
  mask.allow.assign(static_cast<size_t>(len) * len, 0);
  for (int q = 0; q < len; ++q)
    for (int k = 0; k < len; ++k)
      if (rank[static_cast<size_t>(k)] <= rank[static_cast<size_t>(q)])
        mask.allow[static_cast<size_t>(q) * len + k] = 1;
  return bc_mask_cache_.emplace(horizon, std::move(mask)).first->second;
}

nn::Tensor WorldModel::bc_logits_tensor(const std::vector<int>& frame_tokens,
                                        const std::vector<uint8_t>& frame_masked,
                                        const std::vector<float>& actions, int batch,
                                        int horizon) const {
  const int n = cfg_.n_tokens;
  const int tau = cfg_.tau;
  const int f = tau + horizon;
  const int d = cfg_.dim;
  const int len = f * n + horizon;

  auto frames_emb = embed_frames(frame_tokens, frame_masked, batch, f, 0);  // [B, f*n, D]

  std::vector<float> act_data(actions);
  if (static_cast<int>(act_data.size()) != batch * horizon * cfg_.action_dim)
    throw DimensionError("bc_logits_tensor: action layout mismatch");
  if (!cfg_.action_conditioning) std::fill(act_data.begin(), act_data.end(), 0.0f);
  auto act_in = nn::Tensor::from({batch * horizon, cfg_.action_dim}, std::move(act_data));
  auto act_emb2 = act_proj_.fwd(act_in);
  // One shared action-type embedding marks action tokens.
  act_emb2 = nn::add(act_emb2, nn::embedding(act_type_, std::vector<int>(
                                                            static_cast<size_t>(batch) * horizon, 0)));
  std::vector<int> slot_idx(static_cast<size_t>(batch) * horizon);
  const int max_slot = frame_slot_.dim(0) - 1;
  for (int i = 0; i < batch * horizon; ++i)
    slot_idx[static_cast<size_t>(i)] = std::min(max_slot, tau + i % horizon);
  act_emb2 = nn::add(act_emb2, nn::embedding(frame_slot_, slot_idx));
  auto act_emb = nn::reshape(act_emb2, {batch, horizon, d});

  // Interleave [ctx frames..., a_0, f_tau, a_1, f_tau+1, ...] with one gather.
  auto full = nn::concat_time(frames_emb, act_emb);  // [B, f*n + horizon, D]
  std::vector<int> order;
  order.reserve(static_cast<size_t>(batch) * len);
  for (int i = 0; i < batch; ++i) {
    const int base = i * (f * n + horizon);
    for (int s = 0; s < tau; ++s)
      for (int j = 0; j < n; ++j) order.push_back(base + s * n + j);
    for (int j = 0; j < horizon; ++j) {
      order.push_back(base + f * n + j);
      for (int k = 0; k < n; ++k) order.push_back(base + (tau + j) * n + k);
    }
  }
  auto x = nn::reshape(nn::gather_rows(nn::reshape(full, {batch * (f * n + horizon), d}), order),
                       {batch, len, d});

  const auto& mask = bc_mask(horizon);
  for (const auto& blk : bc_blocks_) x = blk.fwd(x, &mask);

  // Per-frame prediction heads conditioned on the action token's output.
  auto flat = nn::reshape(x, {batch * len, d});
  nn::Tensor all_logits;
  for (int j = 0; j < horizon; ++j) {
    std::vector<int> cond_rows(static_cast<size_t>(batch));
    std::vector<int> frame_rows(static_cast<size_t>(batch) * n);
    for (int i = 0; i < batch; ++i) {
      const int act_pos = tau * n + j * (n + 1);
      cond_rows[static_cast<size_t>(i)] = i * len + act_pos;
      for (int k = 0; k < n; ++k)
        frame_rows[static_cast<size_t>(i) * n + k] = i * len + act_pos + 1 + k;
    }
    auto cond = nn::gather_rows(flat, cond_rows);                       // [B, D]
    auto frame = nn::reshape(nn::gather_rows(flat, frame_rows), {batch, n, d});
    auto ada = bc_ada_.fwd(nn::silu(cond));
    auto sc = nn::slice_cols(ada, 0, d);
    auto sh = nn::slice_cols(ada, d, d);
    auto logits_j = bc_head_.fwd(nn::modulate(bc_head_ln_.fwd(frame), sc, sh));  // [B, n, L]
    all_logits = all_logits.defined() ? nn::concat_time(all_logits, logits_j) : logits_j;
  }
  return all_logits;  // [B, horizon*n, total_levels] (frame-major per batch)
}

std::vector<CompactCode> WorldModel::predict_parallel(const std::vector<CompactCode>& context,
                                                      const std::vector<world::Action>& actions,
                                                      int sampling_steps, Rng& rng) const {
  if (cfg_.variant != Variant::kBlockCausal)
    throw UsageError("predict_parallel: checkpoint is autoregressive; use rollout_ar");
  if (static_cast<int>(context.size()) != cfg_.tau)
    throw ValidationError("predict_parallel: context length must equal tau");
  const int h = static_cast<int>(actions.size());
  if (h == 0) return {};
  const int n = cfg_.n_tokens;
  if (sampling_steps <= 0) sampling_steps = WmConfig::scaled_bc_steps(h, n);
  sampling_steps = std::min(sampling_steps, h * n);
  nn::NoGradGuard ng;

  std::vector<float> acts(static_cast<size_t>(h) * 3);
  for (int j = 0; j < h; ++j) {
    const float raw[3] = {actions[static_cast<size_t>(j)].dx, actions[static_cast<size_t>(j)].dy,
                          actions[static_cast<size_t>(j)].dyaw};
    for (int c = 0; c < 3; ++c)
      acts[static_cast<size_t>(j) * 3 + c] = (raw[c] - action_stats_.data()[c]) / action_stats_.data()[3 + c];
  }

  auto predictor = [&](const std::vector<int>& tokens, const std::vector<uint8_t>& masked) {
    const int f = cfg_.tau + h;
    std::vector<int> frame_tokens(static_cast<size_t>(f) * n);
    std::vector<uint8_t> frame_masked(static_cast<size_t>(f) * n, 0);
    for (int s = 0; s < cfg_.tau; ++s)
      for (int j = 0; j < n; ++j)
        frame_tokens[static_cast<size_t>(s) * n + j] =
            static_cast<int>(context[static_cast<size_t>(s)][static_cast<size_t>(j)]);
    for (int j = 0; j < h * n; ++j) {
      frame_tokens[static_cast<size_t>(cfg_.tau) * n + j] = tokens[static_cast<size_t>(j)];
      frame_masked[static_cast<size_t>(cfg_.tau) * n + j] = masked[static_cast<size_t>(j)];
    }
    auto logits = bc_logits_tensor(frame_tokens, frame_masked, acts, 1, h);
    std::vector<FsqCategorical> dists;
    dists.reserve(static_cast<size_t>(h) * n);
    for (int j = 0; j < h * n; ++j)
      dists.push_back(row_distribution(logits.data() + static_cast<int64_t>(j) * total_levels_));
    return dists;
  };
  const auto tokens = mask::iterative_unmask<FsqCategorical>(predictor, h * n, sampling_steps, rng);

  std::vector<CompactCode> out(static_cast<size_t>(h), CompactCode(static_cast<size_t>(n)));
  for (int j = 0; j < h; ++j)
    for (int k = 0; k < n; ++k)
      out[static_cast<size_t>(j)][static_cast<size_t>(k)] =
          static_cast<fsq::CodeIndex>(tokens[static_cast<size_t>(j) * n + k]);
  return out;
}

std::vector<float> WorldModel::bc_future_logits(const std::vector<CompactCode>& context,
                                                const std::vector<world::Action>& actions,
                                                const std::vector<int>& future_tokens) const {
  if (cfg_.variant != Variant::kBlockCausal)
    throw UsageError("bc_future_logits: autoregressive checkpoint");
  if (static_cast<int>(context.size()) != cfg_.tau)
    throw ValidationError("bc_future_logits: context length must equal tau");
  const int h = static_cast<int>(actions.size());
  const int n = cfg_.n_tokens;
  if (static_cast<int>(future_tokens.size()) != h * n)
    throw DimensionError("bc_future_logits: future token layout mismatch");
  nn::NoGradGuard ng;

  const int f = cfg_.tau + h;
  std::vector<int> frame_tokens(static_cast<size_t>(f) * n);
  std::vector<uint8_t> frame_masked(static_cast<size_t>(f) * n, 0);
  for (int s = 0; s < cfg_.tau; ++s)
    for (int j = 0; j < n; ++j)
      frame_tokens[static_cast<size_t>(s) * n + j] =
          static_cast<int>(context[static_cast<size_t>(s)][static_cast<size_t>(j)]);
  for (int j = 0; j < h * n; ++j) {
    const int t = future_tokens[static_cast<size_t>(j)];
    frame_tokens[static_cast<size_t>(cfg_.tau) * n + j] = t < 0 ? mask::kMaskedToken : t;
    frame_masked[static_cast<size_t>(cfg_.tau) * n + j] = t < 0 ? 1 : 0;
  }
  std::vector<float> acts(static_cast<size_t>(h) * 3);
  for (int j = 0; j < h; ++j) {
    const float raw[3] = {actions[static_cast<size_t>(j)].dx, actions[static_cast<size_t>(j)].dy,
                          actions[static_cast<size_t>(j)].dyaw};
    for (int c = 0; c < 3; ++c)
      acts[static_cast<size_t>(j) * 3 + c] = (raw[c] - action_stats_.data()[c]) / action_stats_.data()[3 + c];
  }
  auto logits = bc_logits_tensor(frame_tokens, frame_masked, acts, 1, h);
  return std::vector<float>(logits.data(), logits.data() + logits.numel());
}

}  // namespace cwm::wm
