#include "cwm/idm.hpp"

#include <cmath>

namespace cwm::idm {

DiffusionSchedule DiffusionSchedule::squared_cosine(int timesteps) {
  if (timesteps < 1) throw ValidationError("DiffusionSchedule: timesteps must be >= 1");
  DiffusionSchedule s;
  s.timesteps = timesteps;
  s.alpha_bar.resize(static_cast<size_t>(timesteps) + 1);
  s.beta.resize(static_cast<size_t>(timesteps));
  const double offset = 0.008;
  auto f = [&](double t) {
    const double v = std::cos((t / timesteps + offset) / (1.0 + offset) * 1.5707963267948966);
    return v * v;
  };
  const double f0 = f(0.0);
  for (int t = 0; t <= timesteps; ++t)
    s.alpha_bar[static_cast<size_t>(t)] = f(static_cast<double>(t)) / f0;
  for (int t = 1; t <= timesteps; ++t) {
    const double b = 1.0 - s.alpha_bar[static_cast<size_t>(t)] / s.alpha_bar[static_cast<size_t>(t - 1)];
    s.beta[static_cast<size_t>(t - 1)] = std::clamp(b, 1e-8, 0.999);
  }
  return s;
}

IdmMetrics idm_metrics(const std::vector<world::Action>& predictions,
                       const std::vector<world::Action>& ground_truths) {
  if (predictions.empty() || predictions.size() != ground_truths.size())
    throw ValidationError("idm_metrics: prediction/ground-truth lists must be equal and non-empty");
  const size_t n = predictions.size();
  IdmMetrics m;
  double abs_sum = 0.0;
  double r2_sum = 0.0;
  int r2_terms = 0;
  bool undefined = false;
  for (int c = 0; c < 3; ++c) {
    auto get = [&](const world::Action& a) {
      return c == 0 ? a.dx : (c == 1 ? a.dy : a.dyaw);
    };
    double gt_mean = 0.0;
    for (size_t i = 0; i < n; ++i) gt_mean += get(ground_truths[i]);
    gt_mean /= static_cast<double>(n);
    double ss_res = 0.0, ss_tot = 0.0;
    for (size_t i = 0; i < n; ++i) {
      const double err = get(predictions[i]) - get(ground_truths[i]);
      abs_sum += std::abs(err);
      ss_res += err * err;
      const double dvt = get(ground_truths[i]) - gt_mean;
      ss_tot += dvt * dvt;
    }
    if (ss_tot <= 0.0) {
      undefined = true;
      continue;
    }
    r2_sum += 1.0 - ss_res / ss_tot;
    ++r2_terms;
  }
  m.l1 = abs_sum / (3.0 * static_cast<double>(n));
  if (r2_terms == 0 || undefined) {
    m.r2_defined = false;
    m.r2 = std::numeric_limits<double>::quiet_NaN();
    if (r2_terms > 0) m.r2 = r2_sum / r2_terms;  // partial, still flagged
  } else {
    m.r2 = r2_sum / r2_terms;
  }
  return m;
}

IdmModel::IdmModel(const IdmConfig& cfg, uint64_t seed)
    : cfg_(cfg), schedule_(DiffusionSchedule::squared_cosine(cfg.timesteps)) {
  cfg_.levels.validate();
  Rng rng = Rng::for_module(seed, "idm.init");
  const int d = cfg_.enc_dim;
  token_lift_ = nn::LinearLayer::make(params_, "token_lift", cfg_.levels.channels(), d, rng);
  token_pos_ = params_.add("token_pos", {cfg_.n_tokens, d}, nn::normal_init<float>(rng, 0.02));
  frame_slot_ = params_.add("frame_slot", {2, d}, nn::normal_init<float>(rng, 0.02));
  for (int i = 0; i < cfg_.enc_depth; ++i)
    enc_blocks_.push_back(nn::EncoderBlock::make(params_, "enc" + std::to_string(i), d,
                                                 cfg_.enc_heads, d * cfg_.mlp_ratio, rng));
  enc_final_ln_ = nn::LayerNormLayer::make(params_, "enc_final_ln", d);
  pool_proj_ = nn::LinearLayer::make(params_, "pool_proj", d, cfg_.hidden, rng);
  denoiser_ = Denoiser::make(params_, "denoiser", cfg_.action_dim, cfg_.hidden, cfg_.mlp_layers, rng);
  action_stats_ = params_.add_buffer("action_stats", {2, cfg_.action_dim});
  for (int i = 0; i < cfg_.action_dim; ++i) {
    action_stats_.data()[i] = 0.0f;
    action_stats_.data()[cfg_.action_dim + i] = 1.0f;
  }
}

nn::Tensor IdmModel::encode_pairs(const std::vector<const FramePair*>& pairs) const {
  const int b = static_cast<int>(pairs.size());
  const int n = cfg_.n_tokens;
  const int channels = cfg_.levels.channels();
  const int d = cfg_.enc_dim;
  const int rows = b * 2 * n;
  std::vector<float> levels(static_cast<size_t>(rows) * channels);
  std::vector<int> tok_idx(static_cast<size_t>(rows));
  std::vector<int> slot_idx(static_cast<size_t>(rows));
  for (int i = 0; i < b; ++i) {
    const auto& p = *pairs[static_cast<size_t>(i)];
    if (static_cast<int>(p.before.size()) != n || static_cast<int>(p.after.size()) != n)
      throw DimensionError("idm: compact code token count mismatch");
    for (int fr = 0; fr < 2; ++fr) {
      const auto& code = fr == 0 ? p.before : p.after;
      for (int j = 0; j < n; ++j) {
        const int r = (i * 2 + fr) * n + j;
        fsq::code_to_vector_f(code[static_cast<size_t>(j)], cfg_.levels,
                              levels.data() + static_cast<int64_t>(r) * channels);
        tok_idx[static_cast<size_t>(r)] = j;
        slot_idx[static_cast<size_t>(r)] = fr;
      }
    }
  }
  auto x = token_lift_.fwd(nn::Tensor::from({rows, channels}, std::move(levels)));
  x = nn::add(x, nn::embedding(token_pos_, tok_idx));
  x = nn::add(x, nn::embedding(frame_slot_, slot_idx));
  auto tokens = nn::reshape(x, {b, 2 * n, d});
  for (const auto& blk : enc_blocks_) tokens = blk.fwd(tokens);
  return pool_proj_.fwd(nn::mean_time(enc_final_ln_.fwd(tokens)));
}

IdmModel::TrainStats IdmModel::train(const std::vector<FramePair>& pairs, uint64_t seed,
                                     const std::function<void(int, double)>& log) {
  if (pairs.empty()) throw ValidationError("idm train: no frame pairs");
  Rng rng = Rng::for_module(seed, "idm.train");
  nn::AdamW opt(params_, cfg_.lr);

  {
    double mean[3] = {0, 0, 0}, var[3] = {0, 0, 0};
    for (const auto& p : pairs) {
      const double v[3] = {p.action.dx, p.action.dy, p.action.dyaw};
      for (int i = 0; i < 3; ++i) mean[i] += v[i];
    }
    for (int i = 0; i < 3; ++i) mean[i] /= static_cast<double>(pairs.size());
    for (const auto& p : pairs) {
      const double v[3] = {p.action.dx, p.action.dy, p.action.dyaw};
      for (int i = 0; i < 3; ++i) var[i] += (v[i] - mean[i]) * (v[i] - mean[i]);
    }
    for (int i = 0; i < 3; ++i) {
      action_stats_.data()[i] = static_cast<float>(mean[i]);
      action_stats_.data()[3 + i] = static_cast<float>(
          std::max(1e-6, std::sqrt(var[i] / static_cast<double>(pairs.size()))));
    }
  }

  TrainStats stats;
  double smoothed = 0.0;
  const int a_dim = cfg_.action_dim;
  for (int step = 0; step < cfg_.steps; ++step) {
    std::vector<const FramePair*> batch;
    for (int i = 0; i < cfg_.batch; ++i)
      batch.push_back(&pairs[static_cast<size_t>(rng.uniform_int(static_cast<int>(pairs.size())))]);
    const int b = static_cast<int>(batch.size());

    std::vector<float> noisy(static_cast<size_t>(b) * a_dim);
    std::vector<float> target_noise(static_cast<size_t>(b) * a_dim);
    std::vector<double> t_frac(static_cast<size_t>(b));
    for (int i = 0; i < b; ++i) {
      const int t = 1 + rng.uniform_int(schedule_.timesteps);
      t_frac[static_cast<size_t>(i)] = static_cast<double>(t) / schedule_.timesteps;
      const double ab = schedule_.alpha_bar[static_cast<size_t>(t)];
      const auto& a = batch[static_cast<size_t>(i)]->action;
      const double raw[3] = {a.dx, a.dy, a.dyaw};
      for (int c = 0; c < a_dim; ++c) {
        const double norm = (raw[c] - action_stats_.data()[c]) / action_stats_.data()[a_dim + c];
        const double eps = rng.normal();
        target_noise[static_cast<size_t>(i) * a_dim + c] = static_cast<float>(eps);
        noisy[static_cast<size_t>(i) * a_dim + c] =
            static_cast<float>(std::sqrt(ab) * norm + std::sqrt(1.0 - ab) * eps);
      }
    }

    opt.zero_grad();
    auto cond = encode_pairs(batch);
    auto pred = denoiser_.fwd(nn::Tensor::from({b, a_dim}, std::move(noisy)), cond, t_frac);
    auto loss = nn::mse_loss(pred, target_noise);
    const double lval = loss.item();
    if (!std::isfinite(lval))
      throw TrainingDivergence("idm train: loss is not finite at step " + std::to_string(step));
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
  trained_ = true;
  return stats;
}

std::vector<world::Action> IdmModel::predict_batch(const std::vector<FramePair>& pairs, Rng& rng,
                                                   bool zero_conditioning) const {
  if (!trained_) throw StateError("idm: model has not been trained");
  if (pairs.empty()) return {};
  nn::NoGradGuard ng;
  const int b = static_cast<int>(pairs.size());
  const int a_dim = cfg_.action_dim;

  std::vector<const FramePair*> ptrs;
  for (const auto& p : pairs) ptrs.push_back(&p);
  auto cond = encode_pairs(ptrs);
  if (zero_conditioning) std::fill_n(cond.data(), cond.numel(), 0.0f);

  // Ancestral DDPM sampling through the full schedule.
  std::vector<float> x(static_cast<size_t>(b) * a_dim);
  for (auto& v : x) v = rng.normal_f();
  std::vector<double> t_frac(static_cast<size_t>(b));
  for (int t = schedule_.timesteps; t >= 1; --t) {
    std::fill(t_frac.begin(), t_frac.end(), static_cast<double>(t) / schedule_.timesteps);
    auto eps = denoiser_.fwd(nn::Tensor::from({b, a_dim}, x), cond, t_frac);
    const double ab_t = schedule_.alpha_bar[static_cast<size_t>(t)];
    const double ab_prev = schedule_.alpha_bar[static_cast<size_t>(t - 1)];
    const double beta_t = schedule_.beta[static_cast<size_t>(t - 1)];
    const double alpha_t = 1.0 - beta_t;
    const double sigma = t > 1 ? std::sqrt((1.0 - ab_prev) / (1.0 - ab_t) * beta_t) : 0.0;
    for (int i = 0; i < b * a_dim; ++i) {
      const double mean = (static_cast<double>(x[static_cast<size_t>(i)]) -
                           beta_t / std::sqrt(1.0 - ab_t) * eps.data()[i]) /
                          std::sqrt(alpha_t);
      x[static_cast<size_t>(i)] = static_cast<float>(mean + (t > 1 ? sigma * rng.normal() : 0.0));
    }
  }

  std::vector<world::Action> out(static_cast<size_t>(b));
  for (int i = 0; i < b; ++i) {
    float de[3];
    for (int c = 0; c < a_dim; ++c)
      de[c] = x[static_cast<size_t>(i) * a_dim + c] * action_stats_.data()[a_dim + c] +
              action_stats_.data()[c];
    out[static_cast<size_t>(i)] = world::Action{de[0], de[1], de[2]};
  }
  return out;
}

world::Action IdmModel::predict(const CompactCode& before, const CompactCode& after, Rng& rng,
                                bool zero_conditioning) const {
  FramePair p;
  p.before = before;
  p.after = after;
  return predict_batch({p}, rng, zero_conditioning)[0];
}

}  // namespace cwm::idm
