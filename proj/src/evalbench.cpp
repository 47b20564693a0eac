#include "cwm/evalbench.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "cwm/io.hpp"

namespace cwm::bench {

Trajectory Trajectory::from_raw(const std::vector<world::Pose>& raw) {
  if (raw.empty()) throw ValidationError("Trajectory: empty pose list");
  Trajectory t;
  t.poses.reserve(raw.size());
  const auto& o = raw[0];
  const double c = std::cos(o.yaw), s = std::sin(o.yaw);
  for (const auto& p : raw) {
    const double dx = static_cast<double>(p.x) - o.x;
    const double dy = static_cast<double>(p.y) - o.y;
    world::Pose rel;
    rel.x = static_cast<float>(c * dx + s * dy);
    rel.y = static_cast<float>(-s * dx + c * dy);
    rel.yaw = world::wrap_angle(static_cast<double>(p.yaw) - o.yaw);
    t.poses.push_back(rel);
  }
  return t;
}

namespace {

void check_lengths(const Trajectory& pred, const Trajectory& gt) {
  if (pred.poses.size() != gt.poses.size())
    throw ValidationError("trajectory metric: length mismatch");
  if (pred.poses.size() < 2) throw ValidationError("trajectory metric: need at least 2 poses");
}

}  // namespace

AteResult ate(const Trajectory& pred, const Trajectory& gt) {
  check_lengths(pred, gt);
  double pos_sq = 0.0, yaw_sq = 0.0;
  for (size_t t = 0; t < pred.poses.size(); ++t) {
    const auto& a = pred.poses[t];
    const auto& b = gt.poses[t];
    pos_sq += (a.x - b.x) * static_cast<double>(a.x - b.x) +
              (a.y - b.y) * static_cast<double>(a.y - b.y);
    const double dyaw = world::wrap_angle(static_cast<double>(a.yaw) - b.yaw);
    yaw_sq += dyaw * dyaw;
  }
  AteResult r;
  r.position_rmse = std::sqrt(pos_sq / static_cast<double>(pred.poses.size()));
  r.yaw_rmse = std::sqrt(yaw_sq / static_cast<double>(pred.poses.size()));
  return r;
}

AteResult rpe(const Trajectory& pred, const Trajectory& gt) {
  check_lengths(pred, gt);
  double pos_sq = 0.0, yaw_sq = 0.0;
  const size_t steps = pred.poses.size() - 1;
  auto delta = [](const world::Pose& from, const world::Pose& to) {
    // Relative transform from -> to (position in the frame of `from`).
    const double c = std::cos(from.yaw), s = std::sin(from.yaw);
    const double dx = static_cast<double>(to.x) - from.x;
    const double dy = static_cast<double>(to.y) - from.y;
    world::Pose d;
    d.x = static_cast<float>(c * dx + s * dy);
    d.y = static_cast<float>(-s * dx + c * dy);
    d.yaw = world::wrap_angle(static_cast<double>(to.yaw) - from.yaw);
    return d;
  };
  for (size_t t = 0; t < steps; ++t) {
    const auto dp = delta(pred.poses[t], pred.poses[t + 1]);
    const auto dg = delta(gt.poses[t], gt.poses[t + 1]);
    pos_sq += (dp.x - dg.x) * static_cast<double>(dp.x - dg.x) +
              (dp.y - dg.y) * static_cast<double>(dp.y - dg.y);
    const double dyaw = world::wrap_angle(static_cast<double>(dp.yaw) - dg.yaw);
    yaw_sq += dyaw * dyaw;
  }
  AteResult r;
  r.position_rmse = std::sqrt(pos_sq / static_cast<double>(steps));
  r.yaw_rmse = std::sqrt(yaw_sq / static_cast<double>(steps));
  return r;
}

double ape(const std::vector<tok::CompactCode>& generated,
           const std::vector<world::Action>& conditioning_actions, const idm::IdmModel& model,
           int context, Rng& rng) {
  if (!model.trained()) throw StateError("ape: IDM has not been trained");
  if (context < 1) throw ValidationError("ape: need at least one context frame");
  if (generated.size() != conditioning_actions.size() + static_cast<size_t>(context))
    throw ValidationError("ape: generated frame count must equal actions + context");
  if (conditioning_actions.empty()) throw ValidationError("ape: no conditioning actions");

  std::vector<idm::FramePair> pairs(conditioning_actions.size());
  for (size_t j = 0; j < conditioning_actions.size(); ++j) {
    pairs[j].before = generated[static_cast<size_t>(context) - 1 + j];
    pairs[j].after = generated[static_cast<size_t>(context) + j];
    pairs[j].action = conditioning_actions[j];
  }
  const auto preds = model.predict_batch(pairs, rng);
  double total = 0.0;
  for (size_t j = 0; j < preds.size(); ++j) {
    total += std::abs(preds[j].dx - conditioning_actions[j].dx) +
             std::abs(preds[j].dy - conditioning_actions[j].dy) +
             std::abs(preds[j].dyaw - conditioning_actions[j].dyaw);
  }
  return total / static_cast<double>(preds.size());
}

std::vector<LatencyBreakdown> bench_latency(const BenchParams& params,
                                            const world::WorldConfig& world, uint64_t seed) {
  std::vector<LatencyBreakdown> out;
  for (int n_tokens : params.token_counts) {
    // Synthetic weights: timing only. The architecture preset is fixed and
    // only the per-frame token count varies.
    wm::WmConfig wcfg;
    wcfg.variant = wm::Variant::kAutoregressive;
    wcfg.n_tokens = n_tokens;
    wcfg.dim = params.dim;
    wcfg.depth = params.depth;
    wcfg.heads = params.heads;
    wcfg.tau = 2;
    wcfg.sampling_steps = params.sampling_steps;
    wm::WorldModel model(wcfg, seed);

    Rng rng = Rng::for_module(seed, "bench");
    tok::CompactCode z0(static_cast<size_t>(n_tokens));
    tok::CompactCode z_goal(static_cast<size_t>(n_tokens));
    const auto k = static_cast<int>(wcfg.levels.codebook_size());
    for (auto& c : z0) c = static_cast<fsq::CodeIndex>(rng.uniform_int(k));
    for (auto& c : z_goal) c = static_cast<fsq::CodeIndex>(rng.uniform_int(k));

    plan::CemParams cem;
    cem.population = params.population;
    cem.horizon = params.horizon;
    cem.rollouts_per_candidate = params.rollouts_per_candidate;
    cem.elites = std::min(3, params.population);
    cem.proposal_sigma = {0.3 * world.max_step * cem.horizon, 0.3 * world.max_step * cem.horizon,
                          0.5 * world.max_turn};

    std::vector<LatencyBreakdown> trials;
    for (int trial = 0; trial < params.trials; ++trial) {
      // Latent cost needs no tokenizer; pixel mode is exercised by the
      // planner tests instead (a synthetic decoder would dominate timing).
      class LatentOnlyBackend final : public plan::RolloutBackend {
       public:
        LatentOnlyBackend(const wm::WorldModel* m, tok::CompactCode z0, tok::CompactCode zg,
                          int steps)
            : model_(m), z0_(std::move(z0)), zg_(std::move(zg)), steps_(steps) {}
        std::vector<double> evaluate(const std::vector<std::vector<world::Action>>& seqs,
                                     int rollouts, Rng& rng, plan::PhaseTimers& timers) override {
          const int p = static_cast<int>(seqs.size());
          std::vector<std::vector<tok::CompactCode>> histories(
              static_cast<size_t>(p) * rollouts, {z0_});
          std::vector<std::vector<world::Action>> actions(static_cast<size_t>(p) * rollouts);
          std::vector<Rng> rngs;
          for (int j = 0; j < p; ++j)
            for (int m = 0; m < rollouts; ++m) {
              actions[static_cast<size_t>(j * rollouts + m)] = seqs[static_cast<size_t>(j)];
              rngs.push_back(rng.fork(static_cast<uint64_t>(j * rollouts + m)));
            }
          const auto t0 = std::chrono::steady_clock::now();
          const auto outs = model_->rollout_ar_batch(histories, actions, steps_, rngs);
          timers.rollout_seconds +=
              std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
          timers.rollout_calls += static_cast<int64_t>(p) * rollouts *
                                  (seqs.empty() ? 0 : static_cast<int64_t>(seqs[0].size()));
          std::vector<double> costs(static_cast<size_t>(p), 0.0);
          const auto& levels = model_->config().levels;
          for (int j = 0; j < p; ++j) {
            const auto t1 = std::chrono::steady_clock::now();
            double sum = 0.0;
            for (int m = 0; m < rollouts; ++m)
              sum += plan::latent_cost(outs[static_cast<size_t>(j * rollouts + m)].back(), zg_,
                                       levels);
            costs[static_cast<size_t>(j)] = sum / rollouts;
            timers.cost_calls += rollouts;
            timers.cost_seconds +=
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t1).count();
          }
          return costs;
        }

       private:
        const wm::WorldModel* model_;
        tok::CompactCode z0_, zg_;
        int steps_;
      };

      LatentOnlyBackend backend(&model, z0, z_goal, params.sampling_steps);
      Rng plan_rng = rng.fork(static_cast<uint64_t>(trial));
      const auto plan = plan::cem_plan(backend, cem, world, plan_rng);
      LatencyBreakdown b;
      b.token_count = n_tokens;
      b.rollout_seconds = plan.timers.rollout_seconds;
      b.decode_seconds = plan.timers.decode_seconds;
      b.cost_seconds = plan.timers.cost_seconds;
      b.total_seconds = plan.total_seconds;
      b.rollout_calls = plan.timers.rollout_calls;
      b.decode_calls = plan.timers.decode_calls;
      b.cost_calls = plan.timers.cost_calls;
      trials.push_back(b);
    }
    // first trial discarded (warmup), median over the rest
    trials.erase(trials.begin());
    auto median_of = [&](auto sel) {
      std::vector<double> vals;
      for (const auto& t : trials) vals.push_back(sel(t));
      std::sort(vals.begin(), vals.end());
      return vals[vals.size() / 2];
    };
    LatencyBreakdown med = trials[0];
    med.rollout_seconds = median_of([](const LatencyBreakdown& t) { return t.rollout_seconds; });
    med.decode_seconds = median_of([](const LatencyBreakdown& t) { return t.decode_seconds; });
    med.cost_seconds = median_of([](const LatencyBreakdown& t) { return t.cost_seconds; });
    med.total_seconds = median_of([](const LatencyBreakdown& t) { return t.total_seconds; });
    out.push_back(med);
  }
  return out;
}

void write_observation_ppm(const world::Observation& obs, const std::filesystem::path& path) {
  io::write_ppm(path, obs.width, obs.height, obs.pixels);
}

void emit_report(const ReportInputs& results, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);

  io::CsvTable metrics;
  metrics.header = {"metric", "value"};
  for (const auto& [name, value] : results.metrics)
    metrics.rows.push_back({name, std::to_string(value)});
  io::write_csv(out_dir / "metrics.csv", metrics);

  io::CsvTable latency;
  latency.header = {"token_count", "rollout_seconds", "decode_seconds", "cost_seconds",
                    "total_seconds", "rollout_calls", "decode_calls", "cost_calls"};
  for (const auto& b : results.latency)
    latency.rows.push_back({std::to_string(b.token_count), std::to_string(b.rollout_seconds),
                            std::to_string(b.decode_seconds), std::to_string(b.cost_seconds),
                            std::to_string(b.total_seconds), std::to_string(b.rollout_calls),
                            std::to_string(b.decode_calls), std::to_string(b.cost_calls)});
  io::write_csv(out_dir / "latency.csv", latency);

  for (const auto& [name, obs] : results.images)
    write_observation_ppm(obs, out_dir / (name + ".ppm"));

  io::write_text_file(out_dir / "summary.txt", results.summary);
}

}  // namespace cwm::bench
