#include "cwm/planner.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

#include "cwm/io.hpp"

namespace cwm::plan {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

double pixel_l1_norm(const std::vector<float>& a, const std::vector<float>& b) {
  double d = 0.0;
  for (size_t i = 0; i < a.size(); ++i) d += std::abs(a[i] - b[i]);
  return d / static_cast<double>(a.size());
}

std::vector<float> obs_to_float(const world::Observation& obs) {
  std::vector<float> out(obs.pixels.size());
  for (size_t i = 0; i < obs.pixels.size(); ++i) out[i] = obs.pixels[i] / 255.0f;
  return out;
}

// 3x3 Cholesky with progressive jitter; Sigma may be singular after an
// elite refit of nearly identical candidates.
std::array<std::array<double, 3>, 3> cholesky3(std::array<std::array<double, 3>, 3> a) {
  for (double eps = 0.0;; eps = eps == 0.0 ? 1e-12 : eps * 10.0) {
    std::array<std::array<double, 3>, 3> l{};
    bool ok = true;
    std::array<std::array<double, 3>, 3> m = a;
    for (int i = 0; i < 3; ++i) m[static_cast<size_t>(i)][static_cast<size_t>(i)] += eps;
    for (int i = 0; i < 3 && ok; ++i) {
      for (int j = 0; j <= i && ok; ++j) {
        double sum = m[static_cast<size_t>(i)][static_cast<size_t>(j)];
        for (int k = 0; k < j; ++k)
          sum -= l[static_cast<size_t>(i)][static_cast<size_t>(k)] *
                 l[static_cast<size_t>(j)][static_cast<size_t>(k)];
        if (i == j) {
          if (sum <= 0.0) {
            ok = false;
            break;
          }
          l[static_cast<size_t>(i)][static_cast<size_t>(j)] = std::sqrt(sum);
        } else {
          l[static_cast<size_t>(i)][static_cast<size_t>(j)] =
              sum / l[static_cast<size_t>(j)][static_cast<size_t>(j)];
        }
      }
    }
    if (ok) return l;
    if (eps > 1.0) throw PlanningError("cem: covariance could not be factorized");
  }
}

}  // namespace

void CemParams::validate() const {
  if (population < 1 || elites < 1 || iterations < 1 || rollouts_per_candidate < 1 || horizon < 1)
    throw ValidationError("CemParams: all counts must be >= 1");
  if (elites > population) throw ValidationError("CemParams: elites must not exceed population");
  for (double s : proposal_sigma)
    if (s <= 0.0) throw ValidationError("CemParams: proposal sigma entries must be positive");
}

CemParams CemParams::defaults(const world::WorldConfig& world) {
  CemParams p;
  p.proposal_sigma = {0.3 * world.max_step * p.horizon, 0.3 * world.max_step * p.horizon,
                      0.5 * world.max_turn};
  return p;
}

std::vector<world::Action> to_action_seq(const EndpointCandidate& c, int horizon,
                                         const world::WorldConfig& world) {
  if (horizon < 1) throw ValidationError("to_action_seq: horizon must be >= 1");
  const double tol = 1e-9;
  if (std::abs(c.ux) / horizon > world.max_step + tol ||
      std::abs(c.uy) / horizon > world.max_step + tol ||
      std::abs(c.phi) > world.max_turn + tol)
    throw ValidationError("to_action_seq: candidate outside the feasible box");
  std::vector<world::Action> seq(static_cast<size_t>(horizon));
  for (int t = 0; t < horizon; ++t) {
    seq[static_cast<size_t>(t)].dx = static_cast<float>(c.ux / horizon);
    seq[static_cast<size_t>(t)].dy = static_cast<float>(c.uy / horizon);
    seq[static_cast<size_t>(t)].dyaw = 0.0f;
  }
  seq.back().dyaw = static_cast<float>(c.phi);
  return seq;
}

OracleBackend::OracleBackend(const world::WorldConfig& cfg, const world::Pose& start,
                             const world::Observation& goal_obs)
    : cfg_(cfg), start_(start), goal_(goal_obs) {}

std::vector<double> OracleBackend::evaluate(const std::vector<std::vector<world::Action>>& seqs,
                                            int rollouts, Rng& rng, PhaseTimers& timers) {
  (void)rng;  // the simulator is deterministic
  std::vector<double> costs(seqs.size(), 0.0);
  const auto goal_f = obs_to_float(goal_);
  for (size_t j = 0; j < seqs.size(); ++j) {
    double sum = 0.0;
    for (int m = 0; m < rollouts; ++m) {
      const auto t0 = Clock::now();
      world::Pose pose = start_;
      for (const auto& a : seqs[j]) pose = world::step(pose, a, cfg_);
      timers.rollout_calls += static_cast<int64_t>(seqs[j].size());
      timers.rollout_seconds += seconds_since(t0);

      const auto t1 = Clock::now();
      const auto final_obs = world::render(pose, cfg_);
      sum += pixel_l1_norm(obs_to_float(final_obs), goal_f);
      ++timers.cost_calls;
      timers.cost_seconds += seconds_since(t1);
    }
    costs[j] = sum / rollouts;
  }
  return costs;
}

double latent_cost(const CompactCode& a, const CompactCode& b, const fsq::FsqLevels& levels) {
  if (a.size() != b.size())
    throw DimensionError("latent_cost: token count mismatch");
  double d = 0.0;
  for (size_t i = 0; i < a.size(); ++i) d += fsq::code_distance(a[i], b[i], levels);
  return d;
}

double pixel_cost(const CompactCode& a, const CompactCode& b, const tok::Tokenizer& tokenizer,
                  uint64_t decode_seed) {
  if (a.size() != b.size()) throw DimensionError("pixel_cost: token count mismatch");
  Rng ra(decode_seed), rb(decode_seed);
  const auto oa = tokenizer.target_vq()->decode(
      tokenizer.decode_compact(a, tokenizer.config().decode_steps, ra));
  const auto ob = tokenizer.target_vq()->decode(
      tokenizer.decode_compact(b, tokenizer.config().decode_steps, rb));
  return pixel_l1_norm(obs_to_float(oa), obs_to_float(ob));
}

WmBackend::WmBackend(const wm::WorldModel* model, const tok::Tokenizer* tokenizer,
                     std::vector<CompactCode> history, CompactCode z_goal, CostMode mode,
                     int sampling_steps, uint64_t decode_seed)
    : model_(model),
      tokenizer_(tokenizer),
      history_(std::move(history)),
      z_goal_(std::move(z_goal)),
      mode_(mode),
      sampling_steps_(sampling_steps),
      decode_seed_(decode_seed) {
  if (history_.empty()) throw ValidationError("WmBackend: history must be non-empty");
  if (mode_ == CostMode::kPixel) {
    Rng r(decode_seed_);
    const auto goal_obs = tokenizer_->target_vq()->decode(
        tokenizer_->decode_compact(z_goal_, tokenizer_->config().decode_steps, r));
    goal_pixels_ = obs_to_float(goal_obs);
  }
}

std::vector<double> WmBackend::evaluate(const std::vector<std::vector<world::Action>>& seqs,
                                        int rollouts, Rng& rng, PhaseTimers& timers) {
  const int p = static_cast<int>(seqs.size());
  const int total = p * rollouts;
  std::vector<std::vector<CompactCode>> histories(static_cast<size_t>(total), history_);
  std::vector<std::vector<world::Action>> actions(static_cast<size_t>(total));
  std::vector<Rng> rngs;
  rngs.reserve(static_cast<size_t>(total));
  for (int j = 0; j < p; ++j)
    for (int m = 0; m < rollouts; ++m) {
      actions[static_cast<size_t>(j * rollouts + m)] = seqs[static_cast<size_t>(j)];
      rngs.push_back(rng.fork(static_cast<uint64_t>(j * rollouts + m)));
    }

  const auto t0 = Clock::now();
  const auto outs = model_->rollout_ar_batch(histories, actions, sampling_steps_, rngs);
  timers.rollout_seconds += seconds_since(t0);
  timers.rollout_calls += static_cast<int64_t>(total) * (seqs.empty() ? 0 : seqs[0].size());

  std::vector<double> costs(static_cast<size_t>(p), 0.0);
  for (int j = 0; j < p; ++j) {
    double sum = 0.0;
    for (int m = 0; m < rollouts; ++m) {
      const auto& final_code = outs[static_cast<size_t>(j * rollouts + m)].back();
      if (mode_ == CostMode::kLatent) {
        const auto t1 = Clock::now();
        sum += latent_cost(final_code, z_goal_, tokenizer_->config().levels);
        ++timers.cost_calls;
        timers.cost_seconds += seconds_since(t1);
      } else {
        const auto t1 = Clock::now();
        Rng r(decode_seed_);
        const auto obs = tokenizer_->target_vq()->decode(
            tokenizer_->decode_compact(final_code, tokenizer_->config().decode_steps, r));
        ++timers.decode_calls;
        timers.decode_seconds += seconds_since(t1);
        const auto t2 = Clock::now();
        sum += pixel_l1_norm(obs_to_float(obs), goal_pixels_);
        ++timers.cost_calls;
        timers.cost_seconds += seconds_since(t2);
      }
    }
    costs[static_cast<size_t>(j)] = sum / rollouts;
  }
  return costs;
}

RefitResult select_elites_and_refit(const std::vector<EndpointCandidate>& candidates,
                                    const std::vector<double>& costs, int k) {
  if (candidates.size() != costs.size() || candidates.empty())
    throw ValidationError("refit: candidate/cost size mismatch");
  if (k < 1 || k > static_cast<int>(candidates.size()))
    throw ValidationError("refit: invalid elite count");
  RefitResult r;
  std::vector<int> order(candidates.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return costs[static_cast<size_t>(a)] < costs[static_cast<size_t>(b)]; });
  r.elite_indices.assign(order.begin(), order.begin() + k);

  for (int idx : r.elite_indices) {
    const auto& c = candidates[static_cast<size_t>(idx)];
    r.mean[0] += c.ux;
    r.mean[1] += c.uy;
    r.mean[2] += c.phi;
  }
  for (double& m : r.mean) m /= k;
  for (int idx : r.elite_indices) {
    const auto& c = candidates[static_cast<size_t>(idx)];
    const double d[3] = {c.ux - r.mean[0], c.uy - r.mean[1], c.phi - r.mean[2]};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) r.cov[static_cast<size_t>(i)][static_cast<size_t>(j)] += d[i] * d[j];
  }
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r.cov[static_cast<size_t>(i)][static_cast<size_t>(j)] /= k;
  return r;
}

PlanResult cem_plan(RolloutBackend& backend, const CemParams& params,
                    const world::WorldConfig& world, Rng& rng) {
  params.validate();
  const auto t_start = Clock::now();
  PlanResult result;

  std::array<double, 3> mu = params.proposal_mean;
  std::array<std::array<double, 3>, 3> sigma{};
  for (int i = 0; i < 3; ++i)
    sigma[static_cast<size_t>(i)][static_cast<size_t>(i)] =
        params.proposal_sigma[static_cast<size_t>(i)] * params.proposal_sigma[static_cast<size_t>(i)];

  const double box_u = world.max_step * params.horizon;
  const double box_phi = world.max_turn;

  std::vector<EndpointCandidate> candidates;
  std::vector<double> costs;
  for (int iter = 0; iter < params.iterations; ++iter) {
    candidates.assign(static_cast<size_t>(params.population), EndpointCandidate{});
    auto chol = cholesky3(sigma);
    for (int j = 0; j < params.population; ++j) {
      EndpointCandidate c;
      bool ok = false;
      // Out-of-box samples are resampled rather than clipped so the elite
      // refit stays unbiased; clamping is a last resort.
      for (int attempt = 0; attempt < 100; ++attempt) {
        const double z[3] = {rng.normal(), rng.normal(), rng.normal()};
        double v[3];
        for (int i = 0; i < 3; ++i) {
          v[i] = mu[static_cast<size_t>(i)];
          for (int k = 0; k <= i; ++k)
            v[i] += chol[static_cast<size_t>(i)][static_cast<size_t>(k)] * z[k];
        }
        c = {v[0], v[1], v[2]};
        if (std::abs(c.ux) <= box_u && std::abs(c.uy) <= box_u && std::abs(c.phi) <= box_phi) {
          ok = true;
          break;
        }
      }
      if (!ok) {
        c.ux = std::clamp(c.ux, -box_u, box_u);
        c.uy = std::clamp(c.uy, -box_u, box_u);
        c.phi = std::clamp(c.phi, -box_phi, box_phi);
      }
      candidates[static_cast<size_t>(j)] = c;
    }

    std::vector<std::vector<world::Action>> seqs;
    seqs.reserve(candidates.size());
    for (const auto& c : candidates) seqs.push_back(to_action_seq(c, params.horizon, world));

    costs = backend.evaluate(seqs, params.rollouts_per_candidate, rng, result.timers);
    if (static_cast<int>(costs.size()) != params.population)
      throw PlanningError("cem: backend returned wrong cost count");
    for (double c : costs)
      if (!std::isfinite(c))
        throw PlanningError("cem: rollout produced a non-finite cost");

    const auto refit = select_elites_and_refit(candidates, costs, params.elites);
    mu = refit.mean;
    if (params.full_covariance) {
      sigma = refit.cov;
    } else {
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
          sigma[static_cast<size_t>(i)][static_cast<size_t>(j)] =
              i == j ? refit.cov[static_cast<size_t>(i)][static_cast<size_t>(j)] : 0.0;
    }
    result.refit_mean = refit.mean;
    result.refit_cov = refit.cov;
    if (iter + 1 == params.iterations) {
      const int best = refit.elite_indices[0];
      result.best_candidate = candidates[static_cast<size_t>(best)];
      result.best_cost = costs[static_cast<size_t>(best)];
    }
  }
  result.candidates = candidates;
  result.cost_table = costs;
  result.action_sequence = to_action_seq(result.best_candidate, params.horizon, world);
  result.total_seconds = seconds_since(t_start);
  return result;
}

void write_plan_report(const std::filesystem::path& prefix, const PlanResult& result) {
  std::ostringstream ss;
  ss << "best_candidate ux=" << result.best_candidate.ux << " uy=" << result.best_candidate.uy
     << " phi=" << result.best_candidate.phi << "\n";
  ss << "best_cost " << result.best_cost << "\n";
  ss << "total_seconds " << result.total_seconds << "\n";
  ss << "rollout_seconds " << result.timers.rollout_seconds << " calls "
     << result.timers.rollout_calls << "\n";
  ss << "decode_seconds " << result.timers.decode_seconds << " calls "
     << result.timers.decode_calls << "\n";
  ss << "cost_seconds " << result.timers.cost_seconds << " calls " << result.timers.cost_calls
     << "\n";
  io::write_text_file(prefix.string() + "_report.txt", ss.str());

  io::CsvTable t;
  t.header = {"candidate", "ux", "uy", "phi", "mean_cost"};
  for (size_t i = 0; i < result.candidates.size(); ++i) {
    const auto& c = result.candidates[i];
    t.rows.push_back({std::to_string(i), std::to_string(c.ux), std::to_string(c.uy),
                      std::to_string(c.phi), std::to_string(result.cost_table[i])});
  }
  io::write_csv(prefix.string() + "_costs.csv", t);
}

ClosedLoopResult closed_loop_run(const world::WorldConfig& cfg, const world::Pose& start,
                                 const world::Pose& goal, const PlannerFn& planner,
                                 int replan_every, int max_steps, double tolerance, Rng& rng) {
  if (replan_every < 1 || max_steps < 0) throw ValidationError("closed_loop_run: bad loop bounds");
  ClosedLoopResult result;
  world::Pose pose = start;
  result.trajectory.push_back(pose);
  result.observations.push_back(world::render(pose, cfg));

  auto at_goal = [&](const world::Pose& p) {
    return std::hypot(p.x - goal.x, p.y - goal.y) <= tolerance;
  };
  if (at_goal(pose)) {
    result.success = true;
    return result;
  }

  while (result.steps_used < max_steps) {
    PlanResult plan;
    try {
      plan = planner(result, rng);
    } catch (const Error&) {
      result.aborted = true;
      return result;
    }
    for (int i = 0; i < replan_every && result.steps_used < max_steps; ++i) {
      if (i >= static_cast<int>(plan.action_sequence.size())) break;
      try {
        pose = world::step(pose, plan.action_sequence[static_cast<size_t>(i)], cfg);
      } catch (const Error&) {
        result.aborted = true;
        return result;
      }
      result.executed.push_back(plan.action_sequence[static_cast<size_t>(i)]);
      result.trajectory.push_back(pose);
      result.observations.push_back(world::render(pose, cfg));
      ++result.steps_used;
      if (at_goal(pose)) {
        result.success = true;
        return result;
      }
    }
  }
  result.success = at_goal(pose);
  return result;
}

}  // namespace cwm::plan
