// cwm: compact-token world models on a synthetic navigation environment.
//
// Subcommands cover the full pipeline: dataset generation, tokenizer and
// world-model training, planning, closed-loop control, evaluation and
// latency benchmarking. Every command reads a config (preset plus optional
// file and --set overrides) and works inside a run directory.

#include <CLI11.hpp>
#include <cstdlib>
#include <iostream>

#include "cwm/evalbench.hpp"
#include "cwm/fsq.hpp"
#include "cwm/io.hpp"
#include "cwm/pipeline.hpp"

namespace {

using namespace cwm;

struct CommonArgs {
  std::string config_file;
  std::string preset = "desk";
  std::vector<std::string> overrides;
  std::string run_dir;
  int64_t seed = -1;
  bool verbose = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_file, "config file (key = value lines)");
  cmd->add_option("--preset", args.preset, "base preset: desk or paper")->default_val("desk");
  cmd->add_option("--set", args.overrides, "override, repeatable: key=value");
  cmd->add_option("--run-dir", args.run_dir, "run directory (default $CWM_RUN_DIR or ./cwm_run)");
  cmd->add_option("--seed", args.seed, "global seed (overrides train.seed)");
  cmd->add_flag("--verbose", args.verbose, "log training progress");
}

pipeline::Run open_run(const CommonArgs& args) {
  cfg::RunConfig config = args.config_file.empty() ? cfg::RunConfig::preset(args.preset)
                                                   : cfg::RunConfig::load(args.config_file);
  for (const auto& kv : args.overrides) config.apply_override(kv);
  if (args.seed >= 0) config.set("train.seed", std::to_string(args.seed));
  std::string dir = args.run_dir;
  if (dir.empty()) {
    const char* env = std::getenv("CWM_RUN_DIR");
    dir = env && *env ? env : "cwm_run";
  }
  auto run = pipeline::Run::open(std::move(config), dir);
  run.verbose = args.verbose;
  return run;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"compact-token world models for navigation planning"};
  app.require_subcommand(1);

  CommonArgs args;
  struct {
    std::string variant = "ar";
    std::string metric = "ate";
    std::string wm_tag;
    int tokens = 16;
    int episode = 0;
    double goal_x = -1.0, goal_y = -1.0;
    std::string cost = "latent";
    int trials = 10;
    bool unconditional = false;
    bool no_history_mask = false;
    bool no_action_conditioning = false;
  } opt;

  auto* gen = app.add_subcommand("gen-data", "generate train/eval episode datasets");
  add_common(gen, args);
  auto* tvq = app.add_subcommand("train-target-vq", "train the target VQ autoencoder");
  add_common(tvq, args);
  auto* ttok = app.add_subcommand("train-tokenizer", "train the compact tokenizer");
  add_common(ttok, args);
  ttok->add_flag("--unconditional", opt.unconditional,
                 "train the no-compact-stream ablation decoder");
  auto* enc = app.add_subcommand("encode-dataset", "encode datasets into compact-token latents");
  add_common(enc, args);
  auto* twm = app.add_subcommand("train-wm", "train a latent world model");
  add_common(twm, args);
  twm->add_option("--variant", opt.variant, "ar | block-causal")->default_val("ar");
  twm->add_option("--tag", opt.wm_tag, "checkpoint tag (default wm_ar / wm_bc)");
  twm->add_flag("--no-history-mask", opt.no_history_mask, "ablation: disable history masking");
  twm->add_flag("--no-action-conditioning", opt.no_action_conditioning,
                "ablation: zero the action input");
  auto* tidm = app.add_subcommand("train-idm", "train the inverse dynamics model");
  add_common(tidm, args);

  auto* plan_cmd = app.add_subcommand("plan", "single CEM plan on a held-out episode");
  add_common(plan_cmd, args);
  plan_cmd->add_option("--episode", opt.episode, "held-out episode index")->default_val(0);
  plan_cmd->add_option("--cost", opt.cost, "pixel | latent")->default_val("latent");

  auto* cl = app.add_subcommand("closed-loop", "receding-horizon run to a goal pose");
  add_common(cl, args);
  cl->add_option("--goal-x", opt.goal_x, "goal x in [0,1]");
  cl->add_option("--goal-y", opt.goal_y, "goal y in [0,1]");

  auto* ev = app.add_subcommand("eval", "evaluate metrics against held-out data");
  add_common(ev, args);
  ev->add_option("--metric", opt.metric, "ate | rpe | ape | idm")->required();
  ev->add_option("--episodes", opt.trials, "episode/pair budget")->default_val(10);
  ev->add_option("--cost", opt.cost, "pixel | latent (ate/rpe)")->default_val("latent");

  auto* bl = app.add_subcommand("bench-latency", "planning latency vs token count");
  add_common(bl, args);

  auto* rb = app.add_subcommand("report-bits", "report the compact-code bit budget");
  add_common(rb, args);
  rb->add_option("--tokens", opt.tokens, "tokens per frame")->default_val(16);

  auto* am = app.add_subcommand("attention-maps", "emit resampler attention maps as pixmaps");
  add_common(am, args);
  am->add_option("--episode", opt.episode, "held-out episode index")->default_val(0);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return 0;  // --help
    std::cerr << e.what() << "\n";
    return 2;
  }

  try {
    if (gen->parsed()) {
      pipeline::gen_data(open_run(args));
    } else if (tvq->parsed()) {
      pipeline::train_target_vq(open_run(args));
    } else if (ttok->parsed()) {
      pipeline::train_tokenizer(open_run(args), !opt.unconditional,
                                opt.unconditional ? "tokenizer_uncond" : "tokenizer");
    } else if (enc->parsed()) {
      pipeline::encode_dataset(open_run(args));
    } else if (twm->parsed()) {
      pipeline::WmTrainOptions w;
      w.variant = opt.variant;
      w.tag = opt.wm_tag;
      w.disable_history_mask = opt.no_history_mask;
      w.disable_action_conditioning = opt.no_action_conditioning;
      pipeline::train_wm(open_run(args), w);
    } else if (tidm->parsed()) {
      pipeline::train_idm(open_run(args));
    } else if (plan_cmd->parsed()) {
      const auto run = open_run(args);
      const auto world_cfg = pipeline::make_world_config(run.config);
      auto model = pipeline::load_wm(run, "wm_ar");
      auto bundle = pipeline::load_tokenizer(run);
      const auto latents = pipeline::load_latents(run, true);
      if (opt.episode < 0 || opt.episode >= static_cast<int>(latents.size()))
        throw ValidationError("plan: episode index out of range");
      const auto& lat = latents[static_cast<size_t>(opt.episode)];
      const auto params = pipeline::make_cem_params(run.config, world_cfg);
      const int tau = model->config().tau;
      if (lat.frames() < tau + params.horizon + 1)
        throw ValidationError("plan: episode too short for the configured horizon");
      std::vector<tok::CompactCode> history(lat.codes.begin(), lat.codes.begin() + tau);
      plan::WmBackend backend(model.get(), bundle.tokenizer.get(), history,
                              lat.codes[static_cast<size_t>(tau - 1 + params.horizon)],
                              opt.cost == "pixel" ? plan::CostMode::kPixel : plan::CostMode::kLatent,
                              model->config().sampling_steps);
      Rng rng = Rng::for_module(run.seed, "cli.plan");
      const auto result = plan::cem_plan(backend, params, world_cfg, rng);
      std::filesystem::create_directories(run.reports_dir());
      plan::write_plan_report(run.reports_dir() / "plan", result);
      std::cout << "best candidate u=(" << result.best_candidate.ux << ", "
                << result.best_candidate.uy << ") phi=" << result.best_candidate.phi
                << " cost=" << result.best_cost << " in " << result.total_seconds << "s\n";
    } else if (cl->parsed()) {
      const auto run = open_run(args);
      const auto world_cfg = pipeline::make_world_config(run.config);
      auto model = pipeline::load_wm(run, "wm_ar");
      auto bundle = pipeline::load_tokenizer(run);
      if (opt.goal_x < 0.0 || opt.goal_y < 0.0)
        throw UsageError("closed-loop requires --goal-x and --goal-y");
      Rng rng = Rng::for_module(run.seed, "cli.closed_loop");
      world::Pose start{0.5f, 0.5f, 0.0f};
      world::Pose goal{static_cast<float>(opt.goal_x), static_cast<float>(opt.goal_y), 0.0f};
      const auto params = pipeline::make_closed_loop_cem_params(run.config, world_cfg);
      const auto goal_obs = world::render(goal, world_cfg);
      const auto z_goal = bundle.tokenizer->encode(goal_obs);
      plan::PlannerFn planner = [&](const plan::ClosedLoopResult& so_far, Rng& prng) {
        const int tau = model->config().tau;
        const int have = static_cast<int>(so_far.observations.size());
        std::vector<tok::CompactCode> history;
        for (int k = std::max(0, have - tau); k < have; ++k)
          history.push_back(bundle.tokenizer->encode(so_far.observations[static_cast<size_t>(k)]));
        plan::WmBackend backend(model.get(), bundle.tokenizer.get(), history, z_goal,
                                plan::CostMode::kLatent,
                                run.config.get_int("closed_loop.sampling_steps"));
        return plan::cem_plan(backend, params, world_cfg, prng);
      };
      const auto result = plan::closed_loop_run(
          world_cfg, start, goal, planner, run.config.get_int("closed_loop.replan_every"),
          run.config.get_int("closed_loop.max_steps"),
          run.config.get_double("closed_loop.tolerance"), rng);
      // Executed trajectory dumped in the episode format.
      world::Episode traj;
      traj.observations = result.observations;
      traj.actions = result.executed;
      traj.poses = result.trajectory;
      std::filesystem::create_directories(run.reports_dir());
      world::write_episode(run.reports_dir() / "closed_loop.cwm", traj);
      std::cout << (result.success ? "success" : "failure") << " steps=" << result.steps_used
                << "\n";
      return result.success ? 0 : 1;
    } else if (ev->parsed()) {
      const auto run = open_run(args);
      std::filesystem::create_directories(run.reports_dir());
      bench::ReportInputs report;
      if (opt.metric == "ate" || opt.metric == "rpe") {
        auto model = pipeline::load_wm(run, "wm_ar");
        auto bundle = pipeline::load_tokenizer(run);
        const auto eval = pipeline::eval_planning(
            run, *model, bundle,
            opt.cost == "pixel" ? plan::CostMode::kPixel : plan::CostMode::kLatent, opt.trials,
            run.seed);
        report.metrics = {{"ate", eval.mean_ate},
                          {"rpe", eval.mean_rpe},
                          {"ate_yaw", eval.mean_yaw_ate},
                          {"plan_seconds", eval.mean_plan_seconds}};
        std::cout << "ate " << eval.mean_ate << " rpe " << eval.mean_rpe << " over "
                  << eval.episodes << " episodes\n";
      } else if (opt.metric == "ape") {
        auto model = pipeline::load_wm(run, "wm_bc");
        auto idm_model = pipeline::load_idm(run);
        const auto eval = pipeline::eval_ape(run, *model, *idm_model, opt.trials, run.seed);
        report.metrics = {{"ape_matched", eval.matched}, {"ape_shuffled", eval.shuffled}};
        std::cout << "ape " << eval.matched << " (shuffled " << eval.shuffled << ") over "
                  << eval.episodes << " episodes\n";
      } else if (opt.metric == "idm") {
        auto idm_model = pipeline::load_idm(run);
        const auto eval = pipeline::eval_idm(run, *idm_model, 512, run.seed);
        report.metrics = {{"idm_l1", eval.conditioned.l1},
                          {"idm_r2", eval.conditioned.r2},
                          {"idm_r2_zero_cond", eval.zero_conditioned.r2}};
        std::cout << "idm l1 " << eval.conditioned.l1 << " r2 " << eval.conditioned.r2 << " over "
                  << eval.pairs << " pairs\n";
        // Predictions exported per contract.
        const auto latents = pipeline::load_latents(run, true);
        io::CsvTable csv;
        csv.header = {"episode", "frame", "gt_dx", "gt_dy", "gt_dyaw", "pred_dx", "pred_dy",
                      "pred_dyaw"};
        Rng rng = Rng::for_module(run.seed, "cli.idm_csv");
        for (size_t e = 0; e < latents.size() && e < 4; ++e) {
          std::vector<idm::FramePair> pairs;
          for (size_t t = 0; t + 1 < latents[e].codes.size(); ++t)
            pairs.push_back({latents[e].codes[t], latents[e].codes[t + 1], latents[e].actions[t]});
          const auto preds = idm_model->predict_batch(pairs, rng);
          for (size_t t = 0; t < preds.size(); ++t)
            csv.rows.push_back({std::to_string(e), std::to_string(t),
                                std::to_string(pairs[t].action.dx), std::to_string(pairs[t].action.dy),
                                std::to_string(pairs[t].action.dyaw), std::to_string(preds[t].dx),
                                std::to_string(preds[t].dy), std::to_string(preds[t].dyaw)});
        }
        io::write_csv(run.reports_dir() / "idm_predictions.csv", csv);
      } else {
        throw UsageError("unknown metric '" + opt.metric + "'");
      }
      report.summary = "metric evaluation: " + opt.metric;
      bench::emit_report(report, run.reports_dir());
    } else if (bl->parsed()) {
      const auto run = open_run(args);
      bench::BenchParams params;
      params.trials = run.config.get_int("bench.trials");
      params.population = run.config.get_int("bench.population");
      params.horizon = run.config.get_int("bench.horizon");
      const auto table = bench::bench_latency(params, pipeline::make_world_config(run.config),
                                              run.seed);
      bench::ReportInputs report;
      report.latency = table;
      report.summary = "planning latency vs token count";
      bench::emit_report(report, run.reports_dir());
      for (const auto& b : table)
        std::cout << "tokens " << b.token_count << " rollout " << b.rollout_seconds << "s decode "
                  << b.decode_seconds << "s cost " << b.cost_seconds << "s\n";
    } else if (rb->parsed()) {
      const auto run = open_run(args);
      fsq::FsqLevels levels;
      levels.levels = run.config.get_int_list("tokenizer.fsq_levels");
      const auto budget = fsq::bits_budget(levels, opt.tokens);
      std::cout << "tokens_per_frame " << budget.tokens_per_frame << "\n"
                << "bits_per_token " << budget.bits_per_token << "\n"
                << "bits_per_frame " << budget.bits_per_frame << "\n";
    } else if (am->parsed()) {
      const auto run = open_run(args);
      auto bundle = pipeline::load_tokenizer(run);
      const auto episodes = pipeline::load_episodes(run, true);
      if (opt.episode < 0 || opt.episode >= static_cast<int>(episodes.size()))
        throw ValidationError("attention-maps: episode index out of range");
      pipeline::write_attention_maps(run, bundle,
                                     episodes[static_cast<size_t>(opt.episode)].observations[0],
                                     run.reports_dir() / "attention");
      std::cout << "wrote attention maps to " << (run.reports_dir() / "attention").string()
                << "\n";
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
