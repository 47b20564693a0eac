#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cwm/backbone.hpp"
#include "cwm/config.hpp"
#include "cwm/evalbench.hpp"
#include "cwm/idm.hpp"
#include "cwm/planner.hpp"
#include "cwm/target_vq.hpp"
#include "cwm/tokenizer.hpp"
#include "cwm/toy_world.hpp"
#include "cwm/world_model.hpp"

namespace cwm::pipeline {

namespace fs = std::filesystem;

// A run directory is self-describing: config snapshot, seed, and checkpoint
// hashes live in metadata.txt next to the artifacts.
struct Run {
  cfg::RunConfig config;
  fs::path dir;
  uint64_t seed = 1;
  bool verbose = false;

  fs::path data_dir(bool eval) const { return dir / (eval ? "data_eval" : "data"); }
  fs::path latents_dir(bool eval) const { return dir / (eval ? "latents_eval" : "latents"); }
  fs::path ckpt(const std::string& name) const { return dir / "checkpoints" / name; }
  fs::path reports_dir() const { return dir / "reports"; }

  static Run open(cfg::RunConfig config, fs::path dir);
};

world::WorldConfig make_world_config(const cfg::RunConfig& c);
world::DatasetParams make_dataset_params(const cfg::RunConfig& c, bool eval);
tok::BackboneConfig make_backbone_config(const cfg::RunConfig& c);
tok::VqConfig make_vq_config(const cfg::RunConfig& c);
tok::TokenizerConfig make_tokenizer_config(const cfg::RunConfig& c, bool conditional = true);
wm::WmConfig make_wm_config(const cfg::RunConfig& c, const std::string& variant);
idm::IdmConfig make_idm_config(const cfg::RunConfig& c);
plan::CemParams make_cem_params(const cfg::RunConfig& c, const world::WorldConfig& world);
plan::CemParams make_closed_loop_cem_params(const cfg::RunConfig& c,
                                            const world::WorldConfig& world);
int resolved_sampling_steps(const cfg::RunConfig& c);

// ---- stages (each writes artifacts + updates run metadata) ----
void gen_data(const Run& run);
void train_target_vq(const Run& run);
// Pretrains the patch backbone first when provider=trained and no backbone
// checkpoint exists. `tag` names the checkpoint directory.
void train_tokenizer(const Run& run, bool conditional = true,
                     const std::string& tag = "tokenizer");
void encode_dataset(const Run& run);

struct WmTrainOptions {
  std::string variant = "ar";  // "ar" | "block-causal"
  std::string tag;             // default: wm_ar / wm_bc
  bool disable_history_mask = false;
  bool disable_action_conditioning = false;
};
void train_wm(const Run& run, const WmTrainOptions& options = {});
void train_idm(const Run& run);

// ---- loaders ----
std::vector<world::Episode> load_episodes(const Run& run, bool eval);
std::vector<const world::Observation*> all_frames(const std::vector<world::Episode>& eps);
std::vector<wm::LatentEpisode> load_latents(const Run& run, bool eval);

struct TokenizerBundle {
  std::unique_ptr<tok::PatchBackbone> backbone;
  std::unique_ptr<tok::FileFeatureProvider> file_provider;
  std::unique_ptr<tok::TargetVq> vq;
  std::unique_ptr<tok::Tokenizer> tokenizer;

  const tok::FeatureProvider* provider() const {
    if (backbone) return backbone.get();
    return file_provider.get();
  }
};
TokenizerBundle load_tokenizer(const Run& run, const std::string& tag = "tokenizer");
std::unique_ptr<wm::WorldModel> load_wm(const Run& run, const std::string& tag);
std::unique_ptr<idm::IdmModel> load_idm(const Run& run);

// ---- composite operations shared by the CLI and the acceptance suite ----

struct PlanningEval {
  double mean_ate = 0.0;
  double mean_rpe = 0.0;
  double mean_yaw_ate = 0.0;
  double mean_plan_seconds = 0.0;
  int episodes = 0;
};
// Plans from held-out episode contexts toward the frame `horizon` steps
// ahead and scores the executed straight-line trajectory against the
// recorded one.
PlanningEval eval_planning(const Run& run, const wm::WorldModel& model,
                           const TokenizerBundle& bundle, plan::CostMode mode, int max_episodes,
                           uint64_t seed, const plan::CemParams* override_params = nullptr);

struct ApeEval {
  double matched = 0.0;
  double shuffled = 0.0;
  int episodes = 0;
};
ApeEval eval_ape(const Run& run, const wm::WorldModel& bc_model, const idm::IdmModel& idm_model,
                 int max_episodes, uint64_t seed);

struct IdmEval {
  idm::IdmMetrics conditioned;
  idm::IdmMetrics zero_conditioned;
  double static_pair_l1 = 0.0;
  int pairs = 0;
};
IdmEval eval_idm(const Run& run, const idm::IdmModel& model, int max_pairs, uint64_t seed);

struct ClosedLoopStats {
  int trials = 0;
  int successes = 0;
  double mean_steps_used = 0.0;
};
// Learned-model closed loop; when `random_baseline` is true the planner is
// replaced by uniform feasible action sampling under the same loop.
ClosedLoopStats closed_loop_trials(const Run& run, const wm::WorldModel& model,
                                   const TokenizerBundle& bundle, int trials, uint64_t seed,
                                   bool random_baseline);
// Oracle closed loop: ground-truth simulator behind the rollout interface,
// pixel cost on true renders, Supp-preset CEM parameters.
ClosedLoopStats oracle_closed_loop_trials(const Run& run, int trials, double goal_distance,
                                          uint64_t seed, const plan::CemParams* params = nullptr,
                                          std::vector<double>* final_errors = nullptr);

void write_attention_maps(const Run& run, const TokenizerBundle& bundle,
                          const world::Observation& obs, const fs::path& out_dir);

void update_metadata(const Run& run,
                     const std::vector<std::pair<std::string, std::string>>& extra_hashes = {});

// True when an artifact from an identical config already exists, so a
// driver can skip retraining.
bool artifact_matches(const Run& run, const std::string& tag);
bool dataset_matches(const Run& run, bool eval);
bool latents_match(const Run& run, bool eval);

}  // namespace cwm::pipeline
