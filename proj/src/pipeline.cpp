#include "cwm/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <iostream>
#include <sstream>

#include "cwm/io.hpp"

namespace cwm::pipeline {

Run Run::open(cfg::RunConfig config, fs::path dir) {
  Run run;
  run.seed = static_cast<uint64_t>(config.get_int("train.seed"));
  run.config = std::move(config);
  run.dir = std::move(dir);
  fs::create_directories(run.dir);
  fs::create_directories(run.dir / "checkpoints");
  run.config.save(run.dir / "config.cfg");
  nn::set_num_threads(run.config.get_int("train.threads"));
  return run;
}

world::WorldConfig make_world_config(const cfg::RunConfig& c) {
  world::WorldConfig w;
  w.image_size = c.get_int("world.image_size");
  w.patch_size = c.get_int("world.patch_size");
  w.max_step = c.get_double("world.max_step");
  w.max_turn = c.get_double("world.max_turn");
  w.view_span = c.get_double("world.view_span");
  w.body_frame = c.get_bool("world.body_frame");
  return w;
}

world::DatasetParams make_dataset_params(const cfg::RunConfig& c, bool eval) {
  world::DatasetParams p;
  p.n_episodes = c.get_int(eval ? "data.eval_episodes" : "data.train_episodes");
  p.episode_length = c.get_int("data.episode_length");
  p.momentum = c.get_double("data.momentum");
  p.dwell_prob = c.get_double("data.dwell_prob");
  return p;
}

tok::BackboneConfig make_backbone_config(const cfg::RunConfig& c) {
  tok::BackboneConfig b;
  b.image_size = c.get_int("world.image_size");
  b.patch_size = c.get_int("world.patch_size");
  b.dim = c.get_int("backbone.dim");
  b.depth = c.get_int("backbone.depth");
  b.heads = c.get_int("backbone.heads");
  b.mlp_ratio = c.get_int("backbone.mlp_ratio");
  b.mask_ratio = c.get_double("backbone.mask_ratio");
  b.steps = c.get_int("backbone.steps");
  b.batch = c.get_int("backbone.batch");
  b.lr = c.get_double("backbone.lr");
  b.warmup = c.get_int("backbone.warmup");
  return b;
}

tok::VqConfig make_vq_config(const cfg::RunConfig& c) {
  tok::VqConfig v;
  v.image_size = c.get_int("world.image_size");
  v.codebook = c.get_int("vq.codebook");
  v.code_dim = c.get_int("vq.code_dim");
  v.base_channels = c.get_int("vq.base_channels");
  v.commitment = c.get_double("vq.commitment");
  v.steps = c.get_int("vq.steps");
  v.batch = c.get_int("vq.batch");
  v.lr = c.get_double("vq.lr");
  v.warmup = c.get_int("vq.warmup");
  return v;
}

tok::TokenizerConfig make_tokenizer_config(const cfg::RunConfig& c, bool conditional) {
  tok::TokenizerConfig t;
  t.n_tokens = c.get_int("tokenizer.n_tokens");
  t.levels.levels = c.get_int_list("tokenizer.fsq_levels");
  t.resampler_dim = c.get_int("tokenizer.resampler_dim");
  t.resampler_depth = c.get_int("tokenizer.resampler_depth");
  t.resampler_heads = c.get_int("tokenizer.resampler_heads");
  t.decoder_dim = c.get_int("tokenizer.decoder_dim");
  t.decoder_depth = c.get_int("tokenizer.decoder_depth");
  t.decoder_heads = c.get_int("tokenizer.decoder_heads");
  t.mlp_ratio = c.get_int("tokenizer.mlp_ratio");
  t.decode_steps = c.get_int("tokenizer.decode_steps");
  t.steps = c.get_int("tokenizer.steps");
  t.batch = c.get_int("tokenizer.batch");
  t.lr = c.get_double("tokenizer.lr");
  t.warmup = c.get_int("tokenizer.warmup");
  t.conditional = conditional;
  return t;
}

int resolved_sampling_steps(const cfg::RunConfig& c) {
  const int n = c.get_int("tokenizer.n_tokens");
  return n >= 16 ? c.get_int("wm.sampling_steps_n16") : c.get_int("wm.sampling_steps_n8");
}

wm::WmConfig make_wm_config(const cfg::RunConfig& c, const std::string& variant) {
  wm::WmConfig w;
  if (variant == "ar") {
    w.variant = wm::Variant::kAutoregressive;
    w.tau = c.get_int("wm.tau");
    w.dim = c.get_int("wm.dim");
    w.depth = c.get_int("wm.depth");
    w.heads = c.get_int("wm.heads");
    w.steps = c.get_int("wm.steps");
    w.batch = c.get_int("wm.batch");
  } else if (variant == "block-causal") {
    w.variant = wm::Variant::kBlockCausal;
    w.tau = c.get_int("wm.bc_tau");
    w.horizon = c.get_int("wm.bc_horizon");
    w.dim = c.get_int("wm.bc_dim");
    w.depth = c.get_int("wm.bc_depth");
    w.heads = c.get_int("wm.bc_heads");
    w.steps = c.get_int("wm.bc_steps");
    w.batch = c.get_int("wm.bc_batch");
  } else {
    throw UsageError("unknown world-model variant '" + variant + "' (expected ar|block-causal)");
  }
  w.n_tokens = c.get_int("tokenizer.n_tokens");
  w.levels.levels = c.get_int_list("tokenizer.fsq_levels");
  w.mlp_ratio = c.get_int("wm.mlp_ratio");
  w.history_mask = c.get_bool("wm.history_mask");
  w.history_mask_max = c.get_double("wm.history_mask_max");
  w.infer_history_mask = c.get_double("wm.infer_history_mask");
  w.sampling_steps = variant == "ar" ? resolved_sampling_steps(c)
                                     : c.get_int("wm.bc_sampling_steps");
  if (w.variant == wm::Variant::kBlockCausal && w.sampling_steps == 0)
    w.sampling_steps = wm::WmConfig::scaled_bc_steps(w.horizon, w.n_tokens);
  w.lr = c.get_double("wm.lr");
  w.warmup = c.get_int("wm.warmup");
  return w;
}

idm::IdmConfig make_idm_config(const cfg::RunConfig& c) {
  idm::IdmConfig i;
  i.n_tokens = c.get_int("tokenizer.n_tokens");
  i.levels.levels = c.get_int_list("tokenizer.fsq_levels");
  i.enc_dim = c.get_int("idm.enc_dim");
  i.enc_depth = c.get_int("idm.enc_depth");
  i.enc_heads = c.get_int("idm.enc_heads");
  i.hidden = c.get_int("idm.hidden");
  i.mlp_layers = c.get_int("idm.mlp_layers");
  i.timesteps = c.get_int("idm.timesteps");
  i.steps = c.get_int("idm.steps");
  i.batch = c.get_int("idm.batch");
  i.lr = c.get_double("idm.lr");
  i.warmup = c.get_int("idm.warmup");
  return i;
}

plan::CemParams make_cem_params(const cfg::RunConfig& c, const world::WorldConfig& world) {
  plan::CemParams p;
  p.population = c.get_int("planner.population");
  p.elites = c.get_int("planner.elites");
  p.iterations = c.get_int("planner.iterations");
  p.rollouts_per_candidate = c.get_int("planner.rollouts_per_candidate");
  p.horizon = c.get_int("planner.horizon");
  p.full_covariance = c.get_bool("planner.full_covariance");
  const double st = c.get_double("planner.sigma_translation_factor");
  const double sy = c.get_double("planner.sigma_yaw_factor");
  p.proposal_sigma = {st * world.max_step * p.horizon, st * world.max_step * p.horizon,
                      sy * world.max_turn};
  return p;
}

plan::CemParams make_closed_loop_cem_params(const cfg::RunConfig& c,
                                            const world::WorldConfig& world) {
  plan::CemParams p;
  p.population = c.get_int("closed_loop.population");
  p.elites = std::min(c.get_int("planner.elites"), p.population);
  p.iterations = c.get_int("planner.iterations");
  p.rollouts_per_candidate = c.get_int("closed_loop.rollouts_per_candidate");
  p.horizon = c.get_int("closed_loop.horizon");
  p.full_covariance = c.get_bool("planner.full_covariance");
  const double st = c.get_double("planner.sigma_translation_factor");
  const double sy = c.get_double("planner.sigma_yaw_factor");
  p.proposal_sigma = {st * world.max_step * p.horizon, st * world.max_step * p.horizon,
                      sy * world.max_turn};
  return p;
}

void update_metadata(const Run& run,
                     const std::vector<std::pair<std::string, std::string>>& extra_hashes) {
  std::vector<std::pair<std::string, std::string>> hashes = extra_hashes;
  if (fs::is_directory(run.dir / "checkpoints")) {
    for (const auto& e : fs::directory_iterator(run.dir / "checkpoints")) {
      const auto weights = e.path() / "weights.bin";
      if (fs::exists(weights))
        hashes.emplace_back(e.path().filename().string(), io::hex64(io::hash_file(weights)));
    }
  }
  std::sort(hashes.begin(), hashes.end());
  cfg::save_run_metadata(run.dir, run.config, run.seed, hashes);
}

namespace {

void log_progress(const Run& run, const std::string& stage) {
  if (run.verbose) std::cerr << "[cwm] " << stage << "\n";
}

std::function<void(int, double)> step_logger(const Run& run, const std::string& stage) {
  if (!run.verbose) return {};
  return [stage](int step, double loss) {
    std::cerr << "  " << stage << " step " << step << " loss " << loss << "\n";
  };
}

void write_meta(const fs::path& dir, const std::vector<std::pair<std::string, std::string>>& kv) {
  std::ostringstream ss;
  for (const auto& [k, v] : kv) ss << k << " " << v << "\n";
  io::write_text_file(dir / "meta.txt", ss.str());
}

std::map<std::string, std::string> read_meta(const fs::path& dir) {
  std::map<std::string, std::string> kv;
  std::istringstream in(io::read_text_file(dir / "meta.txt"));
  std::string k, v;
  while (in >> k >> v) kv[k] = v;
  return kv;
}

void require_checkpoint(const Run& run, const std::string& tag, const std::string& produce_hint) {
  if (!fs::exists(run.ckpt(tag) / "weights.bin"))
    throw StateError("no trained '" + tag + "' checkpoint under " + run.ckpt(tag).string() +
                     "; run `" + produce_hint + "` first");
}

std::string levels_to_string(const fsq::FsqLevels& levels) {
  std::string s;
  for (size_t i = 0; i < levels.levels.size(); ++i)
    s += (i ? "," : "") + std::to_string(levels.levels[i]);
  return s;
}

std::vector<tok::EncodedFrame> features_only(const tok::FeatureProvider& provider,
                                             const std::vector<const world::Observation*>& frames) {
  std::vector<tok::EncodedFrame> out(frames.size());
  const size_t len = static_cast<size_t>(provider.n_patches()) * provider.feat_dim();
  for (size_t i = 0; i < frames.size(); ++i) {
    out[i].features.resize(len);
    provider.features_into(*frames[i], out[i].features.data());
  }
  return out;
}

}  // namespace

namespace {

// Keys each artifact actually depends on; retuning an unrelated section
// must not invalidate trained checkpoints.
std::string stage_hash(const Run& run, const std::string& tag) {
  std::vector<std::string> deps{"world.", "data.", "train.seed", "train.threads"};
  if (tag == "target_vq") {
    deps.push_back("vq.");
  } else if (tag == "backbone") {
    deps.push_back("backbone.");
  } else if (tag == "tokenizer" || tag == "latents") {
    deps.insert(deps.end(), {"backbone.", "vq.", "tokenizer."});
  } else if (tag == "tokenizer_uncond") {
    deps.insert(deps.end(), {"vq.", "tokenizer."});
  } else if (tag.rfind("wm", 0) == 0) {
    deps.insert(deps.end(), {"backbone.", "vq.", "tokenizer.", "wm."});
  } else if (tag == "idm") {
    deps.insert(deps.end(), {"backbone.", "vq.", "tokenizer.", "idm."});
  } else {
    return run.config.hash();
  }
  return run.config.section_hash(deps);
}

}  // namespace

bool artifact_matches(const Run& run, const std::string& tag) {
  const auto dir = run.ckpt(tag);
  if (!fs::exists(dir / "weights.bin") || !fs::exists(dir / "meta.txt")) return false;
  const auto meta = read_meta(dir);
  return meta.count("stage_hash") && meta.at("stage_hash") == stage_hash(run, tag);
}

bool dataset_matches(const Run& run, bool eval) {
  const auto manifest_path = run.data_dir(eval) / "manifest.txt";
  if (!fs::exists(manifest_path)) return false;
  const auto manifest = world::read_manifest(manifest_path);
  // The manifest hash covers the world config, dataset params and seed.
  const auto params = make_dataset_params(run.config, eval);
  const uint64_t seed = splitmix64(run.seed ^ fnv1a64(eval ? "data.eval" : "data.train"));
  std::ostringstream ss;
  const auto cfg = make_world_config(run.config);
  ss << cfg.image_size << "|" << cfg.patch_size << "|" << cfg.max_step << "|" << cfg.max_turn
     << "|" << cfg.view_span << "|" << cfg.body_frame << "|" << params.n_episodes << "|"
     << params.episode_length << "|" << params.momentum << "|" << params.dwell_prob << "|" << seed;
  return manifest.config_hash == io::hex64(fnv1a64(ss.str()));
}

bool latents_match(const Run& run, bool eval) {
  const auto path = run.latents_dir(eval) / "manifest.txt";
  if (!fs::exists(path)) return false;
  std::istringstream in(io::read_text_file(path));
  std::string k, v;
  if (!(in >> k >> v)) return false;
  return k == "config_hash" && v == stage_hash(run, "latents");
}

void gen_data(const Run& run) {
  log_progress(run, "generating datasets");
  const auto world_cfg = make_world_config(run.config);
  world::generate_dataset(make_dataset_params(run.config, false),
                          splitmix64(run.seed ^ fnv1a64("data.train")), world_cfg,
                          run.data_dir(false));
  world::generate_dataset(make_dataset_params(run.config, true),
                          splitmix64(run.seed ^ fnv1a64("data.eval")), world_cfg,
                          run.data_dir(true));
  update_metadata(run);
}

std::vector<world::Episode> load_episodes(const Run& run, bool eval) {
  const auto dir = run.data_dir(eval);
  if (!fs::exists(dir / "manifest.txt"))
    throw StateError("no dataset under " + dir.string() + "; run `gen-data` first");
  const auto manifest = world::read_manifest(dir / "manifest.txt");
  std::vector<world::Episode> out;
  out.reserve(manifest.episode_files.size());
  for (const auto& name : manifest.episode_files) out.push_back(world::read_episode(dir / name));
  return out;
}

std::vector<const world::Observation*> all_frames(const std::vector<world::Episode>& eps) {
  std::vector<const world::Observation*> out;
  for (const auto& ep : eps)
    for (const auto& obs : ep.observations) out.push_back(&obs);
  return out;
}

void train_target_vq(const Run& run) {
  log_progress(run, "training target VQ");
  const auto train_eps = load_episodes(run, false);
  const auto eval_eps = load_episodes(run, true);
  auto vq = std::make_unique<tok::TargetVq>(make_vq_config(run.config), run.seed);
  const auto stats = vq->train(all_frames(train_eps), all_frames(eval_eps), run.seed,
                               step_logger(run, "vq"));
  const auto dir = run.ckpt("target_vq");
  fs::create_directories(dir);
  vq->save(dir / "weights.bin");
  write_meta(dir, {{"config_hash", run.config.hash()},
                   {"stage_hash", stage_hash(run, "target_vq")},
                   {"holdout_mse", std::to_string(stats.holdout_mse)},
                   {"codebook_usage", std::to_string(stats.codebook_usage)}});
  update_metadata(run);
}

void train_tokenizer(const Run& run, bool conditional, const std::string& tag) {
  const auto provider_kind = run.config.get_string("backbone.provider");
  const auto train_eps = load_episodes(run, false);
  const auto frames = all_frames(train_eps);

  std::unique_ptr<tok::PatchBackbone> backbone;
  std::unique_ptr<tok::FileFeatureProvider> file_provider;
  const tok::FeatureProvider* provider = nullptr;
  if (conditional) {
    if (provider_kind == "trained") {
      backbone = std::make_unique<tok::PatchBackbone>(make_backbone_config(run.config), run.seed);
      const auto bdir = run.ckpt("backbone");
      if (fs::exists(bdir / "weights.bin")) {
        backbone->load(bdir / "weights.bin");
      } else {
        log_progress(run, "pretraining patch backbone");
        backbone->pretrain(frames, run.seed, step_logger(run, "backbone"));
        fs::create_directories(bdir);
        backbone->save(bdir / "weights.bin");
        write_meta(bdir, {{"config_hash", run.config.hash()},
                          {"stage_hash", stage_hash(run, "backbone")},
                          {"param_hash", io::hex64(backbone->content_hash())}});
      }
      provider = backbone.get();
    } else if (provider_kind == "file") {
      const auto bcfg = make_backbone_config(run.config);
      file_provider = std::make_unique<tok::FileFeatureProvider>(
          run.config.get_string("backbone.feature_dir"), bcfg.n_patches(), bcfg.dim);
      provider = file_provider.get();
    } else {
      throw ConfigError("backbone.provider must be 'trained' or 'file'");
    }
  }

  require_checkpoint(run, "target_vq", "train-target-vq");
  auto vq = std::make_unique<tok::TargetVq>(make_vq_config(run.config), run.seed);
  vq->load(run.ckpt("target_vq") / "weights.bin");

  log_progress(run, "training tokenizer (" + tag + ")");
  auto tcfg = make_tokenizer_config(run.config, conditional);
  tok::Tokenizer tokenizer(tcfg, provider, vq.get(), run.seed);
  const auto data = conditional
                        ? tok::prepare_frames(*provider, *vq, frames)
                        : [&] {
                            std::vector<tok::EncodedFrame> d(frames.size());
                            for (size_t i = 0; i < frames.size(); ++i)
                              d[i].target = vq->encode(*frames[i]);
                            return d;
                          }();
  tokenizer.train(data, run.seed, step_logger(run, tag));

  const auto dir = run.ckpt(tag);
  fs::create_directories(dir);
  tokenizer.save(dir / "weights.bin");
  write_meta(dir, {{"config_hash", run.config.hash()},
                   {"stage_hash", stage_hash(run, tag)},
                   {"n_tokens", std::to_string(tcfg.n_tokens)},
                   {"fsq_levels", levels_to_string(tcfg.levels)},
                   {"conditional", conditional ? "true" : "false"},
                   {"backbone", provider ? provider->id() : "none"},
                   {"backbone_hash", provider ? io::hex64(provider->content_hash()) : "0"},
                   {"target_vq_hash", io::hex64(vq->content_hash())}});
  update_metadata(run);
}

TokenizerBundle load_tokenizer(const Run& run, const std::string& tag) {
  require_checkpoint(run, tag, "train-tokenizer");
  require_checkpoint(run, "target_vq", "train-target-vq");
  const auto meta = read_meta(run.ckpt(tag));
  const bool conditional = meta.count("conditional") == 0 || meta.at("conditional") == "true";

  TokenizerBundle bundle;
  bundle.vq = std::make_unique<tok::TargetVq>(make_vq_config(run.config), run.seed);
  bundle.vq->load(run.ckpt("target_vq") / "weights.bin");

  const tok::FeatureProvider* provider = nullptr;
  if (conditional) {
    const auto provider_kind = run.config.get_string("backbone.provider");
    if (provider_kind == "trained") {
      require_checkpoint(run, "backbone", "train-tokenizer");
      bundle.backbone =
          std::make_unique<tok::PatchBackbone>(make_backbone_config(run.config), run.seed);
      bundle.backbone->load(run.ckpt("backbone") / "weights.bin");
      provider = bundle.backbone.get();
    } else {
      const auto bcfg = make_backbone_config(run.config);
      bundle.file_provider = std::make_unique<tok::FileFeatureProvider>(
          run.config.get_string("backbone.feature_dir"), bcfg.n_patches(), bcfg.dim);
      provider = bundle.file_provider.get();
    }
  }
  bundle.tokenizer = std::make_unique<tok::Tokenizer>(
      make_tokenizer_config(run.config, conditional), provider, bundle.vq.get(), run.seed);
  bundle.tokenizer->load(run.ckpt(tag) / "weights.bin");
  return bundle;
}

void encode_dataset(const Run& run) {
  log_progress(run, "encoding datasets to latents");
  auto bundle = load_tokenizer(run);
  for (bool eval : {false, true}) {
    const auto episodes = load_episodes(run, eval);
    const auto out_dir = run.latents_dir(eval);
    fs::create_directories(out_dir);
    std::ostringstream manifest;
    manifest << "config_hash " << stage_hash(run, "latents") << "\n";
    for (size_t e = 0; e < episodes.size(); ++e) {
      std::vector<const world::Observation*> frames;
      for (const auto& obs : episodes[e].observations) frames.push_back(&obs);
      const auto encoded = features_only(*bundle.provider(), frames);
      wm::LatentEpisode lat;
      lat.n_tokens = bundle.tokenizer->config().n_tokens;
      lat.codes = bundle.tokenizer->encode_frames(encoded);
      lat.actions = episodes[e].actions;
      char name[32];
      std::snprintf(name, sizeof name, "episode_%04zu.cwml", e);
      wm::write_latent_episode(out_dir / name, lat);
      manifest << name << " " << lat.frames() << "\n";
    }
    io::write_text_file(out_dir / "manifest.txt", manifest.str());
  }
  update_metadata(run);
}

std::vector<wm::LatentEpisode> load_latents(const Run& run, bool eval) {
  const auto dir = run.latents_dir(eval);
  if (!fs::exists(dir / "manifest.txt"))
    throw StateError("no encoded latents under " + dir.string() + "; run `encode-dataset` first");
  std::vector<wm::LatentEpisode> out;
  std::istringstream in(io::read_text_file(dir / "manifest.txt"));
  std::string k, v;
  in >> k >> v;  // config_hash line
  std::string name;
  int frames = 0;
  while (in >> name >> frames) out.push_back(wm::read_latent_episode(dir / name));
  return out;
}

void train_wm(const Run& run, const WmTrainOptions& options) {
  const std::string tag =
      options.tag.empty() ? (options.variant == "ar" ? "wm_ar" : "wm_bc") : options.tag;
  log_progress(run, "training world model (" + tag + ")");
  auto wcfg = make_wm_config(run.config, options.variant);
  if (options.disable_history_mask) wcfg.history_mask = false;
  if (options.disable_action_conditioning) wcfg.action_conditioning = false;
  wm::WorldModel model(wcfg, run.seed);
  const auto latents = load_latents(run, false);
  model.train(latents, run.seed, step_logger(run, tag));

  const auto dir = run.ckpt(tag);
  fs::create_directories(dir);
  model.save(dir / "weights.bin");
  write_meta(dir, {{"config_hash", run.config.hash()},
                   {"stage_hash", stage_hash(run, tag)},
                   {"variant", options.variant},
                   {"n_tokens", std::to_string(wcfg.n_tokens)},
                   {"history_mask", wcfg.history_mask ? "true" : "false"},
                   {"action_conditioning", wcfg.action_conditioning ? "true" : "false"},
                   {"sampling_steps", std::to_string(wcfg.sampling_steps)}});
  update_metadata(run);
}

std::unique_ptr<wm::WorldModel> load_wm(const Run& run, const std::string& tag) {
  require_checkpoint(run, tag, "train-wm");
  const auto meta = read_meta(run.ckpt(tag));
  auto wcfg = make_wm_config(run.config, meta.at("variant"));
  if (meta.count("history_mask")) wcfg.history_mask = meta.at("history_mask") == "true";
  if (meta.count("action_conditioning"))
    wcfg.action_conditioning = meta.at("action_conditioning") == "true";
  auto model = std::make_unique<wm::WorldModel>(wcfg, run.seed);
  model->load(run.ckpt(tag) / "weights.bin");
  return model;
}

void train_idm(const Run& run) {
  log_progress(run, "training IDM");
  const auto latents = load_latents(run, false);
  std::vector<idm::FramePair> pairs;
  for (const auto& ep : latents)
    for (size_t t = 0; t + 1 < ep.codes.size(); ++t)
      pairs.push_back({ep.codes[t], ep.codes[t + 1], ep.actions[t]});
  idm::IdmModel model(make_idm_config(run.config), run.seed);
  model.train(pairs, run.seed, step_logger(run, "idm"));
  const auto dir = run.ckpt("idm");
  fs::create_directories(dir);
  model.save(dir / "weights.bin");
  write_meta(dir, {{"config_hash", run.config.hash()},
                   {"stage_hash", stage_hash(run, "idm")},
                   {"timesteps", std::to_string(model.config().timesteps)}});
  update_metadata(run);
}

std::unique_ptr<idm::IdmModel> load_idm(const Run& run) {
  require_checkpoint(run, "idm", "train-idm");
  auto model = std::make_unique<idm::IdmModel>(make_idm_config(run.config), run.seed);
  model->load(run.ckpt("idm") / "weights.bin");
  return model;
}

PlanningEval eval_planning(const Run& run, const wm::WorldModel& model,
                           const TokenizerBundle& bundle, plan::CostMode mode, int max_episodes,
                           uint64_t seed, const plan::CemParams* override_params) {
  const auto world_cfg = make_world_config(run.config);
  const auto latents = load_latents(run, true);
  const auto episodes = load_episodes(run, true);
  const auto params = override_params ? *override_params : make_cem_params(run.config, world_cfg);
  const int tau = model.config().tau;

  PlanningEval eval;
  Rng root = Rng::for_module(seed, "eval.planning");
  for (size_t e = 0; e < latents.size() && eval.episodes < max_episodes; ++e) {
    const auto& lat = latents[e];
    const auto& ep = episodes[e];
    const int t0 = tau - 1;
    const int goal_idx = t0 + params.horizon;
    if (goal_idx >= lat.frames()) continue;

    std::vector<tok::CompactCode> history(lat.codes.begin(), lat.codes.begin() + tau);
    plan::WmBackend backend(&model, bundle.tokenizer.get(), history, lat.codes[static_cast<size_t>(goal_idx)],
                            mode, model.config().sampling_steps);
    Rng rng = root.fork(e);
    const auto result = plan::cem_plan(backend, params, world_cfg, rng);
    eval.mean_plan_seconds += result.total_seconds;

    // Execute the planned straight line through the true dynamics and score
    // against the recorded trajectory.
    std::vector<world::Pose> pred{ep.poses[static_cast<size_t>(t0)]};
    for (const auto& a : result.action_sequence)
      pred.push_back(world::step(pred.back(), a, world_cfg));
    std::vector<world::Pose> gt(ep.poses.begin() + t0, ep.poses.begin() + goal_idx + 1);
    const auto pred_t = bench::Trajectory::from_raw(pred);
    const auto gt_t = bench::Trajectory::from_raw(gt);
    const auto a = bench::ate(pred_t, gt_t);
    const auto r = bench::rpe(pred_t, gt_t);
    eval.mean_ate += a.position_rmse;
    eval.mean_yaw_ate += a.yaw_rmse;
    eval.mean_rpe += r.position_rmse;
    ++eval.episodes;
  }
  if (eval.episodes == 0) throw ValidationError("eval_planning: no usable held-out episodes");
  eval.mean_ate /= eval.episodes;
  eval.mean_rpe /= eval.episodes;
  eval.mean_yaw_ate /= eval.episodes;
  eval.mean_plan_seconds /= eval.episodes;
  return eval;
}

ApeEval eval_ape(const Run& run, const wm::WorldModel& bc_model, const idm::IdmModel& idm_model,
                 int max_episodes, uint64_t seed) {
  if (bc_model.variant() != wm::Variant::kBlockCausal)
    throw UsageError("eval_ape: needs the block-causal world model");
  const auto latents = load_latents(run, true);
  const int tau = bc_model.config().tau;
  const int horizon = bc_model.config().horizon;

  ApeEval eval;
  Rng root = Rng::for_module(seed, "eval.ape");
  for (size_t e = 0; e < latents.size() && eval.episodes < max_episodes; ++e) {
    const auto& lat = latents[e];
    if (lat.frames() < tau + horizon) continue;
    std::vector<tok::CompactCode> context(lat.codes.begin(), lat.codes.begin() + tau);
    std::vector<world::Action> actions(lat.actions.begin() + (tau - 1),
                                       lat.actions.begin() + (tau - 1 + horizon));
    Rng rng = root.fork(e);
    const auto generated = bc_model.predict_parallel(context, actions, 0, rng);

    std::vector<tok::CompactCode> full = context;
    full.insert(full.end(), generated.begin(), generated.end());

    Rng ape_rng = root.fork(e * 2 + 1);
    eval.matched += bench::ape(full, actions, idm_model, tau, ape_rng);

    // Same frames scored against actions rotated half a horizon; momentum
    // smoothing makes adjacent actions similar, so a single-step shift
    // would under-shuffle.
    const size_t offset = std::max<size_t>(1, actions.size() / 2);
    std::vector<world::Action> shuffled;
    for (size_t j = 0; j < actions.size(); ++j)
      shuffled.push_back(actions[(j + offset) % actions.size()]);
    Rng ape_rng2 = root.fork(e * 2 + 1);  // same sampling stream for a paired comparison
    eval.shuffled += bench::ape(full, shuffled, idm_model, tau, ape_rng2);
    ++eval.episodes;
  }
  if (eval.episodes == 0) throw ValidationError("eval_ape: no usable held-out episodes");
  eval.matched /= eval.episodes;
  eval.shuffled /= eval.episodes;
  return eval;
}

IdmEval eval_idm(const Run& run, const idm::IdmModel& model, int max_pairs, uint64_t seed) {
  const auto latents = load_latents(run, true);
  std::vector<idm::FramePair> pairs;
  std::vector<idm::FramePair> static_pairs;
  for (const auto& ep : latents)
    for (size_t t = 0; t + 1 < ep.codes.size(); ++t) {
      idm::FramePair p{ep.codes[t], ep.codes[t + 1], ep.actions[t]};
      const auto& a = ep.actions[t];
      if (std::abs(a.dx) + std::abs(a.dy) + std::abs(a.dyaw) < 1e-9f)
        static_pairs.push_back(p);
      if (static_cast<int>(pairs.size()) < max_pairs) pairs.push_back(p);
    }
  if (pairs.empty()) throw ValidationError("eval_idm: no held-out pairs");

  IdmEval eval;
  eval.pairs = static_cast<int>(pairs.size());
  Rng rng = Rng::for_module(seed, "eval.idm");
  std::vector<world::Action> gts;
  for (const auto& p : pairs) gts.push_back(p.action);

  const auto preds = model.predict_batch(pairs, rng);
  eval.conditioned = idm::idm_metrics(preds, gts);
  Rng rng2 = Rng::for_module(seed, "eval.idm.zero");
  const auto zero_preds = model.predict_batch(pairs, rng2, /*zero_conditioning=*/true);
  eval.zero_conditioned = idm::idm_metrics(zero_preds, gts);

  if (!static_pairs.empty()) {
    Rng rng3 = Rng::for_module(seed, "eval.idm.static");
    const auto sp = model.predict_batch(static_pairs, rng3);
    double total = 0.0;
    for (const auto& a : sp) total += std::abs(a.dx) + std::abs(a.dy) + std::abs(a.dyaw);
    eval.static_pair_l1 = total / static_cast<double>(sp.size());
  }
  return eval;
}

ClosedLoopStats closed_loop_trials(const Run& run, const wm::WorldModel& model,
                                   const TokenizerBundle& bundle, int trials, uint64_t seed,
                                   bool random_baseline) {
  const auto world_cfg = make_world_config(run.config);
  const auto params = make_closed_loop_cem_params(run.config, world_cfg);
  const int replan_every = run.config.get_int("closed_loop.replan_every");
  const int max_steps = run.config.get_int("closed_loop.max_steps");
  const double tolerance = run.config.get_double("closed_loop.tolerance");
  const int sampling_steps = run.config.get_int("closed_loop.sampling_steps");
  const int tau = model.config().tau;

  ClosedLoopStats stats;
  stats.trials = trials;
  // Trial geometry comes from a mode-independent stream so the learned and
  // random baselines face identical start/goal pairs.
  Rng geometry_root = Rng::for_module(seed, "closed_loop.trials");
  Rng root = Rng::for_module(seed, random_baseline ? "closed_loop.random" : "closed_loop.learned");
  for (int trial = 0; trial < trials; ++trial) {
    Rng geo = geometry_root.fork(static_cast<uint64_t>(trial));
    Rng rng = root.fork(static_cast<uint64_t>(trial));
    world::Pose start;
    start.x = static_cast<float>(geo.uniform(0.2, 0.8));
    start.y = static_cast<float>(geo.uniform(0.2, 0.8));
    start.yaw = world::wrap_angle(geo.uniform(-3.0, 3.0));
    const double angle = geo.uniform(0.0, 6.283185307179586);
    world::Pose goal = start;
    goal.x = static_cast<float>(std::clamp(start.x + 0.3 * std::cos(angle), 0.08, 0.92));
    goal.y = static_cast<float>(std::clamp(start.y + 0.3 * std::sin(angle), 0.08, 0.92));

    const auto goal_obs = world::render(goal, world_cfg);
    const auto z_goal = bundle.tokenizer->encode(goal_obs);

    plan::PlannerFn planner;
    if (random_baseline) {
      planner = [&](const plan::ClosedLoopResult&, Rng& prng) {
        plan::PlanResult r;
        for (int i = 0; i < params.horizon; ++i) {
          world::Action a;
          a.dx = static_cast<float>(prng.uniform(-world_cfg.max_step, world_cfg.max_step));
          a.dy = static_cast<float>(prng.uniform(-world_cfg.max_step, world_cfg.max_step));
          a.dyaw = static_cast<float>(prng.uniform(-world_cfg.max_turn, world_cfg.max_turn));
          r.action_sequence.push_back(a);
        }
        return r;
      };
    } else {
      planner = [&](const plan::ClosedLoopResult& so_far, Rng& prng) {
        // Encode the most recent consecutive observations as the history
        // window, matching the training distribution.
        const int have = static_cast<int>(so_far.observations.size());
        std::vector<tok::CompactCode> hist;
        for (int k = std::max(0, have - tau); k < have; ++k)
          hist.push_back(bundle.tokenizer->encode(so_far.observations[static_cast<size_t>(k)]));
        plan::WmBackend backend(&model, bundle.tokenizer.get(), hist, z_goal,
                                plan::CostMode::kLatent, sampling_steps);
        return plan::cem_plan(backend, params, world_cfg, prng);
      };
    }

    Rng loop_rng = rng.fork(99);
    const auto result = plan::closed_loop_run(world_cfg, start, goal, planner, replan_every,
                                              max_steps, tolerance, loop_rng);
    if (result.success) ++stats.successes;
    stats.mean_steps_used += result.steps_used;
  }
  stats.mean_steps_used /= std::max(1, trials);
  return stats;
}

ClosedLoopStats oracle_closed_loop_trials(const Run& run, int trials, double goal_distance,
                                          uint64_t seed, const plan::CemParams* params_in,
                                          std::vector<double>* final_errors) {
  const auto world_cfg = make_world_config(run.config);
  const auto params = params_in ? *params_in : make_cem_params(run.config, world_cfg);
  const int replan_every = run.config.get_int("closed_loop.replan_every");
  const int max_steps = run.config.get_int("closed_loop.max_steps");
  const double tolerance = run.config.get_double("closed_loop.tolerance");

  ClosedLoopStats stats;
  stats.trials = trials;
  Rng root = Rng::for_module(seed, "closed_loop.oracle");
  for (int trial = 0; trial < trials; ++trial) {
    Rng rng = root.fork(static_cast<uint64_t>(trial));
    // Start box keeps every goal exactly goal_distance away after the walk,
    // with no boundary clamping.
    const double margin = 0.08 + goal_distance;
    world::Pose start;
    start.x = static_cast<float>(rng.uniform(margin, 1.0 - margin));
    start.y = static_cast<float>(rng.uniform(margin, 1.0 - margin));
    start.yaw = world::wrap_angle(rng.uniform(-3.0, 3.0));
    const double angle = rng.uniform(0.0, 6.283185307179586);
    world::Pose goal = start;
    goal.x = static_cast<float>(start.x + goal_distance * std::cos(angle));
    goal.y = static_cast<float>(start.y + goal_distance * std::sin(angle));
    const auto goal_obs = world::render(goal, world_cfg);

    plan::PlannerFn planner = [&](const plan::ClosedLoopResult& so_far, Rng& prng) {
      plan::OracleBackend backend(world_cfg, so_far.trajectory.back(), goal_obs);
      return plan::cem_plan(backend, params, world_cfg, prng);
    };
    Rng loop_rng = rng.fork(99);
    const auto result = plan::closed_loop_run(world_cfg, start, goal, planner, replan_every,
                                              max_steps, tolerance, loop_rng);
    if (result.success) ++stats.successes;
    stats.mean_steps_used += result.steps_used;
    if (final_errors) {
      const auto& p = result.trajectory.back();
      final_errors->push_back(std::hypot(p.x - goal.x, p.y - goal.y));
    }
  }
  stats.mean_steps_used /= std::max(1, trials);
  return stats;
}

void write_attention_maps(const Run& run, const TokenizerBundle& bundle,
                          const world::Observation& obs, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  const auto world_cfg = make_world_config(run.config);
  const auto maps = bundle.tokenizer->attention_maps(obs);
  const int side = world_cfg.patches_per_side();
  const int scale = world_cfg.image_size / side;
  for (size_t t = 0; t < maps.size(); ++t) {
    float mx = 0.0f;
    for (float v : maps[t]) mx = std::max(mx, v);
    world::Observation img;
    img.height = world_cfg.image_size;
    img.width = world_cfg.image_size;
    img.pixels.assign(static_cast<size_t>(img.height) * img.width * 3, 0);
    for (int i = 0; i < img.height; ++i)
      for (int j = 0; j < img.width; ++j) {
        const float v = maps[t][static_cast<size_t>(i / scale) * side + (j / scale)];
        const auto g = static_cast<uint8_t>(std::clamp(v / std::max(1e-9f, mx), 0.0f, 1.0f) * 255.0f);
        const size_t at = (static_cast<size_t>(i) * img.width + j) * 3;
        img.pixels[at] = g;
        img.pixels[at + 1] = g;
        img.pixels[at + 2] = g;
      }
    char name[32];
    std::snprintf(name, sizeof name, "attention_%02zu.ppm", t);
    bench::write_observation_ppm(img, out_dir / name);
  }
}

}  // namespace cwm::pipeline
