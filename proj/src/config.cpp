#include "cwm/config.hpp"

#include <algorithm>
#include <sstream>

#include "cwm/io.hpp"
#include "cwm/rng.hpp"

namespace cwm::cfg {

namespace {

// name, type, desk default, paper default. The "paper" preset pins the
// published hyperparameters; "desk" is sized to train on a workstation CPU.
const std::vector<KeySpec> kRegistry = {
    {"world.image_size", "int", "64", "64"},
    {"world.patch_size", "int", "8", "8"},
    {"world.max_step", "double", "0.05", "0.05"},
    {"world.max_turn", "double", "0.25", "0.25"},
    {"world.view_span", "double", "0.6", "0.6"},
    {"world.body_frame", "bool", "false", "false"},

    {"data.train_episodes", "int", "100", "100"},
    {"data.eval_episodes", "int", "16", "16"},
    {"data.episode_length", "int", "33", "33"},
    {"data.momentum", "double", "0.78", "0.78"},
    {"data.dwell_prob", "double", "0.06", "0.06"},

    {"train.seed", "int", "1", "1"},
    {"train.threads", "int", "2", "2"},

    {"backbone.provider", "string", "trained", "trained"},
    {"backbone.feature_dir", "string", "", ""},
    {"backbone.dim", "int", "96", "768"},
    {"backbone.depth", "int", "3", "12"},
    {"backbone.heads", "int", "4", "12"},
    {"backbone.mlp_ratio", "int", "4", "4"},
    {"backbone.mask_ratio", "double", "0.5", "0.5"},
    {"backbone.steps", "int", "900", "100000"},
    {"backbone.batch", "int", "32", "512"},
    {"backbone.lr", "double", "3e-4", "1e-4"},
    {"backbone.warmup", "int", "50", "10000"},

    {"vq.codebook", "int", "512", "512"},
    {"vq.code_dim", "int", "16", "16"},
    {"vq.base_channels", "int", "32", "64"},
    {"vq.commitment", "double", "0.25", "0.25"},
    {"vq.steps", "int", "2000", "100000"},
    {"vq.batch", "int", "16", "128"},
    {"vq.lr", "double", "1e-3", "1e-4"},
    {"vq.warmup", "int", "50", "5000"},
    {"vq.holdout_mse", "double", "0.01", "0.01"},

    {"tokenizer.n_tokens", "int", "16", "16"},
    {"tokenizer.fsq_levels", "int_list", "8,8,8,5,5,5", "8,8,8,5,5,5"},
    {"tokenizer.resampler_dim", "int", "128", "768"},
    {"tokenizer.resampler_depth", "int", "5", "5"},
    {"tokenizer.resampler_heads", "int", "4", "8"},
    {"tokenizer.decoder_dim", "int", "256", "1024"},
    {"tokenizer.decoder_depth", "int", "6", "16"},
    {"tokenizer.decoder_heads", "int", "8", "8"},
    {"tokenizer.mlp_ratio", "int", "4", "4"},
    {"tokenizer.decode_steps", "int", "16", "16"},
    {"tokenizer.steps", "int", "1400", "500000"},
    {"tokenizer.batch", "int", "16", "512"},
    {"tokenizer.lr", "double", "1e-4", "1e-4"},
    {"tokenizer.warmup", "int", "100", "10000"},

    {"wm.variant", "string", "ar", "ar"},
    {"wm.tau", "int", "4", "4"},
    {"wm.dim", "int", "256", "768"},
    {"wm.depth", "int", "6", "12"},
    {"wm.heads", "int", "8", "12"},
    {"wm.mlp_ratio", "int", "4", "4"},
    {"wm.history_mask", "bool", "true", "true"},
    {"wm.history_mask_max", "double", "0.5", "0.5"},
    {"wm.infer_history_mask", "double", "0.2", "0.2"},
    {"wm.sampling_steps_n16", "int", "8", "8"},
    {"wm.sampling_steps_n8", "int", "4", "4"},
    {"wm.steps", "int", "1600", "200000"},
    {"wm.batch", "int", "32", "128"},
    {"wm.lr", "double", "3e-4", "1e-4"},
    {"wm.warmup", "int", "100", "10000"},
    {"wm.bc_tau", "int", "2", "2"},
    {"wm.bc_horizon", "int", "6", "14"},
    {"wm.bc_dim", "int", "256", "1024"},
    {"wm.bc_depth", "int", "6", "16"},
    {"wm.bc_heads", "int", "8", "16"},
    {"wm.bc_sampling_steps", "int", "0", "100"},  // 0 = scale 100*H/14
    {"wm.bc_steps", "int", "1400", "100000"},
    {"wm.bc_batch", "int", "12", "128"},

    {"planner.population", "int", "80", "80"},
    {"planner.elites", "int", "5", "5"},
    {"planner.iterations", "int", "1", "1"},
    {"planner.rollouts_per_candidate", "int", "3", "3"},
    {"planner.horizon", "int", "8", "8"},
    {"planner.cost", "string", "pixel", "pixel"},
    {"planner.sigma_translation_factor", "double", "0.3", "0.3"},
    {"planner.sigma_yaw_factor", "double", "0.5", "0.5"},
    {"planner.full_covariance", "bool", "true", "true"},

    {"closed_loop.replan_every", "int", "2", "2"},
    {"closed_loop.max_steps", "int", "16", "16"},
    {"closed_loop.tolerance", "double", "0.05", "0.05"},
    {"closed_loop.population", "int", "20", "80"},
    {"closed_loop.horizon", "int", "4", "8"},
    {"closed_loop.rollouts_per_candidate", "int", "1", "3"},
    {"closed_loop.sampling_steps", "int", "4", "8"},

    {"idm.enc_dim", "int", "128", "512"},
    {"idm.enc_depth", "int", "4", "4"},
    {"idm.enc_heads", "int", "4", "8"},
    {"idm.hidden", "int", "128", "512"},
    {"idm.mlp_layers", "int", "4", "4"},
    {"idm.timesteps", "int", "1000", "1000"},
    {"idm.steps", "int", "1600", "100000"},
    {"idm.batch", "int", "64", "128"},
    {"idm.lr", "double", "3e-4", "1e-4"},
    {"idm.warmup", "int", "100", "5000"},

    {"bench.trials", "int", "4", "4"},
    {"bench.population", "int", "6", "6"},
    {"bench.horizon", "int", "2", "2"},
};

const KeySpec* find_key(const std::string& name) {
  for (const auto& k : kRegistry)
    if (name == k.name) return &k;
  return nullptr;
}

void check_type(const KeySpec& spec, const std::string& value) {
  const std::string t = spec.type;
  auto fail = [&] {
    throw ConfigError("config key '" + std::string(spec.name) + "' expects " + t + ", got '" +
                      value + "'");
  };
  if (t == "int") {
    size_t pos = 0;
    try {
      (void)std::stol(value, &pos);
    } catch (...) {
      fail();
    }
    if (pos != value.size()) fail();
  } else if (t == "double") {
    size_t pos = 0;
    try {
      (void)std::stod(value, &pos);
    } catch (...) {
      fail();
    }
    if (pos != value.size()) fail();
  } else if (t == "bool") {
    if (value != "true" && value != "false") fail();
  } else if (t == "int_list") {
    std::istringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) {
      size_t pos = 0;
      try {
        (void)std::stol(item, &pos);
      } catch (...) {
        fail();
      }
      if (pos != item.size()) fail();
    }
  }
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

const std::vector<KeySpec>& key_registry() { return kRegistry; }

RunConfig RunConfig::preset(const std::string& name) {
  RunConfig c;
  for (const auto& k : kRegistry) {
    if (name == "desk")
      c.values_[k.name] = k.desk;
    else if (name == "paper")
      c.values_[k.name] = k.paper;
    else
      throw ConfigError("unknown preset '" + name + "' (expected desk or paper)");
  }
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  return parse(io::read_text_file(path), path.string());
}

RunConfig RunConfig::parse(const std::string& text, const std::string& origin) {
  RunConfig c = preset("desk");
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash_pos = line.find('#');
    if (hash_pos != std::string::npos) line = line.substr(0, hash_pos);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "preset") {
      c = preset(value);
      continue;
    }
    c.set(key, value);
  }
  return c;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const KeySpec* spec = find_key(key);
  if (!spec) throw ConfigError("unknown config key '" + key + "'");
  check_type(*spec, value);
  values_[key] = value;
}

void RunConfig::apply_override(const std::string& key_eq_value) {
  const auto eq = key_eq_value.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override must be key=value, got '" + key_eq_value + "'");
  set(trim(key_eq_value.substr(0, eq)), trim(key_eq_value.substr(eq + 1)));
}

int RunConfig::get_int(const std::string& key) const {
  return static_cast<int>(std::stol(get_string(key)));
}

double RunConfig::get_double(const std::string& key) const { return std::stod(get_string(key)); }

bool RunConfig::get_bool(const std::string& key) const { return get_string(key) == "true"; }

std::string RunConfig::get_string(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

std::vector<int> RunConfig::get_int_list(const std::string& key) const {
  std::vector<int> out;
  std::istringstream ss(get_string(key));
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(static_cast<int>(std::stol(item)));
  return out;
}

std::string RunConfig::canonical_text() const {
  std::ostringstream ss;
  for (const auto& [k, v] : values_) ss << k << " = " << v << "\n";  // std::map is sorted
  return ss.str();
}

std::string RunConfig::hash() const { return io::hex64(fnv1a64(canonical_text())); }

std::string RunConfig::section_hash(const std::vector<std::string>& prefixes) const {
  std::ostringstream ss;
  for (const auto& [k, v] : values_)
    for (const auto& p : prefixes)
      if (k.rfind(p, 0) == 0) {
        ss << k << " = " << v << "\n";
        break;
      }
  return io::hex64(fnv1a64(ss.str()));
}

void RunConfig::save(const std::filesystem::path& path) const {
  io::write_text_file(path, canonical_text());
}

const std::vector<std::pair<std::string, std::string>>& module_versions() {
  static const std::vector<std::pair<std::string, std::string>> v = {
      {"fsq_codec", "1"},   {"masking", "1"}, {"toy_world", "1"}, {"tokenizer", "1"},
      {"world_model", "1"}, {"planner", "1"}, {"idm", "1"},       {"evalbench", "1"},
      {"cli_config", "1"},
  };
  return v;
}

void save_run_metadata(const std::filesystem::path& run_dir, const RunConfig& config,
                       uint64_t seed,
                       const std::vector<std::pair<std::string, std::string>>& artifact_hashes) {
  std::ostringstream ss;
  ss << "config_hash " << config.hash() << "\n";
  ss << "seed " << seed << "\n";
  for (const auto& [name, ver] : module_versions()) ss << "module " << name << " " << ver << "\n";
  for (const auto& [name, h] : artifact_hashes) ss << "artifact " << name << " " << h << "\n";
  io::write_text_file(run_dir / "metadata.txt", ss.str());
}

}  // namespace cwm::cfg
