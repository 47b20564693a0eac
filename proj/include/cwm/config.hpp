#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cwm/errors.hpp"

namespace cwm::cfg {

// Flat key = value configuration with '#' comments. Unknown keys are
// rejected against the registry below; the content hash is computed over
// canonically sorted entries so it is stable under key reordering.
class RunConfig {
 public:
  static RunConfig preset(const std::string& name);  // "desk" or "paper"
  static RunConfig load(const std::filesystem::path& path);
  static RunConfig parse(const std::string& text, const std::string& origin = "<string>");

  void set(const std::string& key, const std::string& value);  // validates key and type
  void apply_override(const std::string& key_eq_value);

  int get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::string get_string(const std::string& key) const;
  std::vector<int> get_int_list(const std::string& key) const;

  std::string canonical_text() const;
  std::string hash() const;  // 16 hex chars
  // Hash restricted to keys under the given section prefixes (e.g.
  // {"world.", "vq."}); lets artifact caches depend only on what affects
  // them.
  std::string section_hash(const std::vector<std::string>& prefixes) const;
  void save(const std::filesystem::path& path) const;

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

struct KeySpec {
  const char* name;
  const char* type;  // "int", "double", "bool", "string", "int_list"
  const char* desk;
  const char* paper;
};

const std::vector<KeySpec>& key_registry();

// Writes metadata.txt: config hash, seed, module versions, checkpoint hashes.
void save_run_metadata(const std::filesystem::path& run_dir, const RunConfig& config,
                       uint64_t seed,
                       const std::vector<std::pair<std::string, std::string>>& artifact_hashes);

const std::vector<std::pair<std::string, std::string>>& module_versions();

}  // namespace cwm::cfg
