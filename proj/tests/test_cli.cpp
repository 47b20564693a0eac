#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <string>

// Exercises the installed binary's surface: exit codes and stdout. The
// test runner's working directory is the build tree, where ./cwm lives.

namespace {

struct CmdResult {
  int exit_code = -1;
  std::string output;
};

CmdResult run_cmd(const std::string& cmd) {
  CmdResult r;
  FILE* pipe = popen((cmd + " 2>&1").c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 512> buf{};
  while (fgets(buf.data(), buf.size(), pipe)) r.output += buf.data();
  const int status = pclose(pipe);
  r.exit_code = WEXITSTATUS(status);
  return r;
}

std::string tmp_run_dir(const char* name) {
  const auto dir = std::filesystem::temp_directory_path() / "cwm_tests" / name;
  std::filesystem::remove_all(dir);
  return dir.string();
}

}  // namespace

TEST_CASE("report-bits prints the frame budget") {
  const auto r = run_cmd("./cwm report-bits --tokens 16 --run-dir " + tmp_run_dir("cli_bits"));
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("bits_per_frame 255.45") != std::string::npos);
  const auto r8 = run_cmd("./cwm report-bits --tokens 8 --run-dir " + tmp_run_dir("cli_bits8"));
  CHECK(r8.output.find("bits_per_frame 127.7") != std::string::npos);
}

TEST_CASE("unknown subcommands and flags exit with code 2") {
  CHECK(run_cmd("./cwm frobnicate").exit_code == 2);
  CHECK(run_cmd("./cwm report-bits --no-such-flag").exit_code == 2);
  CHECK(run_cmd("./cwm").exit_code == 2);
}

TEST_CASE("plan without a trained checkpoint exits 1 with an actionable message") {
  const auto r = run_cmd("./cwm plan --run-dir " + tmp_run_dir("cli_plan"));
  CHECK(r.exit_code == 1);
  CHECK(r.output.find("train-wm") != std::string::npos);
}

TEST_CASE("eval with an unknown metric is a usage error") {
  const auto r = run_cmd("./cwm eval --metric bogus --run-dir " + tmp_run_dir("cli_eval"));
  CHECK(r.exit_code == 2);
}

TEST_CASE("bad config overrides exit 1 naming the key") {
  const auto r =
      run_cmd("./cwm gen-data --set typo_lr=3 --run-dir " + tmp_run_dir("cli_override"));
  CHECK(r.exit_code == 1);
  CHECK(r.output.find("typo_lr") != std::string::npos);
}

TEST_CASE("gen-data produces a manifest and a config snapshot") {
  const auto dir = tmp_run_dir("cli_gen");
  const auto r = run_cmd(
      "./cwm gen-data --run-dir " + dir +
      " --set data.train_episodes=2 --set data.eval_episodes=1 --set data.episode_length=8");
  CHECK(r.exit_code == 0);
  namespace fs = std::filesystem;
  CHECK(fs::exists(fs::path(dir) / "data" / "manifest.txt"));
  CHECK(fs::exists(fs::path(dir) / "data_eval" / "manifest.txt"));
  CHECK(fs::exists(fs::path(dir) / "config.cfg"));
  CHECK(fs::exists(fs::path(dir) / "metadata.txt"));
}
