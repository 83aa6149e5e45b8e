#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"
#include "json.hpp"

namespace {

struct Run {
  int status = -1;
  std::string out;
};

// Runs the CLI with stderr merged into stdout.
Run run_cli(const std::string& args) {
  const std::string cmd = std::string(SISDA_CLI) + " " + args + " 2>&1";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), pipe)) r.out += buf.data();
  const int raw = pclose(pipe);
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return r;
}

bool is_error_line(const std::string& out, const std::string& kind) {
  const auto j = nlohmann::json::parse(out.substr(0, out.find('\n')), nullptr, false);
  return !j.is_discarded() && j.value("error", "") == kind && j.contains("message");
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("show-config prints the effective config as JSON") {
    const Run r = run_cli("--seed 11 show-config");
    CHECK(r.status == 0);
    const auto j = nlohmann::json::parse(r.out);
    CHECK(j.at("seed") == 11);
  }

  TEST_CASE("failures exit 1 with one JSON error line") {
    const auto dir = std::filesystem::temp_directory_path() / "sisda-test-cli";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "bad.json") << R"({"seeed": 1})";

    Run r = run_cli("--config " + (dir / "bad.json").string() + " show-config");
    CHECK(r.status == 1);
    CHECK(is_error_line(r.out, "parse"));

    r = run_cli("--out " + (dir / "missing").string() + " report");
    CHECK(r.status == 1);
    CHECK(is_error_line(r.out, "io"));

    r = run_cli("adapt --method magic");
    CHECK(r.status == 1);
    CHECK(is_error_line(r.out, "invalid-config"));

    r = run_cli("no-such-command");
    CHECK(r.status == 1);
    CHECK(is_error_line(r.out, "usage"));
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("generate writes the corpus splits") {
    const auto dir = std::filesystem::temp_directory_path() / "sisda-test-cli-gen";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "small.json")
        << R"({"splits": {"source_train": 10, "target_adapt": 4, "target_test": 3, "source_test": 2}})";
    const Run r = run_cli("--config " + (dir / "small.json").string() + " --out " + (dir / "run").string() + " generate");
    CHECK(r.status == 0);
    CHECK(r.out.find("source-train\t10") != std::string::npos);
    std::filesystem::remove_all(dir);
  }
}
