#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "doctest.h"
#include "sisda/error.hpp"
#include "sisda/experiment.hpp"

using namespace sisda;

namespace {

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::state;
}

std::filesystem::path fresh_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_SUITE("experiment") {
  TEST_CASE("config dump parses back to the same config") {
    ExperimentConfig c = ExperimentConfig::defaults();
    c.seed = 99;
    c.adaptation.tau = 0.5;
    c.adaptation.adapter = AdapterConfig{2, 0.5};
    c.target.noise_prob = 0.3;
    const std::string text = dump_experiment_config(c);
    CHECK(dump_experiment_config(parse_experiment_config(text)) == text);
  }

  TEST_CASE("absent keys keep defaults and unknown keys are parse errors") {
    const ExperimentConfig c = parse_experiment_config(R"({"seed": 3})");
    CHECK(c.seed == 3);
    CHECK(c.base.epochs == ExperimentConfig::defaults().base.epochs);
    CHECK(kind_of([] { parse_experiment_config(R"({"sed": 3})"); }) == ErrorKind::parse);
    CHECK(kind_of([] { parse_experiment_config(R"({"adaptation": {"lr": 1}})"); }) == ErrorKind::parse);
    CHECK(kind_of([] { parse_experiment_config("{not json"); }) == ErrorKind::parse);
  }

  TEST_CASE("environment overrides replace config values") {
    ExperimentConfig c = ExperimentConfig::defaults();
    const std::map<std::string, std::string> env = {
        {"SISDA_SEED", "42"}, {"SISDA_OUT_DIR", "/tmp/x"}, {"SISDA_ADAPT_EPOCHS", "5"}, {"SISDA_LEARNING_RATE", "2e-4"}};
    apply_env_overrides(c, [&](const char* name) -> const char* {
      auto it = env.find(name);
      return it == env.end() ? nullptr : it->second.c_str();
    });
    CHECK(c.seed == 42);
    CHECK(c.out_dir == "/tmp/x");
    CHECK(c.adaptation.epochs == 5);
    CHECK(c.adaptation.learning_rate == 2e-4);
    CHECK(kind_of([&] {
            apply_env_overrides(c, [](const char* n) -> const char* {
              return std::string(n) == "SISDA_SEED" ? "seven" : nullptr;
            });
          }) == ErrorKind::parse);
  }

  TEST_CASE("configs whose context does not fit the model are rejected") {
    ExperimentConfig c = ExperimentConfig::defaults();
    c.validate();
    c.model.max_len = 40;
    CHECK(kind_of([&] { c.validate(); }) == ErrorKind::invalid_config);
    c = ExperimentConfig::defaults();
    c.evaluation.max_output = 5;
    CHECK(kind_of([&] { c.validate(); }) == ErrorKind::invalid_config);
  }

  TEST_CASE("metrics records round-trip without wall-clock time") {
    MetricsRecord r;
    r.method = "si-sda";
    r.split = "target-test";
    r.token_error_rate = 0.125;
    r.error_rate_reduction = 0.5;
    r.seed = 7;
    r.seconds = 12.5;
    const std::string line = r.to_json_line();
    CHECK(line.find("seconds") == std::string::npos);
    const MetricsRecord back = MetricsRecord::from_json_line(line);
    CHECK(back.method == r.method);
    CHECK(back.token_error_rate == r.token_error_rate);
    CHECK(back.error_rate_reduction == r.error_rate_reduction);
    CHECK_FALSE(back.mean_q.has_value());
    CHECK(back.to_json_line() == line);
    CHECK(kind_of([] { MetricsRecord::from_json_line(R"({"method": "x"})"); }) == ErrorKind::parse);
  }

  TEST_CASE("analysis CSV round-trips, including empty token sets") {
    AnalysisSummary s;
    s.rows.push_back({"u1", 3, 1, 0.25, 0.5, 0.3125, 0.25});
    s.rows.push_back({"u2", 4, 0, 0.125, std::nullopt, 0.125, 0.0});
    std::stringstream buf;
    write_analysis_csv(buf, s);
    const auto rows = read_analysis_csv(buf);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].id == "u1");
    CHECK(rows[0].mean_error == 0.5);
    CHECK(rows[1].error_count == 0);
    CHECK_FALSE(rows[1].mean_error.has_value());
    CHECK(rows[1].q == 0.125);
  }

  TEST_CASE("report needs the output dir and keeps the latest record per run") {
    CHECK(kind_of([] { cmd_report("/nonexistent/sisda-report"); }) == ErrorKind::io);
    const auto dir = fresh_dir("sisda-test-report");
    std::ofstream out(dir / "metrics.jsonl");
    auto line = [](std::string method, double ter) {
      MetricsRecord r;
      r.method = std::move(method);
      r.split = "target-test";
      r.token_error_rate = ter;
      r.seed = 1;
      return r.to_json_line();
    };
    out << line("zero-shot", 0.5) << '\n' << line("si-sda", 0.4) << '\n' << line("si-sda", 0.25) << '\n';
    out.close();
    const auto rows = cmd_report(dir);
    REQUIRE(rows.size() == 2);
    CHECK(rows[1].method == "si-sda");
    CHECK(rows[1].token_error_rate == 0.25);
    REQUIRE(rows[1].error_rate_reduction.has_value());
    CHECK(*rows[1].error_rate_reduction == doctest::Approx(0.5));
    CHECK(std::filesystem::exists(dir / "report.txt"));
    CHECK(std::filesystem::exists(dir / "report.csv"));
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("generate writes all four splits with the configured sizes") {
    ExperimentConfig c = ExperimentConfig::defaults();
    c.out_dir = fresh_dir("sisda-test-generate");
    c.splits = {12, 5, 4, 3};
    const GenerateSummary s = cmd_generate(c);
    CHECK(s.counts.at("source-train") == 12);
    CHECK(s.counts.at("source-test") == 3);
    const Vocab v = c.vocab();
    CHECK(load_corpus(c.split_file(Split::target_adapt), v).utterances.size() == 5);
    std::filesystem::remove_all(c.out_dir);
  }
}
