#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "sisda/error.hpp"
#include "sisda/experiment.hpp"

namespace {

// Single-line, machine-parsable failure report on stderr.
int fail(std::string_view kind, const std::string& message) {
  nlohmann::json j = {{"error", kind}, {"message", message}};
  std::cerr << j.dump() << '\n';
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace sisda;
  CLI::App app{"Self-improving domain adaptation on a synthetic transduction benchmark"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::string checkpoint;
  std::string method = "si-sda";

  app.add_option("--config", config_path, "experiment config (JSON); built-in defaults when omitted");
  app.add_option("--seed", seed, "global seed");
  app.add_option("--out", out_dir, "output directory");

  auto* generate = app.add_subcommand("generate", "write the four corpus splits");
  auto* train = app.add_subcommand("train-base", "supervised training on source-train");
  train->add_option("--checkpoint", checkpoint, "resume from this checkpoint (and its .opt file)");
  auto* adapt = app.add_subcommand("adapt", "adapt the base model on target-adapt and evaluate");
  adapt->add_option("--method", method, "zero-shot|self-train|filtering|conf|min-q|dpo|si-sda|sft");
  adapt->add_option("--checkpoint", checkpoint, "model to adapt (default: the base checkpoint)");
  auto* analyze = app.add_subcommand("analyze", "prompt-reliance analysis of a labeled split");
  analyze->add_option("--checkpoint", checkpoint, "model to analyze (default: the base checkpoint)");
  auto* report = app.add_subcommand("report", "aggregate metrics.jsonl into report.txt and report.csv");
  auto* show = app.add_subcommand("show-config", "print the effective config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what());
  }

  try {
    ExperimentConfig config = config_path.empty() ? ExperimentConfig::defaults() : load_experiment_config(config_path);
    apply_env_overrides(config, [](const char* name) { return std::getenv(name); });
    if (seed) config.seed = *seed;
    if (!out_dir.empty()) config.out_dir = out_dir;
    const std::optional<std::filesystem::path> ckpt =
        checkpoint.empty() ? std::nullopt : std::optional<std::filesystem::path>(checkpoint);

    if (*show) {
      std::cout << dump_experiment_config(config);
    } else if (*generate) {
      const auto s = cmd_generate(config);
      for (const auto& [split, n] : s.counts) std::cout << split << '\t' << n << '\n';
    } else if (*train) {
      const auto s = cmd_train_base(config, ckpt);
      for (std::size_t e = 0; e < s.epoch_losses.size(); ++e) {
        std::cout << "epoch " << e + 1 << " loss " << s.epoch_losses[e] << '\n';
      }
      std::cout << "source-test TER " << s.source_test_error << "\ntarget-test TER " << s.target_test_error
                << "\ncheckpoint " << s.checkpoint.string() << '\n';
    } else if (*adapt) {
      const auto s = cmd_adapt(config, parse_method(method), ckpt);
      for (const auto& w : s.warnings) std::cerr << "warning: " << w << '\n';
      for (const auto& e : s.epochs) {
        std::cout << "epoch " << e.epoch + 1 << " mean_q " << e.mean_q << " loss " << e.mean_loss << " steps "
                  << e.steps << " skipped " << e.skipped << " failed " << e.failed << '\n';
      }
      std::cout << method << " target-test TER " << s.target_test_error << " source-test TER "
                << s.source_test_error;
      if (s.error_rate_reduction) std::cout << " WERR " << *s.error_rate_reduction;
      std::cout << '\n';
    } else if (*analyze) {
      const auto s = cmd_analyze(config, ckpt);
      std::cout << "utterances " << s.rows.size() << " with both sets " << s.both_nonempty << '\n'
                << "mean R_C " << s.mean_correct << " mean R_E " << s.mean_error << " normalized R_E share "
                << s.share_error << '\n'
                << "spearman(Q, TER) " << s.q_vs_error.rho << " p " << s.q_vs_error.p_value << '\n'
                << "csv " << s.csv.string() << '\n';
    } else if (*report) {
      cmd_report(config.out_dir);
      std::ifstream txt(config.out_dir / "report.txt");
      std::cout << txt.rdbuf();
    }
  } catch (const Error& e) {
    return fail(error_kind_name(e.kind()), e.what());
  } catch (const std::exception& e) {
    return fail("internal", e.what());
  }
  return 0;
}
