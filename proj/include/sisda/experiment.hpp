#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sisda/adaptation.hpp"
#include "sisda/corpus.hpp"
#include "sisda/metrics.hpp"
#include "sisda/model.hpp"

namespace sisda {

struct SplitSizes {
  std::size_t source_train = 2000;
  std::size_t target_adapt = 500;
  std::size_t target_test = 300;
  std::size_t source_test = 300;

  std::size_t count(Split s) const;
};

struct BaseTrainingConfig {
  double learning_rate = 3e-3;
  std::size_t epochs = 12;
  std::size_t batch_size = 8;
};

struct EvaluationConfig {
  std::size_t beam_size = 1;
  std::size_t max_output = 11;
  bool mean_q = true;  // also score the top-1 hypotheses with Q
};

struct AnalysisConfig {
  Split split = Split::target_test;
  std::size_t max_utterances = 0;  // 0: the whole split
  bool dump_saliency = false;
};

// Everything one experiment needs. Empty data/checkpoint dirs default to
// subdirectories of out_dir.
struct ExperimentConfig {
  std::uint64_t seed = 7;
  std::filesystem::path out_dir = "runs/default";
  std::filesystem::path data_dir;
  std::filesystem::path checkpoint_dir;
  TaskConfig task;
  ModelConfig model;  // vocab_size is derived from the task
  DomainSpec source;
  DomainSpec target;
  SplitSizes splits;
  BaseTrainingConfig base;
  TrainConfig adaptation;
  EvaluationConfig evaluation;
  AnalysisConfig analysis;

  static ExperimentConfig defaults();

  void validate() const;
  std::filesystem::path data_path() const;
  std::filesystem::path checkpoint_path() const;
  std::filesystem::path split_file(Split s) const;
  std::filesystem::path base_checkpoint() const;
  ModelConfig model_config() const;
  ContextSpec context() const;
  Vocab vocab() const;

  // Per-component seeds derived from `seed`.
  std::uint64_t component_seed(const std::string& component) const;
};

// JSON text. Unknown keys are rejected so typos do not silently fall back to
// defaults; absent keys keep their defaults.
ExperimentConfig parse_experiment_config(const std::string& text);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
std::string dump_experiment_config(const ExperimentConfig& config);

// Applies SISDA_SEED, SISDA_OUT_DIR, SISDA_DATA_DIR, SISDA_CHECKPOINT_DIR,
// SISDA_ADAPT_EPOCHS, SISDA_BASE_EPOCHS and SISDA_LEARNING_RATE.
void apply_env_overrides(ExperimentConfig& config,
                         const std::function<const char*(const char*)>& lookup);

// One line of metrics.jsonl. Wall-clock time goes to timings.jsonl instead,
// so identical runs produce identical metrics files.
struct MetricsRecord {
  std::string method;
  std::string split;
  double token_error_rate = 0.0;
  std::optional<double> error_rate_reduction;  // vs zero-shot on the same split
  std::optional<double> mean_q;
  std::uint64_t seed = 0;
  double seconds = 0.0;  // not serialized into metrics.jsonl

  std::string to_json_line() const;
  static MetricsRecord from_json_line(const std::string& line);
};

std::vector<MetricsRecord> read_metrics(const std::filesystem::path& path);

// ---- commands ----

struct GenerateSummary {
  std::map<std::string, std::size_t> counts;  // split name -> utterances
};

GenerateSummary cmd_generate(const ExperimentConfig& config);

struct TrainBaseSummary {
  std::vector<double> epoch_losses;
  double source_test_error = 0.0;
  double target_test_error = 0.0;
  std::filesystem::path checkpoint;
};

// Starts from initialization, or continues from `resume` (a checkpoint with
// its optimizer state) for config.base.epochs more epochs.
TrainBaseSummary cmd_train_base(const ExperimentConfig& config,
                                const std::optional<std::filesystem::path>& resume = std::nullopt);

struct AdaptSummary {
  Method method = Method::zero_shot;
  double target_test_error = 0.0;
  double source_test_error = 0.0;
  std::optional<double> error_rate_reduction;
  std::vector<EpochMetrics> epochs;
  std::vector<std::string> warnings;
  std::filesystem::path checkpoint;
};

AdaptSummary cmd_adapt(const ExperimentConfig& config, Method method,
                       const std::optional<std::filesystem::path>& checkpoint = std::nullopt);

struct UtteranceAnalysis {
  std::string id;
  std::size_t correct_count = 0;
  std::size_t error_count = 0;
  std::optional<double> mean_correct;
  std::optional<double> mean_error;
  double q = 0.0;
  double token_error_rate = 0.0;
};

struct AnalysisSummary {
  std::vector<UtteranceAnalysis> rows;
  std::size_t both_nonempty = 0;
  double mean_correct = 0.0;  // over utterances with both sets nonempty
  double mean_error = 0.0;
  double share_error = 0.0;   // mean_error / (mean_correct + mean_error)
  Correlation q_vs_error;
  std::filesystem::path csv;
};

// Decodes the analysis split, teacher-forces each top-1 hypothesis for
// saliency, and relates prompt reliance to token correctness.
AnalysisSummary analyze_reliance(const ModelParams& params, std::span<const Utterance> corpus,
                                 const ContextSpec& spec, const EvaluationConfig& eval,
                                 const SaliencyOptions& saliency, std::ostream* saliency_dump = nullptr);

AnalysisSummary cmd_analyze(const ExperimentConfig& config,
                            const std::optional<std::filesystem::path>& checkpoint = std::nullopt);

void write_analysis_csv(std::ostream& out, const AnalysisSummary& summary);
std::vector<UtteranceAnalysis> read_analysis_csv(std::istream& in);

struct ReportRow {
  std::string method;
  std::string split;
  std::uint64_t seed = 0;
  double token_error_rate = 0.0;
  std::optional<double> error_rate_reduction;
  std::optional<double> mean_q;
};

// Aggregates out_dir/metrics.jsonl into report.txt and report.csv.
std::vector<ReportRow> cmd_report(const std::filesystem::path& out_dir);

}  // namespace sisda
