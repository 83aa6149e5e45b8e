#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sisda/corpus.hpp"
#include "sisda/decoding.hpp"
#include "sisda/graph.hpp"
#include "sisda/model.hpp"
#include "sisda/optimizer.hpp"
#include "sisda/saliency.hpp"

namespace sisda {

// ---- advantages and policy-gradient loss ----

struct AdvantageSet {
  std::vector<double> rewards;     // Q per hypothesis
  std::vector<double> advantages;  // -(Q - mean Q)
  double baseline = 0.0;           // mean Q
};

// A[n] = (sum_m (Q[m] - Q[n])) / N. Summing pairwise differences keeps the
// result bit-identical under any shift that is exact in floating point.
AdvantageSet compute_advantages(std::span<const double> rewards);

// -sum_n A[n] * logP[n], with the advantages held constant.
Var rl_loss(Graph& graph, const AdvantageSet& advantages, std::span<const Var> logprobs);
double rl_loss(const AdvantageSet& advantages, std::span<const double> logprobs);

// -log sigmoid(beta * ((c - c_ref) - (r - r_ref)))
Var dpo_loss(Graph& graph, Var chosen, Var rejected, double chosen_ref, double rejected_ref, double beta);

// ---- training configuration ----

enum class Method { zero_shot, self_train, filtering, conf, min_q, dpo, si_sda, sft };

std::string method_name(Method m);
Method parse_method(const std::string& name);
bool is_unsupervised(Method m);

struct AdapterConfig {
  std::size_t rank = 4;
  double scaling = 1.0;
};

struct TrainConfig {
  Method method = Method::si_sda;
  double learning_rate = 1e-3;
  std::size_t epochs = 1;
  std::size_t batch_size = 1;  // utterances per optimizer step for cross-entropy methods
  std::size_t beam_size = 10;
  std::size_t keep = 5;
  bool dedupe = true;
  std::size_t max_output = 11;  // decoding budget in output tokens
  SaliencyOptions saliency;
  double tau = 1.0;
  std::optional<AdapterConfig> adapter;
  std::uint64_t seed = 0;
  double dpo_beta = 0.1;
  double filter_fraction = 0.2;
  double grad_clip = 0.0;
  bool shuffle = true;

  void validate() const;
};

// ---- results ----

struct EpochMetrics {
  std::size_t epoch = 0;
  double mean_q = 0.0;     // over scored hypotheses; 0 when nothing was scored
  double mean_loss = 0.0;  // over optimizer steps
  std::size_t steps = 0;
  std::size_t skipped = 0;  // utterances with nothing to learn from (e.g. all A = 0)
  std::size_t failed = 0;   // utterances that raised and were skipped
};

struct TraceRecord {
  std::size_t epoch = 0;
  std::string utterance_id;
  std::string method;
  std::optional<double> mean_q;
  double loss = 0.0;
  bool stepped = false;
};

struct AdaptResult {
  ModelParams params;
  std::vector<EpochMetrics> epochs;
  std::vector<TraceRecord> trace;
  std::vector<std::string> warnings;
};

using EpochCallback = std::function<void(std::size_t epoch, const ModelParams& params)>;

// ---- supervised cross-entropy ----

struct SupervisedExample {
  std::string id;
  TokenSeq input;
  TokenSeq target;              // EOS is appended during training
  std::vector<double> weights;  // per target token incl. EOS; empty means all ones
};

// Weighted per-token cross-entropy averaged over the output span:
// -(1/|Y|) sum_i w_i log p(y_i).
Var weighted_nll(Graph& graph, const SequenceTape& tape, std::span<const double> weights);

// Optimizer state that must survive a pause so a resumed run continues the
// same trajectory.
struct TrainingState {
  ModelParams params;
  Adam optimizer;
  std::size_t epochs_done = 0;
};

TrainingState start_training(const ModelParams& params, const AdamConfig& adam);

// Runs `epochs` more epochs of cross-entropy on base parameters. Returns the
// mean loss of each epoch.
std::vector<double> train_supervised(TrainingState& state, std::span<const SupervisedExample> examples,
                                     const ContextSpec& spec, std::size_t epochs, std::size_t batch_size,
                                     std::uint64_t seed, bool shuffle = true,
                                     const EpochCallback& on_epoch = {});

void save_training_state(const std::filesystem::path& path, const TrainingState& state);
TrainingState load_training_state(const std::filesystem::path& path);

// ---- adaptation methods ----
// Unsupervised methods take the unlabeled view only; references are not
// reachable from their arguments.

AdaptResult adapt_si_sda(const ModelParams& params, std::span<const UnlabeledUtterance> corpus,
                         const ContextSpec& spec, const TrainConfig& config, const EpochCallback& on_epoch = {});
AdaptResult baseline_self_train(const ModelParams& params, std::span<const UnlabeledUtterance> corpus,
                                const ContextSpec& spec, const TrainConfig& config,
                                const EpochCallback& on_epoch = {});
AdaptResult baseline_filtering(const ModelParams& params, std::span<const UnlabeledUtterance> corpus,
                               const ContextSpec& spec, const TrainConfig& config,
                               const EpochCallback& on_epoch = {});
AdaptResult baseline_conf(const ModelParams& params, std::span<const UnlabeledUtterance> corpus,
                          const ContextSpec& spec, const TrainConfig& config, const EpochCallback& on_epoch = {});
AdaptResult baseline_min_q(const ModelParams& params, std::span<const UnlabeledUtterance> corpus,
                           const ContextSpec& spec, const TrainConfig& config, const EpochCallback& on_epoch = {});
AdaptResult baseline_dpo(const ModelParams& params, std::span<const UnlabeledUtterance> corpus,
                         const ContextSpec& spec, const TrainConfig& config, const EpochCallback& on_epoch = {});
AdaptResult baseline_sft(const ModelParams& params, std::span<const Utterance> labeled, const ContextSpec& spec,
                         const TrainConfig& config, const EpochCallback& on_epoch = {});

// Dispatch for every method except sft (which needs labels).
AdaptResult adapt_unsupervised(const ModelParams& params, std::span<const UnlabeledUtterance> corpus,
                               const ContextSpec& spec, const TrainConfig& config,
                               const EpochCallback& on_epoch = {});

// ---- pieces shared by the baselines, exposed for testing ----

// Mean pairwise edit distance among the hypotheses; 0 for fewer than two.
double beam_diversity(std::span<const Hypothesis> hypotheses);

// Ids dropped by the filtering baseline: floor(fraction * n) utterances with
// the highest diversity, ties broken by ascending id.
std::vector<std::string> filtered_ids(std::span<const std::pair<std::string, double>> diversity, double fraction);

// Index of the lowest-Q hypothesis (ties: earlier rank, i.e. higher log-probability).
std::size_t argmin_quality(std::span<const Hypothesis> hypotheses);
// Index of the highest-Q hypothesis (ties: later rank).
std::size_t argmax_quality(std::span<const Hypothesis> hypotheses);

// Decodes, de-duplicates and scores one utterance's N-best.
std::vector<Hypothesis> scored_nbest(const ModelParams& params, std::span<const TokenId> input,
                                     const ContextSpec& spec, const TrainConfig& config);

// ---- evaluation ----

struct EvalResult {
  double token_error_rate = 0.0;  // corpus-level: total edits / total reference tokens
  std::size_t utterances = 0;
  std::vector<std::string> ids;
  std::vector<Hypothesis> hypotheses;  // top-1 per utterance
  std::vector<double> utterance_error;
};

EvalResult evaluate(const ModelParams& params, std::span<const Utterance> corpus, const ContextSpec& spec,
                    std::size_t beam_size, std::size_t max_output);

}  // namespace sisda
