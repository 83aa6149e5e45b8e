#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sisda/decoding.hpp"
#include "sisda/model.hpp"
#include "sisda/tensor.hpp"

namespace sisda {

// I = |sum_h A_h * dL/dA_h| for one layer, or the mean of that over layers.
struct SaliencyMatrix {
  std::optional<std::size_t> layer;  // empty when averaged over layers
  Tensor values;                     // T_ctx x T_ctx
  SequenceLayout layout;
};

SaliencyMatrix compute_saliency(std::span<const AttentionRecord> records, const SequenceLayout& layout);

// Per-layer saliency averaged over every layer present in `records`.
SaliencyMatrix compute_mean_saliency(std::span<const AttentionRecord> records, const SequenceLayout& layout);

// Output position k (0-based within the output span) is the token at
// layout.output.begin + k; its decoding step is the query row that predicts
// it, row layout.output.begin + k - 1.
struct PromptRelianceProfile {
  std::vector<std::size_t> rows;  // query row per output position
  std::vector<double> prompt_mass;
  std::vector<double> reliance;
  std::vector<bool> degenerate;  // row had zero total saliency; reliance set to 0

  std::size_t size() const noexcept { return reliance.size(); }
  bool any_degenerate() const;
};

PromptRelianceProfile prompt_reliance(const SaliencyMatrix& sal);

// Hypothesis positions (0-based) aligned as matches vs substitutions/insertions.
struct TokenOutcomeSets {
  std::vector<std::size_t> correct;
  std::vector<std::size_t> error;
};

TokenOutcomeSets classify_tokens(std::span<const TokenId> hypothesis, std::span<const TokenId> reference);

struct RelianceSummary {
  std::optional<double> mean_correct;
  std::optional<double> mean_error;
  std::size_t correct_count = 0;
  std::size_t error_count = 0;
};

RelianceSummary reliance_summary(const PromptRelianceProfile& profile, const TokenOutcomeSets& sets);

// (a, b) rescaled to sum to one; (0.5, 0.5) when both are zero.
std::pair<double, double> normalized_pair(double a, double b);

struct SaliencyOptions {
  std::optional<std::size_t> layer;  // default: last layer
  bool mean_over_layers = false;
};

struct QualityScore {
  double q = 0.0;
  std::size_t length = 0;  // T
  PromptRelianceProfile profile;  // over the T hypothesis tokens
};

// Teacher-forces prompt + input + hypothesis (plus EOS when finished), takes
// the self-NLL as the loss, and averages R over the T hypothesis tokens.
QualityScore hypothesis_quality(const ModelParams& params, std::span<const TokenId> input,
                                const Hypothesis& hypothesis, const ContextSpec& spec,
                                const SaliencyOptions& options = {});

// Keeps hypotheses with Q <= tau, in order. Every hypothesis must carry a quality.
std::vector<Hypothesis> threshold_filter(std::span<const Hypothesis> scored, double tau);

// One JSON object per line: {"id", "layer", "R", "Q"}; layer is "mean" when averaged.
void write_saliency_record(std::ostream& out, const std::string& id, const SaliencyOptions& options,
                           std::size_t resolved_layer, const QualityScore& score);

}  // namespace sisda
