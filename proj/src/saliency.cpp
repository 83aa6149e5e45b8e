#include "sisda/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>

#include "json.hpp"
#include "sisda/error.hpp"
#include "sisda/metrics.hpp"

namespace sisda {

SaliencyMatrix compute_saliency(std::span<const AttentionRecord> records, const SequenceLayout& layout) {
  if (records.empty()) throw Error(ErrorKind::invalid_argument, "compute_saliency: no attention records");
  const std::size_t layer = records.front().layer;
  const auto& shape = records.front().probs.shape();
  Tensor acc = Tensor::zeros(shape);
  for (const auto& r : records) {
    if (r.layer != layer) {
      throw Error(ErrorKind::shape_mismatch, "compute_saliency: records span layers " +
                                                 std::to_string(layer) + " and " + std::to_string(r.layer));
    }
    if (!r.grad) {
      throw Error(ErrorKind::state, "compute_saliency: missing gradient for layer " + std::to_string(r.layer) +
                                        " head " + std::to_string(r.head));
    }
    if (r.probs.shape() != shape || r.grad->shape() != shape) {
      throw Error(ErrorKind::shape_mismatch, "compute_saliency: expected " + shape_string(shape) + ", got " +
                                                 shape_string(r.probs.shape()) + " / " +
                                                 shape_string(r.grad->shape()));
    }
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += r.probs[i] * (*r.grad)[i];
  }
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] = std::abs(acc[i]);
  if (acc.rank() == 2 && acc.rows() != layout.total()) {
    throw Error(ErrorKind::shape_mismatch, "compute_saliency: layout covers " + std::to_string(layout.total()) +
                                               " positions, attention has " + std::to_string(acc.rows()));
  }
  return {layer, std::move(acc), layout};
}

SaliencyMatrix compute_mean_saliency(std::span<const AttentionRecord> records, const SequenceLayout& layout) {
  std::map<std::size_t, std::vector<AttentionRecord>> by_layer;
  for (const auto& r : records) by_layer[r.layer].push_back(r);
  if (by_layer.empty()) throw Error(ErrorKind::invalid_argument, "compute_mean_saliency: no attention records");
  SaliencyMatrix out;
  out.layout = layout;
  for (const auto& [layer, recs] : by_layer) {
    SaliencyMatrix s = compute_saliency(recs, layout);
    if (out.values.size() == 0) {
      out.values = std::move(s.values);
    } else {
      if (s.values.shape() != out.values.shape()) throw Error(ErrorKind::shape_mismatch, "compute_mean_saliency: layer shapes differ");
      for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += s.values[i];
    }
  }
  const double inv = 1.0 / static_cast<double>(by_layer.size());
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] *= inv;
  return out;
}

bool PromptRelianceProfile::any_degenerate() const {
  return std::any_of(degenerate.begin(), degenerate.end(), [](bool b) { return b; });
}

PromptRelianceProfile prompt_reliance(const SaliencyMatrix& sal) {
  const SequenceLayout& lay = sal.layout;
  if (lay.prompt.empty()) throw Error(ErrorKind::invalid_argument, "prompt_reliance: empty prompt span");
  if (lay.output.empty()) throw Error(ErrorKind::invalid_argument, "prompt_reliance: empty output span");
  if (lay.output.begin == 0) throw Error(ErrorKind::invalid_argument, "prompt_reliance: output span starts at 0");
  if (!sal.values.is_matrix() || sal.values.rows() < lay.output.end - 1 || sal.values.cols() < lay.prompt.end) {
    throw Error(ErrorKind::shape_mismatch, "prompt_reliance: saliency " + shape_string(sal.values.shape()) +
                                               " does not cover the layout");
  }
  PromptRelianceProfile p;
  for (std::size_t pos = lay.output.begin; pos < lay.output.end; ++pos) {
    const std::size_t row = pos - 1;
    const auto r = sal.values.row(row);
    double prompt = 0.0, total = 0.0;
    for (std::size_t j = 0; j < r.size(); ++j) {
      total += r[j];
      if (lay.prompt.contains(j)) prompt += r[j];
    }
    p.rows.push_back(row);
    p.prompt_mass.push_back(prompt);
    if (total > 0.0) {
      p.reliance.push_back(std::clamp(prompt / total, 0.0, 1.0));
      p.degenerate.push_back(false);
    } else {
      p.reliance.push_back(0.0);
      p.degenerate.push_back(true);
    }
  }
  return p;
}

TokenOutcomeSets classify_tokens(std::span<const TokenId> hypothesis, std::span<const TokenId> reference) {
  TokenOutcomeSets sets;
  const Alignment a = align(reference, hypothesis);
  std::size_t j = 0;
  for (EditOp op : a.ops) {
    switch (op) {
      case EditOp::match: sets.correct.push_back(j++); break;
      case EditOp::substitution:
      case EditOp::insertion: sets.error.push_back(j++); break;
      case EditOp::deletion: break;
    }
  }
  return sets;
}

RelianceSummary reliance_summary(const PromptRelianceProfile& profile, const TokenOutcomeSets& sets) {
  auto mean_over = [&](const std::vector<std::size_t>& idx) -> std::optional<double> {
    if (idx.empty()) return std::nullopt;
    double s = 0.0;
    for (std::size_t i : idx) {
      if (i >= profile.size()) {
        throw Error(ErrorKind::invalid_argument, "reliance_summary: position " + std::to_string(i) +
                                                     " outside profile of " + std::to_string(profile.size()));
      }
      s += profile.reliance[i];
    }
    return s / static_cast<double>(idx.size());
  };
  RelianceSummary out;
  out.mean_correct = mean_over(sets.correct);
  out.mean_error = mean_over(sets.error);
  out.correct_count = sets.correct.size();
  out.error_count = sets.error.size();
  return out;
}

std::pair<double, double> normalized_pair(double a, double b) {
  const double s = a + b;
  if (s <= 0.0) return {0.5, 0.5};
  return {a / s, b / s};
}

QualityScore hypothesis_quality(const ModelParams& params, std::span<const TokenId> input,
                                const Hypothesis& hypothesis, const ContextSpec& spec,
                                const SaliencyOptions& options) {
  if (hypothesis.tokens.empty()) throw Error(ErrorKind::invalid_argument, "hypothesis_quality: empty hypothesis");
  const std::size_t layers = params.config.layers;
  const std::size_t layer = options.layer.value_or(layers - 1);
  if (layer >= layers) {
    throw Error(ErrorKind::invalid_config, "saliency layer " + std::to_string(layer) + " but model has " +
                                               std::to_string(layers) + " layers");
  }
  const TokenSeq output = hypothesis.scored_tokens(spec.eos);
  const Context ctx = build_context(spec, input, output);
  LossTape tape = nll_loss(params, ctx.tokens, ctx.layout, Trainable::none);
  tape.graph.backward(tape.loss);

  SaliencyMatrix sal;
  if (options.mean_over_layers) {
    sal = compute_mean_saliency(collect_attention(tape.graph, tape.sequence), ctx.layout);
  } else {
    sal = compute_saliency(collect_attention(tape.graph, tape.sequence, layer), ctx.layout);
  }
  PromptRelianceProfile profile = prompt_reliance(sal);
  // Drop the EOS step; Q averages over the T emitted tokens only.
  const std::size_t t = hypothesis.tokens.size();
  profile.rows.resize(t);
  profile.prompt_mass.resize(t);
  profile.reliance.resize(t);
  profile.degenerate.resize(t);

  QualityScore score;
  score.length = t;
  double s = 0.0;
  for (double r : profile.reliance) s += r;
  score.q = s / static_cast<double>(t);
  score.profile = std::move(profile);
  return score;
}

std::vector<Hypothesis> threshold_filter(std::span<const Hypothesis> scored, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw Error(ErrorKind::invalid_argument, "threshold_filter: tau must be in [0,1]");
  std::vector<Hypothesis> kept;
  for (const auto& h : scored) {
    if (!h.quality) throw Error(ErrorKind::invalid_argument, "threshold_filter: hypothesis without quality");
    if (*h.quality <= tau) kept.push_back(h);
  }
  return kept;
}

void write_saliency_record(std::ostream& out, const std::string& id, const SaliencyOptions& options,
                           std::size_t resolved_layer, const QualityScore& score) {
  nlohmann::json j;
  j["id"] = id;
  if (options.mean_over_layers) {
    j["layer"] = "mean";
  } else {
    j["layer"] = resolved_layer;
  }
  j["R"] = score.profile.reliance;
  j["Q"] = score.q;
  out << j.dump() << '\n';
}

}  // namespace sisda
