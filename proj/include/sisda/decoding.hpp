#pragma once

#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sisda/model.hpp"

namespace sisda {

// A decoded output. `tokens` excludes EOS; when `finished`, token_logprobs
// carries one extra trailing entry for the EOS step, so total_logprob is
// always the sum of token_logprobs.
struct Hypothesis {
  TokenSeq tokens;
  std::vector<double> token_logprobs;
  double total_logprob = 0.0;
  bool finished = false;
  std::optional<double> quality;

  std::size_t length() const noexcept { return tokens.size(); }
  // Output-region tokens as scored: tokens plus EOS when finished.
  TokenSeq scored_tokens(TokenId eos) const;
  // Probability of each emitted (non-EOS) token at its decoding step.
  std::vector<double> confidences() const;
};

struct BeamSet {
  std::string utterance_id;
  std::vector<Hypothesis> hypotheses;  // descending total_logprob
  std::size_t beam_size = 0;
};

// Ordering used everywhere: higher log-probability first, then
// lexicographically smaller token sequence.
bool ranks_before(const Hypothesis& a, const Hypothesis& b);

// Tokens the decoder may emit: everything except PAD and prompt tokens.
std::vector<TokenId> emittable_tokens(const ModelConfig& config, const ContextSpec& spec);

// Length-unnormalized beam search. Candidates from all live beams compete for
// `beam_size` slots each step; EOS candidates retire as finished. Beams still
// live after `max_len` steps are returned unfinished.
BeamSet beam_search(const ModelParams& params, std::span<const TokenId> input,
                    const ContextSpec& spec, std::size_t beam_size, std::size_t max_len);

Hypothesis greedy_decode(const ModelParams& params, std::span<const TokenId> input,
                         const ContextSpec& spec, std::size_t max_len);

BeamSet dedupe_and_truncate(BeamSet beams, std::size_t keep, bool dedupe);

// One line per hypothesis: utt-id TAB rank TAB total-logprob TAB Q TAB finished TAB tokens
void write_nbest(std::ostream& out, const BeamSet& beams, const Vocab& vocab);

}  // namespace sisda
