#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "sisda/corpus.hpp"
#include "sisda/decoding.hpp"
#include "sisda/model.hpp"

// Acceptance checks shared by the unit tests and the acceptance binary.
namespace sisda::checks {

struct Outcome {
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

Outcome gradient_correctness();
Outcome saliency_algebra();
Outcome score_invariants();
Outcome brute_force_oracles();
Outcome single_step_signs();

// The pipeline checks share one trained base model under `work`.
Outcome reliance_reproduction(const std::filesystem::path& work);
Outcome end_to_end_adaptation(const std::filesystem::path& work);
Outcome reproducibility_and_isolation(const std::filesystem::path& work);

// ---- fixtures ----

// Vocab <pad> <bos> <eos> <transcribe> plus `symbols` symbols.
TaskConfig tiny_task(std::size_t symbols, std::size_t max_len);
ModelConfig tiny_model(std::size_t vocab_size, std::size_t dim, std::size_t layers, std::size_t max_len);

// Multiplies every weight by `gain` so output distributions are far from uniform.
ModelParams sharpened(ModelParams params, double gain);

TokenSeq random_symbols(const Vocab& vocab, std::size_t length, std::uint64_t seed);

// Every output the decoder can produce with max_len steps, scored by a
// full forward pass, in ranks_before order.
std::vector<Hypothesis> enumerate_outputs(const ModelParams& params, std::span<const TokenId> input,
                                          const ContextSpec& spec, std::size_t max_len);

// Plain memoized recursion over suffixes.
std::size_t recursive_edit_distance(std::span<const TokenId> a, std::span<const TokenId> b);

}  // namespace sisda::checks
