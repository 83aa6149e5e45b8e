#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "sisda/model.hpp"

namespace sisda {

std::size_t edit_distance(std::span<const TokenId> a, std::span<const TokenId> b);

enum class EditOp { match, substitution, insertion, deletion };

// Levenshtein alignment of a hypothesis against a reference, in sequence
// order. insertion = extra hypothesis token, deletion = missing reference
// token. Backtrace ties prefer match > substitution > insertion > deletion.
struct Alignment {
  std::vector<EditOp> ops;
  std::size_t cost = 0;
};

Alignment align(std::span<const TokenId> reference, std::span<const TokenId> hypothesis);

// Levenshtein distance / reference length.
double token_error_rate(std::span<const TokenId> hypothesis, std::span<const TokenId> reference);

// (before - after) / before
double error_rate_reduction(double before, double after);

// Accumulates edits and reference tokens across utterances.
struct ErrorTally {
  std::size_t edits = 0;
  std::size_t reference_tokens = 0;
  std::size_t utterances = 0;

  void add(std::span<const TokenId> hypothesis, std::span<const TokenId> reference);
  double rate() const;
};

struct Correlation {
  double rho = 0.0;
  double p_value = 1.0;  // two-sided, t approximation with n-2 dof
  std::size_t n = 0;
};

// Spearman rank correlation with average ranks for ties.
Correlation spearman(std::span<const double> x, std::span<const double> y);

}  // namespace sisda
