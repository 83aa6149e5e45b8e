#include "sisda/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <boost/math/distributions/students_t.hpp>

#include "sisda/error.hpp"

namespace sisda {

namespace {

std::vector<std::size_t> distance_table(std::span<const TokenId> ref, std::span<const TokenId> hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::size_t> d((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return d[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t diag = at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      at(i, j) = std::min({diag, at(i - 1, j) + 1, at(i, j - 1) + 1});
    }
  }
  return d;
}

}  // namespace

std::size_t edit_distance(std::span<const TokenId> a, std::span<const TokenId> b) {
  return distance_table(a, b).back();
}

Alignment align(std::span<const TokenId> reference, std::span<const TokenId> hypothesis) {
  const std::size_t m = hypothesis.size();
  const auto d = distance_table(reference, hypothesis);
  auto at = [&](std::size_t i, std::size_t j) { return d[i * (m + 1) + j]; };
  Alignment out;
  out.cost = d.back();
  std::size_t i = reference.size(), j = m;
  while (i > 0 || j > 0) {
    const std::size_t here = at(i, j);
    if (i > 0 && j > 0 && reference[i - 1] == hypothesis[j - 1] && at(i - 1, j - 1) == here) {
      out.ops.push_back(EditOp::match);
      --i, --j;
    } else if (i > 0 && j > 0 && reference[i - 1] != hypothesis[j - 1] && at(i - 1, j - 1) + 1 == here) {
      out.ops.push_back(EditOp::substitution);
      --i, --j;
    } else if (j > 0 && at(i, j - 1) + 1 == here) {
      out.ops.push_back(EditOp::insertion);
      --j;
    } else {
      out.ops.push_back(EditOp::deletion);
      --i;
    }
  }
  std::reverse(out.ops.begin(), out.ops.end());
  return out;
}

double token_error_rate(std::span<const TokenId> hypothesis, std::span<const TokenId> reference) {
  if (reference.empty()) throw Error(ErrorKind::invalid_argument, "token_error_rate: empty reference");
  return static_cast<double>(edit_distance(reference, hypothesis)) /
         static_cast<double>(reference.size());
}

double error_rate_reduction(double before, double after) {
  if (before == 0.0) throw Error(ErrorKind::invalid_argument, "error_rate_reduction: zero baseline");
  if (before < 0.0) throw Error(ErrorKind::invalid_argument, "error_rate_reduction: negative baseline");
  return (before - after) / before;
}

void ErrorTally::add(std::span<const TokenId> hypothesis, std::span<const TokenId> reference) {
  if (reference.empty()) throw Error(ErrorKind::invalid_argument, "ErrorTally: empty reference");
  edits += edit_distance(reference, hypothesis);
  reference_tokens += reference.size();
  ++utterances;
}

double ErrorTally::rate() const {
  return reference_tokens == 0 ? 0.0 : static_cast<double>(edits) / static_cast<double>(reference_tokens);
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

Correlation spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw Error(ErrorKind::invalid_argument, "spearman: length mismatch");
  Correlation c;
  c.n = x.size();
  if (c.n < 3) return c;
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / static_cast<double>(c.n);
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / static_cast<double>(c.n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < c.n; ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return c;
  c.rho = sxy / std::sqrt(sxx * syy);
  const double dof = static_cast<double>(c.n - 2);
  if (std::abs(c.rho) >= 1.0) {
    c.p_value = 0.0;
    return c;
  }
  const double t = c.rho * std::sqrt(dof / (1.0 - c.rho * c.rho));
  boost::math::students_t dist(dof);
  c.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
  return c;
}

}  // namespace sisda
