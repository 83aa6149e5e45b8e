#include <functional>
#include <sstream>

#include "checks.hpp"
#include "doctest.h"
#include "json.hpp"
#include "sisda/error.hpp"
#include "sisda/metrics.hpp"
#include "sisda/saliency.hpp"

using namespace sisda;

namespace {

SaliencyMatrix five_by_five() {
  SaliencyMatrix s;
  s.layout = {{0, 2}, {2, 3}, {3, 5}};
  s.values = Tensor::zeros({5, 5});
  // row 2 predicts output position 0, row 3 predicts output position 1
  const double r2[] = {1, 3, 4, 0, 0};
  const double r3[] = {2, 0, 1, 5, 0};
  for (std::size_t j = 0; j < 5; ++j) {
    s.values(2, j) = r2[j];
    s.values(3, j) = r3[j];
    s.values(4, j) = 100.0;
  }
  return s;
}

// Minimum alignment cost by enumerating every alignment path.
std::size_t min_alignment_cost(std::span<const TokenId> ref, std::span<const TokenId> hyp) {
  std::function<std::size_t(std::size_t, std::size_t)> go = [&](std::size_t i, std::size_t j) -> std::size_t {
    if (i == ref.size() && j == hyp.size()) return 0;
    std::size_t best = static_cast<std::size_t>(-1);
    if (i < ref.size() && j < hyp.size()) best = std::min(best, go(i + 1, j + 1) + (ref[i] == hyp[j] ? 0 : 1));
    if (j < hyp.size()) best = std::min(best, go(i, j + 1) + 1);
    if (i < ref.size()) best = std::min(best, go(i + 1, j) + 1);
    return best;
  };
  return go(0, 0);
}

std::vector<TokenSeq> all_strings(std::size_t max_len, TokenId alphabet) {
  std::vector<TokenSeq> out = {{}};
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i].size() == max_len) continue;
    for (TokenId t = 0; t < alphabet; ++t) {
      TokenSeq s = out[i];
      s.push_back(t);
      out.push_back(std::move(s));
    }
  }
  return out;
}

}  // namespace

TEST_SUITE("saliency") {
  TEST_CASE("saliency matches hand-computed fixtures and finite-differenced attention gradients") {
    const auto o = checks::saliency_algebra();
    INFO(o.detail);
    CHECK(o.pass);
  }

  TEST_CASE("reliance and quality stay in [0,1], advantages are shift-invariant, equal Q freezes parameters") {
    const auto o = checks::score_invariants();
    INFO(o.detail);
    CHECK(o.pass);
  }

  TEST_CASE("prompt reliance reads the row that predicts each output token") {
    const PromptRelianceProfile p = prompt_reliance(five_by_five());
    REQUIRE(p.size() == 2);
    CHECK(p.rows == std::vector<std::size_t>{2, 3});
    CHECK(p.reliance[0] == 0.5);
    CHECK(p.reliance[1] == 0.25);
    CHECK(p.prompt_mass[0] == 4.0);
    CHECK_FALSE(p.any_degenerate());
  }

  TEST_CASE("an all-zero row is flagged degenerate with zero reliance") {
    SaliencyMatrix s = five_by_five();
    for (std::size_t j = 0; j < 5; ++j) s.values(3, j) = 0.0;
    const PromptRelianceProfile p = prompt_reliance(s);
    CHECK(p.reliance[1] == 0.0);
    CHECK(p.degenerate[1]);
    CHECK_FALSE(p.degenerate[0]);
  }

  TEST_CASE("an empty prompt or output span is rejected") {
    SaliencyMatrix s = five_by_five();
    s.layout.prompt = {0, 0};
    CHECK_THROWS_AS(prompt_reliance(s), Error);
    s = five_by_five();
    s.layout.output = {5, 5};
    CHECK_THROWS_AS(prompt_reliance(s), Error);
  }

  TEST_CASE("compute_saliency reports a missing gradient as a state error") {
    const std::vector<AttentionRecord> recs = {{0, 0, Tensor::matrix(2, 2, {1, 0, 0.5, 0.5}), std::nullopt}};
    try {
      compute_saliency(recs, {{0, 1}, {1, 1}, {1, 2}});
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::state);
    }
  }

  TEST_CASE("alignment is optimal against exhaustive enumeration and classification covers every token") {
    const auto strings = all_strings(4, 2);
    for (const auto& ref : strings) {
      for (const auto& hyp : strings) {
        const Alignment a = align(ref, hyp);
        REQUIRE(a.cost == min_alignment_cost(ref, hyp));
        std::size_t i = 0, j = 0, cost = 0, matches = 0;
        for (EditOp op : a.ops) {
          switch (op) {
            case EditOp::match: REQUIRE(ref[i] == hyp[j]); ++i, ++j, ++matches; break;
            case EditOp::substitution: REQUIRE(ref[i] != hyp[j]); ++i, ++j, ++cost; break;
            case EditOp::insertion: ++j, ++cost; break;
            case EditOp::deletion: ++i, ++cost; break;
          }
        }
        REQUIRE(i == ref.size());
        REQUIRE(j == hyp.size());
        REQUIRE(cost == a.cost);
        const TokenOutcomeSets sets = classify_tokens(hyp, ref);
        REQUIRE(sets.correct.size() == matches);
        REQUIRE(sets.correct.size() + sets.error.size() == hyp.size());
        for (std::size_t k : sets.correct) REQUIRE(std::find(sets.error.begin(), sets.error.end(), k) == sets.error.end());
      }
    }
  }

  TEST_CASE("reliance summary averages over each set and leaves empty sets unset") {
    PromptRelianceProfile p;
    p.reliance = {0.1, 0.5, 0.3, 0.9};
    const RelianceSummary s = reliance_summary(p, {{0, 2}, {1, 3}});
    CHECK(*s.mean_correct == doctest::Approx(0.2));
    CHECK(*s.mean_error == doctest::Approx(0.7));
    const RelianceSummary none = reliance_summary(p, {{0, 1, 2, 3}, {}});
    CHECK_FALSE(none.mean_error.has_value());
    CHECK(normalized_pair(1.0, 3.0) == std::make_pair(0.25, 0.75));
    CHECK(normalized_pair(0.0, 0.0) == std::make_pair(0.5, 0.5));
  }

  TEST_CASE("threshold filter keeps hypotheses with Q at most tau, in order") {
    std::vector<Hypothesis> hs(4);
    const double q[] = {0.2, 0.6, 0.4, 0.4000001};
    for (std::size_t i = 0; i < 4; ++i) {
      hs[i].tokens = {static_cast<TokenId>(i)};
      hs[i].quality = q[i];
    }
    const auto kept = threshold_filter(hs, 0.4);
    REQUIRE(kept.size() == 2);
    CHECK(kept[0].tokens[0] == 0);
    CHECK(kept[1].tokens[0] == 2);
    CHECK(threshold_filter(hs, 1.0).size() == 4);
    hs[1].quality.reset();
    CHECK_THROWS_AS(threshold_filter(hs, 0.5), Error);
    CHECK_THROWS_AS(threshold_filter({}, 1.5), Error);
  }

  TEST_CASE("Q of a hypothesis is the mean reliance over its emitted tokens") {
    const Vocab vocab = task_vocab(checks::tiny_task(4, 5));
    const ContextSpec spec = default_context(vocab, 5);
    const ModelParams params = init_params(checks::tiny_model(vocab.size(), 8, 2, 16), 3);
    Hypothesis h;
    h.tokens = checks::random_symbols(vocab, 4, 9);
    h.finished = true;
    const QualityScore s = hypothesis_quality(params, checks::random_symbols(vocab, 5, 8), h, spec);
    REQUIRE(s.length == 4);
    double sum = 0.0;
    for (double r : s.profile.reliance) sum += r;
    CHECK(s.q == doctest::Approx(sum / 4.0).epsilon(1e-15));

    SaliencyOptions bad;
    bad.layer = 2;
    try {
      hypothesis_quality(params, checks::random_symbols(vocab, 5, 8), h, spec, bad);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::invalid_config);
    }
    h.tokens.clear();
    CHECK_THROWS_AS(hypothesis_quality(params, checks::random_symbols(vocab, 5, 8), h, spec), Error);
  }

  TEST_CASE("saliency records are one JSON object per line") {
    QualityScore s;
    s.q = 0.25;
    s.profile.reliance = {0.5, 0.0};
    std::ostringstream out;
    SaliencyOptions mean;
    mean.mean_over_layers = true;
    write_saliency_record(out, "u1", {}, 1, s);
    write_saliency_record(out, "u2", mean, 1, s);
    std::istringstream in(out.str());
    std::string line;
    std::getline(in, line);
    const auto a = nlohmann::json::parse(line);
    CHECK(a["id"] == "u1");
    CHECK(a["layer"] == 1);
    CHECK(a["Q"] == 0.25);
    CHECK(a["R"].size() == 2);
    std::getline(in, line);
    CHECK(nlohmann::json::parse(line)["layer"] == "mean");
  }
}
