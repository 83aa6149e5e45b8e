#include <sstream>

#include "checks.hpp"
#include "doctest.h"
#include "sisda/decoding.hpp"
#include "sisda/error.hpp"

using namespace sisda;

namespace {

struct Fixture {
  Vocab vocab = task_vocab(checks::tiny_task(4, 5));
  ContextSpec spec = default_context(vocab, 5);
  ModelParams params = checks::sharpened(init_params(checks::tiny_model(vocab.size(), 8, 2, 24), 21), 2.0);
  TokenSeq input = checks::random_symbols(vocab, 5, 4);
};

}  // namespace

TEST_SUITE("decoding") {
  TEST_CASE("beam search equals exhaustive enumeration and TER equals a recursive edit distance") {
    const auto o = checks::brute_force_oracles();
    INFO(o.detail);
    CHECK(o.pass);
  }

  TEST_CASE("emittable tokens exclude padding and prompt tokens") {
    Fixture f;
    const auto t = emittable_tokens(f.params.config, f.spec);
    CHECK(t.size() == f.vocab.size() - 3);
    CHECK(t.front() == f.vocab.eos());
  }

  TEST_CASE("a beam of one is greedy decoding") {
    Fixture f;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      const TokenSeq input = checks::random_symbols(f.vocab, 1 + seed % 5, seed);
      const Hypothesis g = greedy_decode(f.params, input, f.spec, 6);
      const Hypothesis b = beam_search(f.params, input, f.spec, 1, 6).hypotheses.front();
      CHECK(g.tokens == b.tokens);
      CHECK(g.finished == b.finished);
      CHECK(g.total_logprob == doctest::Approx(b.total_logprob).epsilon(1e-14));
    }
  }

  TEST_CASE("beam hypotheses are ranked and their scores re-score under a full forward pass") {
    Fixture f;
    const BeamSet beams = beam_search(f.params, f.input, f.spec, 6, 6);
    REQUIRE(beams.hypotheses.size() == 6);
    for (std::size_t i = 0; i + 1 < beams.hypotheses.size(); ++i) {
      CHECK(ranks_before(beams.hypotheses[i], beams.hypotheses[i + 1]));
    }
    for (const auto& h : beams.hypotheses) {
      CHECK(h.token_logprobs.size() == h.tokens.size() + (h.finished ? 1 : 0));
      const Context ctx = build_context(f.spec, f.input, h.scored_tokens(f.spec.eos));
      CHECK(sequence_logprob(f.params, ctx.tokens, ctx.layout).total == doctest::Approx(h.total_logprob).epsilon(1e-12));
    }
  }

  TEST_CASE("dedupe keeps the first occurrence and truncation keeps the best") {
    BeamSet b;
    for (int i = 0; i < 4; ++i) {
      Hypothesis h;
      h.tokens = {static_cast<TokenId>(i % 2 == 0 ? 5 : 6 + i)};
      h.total_logprob = -i;
      b.hypotheses.push_back(h);
    }
    const BeamSet d = dedupe_and_truncate(b, 5, true);
    REQUIRE(d.hypotheses.size() == 3);
    CHECK(d.hypotheses[0].total_logprob == 0.0);
    CHECK(d.hypotheses[1].total_logprob == -1.0);
    CHECK(dedupe_and_truncate(b, 2, false).hypotheses.size() == 2);
    CHECK_THROWS_AS(dedupe_and_truncate(b, 0, true), Error);
  }

  TEST_CASE("decoding past the model length raises length_overflow") {
    Fixture f;
    try {
      beam_search(f.params, f.input, f.spec, 2, 30);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::length_overflow);
    }
    CHECK_THROWS_AS(greedy_decode(f.params, {}, f.spec, 3), Error);
  }

  TEST_CASE("n-best lines carry id, rank, score, quality, finished flag and tokens") {
    const Vocab v = task_vocab(checks::tiny_task(3, 4));
    BeamSet b;
    b.utterance_id = "u7";
    Hypothesis h;
    h.tokens = {v.symbol(0), v.symbol(2)};
    h.total_logprob = -0.5;
    h.finished = true;
    h.quality = 0.25;
    b.hypotheses.push_back(h);
    h.quality.reset();
    h.finished = false;
    b.hypotheses.push_back(h);
    std::ostringstream out;
    write_nbest(out, b, v);
    CHECK(out.str() == "u7\t1\t-0.5\t0.25\t1\ta c\nu7\t2\t-0.5\t-\t0\ta c\n");
  }
}
