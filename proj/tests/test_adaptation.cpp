#include <cmath>
#include <filesystem>

#include "checks.hpp"
#include "doctest.h"
#include "sisda/adaptation.hpp"
#include "sisda/error.hpp"
#include "sisda/metrics.hpp"

using namespace sisda;

namespace {

struct Setup {
  TaskConfig task = checks::tiny_task(4, 4);
  Vocab vocab = task_vocab(task);
  ContextSpec spec = default_context(vocab, 4);
  ModelParams params = checks::sharpened(init_params(checks::tiny_model(vocab.size(), 8, 2, 16), 5), 1.5);

  std::vector<Utterance> labeled(std::size_t n, std::uint64_t seed) const {
    DomainSpec d;
    d.kind = DomainKind::noise;
    d.noise_prob = 0.2;
    d.seed = seed;
    return generate_corpus(task, d, n, Split::target_adapt).utterances;
  }

  std::vector<UnlabeledUtterance> unlabeled(std::size_t n, std::uint64_t seed) const {
    DomainCorpus c{labeled(n, seed)};
    return c.unlabeled_view();
  }

  TrainConfig config(Method m) const {
    TrainConfig c;
    c.method = m;
    c.beam_size = 4;
    c.keep = 3;
    c.max_output = 5;
    c.seed = 3;
    return c;
  }
};

Hypothesis with_q(TokenSeq tokens, double q) {
  Hypothesis h;
  h.tokens = std::move(tokens);
  h.quality = q;
  return h;
}

}  // namespace

TEST_SUITE("adaptation") {
  TEST_CASE("advantages reward lower Q and average out to zero") {
    const std::vector<double> q = {0.25, 0.75};
    const AdvantageSet a = compute_advantages(q);
    CHECK(a.baseline == 0.5);
    CHECK(a.advantages == std::vector<double>{0.25, -0.25});
    CHECK_THROWS_AS(compute_advantages({}), Error);
  }

  TEST_CASE("rl_loss is the negative advantage-weighted log-probability") {
    const std::vector<double> q = {0.1, 0.3, 0.8};
    const AdvantageSet a = compute_advantages(q);
    const std::vector<double> lp = {-1.0, -2.0, -4.0};
    double expected = 0.0;
    for (std::size_t i = 0; i < 3; ++i) expected -= a.advantages[i] * lp[i];
    CHECK(rl_loss(a, lp) == doctest::Approx(expected));
    Graph g;
    std::vector<Var> vars;
    for (double x : lp) vars.push_back(g.leaf("lp" + std::to_string(vars.size()), Tensor::scalar(x)));
    const Var loss = rl_loss(g, a, vars);
    CHECK(g.value(loss).item() == doctest::Approx(expected));
    g.backward(loss);
    CHECK(g.grad(vars[0]).item() == doctest::Approx(-a.advantages[0]));
    CHECK_THROWS_AS(rl_loss(a, std::vector<double>{1.0}), Error);
  }

  TEST_CASE("DPO loss is log 2 at zero margin and falls as the margin grows") {
    auto value = [](double c, double r) {
      Graph g;
      const Var cv = g.leaf("c", Tensor::scalar(c));
      const Var rv = g.leaf("r", Tensor::scalar(r));
      return g.value(dpo_loss(g, cv, rv, -1.0, -1.0, 0.5)).item();
    };
    CHECK(value(-1.0, -1.0) == doctest::Approx(std::log(2.0)));
    CHECK(value(0.0, -2.0) < value(-1.0, -1.0));
    CHECK(value(0.0, -2.0) == doctest::Approx(std::log1p(std::exp(-1.0))));
  }

  TEST_CASE("a gradient step widens the gap between positive- and negative-advantage hypotheses") {
    Setup s;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      const TokenSeq input = checks::random_symbols(s.vocab, 4, seed);
      TokenSeq pos = checks::random_symbols(s.vocab, 3, seed + 100);
      TokenSeq neg = checks::random_symbols(s.vocab, 3, seed + 200);
      if (pos == neg) continue;
      const Context cp = build_context(s.spec, input, pos), cn = build_context(s.spec, input, neg);
      auto gap = [&](const ModelParams& p) {
        return sequence_logprob(p, cp.tokens, cp.layout).total - sequence_logprob(p, cn.tokens, cn.layout).total;
      };
      Graph g;
      const BoundParams bp = bind_params(g, s.params, Trainable::base);
      const Var lps[] = {tape_sequence(g, bp, cp.tokens, cp.layout).total, tape_sequence(g, bp, cn.tokens, cn.layout).total};
      const std::vector<double> q = {0.2, 0.7};
      g.backward(rl_loss(g, compute_advantages(q), lps));
      ModelParams after = s.params;
      for (const auto& [name, grad] : leaf_gradients(g, bp)) {
        for (std::size_t i = 0; i < grad.size(); ++i) after.at(name)[i] -= 1e-3 * grad[i];
      }
      CHECK(gap(after) > gap(s.params));
    }
  }

  TEST_CASE("weighted cross-entropy with unit weights is the plain mean NLL") {
    Setup s;
    const Context ctx = build_context(s.spec, checks::random_symbols(s.vocab, 4, 1), checks::random_symbols(s.vocab, 3, 2));
    Graph g;
    const BoundParams bp = bind_params(g, s.params, Trainable::none);
    const SequenceTape tape = tape_sequence(g, bp, ctx.tokens, ctx.layout);
    const std::vector<double> ones(3, 1.0), half(3, 0.5);
    const double plain = g.value(nll_from_tape(g, tape)).item();
    CHECK(g.value(weighted_nll(g, tape, ones)).item() == doctest::Approx(plain).epsilon(1e-14));
    CHECK(g.value(weighted_nll(g, tape, half)).item() == doctest::Approx(plain / 2).epsilon(1e-14));
    CHECK_THROWS_AS(weighted_nll(g, tape, std::vector<double>{1.0}), Error);
  }

  TEST_CASE("filtering drops the most diverse fifth, ties by ascending id") {
    const std::vector<std::pair<std::string, double>> d = {
        {"e", 1.0}, {"b", 3.0}, {"a", 3.0}, {"c", 0.5}, {"d", 2.0}, {"f", 0.0}, {"g", 0.0}, {"h", 0.0}, {"i", 0.0}, {"j", 0.0}};
    CHECK(filtered_ids(d, 0.2) == std::vector<std::string>{"a", "b"});
    CHECK(filtered_ids(std::span(d).first(4), 0.2).empty());
  }

  TEST_CASE("chosen is the earliest lowest Q, rejected the latest highest Q") {
    const std::vector<Hypothesis> h = {with_q({1}, 0.3), with_q({2}, 0.1), with_q({3}, 0.1), with_q({4}, 0.6),
                                       with_q({5}, 0.6)};
    CHECK(argmin_quality(h) == 1);
    CHECK(argmax_quality(h) == 4);
  }

  TEST_CASE("beam diversity is the mean pairwise edit distance") {
    const std::vector<Hypothesis> h = {with_q({1, 2}, 0), with_q({1, 3}, 0), with_q({4, 5, 6}, 0)};
    CHECK(beam_diversity(h) == doctest::Approx((1.0 + 3.0 + 3.0) / 3.0));
    CHECK(beam_diversity(std::span(h).first(1)) == 0.0);
  }

  TEST_CASE("training configs are validated") {
    TrainConfig c;
    c.learning_rate = 0.0;
    CHECK_THROWS_AS(c.validate(), Error);
    c = TrainConfig{};
    c.epochs = 0;
    CHECK_THROWS_AS(c.validate(), Error);
    c = TrainConfig{};
    c.tau = 1.5;
    CHECK_THROWS_AS(c.validate(), Error);
    CHECK(parse_method("si-sda") == Method::si_sda);
    CHECK_THROWS_AS(parse_method("magic"), Error);
  }

  TEST_CASE("zero-shot returns the parameters unchanged and sft needs labels") {
    Setup s;
    const auto corpus = s.unlabeled(4, 1);
    CHECK(adapt_unsupervised(s.params, corpus, s.spec, s.config(Method::zero_shot)).params == s.params);
    CHECK_THROWS_AS(adapt_unsupervised(s.params, corpus, s.spec, s.config(Method::sft)), Error);
  }

  TEST_CASE("si-sda steps on scored beams and a zero threshold skips every utterance") {
    Setup s;
    const auto corpus = s.unlabeled(6, 2);
    std::size_t epochs_seen = 0;
    const AdaptResult r = adapt_si_sda(s.params, corpus, s.spec, s.config(Method::si_sda),
                                       [&](std::size_t, const ModelParams&) { ++epochs_seen; });
    CHECK(epochs_seen == 1);
    REQUIRE(r.epochs.size() == 1);
    CHECK(r.epochs[0].steps + r.epochs[0].skipped == corpus.size());
    CHECK(r.epochs[0].failed == 0);
    CHECK(r.epochs[0].mean_q > 0.0);
    CHECK(r.trace.size() == corpus.size());
    CHECK_FALSE(r.params == s.params);

    TrainConfig strict = s.config(Method::si_sda);
    strict.tau = 0.0;
    const AdaptResult none = adapt_si_sda(s.params, corpus, s.spec, strict);
    CHECK(none.epochs[0].skipped == corpus.size());
    CHECK(none.params == s.params);
  }

  TEST_CASE("every baseline runs on a small corpus") {
    Setup s;
    const auto corpus = s.unlabeled(6, 3);
    for (Method m : {Method::self_train, Method::filtering, Method::conf, Method::min_q, Method::dpo}) {
      CAPTURE(method_name(m));
      const AdaptResult r = adapt_unsupervised(s.params, corpus, s.spec, s.config(m));
      CHECK(r.epochs.size() == 1);
      CHECK(r.warnings.empty());
    }
    TrainConfig c = s.config(Method::sft);
    c.adapter = AdapterConfig{2, 1.0};
    const auto labeled = s.labeled(6, 3);
    const AdaptResult r = baseline_sft(s.params, labeled, s.spec, c);
    CHECK(r.epochs[0].steps == 6);
  }

  TEST_CASE("resumed training matches uninterrupted training") {
    Setup s;
    std::vector<SupervisedExample> ex;
    for (const auto& u : s.labeled(12, 7)) ex.push_back({u.id, u.input, u.reference, {}});
    TrainingState straight = start_training(s.params, AdamConfig{3e-3});
    train_supervised(straight, ex, s.spec, 3, 4, 11);

    TrainingState first = start_training(s.params, AdamConfig{3e-3});
    train_supervised(first, ex, s.spec, 1, 4, 11);
    const auto path = std::filesystem::temp_directory_path() / "sisda-test-resume.ckpt";
    save_training_state(path, first);
    TrainingState resumed = load_training_state(path);
    CHECK(resumed.epochs_done == 1);
    train_supervised(resumed, ex, s.spec, 2, 4, 11);
    std::filesystem::remove(path);
    std::filesystem::remove(path.string() + ".opt");

    double worst = 0.0;
    for (const auto& [name, t] : straight.params.tensors) {
      const Tensor& u = resumed.params.at(name);
      for (std::size_t i = 0; i < t.size(); ++i) worst = std::max(worst, std::abs(t[i] - u[i]));
    }
    CHECK(worst <= 1e-6);
    CHECK(resumed.optimizer.steps() == straight.optimizer.steps());
  }

  TEST_CASE("evaluation reports the pooled error rate of top-1 hypotheses") {
    Setup s;
    const auto corpus = s.labeled(5, 9);
    const EvalResult r = evaluate(s.params, corpus, s.spec, 1, 5);
    CHECK(r.utterances == 5);
    CHECK(r.hypotheses.size() == 5);
    ErrorTally t;
    for (std::size_t i = 0; i < 5; ++i) t.add(r.hypotheses[i].tokens, corpus[i].reference);
    CHECK(r.token_error_rate == t.rate());
  }
}
