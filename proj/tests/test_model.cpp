#include <cmath>
#include <filesystem>

#include "checks.hpp"
#include "doctest.h"
#include "sisda/error.hpp"
#include "sisda/model.hpp"
#include "sisda/optimizer.hpp"

using namespace sisda;

namespace {

struct Fixture {
  Vocab vocab = task_vocab(checks::tiny_task(4, 4));
  ContextSpec spec = default_context(vocab, 6);
  ModelParams params = init_params(checks::tiny_model(vocab.size(), 8, 2, 20), 11);
};

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("build_context pads the input region and records the layout") {
    Fixture f;
    const TokenSeq input = checks::random_symbols(f.vocab, 4, 1);
    const TokenSeq output = {f.vocab.symbol(0), f.vocab.eos()};
    const Context ctx = build_context(f.spec, input, output);
    CHECK(ctx.layout.prompt == Span{0, 2});
    CHECK(ctx.layout.input == Span{2, 8});
    CHECK(ctx.layout.output == Span{8, 10});
    CHECK(ctx.tokens[0] == f.vocab.bos());
    CHECK(ctx.tokens[1] == f.vocab.task_tag());
    CHECK(ctx.tokens[6] == f.vocab.pad());
    CHECK(ctx.tokens[7] == f.vocab.pad());
    CHECK(ctx.tokens[9] == f.vocab.eos());
  }

  TEST_CASE("an input longer than its slots raises length_overflow") {
    Fixture f;
    try {
      build_context(f.spec, checks::random_symbols(f.vocab, 7, 1), {});
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::length_overflow);
    }
  }

  TEST_CASE("vocab encodes, decodes and rejects unknown tokens") {
    const Vocab v = task_vocab(checks::tiny_task(3, 4));
    CHECK(v.size() == 7);
    CHECK(v.join(v.encode(std::vector<std::string>{"a", "c", "<eos>"})) == "a c <eos>");
    try {
      v.id("zz");
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::out_of_vocab);
    }
  }

  TEST_CASE("parameter count matches the configuration") {
    Fixture f;
    CHECK(f.params.parameter_count() == expected_parameter_count(f.params.config));
  }

  TEST_CASE("the cached decoder reproduces the full forward pass") {
    Fixture f;
    const Context ctx = build_context(f.spec, checks::random_symbols(f.vocab, 5, 2), checks::random_symbols(f.vocab, 4, 3));
    const ForwardOutput full = forward_logits(f.params, ctx.tokens, ctx.layout, false);
    DecoderState state(f.params);
    for (std::size_t t = 0; t < ctx.tokens.size(); ++t) {
      state.push(ctx.tokens[t]);
      const auto lp = state.next_log_probs();
      const auto row = full.logits.row(t);
      double m = row[0];
      for (double x : row) m = std::max(m, x);
      double z = 0.0;
      for (double x : row) z += std::exp(x - m);
      for (std::size_t v = 0; v < lp.size(); ++v) {
        CHECK(lp[v] == doctest::Approx(row[v] - m - std::log(z)).epsilon(1e-12));
      }
    }
  }

  TEST_CASE("sequence_logprob agrees with the taped total and its per-token terms") {
    Fixture f;
    const Context ctx = build_context(f.spec, checks::random_symbols(f.vocab, 3, 4), checks::random_symbols(f.vocab, 3, 5));
    const SequenceScore s = sequence_logprob(f.params, ctx.tokens, ctx.layout);
    LossTape tape = nll_loss(f.params, ctx.tokens, ctx.layout);
    CHECK(s.per_token.size() == 3);
    double sum = 0.0;
    for (double x : s.per_token) sum += x;
    CHECK(sum == doctest::Approx(s.total).epsilon(1e-14));
    CHECK(tape.graph.value(tape.loss).item() == doctest::Approx(-s.total / 3.0).epsilon(1e-14));
  }

  TEST_CASE("checkpoints round-trip bitwise") {
    Fixture f;
    const auto path = std::filesystem::temp_directory_path() / "sisda-test-model.ckpt";
    save_checkpoint(path, f.params);
    CHECK(load_checkpoint(path) == f.params);
    std::filesystem::remove(path);
  }

  TEST_CASE("a truncated checkpoint is rejected") {
    Fixture f;
    const auto path = std::filesystem::temp_directory_path() / "sisda-test-trunc.ckpt";
    save_checkpoint(path, f.params);
    std::filesystem::resize_file(path, std::filesystem::file_size(path) / 2);
    CHECK_THROWS_AS(load_checkpoint(path), Error);
    std::filesystem::remove(path);
  }

  TEST_CASE("fresh adapters leave the model unchanged") {
    Fixture f;
    const AdapterParams a = init_adapters(f.params, 2, 1.0, default_adapter_targets(f.params.config), 5);
    CHECK(apply_adapter(f.params, a) == f.params);
  }

  TEST_CASE("adapter-only training lowers the loss and leaves base weights bitwise unchanged") {
    Fixture f;
    const ModelParams original = f.params;
    AdapterParams a = init_adapters(f.params, 2, 1.0, default_adapter_targets(f.params.config), 5);
    const Context ctx = build_context(f.spec, checks::random_symbols(f.vocab, 4, 6), checks::random_symbols(f.vocab, 3, 7));
    Adam adam(AdamConfig{1e-2});
    double first = 0.0, last = 0.0;
    for (int step = 0; step < 30; ++step) {
      LossTape tape = nll_loss(f.params, ctx.tokens, ctx.layout, Trainable::adapters, &a);
      tape.graph.backward(tape.loss);
      const auto grads = leaf_gradients(tape.graph, tape.params);
      for (const auto& [name, g] : grads) CHECK(name.find(".lora_") != std::string::npos);
      adam.step(a.factors, grads);
      last = tape.graph.value(tape.loss).item();
      if (step == 0) first = last;
    }
    CHECK(last < first);
    CHECK(f.params == original);
    CHECK_FALSE(apply_adapter(f.params, a) == original);
  }
}
