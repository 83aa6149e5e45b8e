#include <cmath>
#include <sstream>

#include "doctest.h"
#include "sisda/corpus.hpp"
#include "sisda/error.hpp"

using namespace sisda;

namespace {

DomainSpec noise_domain(double p, std::uint64_t seed) {
  DomainSpec d;
  d.kind = DomainKind::noise;
  d.noise_prob = p;
  d.seed = seed;
  return d;
}

DomainSpec clean_domain(std::uint64_t seed) {
  DomainSpec d;
  d.seed = seed;
  return d;
}

}  // namespace

TEST_SUITE("corpus") {
  TEST_CASE("references are the shifted clean symbols, one per run of frames") {
    TaskConfig task;
    const Vocab v = task_vocab(task);
    const auto c = generate_corpus(task, clean_domain(3), 50, Split::source_train);
    for (const auto& u : c.utterances) {
      REQUIRE(u.reference.size() >= task.min_len);
      REQUIRE(u.reference.size() <= task.max_len);
      REQUIRE(u.input.size() == 3 * u.reference.size());
      for (std::size_t i = 0; i < u.reference.size(); ++i) {
        const std::size_t s = v.symbol_index(u.input[3 * i]);
        CHECK(v.symbol_index(u.reference[i]) == (s + task.shift) % task.alphabet_size);
        CHECK(u.input[3 * i + 1] == u.input[3 * i]);
      }
    }
  }

  TEST_CASE("variable durations and distinct neighbours stay in range") {
    TaskConfig task;
    task.min_frames = 2;
    task.max_frames = 4;
    task.distinct_neighbors = true;
    for (const auto& u : generate_corpus(task, clean_domain(5), 50, Split::source_train).utterances) {
      CHECK(u.input.size() >= 2 * u.reference.size());
      CHECK(u.input.size() <= 4 * u.reference.size());
      for (std::size_t i = 0; i + 1 < u.reference.size(); ++i) CHECK(u.reference[i] != u.reference[i + 1]);
    }
  }

  TEST_CASE("generation is deterministic per seed and split") {
    TaskConfig task;
    const auto a = generate_corpus(task, noise_domain(0.15, 9), 30, Split::target_adapt);
    const auto b = generate_corpus(task, noise_domain(0.15, 9), 30, Split::target_adapt);
    const auto c = generate_corpus(task, noise_domain(0.15, 10), 30, Split::target_adapt);
    const auto d = generate_corpus(task, noise_domain(0.15, 9), 30, Split::target_test);
    CHECK(a.utterances == b.utterances);
    CHECK_FALSE(a.utterances == c.utterances);
    CHECK(a.utterances[0].reference != d.utterances[0].reference);
  }

  TEST_CASE("the corrupted-frame rate is binomial around the noise probability") {
    TaskConfig task;
    const double p = 0.15;
    const auto clean = generate_corpus(task, clean_domain(17), 2000, Split::target_test);
    const auto noisy = generate_corpus(task, noise_domain(p, 17), 2000, Split::target_test);
    std::size_t frames = 0, changed = 0;
    for (std::size_t n = 0; n < clean.utterances.size(); ++n) {
      const auto& c = clean.utterances[n];
      const auto& y = noisy.utterances[n];
      REQUIRE(c.reference == y.reference);
      REQUIRE(c.input.size() == y.input.size());
      for (std::size_t i = 0; i < c.input.size(); ++i) {
        ++frames;
        if (c.input[i] != y.input[i]) ++changed;
      }
    }
    const double rate = static_cast<double>(changed) / static_cast<double>(frames);
    const double sigma = std::sqrt(p * (1.0 - p) / static_cast<double>(frames));
    INFO("rate " << rate << " over " << frames << " frames");
    CHECK(std::abs(rate - p) < 4.0 * sigma);
  }

  TEST_CASE("accent swaps fixed symbol pairs in every frame") {
    TaskConfig task;
    const Vocab v = task_vocab(task);
    DomainSpec accent;
    accent.kind = DomainKind::accent;
    accent.swap_pairs = {{0, 1}};
    accent.seed = 2;
    const auto clean = generate_corpus(task, clean_domain(2), 40, Split::target_test);
    const auto acc = generate_corpus(task, accent, 40, Split::target_test);
    for (std::size_t n = 0; n < 40; ++n) {
      for (std::size_t i = 0; i < clean.utterances[n].input.size(); ++i) {
        const std::size_t s = v.symbol_index(clean.utterances[n].input[i]);
        const std::size_t heard = s == 0 ? 1 : s == 1 ? 0 : s;
        CHECK(v.symbol_index(acc.utterances[n].input[i]) == heard);
      }
    }
  }

  TEST_CASE("invalid domains and tasks are rejected as config errors") {
    auto kind_of = [](auto&& fn) {
      try {
        fn();
      } catch (const Error& e) {
        return e.kind();
      }
      return ErrorKind::state;
    };
    CHECK(kind_of([] { noise_domain(1.5, 1).validate(); }) == ErrorKind::invalid_config);
    CHECK(kind_of([] { noise_domain(0.0, 1).validate(); }) == ErrorKind::invalid_config);
    TaskConfig t;
    t.min_len = 5;
    t.max_len = 4;
    CHECK(kind_of([&] { t.validate(); }) == ErrorKind::invalid_config);
  }

  TEST_CASE("corpus files round-trip and the unlabeled reader never parses references") {
    TaskConfig task;
    const Vocab v = task_vocab(task);
    const auto c = generate_corpus(task, noise_domain(0.15, 4), 20, Split::target_adapt);
    std::stringstream buf;
    write_corpus(buf, c, v);
    const std::string text = buf.str();
    std::istringstream in(text);
    CHECK(read_corpus(in, v).utterances == c.utterances);

    std::string poisoned;
    std::istringstream lines(text);
    std::string line;
    while (std::getline(lines, line)) {
      if (line[0] != '#') line = line.substr(0, line.rfind('\t')) + "\tnot-a-token";
      poisoned += line + "\n";
    }
    std::istringstream bad(poisoned);
    CHECK_THROWS_AS(read_corpus(bad, v), Error);
    std::istringstream guarded(poisoned);
    const auto u = read_unlabeled(guarded, v);
    const auto view = c.unlabeled_view();
    REQUIRE(u.size() == view.size());
    for (std::size_t i = 0; i < u.size(); ++i) {
      CHECK(u[i].id == view[i].id);
      CHECK(u[i].input == view[i].input);
    }
  }

  TEST_CASE("malformed corpus lines are parse errors") {
    const Vocab v = task_vocab(TaskConfig{});
    std::istringstream in("u1\tsource-train\tclean\ta b\n");
    try {
      read_corpus(in, v);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::parse);
    }
  }
}
