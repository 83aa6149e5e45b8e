#include "doctest.h"
#include "sisda/error.hpp"
#include "sisda/metrics.hpp"

using namespace sisda;

TEST_SUITE("metrics") {
  TEST_CASE("edit distance and token error rate on small cases") {
    const TokenSeq ref = {1, 2, 3, 4};
    CHECK(edit_distance(ref, TokenSeq{1, 2, 3, 4}) == 0);
    CHECK(edit_distance(ref, TokenSeq{1, 3, 4}) == 1);
    CHECK(edit_distance(ref, TokenSeq{}) == 4);
    CHECK(token_error_rate(TokenSeq{2, 1, 3, 4, 5}, ref) == 0.75);
    CHECK_THROWS_AS(token_error_rate(ref, TokenSeq{}), Error);
  }

  TEST_CASE("corpus error rate pools edits over reference tokens") {
    ErrorTally t;
    t.add(TokenSeq{1, 2}, TokenSeq{1, 2, 3, 4});
    t.add(TokenSeq{9}, TokenSeq{1});
    CHECK(t.edits == 3);
    CHECK(t.reference_tokens == 5);
    CHECK(t.rate() == 0.6);
  }

  TEST_CASE("relative error reduction") {
    CHECK(error_rate_reduction(0.2, 0.15) == doctest::Approx(0.25));
    CHECK(error_rate_reduction(0.1, 0.2) == doctest::Approx(-1.0));
    CHECK_THROWS_AS(error_rate_reduction(0.0, 0.1), Error);
  }

  TEST_CASE("Spearman correlation matches reference values, including ties") {
    const std::vector<double> x = {1, 2, 3, 4, 5}, y = {5, 6, 7, 8, 7};
    const Correlation c = spearman(x, y);
    CHECK(c.rho == doctest::Approx(0.8207826816681233).epsilon(1e-12));
    CHECK(c.p_value == doctest::Approx(0.08858700531354381).epsilon(1e-9));
    const std::vector<double> a = {0.1, 0.4, 0.4, 0.9, 0.3, 0.7}, b = {3, 1, 2, 2, 5, 0};
    const Correlation t = spearman(a, b);
    CHECK(t.rho == doctest::Approx(-0.6617647058823529).epsilon(1e-12));
    CHECK(t.p_value == doctest::Approx(0.1522570857927945).epsilon(1e-9));
    const std::vector<double> flat = {1, 1, 1, 1};
    CHECK(spearman(flat, std::vector<double>{1, 2, 3, 4}).p_value == 1.0);
    CHECK_THROWS_AS(spearman(x, flat), Error);
  }
}
