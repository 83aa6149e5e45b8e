// Runs the eight acceptance criteria and prints one PASS/FAIL line each.
// Usage: sisda_acceptance [work-dir [criterion ids...]]

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "checks.hpp"

namespace {

using sisda::checks::Outcome;

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  namespace fs = std::filesystem;
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "sisda-acceptance";
  fs::remove_all(work);
  fs::create_directories(work);

  namespace c = sisda::checks;
  const std::vector<Criterion> criteria = {
      {1, "gradient correctness", c::gradient_correctness},
      {2, "saliency algebra", c::saliency_algebra},
      {3, "score invariants", c::score_invariants},
      {4, "brute-force oracles", c::brute_force_oracles},
      {5, "prompt reliance of errors", [&] { return c::reliance_reproduction(work); }},
      {6, "end-to-end adaptation", [&] { return c::end_to_end_adaptation(work); }},
      {7, "single-step sign checks", c::single_step_signs},
      {8, "reproducibility and isolation", [&] { return c::reproducibility_and_isolation(work); }},
  };

  std::vector<int> only;
  for (int i = 2; i < argc; ++i) only.push_back(std::atoi(argv[i]));

  int failed = 0, ran = 0;
  for (const auto& cr : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), cr.id) == only.end()) continue;
    ++ran;
    Outcome o;
    try {
      o = cr.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("error: ") + e.what();
    }
    if (!o.pass) ++failed;
    std::printf("[%s] %d %s (%.1f s): %s\n", o.pass ? "PASS" : "FAIL", cr.id, cr.name, o.seconds, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%d criteria passed\n", ran - failed, ran);
  return failed == 0 ? 0 : 1;
}
