#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mobe/gradcheck.hpp"
#include "mobe/rng.hpp"

namespace mobe {

inline constexpr double kGradcheckTolerance = 1e-4;

/// One randomized finite-difference check; each call draws a fresh instance.
struct GradCase {
  std::string module;  // "ops", "losses", "model", or "fixture"
  std::string name;
  std::function<double(Rng&)> trial;  // worst relative error of one instance
};

/// Built-in cases. The "fixture" module holds an op with a deliberately
/// wrong backward and is only included on request.
std::vector<GradCase> gradcheck_cases(bool include_corrupt = false);

struct GradCaseReport {
  std::string module;
  std::string name;
  std::size_t trials = 0;
  double worst = 0.0;
  bool pass = true;
};

/// Runs `trials` instances of every case in `module` ("all" selects every
/// built-in module).
std::vector<GradCaseReport> run_gradcheck_suite(const std::string& module, std::size_t trials,
                                                std::uint64_t seed, bool include_corrupt = false,
                                                double tolerance = kGradcheckTolerance);

}  // namespace mobe
