#pragma once

#include <functional>
#include <span>
#include <vector>

#include "mobe/autodiff.hpp"

namespace mobe::ad {

/// Builds a scalar loss from leaf variables bound to the checked inputs.
using LossBuilder = std::function<Var(Tape&, std::span<const Var>)>;

struct GradCheckResult {
  /// Worst relative error across inputs.
  double max_rel_error = 0.0;
  std::vector<double> per_input;
};

/// max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|, 1e-10): the error of one
/// gradient tensor relative to its own scale.
double relative_error(std::span<const double> analytic, std::span<const double> numeric);

/// Compares reverse-mode gradients against central differences, perturbing
/// one input element at a time by +-step.
GradCheckResult gradcheck(const LossBuilder& build, std::vector<Tensor> inputs,
                          double step = 1e-5);

}  // namespace mobe::ad
