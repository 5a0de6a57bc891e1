#include "mobe/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace mobe::ad {

double relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  double diff = 0.0, scale = 1e-10;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  return diff / scale;
}

GradCheckResult gradcheck(const LossBuilder& build, std::vector<Tensor> inputs, double step) {
  std::vector<Parameter> params;
  params.reserve(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    params.emplace_back("in" + std::to_string(i), std::move(inputs[i]));
  }
  auto evaluate = [&](bool with_backward) {
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(params.size());
    for (auto& p : params) leaves.push_back(tape.param(p));
    Var loss = build(tape, leaves);
    if (with_backward) tape.backward(loss);
    return loss.value().item();
  };
  for (auto& p : params) p.zero_grad();
  evaluate(true);

  GradCheckResult result;
  for (auto& p : params) {
    std::vector<double> numeric(p.value.size());
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double orig = p.value[i];
      p.value[i] = orig + step;
      const double up = evaluate(false);
      p.value[i] = orig - step;
      const double down = evaluate(false);
      p.value[i] = orig;
      numeric[i] = (up - down) / (2.0 * step);
    }
    const double err = relative_error(p.grad.data(), numeric);
    result.per_input.push_back(err);
    result.max_rel_error = std::max(result.max_rel_error, err);
  }
  return result;
}

}  // namespace mobe::ad
