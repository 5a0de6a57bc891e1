#include "mobe/optim.hpp"

#include <cmath>
#include <numbers>

namespace mobe {

void AdamW::step(std::span<Parameter* const> params, double lr, double weight_decay) {
  if (!(lr > 0.0)) throw DomainError("AdamW: learning rate must be positive");
  if (weight_decay < 0.0) throw DomainError("AdamW: weight decay must be non-negative");
  for (Parameter* p : params) {
    if (!p->requires_grad) continue;
    auto& st = state_[p];
    const std::size_t n = p->value.size();
    if (st.m.size() != n) {
      st.m.assign(n, 0.0);
      st.v.assign(n, 0.0);
    }
    ++st.steps;
    const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(st.steps));
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(st.steps));
    auto w = p->value.data();
    auto g = p->grad.data();
    for (std::size_t i = 0; i < n; ++i) {
      st.m[i] = kBeta1 * st.m[i] + (1.0 - kBeta1) * g[i];
      st.v[i] = kBeta2 * st.v[i] + (1.0 - kBeta2) * g[i] * g[i];
      const double mhat = st.m[i] / bc1;
      const double vhat = st.v[i] / bc2;
      w[i] -= lr * weight_decay * w[i];
      w[i] -= lr * mhat / (std::sqrt(vhat) + kEps);
    }
  }
}

const AdamW::Moments* AdamW::moments(const Parameter* p) const {
  auto it = state_.find(p);
  return it == state_.end() ? nullptr : &it->second;
}

void zero_grads(std::span<Parameter* const> params) {
  for (Parameter* p : params) p->zero_grad();
}

double LrSchedule::at(std::size_t step, std::size_t total_steps) const {
  switch (kind) {
    case LrScheduleKind::kConstant:
      return base;
    case LrScheduleKind::kLinearDecay: {
      if (total_steps <= 1) return base;
      const double frac = static_cast<double>(step) / static_cast<double>(total_steps - 1);
      return base * (1.0 - frac * (1.0 - final_ratio));
    }
    case LrScheduleKind::kWarmupCosine: {
      const auto warm = static_cast<std::size_t>(warmup_fraction * static_cast<double>(total_steps));
      if (step < warm) return base * static_cast<double>(step + 1) / static_cast<double>(warm);
      const std::size_t span = total_steps > warm + 1 ? total_steps - warm - 1 : 1;
      const double frac = std::min(1.0, static_cast<double>(step - warm) / static_cast<double>(span));
      const double floor = base * final_ratio;
      return floor + 0.5 * (base - floor) * (1.0 + std::cos(std::numbers::pi * frac));
    }
  }
  return base;
}

LrScheduleKind parse_lr_schedule_kind(const std::string& s) {
  if (s == "constant") return LrScheduleKind::kConstant;
  if (s == "linear_decay") return LrScheduleKind::kLinearDecay;
  if (s == "warmup_cosine") return LrScheduleKind::kWarmupCosine;
  throw std::invalid_argument("unknown lr schedule '" + s + "'");
}

std::string to_string(LrScheduleKind kind) {
  switch (kind) {
    case LrScheduleKind::kConstant: return "constant";
    case LrScheduleKind::kLinearDecay: return "linear_decay";
    case LrScheduleKind::kWarmupCosine: return "warmup_cosine";
  }
  return "constant";
}

}  // namespace mobe
