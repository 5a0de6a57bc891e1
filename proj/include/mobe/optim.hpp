#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mobe/tensor.hpp"

namespace mobe {

/// AdamW with decoupled weight decay. Moment buffers are keyed by parameter
/// address, so one state object can serve several disjoint parameter groups.
class AdamW {
 public:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
    std::uint64_t steps = 0;
  };

  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  /// Updates every parameter in `params` from its current grad.
  void step(std::span<Parameter* const> params, double lr, double weight_decay);

  const Moments* moments(const Parameter* p) const;
  void reset() { state_.clear(); }

 private:
  std::map<const Parameter*, Moments> state_;
};

void zero_grads(std::span<Parameter* const> params);

enum class LrScheduleKind { kConstant, kLinearDecay, kWarmupCosine };

/// Learning rate as a function of step within one training loop.
struct LrSchedule {
  LrScheduleKind kind = LrScheduleKind::kConstant;
  double base = 3e-4;
  /// Final lr as a fraction of base (linear decay, cosine floor).
  double final_ratio = 1.0;
  /// Warmup length as a fraction of total steps (cosine only).
  double warmup_fraction = 0.0;

  double at(std::size_t step, std::size_t total_steps) const;
};

LrScheduleKind parse_lr_schedule_kind(const std::string& s);
std::string to_string(LrScheduleKind kind);

}  // namespace mobe
