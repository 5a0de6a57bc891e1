#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mobe/tensor.hpp"

namespace mobe::ad {

enum class OpKind {
  kConstant,
  kParameter,
  kMatmul,
  kMatmulNT,
  kTranspose,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kAddBias,
  kMulRows,
  kScale,
  kAddScalar,
  kTanh,
  kGelu,
  kExp,
  kLog,
  kSqrt,
  kSoftplus,
  kClampMin,
  kSoftmax,
  kLogSoftmax,
  kSum,
  kMean,
  kSumAxis,
  kL2Normalize,
  kLayerNorm,
  kDropout,
  kConcat,
  kIndexSelect,
  kCustom,
};

const char* op_name(OpKind kind);

class Tape;

/// Handle to a node recorded on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  /// Gradient of the last backward() with respect to this node (zeros if unreached).
  Tensor grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Eager reverse-mode graph. Nodes are appended in creation order, which is a
/// topological order; backward() walks it once in reverse. A tape is confined
/// to one thread and is meant to live for a single training step.
class Tape {
 public:
  struct Node {
    OpKind kind;
    std::vector<std::size_t> inputs;
    Tensor value;
    std::vector<double> grad;  // empty until the node receives gradient
    bool needs_grad = false;
    Parameter* param = nullptr;
    std::function<void(Tape&, std::size_t)> backward;
  };

  explicit Tape(std::uint64_t dropout_seed = 0, bool training = false)
      : dropout_seed_(dropout_seed), training_(training) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Leaf bound to a parameter; backward() accumulates into param.grad.
  Var param(Parameter& p);

  /// Records a node. `backward` receives the tape and the node id and must
  /// add into its inputs through grad_buffer().
  Var record(OpKind kind, std::vector<std::size_t> inputs, Tensor value,
             std::function<void(Tape&, std::size_t)> backward);

  /// Fills node gradients for a scalar loss and adds leaf gradients into the
  /// bound parameters. Calling it twice accumulates twice.
  void backward(Var loss);

  const Node& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  std::span<const double> grad(std::size_t id) const { return nodes_[id].grad; }
  /// Mutable gradient buffer of an input, zero-allocated on first use.
  std::span<double> grad_buffer(std::size_t id);

  bool training() const { return training_; }
  /// With gradients disabled, parameter leaves are recorded as constants.
  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  bool grad_enabled() const { return grad_enabled_; }
  void set_training(bool t) { training_ = t; }
  std::uint64_t next_dropout_stream() { return dropout_counter_++; }
  std::uint64_t dropout_seed() const { return dropout_seed_; }

  /// Node ids visited by the most recent backward(), in visit order.
  const std::vector<std::size_t>& last_visit_order() const { return visit_order_; }

 private:
  std::vector<Node> nodes_;
  std::vector<std::size_t> visit_order_;
  std::uint64_t dropout_seed_;
  std::uint64_t dropout_counter_ = 0;
  bool training_;
  bool grad_enabled_ = true;
};

// Linear algebra. Operands are rank-2 unless noted.
Var matmul(Var a, Var b);     // [m,k] x [k,n]
Var matmul_nt(Var a, Var b);  // [m,k] x [n,k]^T
Var transpose(Var a);

// Elementwise, identical shapes.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);

Var add_bias(Var a, Var bias);  // [m,n] + [n] on every row
Var mul_rows(Var a, Var w);     // row i of [m,n] scaled by w[i], w of shape [m]
Var scale(Var a, double s);
Var add_scalar(Var a, double s);

Var tanh(Var a);
Var gelu(Var a);  // exact erf form
Var exp(Var a);
Var log(Var a);   // rejects non-positive entries
Var sqrt(Var a);  // rejects negative entries
Var softplus(Var a);
Var clamp_min(Var a, double lo);

// Axis-wise ops on rank-1 (axis 0) or rank-2 (axis 0 or 1) tensors.
Var softmax(Var a, std::size_t axis);
Var log_softmax(Var a, std::size_t axis);
Var sum_axis(Var a, std::size_t axis);
Var l2_normalize(Var a, std::size_t axis);

Var sum(Var a);   // scalar
Var mean(Var a);  // scalar

inline constexpr double kLayerNormEps = 1e-5;
/// Normalizes each row over the last axis, then applies gain and shift.
Var layer_norm(Var a, Var gain, Var shift);
/// Inverted dropout; identity when the tape is not in training mode or p == 0.
Var dropout(Var a, double p);

Var concat(std::span<const Var> parts, std::size_t axis);
Var index_select(Var a, std::span<const std::size_t> rows);

}  // namespace mobe::ad
