#include "mobe/autodiff.hpp"

#include <Eigen/Core>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>

#include "mobe/rng.hpp"

namespace mobe::ad {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using MapM = Eigen::Map<RowMat>;

MapC view(const Tensor& t) {
  return MapC(t.data().data(), static_cast<Eigen::Index>(t.rows()),
              static_cast<Eigen::Index>(t.cols()));
}

MapC view(std::span<const double> g, const Tensor& like) {
  return MapC(g.data(), static_cast<Eigen::Index>(like.rows()),
              static_cast<Eigen::Index>(like.cols()));
}

MapM view_mut(std::span<double> g, const Tensor& like) {
  return MapM(g.data(), static_cast<Eigen::Index>(like.rows()),
              static_cast<Eigen::Index>(like.cols()));
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + " expects a rank-2 operand, got " + shape_str(t.shape()));
  }
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

// Lanes along an axis: for each lane, `len` entries at base + j * stride.
struct Lanes {
  std::size_t count;
  std::size_t len;
  std::size_t stride;
  std::size_t base(std::size_t lane) const { return stride == 1 ? lane * len : lane; }
};

Lanes lanes_for(const Tensor& t, std::size_t axis, const char* op) {
  if (t.rank() == 1 && axis == 0) return {1, t.dim(0), 1};
  if (t.rank() == 2 && axis == 1) return {t.dim(0), t.dim(1), 1};
  if (t.rank() == 2 && axis == 0) return {t.dim(1), t.dim(0), t.dim(1)};
  throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for " +
                   shape_str(t.shape()));
}

template <class F>
Var unary(Var a, OpKind kind, F&& fwd_and_deriv) {
  // fwd_and_deriv(x) -> {y, dy/dx}
  const Tensor& x = a.value();
  Tensor y(x.shape());
  auto deriv = std::make_shared<std::vector<double>>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto [v, d] = fwd_and_deriv(x[i]);
    y[i] = v;
    (*deriv)[i] = d;
  }
  const std::size_t ia = a.id();
  return a.tape().record(kind, {ia}, std::move(y), [ia, deriv](Tape& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    auto g = t.grad(self);
    auto ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*deriv)[i];
  });
}

}  // namespace

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kConstant: return "constant";
    case OpKind::kParameter: return "parameter";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kMatmulNT: return "matmul_nt";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kDiv: return "div";
    case OpKind::kAddBias: return "add_bias";
    case OpKind::kMulRows: return "mul_rows";
    case OpKind::kScale: return "scale";
    case OpKind::kAddScalar: return "add_scalar";
    case OpKind::kTanh: return "tanh";
    case OpKind::kGelu: return "gelu";
    case OpKind::kExp: return "exp";
    case OpKind::kLog: return "log";
    case OpKind::kSqrt: return "sqrt";
    case OpKind::kSoftplus: return "softplus";
    case OpKind::kClampMin: return "clamp_min";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLogSoftmax: return "log_softmax";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kSumAxis: return "sum_axis";
    case OpKind::kL2Normalize: return "l2_normalize";
    case OpKind::kLayerNorm: return "layer_norm";
    case OpKind::kDropout: return "dropout";
    case OpKind::kConcat: return "concat";
    case OpKind::kIndexSelect: return "index_select";
    case OpKind::kCustom: return "custom";
  }
  return "?";
}

const Tensor& Var::value() const { return tape_->value(id_); }

Tensor Var::grad() const {
  const auto g = tape_->grad(id_);
  Tensor out(value().shape());
  if (!g.empty()) std::copy(g.begin(), g.end(), out.data().begin());
  return out;
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{OpKind::kConstant, {}, std::move(value), {}, false, nullptr, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(Parameter& p) {
  nodes_.push_back(Node{OpKind::kParameter, {}, p.value, {}, p.requires_grad && grad_enabled_,
                        grad_enabled_ ? &p : nullptr, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(OpKind kind, std::vector<std::size_t> inputs, Tensor value,
                 std::function<void(Tape&, std::size_t)> backward) {
  bool needs = false;
  for (auto i : inputs) {
    if (i >= nodes_.size()) throw std::out_of_range("tape input id out of range");
    needs = needs || nodes_[i].needs_grad;
  }
  nodes_.push_back(Node{kind, std::move(inputs), std::move(value), {}, needs, nullptr,
                        needs ? std::move(backward) : nullptr});
  return Var(this, nodes_.size() - 1);
}

std::span<double> Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

void Tape::backward(Var loss) {
  if (&loss.tape() != this) throw std::invalid_argument("backward: loss belongs to another tape");
  if (nodes_[loss.id()].value.size() != 1) {
    throw ShapeError("backward requires a scalar loss, got " +
                     shape_str(nodes_[loss.id()].value.shape()));
  }
  for (auto& n : nodes_) n.grad.clear();
  visit_order_.clear();
  grad_buffer(loss.id())[0] = 1.0;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    visit_order_.push_back(id);
    Node& n = nodes_[id];
    if (n.grad.empty() || !n.needs_grad) continue;
    if (n.backward) n.backward(*this, id);
    if (n.param != nullptr) {
      auto& pg = n.param->grad.storage();
      if (pg.size() != n.grad.size()) pg.assign(n.grad.size(), 0.0);
      for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i];
    }
  }
}

Var matmul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_rank2(A, "matmul");
  require_rank2(B, "matmul");
  if (A.dim(1) != B.dim(0)) {
    throw ShapeError("matmul: shape mismatch " + shape_str(A.shape()) + " x " +
                     shape_str(B.shape()));
  }
  Tensor C(Shape{A.dim(0), B.dim(1)});
  view_mut(C.data(), C).noalias() = view(A) * view(B);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(OpKind::kMatmul, {ia, ib}, std::move(C),
                         [ia, ib](Tape& t, std::size_t self) {
                           const auto G = view(t.grad(self), t.value(self));
                           if (t.needs_grad(ia)) {
                             view_mut(t.grad_buffer(ia), t.value(ia)).noalias() +=
                                 G * view(t.value(ib)).transpose();
                           }
                           if (t.needs_grad(ib)) {
                             view_mut(t.grad_buffer(ib), t.value(ib)).noalias() +=
                                 view(t.value(ia)).transpose() * G;
                           }
                         });
}

Var matmul_nt(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_rank2(A, "matmul_nt");
  require_rank2(B, "matmul_nt");
  if (A.dim(1) != B.dim(1)) {
    throw ShapeError("matmul_nt: shape mismatch " + shape_str(A.shape()) + " x " +
                     shape_str(B.shape()) + "^T");
  }
  Tensor C(Shape{A.dim(0), B.dim(0)});
  view_mut(C.data(), C).noalias() = view(A) * view(B).transpose();
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(OpKind::kMatmulNT, {ia, ib}, std::move(C),
                         [ia, ib](Tape& t, std::size_t self) {
                           const auto G = view(t.grad(self), t.value(self));
                           if (t.needs_grad(ia)) {
                             view_mut(t.grad_buffer(ia), t.value(ia)).noalias() +=
                                 G * view(t.value(ib));
                           }
                           if (t.needs_grad(ib)) {
                             view_mut(t.grad_buffer(ib), t.value(ib)).noalias() +=
                                 G.transpose() * view(t.value(ia));
                           }
                         });
}

Var transpose(Var a) {
  const Tensor& A = a.value();
  require_rank2(A, "transpose");
  Tensor T(Shape{A.dim(1), A.dim(0)});
  view_mut(T.data(), T) = view(A).transpose();
  const std::size_t ia = a.id();
  return a.tape().record(OpKind::kTranspose, {ia}, std::move(T), [ia](Tape& t, std::size_t self) {
    view_mut(t.grad_buffer(ia), t.value(ia)) += view(t.grad(self), t.value(self)).transpose();
  });
}

Var add(Var a, Var b) {
  require_same(a.value(), b.value(), "add");
  Tensor y = a.value();
  const Tensor& B = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += B[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(OpKind::kAdd, {ia, ib}, std::move(y), [ia, ib](Tape& t, std::size_t self) {
    auto g = t.grad(self);
    for (auto id : {ia, ib}) {
      if (!t.needs_grad(id)) continue;
      auto gi = t.grad_buffer(id);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  require_same(a.value(), b.value(), "sub");
  Tensor y = a.value();
  const Tensor& B = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= B[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(OpKind::kSub, {ia, ib}, std::move(y), [ia, ib](Tape& t, std::size_t self) {
    auto g = t.grad(self);
    if (t.needs_grad(ia)) {
      auto ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.needs_grad(ib)) {
      auto gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same(a.value(), b.value(), "mul");
  Tensor y = a.value();
  const Tensor& B = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= B[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(OpKind::kMul, {ia, ib}, std::move(y), [ia, ib](Tape& t, std::size_t self) {
    auto g = t.grad(self);
    // Fan-in from the same node (mul(x, x)) accumulates both terms.
    if (t.needs_grad(ia)) {
      const Tensor& B = t.value(ib);
      auto ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
    }
    if (t.needs_grad(ib)) {
      const Tensor& A = t.value(ia);
      auto gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
    }
  });
}

Var div(Var a, Var b) {
  require_same(a.value(), b.value(), "div");
  Tensor y = a.value();
  const Tensor& B = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (B[i] == 0.0) throw DomainError("div: division by zero");
    y[i] /= B[i];
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(OpKind::kDiv, {ia, ib}, std::move(y), [ia, ib](Tape& t, std::size_t self) {
    auto g = t.grad(self);
    const Tensor& A = t.value(ia);
    const Tensor& B = t.value(ib);
    if (t.needs_grad(ia)) {
      auto ga = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / B[i];
    }
    if (t.needs_grad(ib)) {
      auto gb = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * A[i] / (B[i] * B[i]);
    }
  });
}

Var add_bias(Var a, Var bias) {
  const Tensor& A = a.value();
  const Tensor& b = bias.value();
  require_rank2(A, "add_bias");
  if (b.rank() != 1 || b.dim(0) != A.dim(1)) {
    throw ShapeError("add_bias: shape mismatch " + shape_str(A.shape()) + " + " +
                     shape_str(b.shape()));
  }
  Tensor y = A;
  const std::size_t m = A.dim(0), n = A.dim(1);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) y[r * n + c] += b[c];
  const std::size_t ia = a.id(), ib = bias.id();
  return a.tape().record(OpKind::kAddBias, {ia, ib}, std::move(y),
                         [ia, ib, m, n](Tape& t, std::size_t self) {
                           auto g = t.grad(self);
                           if (t.needs_grad(ia)) {
                             auto ga = t.grad_buffer(ia);
                             for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                           }
                           if (t.needs_grad(ib)) {
                             auto gb = t.grad_buffer(ib);
                             for (std::size_t r = 0; r < m; ++r)
                               for (std::size_t c = 0; c < n; ++c) gb[c] += g[r * n + c];
                           }
                         });
}

Var mul_rows(Var a, Var w) {
  const Tensor& A = a.value();
  const Tensor& W = w.value();
  require_rank2(A, "mul_rows");
  if (W.rank() != 1 || W.dim(0) != A.dim(0)) {
    throw ShapeError("mul_rows: shape mismatch " + shape_str(A.shape()) + " rows vs " +
                     shape_str(W.shape()));
  }
  const std::size_t m = A.dim(0), n = A.dim(1);
  Tensor y = A;
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) y[r * n + c] *= W[r];
  const std::size_t ia = a.id(), iw = w.id();
  return a.tape().record(OpKind::kMulRows, {ia, iw}, std::move(y),
                         [ia, iw, m, n](Tape& t, std::size_t self) {
                           auto g = t.grad(self);
                           if (t.needs_grad(ia)) {
                             const Tensor& W = t.value(iw);
                             auto ga = t.grad_buffer(ia);
                             for (std::size_t r = 0; r < m; ++r)
                               for (std::size_t c = 0; c < n; ++c) ga[r * n + c] += g[r * n + c] * W[r];
                           }
                           if (t.needs_grad(iw)) {
                             const Tensor& A = t.value(ia);
                             auto gw = t.grad_buffer(iw);
                             for (std::size_t r = 0; r < m; ++r)
                               for (std::size_t c = 0; c < n; ++c) gw[r] += g[r * n + c] * A[r * n + c];
                           }
                         });
}

Var scale(Var a, double s) {
  return unary(a, OpKind::kScale, [s](double x) { return std::pair{x * s, s}; });
}

Var add_scalar(Var a, double s) {
  return unary(a, OpKind::kAddScalar, [s](double x) { return std::pair{x + s, 1.0}; });
}

Var tanh(Var a) {
  return unary(a, OpKind::kTanh, [](double x) {
    const double y = std::tanh(x);
    return std::pair{y, 1.0 - y * y};
  });
}

Var gelu(Var a) {
  return unary(a, OpKind::kGelu, [](double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return std::pair{x * cdf, cdf + x * pdf};
  });
}

Var exp(Var a) {
  return unary(a, OpKind::kExp, [](double x) {
    const double y = std::exp(x);
    return std::pair{y, y};
  });
}

Var log(Var a) {
  for (double v : a.value().data()) {
    if (!(v > 0.0)) {
      throw DomainError("log of non-positive value " + std::to_string(v));
    }
  }
  return unary(a, OpKind::kLog, [](double x) { return std::pair{std::log(x), 1.0 / x}; });
}

Var sqrt(Var a) {
  for (double v : a.value().data()) {
    if (v < 0.0) throw DomainError("sqrt of negative value " + std::to_string(v));
  }
  return unary(a, OpKind::kSqrt, [](double x) {
    const double y = std::sqrt(x);
    return std::pair{y, y > 0.0 ? 0.5 / y : 0.0};
  });
}

Var softplus(Var a) {
  return unary(a, OpKind::kSoftplus, [](double x) {
    // log(1 + e^x) without overflow; derivative is the logistic sigmoid.
    const double y = std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
    const double s = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    return std::pair{y, s};
  });
}

Var clamp_min(Var a, double lo) {
  return unary(a, OpKind::kClampMin,
               [lo](double x) { return x > lo ? std::pair{x, 1.0} : std::pair{lo, 0.0}; });
}

Var softmax(Var a, std::size_t axis) {
  const Tensor& x = a.value();
  const Lanes L = lanes_for(x, axis, "softmax");
  Tensor y(x.shape());
  for (std::size_t l = 0; l < L.count; ++l) {
    const std::size_t b = L.base(l);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < L.len; ++j) mx = std::max(mx, x[b + j * L.stride]);
    double z = 0.0;
    for (std::size_t j = 0; j < L.len; ++j) {
      const double e = std::exp(x[b + j * L.stride] - mx);
      y[b + j * L.stride] = e;
      z += e;
    }
    for (std::size_t j = 0; j < L.len; ++j) y[b + j * L.stride] /= z;
  }
  const std::size_t ia = a.id();
  return a.tape().record(OpKind::kSoftmax, {ia}, std::move(y), [ia, L](Tape& t, std::size_t self) {
    auto g = t.grad(self);
    const Tensor& y = t.value(self);
    auto ga = t.grad_buffer(ia);
    for (std::size_t l = 0; l < L.count; ++l) {
      const std::size_t b = L.base(l);
      double dot = 0.0;
      for (std::size_t j = 0; j < L.len; ++j) dot += g[b + j * L.stride] * y[b + j * L.stride];
      for (std::size_t j = 0; j < L.len; ++j) {
        const std::size_t k = b + j * L.stride;
        ga[k] += y[k] * (g[k] - dot);
      }
    }
  });
}

Var log_softmax(Var a, std::size_t axis) {
  const Tensor& x = a.value();
  const Lanes L = lanes_for(x, axis, "log_softmax");
  Tensor y(x.shape());
  for (std::size_t l = 0; l < L.count; ++l) {
    const std::size_t b = L.base(l);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < L.len; ++j) mx = std::max(mx, x[b + j * L.stride]);
    double z = 0.0;
    for (std::size_t j = 0; j < L.len; ++j) z += std::exp(x[b + j * L.stride] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < L.len; ++j) y[b + j * L.stride] = x[b + j * L.stride] - lse;
  }
  const std::size_t ia = a.id();
  return a.tape().record(OpKind::kLogSoftmax, {ia}, std::move(y),
                         [ia, L](Tape& t, std::size_t self) {
                           auto g = t.grad(self);
                           const Tensor& y = t.value(self);
                           auto ga = t.grad_buffer(ia);
                           for (std::size_t l = 0; l < L.count; ++l) {
                             const std::size_t b = L.base(l);
                             double gs = 0.0;
                             for (std::size_t j = 0; j < L.len; ++j) gs += g[b + j * L.stride];
                             for (std::size_t j = 0; j < L.len; ++j) {
                               const std::size_t k = b + j * L.stride;
                               ga[k] += g[k] - std::exp(y[k]) * gs;
                             }
                           }
                         });
}

Var sum_axis(Var a, std::size_t axis) {
  const Tensor& x = a.value();
  const Lanes L = lanes_for(x, axis, "sum_axis");
  Shape out_shape = x.rank() == 1 ? Shape{} : Shape{L.count};
  Tensor y(out_shape);
  for (std::size_t l = 0; l < L.count; ++l) {
    const std::size_t b = L.base(l);
    double s = 0.0;
    for (std::size_t j = 0; j < L.len; ++j) s += x[b + j * L.stride];
    y[l] = s;
  }
  const std::size_t ia = a.id();
  return a.tape().record(OpKind::kSumAxis, {ia}, std::move(y), [ia, L](Tape& t, std::size_t self) {
    auto g = t.grad(self);
    auto ga = t.grad_buffer(ia);
    for (std::size_t l = 0; l < L.count; ++l) {
      const std::size_t b = L.base(l);
      for (std::size_t j = 0; j < L.len; ++j) ga[b + j * L.stride] += g[l];
    }
  });
}

Var l2_normalize(Var a, std::size_t axis) {
  const Tensor& x = a.value();
  const Lanes L = lanes_for(x, axis, "l2_normalize");
  Tensor y(x.shape());
  auto norms = std::make_shared<std::vector<double>>(L.count);
  for (std::size_t l = 0; l < L.count; ++l) {
    const std::size_t b = L.base(l);
    double s = 0.0;
    for (std::size_t j = 0; j < L.len; ++j) s += x[b + j * L.stride] * x[b + j * L.stride];
    const double n = std::max(std::sqrt(s), 1e-12);
    (*norms)[l] = n;
    for (std::size_t j = 0; j < L.len; ++j) y[b + j * L.stride] = x[b + j * L.stride] / n;
  }
  const std::size_t ia = a.id();
  return a.tape().record(OpKind::kL2Normalize, {ia}, std::move(y),
                         [ia, L, norms](Tape& t, std::size_t self) {
                           auto g = t.grad(self);
                           const Tensor& y = t.value(self);
                           auto ga = t.grad_buffer(ia);
                           for (std::size_t l = 0; l < L.count; ++l) {
                             const std::size_t b = L.base(l);
                             double dot = 0.0;
                             for (std::size_t j = 0; j < L.len; ++j)
                               dot += g[b + j * L.stride] * y[b + j * L.stride];
                             for (std::size_t j = 0; j < L.len; ++j) {
                               const std::size_t k = b + j * L.stride;
                               ga[k] += (g[k] - y[k] * dot) / (*norms)[l];
                             }
                           }
                         });
}

Var sum(Var a) {
  const Tensor& x = a.value();
  double s = 0.0;
  for (double v : x.data()) s += v;
  const std::size_t ia = a.id();
  return a.tape().record(OpKind::kSum, {ia}, Tensor::scalar(s), [ia](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    for (auto& v : t.grad_buffer(ia)) v += g;
  });
}

Var mean(Var a) {
  const Tensor& x = a.value();
  if (x.size() == 0) throw ShapeError("mean of empty tensor");
  double s = 0.0;
  for (double v : x.data()) s += v;
  const double n = static_cast<double>(x.size());
  const std::size_t ia = a.id();
  return a.tape().record(OpKind::kMean, {ia}, Tensor::scalar(s / n),
                         [ia, n](Tape& t, std::size_t self) {
                           const double g = t.grad(self)[0] / n;
                           for (auto& v : t.grad_buffer(ia)) v += g;
                         });
}

Var layer_norm(Var a, Var gain, Var shift) {
  const Tensor& x = a.value();
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.value().shape() != Shape{n} || shift.value().shape() != Shape{n}) {
    throw ShapeError("layer_norm: shape mismatch " + shape_str(x.shape()) + " vs gain " +
                     shape_str(gain.value().shape()) + " / shift " +
                     shape_str(shift.value().shape()));
  }
  const Tensor& G = gain.value();
  const Tensor& B = shift.value();
  Tensor y(x.shape());
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(m);
  for (std::size_t r = 0; r < m; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < n; ++c) mu += x[r * n + c];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (x[r * n + c] - mu) * (x[r * n + c] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < n; ++c) {
      const double h = (x[r * n + c] - mu) * is;
      (*xhat)[r * n + c] = h;
      y[r * n + c] = h * G[c] + B[c];
    }
  }
  const std::size_t ix = a.id(), ig = gain.id(), ib = shift.id();
  return a.tape().record(
      OpKind::kLayerNorm, {ix, ig, ib}, std::move(y),
      [ix, ig, ib, m, n, xhat, inv_std](Tape& t, std::size_t self) {
        auto g = t.grad(self);
        const Tensor& G = t.value(ig);
        if (t.needs_grad(ig)) {
          auto gg = t.grad_buffer(ig);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) gg[c] += g[r * n + c] * (*xhat)[r * n + c];
        }
        if (t.needs_grad(ib)) {
          auto gb = t.grad_buffer(ib);
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) gb[c] += g[r * n + c];
        }
        if (t.needs_grad(ix)) {
          auto gx = t.grad_buffer(ix);
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t r = 0; r < m; ++r) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t c = 0; c < n; ++c) {
              const double dh = g[r * n + c] * G[c];
              m1 += dh;
              m2 += dh * (*xhat)[r * n + c];
            }
            m1 *= inv_n;
            m2 *= inv_n;
            for (std::size_t c = 0; c < n; ++c) {
              const double dh = g[r * n + c] * G[c];
              gx[r * n + c] += (*inv_std)[r] * (dh - m1 - (*xhat)[r * n + c] * m2);
            }
          }
        }
      });
}

Var dropout(Var a, double p) {
  if (p < 0.0 || p >= 1.0) throw DomainError("dropout probability must be in [0, 1)");
  Tape& tape = a.tape();
  if (!tape.training() || p == 0.0) return a;
  const std::uint64_t seed = splitmix64(tape.dropout_seed() ^ splitmix64(tape.next_dropout_stream()));
  const Tensor& x = a.value();
  auto mask = std::make_shared<std::vector<double>>(x.size());
  Tensor y(x.shape());
  const double keep_scale = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i < x.size(); ++i) {
    (*mask)[i] = counter_uniform(seed, i) >= p ? keep_scale : 0.0;
    y[i] = x[i] * (*mask)[i];
  }
  const std::size_t ia = a.id();
  return tape.record(OpKind::kDropout, {ia}, std::move(y), [ia, mask](Tape& t, std::size_t self) {
    auto g = t.grad(self);
    auto ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*mask)[i];
  });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Tensor& first = parts[0].value();
  if (first.rank() == 0 || first.rank() > 2 || axis >= first.rank()) {
    throw ShapeError("concat: axis " + std::to_string(axis) + " invalid for " +
                     shape_str(first.shape()));
  }
  // Treat every part as [rows, cols]; rank-1 parts concatenate along their only axis.
  const bool along_rows = first.rank() == 2 && axis == 0;
  std::size_t total = 0;
  for (const Var& p : parts) {
    const Tensor& t = p.value();
    if (t.rank() != first.rank()) {
      throw ShapeError("concat: shape mismatch " + shape_str(first.shape()) + " vs " +
                       shape_str(t.shape()));
    }
    if (first.rank() == 2) {
      const std::size_t other = along_rows ? 1 : 0;
      if (t.dim(other) != first.dim(other)) {
        throw ShapeError("concat: shape mismatch " + shape_str(first.shape()) + " vs " +
                         shape_str(t.shape()));
      }
    }
    total += t.dim(axis);
  }
  Shape out_shape = first.shape();
  out_shape[axis] = total;
  Tensor y(out_shape);
  const std::size_t out_rows = y.rows(), out_cols = y.cols();
  std::vector<std::size_t> ids, offsets;
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& t = p.value();
    for (std::size_t r = 0; r < t.rows(); ++r)
      for (std::size_t c = 0; c < t.cols(); ++c) {
        const std::size_t rr = along_rows ? r + off : r;
        const std::size_t cc = along_rows ? c : c + off;
        y[rr * out_cols + cc] = t(r, c);
      }
    ids.push_back(p.id());
    offsets.push_back(off);
    off += t.dim(axis);
  }
  (void)out_rows;
  return parts[0].tape().record(
      OpKind::kConcat, ids, std::move(y),
      [ids, offsets, along_rows, out_cols](Tape& t, std::size_t self) {
        auto g = t.grad(self);
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (!t.needs_grad(ids[k])) continue;
          const Tensor& part = t.value(ids[k]);
          auto gp = t.grad_buffer(ids[k]);
          const std::size_t pc = part.cols();
          for (std::size_t r = 0; r < part.rows(); ++r)
            for (std::size_t c = 0; c < pc; ++c) {
              const std::size_t rr = along_rows ? r + offsets[k] : r;
              const std::size_t cc = along_rows ? c : c + offsets[k];
              gp[r * pc + c] += g[rr * out_cols + cc];
            }
        }
      });
}

Var index_select(Var a, std::span<const std::size_t> rows) {
  const Tensor& x = a.value();
  require_rank2(x, "index_select");
  Tensor y = x.gather_rows(rows);
  auto idx = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
  const std::size_t ia = a.id(), n = x.dim(1);
  return a.tape().record(OpKind::kIndexSelect, {ia}, std::move(y),
                         [ia, idx, n](Tape& t, std::size_t self) {
                           auto g = t.grad(self);
                           auto ga = t.grad_buffer(ia);
                           for (std::size_t k = 0; k < idx->size(); ++k)
                             for (std::size_t c = 0; c < n; ++c) ga[(*idx)[k] * n + c] += g[k * n + c];
                         });
}

}  // namespace mobe::ad
