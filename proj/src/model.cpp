#include "mobe/model.hpp"

#include <cmath>

namespace mobe {
namespace {

Parameter uniform_param(std::string name, Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (auto& v : t.data()) v = u(rng);
  return Parameter(std::move(name), std::move(t));
}

Parameter constant_param(std::string name, Shape shape, double value) {
  return Parameter(std::move(name), Tensor(std::move(shape), value));
}

ad::Var layer_norm_of(ad::Tape& tape, ad::Var x, Parameter& gain, Parameter& shift) {
  return ad::layer_norm(x, tape.param(gain), tape.param(shift));
}

}  // namespace

OpCounters& op_counters() {
  static OpCounters counters;
  return counters;
}

void check_simplex(const Tensor& omega, std::size_t subjects) {
  if (omega.rank() != 2 || omega.cols() != subjects) {
    throw ShapeError("routing weights must be [batch x " + std::to_string(subjects) + "], got " +
                     shape_str(omega.shape()));
  }
  for (std::size_t r = 0; r < omega.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < subjects; ++c) {
      const double w = omega(r, c);
      if (!(w >= 0.0)) throw DomainError("routing weight " + std::to_string(w) + " is negative");
      s += w;
    }
    if (std::abs(s - 1.0) > 1e-9) {
      throw DomainError("routing weights of row " + std::to_string(r) + " sum to " +
                        std::to_string(s) + ", not 1");
    }
  }
}

MoBELinear::MoBELinear(std::string name, std::size_t in, std::size_t out, std::size_t subjects,
                       std::size_t rank, bool with_adapters, Rng& rng)
    : name_(std::move(name)), in_(in), out_(out), rank_(with_adapters ? rank : 0) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  weight = uniform_param(name_ + ".weight", {out, in}, bound, rng);
  bias = uniform_param(name_ + ".bias", {out}, bound, rng);
  if (!with_adapters) return;
  if (rank == 0 || rank > std::min(in, out)) {
    throw DomainError(name_ + ": adapter rank " + std::to_string(rank) + " must be in [1, min(" +
                      std::to_string(in) + ", " + std::to_string(out) + ")]");
  }
  std::normal_distribution<double> normal(0.0, bound);
  adapter_a.reserve(subjects);
  adapter_b.reserve(subjects);
  for (std::size_t s = 0; s < subjects; ++s) {
    Tensor a(Shape{rank, in});
    for (auto& v : a.data()) v = normal(rng);
    adapter_a.emplace_back(name_ + ".adapter" + std::to_string(s) + ".A", std::move(a));
    adapter_b.emplace_back(name_ + ".adapter" + std::to_string(s) + ".B", Tensor(Shape{out, rank}));
  }
}

ad::Var MoBELinear::forward(ad::Tape& tape, ad::Var x, const Tensor* omega) {
  ad::Var out = ad::add_bias(ad::matmul_nt(x, tape.param(weight)), tape.param(bias));
  if (!enabled || !has_adapters() || omega == nullptr) return out;
  const std::size_t subjects = adapter_a.size();
  check_simplex(*omega, subjects);
  if (omega->rows() != x.value().rows()) {
    throw ShapeError(name_ + ": routing rows " + std::to_string(omega->rows()) +
                     " vs batch " + shape_str(x.value().shape()));
  }
  const std::size_t batch = omega->rows();
  for (std::size_t s = 0; s < subjects; ++s) {
    Tensor w(Shape{batch});
    bool any = false;
    for (std::size_t r = 0; r < batch; ++r) {
      w[r] = (*omega)(r, s) * scale;
      any = any || w[r] != 0.0;
    }
    // An all-zero routing column contributes exactly nothing.
    if (!any) continue;
    ++op_counters().adapter_branches;
    ad::Var low = ad::matmul_nt(x, tape.param(adapter_a[s]));
    ad::Var up = ad::matmul_nt(low, tape.param(adapter_b[s]));
    out = ad::add(out, ad::mul_rows(up, tape.constant(std::move(w))));
  }
  return out;
}

Tensor MoBELinear::effective_weight(std::span<const double> omega) const {
  Tensor w = weight.value;
  if (!enabled || !has_adapters()) return w;
  for (std::size_t s = 0; s < adapter_a.size(); ++s) {
    const Tensor& A = adapter_a[s].value;
    const Tensor& B = adapter_b[s].value;
    for (std::size_t o = 0; o < out_; ++o)
      for (std::size_t i = 0; i < in_; ++i) {
        double acc = 0.0;
        for (std::size_t r = 0; r < rank_; ++r) acc += B(o, r) * A(r, i);
        w(o, i) += omega[s] * scale * acc;
      }
  }
  return w;
}

void ModelConfig::validate() const {
  if (input_dim == 0) throw DomainError("model input_dim must be positive");
  if (num_subjects == 0) throw DomainError("model needs at least one subject");
  if (hidden == 0 || embed_dim == 0 || num_classes == 0) {
    throw DomainError("model widths must be positive");
  }
  if (dropout < 0.0 || dropout >= 1.0) throw DomainError("dropout must be in [0,1)");
}

Router::Router(std::size_t input_dim, std::size_t hidden, std::size_t subjects, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(input_dim));
  w1 = uniform_param("router.fc1.weight", {hidden, input_dim}, bound, rng);
  b1 = uniform_param("router.fc1.bias", {hidden}, bound, rng);
  w2 = constant_param("router.fc2.weight", {subjects, hidden}, 0.0);
  b2 = constant_param("router.fc2.bias", {subjects}, 0.0);
}

ad::Var Router::logits(ad::Tape& tape, ad::Var x) {
  ad::Var h = ad::gelu(ad::add_bias(ad::matmul_nt(x, tape.param(w1)), tape.param(b1)));
  return ad::add_bias(ad::matmul_nt(h, tape.param(w2)), tape.param(b2));
}

std::vector<Parameter*> ParameterGroups::all() const {
  std::vector<Parameter*> out = backbone_and_heads;
  for (const auto& g : adapters_by_subject) out.insert(out.end(), g.begin(), g.end());
  out.insert(out.end(), router.begin(), router.end());
  return out;
}

DecoderModel::DecoderModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng = make_rng(seed, "init");
  const std::size_t S = cfg_.num_subjects, h = cfg_.hidden, r = cfg_.rank;
  const bool heads = cfg_.adapters_on_heads;
  projector_ = MoBELinear("backbone.projector", cfg_.input_dim, h, S, r, true, rng);
  proj_ln_gain_ = constant_param("backbone.projector.ln.gain", {h}, 1.0);
  proj_ln_shift_ = constant_param("backbone.projector.ln.shift", {h}, 0.0);
  blocks_.reserve(cfg_.res_blocks);
  for (std::size_t b = 0; b < cfg_.res_blocks; ++b) {
    const std::string name = "backbone.block" + std::to_string(b);
    blocks_.push_back(ResBlock{MoBELinear(name + ".linear", h, h, S, r, true, rng),
                               constant_param(name + ".ln.gain", {h}, 1.0),
                               constant_param(name + ".ln.shift", {h}, 0.0)});
  }
  classifier_ = MoBELinear("heads.classifier", h, cfg_.num_classes, S,
                           std::min(r, std::min(h, cfg_.num_classes)), heads, rng);
  const auto wide = static_cast<std::size_t>(
      std::llround(cfg_.retrieval_expansion * static_cast<double>(cfg_.embed_dim)));
  retrieval_.reserve(3);
  retrieval_.emplace_back("heads.retrieval.expand", h, wide, S, std::min(r, std::min(h, wide)), heads, rng);
  retrieval_.emplace_back("heads.retrieval.keep", wide, wide, S, std::min(r, wide), heads, rng);
  retrieval_.emplace_back("heads.retrieval.contract", wide, cfg_.embed_dim, S,
                          std::min(r, std::min(wide, cfg_.embed_dim)), heads, rng);
  prior_ = MoBELinear("heads.prior", h, cfg_.embed_dim, S, std::min(r, std::min(h, cfg_.embed_dim)),
                      heads, rng);
  router_ = Router(cfg_.input_dim, cfg_.router_hidden, S, rng);
  for (auto* l : mobe_layers()) l->scale = cfg_.adapter_scale;
}

ForwardOutput DecoderModel::forward(ad::Tape& tape, const Tensor& x, const Tensor& omega,
                                    unsigned heads) {
  if (x.rank() != 2 || x.cols() != cfg_.input_dim) {
    throw ShapeError("model input must be [batch x " + std::to_string(cfg_.input_dim) + "], got " +
                     shape_str(x.shape()));
  }
  const Tensor* routing = adapters_enabled_ ? &omega : nullptr;
  ad::Var h = projector_.forward(tape, tape.constant(x), routing);
  h = ad::dropout(ad::gelu(layer_norm_of(tape, h, proj_ln_gain_, proj_ln_shift_)), cfg_.dropout);
  for (auto& blk : blocks_) {
    ad::Var y = blk.linear.forward(tape, h, routing);
    y = ad::dropout(ad::gelu(layer_norm_of(tape, y, blk.ln_gain, blk.ln_shift)), cfg_.dropout);
    h = ad::add(h, y);
  }
  ForwardOutput out;
  out.representation = h;
  if (heads & kHeadClassifier) out.class_logits = classifier_.forward(tape, h, routing);
  if (heads & kHeadRetrieval) {
    ad::Var z = ad::gelu(retrieval_[0].forward(tape, h, routing));
    z = ad::gelu(retrieval_[1].forward(tape, z, routing));
    out.retrieval = retrieval_[2].forward(tape, z, routing);
  }
  if (heads & kHeadPrior) out.prior = prior_.forward(tape, h, routing);
  return out;
}

ad::Var DecoderModel::router_logits(ad::Tape& tape, const Tensor& x) {
  if (x.rank() != 2 || x.cols() != cfg_.input_dim) {
    throw ShapeError("router input must be [batch x " + std::to_string(cfg_.input_dim) + "], got " +
                     shape_str(x.shape()));
  }
  ++op_counters().router_evaluations;
  return router_.logits(tape, tape.constant(x));
}

Tensor DecoderModel::route(const Tensor& x) {
  ad::Tape tape;
  tape.set_grad_enabled(false);
  return ad::softmax(router_logits(tape, x), 1).value();
}

void DecoderModel::set_adapters_enabled(bool on) {
  adapters_enabled_ = on;
  for (auto* l : mobe_layers()) l->enabled = on;
}

std::vector<MoBELinear*> DecoderModel::mobe_layers() {
  std::vector<MoBELinear*> out{&projector_};
  for (auto& b : blocks_) out.push_back(&b.linear);
  out.push_back(&classifier_);
  for (auto& l : retrieval_) out.push_back(&l);
  out.push_back(&prior_);
  return out;
}

std::size_t DecoderModel::adapter_layer_count() const {
  std::size_t m = 1 + blocks_.size();
  if (cfg_.adapters_on_heads) m += 1 + retrieval_.size() + 1;
  return m;
}

ParameterGroups DecoderModel::parameter_groups() {
  ParameterGroups g;
  g.adapters_by_subject.resize(cfg_.num_subjects);
  auto add_layer = [&](MoBELinear& l) {
    g.backbone_and_heads.push_back(&l.weight);
    g.backbone_and_heads.push_back(&l.bias);
    for (std::size_t s = 0; s < l.adapter_a.size(); ++s) {
      g.adapters_by_subject[s].push_back(&l.adapter_a[s]);
      g.adapters_by_subject[s].push_back(&l.adapter_b[s]);
    }
  };
  add_layer(projector_);
  g.backbone_and_heads.push_back(&proj_ln_gain_);
  g.backbone_and_heads.push_back(&proj_ln_shift_);
  for (auto& b : blocks_) {
    add_layer(b.linear);
    g.backbone_and_heads.push_back(&b.ln_gain);
    g.backbone_and_heads.push_back(&b.ln_shift);
  }
  add_layer(classifier_);
  for (auto& l : retrieval_) add_layer(l);
  add_layer(prior_);
  g.router = router_.parameters();
  return g;
}

DecoderModel::ParamCount DecoderModel::count_parameters() {
  ParamCount c;
  for (auto* l : mobe_layers()) {
    c.shared_weights += l->in() * l->out();
    for (std::size_t s = 0; s < l->adapter_a.size(); ++s) {
      c.adapters += l->adapter_a[s].value.size() + l->adapter_b[s].value.size();
    }
  }
  const auto groups = parameter_groups();
  for (auto* p : groups.all()) c.total += p->value.size();
  for (auto* p : groups.router) c.router += p->value.size();
  return c;
}

std::vector<ParameterInfo> describe_parameters(DecoderModel& model) {
  std::vector<ParameterInfo> out;
  auto layer_of = [](const std::string& name) {
    const auto pos = name.rfind('.');
    return pos == std::string::npos ? name : name.substr(0, pos);
  };
  const auto groups = model.parameter_groups();
  for (auto* p : groups.backbone_and_heads) {
    out.push_back({p, "backbone_and_heads", layer_of(p->name), -1});
  }
  for (std::size_t s = 0; s < groups.adapters_by_subject.size(); ++s) {
    for (auto* p : groups.adapters_by_subject[s]) {
      const auto adapter = p->name.find(".adapter");
      out.push_back({p, "adapters", p->name.substr(0, adapter), static_cast<int>(s)});
    }
  }
  for (auto* p : groups.router) out.push_back({p, "router", layer_of(p->name), -1});
  return out;
}

}  // namespace mobe
