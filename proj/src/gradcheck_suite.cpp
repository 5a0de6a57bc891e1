#include "mobe/gradcheck_suite.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "mobe/losses.hpp"
#include "mobe/model.hpp"

namespace mobe {

namespace {

using ad::Tape;
using ad::Var;

std::size_t dim(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

Tensor randn(Shape shape, Rng& rng, double sd = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> n(0.0, sd);
  for (auto& v : t.storage()) v = n(rng);
  return t;
}

Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.storage()) v = u(rng);
  return t;
}

Tensor one_hot_rows(std::size_t n, std::size_t k, Rng& rng) {
  Tensor t(Shape{n, k});
  for (std::size_t r = 0; r < n; ++r) t(r, dim(rng, 0, k - 1)) = 1.0;
  return t;
}

// Reduces any output to a scalar through a fixed random projection, so every
// output element carries a distinct weight.
Var project(Var out, const Tensor& weights) {
  return ad::sum(ad::mul(out, out.tape().constant(weights)));
}

double check(const ad::LossBuilder& build, std::vector<Tensor> inputs) {
  return ad::gradcheck(build, std::move(inputs)).max_rel_error;
}

// Unary elementwise op checked on a random matrix drawn by `draw`.
GradCase unary_case(std::string name, std::function<Var(Var)> op,
                    std::function<Tensor(Shape, Rng&)> draw) {
  return {"ops", std::move(name), [op, draw](Rng& rng) {
            const Shape s{dim(rng, 1, 4), dim(rng, 1, 5)};
            const Tensor x = draw(s, rng);
            Tape probe;
            const Tensor w = randn(op(probe.constant(x)).shape(), rng);
            return check([&](Tape&, std::span<const Var> in) { return project(op(in[0]), w); }, {x});
          }};
}

GradCase axis_case(std::string name, std::function<Var(Var, std::size_t)> op) {
  return {"ops", std::move(name), [op](Rng& rng) {
            const Shape s{dim(rng, 2, 4), dim(rng, 2, 5)};
            const std::size_t axis = dim(rng, 0, 1);
            const Tensor x = randn(s, rng);
            Tape probe;
            const Shape out_shape = op(probe.constant(x), axis).shape();
            const Tensor w = randn(out_shape, rng);
            return check([&](Tape&, std::span<const Var> in) { return project(op(in[0], axis), w); },
                         {x});
          }};
}

// Finite differences directly on model parameters, on a random subset of coordinates.
double parameter_check(const std::function<Var(Tape&)>& loss, const std::vector<Parameter*>& params,
                       Rng& rng, std::size_t coords_per_tensor = 6, double step = 1e-5) {
  for (auto* p : params) p->zero_grad();
  {
    Tape tape;
    tape.backward(loss(tape));
  }
  auto value = [&]() {
    Tape tape;
    tape.set_grad_enabled(false);
    return loss(tape).value().item();
  };
  double worst = 0.0;
  for (auto* p : params) {
    const std::size_t n = p->value.size();
    std::vector<double> analytic, numeric;
    for (std::size_t k = 0; k < std::min(n, coords_per_tensor); ++k) {
      const std::size_t i = dim(rng, 0, n - 1);
      const double orig = p->value[i];
      p->value[i] = orig + step;
      const double up = value();
      p->value[i] = orig - step;
      const double down = value();
      p->value[i] = orig;
      analytic.push_back(p->grad[i]);
      numeric.push_back((up - down) / (2.0 * step));
    }
    worst = std::max(worst, ad::relative_error(analytic, numeric));
  }
  return worst;
}

ModelConfig tiny_model(Rng& rng) {
  ModelConfig c;
  c.input_dim = dim(rng, 5, 9);
  c.num_subjects = 3;
  c.num_classes = 3;
  c.embed_dim = 4;
  c.hidden = 6;
  c.res_blocks = 2;
  c.rank = 2;
  c.dropout = 0.0;
  c.router_hidden = 5;
  return c;
}

Tensor simplex_rows(std::size_t n, std::size_t k, Rng& rng) {
  Tensor t = uniform(Shape{n, k}, rng, 0.05, 1.0);
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < k; ++c) s += t(r, c);
    for (std::size_t c = 0; c < k; ++c) t(r, c) /= s;
  }
  return t;
}

// Squares its input but reports a backward of 3x instead of 2x.
Var corrupt_square(Var a) {
  Tensor v = a.value();
  for (auto& x : v.storage()) x *= x;
  const std::size_t in = a.id();
  return a.tape().record(ad::OpKind::kCustom, {in}, std::move(v), [in](Tape& t, std::size_t self) {
    auto g = t.grad_buffer(in);
    const auto up = t.grad(self);
    const auto& x = t.value(in);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += up[i] * 3.0 * x[i];
  });
}

std::vector<GradCase> op_cases() {
  auto normal = [](Shape s, Rng& rng) { return randn(std::move(s), rng); };
  auto positive = [](Shape s, Rng& rng) { return uniform(std::move(s), rng, 0.5, 2.0); };
  std::vector<GradCase> v;
  v.push_back({"ops", "matmul", [](Rng& rng) {
                 const std::size_t m = dim(rng, 1, 4), k = dim(rng, 1, 4), n = dim(rng, 1, 4);
                 const Tensor w = randn({m, n}, rng);
                 return check([&](Tape&, std::span<const Var> in) { return project(ad::matmul(in[0], in[1]), w); },
                              {randn({m, k}, rng), randn({k, n}, rng)});
               }});
  v.push_back({"ops", "matmul_nt", [](Rng& rng) {
                 const std::size_t m = dim(rng, 1, 4), k = dim(rng, 1, 4), n = dim(rng, 1, 4);
                 const Tensor w = randn({m, n}, rng);
                 return check(
                     [&](Tape&, std::span<const Var> in) { return project(ad::matmul_nt(in[0], in[1]), w); },
                     {randn({m, k}, rng), randn({n, k}, rng)});
               }});
  v.push_back({"ops", "transpose", [](Rng& rng) {
                 const std::size_t m = dim(rng, 1, 4), n = dim(rng, 1, 4);
                 const Tensor w = randn({n, m}, rng);
                 return check([&](Tape&, std::span<const Var> in) { return project(ad::transpose(in[0]), w); },
                              {randn({m, n}, rng)});
               }});
  using Binary = Var (*)(Var, Var);
  const std::pair<const char*, Binary> binaries[] = {
      {"add", ad::add}, {"sub", ad::sub}, {"mul", ad::mul}, {"div", ad::div}};
  for (const auto& entry : binaries) {
    const Binary op = entry.second;
    const char* name = entry.first;
    const bool is_div = std::string(name) == "div";
    v.push_back({"ops", name, [op, is_div](Rng& rng) {
                   const Shape s{dim(rng, 1, 4), dim(rng, 1, 4)};
                   const Tensor w = randn(s, rng);
                   Tensor b = is_div ? uniform(s, rng, 0.5, 2.0) : randn(s, rng);
                   return check([&](Tape&, std::span<const Var> in) { return project(op(in[0], in[1]), w); },
                                {randn(s, rng), b});
                 }});
  }
  v.push_back({"ops", "add_bias", [](Rng& rng) {
                 const std::size_t m = dim(rng, 1, 4), n = dim(rng, 1, 4);
                 const Tensor w = randn({m, n}, rng);
                 return check([&](Tape&, std::span<const Var> in) { return project(ad::add_bias(in[0], in[1]), w); },
                              {randn({m, n}, rng), randn({n}, rng)});
               }});
  v.push_back({"ops", "mul_rows", [](Rng& rng) {
                 const std::size_t m = dim(rng, 1, 4), n = dim(rng, 1, 4);
                 const Tensor w = randn({m, n}, rng);
                 return check([&](Tape&, std::span<const Var> in) { return project(ad::mul_rows(in[0], in[1]), w); },
                              {randn({m, n}, rng), randn({m}, rng)});
               }});
  v.push_back(unary_case("scale", [](Var a) { return ad::scale(a, -1.7); }, normal));
  v.push_back(unary_case("add_scalar", [](Var a) { return ad::add_scalar(a, 0.3); }, normal));
  v.push_back(unary_case("tanh", ad::tanh, normal));
  v.push_back(unary_case("gelu", ad::gelu, normal));
  v.push_back(unary_case("exp", ad::exp, normal));
  v.push_back(unary_case("log", ad::log, positive));
  v.push_back(unary_case("sqrt", ad::sqrt, positive));
  v.push_back(unary_case("softplus", ad::softplus, normal));
  // Entries are kept away from the kink so central differences stay one-sided.
  v.push_back(unary_case("clamp_min", [](Var a) { return ad::clamp_min(a, 0.0); }, [](Shape s, Rng& rng) {
    Tensor t = uniform(std::move(s), rng, 0.1, 1.0);
    std::bernoulli_distribution flip(0.5);
    for (auto& x : t.storage()) x = flip(rng) ? -x : x;
    return t;
  }));
  v.push_back(axis_case("softmax", ad::softmax));
  v.push_back(axis_case("log_softmax", ad::log_softmax));
  v.push_back(axis_case("sum_axis", ad::sum_axis));
  v.push_back(axis_case("l2_normalize", ad::l2_normalize));
  v.push_back(unary_case("sum", ad::sum, normal));
  v.push_back(unary_case("mean", ad::mean, normal));
  v.push_back({"ops", "layer_norm", [](Rng& rng) {
                 const std::size_t m = dim(rng, 1, 4), n = dim(rng, 2, 6);
                 const Tensor w = randn({m, n}, rng);
                 return check(
                     [&](Tape&, std::span<const Var> in) { return project(ad::layer_norm(in[0], in[1], in[2]), w); },
                     {randn({m, n}, rng), randn({n}, rng), randn({n}, rng)});
               }});
  v.push_back({"ops", "dropout", [](Rng& rng) {
                 const Shape s{dim(rng, 2, 4), dim(rng, 2, 5)};
                 const Tensor w = randn(s, rng);
                 // Every evaluation uses a fresh tape with the same seed, hence the same mask.
                 return check(
                     [&](Tape& t, std::span<const Var> in) {
                       t.set_training(true);
                       return project(ad::dropout(in[0], 0.3), w);
                     },
                     {randn(s, rng)});
               }});
  v.push_back({"ops", "concat", [](Rng& rng) {
                 const std::size_t axis = dim(rng, 0, 1);
                 const std::size_t m = dim(rng, 1, 3), n = dim(rng, 1, 3), extra = dim(rng, 1, 3);
                 const Shape a{m, n};
                 const Shape b = axis == 0 ? Shape{extra, n} : Shape{m, extra};
                 const Shape o = axis == 0 ? Shape{m + extra, n} : Shape{m, n + extra};
                 const Tensor w = randn(o, rng);
                 return check(
                     [&](Tape&, std::span<const Var> in) { return project(ad::concat(in, axis), w); },
                     {randn(a, rng), randn(b, rng)});
               }});
  v.push_back({"ops", "index_select", [](Rng& rng) {
                 const std::size_t m = dim(rng, 2, 5), n = dim(rng, 1, 4), k = dim(rng, 1, 6);
                 std::vector<std::size_t> rows(k);
                 for (auto& r : rows) r = dim(rng, 0, m - 1);  // repeats exercise accumulation
                 const Tensor w = randn({k, n}, rng);
                 return check(
                     [&](Tape&, std::span<const Var> in) { return project(ad::index_select(in[0], rows), w); },
                     {randn({m, n}, rng)});
               }});
  return v;
}

std::vector<GradCase> loss_cases() {
  std::vector<GradCase> v;
  v.push_back({"losses", "router", [](Rng& rng) {
                 const std::size_t n = dim(rng, 1, 6), s = dim(rng, 2, 4);
                 const Tensor id = one_hot_rows(n, s, rng);
                 return check([&](Tape&, std::span<const Var> in) { return loss::router_loss(in[0], id); },
                              {randn({n, s}, rng, 2.0)});
               }});
  v.push_back({"losses", "classification", [](Rng& rng) {
                 const std::size_t n = dim(rng, 1, 6), c = dim(rng, 1, 5);
                 Tensor labels = uniform({n, c}, rng, 0.0, 1.0);
                 for (auto& x : labels.storage()) x = x < 0.5 ? 0.0 : 1.0;
                 return check(
                     [&](Tape&, std::span<const Var> in) { return loss::classification_loss(in[0], labels); },
                     {randn({n, c}, rng, 2.0)});
               }});
  v.push_back({"losses", "retrieval", [](Rng& rng) {
                 const std::size_t n = dim(rng, 1, 6), e = dim(rng, 2, 5);
                 const double tau = std::uniform_real_distribution<double>(0.3, 1.5)(rng);
                 return check(
                     [&](Tape&, std::span<const Var> in) {
                       return loss::retrieval_loss(ad::l2_normalize(in[0], 1), ad::l2_normalize(in[1], 1), tau);
                     },
                     {randn({n, e}, rng), randn({n, e}, rng)});
               }});
  v.push_back({"losses", "mse", [](Rng& rng) {
                 const Shape s{dim(rng, 1, 5), dim(rng, 1, 5)};
                 return check([&](Tape&, std::span<const Var> in) { return loss::mse(in[0], in[1]); },
                              {randn(s, rng), randn(s, rng)});
               }});
  v.push_back({"losses", "reconstruction", [](Rng& rng) {
                 const std::size_t n = dim(rng, 1, 5), e = dim(rng, 2, 5);
                 return check(
                     [&](Tape&, std::span<const Var> in) {
                       return loss::reconstruction_loss(in[0], ad::l2_normalize(in[1], 1),
                                                        ad::l2_normalize(in[2], 1));
                     },
                     {randn({n, e}, rng), randn({n, e}, rng), randn({n, e}, rng)});
               }});
  v.push_back({"losses", "matrix_cosine", [](Rng& rng) {
                 const Shape s{dim(rng, 1, 5), dim(rng, 1, 5)};
                 return check([&](Tape&, std::span<const Var> in) { return loss::matrix_cosine(in[0], in[1]); },
                              {randn(s, rng), randn(s, rng)});
               }});
  v.push_back({"losses", "sra_from_similarities", [](Rng& rng) {
                 return check(
                     [&](Tape&, std::span<const Var> in) {
                       return loss::sra_from_similarities(ad::sum(in[0]), ad::sum(in[1]));
                     },
                     {uniform({1}, rng, 0.05, 1.0), uniform({1}, rng, 0.05, 1.0)});
               }});
  v.push_back({"losses", "sra", [](Rng& rng) {
                 const std::size_t s = dim(rng, 2, 3), n = dim(rng, s, 6);
                 Tensor id(Shape{n, s});
                 for (std::size_t r = 0; r < n; ++r) id(r, r < s ? r : dim(rng, 0, s - 1)) = 1.0;
                 const std::size_t h = dim(rng, 2, 6), e = dim(rng, 2, 5);
                 return check([&](Tape&, std::span<const Var> in) { return loss::sra_loss(in[0], in[1], id); },
                              {randn({n, h}, rng), randn({n, e}, rng)});
               }});
  return v;
}

std::vector<GradCase> model_cases() {
  std::vector<GradCase> v;
  v.push_back({"model", "mobe_linear", [](Rng& rng) {
                 const std::size_t in = dim(rng, 2, 6), out = dim(rng, 1, 5), S = dim(rng, 2, 4), n = dim(rng, 1, 5);
                 Rng init(rng());
                 MoBELinear layer("probe", in, out, S, std::min<std::size_t>({2, in, out}), true, init);
                 for (auto& b : layer.adapter_b) b.value = randn(b.value.shape(), rng);
                 const Tensor x = randn({n, in}, rng), omega = simplex_rows(n, S, rng), w = randn({n, out}, rng);
                 std::vector<Parameter*> params{&layer.weight, &layer.bias};
                 for (std::size_t s = 0; s < S; ++s) {
                   params.push_back(&layer.adapter_a[s]);
                   params.push_back(&layer.adapter_b[s]);
                 }
                 const double p = parameter_check(
                     [&](Tape& t) { return project(layer.forward(t, t.constant(x), &omega), w); }, params, rng);
                 // Input gradient through the same layer.
                 const double xin = check(
                     [&](Tape& t, std::span<const Var> leaf) { return project(layer.forward(t, leaf[0], &omega), w); },
                     {x});
                 return std::max(p, xin);
               }});
  v.push_back({"model", "decoder", [](Rng& rng) {
                 const ModelConfig cfg = tiny_model(rng);
                 DecoderModel model(cfg, rng());
                 for (auto* layer : model.mobe_layers()) {
                   for (auto& b : layer->adapter_b) b.value = randn(b.value.shape(), rng, 0.5);
                 }
                 const std::size_t n = 4;
                 const Tensor x = randn({n, cfg.input_dim}, rng);
                 const Tensor omega = simplex_rows(n, cfg.num_subjects, rng);
                 Tensor id(Shape{n, cfg.num_subjects});
                 for (std::size_t r = 0; r < n; ++r) id(r, r % cfg.num_subjects) = 1.0;
                 Tensor labels = uniform({n, cfg.num_classes}, rng, 0.0, 1.0);
                 for (auto& l : labels.storage()) l = l < 0.5 ? 0.0 : 1.0;
                 const Tensor y = randn({n, cfg.embed_dim}, rng);
                 auto groups = model.parameter_groups();
                 std::vector<Parameter*> params = groups.backbone_and_heads;
                 for (const auto& a : groups.adapters_by_subject) params.insert(params.end(), a.begin(), a.end());
                 return parameter_check(
                     [&](Tape& t) {
                       const ForwardOutput out = model.forward(t, x, omega);
                       const Var yv = ad::l2_normalize(t.constant(y), 1);
                       Var l = loss::classification_loss(out.class_logits, labels);
                       l = ad::add(l, loss::reconstruction_loss(out.prior, yv, ad::l2_normalize(out.retrieval, 1)));
                       return ad::add(l, ad::scale(loss::sra_loss(out.representation, yv, id), 0.5));
                     },
                     params, rng, 3);
               }});
  v.push_back({"model", "router", [](Rng& rng) {
                 const ModelConfig cfg = tiny_model(rng);
                 DecoderModel model(cfg, rng());
                 auto router = model.parameter_groups().router;
                 for (auto* p : router) p->value = randn(p->value.shape(), rng, 0.5);
                 const std::size_t n = 5;
                 const Tensor x = randn({n, cfg.input_dim}, rng);
                 const Tensor id = one_hot_rows(n, cfg.num_subjects, rng);
                 return parameter_check([&](Tape& t) { return loss::router_loss(model.router_logits(t, x), id); },
                                        router, rng);
               }});
  return v;
}

}  // namespace

std::vector<GradCase> gradcheck_cases(bool include_corrupt) {
  std::vector<GradCase> all = op_cases();
  for (auto& c : loss_cases()) all.push_back(std::move(c));
  for (auto& c : model_cases()) all.push_back(std::move(c));
  if (include_corrupt) {
    all.push_back({"fixture", "corrupt_square", [](Rng& rng) {
                     const Shape s{dim(rng, 1, 3), dim(rng, 1, 3)};
                     return check([](Tape&, std::span<const Var> in) { return ad::sum(corrupt_square(in[0])); },
                                  {uniform(s, rng, 0.5, 2.0)});
                   }});
  }
  return all;
}

std::vector<GradCaseReport> run_gradcheck_suite(const std::string& module, std::size_t trials,
                                                std::uint64_t seed, bool include_corrupt, double tolerance) {
  std::vector<GradCaseReport> out;
  if (trials == 0) return out;
  for (const auto& c : gradcheck_cases(include_corrupt)) {
    const bool selected = module == "all" || module == c.module || c.module == "fixture";
    if (!selected) continue;
    GradCaseReport r{c.module, c.name, trials, 0.0, true};
    for (std::size_t t = 0; t < trials; ++t) {
      Rng rng = make_rng(seed, c.name, t);
      r.worst = std::max(r.worst, c.trial(rng));
    }
    r.pass = r.worst < tolerance;
    out.push_back(r);
  }
  return out;
}

}  // namespace mobe
