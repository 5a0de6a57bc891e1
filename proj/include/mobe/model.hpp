#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mobe/autodiff.hpp"
#include "mobe/rng.hpp"
#include "mobe/tensor.hpp"

namespace mobe {

/// Process-wide counters used to assert which computations a pipeline ran.
struct OpCounters {
  std::atomic<std::uint64_t> adapter_branches{0};
  std::atomic<std::uint64_t> gram_matrices{0};
  std::atomic<std::uint64_t> router_evaluations{0};

  void reset() {
    adapter_branches = 0;
    gram_matrices = 0;
    router_evaluations = 0;
  }
};
OpCounters& op_counters();

/// Throws unless every row of `omega` is a probability vector (tolerance 1e-9).
void check_simplex(const Tensor& omega, std::size_t subjects);

/// Linear layer with a shared weight and one low-rank adapter B_s A_s per
/// subject. Output: x W^T + b + sum_s omega_s * scale * (x A_s^T) B_s^T.
/// Adapters touch the weight only, never the bias.
class MoBELinear {
 public:
  MoBELinear() = default;
  MoBELinear(std::string name, std::size_t in, std::size_t out, std::size_t subjects,
             std::size_t rank, bool with_adapters, Rng& rng);

  ad::Var forward(ad::Tape& tape, ad::Var x, const Tensor* omega);
  /// The dense effective weight W + scale * sum_s omega_s B_s A_s for one routing vector.
  Tensor effective_weight(std::span<const double> omega) const;

  const std::string& name() const { return name_; }
  std::size_t in() const { return in_; }
  std::size_t out() const { return out_; }
  std::size_t rank() const { return rank_; }
  bool has_adapters() const { return !adapter_a.empty(); }

  Parameter weight;  // out x in
  Parameter bias;    // out
  std::vector<Parameter> adapter_a;  // per subject, rank x in (Gaussian init)
  std::vector<Parameter> adapter_b;  // per subject, out x rank (zero init)
  bool enabled = true;
  double scale = 1.0;

 private:
  std::string name_;
  std::size_t in_ = 0, out_ = 0, rank_ = 0;
};

struct ModelConfig {
  std::size_t input_dim = 0;
  std::size_t num_subjects = 4;
  std::size_t num_classes = 8;
  std::size_t embed_dim = 64;
  std::size_t hidden = 256;
  std::size_t res_blocks = 4;
  std::size_t rank = 16;
  double adapter_scale = 1.0;
  /// When false only the backbone layers carry adapters.
  bool adapters_on_heads = true;
  double dropout = 0.15;
  std::size_t router_hidden = 256;
  /// Width of the retrieval projector's inner layers relative to embed_dim.
  double retrieval_expansion = 8.0 / 3.0;

  void validate() const;
};

/// Subject classifier over aligned sequences: Linear-GELU-Linear, final layer zero-initialized.
class Router {
 public:
  Router() = default;
  Router(std::size_t input_dim, std::size_t hidden, std::size_t subjects, Rng& rng);

  ad::Var logits(ad::Tape& tape, ad::Var x);
  std::vector<Parameter*> parameters() { return {&w1, &b1, &w2, &b2}; }

  Parameter w1, b1, w2, b2;
};

enum HeadMask : unsigned {
  kHeadClassifier = 1u,
  kHeadRetrieval = 2u,
  kHeadPrior = 4u,
  kHeadAll = 7u,
};

struct ForwardOutput {
  ad::Var representation;  // f, batch x hidden
  ad::Var class_logits;    // batch x C
  ad::Var retrieval;       // H(f), batch x e, not normalized
  ad::Var prior;           // D(f), batch x e
};

struct ParameterGroups {
  std::vector<Parameter*> backbone_and_heads;
  std::vector<std::vector<Parameter*>> adapters_by_subject;
  std::vector<Parameter*> router;

  std::vector<Parameter*> all() const;
};

/// Residual MLP decoder with MoBE layers, the three task heads and the global router.
class DecoderModel {
 public:
  DecoderModel(const ModelConfig& cfg, std::uint64_t seed);
  DecoderModel(const DecoderModel&) = delete;
  DecoderModel& operator=(const DecoderModel&) = delete;

  const ModelConfig& config() const { return cfg_; }

  /// Routing weights are read from `omega` (batch x S); they are constants of the graph.
  ForwardOutput forward(ad::Tape& tape, const Tensor& x, const Tensor& omega,
                        unsigned heads = kHeadAll);
  /// Softmax of the router logits, computed without recording gradients.
  Tensor route(const Tensor& x);
  ad::Var router_logits(ad::Tape& tape, const Tensor& x);

  void set_adapters_enabled(bool on);
  bool adapters_enabled() const { return adapters_enabled_; }

  std::vector<MoBELinear*> mobe_layers();
  /// Layers carrying adapters (M in the adapter-count contract).
  std::size_t adapter_layer_count() const;
  ParameterGroups parameter_groups();

  struct ParamCount {
    std::size_t total = 0;
    std::size_t shared_weights = 0;  // sum of in*out over MoBE layers
    std::size_t adapters = 0;
    std::size_t router = 0;
    double adapter_share() const {
      return shared_weights ? static_cast<double>(adapters) / static_cast<double>(shared_weights) : 0.0;
    }
  };
  ParamCount count_parameters();

 private:
  struct ResBlock {
    MoBELinear linear;
    Parameter ln_gain, ln_shift;
  };

  ModelConfig cfg_;
  MoBELinear projector_;
  Parameter proj_ln_gain_, proj_ln_shift_;
  std::vector<ResBlock> blocks_;
  MoBELinear classifier_;
  std::vector<MoBELinear> retrieval_;
  MoBELinear prior_;
  Router router_;
  bool adapters_enabled_ = true;
};

/// Group label of a parameter for checkpoint indexes.
struct ParameterInfo {
  Parameter* param;
  std::string group;  // "backbone_and_heads", "adapters", "router"
  std::string layer;
  int subject;        // -1 unless an adapter
};
std::vector<ParameterInfo> describe_parameters(DecoderModel& model);

}  // namespace mobe
