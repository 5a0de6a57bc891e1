#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mobe/config.hpp"
#include "mobe/metrics.hpp"
#include "mobe/model.hpp"
#include "mobe/optim.hpp"
#include "mobe/synthgen.hpp"

namespace mobe {

/// A loss went NaN or infinite; training stops at once.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SampleRef {
  std::size_t subject = 0;
  std::size_t index = 0;  // row within the subject's split
};

/// Splits every subject's samples across batches in proportion to its size.
/// Each subject's shuffled samples get keys (position + u) / n_s; the merged
/// order is cut into max(1, N / batch_size) near-equal batches, so nothing is dropped.
std::vector<std::vector<SampleRef>> stratified_batches(const std::vector<std::size_t>& counts,
                                                       std::size_t batch_size, std::uint64_t seed);

/// Shuffled near-equal batches of one subject.
std::vector<std::vector<std::size_t>> subject_batches(std::size_t count, std::size_t batch_size,
                                                      std::uint64_t seed);

struct EpochLog {
  std::string phase;  // "phase1", "router", "inner", "outer"
  std::size_t step = 0;
  std::size_t epoch = 0;
  int subject = -1;
  double task_loss = 0.0;
  double sra_loss = 0.0;
  double total = 0.0;
  double lr = 0.0;
};
nlohmann::json to_json(const EpochLog& e);

struct RouterStats {
  std::vector<double> epoch_losses;
  double test_accuracy = 0.0;
  double mean_confidence = 0.0;
};

/// Group hashes around one loop of a meta step.
struct GroupHashes {
  std::uint64_t backbone_and_heads = 0;
  std::uint64_t router = 0;
  std::vector<std::uint64_t> adapters;  // per subject
};

struct MetaStepAudit {
  std::size_t step = 0;
  /// Inner loop per subject: everything but that subject's adapters untouched.
  std::vector<bool> inner_frozen_ok;
  std::vector<bool> inner_adapter_changed;
  /// Outer loop: adapters and router untouched.
  bool outer_frozen_ok = true;
  bool outer_backbone_changed = false;

  bool frozen_ok() const;
};

std::uint64_t group_hash(const std::vector<Parameter*>& params);
GroupHashes hash_groups(DecoderModel& model);

/// Drives both training phases of one model on one dataset.
class Trainer {
 public:
  Trainer(DecoderModel& model, const Dataset& data, const TrainConfig& cfg, std::uint64_t seed);

  void set_epoch_callback(std::function<void(const EpochLog&)> cb) { on_epoch_ = std::move(cb); }

  /// Shared backbone and heads on mixed-subject batches, adapters off.
  /// `epochs` overrides cfg.phase1_epochs when given. Returns per-epoch mean total loss.
  std::vector<double> train_phase1(std::optional<std::size_t> epochs = std::nullopt);
  /// Router on subject identities; frozen afterwards and its weights cached per sample.
  RouterStats train_router();
  /// One inner loop (adapters per subject) followed by one outer loop (backbone and heads).
  MetaStepAudit run_meta_step(std::size_t step);

  /// Mean task loss over the whole training union, evaluation mode.
  double query_task_loss();
  MetricsReport evaluate(const EvalConfig& eval, std::uint64_t pool_seed);

  const Tensor& train_omega(std::size_t s) const { return train_omega_.at(s); }

 private:
  struct BatchData {
    Tensor x, omega, identity, labels, embeddings;
    std::size_t subjects_present = 0;
  };
  struct LossParts {
    ad::Var task, sra, total;
  };

  BatchData gather(const std::vector<SampleRef>& refs) const;
  LossParts losses(ad::Tape& tape, const BatchData& b, bool with_sra);
  unsigned heads() const;
  void set_trainable(const std::vector<Parameter*>& trainable);
  void check_finite(double v, const char* where) const;
  void emit(const EpochLog& e) const;
  Tensor omega_for(const Tensor& x);

  DecoderModel& model_;
  const Dataset& data_;
  TrainConfig cfg_;
  std::uint64_t seed_;
  ParameterGroups groups_;
  AdamW backbone_opt_, adapter_opt_, router_opt_;
  std::vector<Tensor> train_omega_;
  bool router_trained_ = false;
  std::uint64_t tape_counter_ = 0;
  std::function<void(const EpochLog&)> on_epoch_;
};

struct RunOptions {
  /// Artifacts (checkpoints, log.jsonl, report.json) go here when non-empty.
  std::filesystem::path out_dir;
  std::function<void(const EpochLog&)> on_epoch;
};

struct RunResult {
  MetricsReport report;
  std::vector<double> phase1_curve;
  std::optional<RouterStats> router;
  std::vector<MetaStepAudit> audits;
  /// Query-set task loss before the first meta step, then after each.
  std::vector<double> query_curve;
  double task_loss_at_init = 0.0;
  double task_loss_after_phase1 = 0.0;
  std::uint64_t model_hash = 0;
};

/// The dataset the experiment trains on: generated (or `base`), then few-shot
/// subsampled and restricted to one subject as the config asks.
Dataset prepare_dataset(const ExperimentConfig& cfg, const Dataset* base = nullptr);

/// phase 1, then router and meta steps when MoBE is on; metrics on the shared test split.
RunResult run_experiment(const ExperimentConfig& cfg, const Dataset* base = nullptr,
                         const RunOptions& opts = {});

}  // namespace mobe
