#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mobe/model.hpp"
#include "mobe/optim.hpp"
#include "mobe/synthgen.hpp"

namespace mobe {

/// Invalid configuration; `key()` names the offending entry.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& what)
      : std::runtime_error(what), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

enum class Task { kClassification, kRetrieval, kReconstruction };

Task parse_task(const std::string& s);
std::string to_string(Task t);

struct FewShotSpec {
  std::size_t subject = 0;
  double ratio = 1.0;
};

struct TrainConfig {
  Task task = Task::kRetrieval;
  double alpha = 0.05;
  std::size_t phase1_epochs = 300;
  std::size_t router_epochs = 10;
  std::size_t meta_steps = 10;
  std::size_t support_epochs = 20;
  std::size_t query_epochs = 5;
  LrSchedule lr{LrScheduleKind::kConstant, 3e-4, 1.0, 0.0};
  double router_lr = 1e-3;
  double weight_decay = 1e-4;
  std::size_t batch_size = 300;
  std::size_t support_batch_size = 300;
  std::size_t router_batch_size = 256;
  double temperature = 1.0;
  bool mobe_enabled = true;
  bool sra_enabled = true;
  std::optional<FewShotSpec> few_shot;
  /// Train and evaluate on this subject alone (the single-subject baseline).
  std::optional<std::size_t> single_subject;

  /// Schedule constants used at full scale for each task.
  static TrainConfig task_defaults(Task task);
  void validate() const;
};

struct EvalConfig {
  std::size_t pool_size = 300;
  std::size_t repeats = 30;
};

enum class AblationGrid { kToggles, kRank, kMisalign };
AblationGrid parse_grid(const std::string& s);
std::string to_string(AblationGrid g);

struct AblateConfig {
  AblationGrid grid = AblationGrid::kToggles;
  std::size_t seeds = 3;
  std::vector<std::size_t> ranks = {2, 4, 8, 16, 32};
};

/// Model-shape settings; input/subject/class/embedding sizes come from the data.
struct ModelSection {
  std::size_t hidden = 256;
  std::size_t res_blocks = 4;
  std::size_t rank = 16;
  double adapter_scale = 1.0;
  bool adapters_on_heads = true;
  double dropout = 0.15;
  std::size_t router_hidden = 256;
  double retrieval_expansion = 8.0 / 3.0;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  SynthConfig data;
  ModelSection model;
  TrainConfig train;
  EvalConfig eval;
  AblateConfig ablate;

  ModelConfig model_config(std::size_t input_dim, std::size_t subjects, std::size_t classes,
                           std::size_t embed_dim) const;
};

/// Full resolved configuration, sections data/model/train/eval/ablate.
nlohmann::json to_json(const ExperimentConfig& cfg);
/// Missing keys take defaults (train defaults follow train.task); unknown keys throw ConfigError.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::string& path);
/// Overrides "section.key=value" pairs into a config JSON document.
void apply_override(nlohmann::json& j, const std::string& assignment);

std::uint64_t config_hash(const ExperimentConfig& cfg);

/// Label of a toggle combination, e.g. "vanilla-multi" or "full".
std::string run_label(const TrainConfig& t);

struct AblationRun {
  std::string combo;
  ExperimentConfig config;
};

/// Every (combo, seed) run of the configured grid. Seeds are base.seed,
/// base.seed + 1, ... for ablate.seeds runs per combo.
std::vector<AblationRun> ablation_plan(const ExperimentConfig& base);

}  // namespace mobe
