#include "mobe/config.hpp"

#include <fstream>
#include <set>

#include "mobe/rng.hpp"
#include "mobe/serialize.hpp"

namespace mobe {
namespace {

using nlohmann::json;

// Reads fields of one section and rejects keys nobody asked for.
class SectionReader {
 public:
  SectionReader(const json& root, std::string section) : section_(std::move(section)) {
    if (root.contains(section_)) {
      node_ = root.at(section_);
      if (!node_.is_object()) throw ConfigError(section_, "config section '" + section_ + "' must be an object");
    } else {
      node_ = json::object();
    }
  }

  template <class T>
  void read(const char* key, T& out) {
    known_.insert(key);
    if (!node_.contains(key)) return;
    try {
      out = node_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(section_ + "." + key, "bad value for " + section_ + "." + key + ": " + e.what());
    }
  }

  bool has(const char* key) const { return node_.contains(key); }
  const json& raw(const char* key) {
    known_.insert(key);
    return node_.at(key);
  }

  void finish() const {
    for (auto it = node_.begin(); it != node_.end(); ++it) {
      if (!known_.count(it.key())) {
        throw ConfigError(section_ + "." + it.key(), "unknown config key " + section_ + "." + it.key());
      }
    }
  }

 private:
  std::string section_;
  json node_;
  std::set<std::string> known_;
};

}  // namespace

Task parse_task(const std::string& s) {
  if (s == "classification") return Task::kClassification;
  if (s == "retrieval") return Task::kRetrieval;
  if (s == "reconstruction") return Task::kReconstruction;
  throw ConfigError("train.task", "unknown task '" + s + "'");
}

std::string to_string(Task t) {
  switch (t) {
    case Task::kClassification: return "classification";
    case Task::kRetrieval: return "retrieval";
    case Task::kReconstruction: return "reconstruction";
  }
  return "retrieval";
}

AblationGrid parse_grid(const std::string& s) {
  if (s == "toggles") return AblationGrid::kToggles;
  if (s == "rank") return AblationGrid::kRank;
  if (s == "misalign") return AblationGrid::kMisalign;
  throw ConfigError("ablate.grid", "unknown ablation grid '" + s + "'");
}

std::string to_string(AblationGrid g) {
  switch (g) {
    case AblationGrid::kToggles: return "toggles";
    case AblationGrid::kRank: return "rank";
    case AblationGrid::kMisalign: return "misalign";
  }
  return "toggles";
}

TrainConfig TrainConfig::task_defaults(Task task) {
  TrainConfig t;
  t.task = task;
  switch (task) {
    case Task::kClassification:
      t.alpha = 0.1;
      t.phase1_epochs = 1000;
      t.router_epochs = 10;
      t.meta_steps = 10;
      t.support_epochs = 20;
      t.query_epochs = 5;
      t.lr = {LrScheduleKind::kLinearDecay, 1e-4, 0.01, 0.0};
      t.batch_size = 1024;
      t.support_batch_size = 1024;
      break;
    case Task::kRetrieval:
      t.alpha = 0.05;
      t.phase1_epochs = 300;
      t.router_epochs = 10;
      t.meta_steps = 10;
      t.support_epochs = 20;
      t.query_epochs = 5;
      t.lr = {LrScheduleKind::kConstant, 3e-4, 1.0, 0.0};
      t.batch_size = 300;
      t.support_batch_size = 300;
      break;
    case Task::kReconstruction:
      t.alpha = 0.05;
      t.phase1_epochs = 240;
      t.router_epochs = 10;
      t.meta_steps = 20;
      t.support_epochs = 10;
      t.query_epochs = 5;
      t.lr = {LrScheduleKind::kWarmupCosine, 1e-4, 0.1, 0.1};
      t.batch_size = 32;
      t.support_batch_size = 32;
      break;
  }
  t.weight_decay = 1e-4;
  return t;
}

void TrainConfig::validate() const {
  if (alpha < 0.0) throw ConfigError("train.alpha", "train.alpha must be non-negative");
  if (!(lr.base > 0.0)) throw ConfigError("train.lr", "train.lr must be positive");
  if (!(router_lr > 0.0)) throw ConfigError("train.router_lr", "train.router_lr must be positive");
  if (weight_decay < 0.0) throw ConfigError("train.weight_decay", "train.weight_decay must be non-negative");
  if (batch_size == 0 || support_batch_size == 0 || router_batch_size == 0) {
    throw ConfigError("train.batch_size", "batch sizes must be positive");
  }
  if (sra_enabled && batch_size < 2) {
    throw ConfigError("train.batch_size", "SRA needs train.batch_size >= 2");
  }
  if (!(temperature > 0.0)) throw ConfigError("train.temperature", "train.temperature must be positive");
  if (few_shot && !(few_shot->ratio > 0.0 && few_shot->ratio <= 1.0)) {
    throw ConfigError("train.few_shot_ratio", "few-shot ratio must be in (0,1]");
  }
  if (single_subject && (mobe_enabled || sra_enabled)) {
    throw ConfigError("train.single_subject",
                      "single-subject training needs mobe_enabled = false and sra_enabled = false");
  }
}

ModelConfig ExperimentConfig::model_config(std::size_t input_dim, std::size_t subjects,
                                           std::size_t classes, std::size_t embed_dim) const {
  ModelConfig m;
  m.input_dim = input_dim;
  m.num_subjects = subjects;
  m.num_classes = classes;
  m.embed_dim = embed_dim;
  m.hidden = model.hidden;
  m.res_blocks = model.res_blocks;
  m.rank = model.rank;
  m.adapter_scale = model.adapter_scale;
  m.adapters_on_heads = model.adapters_on_heads;
  m.dropout = model.dropout;
  m.router_hidden = model.router_hidden;
  m.retrieval_expansion = model.retrieval_expansion;
  return m;
}

json to_json(const ExperimentConfig& c) {
  const auto& t = c.train;
  json train{{"task", to_string(t.task)},
             {"alpha", t.alpha},
             {"phase1_epochs", t.phase1_epochs},
             {"router_epochs", t.router_epochs},
             {"meta_steps", t.meta_steps},
             {"support_epochs", t.support_epochs},
             {"query_epochs", t.query_epochs},
             {"lr", t.lr.base},
             {"lr_schedule", to_string(t.lr.kind)},
             {"lr_final_ratio", t.lr.final_ratio},
             {"lr_warmup_fraction", t.lr.warmup_fraction},
             {"router_lr", t.router_lr},
             {"weight_decay", t.weight_decay},
             {"batch_size", t.batch_size},
             {"support_batch_size", t.support_batch_size},
             {"router_batch_size", t.router_batch_size},
             {"temperature", t.temperature},
             {"mobe_enabled", t.mobe_enabled},
             {"sra_enabled", t.sra_enabled},
             {"few_shot_subject", t.few_shot ? json(t.few_shot->subject) : json(nullptr)},
             {"few_shot_ratio", t.few_shot ? json(t.few_shot->ratio) : json(nullptr)},
             {"single_subject", t.single_subject ? json(*t.single_subject) : json(nullptr)}};
  json model{{"hidden", c.model.hidden},
             {"res_blocks", c.model.res_blocks},
             {"rank", c.model.rank},
             {"adapter_scale", c.model.adapter_scale},
             {"adapters_on_heads", c.model.adapters_on_heads},
             {"dropout", c.model.dropout},
             {"router_hidden", c.model.router_hidden},
             {"retrieval_expansion", c.model.retrieval_expansion}};
  json eval{{"pool_size", c.eval.pool_size}, {"repeats", c.eval.repeats}};
  json ablate{{"grid", to_string(c.ablate.grid)}, {"seeds", c.ablate.seeds}, {"ranks", c.ablate.ranks}};
  return json{{"seed", c.seed},
              {"data", to_json(c.data)},
              {"model", model},
              {"train", train},
              {"eval", eval},
              {"ablate", ablate}};
}

ExperimentConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("", "config root must be an object");
  static const std::set<std::string> sections{"seed", "data", "model", "train", "eval", "ablate"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!sections.count(it.key())) throw ConfigError(it.key(), "unknown config key " + it.key());
  }
  ExperimentConfig c;
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();

  SectionReader d(j, "data");
  auto& dc = c.data;
  d.read("subjects", dc.subjects);
  d.read("latent_dim", dc.latent_dim);
  d.read("embed_dim", dc.embed_dim);
  d.read("num_classes", dc.num_classes);
  d.read("template_size", dc.template_size);
  d.read("roi_fraction", dc.roi_fraction);
  d.read("train_per_subject", dc.train_per_subject);
  d.read("test_shared", dc.test_shared);
  d.read("noise_sigma", dc.noise_sigma);
  d.read("grids", dc.grids);
  d.read("subject_specificity", dc.subject_specificity);
  d.read("pattern_rotation", dc.pattern_rotation);
  d.read("tuning_gain", dc.tuning_gain);
  d.read("bias_scale", dc.bias_scale);
  d.read("tuning_smoothness", dc.tuning_smoothness);
  d.read("non_roi_gain", dc.non_roi_gain);
  d.read("jitter", dc.jitter);
  d.read("misalign", dc.misalign);
  d.read("misalign_keep_fraction", dc.misalign_keep_fraction);
  d.finish();

  SectionReader m(j, "model");
  m.read("hidden", c.model.hidden);
  m.read("res_blocks", c.model.res_blocks);
  m.read("rank", c.model.rank);
  m.read("adapter_scale", c.model.adapter_scale);
  m.read("adapters_on_heads", c.model.adapters_on_heads);
  m.read("dropout", c.model.dropout);
  m.read("router_hidden", c.model.router_hidden);
  m.read("retrieval_expansion", c.model.retrieval_expansion);
  m.finish();

  SectionReader t(j, "train");
  std::string task = "retrieval";
  t.read("task", task);
  c.train = TrainConfig::task_defaults(parse_task(task));
  auto& tc = c.train;
  t.read("alpha", tc.alpha);
  t.read("phase1_epochs", tc.phase1_epochs);
  t.read("router_epochs", tc.router_epochs);
  t.read("meta_steps", tc.meta_steps);
  t.read("support_epochs", tc.support_epochs);
  t.read("query_epochs", tc.query_epochs);
  t.read("lr", tc.lr.base);
  std::string schedule = to_string(tc.lr.kind);
  t.read("lr_schedule", schedule);
  try {
    tc.lr.kind = parse_lr_schedule_kind(schedule);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("train.lr_schedule", e.what());
  }
  t.read("lr_final_ratio", tc.lr.final_ratio);
  t.read("lr_warmup_fraction", tc.lr.warmup_fraction);
  t.read("router_lr", tc.router_lr);
  t.read("weight_decay", tc.weight_decay);
  t.read("batch_size", tc.batch_size);
  t.read("support_batch_size", tc.support_batch_size);
  t.read("router_batch_size", tc.router_batch_size);
  t.read("temperature", tc.temperature);
  t.read("mobe_enabled", tc.mobe_enabled);
  t.read("sra_enabled", tc.sra_enabled);
  std::optional<std::size_t> fs_subject;
  std::optional<double> fs_ratio;
  if (t.has("few_shot_subject") && !t.raw("few_shot_subject").is_null()) {
    std::size_t v = 0;
    t.read("few_shot_subject", v);
    fs_subject = v;
  }
  if (t.has("few_shot_ratio") && !t.raw("few_shot_ratio").is_null()) {
    double v = 1.0;
    t.read("few_shot_ratio", v);
    fs_ratio = v;
  }
  if (fs_subject || fs_ratio) tc.few_shot = FewShotSpec{fs_subject.value_or(0), fs_ratio.value_or(1.0)};
  if (t.has("single_subject") && !t.raw("single_subject").is_null()) {
    std::size_t v = 0;
    t.read("single_subject", v);
    tc.single_subject = v;
  }
  t.finish();

  SectionReader e(j, "eval");
  e.read("pool_size", c.eval.pool_size);
  e.read("repeats", c.eval.repeats);
  e.finish();

  SectionReader a(j, "ablate");
  std::string grid = to_string(c.ablate.grid);
  a.read("grid", grid);
  c.ablate.grid = parse_grid(grid);
  a.read("seeds", c.ablate.seeds);
  a.read("ranks", c.ablate.ranks);
  a.finish();

  try {
    c.data.validate();
  } catch (const DomainError& err) {
    throw ConfigError("data", err.what());
  }
  tc.validate();
  if (c.eval.pool_size < 2) throw ConfigError("eval.pool_size", "eval.pool_size must be at least 2");
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("", "cannot read config file " + path);
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError("", "config file " + path + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
    throw ConfigError(assignment, "override must look like section.key=value: " + assignment);
  }
  const std::string section = assignment.substr(0, dot);
  const std::string key = assignment.substr(dot + 1, eq - dot - 1);
  const std::string value = assignment.substr(eq + 1);
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::exception&) {
    parsed = value;  // bare strings such as task names
  }
  j[section][key] = parsed;
}

std::uint64_t config_hash(const ExperimentConfig& cfg) { return fnv1a(to_json(cfg).dump()); }

std::string run_label(const TrainConfig& t) {
  if (t.single_subject) return "vanilla-single";
  if (t.mobe_enabled && t.sra_enabled) return "full";
  if (t.mobe_enabled) return "mobe-only";
  if (t.sra_enabled) return "sra-only";
  return "vanilla-multi";
}

std::vector<AblationRun> ablation_plan(const ExperimentConfig& base) {
  std::vector<std::pair<std::string, ExperimentConfig>> combos;
  switch (base.ablate.grid) {
    case AblationGrid::kToggles:
      for (bool mobe : {false, true}) {
        for (bool sra : {false, true}) {
          ExperimentConfig c = base;
          c.train.mobe_enabled = mobe;
          c.train.sra_enabled = sra;
          combos.emplace_back(run_label(c.train), c);
        }
      }
      break;
    case AblationGrid::kRank:
      for (auto r : base.ablate.ranks) {
        ExperimentConfig c = base;
        c.model.rank = r;
        combos.emplace_back("rank" + std::to_string(r), c);
      }
      break;
    case AblationGrid::kMisalign:
      for (bool mis : {false, true}) {
        ExperimentConfig c = base;
        c.data.misalign = mis;
        combos.emplace_back(mis ? "misaligned" : "aligned", c);
      }
      break;
  }
  std::vector<AblationRun> out;
  for (const auto& [combo, cfg] : combos) {
    for (std::size_t i = 0; i < base.ablate.seeds; ++i) {
      ExperimentConfig c = cfg;
      c.seed = base.seed + i;
      out.push_back({combo, c});
    }
  }
  return out;
}

}  // namespace mobe
