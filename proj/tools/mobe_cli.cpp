// mobe: dataset generation, training, evaluation, ablation grids and
// gradient checks from the command line.
//
// Exit codes: 0 success, 1 unexpected failure, 2 config error,
// 3 missing input, 4 numerical failure (NaN loss).

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mobe/checkpoint.hpp"
#include "mobe/config.hpp"
#include "mobe/gradcheck_suite.hpp"
#include "mobe/serialize.hpp"
#include "mobe/synthgen.hpp"
#include "mobe/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitMissing = 3;
constexpr int kExitNumerical = 4;

class MissingInput : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> few_shot;
  std::string task;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_path, "JSON config file (defaults apply when omitted)");
  cmd->add_option("--set", c.overrides, "Override a config entry, e.g. --set train.alpha=0.1");
  cmd->add_option("--seed", c.seed, "Root seed (beats MOBE_SEED and the config)");
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// "subj=0,ratio=0.1" or the two halves as separate tokens.
void apply_few_shot(json& j, const std::vector<std::string>& tokens) {
  if (tokens.empty()) return;
  for (const auto& tok : tokens) {
    for (const auto& kv : split(tok, ',')) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw mobe::ConfigError("few-shot", "--few-shot expects subj=N ratio=R");
      const std::string key = kv.substr(0, eq), value = kv.substr(eq + 1);
      try {
        if (key == "subj" || key == "subject") {
          j["train"]["few_shot_subject"] = std::stoul(value);
        } else if (key == "ratio") {
          j["train"]["few_shot_ratio"] = std::stod(value);
        } else {
          throw mobe::ConfigError("few-shot." + key, "unknown --few-shot field " + key);
        }
      } catch (const std::logic_error& e) {
        if (dynamic_cast<const mobe::ConfigError*>(&e) == nullptr) {
          throw mobe::ConfigError("few-shot." + key, "bad --few-shot value " + value);
        }
        throw;
      }
    }
  }
}

void apply_toggles(json& j, const std::string& toggles) {
  for (const auto& kv : split(toggles, ',')) {
    const auto eq = kv.find('=');
    const std::string key = kv.substr(0, eq);
    const std::string value = eq == std::string::npos ? "" : kv.substr(eq + 1);
    if (value != "on" && value != "off") {
      throw mobe::ConfigError("toggles." + key, "toggle values are on/off, got '" + kv + "'");
    }
    if (key == "mobe") {
      j["train"]["mobe_enabled"] = value == "on";
    } else if (key == "sra") {
      j["train"]["sra_enabled"] = value == "on";
    } else {
      throw mobe::ConfigError("toggles." + key, "unknown toggle " + key);
    }
  }
}

// File, then MOBE_SEED, then command-line flags.
mobe::ExperimentConfig resolve(const Common& c, const std::string& toggles = "") {
  json j = json::object();
  if (!c.config_path.empty()) {
    if (!fs::exists(c.config_path)) throw MissingInput("config file not found: " + c.config_path);
    std::ifstream is(c.config_path);
    try {
      j = json::parse(is);
    } catch (const json::exception& e) {
      throw mobe::ConfigError("", "config " + c.config_path + " is not valid JSON: " + e.what());
    }
  }
  if (const char* env = std::getenv("MOBE_SEED"); env != nullptr && *env != '\0') {
    try {
      j["seed"] = std::stoull(env);
    } catch (const std::exception&) {
      throw mobe::ConfigError("MOBE_SEED", std::string("MOBE_SEED is not an integer: ") + env);
    }
  }
  if (!c.task.empty()) j["train"]["task"] = c.task;
  for (const auto& o : c.overrides) mobe::apply_override(j, o);
  apply_few_shot(j, c.few_shot);
  if (!toggles.empty()) apply_toggles(j, toggles);
  if (c.seed) j["seed"] = *c.seed;
  return mobe::config_from_json(j);
}

void print_resolved(const mobe::ExperimentConfig& cfg) {
  std::cerr << "resolved config (hash " << mobe::hex64(mobe::config_hash(cfg)) << "):\n"
            << mobe::to_json(cfg).dump(2) << '\n';
}

mobe::Dataset load_data(const std::string& dir) {
  if (!fs::exists(fs::path(dir) / "manifest.json")) throw MissingInput("no dataset at " + dir);
  return mobe::load_dataset(dir);
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  os << j.dump(2) << '\n';
}

int cmd_gen(const Common& c, const std::string& out) {
  const auto cfg = resolve(c);
  print_resolved(cfg);
  mobe::Dataset data = mobe::generate_dataset(cfg.data, cfg.seed);
  if (cfg.train.few_shot) {
    data = mobe::few_shot_subsample(data, cfg.train.few_shot->subject, cfg.train.few_shot->ratio,
                                    mobe::derive_seed(cfg.seed, "few_shot"));
  }
  mobe::save_dataset(data, out);
  std::cout << "dataset " << mobe::hex64(data.content_hash()) << " written to " << out << '\n';
  for (std::size_t s = 0; s < data.num_subjects(); ++s) {
    std::cout << "  subject " << s << ": " << data.train[s].size() << " train, " << data.test[s].size()
              << " test, " << data.input_dim() << " dims\n";
  }
  return 0;
}

void print_report(const mobe::MetricsReport& r) {
  std::cout << "label " << r.label << "  task " << r.task << "  seed " << r.seed << '\n';
  auto show = [](const char* name, const std::optional<double>& v) {
    if (v) std::cout << "  " << name << ' ' << std::fixed << std::setprecision(4) << *v;
  };
  for (std::size_t s = 0; s <= r.per_subject.size(); ++s) {
    const bool avg = s == r.per_subject.size();
    const auto& m = avg ? r.average : r.per_subject[s];
    std::cout << (avg ? std::string("avg") : "subject " + std::to_string(s));
    show("mAP", m.mean_ap);
    show("AUC", m.auc);
    show("hamming", m.hamming);
    show("image_retrieval", m.image_retrieval);
    show("fmri_retrieval", m.fmri_retrieval);
    std::cout << '\n';
  }
  std::cout.unsetf(std::ios::floatfield);
}

int cmd_train(const Common& c, const std::string& toggles, const std::string& data_dir,
              const std::string& out) {
  auto cfg = resolve(c, toggles);
  std::optional<mobe::Dataset> data;
  if (!data_dir.empty()) {
    data = load_data(data_dir);
    cfg.data = data->config;
  }
  print_resolved(cfg);
  mobe::RunOptions opts;
  opts.out_dir = out;
  opts.on_epoch = [](const mobe::EpochLog& e) {
    std::cerr << e.phase << " step " << e.step << " epoch " << e.epoch;
    if (e.subject >= 0) std::cerr << " subject " << e.subject;
    std::cerr << " loss " << e.total << '\n';
  };
  write_json(fs::path(out) / "config.json", mobe::to_json(cfg));
  const auto res = mobe::run_experiment(cfg, data ? &*data : nullptr, opts);
  if (res.router) {
    std::cout << "router: test accuracy " << res.router->test_accuracy << ", mean confidence "
              << res.router->mean_confidence << '\n';
  }
  print_report(res.report);
  std::cout << "report written to " << (fs::path(out) / "report.json").string() << '\n';
  return 0;
}

int cmd_eval(const Common& c, const std::string& toggles, const std::string& data_dir,
             const std::string& ckpt, const std::string& out) {
  auto cfg = resolve(c, toggles);
  if (!fs::exists(fs::path(ckpt) / "index.json")) throw MissingInput("no checkpoint at " + ckpt);
  mobe::Dataset base;
  if (!data_dir.empty()) {
    base = load_data(data_dir);
    cfg.data = base.config;
  } else {
    base = mobe::generate_dataset(cfg.data, cfg.seed);
  }
  const mobe::Dataset data = mobe::prepare_dataset(cfg, &base);
  const auto mc = cfg.model_config(data.input_dim(), data.num_subjects(), data.labels.cols(),
                                   data.embeddings.cols());
  mobe::DecoderModel model(mc, mobe::derive_seed(cfg.seed, "model"));
  mobe::load_checkpoint(model, ckpt);
  mobe::Trainer trainer(model, data, cfg.train, mobe::derive_seed(cfg.seed, "train"));
  model.set_adapters_enabled(cfg.train.mobe_enabled);
  auto report = trainer.evaluate(cfg.eval, mobe::derive_seed(cfg.seed, "pools"));
  report.label = mobe::run_label(cfg.train);
  report.seed = cfg.seed;
  report.config_hash = mobe::hex64(mobe::config_hash(cfg));
  report.dataset_hash = mobe::hex64(data.content_hash());
  report.config = mobe::to_json(cfg);
  print_report(report);
  if (!out.empty()) write_json(out, mobe::to_json(report));
  return 0;
}

int cmd_ablate(const Common& c, const std::string& grid, std::optional<std::size_t> seeds,
               const std::string& out) {
  Common cc = c;
  if (!grid.empty()) cc.overrides.push_back("ablate.grid=\"" + grid + "\"");
  if (seeds) cc.overrides.push_back("ablate.seeds=" + std::to_string(*seeds));
  const auto cfg = resolve(cc);
  print_resolved(cfg);
  const auto plan = mobe::ablation_plan(cfg);
  fs::create_directories(out);
  std::ofstream csv(fs::path(out) / "ablation.csv");
  csv << mobe::csv_header() << '\n';
  std::cout << mobe::csv_header() << '\n';
  json reports = json::array();
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const auto& run = plan[i];
    std::cerr << "run " << i + 1 << "/" << plan.size() << ": " << run.combo << " seed " << run.config.seed
              << '\n';
    mobe::RunOptions opts;
    opts.out_dir = fs::path(out) / (run.combo + "_seed" + std::to_string(run.config.seed));
    const auto res = mobe::run_experiment(run.config, nullptr, opts);
    for (const auto& row : mobe::csv_rows(res.report, run.combo)) {
      csv << row << '\n';
      std::cout << row << '\n';
    }
    csv.flush();
    reports.push_back(mobe::to_json(res.report));
  }
  write_json(fs::path(out) / "reports.json", reports);
  return 0;
}

int cmd_gradcheck(const std::string& module, std::size_t trials, std::uint64_t seed, bool corrupt) {
  static const std::vector<std::string> modules{"all", "ops", "losses", "model"};
  if (std::find(modules.begin(), modules.end(), module) == modules.end()) {
    throw mobe::ConfigError("module", "unknown gradcheck module " + module);
  }
  const auto reports = mobe::run_gradcheck_suite(module, trials, seed, corrupt);
  bool ok = true;
  for (const auto& r : reports) {
    std::cout << (r.pass ? "PASS " : "FAIL ") << r.module << '/' << r.name << "  trials " << r.trials
              << "  worst_rel_error " << std::scientific << std::setprecision(3) << r.worst << '\n';
    ok = ok && r.pass;
  }
  std::cout << reports.size() << " checks, tolerance " << mobe::kGradcheckTolerance << '\n';
  return ok ? 0 : 1;
}

int cmd_params(const Common& c) {
  const auto cfg = resolve(c);
  const std::size_t input_dim = static_cast<std::size_t>(
      std::llround(cfg.data.roi_fraction * static_cast<double>(cfg.data.template_size)));
  const std::size_t dim = cfg.data.misalign
                              ? std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(
                                                             cfg.data.misalign_keep_fraction * input_dim)))
                              : input_dim;
  const auto mc = cfg.model_config(dim, cfg.data.subjects, cfg.data.num_classes, cfg.data.embed_dim);
  mobe::DecoderModel model(mc, cfg.seed);
  const auto count = model.count_parameters();
  json j{{"input_dim", dim},
         {"subjects", mc.num_subjects},
         {"rank", mc.rank},
         {"adapter_layers", model.adapter_layer_count()},
         {"total", count.total},
         {"shared_weights", count.shared_weights},
         {"adapters", count.adapters},
         {"router", count.router},
         {"adapter_share", count.adapter_share()}};
  json layers = json::array();
  for (auto* l : model.mobe_layers()) {
    layers.push_back({{"name", l->name()}, {"in", l->in()}, {"out", l->out()}, {"rank", l->rank()},
                      {"adapters", l->has_adapters()}});
  }
  j["layers"] = layers;
  std::cout << j.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-subject fMRI decoding with per-subject low-rank adapters"};
  app.require_subcommand(1);

  Common gen_c, train_c, eval_c, ablate_c, params_c;
  std::string gen_out = "data";
  auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset");
  add_common(gen, gen_c);
  gen->add_option("-o,--out", gen_out, "Output directory");
  gen->add_option("--few-shot", gen_c.few_shot, "Subsample one subject: subj=N ratio=R")->expected(1, 2);

  std::string train_toggles, train_data, train_out = "run";
  auto* train = app.add_subcommand("train", "Run the full training pipeline");
  add_common(train, train_c);
  train->add_option("--task", train_c.task, "classification, retrieval or reconstruction");
  train->add_option("--toggles", train_toggles, "e.g. mobe=off,sra=off");
  train->add_option("--few-shot", train_c.few_shot, "Subsample one subject: subj=N ratio=R")->expected(1, 2);
  train->add_option("--data", train_data, "Dataset directory (generated from the config when omitted)");
  train->add_option("-o,--out", train_out, "Output directory");

  std::string eval_toggles, eval_data, eval_ckpt, eval_out;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the shared test split");
  add_common(eval, eval_c);
  eval->add_option("--task", eval_c.task, "classification, retrieval or reconstruction");
  eval->add_option("--toggles", eval_toggles, "e.g. mobe=off,sra=off");
  eval->add_option("--few-shot", eval_c.few_shot, "Subsample one subject: subj=N ratio=R")->expected(1, 2);
  eval->add_option("--data", eval_data, "Dataset directory");
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint directory")->required();
  eval->add_option("-o,--out", eval_out, "Write the report JSON here");

  std::string grid, ablate_out = "ablation";
  std::optional<std::size_t> ablate_seeds;
  auto* ablate = app.add_subcommand("ablate", "Run an ablation grid and write a CSV");
  add_common(ablate, ablate_c);
  ablate->add_option("--task", ablate_c.task, "classification, retrieval or reconstruction");
  ablate->add_option("--grid", grid, "toggles, rank or misalign");
  ablate->add_option("--seeds", ablate_seeds, "Seeds per combination");
  ablate->add_option("-o,--out", ablate_out, "Output directory");

  std::string gc_module = "all";
  std::size_t gc_trials = 20;
  std::uint64_t gc_seed = 0;
  bool gc_corrupt = false;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gradcheck->add_option("--module", gc_module, "all, ops, losses or model");
  gradcheck->add_option("--trials", gc_trials, "Random instances per check");
  gradcheck->add_option("--seed", gc_seed, "Seed of the random instances");
  gradcheck->add_flag("--corrupt", gc_corrupt, "Add an op with a wrong backward (negative control)");

  auto* params = app.add_subcommand("params", "Parameter counts of the configured model");
  add_common(params, params_c);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return cmd_gen(gen_c, gen_out);
    if (*train) return cmd_train(train_c, train_toggles, train_data, train_out);
    if (*eval) return cmd_eval(eval_c, eval_toggles, eval_data, eval_ckpt, eval_out);
    if (*ablate) return cmd_ablate(ablate_c, grid, ablate_seeds, ablate_out);
    if (*gradcheck) return cmd_gradcheck(gc_module, gc_trials, gc_seed, gc_corrupt);
    if (*params) return cmd_params(params_c);
  } catch (const mobe::ConfigError& e) {
    std::cerr << "config error [" << e.key() << "]: " << e.what() << '\n';
    return kExitConfig;
  } catch (const MissingInput& e) {
    std::cerr << "missing input: " << e.what() << '\n';
    return kExitMissing;
  } catch (const mobe::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
