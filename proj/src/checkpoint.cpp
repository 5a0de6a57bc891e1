#include "mobe/checkpoint.hpp"

#include <fstream>
#include <map>
#include <stdexcept>

#include <json.hpp>

#include "mobe/serialize.hpp"

namespace mobe {

namespace fs = std::filesystem;
using nlohmann::json;

void save_checkpoint(DecoderModel& model, const fs::path& dir, const std::string& config_hash,
                     std::uint64_t seed) {
  fs::create_directories(dir);
  json params = json::array();
  std::size_t i = 0;
  for (const auto& info : describe_parameters(model)) {
    char file[32];
    std::snprintf(file, sizeof file, "p%04zu.mbt", i++);
    save_tensor(dir / file, info.param->value);
    params.push_back({{"name", info.param->name},
                      {"file", file},
                      {"group", info.group},
                      {"layer", info.layer},
                      {"subject", info.subject},
                      {"shape", info.param->value.shape()},
                      {"hash", hex64(tensor_hash(info.param->value))}});
  }
  json index{{"format", "mobe-checkpoint-1"},
             {"config_hash", config_hash},
             {"seed", seed},
             {"model_hash", hex64(model_hash(model))},
             {"parameters", params}};
  std::ofstream os(dir / "index.json");
  if (!os) throw std::runtime_error("cannot write " + (dir / "index.json").string());
  os << index.dump(2) << '\n';
}

void load_checkpoint(DecoderModel& model, const fs::path& dir) {
  std::ifstream is(dir / "index.json");
  if (!is) throw std::runtime_error("missing checkpoint index in " + dir.string());
  const json index = json::parse(is);
  std::map<std::string, std::string> files;
  for (const auto& p : index.at("parameters")) files[p.at("name")] = p.at("file");
  auto infos = describe_parameters(model);
  if (files.size() != infos.size()) {
    throw std::runtime_error("checkpoint has " + std::to_string(files.size()) +
                             " parameters, model has " + std::to_string(infos.size()));
  }
  for (auto& info : infos) {
    auto it = files.find(info.param->name);
    if (it == files.end()) throw std::runtime_error("checkpoint lacks " + info.param->name);
    Tensor t = load_tensor(dir / it->second);
    if (t.shape() != info.param->value.shape()) {
      throw ShapeError("checkpoint " + info.param->name + ": " + shape_str(t.shape()) + " vs " +
                       shape_str(info.param->value.shape()));
    }
    info.param->value = std::move(t);
  }
}

std::uint64_t model_hash(DecoderModel& model) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto* p : model.parameter_groups().all()) h = tensor_hash(p->value, h);
  return h;
}

}  // namespace mobe
