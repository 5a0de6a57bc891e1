#include "mobe/alignment.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <string>

#include "mobe/rng.hpp"
#include "mobe/tensor.hpp"

namespace mobe {

void SubjectGeometry::validate() const {
  if (depth == 0 || height == 0 || width == 0) {
    throw DomainError("subject " + std::to_string(subject_id) + " has an empty grid");
  }
}

std::size_t TemplateSpec::roi_size() const {
  return static_cast<std::size_t>(std::count(roi_mask.begin(), roi_mask.end(), true));
}

void TemplateSpec::validate() const {
  if (template_size == 0) throw DomainError("template size must be positive");
  if (roi_mask.size() != template_size) {
    throw ShapeError("ROI mask length " + std::to_string(roi_mask.size()) +
                     " != template size " + std::to_string(template_size));
  }
  if (roi_size() == 0) throw DomainError("ROI mask selects no template slot");
}

void IndexMap::validate() const {
  if (slots.size() != template_size) {
    throw ShapeError("index map has " + std::to_string(slots.size()) + " slots, template has " +
                     std::to_string(template_size));
  }
  std::vector<int> seen(source_count, 0);
  for (const auto& slot : slots) {
    for (auto src : slot) {
      if (src >= source_count) {
        throw DomainError("index map source " + std::to_string(src) + " >= voxel count " +
                          std::to_string(source_count));
      }
      ++seen[src];
    }
  }
  for (std::size_t i = 0; i < source_count; ++i) {
    if (seen[i] != 1) {
      throw DomainError("source voxel " + std::to_string(i) + " assigned " +
                        std::to_string(seen[i]) + " times");
    }
  }
}

std::vector<std::size_t> IndexMap::source_slots() const {
  std::vector<std::size_t> out(source_count, 0);
  for (std::size_t s = 0; s < slots.size(); ++s)
    for (auto src : slots[s]) out.at(src) = s;
  return out;
}

IndexMap build_index_map(const SubjectGeometry& geometry, const TemplateSpec& tmpl,
                         std::uint64_t seed, Jitter jitter) {
  geometry.validate();
  tmpl.validate();
  const std::size_t n = geometry.voxel_count();
  const std::size_t d0 = tmpl.template_size;
  IndexMap map{geometry.subject_id, d0, n, std::vector<std::vector<std::size_t>>(d0)};
  Rng rng = make_rng(seed, "index_map", static_cast<std::uint64_t>(geometry.subject_id));
  std::uniform_int_distribution<int> shift(-1, 1);
  for (std::size_t i = 0; i < n; ++i) {
    auto slot = static_cast<long long>((static_cast<unsigned __int128>(i) * d0) / n);
    if (jitter == Jitter::kOn) {
      slot = std::clamp<long long>(slot + shift(rng), 0, static_cast<long long>(d0) - 1);
    }
    map.slots[static_cast<std::size_t>(slot)].push_back(i);
  }
  return map;
}

AlignedVoxelSequence anatomical_align(std::span<const double> raw, const IndexMap& map,
                                      const TemplateSpec& tmpl) {
  if (raw.size() != map.source_count) {
    throw ShapeError("anatomical_align: raw length " + std::to_string(raw.size()) +
                     " != voxel count " + std::to_string(map.source_count));
  }
  if (map.template_size != tmpl.template_size) {
    throw ShapeError("anatomical_align: map template size " + std::to_string(map.template_size) +
                     " != template " + std::to_string(tmpl.template_size));
  }
  AlignedVoxelSequence out{map.subject_id, {}};
  out.values.reserve(tmpl.roi_size());
  for (std::size_t s = 0; s < map.template_size; ++s) {
    if (!tmpl.roi_mask[s]) continue;
    const auto& src = map.slots[s];
    double acc = 0.0;
    for (auto i : src) acc += raw[i];
    out.values.push_back(src.empty() ? 0.0 : acc / static_cast<double>(src.size()));
  }
  return out;
}

std::vector<std::size_t> misalignment_indices(std::size_t length, std::size_t keep_length,
                                              std::uint64_t seed) {
  if (keep_length == 0) throw DomainError("misalignment keep_length must be positive");
  if (keep_length > length) {
    throw DomainError("misalignment keep_length " + std::to_string(keep_length) +
                      " exceeds sequence length " + std::to_string(length));
  }
  std::vector<std::size_t> idx(length);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = make_rng(seed, "voxel_dropout");
  // Partial Fisher-Yates: the first keep_length entries are a uniform subset.
  for (std::size_t i = 0; i < keep_length; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, length - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(keep_length);
  std::sort(idx.begin(), idx.end());
  return idx;
}

AlignedVoxelSequence simulate_misalignment(const AlignedVoxelSequence& aligned,
                                           std::size_t keep_length, std::uint64_t seed) {
  const auto idx = misalignment_indices(aligned.values.size(), keep_length, seed);
  AlignedVoxelSequence out{aligned.subject_id, {}};
  out.values.reserve(keep_length);
  for (auto i : idx) out.values.push_back(aligned.values[i]);
  return out;
}

std::vector<double> inverse_align(const AlignedVoxelSequence& aligned, const IndexMap& map,
                                  const TemplateSpec& tmpl) {
  if (aligned.values.size() != tmpl.roi_size()) {
    throw ShapeError("inverse_align: sequence length " + std::to_string(aligned.values.size()) +
                     " != ROI size " + std::to_string(tmpl.roi_size()));
  }
  std::vector<double> slot_values(tmpl.template_size, 0.0);
  std::size_t k = 0;
  for (std::size_t s = 0; s < tmpl.template_size; ++s) {
    if (tmpl.roi_mask[s]) slot_values[s] = aligned.values[k++];
  }
  std::vector<double> raw(map.source_count, 0.0);
  for (std::size_t s = 0; s < map.slots.size(); ++s)
    for (auto i : map.slots[s]) raw[i] = slot_values[s];
  return raw;
}

nlohmann::json to_json(const IndexMap& map) {
  return nlohmann::json{{"subject_id", map.subject_id},
                        {"template_size", map.template_size},
                        {"slots", map.slots}};
}

IndexMap index_map_from_json(const nlohmann::json& j) {
  IndexMap map;
  map.subject_id = j.at("subject_id").get<int>();
  map.template_size = j.at("template_size").get<std::size_t>();
  map.slots = j.at("slots").get<std::vector<std::vector<std::size_t>>>();
  std::size_t n = 0;
  for (const auto& s : map.slots) n += s.size();
  map.source_count = n;
  map.validate();
  return map;
}

}  // namespace mobe
