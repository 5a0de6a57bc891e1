#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

namespace mobe {

/// Native acquisition grid of one subject (L x H x W voxels).
struct SubjectGeometry {
  int subject_id = 0;
  std::size_t depth = 1;
  std::size_t height = 1;
  std::size_t width = 1;

  std::size_t voxel_count() const { return depth * height * width; }
  void validate() const;
};

/// The shared template: `template_size` flattened slots and the ROI subset.
struct TemplateSpec {
  std::size_t template_size = 0;
  std::vector<bool> roi_mask;

  static TemplateSpec full(std::size_t size) { return {size, std::vector<bool>(size, true)}; }
  std::size_t roi_size() const;
  void validate() const;
};

/// For every template slot, the source voxels that land in it.
struct IndexMap {
  int subject_id = 0;
  std::size_t template_size = 0;
  std::size_t source_count = 0;
  std::vector<std::vector<std::size_t>> slots;

  /// Every source index is in range and appears in exactly one slot.
  void validate() const;
  /// slot_of[i] for every source voxel i.
  std::vector<std::size_t> source_slots() const;

  friend bool operator==(const IndexMap&, const IndexMap&) = default;
};

struct AlignedVoxelSequence {
  int subject_id = 0;
  std::vector<double> values;
};

enum class Jitter { kOff, kOn };

/// Monotone stretched assignment slot(i) = floor(i * d0 / voxel_count), then a
/// seeded shift of -1, 0 or +1 slot (clamped to the template) when jitter is on.
IndexMap build_index_map(const SubjectGeometry& geometry, const TemplateSpec& tmpl,
                         std::uint64_t seed, Jitter jitter = Jitter::kOn);

/// Averages the sources of each slot (zero for empty slots), keeps ROI slots,
/// and flattens them in slot order.
AlignedVoxelSequence anatomical_align(std::span<const double> raw, const IndexMap& map,
                                      const TemplateSpec& tmpl);

/// Sorted subset of `keep_length` positions out of `length`, drawn from `seed`.
std::vector<std::size_t> misalignment_indices(std::size_t length, std::size_t keep_length,
                                              std::uint64_t seed);

/// Random voxel dropout down to `keep_length` entries, original order kept.
AlignedVoxelSequence simulate_misalignment(const AlignedVoxelSequence& aligned,
                                           std::size_t keep_length, std::uint64_t seed);

/// Scatters an aligned sequence back to native voxels: each voxel takes the
/// value of its slot (non-ROI slots read as zero).
std::vector<double> inverse_align(const AlignedVoxelSequence& aligned, const IndexMap& map,
                                  const TemplateSpec& tmpl);

nlohmann::json to_json(const IndexMap& map);
IndexMap index_map_from_json(const nlohmann::json& j);

}  // namespace mobe
