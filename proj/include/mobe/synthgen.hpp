#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include <json.hpp>

#include "mobe/alignment.hpp"
#include "mobe/rng.hpp"
#include "mobe/tensor.hpp"

namespace mobe {

/// Shape and difficulty knobs of the simulated multi-subject recording.
struct SynthConfig {
  std::size_t subjects = 4;
  std::size_t latent_dim = 16;     // k
  std::size_t embed_dim = 64;      // e
  std::size_t num_classes = 8;     // C
  std::size_t template_size = 512; // d0
  double roi_fraction = 0.75;
  std::size_t train_per_subject = 1500;
  std::size_t test_shared = 200;
  double noise_sigma = 0.05;
  /// Native grids; cycled when there are more subjects than entries.
  std::vector<std::array<std::size_t, 3>> grids = {{8, 10, 10}, {6, 11, 11}, {3, 13, 17}, {5, 8, 16}};
  /// Weight of the idiosyncratic per-voxel component of each voxel's tuning (0 = none).
  double subject_specificity = 0.3;
  /// Strength of each subject's rotation of the latent code before the shared
  /// tuning map is applied (0 = every subject reads the same code).
  double pattern_rotation = 0.5;
  /// Norm of each voxel's tuning vector; sets the stimulus drive against noise_sigma.
  double tuning_gain = 0.02;
  /// Per-voxel bias standard deviation; the bias norm is about sqrt(voxel_count) times this.
  double bias_scale = 0.5;
  /// Gaussian smoothing width (in template slots) of the shared tuning map.
  double tuning_smoothness = 3.0;
  /// Relative tuning strength outside the ROI.
  double non_roi_gain = 0.2;
  bool jitter = true;
  bool misalign = false;
  double misalign_keep_fraction = 0.5;

  void validate() const;
};

nlohmann::json to_json(const SynthConfig& cfg);

/// Orthogonal k x k matrix, the identity at strength 0 and further from it as strength grows.
Tensor subject_rotation(std::size_t k, double strength, Rng& rng);

/// Generative parameters of one simulated subject.
struct SubjectProfile {
  int subject_id = 0;
  SubjectGeometry geometry;
  Tensor rotation;  // k x k orthogonal transform of the latent code
  Tensor mixing;    // voxel_count x k (empty when loaded from disk)
  std::vector<double> bias;
  double noise_sigma = 0.0;
  IndexMap index_map;
};

struct StimulusRecord {
  std::size_t stimulus_id = 0;
  std::vector<double> latent;
  std::vector<double> image_embedding;
  std::vector<int> labels;
};

/// Aligned sequences of one split of one subject, one row per sample.
struct SubjectSplit {
  Tensor x;
  std::vector<std::size_t> stimulus_ids;

  std::size_t size() const { return stimulus_ids.size(); }
};

struct Dataset {
  SynthConfig config;
  std::uint64_t seed = 0;
  TemplateSpec template_spec;
  std::vector<SubjectProfile> subjects;
  std::vector<SubjectSplit> train;
  std::vector<SubjectSplit> test;
  Tensor latents;     // N_stim x k
  Tensor embeddings;  // N_stim x e, unit rows
  Tensor labels;      // N_stim x C, {0,1}
  /// Per-subject kept positions when misalignment was applied.
  std::vector<std::vector<std::size_t>> misalign_indices;

  std::size_t num_subjects() const { return subjects.size(); }
  std::size_t input_dim() const { return train.empty() ? 0 : train[0].x.cols(); }
  std::size_t num_stimuli() const { return embeddings.rows(); }
  StimulusRecord stimulus(std::size_t id) const;
  /// One-hot identity rows for `count` samples of subject `s`.
  Tensor identity(std::size_t s, std::size_t count) const;
  std::uint64_t content_hash() const;
};

/// Simulates stimuli, subject responses tanh(W_s z + b_s) + noise, and their
/// anatomical alignment onto the shared template.
Dataset generate_dataset(const SynthConfig& cfg, std::uint64_t seed);

/// Keeps ceil(ratio * N_s) seeded training samples of one subject.
Dataset few_shot_subsample(const Dataset& data, std::size_t subject_id, double ratio,
                           std::uint64_t seed);

/// Restricts the dataset to one subject (renumbered as subject 0).
Dataset single_subject(const Dataset& data, std::size_t subject_id);

/// Independent per-subject voxel dropout to a common length, applied to every split.
void apply_misalignment(Dataset& data, std::size_t keep_length, std::uint64_t seed);

void save_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace mobe
