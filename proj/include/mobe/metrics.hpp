#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mobe/tensor.hpp"

namespace mobe {

/// A macro-averaged metric plus the categories left out of the average.
struct CategoryAverage {
  double value = 0.0;
  std::vector<std::size_t> skipped;
};

/// Mean over categories of average precision; categories without positives are skipped.
CategoryAverage mean_average_precision(const Tensor& scores, const Tensor& labels);

/// Macro ROC AUC, P(s+ > s-) + P(tie)/2 per category; degenerate categories are skipped.
CategoryAverage roc_auc(const Tensor& scores, const Tensor& labels);

/// Fraction of positions where sigmoid(score) > 0.5 disagrees with the label.
double hamming_distance(const Tensor& scores, const Tensor& labels);

enum class RetrievalDirection { kImage, kFmri };

struct RetrievalOptions {
  std::size_t pool_size = 300;
  std::size_t repeats = 30;
  std::uint64_t seed = 0;
};

/// Pool for one query: the partner index first, then pool_size-1 distinct
/// distractors drawn without replacement from the other gallery items.
std::vector<std::size_t> sample_pool(std::size_t gallery_size, std::size_t partner,
                                     std::size_t pool_size, std::uint64_t seed);

/// Top-1 accuracy of finding row i of `gallery` for query row i of `queries`
/// by cosine similarity inside seeded candidate pools. A tie with any
/// distractor counts as a miss. The pool is min(pool_size, gallery rows).
double retrieval_accuracy(const Tensor& queries, const Tensor& gallery,
                          const RetrievalOptions& opts);

struct SubjectMetrics {
  std::optional<double> mean_ap;
  std::optional<double> auc;
  std::optional<double> hamming;
  std::optional<double> image_retrieval;
  std::optional<double> fmri_retrieval;

  /// Mean of the two retrieval directions.
  std::optional<double> retrieval() const;
};

struct MetricsReport {
  std::string label;
  std::string task;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string dataset_hash;
  nlohmann::json config;
  std::vector<SubjectMetrics> per_subject;
  SubjectMetrics average;
  double wall_clock_seconds = 0.0;

  /// Recomputes `average` as the arithmetic mean of per-subject values.
  void finalize();
};

/// Timing is excluded when `with_timing` is false so reports can be compared bit-for-bit.
nlohmann::json to_json(const SubjectMetrics& m);
nlohmann::json to_json(const MetricsReport& r, bool with_timing = true);
MetricsReport report_from_json(const nlohmann::json& j);

std::string csv_header();
/// One row per subject plus an "avg" row.
std::vector<std::string> csv_rows(const MetricsReport& r, const std::string& combo);

}  // namespace mobe
