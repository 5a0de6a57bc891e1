#include "mobe/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "mobe/rng.hpp"

namespace mobe {
namespace {

void require_same_shape(const Tensor& scores, const Tensor& labels, const char* what) {
  if (scores.shape() != labels.shape() || scores.rank() != 2) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(scores.shape()) + " vs " +
                     shape_str(labels.shape()));
  }
}

std::vector<std::size_t> rank_descending(const Tensor& scores, std::size_t c) {
  std::vector<std::size_t> order(scores.rows());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores(a, c) > scores(b, c); });
  return order;
}

std::string fmt(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream os;
  os.precision(17);
  os << *v;
  return os.str();
}

nlohmann::json opt(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

std::optional<double> read_opt(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

}  // namespace

CategoryAverage mean_average_precision(const Tensor& scores, const Tensor& labels) {
  require_same_shape(scores, labels, "mean_average_precision");
  CategoryAverage out;
  // Extended precision keeps small rational cases (e.g. 5/6) correctly rounded.
  long double total = 0.0;
  std::size_t used = 0;
  for (std::size_t c = 0; c < scores.cols(); ++c) {
    const auto order = rank_descending(scores, c);
    long double hits = 0.0, ap = 0.0;
    for (std::size_t k = 0; k < order.size(); ++k) {
      if (labels(order[k], c) > 0.5) {
        hits += 1.0;
        ap += hits / static_cast<long double>(k + 1);
      }
    }
    if (hits == 0.0) {
      out.skipped.push_back(c);
      continue;
    }
    total += ap / hits;
    ++used;
  }
  if (used == 0) throw DomainError("mean_average_precision: no category has a positive label");
  out.value = static_cast<double>(total / static_cast<long double>(used));
  return out;
}

CategoryAverage roc_auc(const Tensor& scores, const Tensor& labels) {
  require_same_shape(scores, labels, "roc_auc");
  CategoryAverage out;
  double total = 0.0;
  std::size_t used = 0;
  const std::size_t n = scores.rows();
  for (std::size_t c = 0; c < scores.cols(); ++c) {
    // Mann-Whitney U with mid-ranks for ties.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores(a, c) < scores(b, c); });
    double pos = 0.0, rank_sum = 0.0;
    for (std::size_t i = 0; i < n;) {
      std::size_t j = i;
      while (j < n && scores(order[j], c) == scores(order[i], c)) ++j;
      const double mid = 0.5 * static_cast<double>(i + 1 + j);
      for (std::size_t k = i; k < j; ++k) {
        if (labels(order[k], c) > 0.5) {
          pos += 1.0;
          rank_sum += mid;
        }
      }
      i = j;
    }
    const double neg = static_cast<double>(n) - pos;
    if (pos == 0.0 || neg == 0.0) {
      out.skipped.push_back(c);
      continue;
    }
    total += (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
    ++used;
  }
  if (used == 0) throw DomainError("roc_auc: every category is degenerate");
  out.value = total / static_cast<double>(used);
  return out;
}

double hamming_distance(const Tensor& scores, const Tensor& labels) {
  require_same_shape(scores, labels, "hamming_distance");
  std::size_t mismatches = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool predicted = scores[i] > 0.0;  // sigmoid(s) > 0.5
    const bool actual = labels[i] > 0.5;
    mismatches += predicted != actual;
  }
  return static_cast<double>(mismatches) / static_cast<double>(scores.size());
}

std::vector<std::size_t> sample_pool(std::size_t gallery_size, std::size_t partner,
                                     std::size_t pool_size, std::uint64_t seed) {
  if (pool_size < 2) throw DomainError("retrieval pool size must be at least 2");
  if (pool_size > gallery_size) {
    throw DomainError("retrieval pool size " + std::to_string(pool_size) + " exceeds gallery of " +
                      std::to_string(gallery_size));
  }
  std::vector<std::size_t> others;
  others.reserve(gallery_size - 1);
  for (std::size_t i = 0; i < gallery_size; ++i)
    if (i != partner) others.push_back(i);
  std::vector<std::size_t> pool{partner};
  if (pool_size - 1 == others.size()) {
    pool.insert(pool.end(), others.begin(), others.end());
    return pool;
  }
  Rng rng(seed);
  for (std::size_t i = 0; i + 1 < pool_size; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, others.size() - 1);
    std::swap(others[i], others[pick(rng)]);
    pool.push_back(others[i]);
  }
  return pool;
}

double retrieval_accuracy(const Tensor& queries, const Tensor& gallery,
                          const RetrievalOptions& opts) {
  if (queries.shape() != gallery.shape() || queries.rank() != 2) {
    throw ShapeError("retrieval_accuracy: shape mismatch " + shape_str(queries.shape()) + " vs " +
                     shape_str(gallery.shape()));
  }
  if (opts.pool_size < 2) throw DomainError("retrieval pool size must be at least 2");
  const std::size_t n = queries.rows(), d = queries.cols();
  const std::size_t pool_size = std::min(opts.pool_size, n);
  if (pool_size < 2) throw DomainError("retrieval needs at least 2 gallery items");
  auto unit = [d](const Tensor& t) {
    Tensor u = t;
    for (std::size_t r = 0; r < t.rows(); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += t(r, c) * t(r, c);
      const double norm = std::sqrt(s);
      for (std::size_t c = 0; c < d; ++c) u(r, c) = norm > 0.0 ? t(r, c) / norm : 0.0;
    }
    return u;
  };
  const Tensor q = unit(queries), g = unit(gallery);
  Tensor sim(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += q(i, c) * g(j, c);
      sim(i, j) = s;
    }
  std::size_t hits = 0, trials = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t r = 0; r < opts.repeats; ++r) {
      const auto pool = sample_pool(n, i, pool_size, derive_seed(opts.seed, "pool", i * opts.repeats + r));
      const double target = sim(i, i);
      bool best = true;
      for (std::size_t k = 1; k < pool.size() && best; ++k) best = sim(i, pool[k]) < target;
      hits += best;
      ++trials;
    }
  }
  return trials ? static_cast<double>(hits) / static_cast<double>(trials) : 0.0;
}

std::optional<double> SubjectMetrics::retrieval() const {
  if (!image_retrieval || !fmri_retrieval) return std::nullopt;
  return 0.5 * (*image_retrieval + *fmri_retrieval);
}

void MetricsReport::finalize() {
  average = SubjectMetrics{};
  if (per_subject.empty()) return;
  auto mean_of = [&](std::optional<double> SubjectMetrics::*field) -> std::optional<double> {
    double s = 0.0;
    for (const auto& m : per_subject) {
      if (!(m.*field)) return std::nullopt;
      s += *(m.*field);
    }
    return s / static_cast<double>(per_subject.size());
  };
  average.mean_ap = mean_of(&SubjectMetrics::mean_ap);
  average.auc = mean_of(&SubjectMetrics::auc);
  average.hamming = mean_of(&SubjectMetrics::hamming);
  average.image_retrieval = mean_of(&SubjectMetrics::image_retrieval);
  average.fmri_retrieval = mean_of(&SubjectMetrics::fmri_retrieval);
}

nlohmann::json to_json(const SubjectMetrics& m) {
  return nlohmann::json{{"mAP", opt(m.mean_ap)},
                        {"AUC", opt(m.auc)},
                        {"hamming", opt(m.hamming)},
                        {"image_retrieval_acc", opt(m.image_retrieval)},
                        {"fmri_retrieval_acc", opt(m.fmri_retrieval)}};
}

nlohmann::json to_json(const MetricsReport& r, bool with_timing) {
  nlohmann::json subjects = nlohmann::json::array();
  for (const auto& m : r.per_subject) subjects.push_back(to_json(m));
  nlohmann::json j{{"label", r.label},
                   {"task", r.task},
                   {"seed", r.seed},
                   {"config_hash", r.config_hash},
                   {"dataset_hash", r.dataset_hash},
                   {"config", r.config},
                   {"per_subject", subjects},
                   {"average", to_json(r.average)}};
  if (with_timing) j["wall_clock_seconds"] = r.wall_clock_seconds;
  return j;
}

MetricsReport report_from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.label = j.at("label");
  r.task = j.at("task");
  r.seed = j.at("seed");
  r.config_hash = j.at("config_hash");
  r.dataset_hash = j.at("dataset_hash");
  r.config = j.at("config");
  auto read = [](const nlohmann::json& m) {
    SubjectMetrics s;
    s.mean_ap = read_opt(m, "mAP");
    s.auc = read_opt(m, "AUC");
    s.hamming = read_opt(m, "hamming");
    s.image_retrieval = read_opt(m, "image_retrieval_acc");
    s.fmri_retrieval = read_opt(m, "fmri_retrieval_acc");
    return s;
  };
  for (const auto& m : j.at("per_subject")) r.per_subject.push_back(read(m));
  r.average = read(j.at("average"));
  if (j.contains("wall_clock_seconds")) r.wall_clock_seconds = j.at("wall_clock_seconds");
  return r;
}

std::string csv_header() {
  return "label,combo,task,seed,subject,mAP,AUC,hamming,image_retrieval_acc,fmri_retrieval_acc,"
         "config_hash,dataset_hash";
}

std::vector<std::string> csv_rows(const MetricsReport& r, const std::string& combo) {
  std::vector<std::string> rows;
  auto row = [&](const std::string& subject, const SubjectMetrics& m) {
    std::ostringstream os;
    os << r.label << ',' << combo << ',' << r.task << ',' << r.seed << ',' << subject << ','
       << fmt(m.mean_ap) << ',' << fmt(m.auc) << ',' << fmt(m.hamming) << ','
       << fmt(m.image_retrieval) << ',' << fmt(m.fmri_retrieval) << ',' << r.config_hash << ','
       << r.dataset_hash;
    rows.push_back(os.str());
  };
  for (std::size_t s = 0; s < r.per_subject.size(); ++s) row(std::to_string(s), r.per_subject[s]);
  row("avg", r.average);
  return rows;
}

}  // namespace mobe
