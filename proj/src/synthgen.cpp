#include "mobe/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <Eigen/Dense>

#include "mobe/rng.hpp"
#include "mobe/serialize.hpp"

namespace mobe {
namespace {

void normalize_in_place(std::span<double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  const double n = std::sqrt(s);
  if (n > 0.0)
    for (double& x : v) x /= n;
}

// Gaussian-smoothed random tuning over template slots, unit-norm rows.
Tensor shared_tuning(const SynthConfig& cfg, const TemplateSpec& tmpl, Rng& rng) {
  const std::size_t d0 = cfg.template_size, k = cfg.latent_dim;
  std::normal_distribution<double> normal;
  Tensor white(Shape{d0, k});
  for (auto& v : white.data()) v = normal(rng);
  Tensor out(Shape{d0, k});
  const double width = std::max(cfg.tuning_smoothness, 1e-9);
  const auto radius = static_cast<long long>(std::ceil(3.0 * width));
  for (std::size_t s = 0; s < d0; ++s) {
    for (long long o = -radius; o <= radius; ++o) {
      const long long t = static_cast<long long>(s) + o;
      if (t < 0 || t >= static_cast<long long>(d0)) continue;
      const double w = std::exp(-0.5 * static_cast<double>(o * o) / (width * width));
      for (std::size_t c = 0; c < k; ++c) out(s, c) += w * white(static_cast<std::size_t>(t), c);
    }
    normalize_in_place(std::span<double>(&out(s, 0), k));
    if (!tmpl.roi_mask[s])
      for (std::size_t c = 0; c < k; ++c) out(s, c) *= cfg.non_roi_gain;
  }
  return out;
}

TemplateSpec make_template(const SynthConfig& cfg, Rng& rng) {
  const std::size_t d0 = cfg.template_size;
  const auto len = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(cfg.roi_fraction * static_cast<double>(d0))), 1, d0);
  std::uniform_int_distribution<std::size_t> start_dist(0, d0 - len);
  const std::size_t start = start_dist(rng);
  TemplateSpec tmpl{d0, std::vector<bool>(d0, false)};
  for (std::size_t s = start; s < start + len; ++s) tmpl.roi_mask[s] = true;
  return tmpl;
}

std::filesystem::path split_file(const std::filesystem::path& dir, std::size_t s,
                                 const char* split, const char* what) {
  return dir / ("subject" + std::to_string(s) + "_" + split + "_" + what + ".mbt");
}

Tensor ids_tensor(const std::vector<std::size_t>& ids) {
  std::vector<double> v(ids.begin(), ids.end());
  return Tensor::vector(std::move(v));
}

std::vector<std::size_t> ids_from_tensor(const Tensor& t) {
  std::vector<std::size_t> out;
  out.reserve(t.size());
  for (double v : t.data()) out.push_back(static_cast<std::size_t>(v));
  return out;
}

}  // namespace

void SynthConfig::validate() const {
  if (subjects < 2) throw DomainError("synthetic data needs at least 2 subjects");
  if (num_classes < 2) throw DomainError("synthetic data needs at least 2 classes");
  if (latent_dim < num_classes) {
    throw DomainError("latent_dim (" + std::to_string(latent_dim) + ") must be >= num_classes (" +
                      std::to_string(num_classes) + ")");
  }
  if (embed_dim < 2) throw DomainError("embed_dim must be at least 2");
  if (train_per_subject == 0 || test_shared == 0) {
    throw DomainError("per-subject train and shared test counts must be positive");
  }
  if (template_size == 0) throw DomainError("template_size must be positive");
  if (!(roi_fraction > 0.0 && roi_fraction <= 1.0)) throw DomainError("roi_fraction must be in (0,1]");
  if (pattern_rotation < 0.0) throw DomainError("pattern_rotation must be non-negative");
  if (!(tuning_gain > 0.0)) throw DomainError("tuning_gain must be positive");
  if (noise_sigma < 0.0) throw DomainError("noise_sigma must be non-negative");
  if (grids.empty()) throw DomainError("at least one subject grid is required");
  if (subject_specificity < 0.0 || subject_specificity > 1.0) {
    throw DomainError("subject_specificity must be in [0,1]");
  }
  if (!(misalign_keep_fraction > 0.0 && misalign_keep_fraction <= 1.0)) {
    throw DomainError("misalign_keep_fraction must be in (0,1]");
  }
  for (const auto& g : grids) {
    if (g[0] * g[1] * g[2] < latent_dim) {
      throw DomainError("subject grid smaller than latent_dim; mixing cannot be full rank");
    }
  }
}

nlohmann::json to_json(const SynthConfig& c) {
  return nlohmann::json{{"subjects", c.subjects},
                        {"latent_dim", c.latent_dim},
                        {"embed_dim", c.embed_dim},
                        {"num_classes", c.num_classes},
                        {"template_size", c.template_size},
                        {"roi_fraction", c.roi_fraction},
                        {"train_per_subject", c.train_per_subject},
                        {"test_shared", c.test_shared},
                        {"noise_sigma", c.noise_sigma},
                        {"grids", c.grids},
                        {"subject_specificity", c.subject_specificity},
                        {"pattern_rotation", c.pattern_rotation},
                        {"tuning_gain", c.tuning_gain},
                        {"bias_scale", c.bias_scale},
                        {"tuning_smoothness", c.tuning_smoothness},
                        {"non_roi_gain", c.non_roi_gain},
                        {"jitter", c.jitter},
                        {"misalign", c.misalign},
                        {"misalign_keep_fraction", c.misalign_keep_fraction}};
}

StimulusRecord Dataset::stimulus(std::size_t id) const {
  StimulusRecord r;
  r.stimulus_id = id;
  const std::size_t k = latents.cols(), e = embeddings.cols(), c = labels.cols();
  r.latent.assign(latents.data().begin() + static_cast<std::ptrdiff_t>(id * k),
                  latents.data().begin() + static_cast<std::ptrdiff_t>((id + 1) * k));
  r.image_embedding.assign(embeddings.data().begin() + static_cast<std::ptrdiff_t>(id * e),
                           embeddings.data().begin() + static_cast<std::ptrdiff_t>((id + 1) * e));
  for (std::size_t j = 0; j < c; ++j) r.labels.push_back(static_cast<int>(labels(id, j)));
  return r;
}

Tensor Dataset::identity(std::size_t s, std::size_t count) const {
  Tensor out(Shape{count, num_subjects()});
  for (std::size_t i = 0; i < count; ++i) out(i, s) = 1.0;
  return out;
}

std::uint64_t Dataset::content_hash() const {
  std::uint64_t h = tensor_hash(embeddings);
  h = tensor_hash(labels, h);
  for (std::size_t s = 0; s < train.size(); ++s) {
    h = tensor_hash(train[s].x, h);
    h = tensor_hash(ids_tensor(train[s].stimulus_ids), h);
    h = tensor_hash(test[s].x, h);
    h = tensor_hash(ids_tensor(test[s].stimulus_ids), h);
  }
  return h;
}

Tensor subject_rotation(std::size_t k, double strength, Rng& rng) {
  // Cayley transform of a scaled random skew-symmetric matrix: exactly orthogonal,
  // the identity at strength 0.
  using Mat = Eigen::MatrixXd;
  std::normal_distribution<double> normal;
  Mat g(k, k);
  for (std::size_t r = 0; r < k; ++r) {
    for (std::size_t c = 0; c < k; ++c) g(r, c) = normal(rng);
  }
  const Mat a = (g - g.transpose()) * (strength / std::sqrt(2.0 * static_cast<double>(k)));
  const Mat eye = Mat::Identity(k, k);
  const Mat q = (eye - 0.5 * a).partialPivLu().solve(eye + 0.5 * a);
  Tensor out(Shape{k, k});
  for (std::size_t r = 0; r < k; ++r) {
    for (std::size_t c = 0; c < k; ++c) out(r, c) = q(r, c);
  }
  return out;
}

Dataset generate_dataset(const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Dataset data;
  data.config = cfg;
  data.seed = seed;
  const std::size_t S = cfg.subjects, k = cfg.latent_dim, e = cfg.embed_dim, C = cfg.num_classes;
  const std::size_t n_train = cfg.train_per_subject, n_test = cfg.test_shared;
  const std::size_t n_stim = S * n_train + n_test;

  Rng tmpl_rng = make_rng(seed, "template");
  data.template_spec = make_template(cfg, tmpl_rng);
  const Tensor tuning = shared_tuning(cfg, data.template_spec, tmpl_rng);

  // Stimuli: latent z, embedding normalize(P z), labels from latent signs.
  std::normal_distribution<double> normal;
  Rng proj_rng = make_rng(seed, "projection");
  Tensor proj(Shape{e, k});
  for (auto& v : proj.data()) v = normal(proj_rng);
  Rng stim_rng = make_rng(seed, "stimuli");
  data.latents = Tensor(Shape{n_stim, k});
  data.embeddings = Tensor(Shape{n_stim, e});
  data.labels = Tensor(Shape{n_stim, C});
  for (std::size_t i = 0; i < n_stim; ++i) {
    for (std::size_t j = 0; j < k; ++j) data.latents(i, j) = normal(stim_rng);
    for (std::size_t r = 0; r < e; ++r) {
      double acc = 0.0;
      for (std::size_t j = 0; j < k; ++j) acc += proj(r, j) * data.latents(i, j);
      data.embeddings(i, r) = acc;
    }
    normalize_in_place(std::span<double>(&data.embeddings(i, 0), e));
    for (std::size_t c = 0; c < C; ++c) data.labels(i, c) = data.latents(i, c) > 0.0 ? 1.0 : 0.0;
  }

  std::vector<std::size_t> test_ids(n_test);
  std::iota(test_ids.begin(), test_ids.end(), S * n_train);

  const double shared_w =
      cfg.tuning_gain * std::sqrt(1.0 - cfg.subject_specificity * cfg.subject_specificity);
  const double private_w = cfg.tuning_gain * cfg.subject_specificity / std::sqrt(static_cast<double>(k));
  for (std::size_t s = 0; s < S; ++s) {
    const auto& g = cfg.grids[s % cfg.grids.size()];
    SubjectProfile prof;
    prof.subject_id = static_cast<int>(s);
    prof.geometry = SubjectGeometry{static_cast<int>(s), g[0], g[1], g[2]};
    prof.noise_sigma = cfg.noise_sigma;
    const std::size_t vc = prof.geometry.voxel_count();
    prof.index_map = build_index_map(prof.geometry, data.template_spec, seed,
                                     cfg.jitter ? Jitter::kOn : Jitter::kOff);

    // Each native voxel is tuned like its true template position, read through the
    // subject's own rotation of the latent code, plus an idiosyncratic part.
    Rng subj_rng = make_rng(seed, "subject", s);
    prof.rotation = subject_rotation(k, cfg.pattern_rotation, subj_rng);
    prof.mixing = Tensor(Shape{vc, k});
    for (std::size_t i = 0; i < vc; ++i) {
      const std::size_t slot = static_cast<std::size_t>(
          (static_cast<unsigned __int128>(i) * cfg.template_size) / vc);
      for (std::size_t j = 0; j < k; ++j) {
        double rotated = 0.0;
        for (std::size_t m = 0; m < k; ++m) rotated += tuning(slot, m) * prof.rotation(m, j);
        prof.mixing(i, j) = shared_w * rotated + private_w * normal(subj_rng);
      }
    }
    prof.bias.resize(vc);
    for (auto& b : prof.bias) b = cfg.bias_scale * normal(subj_rng);

    Rng noise_rng = make_rng(seed, "noise", s);
    auto respond = [&](const std::vector<std::size_t>& ids) {
      SubjectSplit split;
      split.stimulus_ids = ids;
      split.x = Tensor(Shape{ids.size(), data.template_spec.roi_size()});
      std::vector<double> raw(vc);
      for (std::size_t n = 0; n < ids.size(); ++n) {
        for (std::size_t i = 0; i < vc; ++i) {
          double pre = prof.bias[i];
          for (std::size_t j = 0; j < k; ++j) pre += prof.mixing(i, j) * data.latents(ids[n], j);
          raw[i] = std::tanh(pre) + prof.noise_sigma * normal(noise_rng);
        }
        const auto aligned = anatomical_align(raw, prof.index_map, data.template_spec);
        std::copy(aligned.values.begin(), aligned.values.end(), &split.x(n, 0));
      }
      return split;
    };
    std::vector<std::size_t> train_ids(n_train);
    std::iota(train_ids.begin(), train_ids.end(), s * n_train);
    data.train.push_back(respond(train_ids));
    data.test.push_back(respond(test_ids));
    data.subjects.push_back(std::move(prof));
  }

  if (cfg.misalign) {
    const auto keep = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(cfg.misalign_keep_fraction *
                                                  static_cast<double>(data.input_dim()))));
    apply_misalignment(data, keep, derive_seed(seed, "misalign"));
  }
  return data;
}

void apply_misalignment(Dataset& data, std::size_t keep_length, std::uint64_t seed) {
  data.misalign_indices.clear();
  for (std::size_t s = 0; s < data.num_subjects(); ++s) {
    const auto idx = misalignment_indices(data.input_dim(), keep_length, derive_seed(seed, "subject", s));
    auto select = [&](Tensor& x) {
      Tensor out(Shape{x.rows(), keep_length});
      for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t j = 0; j < keep_length; ++j) out(r, j) = x(r, idx[j]);
      x = std::move(out);
    };
    select(data.train[s].x);
    select(data.test[s].x);
    data.misalign_indices.push_back(idx);
  }
}

Dataset few_shot_subsample(const Dataset& data, std::size_t subject_id, double ratio,
                           std::uint64_t seed) {
  if (subject_id >= data.num_subjects()) {
    throw DomainError("few-shot: unknown subject " + std::to_string(subject_id));
  }
  if (!(ratio > 0.0 && ratio <= 1.0)) throw DomainError("few-shot ratio must be in (0,1]");
  const SubjectSplit& src = data.train[subject_id];
  const double want = ratio * static_cast<double>(src.size());
  // Tolerance absorbs binary rounding, e.g. 0.1 * 1500 = 150.00000000000003.
  const auto keep = static_cast<std::size_t>(std::ceil(want - 1e-9));
  if (keep < 1) throw DomainError("few-shot ratio leaves no training sample");
  Dataset out = data;
  if (keep >= src.size()) return out;
  std::vector<std::size_t> order(src.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(seed, "few_shot", subject_id);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(keep);
  std::sort(order.begin(), order.end());
  SubjectSplit reduced;
  reduced.x = src.x.gather_rows(order);
  for (auto i : order) reduced.stimulus_ids.push_back(src.stimulus_ids[i]);
  out.train[subject_id] = std::move(reduced);
  return out;
}

Dataset single_subject(const Dataset& data, std::size_t subject_id) {
  if (subject_id >= data.num_subjects()) {
    throw DomainError("unknown subject " + std::to_string(subject_id));
  }
  Dataset out;
  out.config = data.config;
  out.config.subjects = 1;
  out.seed = data.seed;
  out.template_spec = data.template_spec;
  out.subjects = {data.subjects[subject_id]};
  out.subjects[0].subject_id = 0;
  out.train = {data.train[subject_id]};
  out.test = {data.test[subject_id]};
  out.latents = data.latents;
  out.embeddings = data.embeddings;
  out.labels = data.labels;
  if (!data.misalign_indices.empty()) out.misalign_indices = {data.misalign_indices[subject_id]};
  return out;
}

void save_dataset(const Dataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_tensor(dir / "stimuli_latents.mbt", data.latents);
  save_tensor(dir / "stimuli_embeddings.mbt", data.embeddings);
  save_tensor(dir / "stimuli_labels.mbt", data.labels);
  nlohmann::json subjects = nlohmann::json::array();
  for (std::size_t s = 0; s < data.num_subjects(); ++s) {
    const auto& p = data.subjects[s];
    save_tensor(split_file(dir, s, "train", "x"), data.train[s].x);
    save_tensor(split_file(dir, s, "train", "stimulus"), ids_tensor(data.train[s].stimulus_ids));
    save_tensor(split_file(dir, s, "train", "identity"), data.identity(s, data.train[s].size()));
    save_tensor(split_file(dir, s, "test", "x"), data.test[s].x);
    save_tensor(split_file(dir, s, "test", "stimulus"), ids_tensor(data.test[s].stimulus_ids));
    save_tensor(split_file(dir, s, "test", "identity"), data.identity(s, data.test[s].size()));
    {
      std::ofstream os(dir / ("subject" + std::to_string(s) + "_index_map.json"));
      os << to_json(p.index_map).dump();
    }
    nlohmann::json sj{{"subject_id", p.subject_id},
                      {"grid", {p.geometry.depth, p.geometry.height, p.geometry.width}},
                      {"voxel_count", p.geometry.voxel_count()},
                      {"noise_sigma", p.noise_sigma},
                      {"train_count", data.train[s].size()},
                      {"test_count", data.test[s].size()}};
    if (!data.misalign_indices.empty()) sj["kept_positions"] = data.misalign_indices[s];
    subjects.push_back(std::move(sj));
  }
  std::vector<int> roi(data.template_spec.roi_mask.begin(), data.template_spec.roi_mask.end());
  nlohmann::json manifest{{"format", "mobe-dataset-1"},
                          {"seed", data.seed},
                          {"config", to_json(data.config)},
                          {"config_hash", hex64(fnv1a(to_json(data.config).dump()))},
                          {"template_size", data.template_spec.template_size},
                          {"roi_mask", roi},
                          {"input_dim", data.input_dim()},
                          {"num_stimuli", data.num_stimuli()},
                          {"subjects", subjects},
                          {"content_hash", hex64(data.content_hash())}};
  std::ofstream os(dir / "manifest.json");
  os << manifest.dump(2) << '\n';
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw std::runtime_error("no dataset manifest in " + dir.string());
  const auto manifest = nlohmann::json::parse(is);
  Dataset data;
  data.seed = manifest.at("seed").get<std::uint64_t>();
  const auto& c = manifest.at("config");
  SynthConfig& cfg = data.config;
  cfg.subjects = c.at("subjects");
  cfg.latent_dim = c.at("latent_dim");
  cfg.embed_dim = c.at("embed_dim");
  cfg.num_classes = c.at("num_classes");
  cfg.template_size = c.at("template_size");
  cfg.roi_fraction = c.at("roi_fraction");
  cfg.train_per_subject = c.at("train_per_subject");
  cfg.test_shared = c.at("test_shared");
  cfg.noise_sigma = c.at("noise_sigma");
  cfg.grids = c.at("grids").get<std::vector<std::array<std::size_t, 3>>>();
  cfg.subject_specificity = c.at("subject_specificity");
  cfg.pattern_rotation = c.at("pattern_rotation");
  cfg.tuning_gain = c.at("tuning_gain");
  cfg.bias_scale = c.at("bias_scale");
  cfg.tuning_smoothness = c.at("tuning_smoothness");
  cfg.non_roi_gain = c.at("non_roi_gain");
  cfg.jitter = c.at("jitter");
  cfg.misalign = c.at("misalign");
  cfg.misalign_keep_fraction = c.at("misalign_keep_fraction");
  data.template_spec.template_size = manifest.at("template_size");
  for (int b : manifest.at("roi_mask").get<std::vector<int>>()) data.template_spec.roi_mask.push_back(b != 0);
  data.latents = load_tensor(dir / "stimuli_latents.mbt");
  data.embeddings = load_tensor(dir / "stimuli_embeddings.mbt");
  data.labels = load_tensor(dir / "stimuli_labels.mbt");
  const auto& subjects = manifest.at("subjects");
  for (std::size_t s = 0; s < subjects.size(); ++s) {
    const auto& sj = subjects[s];
    SubjectProfile p;
    p.subject_id = sj.at("subject_id");
    const auto grid = sj.at("grid").get<std::array<std::size_t, 3>>();
    p.geometry = SubjectGeometry{p.subject_id, grid[0], grid[1], grid[2]};
    p.noise_sigma = sj.at("noise_sigma");
    std::ifstream ms(dir / ("subject" + std::to_string(s) + "_index_map.json"));
    if (ms) p.index_map = index_map_from_json(nlohmann::json::parse(ms));
    data.subjects.push_back(std::move(p));
    data.train.push_back(SubjectSplit{load_tensor(split_file(dir, s, "train", "x")),
                                      ids_from_tensor(load_tensor(split_file(dir, s, "train", "stimulus")))});
    data.test.push_back(SubjectSplit{load_tensor(split_file(dir, s, "test", "x")),
                                     ids_from_tensor(load_tensor(split_file(dir, s, "test", "stimulus")))});
    if (sj.contains("kept_positions")) {
      data.misalign_indices.push_back(sj.at("kept_positions").get<std::vector<std::size_t>>());
    }
  }
  return data;
}

}  // namespace mobe
