#include "mobe/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include "mobe/checkpoint.hpp"
#include "mobe/losses.hpp"
#include "mobe/rng.hpp"
#include "mobe/serialize.hpp"

namespace mobe {

namespace {

// Cuts `n` ordered items into max(1, n / batch) nearly equal consecutive ranges.
std::vector<std::pair<std::size_t, std::size_t>> even_ranges(std::size_t n, std::size_t batch) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  if (n == 0) return out;
  const std::size_t nb = std::max<std::size_t>(1, n / batch);
  for (std::size_t b = 0; b < nb; ++b) out.emplace_back(b * n / nb, (b + 1) * n / nb);
  return out;
}

struct Accum {
  double task = 0.0, sra = 0.0, total = 0.0;
  std::size_t n = 0;
  void add(double t, double s, double tot) {
    task += t;
    sra += s;
    total += tot;
    ++n;
  }
  EpochLog log(std::string phase, std::size_t step, std::size_t epoch, int subject, double lr) const {
    const double d = n ? static_cast<double>(n) : 1.0;
    return EpochLog{std::move(phase), step, epoch, subject, task / d, sra / d, total / d, lr};
  }
};

}  // namespace

std::vector<std::vector<SampleRef>> stratified_batches(const std::vector<std::size_t>& counts,
                                                       std::size_t batch_size, std::uint64_t seed) {
  if (batch_size == 0) throw DomainError("batch size must be positive");
  struct Keyed {
    double key;
    SampleRef ref;
  };
  std::vector<Keyed> all;
  for (std::size_t s = 0; s < counts.size(); ++s) {
    std::vector<std::size_t> order(counts[s]);
    std::iota(order.begin(), order.end(), 0);
    Rng rng = make_rng(seed, "stratify", s);
    std::shuffle(order.begin(), order.end(), rng);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (std::size_t p = 0; p < order.size(); ++p) {
      const double key = (static_cast<double>(p) + u(rng)) / static_cast<double>(order.size());
      all.push_back({key, {s, order[p]}});
    }
  }
  std::stable_sort(all.begin(), all.end(), [](const Keyed& a, const Keyed& b) { return a.key < b.key; });
  std::vector<std::vector<SampleRef>> batches;
  for (auto [lo, hi] : even_ranges(all.size(), batch_size)) {
    std::vector<SampleRef> b;
    for (std::size_t i = lo; i < hi; ++i) b.push_back(all[i].ref);
    batches.push_back(std::move(b));
  }
  return batches;
}

std::vector<std::vector<std::size_t>> subject_batches(std::size_t count, std::size_t batch_size,
                                                      std::uint64_t seed) {
  if (batch_size == 0) throw DomainError("batch size must be positive");
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (auto [lo, hi] : even_ranges(count, batch_size)) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(lo),
                     order.begin() + static_cast<std::ptrdiff_t>(hi));
  }
  return out;
}

nlohmann::json to_json(const EpochLog& e) {
  return {{"phase", e.phase},       {"step", e.step},   {"epoch", e.epoch},
          {"subject", e.subject},   {"task_loss", e.task_loss},
          {"sra_loss", e.sra_loss}, {"total", e.total}, {"lr", e.lr}};
}

bool MetaStepAudit::frozen_ok() const {
  return outer_frozen_ok &&
         std::all_of(inner_frozen_ok.begin(), inner_frozen_ok.end(), [](bool b) { return b; });
}

std::uint64_t group_hash(const std::vector<Parameter*>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto* p : params) h = tensor_hash(p->value, h);
  return h;
}

GroupHashes hash_groups(DecoderModel& model) {
  const auto g = model.parameter_groups();
  GroupHashes out;
  out.backbone_and_heads = group_hash(g.backbone_and_heads);
  out.router = group_hash(g.router);
  for (const auto& a : g.adapters_by_subject) out.adapters.push_back(group_hash(a));
  return out;
}

Trainer::Trainer(DecoderModel& model, const Dataset& data, const TrainConfig& cfg, std::uint64_t seed)
    : model_(model), data_(data), cfg_(cfg), seed_(seed), groups_(model.parameter_groups()) {
  cfg_.validate();
  if (data.num_subjects() != model.config().num_subjects) {
    throw DomainError("trainer: dataset has " + std::to_string(data.num_subjects()) +
                      " subjects, model expects " + std::to_string(model.config().num_subjects));
  }
  if (cfg_.sra_enabled && data.num_subjects() < 2) {
    throw DomainError("SRA needs at least two subjects in the training data");
  }
  model_.set_adapters_enabled(false);
}

unsigned Trainer::heads() const {
  switch (cfg_.task) {
    case Task::kClassification: return kHeadClassifier;
    case Task::kRetrieval: return kHeadRetrieval;
    case Task::kReconstruction: return kHeadRetrieval | kHeadPrior;
  }
  return kHeadAll;
}

void Trainer::set_trainable(const std::vector<Parameter*>& trainable) {
  for (auto* p : groups_.all()) p->requires_grad = false;
  for (auto* p : trainable) p->requires_grad = true;
}

void Trainer::check_finite(double v, const char* where) const {
  if (!std::isfinite(v)) throw NumericalError(std::string("non-finite loss during ") + where);
}

void Trainer::emit(const EpochLog& e) const {
  if (on_epoch_) on_epoch_(e);
}

Tensor Trainer::omega_for(const Tensor& x) { return model_.route(x); }

Trainer::BatchData Trainer::gather(const std::vector<SampleRef>& refs) const {
  const std::size_t n = refs.size(), d = data_.input_dim(), S = data_.num_subjects();
  const bool routed = model_.adapters_enabled();
  if (routed && !router_trained_) throw DomainError("adapters enabled before the router was trained");
  BatchData b;
  b.x = Tensor(Shape{n, d});
  b.identity = Tensor(Shape{n, S});
  b.labels = Tensor(Shape{n, data_.labels.cols()});
  b.embeddings = Tensor(Shape{n, data_.embeddings.cols()});
  if (routed) b.omega = Tensor(Shape{n, S});
  std::vector<bool> seen(S, false);
  for (std::size_t r = 0; r < n; ++r) {
    const auto [s, i] = refs[r];
    const SubjectSplit& split = data_.train[s];
    std::copy_n(split.x.data().begin() + static_cast<std::ptrdiff_t>(i * d), d,
                b.x.data().begin() + static_cast<std::ptrdiff_t>(r * d));
    b.identity(r, s) = 1.0;
    seen[s] = true;
    const std::size_t stim = split.stimulus_ids[i];
    for (std::size_t c = 0; c < b.labels.cols(); ++c) b.labels(r, c) = data_.labels(stim, c);
    for (std::size_t c = 0; c < b.embeddings.cols(); ++c) b.embeddings(r, c) = data_.embeddings(stim, c);
    if (routed) {
      for (std::size_t k = 0; k < S; ++k) b.omega(r, k) = train_omega_[s](i, k);
    }
  }
  b.subjects_present = static_cast<std::size_t>(std::count(seen.begin(), seen.end(), true));
  return b;
}

Trainer::LossParts Trainer::losses(ad::Tape& tape, const BatchData& b, bool with_sra) {
  const ForwardOutput out = model_.forward(tape, b.x, b.omega, heads());
  const ad::Var y = tape.constant(b.embeddings);
  LossParts parts;
  switch (cfg_.task) {
    case Task::kClassification:
      parts.task = loss::classification_loss(out.class_logits, b.labels);
      break;
    case Task::kRetrieval:
      parts.task = loss::retrieval_loss(ad::l2_normalize(out.retrieval, 1), y, cfg_.temperature);
      break;
    case Task::kReconstruction:
      parts.task = loss::reconstruction_loss(out.prior, y, ad::l2_normalize(out.retrieval, 1),
                                             cfg_.temperature);
      break;
  }
  // A batch holding a single subject has no identity contrast; it trains on the task alone.
  if (with_sra && b.subjects_present >= 2) {
    parts.sra = loss::sra_loss(out.representation, y, b.identity);
    parts.total = ad::add(parts.task, ad::scale(parts.sra, cfg_.alpha));
  } else {
    parts.sra = tape.constant(Tensor::scalar(0.0));
    parts.total = parts.task;
  }
  return parts;
}

std::vector<double> Trainer::train_phase1(std::optional<std::size_t> epochs) {
  const std::size_t n_epochs = epochs.value_or(cfg_.phase1_epochs);
  model_.set_adapters_enabled(false);
  const auto& trainable = groups_.backbone_and_heads;
  set_trainable(trainable);
  std::vector<std::size_t> counts;
  for (const auto& t : data_.train) counts.push_back(t.size());
  const std::size_t total_n = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
  const std::size_t per_epoch = std::max<std::size_t>(1, total_n / cfg_.batch_size);
  const std::size_t total_steps = n_epochs * per_epoch;
  std::vector<double> curve;
  std::size_t step = 0;
  for (std::size_t e = 0; e < n_epochs; ++e) {
    Accum acc;
    double lr = 0.0;
    for (const auto& refs : stratified_batches(counts, cfg_.batch_size, derive_seed(seed_, "phase1", e))) {
      const BatchData b = gather(refs);
      ad::Tape tape(derive_seed(seed_, "dropout", tape_counter_++), true);
      const LossParts parts = losses(tape, b, cfg_.sra_enabled);
      const double total = parts.total.value().item();
      check_finite(total, "phase 1");
      zero_grads(trainable);
      tape.backward(parts.total);
      lr = cfg_.lr.at(step++, total_steps);
      backbone_opt_.step(trainable, lr, cfg_.weight_decay);
      acc.add(parts.task.value().item(), parts.sra.value().item(), total);
    }
    emit(acc.log("phase1", 0, e, -1, lr));
    curve.push_back(acc.total / static_cast<double>(std::max<std::size_t>(acc.n, 1)));
  }
  return curve;
}

RouterStats Trainer::train_router() {
  const std::size_t S = data_.num_subjects();
  if (S < 2) throw DomainError("routing needs at least two subjects");
  const auto& trainable = groups_.router;
  set_trainable(trainable);
  std::vector<std::size_t> counts;
  for (const auto& t : data_.train) counts.push_back(t.size());
  RouterStats stats;
  for (std::size_t e = 0; e < cfg_.router_epochs; ++e) {
    Accum acc;
    for (const auto& refs :
         stratified_batches(counts, cfg_.router_batch_size, derive_seed(seed_, "router", e))) {
      Tensor x(Shape{refs.size(), data_.input_dim()});
      Tensor identity(Shape{refs.size(), S});
      for (std::size_t r = 0; r < refs.size(); ++r) {
        const auto& src = data_.train[refs[r].subject].x;
        for (std::size_t c = 0; c < x.cols(); ++c) x(r, c) = src(refs[r].index, c);
        identity(r, refs[r].subject) = 1.0;
      }
      ad::Tape tape(0, true);
      const ad::Var l = loss::router_loss(model_.router_logits(tape, x), identity);
      const double v = l.value().item();
      check_finite(v, "router training");
      zero_grads(trainable);
      tape.backward(l);
      router_opt_.step(trainable, cfg_.router_lr, cfg_.weight_decay);
      acc.add(v, 0.0, v);
    }
    const EpochLog log = acc.log("router", 0, e, -1, cfg_.router_lr);
    stats.epoch_losses.push_back(log.total);
    emit(log);
  }
  set_trainable({});

  std::size_t correct = 0, total = 0;
  double confidence = 0.0;
  for (std::size_t s = 0; s < S; ++s) {
    const Tensor p = omega_for(data_.test[s].x);
    for (std::size_t r = 0; r < p.rows(); ++r) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < S; ++k) {
        if (p(r, k) > p(r, best)) best = k;
      }
      correct += best == s;
      confidence += p(r, best);
      ++total;
    }
  }
  stats.test_accuracy = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  stats.mean_confidence = total ? confidence / static_cast<double>(total) : 0.0;

  train_omega_.clear();
  for (std::size_t s = 0; s < S; ++s) train_omega_.push_back(omega_for(data_.train[s].x));
  router_trained_ = true;
  return stats;
}

MetaStepAudit Trainer::run_meta_step(std::size_t step) {
  if (!cfg_.mobe_enabled) throw DomainError("meta steps need MoBE adapters (mobe_enabled = false)");
  if (!router_trained_) throw DomainError("meta steps need a trained router");
  model_.set_adapters_enabled(true);
  const std::size_t S = data_.num_subjects();
  MetaStepAudit audit;
  audit.step = step;

  // Inner loop: subject by subject, only that subject's adapters move.
  for (std::size_t s = 0; s < S; ++s) {
    const GroupHashes before = hash_groups(model_);
    const auto& trainable = groups_.adapters_by_subject[s];
    set_trainable(trainable);
    const std::size_t n = data_.train[s].size();
    const std::size_t per_epoch = std::max<std::size_t>(1, n / cfg_.support_batch_size);
    const std::size_t total_steps = cfg_.support_epochs * per_epoch;
    std::size_t it = 0;
    for (std::size_t e = 0; e < cfg_.support_epochs; ++e) {
      Accum acc;
      double lr = 0.0;
      const std::uint64_t bseed = derive_seed(derive_seed(seed_, "inner", step), "subject", s * 1000003 + e);
      for (const auto& rows : subject_batches(n, cfg_.support_batch_size, bseed)) {
        std::vector<SampleRef> refs;
        for (auto i : rows) refs.push_back({s, i});
        const BatchData b = gather(refs);
        ad::Tape tape(derive_seed(seed_, "dropout", tape_counter_++), true);
        const LossParts parts = losses(tape, b, false);
        const double total = parts.total.value().item();
        check_finite(total, "inner loop");
        zero_grads(trainable);
        tape.backward(parts.total);
        lr = cfg_.lr.at(it++, total_steps);
        adapter_opt_.step(trainable, lr, cfg_.weight_decay);
        acc.add(total, 0.0, total);
      }
      emit(acc.log("inner", step, e, static_cast<int>(s), lr));
    }
    const GroupHashes after = hash_groups(model_);
    bool ok = before.backbone_and_heads == after.backbone_and_heads && before.router == after.router;
    for (std::size_t k = 0; k < S; ++k) {
      if (k != s) ok = ok && before.adapters[k] == after.adapters[k];
    }
    audit.inner_frozen_ok.push_back(ok);
    audit.inner_adapter_changed.push_back(before.adapters[s] != after.adapters[s]);
  }

  // Outer loop: backbone and heads on the union of all subjects, adapters frozen.
  {
    const GroupHashes before = hash_groups(model_);
    const auto& trainable = groups_.backbone_and_heads;
    set_trainable(trainable);
    std::vector<std::size_t> counts;
    for (const auto& t : data_.train) counts.push_back(t.size());
    const std::size_t total_n = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
    const std::size_t total_steps = cfg_.query_epochs * std::max<std::size_t>(1, total_n / cfg_.batch_size);
    std::size_t it = 0;
    for (std::size_t e = 0; e < cfg_.query_epochs; ++e) {
      Accum acc;
      double lr = 0.0;
      const std::uint64_t bseed = derive_seed(derive_seed(seed_, "outer", step), "epoch", e);
      for (const auto& refs : stratified_batches(counts, cfg_.batch_size, bseed)) {
        const BatchData b = gather(refs);
        ad::Tape tape(derive_seed(seed_, "dropout", tape_counter_++), true);
        const LossParts parts = losses(tape, b, cfg_.sra_enabled);
        const double total = parts.total.value().item();
        check_finite(total, "outer loop");
        zero_grads(trainable);
        tape.backward(parts.total);
        lr = cfg_.lr.at(it++, total_steps);
        backbone_opt_.step(trainable, lr, cfg_.weight_decay);
        acc.add(parts.task.value().item(), parts.sra.value().item(), total);
      }
      emit(acc.log("outer", step, e, -1, lr));
    }
    const GroupHashes after = hash_groups(model_);
    audit.outer_frozen_ok = before.router == after.router && before.adapters == after.adapters;
    audit.outer_backbone_changed = before.backbone_and_heads != after.backbone_and_heads;
  }
  set_trainable({});
  return audit;
}

double Trainer::query_task_loss() {
  std::vector<std::size_t> counts;
  for (const auto& t : data_.train) counts.push_back(t.size());
  double sum = 0.0;
  std::size_t n = 0;
  // Fixed batches so successive calls are comparable.
  for (const auto& refs : stratified_batches(counts, cfg_.batch_size, derive_seed(seed_, "query_eval"))) {
    const BatchData b = gather(refs);
    ad::Tape tape(0, false);
    tape.set_grad_enabled(false);
    const LossParts parts = losses(tape, b, false);
    sum += parts.task.value().item();
    ++n;
  }
  const double v = n ? sum / static_cast<double>(n) : 0.0;
  check_finite(v, "query evaluation");
  return v;
}

MetricsReport Trainer::evaluate(const EvalConfig& eval, std::uint64_t pool_seed) {
  MetricsReport report;
  report.task = to_string(cfg_.task);
  for (std::size_t s = 0; s < data_.num_subjects(); ++s) {
    const SubjectSplit& split = data_.test[s];
    Tensor omega;
    if (model_.adapters_enabled()) omega = omega_for(split.x);
    ad::Tape tape(0, false);
    tape.set_grad_enabled(false);
    const ForwardOutput out = model_.forward(tape, split.x, omega, heads());
    SubjectMetrics m;
    if (cfg_.task == Task::kClassification) {
      const Tensor labels = data_.labels.gather_rows(split.stimulus_ids);
      const Tensor& scores = out.class_logits.value();
      m.mean_ap = mean_average_precision(scores, labels).value;
      m.auc = roc_auc(scores, labels).value;
      m.hamming = hamming_distance(scores, labels);
    } else {
      const ad::Var q = cfg_.task == Task::kRetrieval ? out.retrieval : out.prior;
      const Tensor fmri = ad::l2_normalize(q, 1).value();
      const Tensor images = data_.embeddings.gather_rows(split.stimulus_ids);
      RetrievalOptions opts{eval.pool_size, eval.repeats, derive_seed(pool_seed, "subject", s)};
      m.image_retrieval = retrieval_accuracy(fmri, images, opts);
      opts.seed = derive_seed(pool_seed, "subject_fmri", s);
      m.fmri_retrieval = retrieval_accuracy(images, fmri, opts);
    }
    report.per_subject.push_back(m);
  }
  report.finalize();
  return report;
}

Dataset prepare_dataset(const ExperimentConfig& cfg, const Dataset* base) {
  Dataset d = base ? *base : generate_dataset(cfg.data, cfg.seed);
  if (cfg.train.few_shot) {
    d = few_shot_subsample(d, cfg.train.few_shot->subject, cfg.train.few_shot->ratio,
                           derive_seed(cfg.seed, "few_shot"));
  }
  if (cfg.train.single_subject) d = single_subject(d, *cfg.train.single_subject);
  return d;
}

RunResult run_experiment(const ExperimentConfig& cfg, const Dataset* base, const RunOptions& opts) {
  const auto t0 = std::chrono::steady_clock::now();
  const TrainConfig& tc = cfg.train;
  tc.validate();
  const Dataset data = prepare_dataset(cfg, base);
  if (tc.sra_enabled && data.num_subjects() < 2) {
    throw ConfigError("train.sra_enabled", "SRA needs at least two subjects");
  }
  if (tc.mobe_enabled && data.num_subjects() < 2) {
    throw ConfigError("train.mobe_enabled", "MoBE routing needs at least two subjects");
  }
  const ModelConfig mc = cfg.model_config(data.input_dim(), data.num_subjects(), data.labels.cols(),
                                          data.embeddings.cols());
  DecoderModel model(mc, derive_seed(cfg.seed, "model"));
  const std::string chash = hex64(config_hash(cfg));

  std::ofstream log;
  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    log.open(opts.out_dir / "log.jsonl");
  }
  Trainer trainer(model, data, tc, derive_seed(cfg.seed, "train"));
  trainer.set_epoch_callback([&](const EpochLog& e) {
    if (log.is_open()) log << to_json(e).dump() << '\n';
    if (opts.on_epoch) opts.on_epoch(e);
  });
  auto checkpoint = [&](const char* phase) {
    if (!opts.out_dir.empty()) save_checkpoint(model, opts.out_dir / "checkpoints" / phase, chash, cfg.seed);
  };

  RunResult res;
  res.task_loss_at_init = trainer.query_task_loss();
  // Without adapters the backbone gets the epochs the outer loops would have had.
  const std::size_t phase1_epochs =
      tc.mobe_enabled ? tc.phase1_epochs : tc.phase1_epochs + tc.meta_steps * tc.query_epochs;
  res.phase1_curve = trainer.train_phase1(phase1_epochs);
  res.task_loss_after_phase1 = trainer.query_task_loss();
  checkpoint("phase1");
  if (tc.mobe_enabled) {
    res.router = trainer.train_router();
    checkpoint("router");
    if (tc.meta_steps > 0) {
      model.set_adapters_enabled(true);
      res.query_curve.push_back(trainer.query_task_loss());
      for (std::size_t step = 0; step < tc.meta_steps; ++step) {
        res.audits.push_back(trainer.run_meta_step(step));
        res.query_curve.push_back(trainer.query_task_loss());
      }
    }
    // Routing is live for evaluation even when no meta step ran.
    model.set_adapters_enabled(true);
    checkpoint("meta");
  }

  res.report = trainer.evaluate(cfg.eval, derive_seed(cfg.seed, "pools"));
  res.report.label = run_label(tc);
  res.report.seed = cfg.seed;
  res.report.config_hash = chash;
  res.report.dataset_hash = hex64(data.content_hash());
  res.report.config = to_json(cfg);
  res.report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  res.model_hash = model_hash(model);
  if (!opts.out_dir.empty()) {
    std::ofstream os(opts.out_dir / "report.json");
    os << to_json(res.report).dump(2) << '\n';
  }
  return res;
}

}  // namespace mobe
