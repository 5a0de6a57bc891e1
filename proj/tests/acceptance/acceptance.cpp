// Acceptance suite: one PASS/FAIL line per criterion, tolerances fixed below.
// Usage: mobe_acceptance [criterion ...]   (all ten when none are given)
//
// Exit code is 0 only when every selected criterion passes.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mobe/checkpoint.hpp"
#include "mobe/config.hpp"
#include "mobe/gradcheck_suite.hpp"
#include "mobe/losses.hpp"
#include "mobe/metrics.hpp"
#include "mobe/model.hpp"
#include "mobe/serialize.hpp"
#include "mobe/trainer.hpp"

namespace fs = std::filesystem;
using namespace mobe;

namespace {

// Tolerances and budgets.
constexpr double kGradTol = 1e-4;
constexpr std::size_t kGradTrials = 20;
constexpr double kGradBudgetSec = 60.0;
constexpr int kAlgebraInstances = 100;
constexpr double kOneHotTol = 1e-12;
constexpr double kLinearityTol = 1e-12;
constexpr double kDenseTol = 1e-10;
constexpr double kClosedFormTol = 1e-12;
constexpr int kMetricInstances = 50;
constexpr std::size_t kMetricMaxN = 64;
constexpr double kMetricTol = 1e-12;
constexpr std::size_t kRouterEpochs = 10;
constexpr double kRouterAccuracy = 1.0;
constexpr double kRouterConfidence = 0.99;
constexpr double kRouterBudgetSec = 120.0;
constexpr std::size_t kMetaSteps = 10;
constexpr std::size_t kSeeds = 3;
constexpr double kAblationGap = 0.05;
constexpr double kAblationBudgetSec = 20 * 60.0;
constexpr std::size_t kFewShotSubject = 0;
constexpr double kFewShotRatio = 0.1;
constexpr double kFewShotGap = 0.10;
constexpr double kFewShotBudgetSec = 15 * 60.0;
constexpr double kMisalignDrop = 0.10;
constexpr double kMisalignBudgetSec = 15 * 60.0;

std::string config_dir = MOBE_CONFIG_DIR;

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

Tensor random_tensor(Shape s, Rng& rng, double sd = 1.0) {
  Tensor t(std::move(s));
  std::normal_distribution<double> n(0.0, sd);
  for (auto& v : t.data()) v = n(rng);
  return t;
}

Tensor random_simplex(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor t(Shape{rows, cols});
  std::exponential_distribution<double> e(1.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) sum += t(r, c) = e(rng);
    for (std::size_t c = 0; c < cols; ++c) t(r, c) /= sum;
  }
  return t;
}

Tensor forward_value(MoBELinear& l, const Tensor& x, const Tensor* omega) {
  ad::Tape tape;
  return l.forward(tape, tape.constant(x), omega).value();
}

// ---------------------------------------------------------------- 1
Outcome gradients() {
  const auto t0 = Clock::now();
  const auto reports = run_gradcheck_suite("all", kGradTrials, 20240601, false, kGradTol);
  const double secs = seconds_since(t0);
  bool ok = !reports.empty();
  double worst = 0.0;
  std::set<std::string> losses;
  std::string failed;
  for (const auto& r : reports) {
    ok = ok && r.pass && r.trials >= kGradTrials;
    worst = std::max(worst, r.worst);
    if (!r.pass) failed += " " + r.module + "/" + r.name;
    if (r.module == "losses") losses.insert(r.name);
  }
  // The negative control must still be caught.
  bool control = false;
  for (const auto& r : run_gradcheck_suite("fixture", 3, 1, true, kGradTol)) control = control || !r.pass;
  ok = ok && control && losses.size() >= 5 && secs < kGradBudgetSec;
  return {ok, std::to_string(reports.size()) + " checks (" + std::to_string(losses.size()) +
                  " losses) x " + std::to_string(kGradTrials) + " trials, worst rel err " + fmt(worst) +
                  ", corrupt op caught: " + (control ? "yes" : "no") + ", " + fmt(secs, 3) + " s" + failed};
}

// ---------------------------------------------------------------- 2
Outcome algebra() {
  Rng rng(2);
  const std::size_t in = 6, out = 4, S = 4, r = 3, n = 5;
  std::size_t zero_bad = 0;
  double onehot = 0.0, linear = 0.0, dense = 0.0;
  for (int trial = 0; trial < kAlgebraInstances; ++trial) {
    MoBELinear fresh("l", in, out, S, r, true, rng);
    const Tensor x = random_tensor({n, in}, rng);
    const Tensor w = random_simplex(n, S, rng);
    if (!(forward_value(fresh, x, &w) == forward_value(fresh, x, nullptr))) ++zero_bad;

    MoBELinear l("l", in, out, S, r, true, rng);
    for (auto& a : l.adapter_a) a.value = random_tensor(a.value.shape(), rng);
    for (auto& b : l.adapter_b) b.value = random_tensor(b.value.shape(), rng);
    const Tensor& W = l.weight.value;

    // One-hot routing against a scalar single-expert loop.
    const std::size_t s = trial % S;
    Tensor hot(Shape{n, S});
    for (std::size_t i = 0; i < n; ++i) hot(i, s) = 1.0;
    const Tensor y_hot = forward_value(l, x, &hot);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t o = 0; o < out; ++o) {
        double v = l.bias.value[o];
        for (std::size_t k = 0; k < in; ++k) v += W(o, k) * x(i, k);
        for (std::size_t q = 0; q < r; ++q) {
          double ax = 0.0;
          for (std::size_t k = 0; k < in; ++k) ax += l.adapter_a[s].value(q, k) * x(i, k);
          v += l.adapter_b[s].value(o, q) * ax;
        }
        onehot = std::max(onehot, std::abs(y_hot(i, o) - v));
      }

    // Linearity in the routing weights.
    const Tensor w2 = random_simplex(n, S, rng);
    const double t = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    Tensor mix(w.shape());
    for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = t * w[i] + (1 - t) * w2[i];
    const Tensor y1 = forward_value(l, x, &w), y2 = forward_value(l, x, &w2), ym = forward_value(l, x, &mix);
    for (std::size_t i = 0; i < ym.size(); ++i)
      linear = std::max(linear, std::abs(ym[i] - (t * y1[i] + (1 - t) * y2[i])));

    // Dense materialization W + sum_s w_s B_s A_s, one row at a time.
    for (std::size_t i = 0; i < n; ++i) {
      Tensor eff = W;
      for (std::size_t e = 0; e < S; ++e)
        for (std::size_t o = 0; o < out; ++o)
          for (std::size_t k = 0; k < in; ++k)
            for (std::size_t q = 0; q < r; ++q)
              eff(o, k) += w(i, e) * l.adapter_b[e].value(o, q) * l.adapter_a[e].value(q, k);
      for (std::size_t o = 0; o < out; ++o) {
        double v = l.bias.value[o];
        for (std::size_t k = 0; k < in; ++k) v += eff(o, k) * x(i, k);
        dense = std::max(dense, std::abs(y1(i, o) - v));
      }
    }
  }
  const bool ok = zero_bad == 0 && onehot < kOneHotTol && linear < kLinearityTol && dense < kDenseTol;
  return {ok, std::to_string(kAlgebraInstances) + " instances: zero-init mismatches " + std::to_string(zero_bad) +
                  ", one-hot err " + fmt(onehot) + ", linearity err " + fmt(linear) + ", dense err " +
                  fmt(dense)};
}

// ---------------------------------------------------------------- 3
Outcome closed_forms() {
  std::vector<std::pair<std::string, double>> errs;
  {
    Rng rng(3);
    ad::Tape tape;
    const double v = loss::retrieval_loss(tape.constant(random_tensor({1, 5}, rng)),
                                          tape.constant(random_tensor({1, 5}, rng)), 1.0)
                         .value()
                         .item();
    errs.emplace_back("retrieval |B|=1", std::abs(v));
  }
  {
    ad::Tape tape;
    const Tensor eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
    const double v = loss::retrieval_loss(tape.constant(eye), tape.constant(eye), 1.0).value().item();
    errs.emplace_back("retrieval 2x2", std::abs(v - 4.0 * std::log(1.0 + std::exp(-1.0))));
  }
  {
    ad::Tape tape;
    const auto a = tape.constant(Tensor::scalar(0.5));
    errs.emplace_back("SRA balanced", std::abs(loss::sra_from_similarities(a, a).value().item() - std::log(2.0)));
  }
  {
    ad::Tape tape;
    Tensor labels(Shape{6, 5});
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i % 2;
    const double v = loss::classification_loss(tape.constant(Tensor(Shape{6, 5})), labels).value().item();
    errs.emplace_back("BCE zero logits", std::abs(v - std::log(2.0)));
  }
  {
    ad::Tape tape;
    const std::size_t S = 4;
    Tensor id(Shape{6, S});
    for (std::size_t i = 0; i < 6; ++i) id(i, i % S) = 1.0;
    const double v = loss::router_loss(tape.constant(Tensor(Shape{6, S})), id).value().item();
    errs.emplace_back("router uniform", std::abs(v - std::log(double(S))));
  }
  bool ok = true;
  std::string detail;
  for (const auto& [name, e] : errs) {
    ok = ok && e <= kClosedFormTol;
    detail += (detail.empty() ? "" : ", ") + name + " err " + fmt(e, 3);
  }
  return {ok, detail};
}

// ---------------------------------------------------------------- 4
double brute_ap(const Tensor& s, const Tensor& y, std::size_t c) {
  double total = 0.0, pos = 0.0;
  for (std::size_t i = 0; i < s.rows(); ++i) {
    if (y(i, c) < 0.5) continue;
    pos += 1.0;
    double above = 0.0, hits = 0.0;
    for (std::size_t j = 0; j < s.rows(); ++j)
      if (s(j, c) >= s(i, c)) above += 1.0, hits += y(j, c);
    total += hits / above;
  }
  return pos > 0 ? total / pos : -1.0;
}

double brute_auc(const Tensor& s, const Tensor& y, std::size_t c) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.rows(); ++i)
    for (std::size_t j = 0; j < s.rows(); ++j) {
      if (y(i, c) < 0.5 || y(j, c) > 0.5) continue;
      pairs += 1.0;
      wins += s(i, c) > s(j, c) ? 1.0 : s(i, c) == s(j, c) ? 0.5 : 0.0;
    }
  return pairs > 0 ? wins / pairs : -1.0;
}

double mean_used(const std::vector<double>& v) {
  double total = 0.0, used = 0.0;
  for (double x : v)
    if (x >= 0) total += x, used += 1.0;
  return used > 0 ? total / used : -1.0;
}

Outcome metric_oracles() {
  Rng rng(4);
  double ap_err = 0.0, auc_err = 0.0, ham_err = 0.0, ret_err = 0.0;
  int compared = 0;
  for (int trial = 0; trial < kMetricInstances; ++trial) {
    const std::size_t n = 2 + rng() % (kMetricMaxN - 1), c = 1 + rng() % 8;
    Tensor s = random_tensor({n, c}, rng);
    Tensor y(Shape{n, c});
    for (auto& v : y.data()) v = rng() % 3 == 0;
    for (std::size_t k = 0; k < c; ++k) y(k % n, k) = 1.0;  // every category has a positive
    std::vector<double> ap(c), auc(c);
    for (std::size_t k = 0; k < c; ++k) ap[k] = brute_ap(s, y, k), auc[k] = brute_auc(s, y, k);
    ap_err = std::max(ap_err, std::abs(mean_average_precision(s, y).value - mean_used(ap)));
    if (mean_used(auc) >= 0) {
      // Rounded copies exercise ties.
      Tensor t = s;
      for (auto& v : t.data()) v = std::round(v * 3.0);
      std::vector<double> auc_t(c);
      for (std::size_t k = 0; k < c; ++k) auc_t[k] = brute_auc(t, y, k);
      auc_err = std::max(auc_err, std::abs(roc_auc(s, y).value - mean_used(auc)));
      auc_err = std::max(auc_err, std::abs(roc_auc(t, y).value - mean_used(auc_t)));
    }
    double miss = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < c; ++k) miss += (1.0 / (1.0 + std::exp(-s(i, k))) > 0.5) != (y(i, k) > 0.5);
    ham_err = std::max(ham_err, std::abs(hamming_distance(s, y) - miss / double(n * c)));

    // Retrieval with the whole gallery as the pool: strict top-1 by cosine.
    const Tensor q = random_tensor({n, 4}, rng), g = random_tensor({n, 4}, rng);
    double hits = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> cs(n);
      for (std::size_t j = 0; j < n; ++j) {
        double d = 0, a = 0, b = 0;
        for (std::size_t k = 0; k < 4; ++k) d += q(i, k) * g(j, k), a += q(i, k) * q(i, k), b += g(j, k) * g(j, k);
        cs[j] = d / std::sqrt(a * b);
      }
      bool best = true;
      for (std::size_t j = 0; j < n; ++j)
        if (j != i && cs[j] >= cs[i]) best = false;
      hits += best;
    }
    ret_err = std::max(ret_err, std::abs(retrieval_accuracy(q, g, {n, 2, 3}) - hits / n));
    ++compared;
  }
  const double hand = mean_average_precision(Tensor::matrix(3, 1, {0.9, 0.5, 0.1}), Tensor::matrix(3, 1, {1, 0, 1})).value;
  const bool ok = ap_err <= kMetricTol && auc_err <= kMetricTol && ham_err <= kMetricTol && ret_err <= kMetricTol &&
                  hand == 5.0 / 6.0;
  return {ok, std::to_string(compared) + " instances: mAP err " + fmt(ap_err) + ", AUC err " + fmt(auc_err) +
                  ", hamming err " + fmt(ham_err) + ", retrieval err " + fmt(ret_err) + ", hand case " +
                  fmt(hand, 17)};
}

// ---------------------------------------------------------------- 5
ExperimentConfig preset(const std::string& name, std::uint64_t seed) {
  ExperimentConfig c = load_config(config_dir + "/" + name);
  c.seed = seed;
  return c;
}

Outcome router() {
  const auto t0 = Clock::now();
  bool ok = true;
  std::string detail;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    ExperimentConfig c = preset("desk_retrieval.json", seed);
    c.train.router_epochs = kRouterEpochs;
    const Dataset data = prepare_dataset(c);
    DecoderModel model(c.model_config(data.input_dim(), data.num_subjects(), data.labels.cols(),
                                      data.embeddings.cols()),
                       derive_seed(c.seed, "model"));
    Trainer trainer(model, data, c.train, derive_seed(c.seed, "train"));
    const RouterStats st = trainer.train_router();
    ok = ok && st.test_accuracy >= kRouterAccuracy && st.mean_confidence > kRouterConfidence;
    detail += "seed " + std::to_string(seed) + ": acc " + fmt(st.test_accuracy) + " conf " +
              fmt(st.mean_confidence, 6) + "; ";
  }
  const double secs = seconds_since(t0);
  ok = ok && secs < kRouterBudgetSec;
  return {ok, detail + std::to_string(kRouterEpochs) + " epochs, " + fmt(secs, 3) + " s"};
}

// ---------------------------------------------------------------- 6
Outcome freezing() {
  ExperimentConfig c = load_config(config_dir + "/smoke.json");
  c.seed = 6;
  c.train.meta_steps = kMetaSteps;
  const RunResult res = run_experiment(c);
  bool ok = res.audits.size() == kMetaSteps;
  std::size_t frozen = 0, moved = 0;
  for (const auto& a : res.audits) {
    frozen += a.frozen_ok();
    bool all_moved = a.outer_backbone_changed;
    for (bool ch : a.inner_adapter_changed) all_moved = all_moved && ch;
    moved += all_moved;
  }
  ok = ok && frozen == kMetaSteps && moved == kMetaSteps;
  return {ok, std::to_string(frozen) + "/" + std::to_string(res.audits.size()) +
                  " meta steps frozen-clean, " + std::to_string(moved) +
                  " with every trainable group updated"};
}

// ---------------------------------------------------------------- 7
double retrieval_of(const MetricsReport& r, std::size_t subject) {
  return *r.per_subject.at(subject).retrieval();
}

Outcome ablation() {
  const auto t0 = Clock::now();
  std::map<std::string, double> mean;
  const std::vector<std::pair<bool, bool>> toggles{{false, false}, {false, true}, {true, false}, {true, true}};
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    const ExperimentConfig base = preset("desk_retrieval.json", seed);
    const Dataset data = generate_dataset(base.data, base.seed);
    for (const auto& [mobe_on, sra_on] : toggles) {
      ExperimentConfig c = base;
      c.train.mobe_enabled = mobe_on;
      c.train.sra_enabled = sra_on;
      const auto res = run_experiment(c, &data);
      mean[res.report.label] += *res.report.average.retrieval() / kSeeds;
    }
  }
  const double secs = seconds_since(t0);
  const double full = mean["full"], mobe = mean["mobe-only"], sra = mean["sra-only"], van = mean["vanilla-multi"];
  const bool ok = full > mobe && mobe > van && full > sra && sra > van && full - van >= kAblationGap &&
                  secs < kAblationBudgetSec;
  return {ok, "full " + fmt(full) + ", mobe-only " + fmt(mobe) + ", sra-only " + fmt(sra) + ", vanilla " +
                  fmt(van) + ", full-vanilla " + fmt(100 * (full - van), 3) + " pp, " + fmt(secs, 4) + " s"};
}

// ---------------------------------------------------------------- 8
Outcome few_shot() {
  const auto t0 = Clock::now();
  double multi = 0.0, single = 0.0;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    ExperimentConfig c = preset("desk_retrieval.json", seed);
    c.train.few_shot = FewShotSpec{kFewShotSubject, kFewShotRatio};
    const Dataset data = generate_dataset(c.data, c.seed);
    multi += retrieval_of(run_experiment(c, &data).report, kFewShotSubject) / kSeeds;

    c.train.mobe_enabled = c.train.sra_enabled = false;
    c.train.single_subject = kFewShotSubject;
    single += retrieval_of(run_experiment(c, &data).report, 0) / kSeeds;
  }
  const double secs = seconds_since(t0);
  const bool ok = multi - single >= kFewShotGap && secs < kFewShotBudgetSec;
  return {ok, "subject " + std::to_string(kFewShotSubject) + " at ratio " + fmt(kFewShotRatio) + ": full multi " +
                  fmt(multi) + ", single vanilla " + fmt(single) + ", gap " + fmt(100 * (multi - single), 3) +
                  " pp, " + fmt(secs, 4) + " s"};
}

// ---------------------------------------------------------------- 9
Outcome misalignment() {
  const auto t0 = Clock::now();
  double aligned = 0.0, misaligned = 0.0;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    ExperimentConfig c = preset("desk_classification.json", seed);
    aligned += *run_experiment(c).report.average.mean_ap / kSeeds;
    c.data.misalign = true;
    misaligned += *run_experiment(c).report.average.mean_ap / kSeeds;
  }
  const double secs = seconds_since(t0);
  const double drop = (aligned - misaligned) / aligned;
  const bool ok = drop >= kMisalignDrop && secs < kMisalignBudgetSec;
  return {ok, "mAP aligned " + fmt(aligned) + ", misaligned " + fmt(misaligned) + ", relative drop " +
                  fmt(100 * drop, 3) + "%, " + fmt(secs, 4) + " s"};
}

// ---------------------------------------------------------------- 10
std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// Relative path -> bytes for every checkpoint file under dir.
std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = slurp(e.path());
  return out;
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "mobe_acceptance_determinism";
  fs::remove_all(root);
  ExperimentConfig c = load_config(config_dir + "/smoke.json");
  c.seed = 10;
  RunOptions a, b;
  a.out_dir = root / "a";
  b.out_dir = root / "b";
  const auto ra = run_experiment(c, nullptr, a);
  const auto rb = run_experiment(c, nullptr, b);
  const auto ta = tree(a.out_dir / "checkpoints"), tb = tree(b.out_dir / "checkpoints");
  const bool ckpt_same = !ta.empty() && ta == tb;
  const bool report_same = to_json(ra.report, false) == to_json(rb.report, false);
  const bool ok = ckpt_same && report_same && ra.model_hash == rb.model_hash;
  fs::remove_all(root);
  return {ok, std::to_string(ta.size()) + " checkpoint files " + (ckpt_same ? "identical" : "DIFFER") +
                  ", reports " + (report_same ? "identical" : "DIFFER") + ", model hash " +
                  hex64(ra.model_hash)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient correctness", gradients},
      {"MoBE algebra", algebra},
      {"loss closed forms", closed_forms},
      {"metric oracles", metric_oracles},
      {"router accuracy and confidence", router},
      {"freezing contracts", freezing},
      {"ablation direction", ablation},
      {"few-shot collaboration", few_shot},
      {"misalignment degradation", misalignment},
      {"determinism", determinism},
  };
  if (const char* dir = std::getenv("MOBE_CONFIG_DIR"); dir != nullptr && *dir != '\0') config_dir = dir;
  std::set<std::size_t> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::stoul(argv[i]));

  bool all = true;
  const auto t0 = Clock::now();
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected.empty() && selected.count(i + 1) == 0) continue;
    const auto start = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    all = all && o.pass;
    std::printf("%s %2zu %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                o.detail.c_str(), seconds_since(start));
    std::fflush(stdout);
  }
  std::printf("total %.1f s\n", seconds_since(t0));
  return all ? 0 : 1;
}
