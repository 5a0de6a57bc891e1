#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "mobe/synthgen.hpp"
#include "test_util.hpp"

namespace mobe {
namespace {

namespace fs = std::filesystem;

Eigen::MatrixXd to_eigen(const Tensor& t) {
  Eigen::MatrixXd m(t.rows(), t.cols());
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m(r, c) = t(r, c);
  return m;
}

Eigen::MatrixXd with_bias(const Eigen::MatrixXd& x) {
  Eigen::MatrixXd out(x.rows(), x.cols() + 1);
  out << x, Eigen::VectorXd::Ones(x.rows());
  return out;
}

Eigen::MatrixXd targets(const Dataset& d, const std::vector<std::size_t>& ids) {
  Eigen::MatrixXd y(ids.size(), d.embeddings.cols());
  for (std::size_t r = 0; r < ids.size(); ++r)
    for (std::size_t c = 0; c < d.embeddings.cols(); ++c) y(r, c) = d.embeddings(ids[r], c);
  return y;
}

SynthConfig small_config() {
  SynthConfig c;
  c.train_per_subject = 300;
  c.test_shared = 60;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class SynthDefaults : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { data_ = new Dataset(generate_dataset(SynthConfig{}, 0)); }
  static void TearDownTestSuite() { delete data_; }
  static const Dataset& data() { return *data_; }

 private:
  static Dataset* data_;
};
Dataset* SynthDefaults::data_ = nullptr;

TEST_F(SynthDefaults, DefaultSizes) {
  EXPECT_EQ(data().num_subjects(), 4u);
  for (std::size_t s = 0; s < 4; ++s) {
    EXPECT_EQ(data().train[s].size(), 1500u);
    EXPECT_EQ(data().test[s].size(), 200u);
    EXPECT_EQ(data().train[s].x.cols(), data().input_dim());
  }
  EXPECT_EQ(data().input_dim(), data().template_spec.roi_size());
}

TEST_F(SynthDefaults, TestStimuliSharedTrainDisjoint) {
  std::set<std::size_t> seen;
  for (std::size_t s = 0; s < 4; ++s) {
    EXPECT_EQ(data().test[s].stimulus_ids, data().test[0].stimulus_ids);
    for (auto id : data().train[s].stimulus_ids) EXPECT_TRUE(seen.insert(id).second);
  }
  for (auto id : data().test[0].stimulus_ids) EXPECT_FALSE(seen.count(id));
}

// Each label is the sign of a standard normal latent coordinate.
TEST_F(SynthDefaults, LabelMarginalsNearHalf) {
  const Tensor& y = data().labels;
  ASSERT_GE(y.rows(), 2000u);
  for (std::size_t c = 0; c < y.cols(); ++c) {
    double pos = 0.0;
    for (std::size_t r = 0; r < y.rows(); ++r) pos += y(r, c);
    EXPECT_NEAR(pos / y.rows(), 0.5, 0.05) << "label " << c;
  }
}

TEST_F(SynthDefaults, EmbeddingsAreUnitRows) {
  const Tensor& e = data().embeddings;
  for (std::size_t r = 0; r < e.rows(); ++r) {
    double n = 0.0;
    for (std::size_t c = 0; c < e.cols(); ++c) n += e(r, c) * e(r, c);
    EXPECT_NEAR(n, 1.0, 1e-12);
  }
}

// Nearest class mean on the train split identifies the subject of held-out samples.
TEST_F(SynthDefaults, SubjectsAreSeparable) {
  const std::size_t S = data().num_subjects(), d = data().input_dim();
  std::vector<Eigen::VectorXd> means;
  for (std::size_t s = 0; s < S; ++s) means.push_back(to_eigen(data().train[s].x).colwise().mean().transpose());
  std::size_t correct = 0, total = 0;
  for (std::size_t s = 0; s < S; ++s) {
    const Eigen::MatrixXd x = to_eigen(data().test[s].x);
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      std::size_t best = 0;
      double best_d = 1e300;
      for (std::size_t k = 0; k < S; ++k) {
        const double dist = (x.row(r).transpose() - means[k]).squaredNorm();
        if (dist < best_d) best_d = dist, best = k;
      }
      correct += best == s;
      ++total;
    }
  }
  EXPECT_EQ(d, data().input_dim());
  EXPECT_GT(static_cast<double>(correct) / total, 0.99);
}

// A per-subject ridge read-out recovers the image embedding direction.
TEST(Synthgen, RidgeDecodesEmbeddings) {
  SynthConfig cfg;
  cfg.noise_sigma = 0.1;
  const Dataset d = generate_dataset(cfg, 3);
  for (std::size_t s = 0; s < d.num_subjects(); ++s) {
    const Eigen::MatrixXd x = with_bias(to_eigen(d.train[s].x));
    const Eigen::MatrixXd y = targets(d, d.train[s].stimulus_ids);
    const double lambda = 1.0;
    Eigen::MatrixXd gram = x.transpose() * x;
    gram.diagonal().array() += lambda;
    const Eigen::MatrixXd w = gram.ldlt().solve(x.transpose() * y);
    const Eigen::MatrixXd pred = with_bias(to_eigen(d.test[s].x)) * w;
    const Eigen::MatrixXd truth = targets(d, d.test[s].stimulus_ids);
    double cos = 0.0;
    for (Eigen::Index r = 0; r < pred.rows(); ++r) {
      cos += pred.row(r).dot(truth.row(r)) / (pred.row(r).norm() * truth.row(r).norm());
    }
    EXPECT_GT(cos / pred.rows(), 0.5) << "subject " << s;
  }
}

TEST(Synthgen, SameSeedIdenticalFiles) {
  const SynthConfig cfg = small_config();
  const fs::path a = fs::temp_directory_path() / "mobe_synth_a", b = fs::temp_directory_path() / "mobe_synth_b";
  fs::remove_all(a);
  fs::remove_all(b);
  save_dataset(generate_dataset(cfg, 17), a);
  save_dataset(generate_dataset(cfg, 17), b);
  std::size_t files = 0;
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file()) continue;
    const fs::path rel = fs::relative(entry.path(), a);
    EXPECT_EQ(slurp(entry.path()), slurp(b / rel)) << rel;
    ++files;
  }
  EXPECT_GT(files, 5u);
  EXPECT_NE(generate_dataset(cfg, 17).content_hash(), generate_dataset(cfg, 18).content_hash());
}

TEST(Synthgen, SaveLoadRoundTrip) {
  const Dataset d = generate_dataset(small_config(), 5);
  const fs::path dir = fs::temp_directory_path() / "mobe_synth_rt";
  fs::remove_all(dir);
  save_dataset(d, dir);
  const Dataset back = load_dataset(dir);
  EXPECT_EQ(back.content_hash(), d.content_hash());
  EXPECT_EQ(back.num_subjects(), d.num_subjects());
  EXPECT_EQ(back.train[2].x, d.train[2].x);
  EXPECT_THROW(load_dataset(fs::temp_directory_path() / "mobe_no_such_dataset"), std::exception);
}

TEST(Synthgen, NoiselessResponsesAreDeterministic) {
  SynthConfig cfg = small_config();
  cfg.noise_sigma = 0.0;
  const Dataset a = generate_dataset(cfg, 2), b = generate_dataset(cfg, 2);
  EXPECT_EQ(a.test[1].x, b.test[1].x);
  EXPECT_TRUE(a.train[0].x.all_finite());
}

TEST(Synthgen, RotationIsOrthogonal) {
  Rng rng(4);
  for (double strength : {0.0, 0.5, 2.0}) {
    const Tensor q = subject_rotation(8, strength, rng);
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 8; ++j) {
        double dot = 0.0;
        for (std::size_t k = 0; k < 8; ++k) dot += q(k, i) * q(k, j);
        EXPECT_NEAR(dot, i == j ? 1.0 : 0.0, 1e-12);
        if (strength == 0.0) EXPECT_EQ(q(i, j), i == j ? 1.0 : 0.0);
      }
  }
}

TEST(Synthgen, RejectsBadConfig) {
  SynthConfig c;
  c.subjects = 1;
  EXPECT_THROW(generate_dataset(c, 0), DomainError);
  c = SynthConfig{};
  c.roi_fraction = 0.0;
  EXPECT_THROW(generate_dataset(c, 0), DomainError);
  c = SynthConfig{};
  c.latent_dim = 4;
  EXPECT_THROW(generate_dataset(c, 0), DomainError);
}

TEST(Synthgen, MisalignmentShortensInputs) {
  SynthConfig cfg = small_config();
  const Dataset aligned = generate_dataset(cfg, 1);
  cfg.misalign = true;
  const Dataset mis = generate_dataset(cfg, 1);
  EXPECT_EQ(mis.input_dim(), static_cast<std::size_t>(std::llround(0.5 * aligned.input_dim())));
  ASSERT_EQ(mis.misalign_indices.size(), 4u);
  EXPECT_NE(mis.misalign_indices[0], mis.misalign_indices[1]);
  EXPECT_NE(mis.content_hash(), aligned.content_hash());
}

TEST(FewShot, CeilingArithmetic) {
  SynthConfig cfg = small_config();
  cfg.train_per_subject = 1000;
  const Dataset d = generate_dataset(cfg, 0);
  EXPECT_EQ(few_shot_subsample(d, 1, 0.05, 0).train[1].size(), 50u);
  EXPECT_EQ(few_shot_subsample(d, 1, 0.1, 0).train[1].size(), 100u);
  EXPECT_EQ(few_shot_subsample(d, 1, 0.2, 0).train[1].size(), 200u);
  EXPECT_EQ(few_shot_subsample(d, 1, 0.0015, 0).train[1].size(), 2u);
  const Dataset fs = few_shot_subsample(d, 1, 0.05, 0);
  EXPECT_EQ(fs.train[0].size(), 1000u);
  EXPECT_EQ(fs.test[1].size(), d.test[1].size());
  EXPECT_THROW(few_shot_subsample(d, 1, 0.0, 0), DomainError);
  EXPECT_THROW(few_shot_subsample(d, 9, 0.5, 0), DomainError);
}

TEST(FewShot, DefaultTenPercentKeeps150) {
  const Dataset d = generate_dataset(SynthConfig{}, 0);
  EXPECT_EQ(few_shot_subsample(d, 0, 0.1, 0).train[0].size(), 150u);
}

TEST(FewShot, FullRatioIsUnchanged) {
  const Dataset d = generate_dataset(small_config(), 0);
  EXPECT_EQ(few_shot_subsample(d, 2, 1.0, 9).content_hash(), d.content_hash());
}

TEST(FewShot, SubsetOfOriginalRows) {
  const Dataset d = generate_dataset(small_config(), 0);
  const Dataset fs = few_shot_subsample(d, 0, 0.1, 4);
  std::set<std::size_t> orig(d.train[0].stimulus_ids.begin(), d.train[0].stimulus_ids.end());
  for (auto id : fs.train[0].stimulus_ids) EXPECT_TRUE(orig.count(id));
}

TEST(SingleSubject, RenumbersToZero) {
  const Dataset d = generate_dataset(small_config(), 0);
  const Dataset one = single_subject(d, 2);
  ASSERT_EQ(one.num_subjects(), 1u);
  EXPECT_EQ(one.train[0].x, d.train[2].x);
  EXPECT_EQ(one.test[0].stimulus_ids, d.test[2].stimulus_ids);
}

}  // namespace
}  // namespace mobe
