#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <gtest/gtest.h>
#include <json.hpp>

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Result {
  int code = -1;
  std::string out;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(MOBE_CLI_PATH) + " " + args + " 2>/dev/null";
  Result r;
  FILE* p = popen(cmd.c_str(), "r");
  if (p == nullptr) return r;
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

json read_json(const fs::path& p) {
  std::ifstream is(p);
  return json::parse(is);
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::path(::testing::TempDir()) /
           ("mobe_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string smoke() const { return std::string("-c ") + MOBE_CONFIG_DIR + "/smoke.json"; }
  std::string path(const std::string& leaf) const { return (dir_ / leaf).string(); }

  fs::path dir_;
};

TEST_F(Cli, GenWritesFewShotSubset) {
  const auto r = run("gen --few-shot subj=0 ratio=0.1 --seed 3 -o " + path("data"));
  ASSERT_EQ(r.code, 0) << r.out;
  const json m = read_json(dir_ / "data" / "manifest.json");
  EXPECT_NE(r.out.find("subject 0: 150 train"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("subject 1: 1500 train"), std::string::npos) << r.out;
  EXPECT_FALSE(m.empty());
}

TEST_F(Cli, TrainWritesReportAndCheckpoint) {
  const auto r = run("train " + smoke() + " -o " + path("run"));
  ASSERT_EQ(r.code, 0) << r.out;
  const json rep = read_json(dir_ / "run" / "report.json");
  EXPECT_EQ(rep["label"], "full");
  EXPECT_EQ(rep["task"], "retrieval");
  EXPECT_TRUE(fs::exists(dir_ / "run" / "checkpoints" / "meta" / "index.json"));

  const auto e = run("eval " + smoke() + " --checkpoint " + path("run/checkpoints/meta") + " -o " + path("eval.json"));
  ASSERT_EQ(e.code, 0) << e.out;
  const json ev = read_json(dir_ / "eval.json");
  EXPECT_EQ(ev["average"], rep["average"]);
}

TEST_F(Cli, TogglesSelectVanilla) {
  const auto r = run("train " + smoke() + " --toggles mobe=off,sra=off -o " + path("run"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(read_json(dir_ / "run" / "report.json")["label"], "vanilla-multi");
}

TEST_F(Cli, ExitCodes) {
  EXPECT_EQ(run("train " + smoke() + " --set train.alpah=1 -o " + path("x")).code, 2);
  EXPECT_EQ(run("train " + smoke() + " --toggles mobe=maybe -o " + path("x")).code, 2);
  EXPECT_EQ(run("train -c " + path("missing.json")).code, 3);
  EXPECT_EQ(run("train " + smoke() + " --data " + path("nodata") + " -o " + path("x")).code, 3);
  EXPECT_EQ(run("eval " + smoke() + " --checkpoint " + path("nockpt")).code, 3);
  EXPECT_NE(run("frobnicate").code, 0);
}

TEST_F(Cli, Gradcheck) {
  EXPECT_EQ(run("gradcheck --trials 0").code, 0);
  const auto ok = run("gradcheck --module losses --trials 3");
  EXPECT_EQ(ok.code, 0) << ok.out;
  EXPECT_EQ(ok.out.find("FAIL"), std::string::npos);
  const auto bad = run("gradcheck --module ops --trials 3 --corrupt");
  EXPECT_NE(bad.code, 0);
  EXPECT_NE(bad.out.find("FAIL"), std::string::npos);
  EXPECT_EQ(run("gradcheck --module nope").code, 2);
}

TEST_F(Cli, ParamsReportsAdapterShare) {
  const auto r = run("params " + smoke());
  ASSERT_EQ(r.code, 0) << r.out;
  const json j = json::parse(r.out);
  EXPECT_EQ(j["rank"], 4);
  EXPECT_EQ(j["subjects"], 4);
  EXPECT_GT(j["adapters"].get<std::size_t>(), 0u);
  // Biases and norms count toward the total but not toward the shared weights.
  EXPECT_GT(j["total"].get<std::size_t>(),
            j["shared_weights"].get<std::size_t>() + j["adapters"].get<std::size_t>() +
                j["router"].get<std::size_t>());
  EXPECT_DOUBLE_EQ(j["adapter_share"].get<double>(),
                   j["adapters"].get<double>() / j["shared_weights"].get<double>());
}

TEST_F(Cli, AblateWritesCsv) {
  const auto r = run("ablate " + smoke() + " --grid misalign -o " + path("abl"));
  ASSERT_EQ(r.code, 0) << r.out;
  std::ifstream csv(dir_ / "abl" / "ablation.csv");
  std::string line;
  std::size_t rows = 0;
  bool aligned = false, misaligned = false;
  while (std::getline(csv, line)) {
    ++rows;
    aligned = aligned || line.find(",aligned,") != std::string::npos;
    misaligned = misaligned || line.find(",misaligned,") != std::string::npos;
  }
  EXPECT_GT(rows, 2u);
  EXPECT_TRUE(aligned);
  EXPECT_TRUE(misaligned);
}

}  // namespace
