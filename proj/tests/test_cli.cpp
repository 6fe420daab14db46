#include "foldnet/model_io.hpp"
#include "foldnet/shrink.hpp"

#include <gtest/gtest.h>
#include <json.hpp>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unistd.h>

using namespace foldnet;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("foldnet_cli_" + std::to_string(::getpid()) + "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  Outcome run(const std::string& args, const std::string& env = "") const {
    const std::string cmd = env + " " FOLDNET_CLI " " + args + " >" + path("stdout") + " 2>" + path("stderr");
    const int status = std::system(cmd.c_str());
    Outcome r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(path("stdout"));
    r.err = slurp(path("stderr"));
    return r;
  }

  // Small, fast member on Reverse.
  Outcome train(const std::string& out, int seed, int iters = 40, int hidden = 8) const {
    return run("--quiet --seed " + std::to_string(seed) +
               " train --task reverse --arch encdec --hidden " + std::to_string(hidden) +
               " --embed 6 --attention 8 --batch 4 --train-size 100 --heldout 20 --iters " + std::to_string(iters) + " -o " +
               path(out));
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, TrainWritesModelAndLossCurve) {
  const Outcome r = run("--json --seed 3 train --task reverse --hidden 8 --embed 6 --attention 8 --iters 20 --batch 4 "
                    "--train-size 50 --heldout 10 -o " + path("m.json"));
  ASSERT_EQ(r.code, 0) << r.err;
  const Network net = load_model(path("m.json"));
  EXPECT_EQ(net.layer(3).size, 8);
  const std::string csv = slurp(path("m.loss.csv"));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "iteration,loss");
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["heldout"]["items"], 10);
  EXPECT_TRUE(j["heldout"].contains("accuracy"));
}

TEST_F(Cli, ZeroIterationsWritesInitialModel) {
  const Outcome r = train("init.json", 5, 0);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(load_model(path("init.json")), make_encdec({10, 6, 8, 8}, {5, 1.0}));
}

TEST_F(Cli, UsageErrorsExitTwo) {
  Outcome r = run("train --task sorting -o " + path("x.json"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("unknown task 'sorting'"), std::string::npos) << r.err;
  r = run("train --task parity --arch encdec -o " + path("x.json"));
  EXPECT_EQ(r.code, 2);
  r = run("train --task reverse --arch transformer -o " + path("x.json"));
  EXPECT_EQ(r.code, 2);
  r = run("train --task reverse");
  EXPECT_EQ(r.code, 2);
  r = run("frobnicate");
  EXPECT_EQ(r.code, 2);
  EXPECT_FALSE(fs::exists(path("x.json")));
}

TEST_F(Cli, UnfoldAndInspect) {
  for (int s = 1; s <= 3; ++s) ASSERT_EQ(train("m" + std::to_string(s) + ".json", s, 0).code, 0);
  Outcome r = run("--json unfold " + path("m1.json") + " " + path("m2.json") + " " + path("m3.json") + " -o " + path("u.json"));
  ASSERT_EQ(r.code, 0) << r.err;
  const Network u = load_model(path("u.json"));
  const Network m = load_model(path("m1.json"));
  EXPECT_DOUBLE_EQ(nlohmann::json::parse(r.out)["size_factor"].get<double>(), size_factor(u, m));
  EXPECT_EQ(u.layer(3).size, 24);

  r = run("inspect " + path("u.json"));
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("enc_gru"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("size 24, member 8"), std::string::npos) << r.out;
  r = run("--json inspect " + path("u.json"));
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["parameters"], u.parameter_count());

  ASSERT_EQ(run("unfold " + path("m1.json") + " -o " + path("one.json")).code, 0);
  EXPECT_FALSE(topology_difference(load_model(path("one.json")), m).has_value());
}

TEST_F(Cli, UnfoldMismatchExitsOne) {
  ASSERT_EQ(train("a.json", 1, 0, 8).code, 0);
  ASSERT_EQ(train("b.json", 2, 0, 10).code, 0);
  const Outcome r = run("unfold " + path("a.json") + " " + path("b.json") + " -o " + path("u.json"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("network 2"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("layer"), std::string::npos) << r.err;
  EXPECT_EQ(run("inspect " + path("missing.json")).code, 1);
}

TEST_F(Cli, DataBoundWithoutTaskExitsTwo) {
  ASSERT_EQ(train("a.json", 1, 0).code, 0);
  ASSERT_EQ(train("b.json", 2, 0).code, 0);
  ASSERT_EQ(run("unfold " + path("a.json") + " " + path("b.json") + " -o " + path("u.json")).code, 0);
  Outcome r = run("shrink " + path("u.json") + " --pipeline default --targets member -o " + path("s.json"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("--task"), std::string::npos) << r.err;
  r = run("shrink " + path("u.json") + " --method databound --layer enc_gru --target 8 -o " + path("s.json"));
  EXPECT_EQ(r.code, 2);
  // data-free stages alone need no data
  r = run("shrink " + path("u.json") + " --method datafree --layer attention --target 8 -o " + path("s.json"));
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(load_model(path("s.json")).layer(6).size, 8);
  const auto report = nlohmann::json::parse(slurp(path("s.report.json")));
  EXPECT_EQ(report["stages"][0]["method"], "datafree");
  EXPECT_EQ(report["stages"][0]["removals"].size(), 8u);
}

TEST_F(Cli, DefaultPipelineReturnsToMemberSize) {
  for (int s = 1; s <= 3; ++s) ASSERT_EQ(train("m" + std::to_string(s) + ".json", s, 30).code, 0);
  ASSERT_EQ(run("unfold " + path("m1.json") + " " + path("m2.json") + " " + path("m3.json") + " -o " + path("u.json")).code, 0);
  ASSERT_EQ(run("--quiet shrink " + path("u.json") + " --pipeline default --targets member --task reverse --train-size 100 "
                "--heldout 20 --batch 4 -o " + path("s.json")).code,
            0);
  const Network s = load_model(path("s.json"));
  const Network m = load_model(path("m1.json"));
  for (int d = 3; d <= 6; ++d) EXPECT_EQ(s.layer(d).size, m.layer(d).size) << d;
  // embeddings land on the rank bound: vocabulary 10 rows, below 3 x 6
  EXPECT_LE(s.layer(2).size, 10);
  const double factor = member_size_factor(s);
  EXPECT_GT(factor, 0.9);
  EXPECT_LT(factor, 1.5);
  EXPECT_TRUE(fs::exists(path("s.loss.csv")));
}

TEST_F(Cli, SvdOnRankEightEmbeddingIsExact) {
  Network net = make_encdec({12, 10, 8, 8}, {4, 1.0});
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n;
  Matrix a(12, 8), b(8, 10);
  for (Eigen::Index k = 0; k < a.size(); ++k) a.data()[k] = n(rng);
  for (Eigen::Index k = 0; k < b.size(); ++k) b.data()[k] = n(rng);
  net.connections[static_cast<std::size_t>(net.find_connection(1, 2, Tag::Plain))].weights = a * b / 4.0;
  save_model(net, path("r.json"));
  const Outcome r = run("shrink " + path("r.json") + " --method svd --layer enc_embed --target 8 -o " + path("s.json"));
  ASSERT_EQ(r.code, 0) << r.err;
  const Network s = load_model(path("s.json"));
  EXPECT_EQ(s.layer(2).size, 8);
  const std::vector<std::vector<int>> srcs{{2, 3, 4}, {11, 10, 9, 8}, {5, 5, 7, 2, 6}};
  EXPECT_LE(divergence(net, s, std::span<const std::vector<int>>(srcs)).max_abs, 1e-6);
}

TEST_F(Cli, ReorderedPipelineWarns) {
  ASSERT_EQ(train("a.json", 1, 0).code, 0);
  ASSERT_EQ(train("b.json", 2, 0).code, 0);
  ASSERT_EQ(run("unfold " + path("a.json") + " " + path("b.json") + " -o " + path("u.json")).code, 0);
  std::ofstream(path("p.json")) << R"({"stages": [{"method": "datafree", "targets": {"attention": 10}},
                                                 {"method": "svd", "targets": {"dec_embed": 8}}]})";
  const Outcome r = run("shrink " + path("u.json") + " --pipeline " + path("p.json") + " -o " + path("s.json"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("svd -> datafree -> databound"), std::string::npos) << r.err;
}

TEST_F(Cli, EvalEnsembleOfCopiesEqualsSingle) {
  ASSERT_EQ(train("m.json", 1, 60).code, 0);
  const std::string data = " --task reverse --heldout 30";
  const Outcome one = run("--json eval " + path("m.json") + data);
  const Outcome ens = run("--json eval --ensemble " + path("m.json") + " " + path("m.json") + " " + path("m.json") + data);
  ASSERT_EQ(one.code, 0) << one.err;
  ASSERT_EQ(ens.code, 0) << ens.err;
  const auto a = nlohmann::json::parse(one.out)["models"][0];
  const auto b = nlohmann::json::parse(ens.out)["ensemble"];
  EXPECT_EQ(a["accuracy"], b["accuracy"]);
  EXPECT_NEAR(a["mean_nll"].get<double>(), b["mean_nll"].get<double>(), 1e-12);
  const Outcome agree = run("--json eval " + path("m.json") + " --reference " + path("m.json") + data);
  EXPECT_EQ(nlohmann::json::parse(agree.out)["agreement"][0]["agreement"], 1.0);
}

TEST_F(Cli, BenchRepetitions) {
  ASSERT_EQ(train("m.json", 1, 0).code, 0);
  EXPECT_EQ(run("bench " + path("m.json") + " --task reverse --reps 2").code, 2);
  EXPECT_EQ(run("bench " + path("m.json") + " --task reverse --threads 0").code, 2);
  const Outcome r = run("--json bench " + path("m.json") + " --task reverse --heldout 20 --reps 3 --threads 2");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["repetitions"], 3);
  EXPECT_EQ(j["threads"], 2);
  EXPECT_GT(j["tokens_per_second"].get<double>(), 0.0);
}

TEST_F(Cli, SampleCapEnvironment) {
  ASSERT_EQ(train("a.json", 1, 0).code, 0);
  ASSERT_EQ(train("b.json", 2, 0).code, 0);
  ASSERT_EQ(run("unfold " + path("a.json") + " " + path("b.json") + " -o " + path("u.json")).code, 0);
  const std::string shrink = "shrink " + path("u.json") +
                             " --method databound --layer dec_gru --target 12 --task reverse --train-size 50 --batch 2 -o " +
                             path("s.json");
  EXPECT_EQ(run(shrink, "FOLDNET_SAMPLE_CAP=abc").code, 2);
  EXPECT_EQ(run(shrink, "FOLDNET_SAMPLE_CAP=20").code, 0);
}

TEST_F(Cli, SameSeedSameBytes) {
  ASSERT_EQ(train("a.json", 7, 30).code, 0);
  ASSERT_EQ(train("b.json", 7, 30).code, 0);
  EXPECT_EQ(slurp(path("a.json")), slurp(path("b.json")));
  EXPECT_EQ(slurp(path("a.loss.csv")), slurp(path("b.loss.csv")));
  ASSERT_EQ(train("c.json", 8, 30).code, 0);
  EXPECT_NE(slurp(path("a.json")), slurp(path("c.json")));
}
