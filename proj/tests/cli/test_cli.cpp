// Runs the command-line tool as a subprocess and checks exit codes and files.
#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

#ifndef PERTURBCERT_CLI
#error "PERTURBCERT_CLI must name the tool binary"
#endif

namespace {

struct Result {
  int code = -1;
  std::string out;
};

Result run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + std::string(PERTURBCERT_CLI) + " " + args + " 2>/dev/null";
  Result r;
  FILE* p = popen(cmd.c_str(), "r");
  if (p == nullptr) return r;
  char buf[4096];
  for (size_t n; (n = fread(buf, 1, sizeof buf, p)) > 0;) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

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
           ("perturbcert_cli_" + std::string(::testing::UnitTest::GetInstance()
                                                 ->current_test_info()
                                                 ->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path write(const std::string& name, const json& doc) {
    const fs::path p = dir_ / name;
    std::ofstream(p) << doc.dump();
    return p;
  }

  fs::path dir_;
};

const json kSmallModel = {{"dims", {2, 6, 4}}, {"epochs", 60}};

}  // namespace

TEST_F(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(run("--help").code, 0);
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("train --config /nonexistent/file.json").code, 2);
  EXPECT_EQ(run("train --format xml").code, 2);
}

TEST_F(Cli, ConfigErrorsExitTwo) {
  std::ofstream(dir_ / "broken.json") << "{";
  EXPECT_EQ(run("train --config " + (dir_ / "broken.json").string()).code, 2);
  EXPECT_EQ(run("train --config " + write("bogus.json", {{"bogus", 1}}).string()).code, 2);
  const auto empty = write("empty.json", {{"precision_set", json::array()}});
  EXPECT_EQ(run("attack --config " + empty.string()).code, 2);
  const auto missing = write("missing.json", {{"network_file", "nope.json"}});
  EXPECT_EQ(run("certify --config " + missing.string()).code, 2);
}

TEST_F(Cli, NumericalFailureExitsThree) {
  // All-zero weights: every parameter direction has a vanishing response.
  const json zero = {{"dims", {2, 3, 4}},
                     {"activations", {"tanh"}},
                     {"weights", {json(std::vector<double>(6, 0.0)),
                                  json(std::vector<double>(12, 0.0))}}};
  const auto cfg = write("zero.json", {{"network", zero},
                                       {"sample_index", 0},
                                       {"oracle", false},
                                       {"seeds", {0}}});
  EXPECT_EQ(run("lipschitz --config " + cfg.string()).code, 3);
}

TEST_F(Cli, StdoutCsvByDefault) {
  const auto cfg = write("lr.json", {{"model", kSmallModel}, {"samples", 2}});
  const Result r = run("lowrank-analyze --config " + cfg.string());
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(r.out.rfind("#", 0), 0u);
  EXPECT_NE(r.out.find("\nsample,k,t,p,m0,s_k"), std::string::npos);
}

TEST_F(Cli, OutDirWritesTableDatAndArtifactsWithManifest) {
  const auto cfg = write("train.json", {{"model", kSmallModel}});
  const fs::path out = dir_ / "out";
  const Result r = run("train --config " + cfg.string() + " --seed 5 --format json --out " +
                       out.string());
  ASSERT_EQ(r.code, 0);
  ASSERT_TRUE(fs::exists(out / "train.json"));
  ASSERT_TRUE(fs::exists(out / "train.dat"));
  ASSERT_TRUE(fs::exists(out / "train.network.json"));
  const json table = json::parse(slurp(out / "train.json"));
  EXPECT_EQ(table["manifest"]["seed"], 5);
  EXPECT_EQ(table["manifest"]["command"], "train");
  EXPECT_EQ(table["manifest"]["input_hash"].get<std::string>().size(), 40u);
  const json art = json::parse(slurp(out / "train.network.json"));
  EXPECT_EQ(art["manifest"], table["manifest"]);
  EXPECT_TRUE(art["content"].contains("weights"));

  // The artifact feeds straight back in, resolved relative to the config.
  const auto next = write("next.json", {{"network_file", "out/train.network.json"},
                                        {"samples", 2}});
  const Result r2 = run("lowrank-analyze --config " + next.string());
  EXPECT_EQ(r2.code, 0);
}

TEST_F(Cli, RerunsAreByteIdenticalWithPinnedTimestamp) {
  const auto cfg = write("c.json", {{"model", kSmallModel}, {"samples", 2}});
  const std::string env = "SOURCE_DATE_EPOCH=1700000000";
  const std::string base = "certify --config " + cfg.string() + " --out ";
  ASSERT_EQ(run(base + (dir_ / "a").string(), env).code, 0);
  ASSERT_EQ(run(base + (dir_ / "b").string(), env).code, 0);
  for (const char* f : {"certify.csv", "certify.dat", "certify.network.json"}) {
    EXPECT_EQ(slurp(dir_ / "a" / f), slurp(dir_ / "b" / f)) << f;
  }
  EXPECT_NE(slurp(dir_ / "a" / "certify.csv").find("2023-11-14T22:13:20Z"), std::string::npos);
}
