// Copyright 2026 The ditm Authors. All rights reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cli.hpp"
#include "ditm/common/fileio.hpp"
#include "ditm/common/hash.hpp"

namespace ditm::cli {
namespace {

namespace fs = std::filesystem;

struct Outcome {
  int code = 0;
  std::string out, err;
};

Outcome ditm(std::vector<std::string> args) {
  std::ostringstream out, err;
  Outcome r;
  r.code = run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

nlohmann::json manifest(const fs::path& dir) { return nlohmann::json::parse(read_text(dir / "manifest.json")); }

class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / "ditm_cli_test";
    fs::remove_all(root_);
    const Outcome g = ditm({"generate", "--out", (root_ / "gen").string(), "--seed", "5", "--n-train", "24", "--n-val",
                        "8", "--n-per-subtask", "2"});
    ASSERT_EQ(g.code, kOk) << g.err;
    const Outcome t = ditm({"train", "--dataset", (root_ / "gen/dataset").string(), "--out", (root_ / "train").string(),
                        "--epochs", "2", "--width", "4", "--batch-size", "8"});
    ASSERT_EQ(t.code, kOk) << t.err;
  }
  static fs::path root_;
  static fs::path gen() { return root_ / "gen"; }
  static fs::path model() { return root_ / "train/model.ckpt"; }
};
fs::path CliTest::root_;

TEST_F(CliTest, GenerateIsDeterministicForASeed) {
  const Outcome g = ditm({"generate", "--out", (root_ / "gen2").string(), "--seed", "5", "--n-train", "24", "--n-val",
                      "8", "--n-per-subtask", "2"});
  ASSERT_EQ(g.code, kOk) << g.err;
  EXPECT_EQ(manifest(gen())["outputs"], manifest(root_ / "gen2")["outputs"]);
  EXPECT_EQ(manifest(gen())["status"], "ok");
  EXPECT_FALSE(manifest(gen())["outputs"].empty());
}

TEST_F(CliTest, ResolvedConfigIsPrintedAndRecorded) {
  const Outcome g = ditm({"generate", "--out", (root_ / "gen3").string(), "--n-train", "4", "--n-val", "4",
                      "--n-per-subtask", "1", "--nuisance-rate", "0.25"});
  ASSERT_EQ(g.code, kOk) << g.err;
  EXPECT_NE(g.out.find("nuisance-rate = 0.25"), std::string::npos);
  EXPECT_NE(g.out.find("k = 4"), std::string::npos);
  EXPECT_EQ(manifest(root_ / "gen3")["config"]["nuisance-rate"], "0.25");
}

TEST_F(CliTest, UsageErrorsExitWithOne) {
  EXPECT_EQ(ditm({}).code, kUsage);
  EXPECT_EQ(ditm({"frobnicate"}).code, kUsage);
  const Outcome bad = ditm({"generate", "--out", (root_ / "bad").string(), "--n-train", "0"});
  EXPECT_EQ(bad.code, kUsage);
  EXPECT_NE(bad.err.find("n-train"), std::string::npos);
  EXPECT_EQ(ditm({"eval", "--suite", (gen() / "suite").string()}).code, kUsage);  // no checkpoint
  EXPECT_EQ(ditm({"eval", "--suite", (gen() / "suite").string(), "--checkpoint", model().string(), "--out",
                  (root_ / "bad").string(), "--mode", "sideways"})
                .code,
            kUsage);
  EXPECT_EQ(ditm({"--help"}).code, kOk);
}

TEST_F(CliTest, FinetuneNeedsLambdaUnlessNoNeg) {
  const std::vector<std::string> base = {"finetune", "--dataset", (gen() / "dataset").string(), "--checkpoint",
                                         model().string(), "--epochs", "1", "--val-records", "4", "--bank-size", "2"};
  auto args = base;
  args.insert(args.end(), {"--out", (root_ / "ft0").string()});
  const Outcome missing = ditm(args);
  EXPECT_EQ(missing.code, kUsage);
  EXPECT_NE(missing.err.find("--lambda"), std::string::npos);

  args = base;
  args.insert(args.end(), {"--out", (root_ / "ft1").string(), "--lambda", "-1.0"});
  const Outcome clipped = ditm(args);
  ASSERT_EQ(clipped.code, kOk) << clipped.err;
  EXPECT_EQ(manifest(root_ / "ft1")["config"]["lambda"], "-1.0");
  EXPECT_TRUE(fs::exists(root_ / "ft1/sanity.json"));
  EXPECT_TRUE(fs::exists(root_ / "ft1/report.json"));

  args = base;
  args.insert(args.end(), {"--out", (root_ / "ft2").string(), "--no-neg"});
  const Outcome no_neg = ditm(args);
  ASSERT_EQ(no_neg.code, kOk) << no_neg.err;
  const auto report = nlohmann::json::parse(read_text(root_ / "ft2/report.json"));
  EXPECT_EQ(manifest(root_ / "ft2")["config"]["no-neg"], "true");
  EXPECT_NE(report.dump().find("\"use_negatives\":false"), std::string::npos) << report.dump();
}

TEST_F(CliTest, EvalBankSizeDefaultsToTenAndCanBeRaised) {
  const std::vector<std::string> base = {"eval", "--suite", (gen() / "suite").string(), "--checkpoint",
                                         model().string(), "--mode", "image-naive"};
  auto args = base;
  args.insert(args.end(), {"--out", (root_ / "ev10").string()});
  ASSERT_EQ(ditm(args).code, kOk);
  EXPECT_EQ(manifest(root_ / "ev10")["config"]["bank-size"], "10");
  const auto r10 = nlohmann::json::parse(read_text(root_ / "ev10/result.json"));
  EXPECT_NE(r10.dump().find("n=10,"), std::string::npos);

  args = base;
  args.insert(args.end(), {"--out", (root_ / "ev250").string(), "--bank-size", "250"});
  ASSERT_EQ(ditm(args).code, kOk);
  EXPECT_EQ(manifest(root_ / "ev250")["config"]["bank-size"], "250");
  EXPECT_TRUE(fs::exists(root_ / "ev250/scores.csv"));
}

TEST_F(CliTest, ReportComparesModesAndRejectsEmptyInput) {
  for (const char* mode : {"image-naive", "image-normalized"}) {
    const Outcome r = ditm({"eval", "--suite", (gen() / "suite").string(), "--checkpoint", model().string(), "--mode",
                        mode, "--bank-size", "2", "--out", (root_ / "rep" / mode).string()});
    ASSERT_EQ(r.code, kOk) << r.err;
  }
  const Outcome rep = ditm({"report", (root_ / "rep/image-naive").string(), (root_ / "rep/image-normalized").string(),
                        "--out", (root_ / "rep/table").string()});
  ASSERT_EQ(rep.code, kOk) << rep.err;
  const std::string md = read_text(root_ / "rep/table/report.md");
  EXPECT_NE(md.find("image-normalized"), std::string::npos);
  EXPECT_NE(md.find("chance"), std::string::npos);

  const Outcome empty = ditm({"report", "--out", (root_ / "rep/empty").string()});
  EXPECT_NE(empty.code, kOk);
  EXPECT_FALSE(fs::exists(root_ / "rep/empty/report.md"));
}

TEST_F(CliTest, RerunFromRecordedConfigIsIdentical) {
  const Outcome a = ditm({"eval", "--suite", (gen() / "suite").string(), "--checkpoint", model().string(), "--mode",
                      "text", "--bank-size", "3", "--bank-seed", "11", "--out", (root_ / "cfg_a").string()});
  ASSERT_EQ(a.code, kOk) << a.err;
  // run.cfg names the old output directory; the command line wins.
  const Outcome b = ditm({"eval", "--config", (root_ / "cfg_a/run.cfg").string(), "--out", (root_ / "cfg_b").string()});
  ASSERT_EQ(b.code, kOk) << b.err;
  auto ca = manifest(root_ / "cfg_a")["config"], cb = manifest(root_ / "cfg_b")["config"];
  ca.erase("out");
  cb.erase("out");
  EXPECT_EQ(ca, cb);
  EXPECT_EQ(hash_file(root_ / "cfg_a/result.json"), hash_file(root_ / "cfg_b/result.json"));
  EXPECT_EQ(hash_file(root_ / "cfg_a/scores.csv"), hash_file(root_ / "cfg_b/scores.csv"));
}

TEST_F(CliTest, EnvironmentSitsBetweenCommandLineAndConfig) {
  write_text_atomic(root_ / "prec.cfg", "bank-size = 3\nmode = text\n");
  const std::vector<std::string> base = {"eval", "--suite", (gen() / "suite").string(), "--checkpoint",
                                         model().string(), "--config", (root_ / "prec.cfg").string()};
  auto args = base;
  args.insert(args.end(), {"--out", (root_ / "prec1").string()});
  ASSERT_EQ(ditm(args).code, kOk);
  EXPECT_EQ(manifest(root_ / "prec1")["config"]["bank-size"], "3");

  setenv("DITM_BANK_SIZE", "4", 1);
  args = base;
  args.insert(args.end(), {"--out", (root_ / "prec2").string()});
  ASSERT_EQ(ditm(args).code, kOk);
  args = base;
  args.insert(args.end(), {"--out", (root_ / "prec3").string(), "--bank-size", "5"});
  ASSERT_EQ(ditm(args).code, kOk);
  unsetenv("DITM_BANK_SIZE");
  EXPECT_EQ(manifest(root_ / "prec2")["config"]["bank-size"], "4");
  EXPECT_EQ(manifest(root_ / "prec3")["config"]["bank-size"], "5");

  write_text_atomic(root_ / "typo.cfg", "bank-sise = 3\n");
  auto typo = base;
  typo[6] = (root_ / "typo.cfg").string();
  typo.insert(typo.end(), {"--out", (root_ / "prec4").string()});
  EXPECT_EQ(ditm(typo).code, kUsage);
}

TEST_F(CliTest, InterruptedTrainingResumes) {
  // A run stopped after epoch 1 (simulated by training one epoch), then resumed to 2.
  const fs::path dir = root_ / "resume";
  ASSERT_EQ(ditm({"train", "--dataset", (gen() / "dataset").string(), "--out", dir.string(), "--epochs", "1",
                  "--width", "4", "--batch-size", "8"})
                .code,
            kOk);
  const Outcome r = ditm({"train", "--dataset", (gen() / "dataset").string(), "--out", dir.string(), "--epochs", "2",
                      "--width", "4", "--batch-size", "8", "--resume"});
  ASSERT_EQ(r.code, kOk) << r.err;
  EXPECT_EQ(hash_file(dir / "model.ckpt"), hash_file(model()));
}

TEST_F(CliTest, SweepAndBiasWriteTheirTables) {
  const Outcome s = ditm({"sweep", "--suite", (gen() / "suite").string(), "--checkpoint", model().string(), "--mode",
                      "image-normalized", "--sizes", "1,2,4", "--out", (root_ / "sweep").string()});
  ASSERT_EQ(s.code, kOk) << s.err;
  EXPECT_EQ(read_text(root_ / "sweep/sweep.csv").rfind("bank_size,", 0), 0u);
  EXPECT_EQ(ditm({"sweep", "--suite", (gen() / "suite").string(), "--checkpoint", model().string(), "--sizes",
                  "4,2", "--out", (root_ / "sweep_bad").string()})
                .code,
            kUsage);

  const Outcome b = ditm({"bias", "--checkpoint", model().string(), "--noise-samples", "2", "--out",
                      (root_ / "bias").string()});
  ASSERT_EQ(b.code, kOk) << b.err;
  EXPECT_TRUE(fs::exists(root_ / "bias/bias.csv"));
  EXPECT_TRUE(fs::exists(root_ / "bias/bias.md"));
  EXPECT_TRUE(fs::exists(root_ / "bias/bias_config.json"));
}

TEST_F(CliTest, MissingInputIsARuntimeFailure) {
  write_text_atomic(root_ / "broken.ckpt", "not a checkpoint");
  const Outcome r = ditm({"eval", "--suite", (gen() / "suite").string(), "--checkpoint",
                      (root_ / "broken.ckpt").string(), "--out", (root_ / "broken").string()});
  EXPECT_EQ(r.code, kFailure);
  EXPECT_EQ(manifest(root_ / "broken")["status"], "failed");
}

}  // namespace
}  // namespace ditm::cli
