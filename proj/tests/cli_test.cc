// Copyright 2026 The Cape Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "cape_cli.h"

#include <cstdlib>
#include <sstream>

#include "gmock/gmock.h"
#include "gtest/gtest.h"
#include "support/fake_server.h"
#include "support/fixtures.h"

namespace cape::cli {
namespace {

using ::cape::testing::TempDir;
using ::cape::testing::Unwrap;
using ::testing::HasSubstr;

struct CliRun {
  int code;
  std::string out;
  std::string err;
};

CliRun Cli(std::vector<std::string> args) {
  args.insert(args.begin(), "cape");
  std::ostringstream out, err;
  int code = RunCli(args, out, err);
  return {code, out.str(), err.str()};
}

// A recorded fixture for two prompts plus the matching vocabulary file.
class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    world_ = testing::MakeWorkedExampleWorld();
    std::string vocab_text;
    for (const std::string& t : world_->vocab.tokens()) vocab_text += t + "\n";
    testing::WriteText(vocab(), vocab_text);
    testing::WriteText(dir_ / "prompts.txt",
                       "it 's slow -- very , very slow .\n"
                       "{\"prompt_id\": 7, \"text\": \"bad plot , long story\"}\n");
    std::vector<std::vector<TokenId>> prompts = {
        Unwrap(world_->provider->Tokenize(testing::kWorkedExamplePrompt)),
        Unwrap(world_->provider->Tokenize("bad plot , long story"))};
    ASSERT_TRUE(testing::RecordFixture(*world_, prompts,
                                       ContextMode::kBidirectional,
                                       dir_ / "fixture")
                    .ok());
  }

  std::string vocab() const { return (dir_ / "vocab.txt").string(); }
  std::string fixture() const { return "file:" + (dir_ / "fixture").string(); }
  std::string path(const std::string& name) const {
    return (dir_ / name).string();
  }

  std::vector<std::string> PerturbArgs(const std::string& output) {
    return {"perturb",    "--input",    path("prompts.txt"), "--output",
            path(output), "--vocab",    vocab(),             "--provider",
            fixture(),    "--epsilon",  "2"};
  }

  TempDir dir_;
  std::unique_ptr<testing::World> world_;
};

TEST_F(CliTest, SameSeedGivesIdenticalArtifacts) {
  auto a = PerturbArgs("a.jsonl"), b = PerturbArgs("b.jsonl");
  for (auto* args : {&a, &b}) {
    args->insert(args->end(), {"--seed", "7"});
    CliRun r = Cli(*args);
    ASSERT_EQ(r.code, kOk) << r.err;
  }
  EXPECT_EQ(testing::ReadText(path("a.jsonl")),
            testing::ReadText(path("b.jsonl")));
  nlohmann::json manifest =
      nlohmann::json::parse(testing::ReadText(path("a.jsonl.manifest.json")));
  EXPECT_EQ(manifest["seed"], 7);
  EXPECT_EQ(manifest["config"]["epsilon"], 2.0);
  EXPECT_TRUE(manifest["config"]["clip_bound"].is_number());
  EXPECT_EQ(manifest["provider"]["kind"], "file");
  EXPECT_EQ(manifest["summary"]["n_prompts"], 2);
  EXPECT_TRUE(manifest["timing"].contains("mean_seconds_per_prompt"));
}

TEST_F(CliTest, JobCountDoesNotChangeTheArtifact) {
  auto a = PerturbArgs("a.jsonl"), b = PerturbArgs("b.jsonl");
  a.insert(a.end(), {"--seed", "3", "--jobs", "1"});
  b.insert(b.end(), {"--seed", "3", "--jobs", "8"});
  ASSERT_EQ(Cli(a).code, kOk);
  ASSERT_EQ(Cli(b).code, kOk);
  EXPECT_EQ(testing::ReadText(path("a.jsonl")),
            testing::ReadText(path("b.jsonl")));
}

TEST_F(CliTest, DrawnSeedIsRecordedAndReplayable) {
  ASSERT_EQ(Cli(PerturbArgs("a.jsonl")).code, kOk);
  auto again = PerturbArgs("b.jsonl");
  again.insert(again.end(), {"--config", path("a.jsonl.manifest.json")});
  ASSERT_EQ(Cli(again).code, kOk);
  EXPECT_EQ(testing::ReadText(path("a.jsonl")),
            testing::ReadText(path("b.jsonl")));
}

TEST_F(CliTest, FlagsOverrideConfigFile) {
  testing::WriteText(path("cfg.json"),
                     R"({"epsilon": 9, "seed": 5, "n_buckets": 10})");
  auto args = PerturbArgs("a.jsonl");
  args.insert(args.end(), {"--config", path("cfg.json")});
  ASSERT_EQ(Cli(args).code, kOk);
  nlohmann::json m =
      nlohmann::json::parse(testing::ReadText(path("a.jsonl.manifest.json")));
  EXPECT_EQ(m["config"]["epsilon"], 2.0);
  EXPECT_EQ(m["config"]["n_buckets"], 10);
  EXPECT_EQ(m["seed"], 5);
}

TEST_F(CliTest, ZeroEpsilonIsRejected) {
  auto args = PerturbArgs("a.jsonl");
  args[args.size() - 1] = "0";
  CliRun r = Cli(args);
  EXPECT_EQ(r.code, kConfigError);
  EXPECT_THAT(r.err, HasSubstr("epsilon must be positive"));
}

TEST_F(CliTest, VocabularyMismatchIsAProviderError) {
  testing::WriteText(path("other.txt"), "x\ny\n");
  auto args = PerturbArgs("a.jsonl");
  args[6] = path("other.txt");
  CliRun r = Cli(args);
  EXPECT_EQ(r.code, kProviderError) << r.err;
}

TEST_F(CliTest, MissingRecordFailsUnlessSkipped) {
  testing::WriteText(path("prompts.txt"),
                     "it 's slow -- very , very slow .\nfast movie\n");
  auto args = PerturbArgs("a.jsonl");
  args.insert(args.end(), {"--clip-bound", "6"});
  CliRun r = Cli(args);
  EXPECT_EQ(r.code, kPartialFailure);
  EXPECT_THAT(r.err, HasSubstr("no fixture record"));
  args.push_back("--skip-errors");
  ASSERT_EQ(Cli(args).code, kOk);
  std::vector<std::string> lines =
      internal::SplitLines(testing::ReadText(path("a.jsonl")));
  EXPECT_THAT(lines[1], HasSubstr("\"error\""));
}

TEST_F(CliTest, HttpProviderFromEnvironmentRecordsAReplayableFixture) {
  testing::FakeSidecar server(*world_);
  ::setenv(kProviderUrlEnv, server.url().c_str(), 1);
  CliRun check = Cli({"serve-check", "--vocab", vocab()});
  EXPECT_EQ(check.code, kOk) << check.err;
  EXPECT_THAT(check.out, HasSubstr("fake-mlm"));

  auto live = PerturbArgs("live.jsonl");
  live.erase(live.begin() + 7, live.begin() + 9);  // drop --provider
  live.insert(live.end(), {"--seed", "11", "--record", path("rec")});
  CliRun r = Cli(live);
  ::unsetenv(kProviderUrlEnv);
  ASSERT_EQ(r.code, kOk) << r.err;

  auto replay = PerturbArgs("replay.jsonl");
  replay[8] = "file:" + path("rec");
  replay.insert(replay.end(), {"--seed", "11"});
  CliRun again = Cli(replay);
  ASSERT_EQ(again.code, kOk) << again.err;
  EXPECT_EQ(testing::ReadText(path("live.jsonl")),
            testing::ReadText(path("replay.jsonl")));
}

TEST_F(CliTest, AttackAndEvaluate) {
  auto args = PerturbArgs("a.jsonl");
  args.insert(args.end(), {"--seed", "1"});
  ASSERT_EQ(Cli(args).code, kOk);

  CliRun knn = Cli({"attack", "--artifact", path("a.jsonl"), "--attack", "knn",
                 "--k", "10", "--vocab", vocab(), "--provider", fixture(),
                 "--output", path("knn.json"), "--positions-csv",
                 path("knn.csv")});
  ASSERT_EQ(knn.code, kOk) << knn.err;
  nlohmann::json report =
      nlohmann::json::parse(testing::ReadText(path("knn.json")));
  EXPECT_EQ(report["attack_kind"], "knn");
  EXPECT_EQ(report["n_sensitive"], 8);

  CliRun rouge = Cli({"evaluate", "--artifact", path("a.jsonl"), "--metric",
                   "rouge", "--output", path("rouge.json")});
  ASSERT_EQ(rouge.code, kOk) << rouge.err;
  nlohmann::json r = nlohmann::json::parse(testing::ReadText(path("rouge.json")));
  EXPECT_EQ(r["prompts"].size(), 2u);

  CliRun mapping = Cli({"evaluate", "--artifact", path("a.jsonl"), "--metric",
                     "mapping", "--vocab", vocab(), "--provider", fixture(),
                     "--trials", "200", "--output", path("map.json")});
  ASSERT_EQ(mapping.code, kOk) << mapping.err;
  EXPECT_THAT(testing::ReadText(path("map.json.csv")),
              HasSubstr("distinct_outputs"));

  CliRun cdf = Cli({"evaluate", "--artifact", path("a.jsonl"), "--metric", "cdf",
                 "--vocab", vocab(), "--provider", fixture(), "--prompt-id",
                 "0", "--position", "2", "--output", path("cdf.json")});
  ASSERT_EQ(cdf.code, kOk) << cdf.err;
  EXPECT_THAT(testing::ReadText(path("cdf.json.standard.csv")),
              HasSubstr("probability,cumulative"));
}

TEST_F(CliTest, MtiAttackNeedsAProvider) {
  auto args = PerturbArgs("a.jsonl");
  ASSERT_EQ(Cli(args).code, kOk);
  CliRun mti = Cli({"attack", "--artifact", path("a.jsonl"), "--attack", "mti",
                 "--vocab", vocab(), "--provider", fixture()});
  // The recorded fixture holds original contexts only, not the perturbed
  // ones the attacker queries.
  EXPECT_EQ(mti.code, kProviderError);
}

TEST_F(CliTest, MissingArtifactIsAUsageError) {
  CliRun r = Cli({"evaluate", "--artifact", path("nope.jsonl"), "--metric",
               "rouge", "--output", path("x.json")});
  EXPECT_EQ(r.code, kConfigError);
  EXPECT_EQ(Cli({"attack", "--attack", "knn"}).code, kConfigError);
  EXPECT_EQ(Cli({"frobnicate"}).code, kConfigError);
}

TEST_F(CliTest, RougeOfUnperturbedArtifactIsOne) {
  testing::WriteText(path("ns.txt"), "");
  testing::WriteText(path("prompts.txt"), "it , very .\n");
  auto args = PerturbArgs("a.jsonl");
  ASSERT_EQ(Cli(args).code, kConfigError);  // nothing to calibrate from
  args.insert(args.end(), {"--clip-bound", "5"});
  ASSERT_EQ(Cli(args).code, kOk);
  ASSERT_EQ(Cli({"evaluate", "--artifact", path("a.jsonl"), "--metric",
                 "rouge", "--output", path("rouge.json")})
                .code,
            kOk);
  nlohmann::json r = nlohmann::json::parse(testing::ReadText(path("rouge.json")));
  EXPECT_EQ(r["mean"], 1.0);
}

TEST_F(CliTest, SetupIsIdempotent) {
  testing::WriteText(path("toy.txt"), "a\nb\nc\n");
  testing::WriteText(path("toy.emb"), "a\t0 0\nb\t3 4\nc\t1 1\n");
  std::vector<std::string> args = {"setup", "--vocab", path("toy.txt"),
                                   "--embeddings", path("toy.emb"),
                                   "--cache-dir", path("cache"),
                                   "--precompute-distances"};
  CliRun first = Cli(args);
  ASSERT_EQ(first.code, kOk) << first.err;
  EXPECT_THAT(first.out, HasSubstr("3 rows"));
  CliRun second = Cli(args);
  ASSERT_EQ(second.code, kOk);
  EXPECT_THAT(second.out, HasSubstr("reusing"));
}

TEST_F(CliTest, SetupCalibratesAndPerturbUsesTheCache) {
  CliRun s = Cli({"setup", "--vocab", vocab(), "--provider", fixture(),
               "--cache-dir", path("cache"), "--precompute-distances",
               "--calibration-input", path("prompts.txt")});
  ASSERT_EQ(s.code, kOk) << s.err;
  nlohmann::json cal =
      nlohmann::json::parse(testing::ReadText(path("cache/calibration.json")));
  auto args = PerturbArgs("a.jsonl");
  args.insert(args.end(), {"--cache-dir", path("cache")});
  ASSERT_EQ(Cli(args).code, kOk);
  nlohmann::json m =
      nlohmann::json::parse(testing::ReadText(path("a.jsonl.manifest.json")));
  EXPECT_EQ(m["config"]["clip_bound"], cal["clip_bound"]);
}

TEST(DpCheckCliTest, FixturesPassAndOversizeIsRejected) {
  for (const char* kind : {"identical", "random", "adversarial"}) {
    CliRun r = Cli({"dp-check", "--vocab-size", "50", "--epsilon", "2",
                 "--buckets", "5", "0", "--fixtures", "2", "--fixtures-kind",
                 kind});
    EXPECT_EQ(r.code, kOk) << kind << "\n" << r.out << r.err;
    EXPECT_THAT(r.out, HasSubstr("PASS"));
    EXPECT_THAT(r.out, ::testing::Not(HasSubstr("FAIL")));
  }
  CliRun identical = Cli({"dp-check", "--vocab-size", "20", "--fixtures-kind",
                       "identical", "--fixtures", "1"});
  EXPECT_THAT(identical.out, HasSubstr("max_ratio=1 "));
  EXPECT_EQ(Cli({"dp-check", "--vocab-size", "500"}).code, kConfigError);
}

}  // namespace
}  // namespace cape::cli
