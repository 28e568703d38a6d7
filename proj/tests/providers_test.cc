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

#include <chrono>

#include "cape/artifact.h"
#include "cape/file_provider.h"
#include "cape/http_provider.h"
#include "cape/providers.h"
#include "gmock/gmock.h"
#include "gtest/gtest.h"
#include "support/fake_server.h"
#include "support/fixtures.h"

namespace cape {
namespace {

using ::cape::testing::FakeSidecar;
using ::cape::testing::TempDir;
using ::cape::testing::Unwrap;
using ::testing::HasSubstr;

HttpProviderOptions FastRetries() {
  HttpProviderOptions o;
  o.initial_backoff = std::chrono::milliseconds(1);
  o.timeout = std::chrono::seconds(5);
  return o;
}

TEST(ContextWindowTest, CausalKeyIgnoresTheSuffix) {
  ContextWindow a{{1, 2, 3, 4}, 2, ContextMode::kCausal};
  ContextWindow b{{1, 2, 9, 9, 9}, 2, ContextMode::kCausal};
  EXPECT_EQ(a.Key(), b.Key());
  EXPECT_EQ(a.VisibleContext(), (std::vector<TokenId>{1, 2}));
}

TEST(ContextWindowTest, BidirectionalKeyMasksTheTarget) {
  ContextWindow a{{1, 2, 3, 4}, 2, ContextMode::kBidirectional};
  ContextWindow b{{1, 2, 7, 4}, 2, ContextMode::kBidirectional};
  ContextWindow c{{1, 2, 3, 5}, 2, ContextMode::kBidirectional};
  EXPECT_EQ(a.Key(), b.Key());
  EXPECT_NE(a.Key(), c.Key());
  EXPECT_EQ(a.VisibleContext(), (std::vector<TokenId>{1, 2, kMaskSentinel, 4}));
  EXPECT_FALSE(ContextWindow({1}, 1).Validate().ok());
}

TEST(ProviderTest, ValidatesWhatTheModelReturns) {
  Vocabulary vocab = testing::MakeVocabulary(4);
  double poison = 0;
  FunctionProvider p(vocab, ContextMode::kBidirectional,
                     [&](const ContextWindow&) -> absl::StatusOr<LogitVector> {
                       return LogitVector{{0, 1, poison, 2}, ""};
                     });
  EXPECT_TRUE(p.ContextLogits(ContextWindow{{0, 1}, 0}).ok());
  poison = NAN;
  absl::StatusOr<LogitVector> bad = p.ContextLogits(ContextWindow{{0, 1}, 0});
  EXPECT_FALSE(bad.ok());
  EXPECT_TRUE(IsProviderError(bad.status()));
  EXPECT_FALSE(p.FetchEmbeddingTable().ok());
}

TEST(FileProviderTest, LogitRecordsAreLittleEndianFloat32) {
  std::string bytes = internal::EncodeLogitRecord({1.0, -2.5});
  ASSERT_EQ(bytes.size(), 8u);
  EXPECT_EQ(bytes.substr(0, 4), std::string("\x00\x00\x80\x3f", 4));
  EXPECT_EQ(internal::DecodeLogitRecord(bytes), (std::vector<double>{1.0, -2.5}));
}

TEST(FileProviderTest, ReplaysExactlyTheStoredVectors) {
  auto world = testing::MakeWorkedExampleWorld();
  TempDir dir;
  std::vector<TokenId> ids =
      Unwrap(world->provider->Tokenize(testing::kWorkedExamplePrompt));
  ASSERT_TRUE(testing::RecordFixture(*world, {ids},
                                     ContextMode::kBidirectional, dir.path())
                  .ok());
  FileProvider file = Unwrap(FileProvider::Open(dir.path(), world->vocab));
  // "slow" occurs twice in different contexts; "very" twice too.
  EXPECT_EQ(file.record_count(), ids.size());
  for (size_t i = 0; i < ids.size(); ++i) {
    LogitVector replay = Unwrap(file.ContextLogits(ContextWindow{ids, i}));
    LogitVector live =
        Unwrap(world->provider->ContextLogits(ContextWindow{ids, i}));
    ASSERT_EQ(replay.values.size(), live.values.size());
    for (size_t j = 0; j < live.values.size(); ++j) {
      EXPECT_EQ(replay.values[j], static_cast<float>(live.values[j]));
    }
  }
  EXPECT_TRUE(Unwrap(file.FetchEmbeddingTable()) == world->table);
  EXPECT_EQ(file.descriptor().model_name, "synthetic");
}

TEST(FileProviderTest, MissingRecordAndModeMismatchAreErrors) {
  auto world = testing::MakeWorkedExampleWorld();
  TempDir dir;
  ASSERT_TRUE(testing::RecordFixture(*world, {{0, 1, 2}},
                                     ContextMode::kBidirectional, dir.path())
                  .ok());
  FileProvider file = Unwrap(FileProvider::Open(dir.path(), world->vocab));
  absl::StatusOr<LogitVector> missing =
      file.ContextLogits(ContextWindow{{0, 1, 3}, 0});
  EXPECT_EQ(missing.status().code(), absl::StatusCode::kNotFound);
  EXPECT_TRUE(IsProviderError(missing.status()));
  EXPECT_FALSE(
      file.ContextLogits(ContextWindow{{0, 1, 2}, 0, ContextMode::kCausal}).ok());
}

TEST(FileProviderTest, RejectsAnotherVocabulary) {
  auto world = testing::MakeWorkedExampleWorld();
  TempDir dir;
  ASSERT_TRUE(testing::RecordFixture(*world, {{0, 1}},
                                     ContextMode::kBidirectional, dir.path())
                  .ok());
  std::vector<std::string> tokens = testing::WorkedExampleTokens();
  std::swap(tokens[0], tokens[1]);
  Vocabulary other = Unwrap(Vocabulary::FromTokens(tokens));
  absl::StatusOr<FileProvider> p = FileProvider::Open(dir.path(), other);
  EXPECT_FALSE(p.ok());
  EXPECT_THAT(p.status().message(), HasSubstr("vocabulary"));
}

TEST(FileProviderTest, WriterOutputIsDeterministic) {
  auto world = testing::MakeWorkedExampleWorld();
  TempDir a, b;
  std::vector<std::vector<TokenId>> prompts = {{0, 1, 2}, {3, 4, 5, 6}};
  ASSERT_TRUE(testing::RecordFixture(*world, prompts,
                                     ContextMode::kCausal, a.path())
                  .ok());
  std::reverse(prompts.begin(), prompts.end());
  ASSERT_TRUE(testing::RecordFixture(*world, prompts,
                                     ContextMode::kCausal, b.path())
                  .ok());
  EXPECT_EQ(testing::ReadText(a / "manifest.json"),
            testing::ReadText(b / "manifest.json"));
  EXPECT_EQ(testing::ReadText(a / "meta.json"), testing::ReadText(b / "meta.json"));
}

TEST(HttpProviderTest, SpeaksTheWireContract) {
  auto world = testing::MakeWorkedExampleWorld();
  FakeSidecar server(*world);
  std::unique_ptr<HttpProvider> http =
      Unwrap(HttpProvider::Connect(server.url(), world->vocab, FastRetries()));
  EXPECT_EQ(http->descriptor().vocab_size, world->vocab.size());
  EXPECT_EQ(http->descriptor().model_name, "fake-mlm");
  EXPECT_EQ(http->dim(), 16u);
  std::vector<TokenId> ids = Unwrap(http->Tokenize("it 's slow"));
  EXPECT_EQ(ids, Unwrap(world->provider->Tokenize("it 's slow")));
  EXPECT_TRUE(Unwrap(http->Tokenize("")).empty());
  LogitVector logits = Unwrap(http->ContextLogits(ContextWindow{ids, 2}));
  EXPECT_EQ(logits.values.size(), world->vocab.size());
  EmbeddingTable first = Unwrap(http->FetchEmbeddingTable());
  EmbeddingTable second = Unwrap(http->FetchEmbeddingTable());
  EXPECT_TRUE(first == second);
  EXPECT_TRUE(first == world->table);
}

TEST(HttpProviderTest, WrongChecksumFailsBeforeAnyLogitRequest) {
  auto world = testing::MakeWorkedExampleWorld();
  FakeSidecar server(*world);
  server.vocab_sha256_override = std::string(64, '0');
  absl::StatusOr<std::unique_ptr<HttpProvider>> http =
      HttpProvider::Connect(server.url(), world->vocab, FastRetries());
  ASSERT_FALSE(http.ok());
  EXPECT_THAT(http.status().message(), HasSubstr("vocabulary"));
  EXPECT_EQ(server.logit_requests.load(), 0);
}

TEST(HttpProviderTest, RetriesServerErrorsButNotClientErrors) {
  auto world = testing::MakeWorkedExampleWorld();
  FakeSidecar server(*world);
  std::unique_ptr<HttpProvider> http =
      Unwrap(HttpProvider::Connect(server.url(), world->vocab, FastRetries()));
  server.failures = 2;
  EXPECT_TRUE(http->ContextLogits(ContextWindow{{0, 1}, 1}).ok());
  server.failures = 3;
  absl::StatusOr<LogitVector> gave_up =
      http->ContextLogits(ContextWindow{{0, 1}, 1});
  EXPECT_EQ(gave_up.status().code(), absl::StatusCode::kUnavailable);
  EXPECT_TRUE(IsProviderError(gave_up.status()));

  const int before = server.requests.load();
  absl::StatusOr<std::vector<TokenId>> bad = http->Tokenize("not-a-token");
  EXPECT_EQ(bad.status().code(), absl::StatusCode::kInvalidArgument);
  EXPECT_EQ(server.requests.load() - before, 1);
}

TEST(HttpProviderTest, UnreachableServerIsAProviderError) {
  auto world = testing::MakeWorkedExampleWorld();
  HttpProviderOptions o = FastRetries();
  o.attempts = 1;
  absl::StatusOr<std::unique_ptr<HttpProvider>> http =
      HttpProvider::Connect("http://127.0.0.1:1", world->vocab, o);
  ASSERT_FALSE(http.ok());
  EXPECT_TRUE(IsProviderError(http.status()));
}

TEST(HttpProviderTest, RecordedReplayMatchesTheLiveRun) {
  auto world = testing::MakeWorkedExampleWorld();
  FakeSidecar server(*world);
  std::unique_ptr<HttpProvider> http =
      Unwrap(HttpProvider::Connect(server.url(), world->vocab, FastRetries()));
  TempDir dir;
  FileProviderWriter writer(dir.path(), world->vocab, "fake-mlm",
                            ContextMode::kBidirectional);
  RecordingProvider recorder(*http, world->vocab, writer);

  EmbeddingTable table = Unwrap(recorder.FetchEmbeddingTable());
  DistanceCache distances(table);
  NonSensitiveSet nonsensitive = DefaultNonSensitive(world->vocab).set;
  std::vector<CorpusPrompt> prompts = Unwrap(ParseCorpus(
      "it 's slow -- very , very slow .\nbad plot , long story\n", recorder));
  MechanismConfig config;
  config.epsilon = 3;
  config.seed = 99;
  MechanismContext live{&world->vocab, &distances, &nonsensitive, &recorder};
  std::string live_artifact = EncodeArtifact(
      Unwrap(PerturbCorpus(live, config, prompts, {4, false})), config);
  ASSERT_TRUE(writer.Finish().ok());

  FileProvider replay = Unwrap(FileProvider::Open(dir.path(), world->vocab));
  EmbeddingTable replay_table = Unwrap(replay.FetchEmbeddingTable());
  EXPECT_TRUE(replay_table == table);
  DistanceCache replay_distances(replay_table);
  MechanismContext offline{&world->vocab, &replay_distances, &nonsensitive,
                           &replay};
  std::string replay_artifact = EncodeArtifact(
      Unwrap(PerturbCorpus(offline, config, prompts, {1, false})), config);
  EXPECT_EQ(live_artifact, replay_artifact);
}

}  // namespace
}  // namespace cape
