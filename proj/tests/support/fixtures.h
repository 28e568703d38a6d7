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

#ifndef CAPE_TESTS_SUPPORT_FIXTURES_H_
#define CAPE_TESTS_SUPPORT_FIXTURES_H_

// Deterministic synthetic fixtures shared by the unit and acceptance tests.

#include <atomic>
#include <cmath>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "cape/file_provider.h"
#include "cape/internal/io.h"
#include "cape/mechanism.h"
#include "cape/nonsensitive_defaults.h"
#include "cape/providers.h"
#include "cape/random.h"
#include "cape/vocab.h"

namespace cape::testing {

// Unique scratch directory, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            internal::StrCat("cape_test_", ::getpid(), "_", counter++);
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const {
    return path_ / name;
  }

 private:
  std::filesystem::path path_;
};

inline void WriteText(const std::filesystem::path& path,
                      const std::string& text) {
  absl::Status s = internal::WriteFileAtomically(path, text);
  if (!s.ok()) throw std::runtime_error(std::string(s.message()));
}

inline std::string ReadText(const std::filesystem::path& path) {
  absl::StatusOr<std::string> s = internal::ReadFile(path);
  if (!s.ok()) throw std::runtime_error(std::string(s.status().message()));
  return *s;
}

template <typename T>
T Unwrap(absl::StatusOr<T> value) {
  if (!value.ok()) {
    throw std::runtime_error(std::string(value.status().message()));
  }
  return *std::move(value);
}

inline std::vector<std::string> NumberedTokens(size_t n,
                                               const std::string& prefix) {
  std::vector<std::string> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i) out.push_back(internal::StrCat(prefix, i));
  return out;
}

inline Vocabulary MakeVocabulary(size_t n, const std::string& prefix = "tok") {
  return Unwrap(Vocabulary::FromTokens(NumberedTokens(n, prefix)));
}

// Rows uniform on [-1, 1)^dim.
inline EmbeddingTable RandomEmbeddings(size_t n, size_t dim, uint64_t seed) {
  RandomStream rng = RandomStream::Derive(seed, {n, dim});
  std::vector<float> values(n * dim);
  for (float& v : values) v = static_cast<float>(2.0 * rng.UniformDouble() - 1.0);
  return Unwrap(EmbeddingTable::Create(n, dim, std::move(values)));
}

// Utility matrix with iid uniform [0, 1) entries.
inline std::vector<std::vector<double>> RandomUtilities(size_t origins,
                                                        size_t outputs,
                                                        uint64_t seed) {
  RandomStream rng = RandomStream::Derive(seed, {origins, outputs});
  std::vector<std::vector<double>> u(origins, std::vector<double>(outputs));
  for (auto& row : u) {
    for (double& x : row) x = rng.UniformDouble();
  }
  return u;
}

// A toy language model: the logit of candidate j is `scale` times the cosine
// similarity between j's embedding and the mean embedding of the visible
// context, plus a small deterministic jitter keyed by the context. The
// masked target never leaks into the context.
inline FunctionProvider::LogitFn SyntheticLogits(const EmbeddingTable* table,
                                                 double scale = 6.0,
                                                 double jitter = 0.5) {
  return [table, scale, jitter](const ContextWindow& window)
             -> absl::StatusOr<LogitVector> {
    const size_t dim = table->dim();
    std::vector<double> mean(dim, 0.0);
    const std::vector<TokenId> visible = window.VisibleContext();
    for (TokenId id : visible) {
      if (id == kMaskSentinel) continue;
      std::span<const float> row = table->row(id);
      for (size_t d = 0; d < dim; ++d) mean[d] += row[d];
    }
    double mean_norm = 0.0;
    for (double m : mean) mean_norm += m * m;
    mean_norm = std::sqrt(mean_norm);
    const std::string key = window.Key();
    // The key is a hex digest; its first 64 bits seed the jitter.
    RandomStream rng(std::stoull(key.substr(0, 16), nullptr, 16));
    LogitVector out;
    out.context_id = key;
    out.values.resize(table->size());
    for (size_t j = 0; j < table->size(); ++j) {
      std::span<const float> row = table->row(static_cast<TokenId>(j));
      double dot = 0.0, norm = 0.0;
      for (size_t d = 0; d < dim; ++d) {
        dot += row[d] * mean[d];
        norm += double(row[d]) * row[d];
      }
      const double cosine =
          mean_norm > 0 && norm > 0 ? dot / (mean_norm * std::sqrt(norm)) : 0;
      out.values[j] = scale * cosine + jitter * (2 * rng.UniformDouble() - 1);
    }
    return out;
  };
}

// Everything a mechanism run needs, built in memory.
struct World {
  Vocabulary vocab;
  EmbeddingTable table;
  std::unique_ptr<DistanceCache> distances;
  NonSensitiveSet nonsensitive;
  std::unique_ptr<Provider> provider;

  MechanismContext context() {
    return MechanismContext{&vocab, distances.get(), &nonsensitive,
                            provider.get()};
  }
};

inline std::unique_ptr<World> MakeWorld(
    std::vector<std::string> tokens, size_t dim, uint64_t seed,
    ContextMode mode = ContextMode::kBidirectional) {
  auto world = std::make_unique<World>();
  world->vocab = Unwrap(Vocabulary::FromTokens(std::move(tokens)));
  world->table = RandomEmbeddings(world->vocab.size(), dim, seed);
  world->distances = std::make_unique<DistanceCache>(world->table);
  world->nonsensitive = DefaultNonSensitive(world->vocab).set;
  world->provider = std::make_unique<FunctionProvider>(
      world->vocab, mode, SyntheticLogits(&world->table), world->table,
      "synthetic");
  return world;
}

// The worked-example prompt, pre-tokenized on whitespace.
inline constexpr char kWorkedExamplePrompt[] = "it 's slow -- very , very slow .";

// Vocabulary for the worked example: the prompt's tokens, a handful of
// stopwords and punctuation, and neutral filler words.
inline std::vector<std::string> WorkedExampleTokens() {
  std::vector<std::string> tokens = {
      "it",   "'s",    "slow",   "--",     "very",   ",",      ".",
      "the",  "a",     "is",     "and",    "this",   "!",      "?",
      "fast", "quick", "dull",   "boring", "movie",  "film",   "good",
      "bad",  "great", "awful",  "pace",   "plot",   "story",  "acting",
      "long", "short", "funny",  "sad",    "smart",  "silly",  "warm",
      "cold", "bright", "dark",  "loud",   "quiet",  "heavy",  "light"};
  for (const std::string& w : NumberedTokens(58, "filler")) tokens.push_back(w);
  return tokens;
}

inline std::unique_ptr<World> MakeWorkedExampleWorld() {
  return MakeWorld(WorkedExampleTokens(), 16, 20260214);
}

// Records the logits for every position of `prompts` (in `mode`) plus the
// embedding table into a file-provider fixture directory.
inline absl::Status RecordFixture(World& world,
                                  const std::vector<std::vector<TokenId>>& prompts,
                                  ContextMode mode,
                                  const std::filesystem::path& dir) {
  FileProviderWriter writer(dir, world.vocab, "synthetic", mode);
  for (const std::vector<TokenId>& ids : prompts) {
    for (size_t i = 0; i < ids.size(); ++i) {
      ContextWindow window{ids, i, mode};
      absl::StatusOr<LogitVector> logits = world.provider->ContextLogits(window);
      if (!logits.ok()) return logits.status();
      if (absl::Status s = writer.Add(window, *logits); !s.ok()) return s;
    }
  }
  if (absl::Status s = writer.SetEmbeddings(world.table, world.vocab);
      !s.ok()) {
    return s;
  }
  return writer.Finish();
}

// Writes the frozen worked-example fixture: vocab.txt, prompts.txt and a
// file-provider directory `provider/` holding bidirectional logits for every
// position of the prompt plus the embedding table.
inline absl::Status WriteWorkedExampleFixture(const std::filesystem::path& dir) {
  std::unique_ptr<World> world = MakeWorkedExampleWorld();
  std::string vocab_text;
  for (const std::string& t : world->vocab.tokens()) vocab_text += t + "\n";
  if (absl::Status s = internal::WriteFileAtomically(dir / "vocab.txt",
                                                     vocab_text);
      !s.ok()) {
    return s;
  }
  if (absl::Status s = internal::WriteFileAtomically(
          dir / "prompts.txt", std::string(kWorkedExamplePrompt) + "\n");
      !s.ok()) {
    return s;
  }
  absl::StatusOr<std::vector<TokenId>> ids =
      world->provider->Tokenize(kWorkedExamplePrompt);
  if (!ids.ok()) return ids.status();
  return RecordFixture(*world, {*ids}, ContextMode::kBidirectional,
                       dir / "provider");
}

}  // namespace cape::testing

#endif  // CAPE_TESTS_SUPPORT_FIXTURES_H_
