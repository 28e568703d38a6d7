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

#ifndef CAPE_FILE_PROVIDER_H_
#define CAPE_FILE_PROVIDER_H_

// Offline provider backed by a fixture directory:
//
//   meta.json       {"model", "mode", "vocab_sha256", "vocab_size",
//                    "embeddings"?: file name of an embedding table}
//   manifest.json   {"records": [{"key", "mode", "target_position",
//                    "context", "file"}, ...]} sorted by key
//   records/<key>.bin   vocab_size little-endian float32 logits
//
// `key` is ContextWindow::Key(), the SHA-256 of the visible context, so a
// directory's bytes depend only on the set of windows recorded, never on the
// order they were recorded in.

#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "absl/status/status.h"
#include "absl/status/statusor.h"
#include "cape/internal/io.h"
#include "cape/providers.h"
#include "cape/vocab.h"
#include "json.hpp"

namespace cape {

namespace internal {

inline std::string EncodeLogitRecord(const std::vector<double>& values) {
  std::string out;
  out.reserve(4 * values.size());
  for (double v : values) AppendF32LE(out, static_cast<float>(v));
  return out;
}

inline std::vector<double> DecodeLogitRecord(std::string_view bytes) {
  std::vector<double> values(bytes.size() / 4);
  for (size_t i = 0; i < values.size(); ++i) {
    values[i] = static_cast<double>(ReadF32LE(bytes, 4 * i));
  }
  return values;
}

}  // namespace internal

class FileProvider : public Provider {
 public:
  static absl::StatusOr<FileProvider> Open(const std::filesystem::path& dir,
                                           const Vocabulary& vocab) {
    absl::StatusOr<std::string> meta_text =
        internal::ReadFile(dir / "meta.json");
    if (!meta_text.ok()) return MarkProviderError(meta_text.status());
    nlohmann::json meta = nlohmann::json::parse(*meta_text, nullptr, false);
    if (meta.is_discarded() || !meta.is_object()) {
      return MarkProviderError(absl::InvalidArgumentError(
          internal::StrCat((dir / "meta.json").string(), ": malformed JSON")));
    }
    FileProvider provider;
    provider.dir_ = dir;
    provider.vocab_ = &vocab;
    provider.descriptor_.kind = ProviderKind::kFile;
    provider.descriptor_.vocabulary_hash = meta.value("vocab_sha256", "");
    provider.descriptor_.vocab_size = meta.value("vocab_size", size_t{0});
    provider.descriptor_.model_name = meta.value("model", "");
    absl::StatusOr<ContextMode> mode =
        ParseContextMode(meta.value("mode", "bidirectional"));
    if (!mode.ok()) return MarkProviderError(mode.status());
    provider.descriptor_.mode = *mode;
    if (meta.contains("embeddings")) {
      provider.embeddings_file_ = meta["embeddings"].get<std::string>();
    }
    if (absl::Status s = CheckBinding(provider, vocab); !s.ok()) return s;

    absl::StatusOr<std::string> manifest_text =
        internal::ReadFile(dir / "manifest.json");
    if (manifest_text.ok()) {
      nlohmann::json manifest =
          nlohmann::json::parse(*manifest_text, nullptr, false);
      if (manifest.is_discarded() || !manifest.contains("records")) {
        return MarkProviderError(absl::InvalidArgumentError(
            internal::StrCat((dir / "manifest.json").string(), ": malformed")));
      }
      for (const auto& record : manifest["records"]) {
        provider.files_.emplace(record["key"].get<std::string>(),
                                record["file"].get<std::string>());
      }
    } else if (!absl::IsNotFound(manifest_text.status())) {
      return MarkProviderError(manifest_text.status());
    }
    return provider;
  }

  const ProviderDescriptor& descriptor() const override { return descriptor_; }
  size_t record_count() const { return files_.size(); }

 protected:
  absl::StatusOr<std::vector<TokenId>> DoTokenize(
      std::string_view text) override {
    return TokenizePretokenized(*vocab_, text);
  }

  absl::StatusOr<LogitVector> DoContextLogits(
      const ContextWindow& window) override {
    if (window.mode != descriptor_.mode) {
      return absl::FailedPreconditionError(internal::StrCat(
          "fixture records ", ContextModeName(descriptor_.mode),
          " contexts, request is ", ContextModeName(window.mode)));
    }
    const std::string key = window.Key();
    auto it = files_.find(key);
    if (it == files_.end()) {
      return absl::NotFoundError(internal::StrCat(
          "no fixture record for position ", window.target_position,
          " of a ", window.token_ids.size(), "-token prompt (key ", key, ")"));
    }
    absl::StatusOr<std::string> bytes = internal::ReadFile(dir_ / it->second);
    if (!bytes.ok()) return bytes.status();
    if (bytes->size() != 4 * descriptor_.vocab_size) {
      return absl::DataLossError(
          internal::StrCat(it->second, ": expected ", 4 * descriptor_.vocab_size,
                       " bytes, found ", bytes->size()));
    }
    return LogitVector{internal::DecodeLogitRecord(*bytes), key};
  }

  absl::StatusOr<EmbeddingTable> DoFetchEmbeddingTable() override {
    if (!embeddings_file_) {
      return absl::FailedPreconditionError(
          internal::StrCat(dir_.string(), ": meta.json names no embeddings file"));
    }
    return LoadEmbeddings(dir_ / *embeddings_file_, *vocab_);
  }

 private:
  FileProvider() = default;

  std::filesystem::path dir_;
  const Vocabulary* vocab_ = nullptr;
  ProviderDescriptor descriptor_;
  std::optional<std::string> embeddings_file_;
  std::unordered_map<std::string, std::string> files_;
};

// Builds a fixture directory. Thread-safe; records are content-addressed so
// concurrent or repeated adds of the same window are harmless.
class FileProviderWriter {
 public:
  FileProviderWriter(std::filesystem::path dir, const Vocabulary& vocab,
                     std::string model_name, ContextMode mode)
      : dir_(std::move(dir)),
        model_name_(std::move(model_name)),
        mode_(mode),
        vocab_sha256_(vocab.Sha256()),
        vocab_size_(vocab.size()) {}

  absl::Status Add(const ContextWindow& window, const LogitVector& logits) {
    if (logits.values.size() != vocab_size_) {
      return absl::InvalidArgumentError(
          internal::StrCat("record has ", logits.values.size(),
                       " logits, expected ", vocab_size_));
    }
    const std::string key = window.Key();
    const std::string file = internal::StrCat("records/", key, ".bin");
    {
      std::lock_guard lock(mu_);
      if (entries_.contains(key)) return absl::OkStatus();
    }
    if (absl::Status s = internal::WriteFileAtomically(
            dir_ / file, internal::EncodeLogitRecord(logits.values));
        !s.ok()) {
      return s;
    }
    nlohmann::json entry = {{"key", key},
                            {"mode", ContextModeName(window.mode)},
                            {"target_position", window.target_position},
                            {"context", window.VisibleContext()},
                            {"file", file}};
    std::lock_guard lock(mu_);
    entries_.emplace(key, std::move(entry));
    return absl::OkStatus();
  }

  absl::Status SetEmbeddings(const EmbeddingTable& table,
                             const Vocabulary& vocab) {
    std::lock_guard lock(mu_);
    embeddings_file_ = "embeddings.bin";
    return internal::WriteFileAtomically(dir_ / *embeddings_file_,
                                         EncodeEmbeddingsBinary(table, &vocab));
  }

  // Writes meta.json and manifest.json.
  absl::Status Finish() {
    std::lock_guard lock(mu_);
    nlohmann::json meta = {{"model", model_name_},
                           {"mode", ContextModeName(mode_)},
                           {"vocab_sha256", vocab_sha256_},
                           {"vocab_size", vocab_size_}};
    if (embeddings_file_) meta["embeddings"] = *embeddings_file_;
    nlohmann::json records = nlohmann::json::array();
    for (const auto& [key, entry] : entries_) records.push_back(entry);
    nlohmann::json manifest = {{"records", std::move(records)}};
    if (absl::Status s = internal::WriteFileAtomically(dir_ / "meta.json",
                                                       meta.dump(2) + "\n");
        !s.ok()) {
      return s;
    }
    return internal::WriteFileAtomically(dir_ / "manifest.json",
                                         manifest.dump(2) + "\n");
  }

  size_t size() const {
    std::lock_guard lock(mu_);
    return entries_.size();
  }

 private:
  std::filesystem::path dir_;
  std::string model_name_;
  ContextMode mode_;
  std::string vocab_sha256_;
  size_t vocab_size_;
  mutable std::mutex mu_;
  std::map<std::string, nlohmann::json> entries_;
  std::optional<std::string> embeddings_file_;
};

// Forwards to `inner` and records every logit response (and the embedding
// table, when fetched) into `writer`.
class RecordingProvider : public Provider {
 public:
  RecordingProvider(Provider& inner, const Vocabulary& vocab,
                    FileProviderWriter& writer)
      : inner_(&inner), vocab_(&vocab), writer_(&writer) {}

  const ProviderDescriptor& descriptor() const override {
    return inner_->descriptor();
  }

 protected:
  absl::StatusOr<std::vector<TokenId>> DoTokenize(
      std::string_view text) override {
    return inner_->Tokenize(text);
  }

  absl::StatusOr<LogitVector> DoContextLogits(
      const ContextWindow& window) override {
    absl::StatusOr<LogitVector> logits = inner_->ContextLogits(window);
    if (!logits.ok()) return logits;
    if (absl::Status s = writer_->Add(window, *logits); !s.ok()) return s;
    return logits;
  }

  absl::StatusOr<EmbeddingTable> DoFetchEmbeddingTable() override {
    absl::StatusOr<EmbeddingTable> table = inner_->FetchEmbeddingTable();
    if (!table.ok()) return table;
    if (absl::Status s = writer_->SetEmbeddings(*table, *vocab_); !s.ok()) {
      return s;
    }
    return table;
  }

 private:
  Provider* inner_;
  const Vocabulary* vocab_;
  FileProviderWriter* writer_;
};

}  // namespace cape

#endif  // CAPE_FILE_PROVIDER_H_
