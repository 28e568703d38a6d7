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

#ifndef CAPE_PROVIDERS_H_
#define CAPE_PROVIDERS_H_

// Sources of tokenization, contextual logits and embedding tables.
//
// Every provider is bound to one Vocabulary: its descriptor carries the
// vocabulary checksum and each logit response must have exactly |V| finite
// entries. The base class enforces the length check on every call and marks
// failures so callers can tell provider errors from other errors.

#include <cctype>
#include <cmath>
#include <functional>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "absl/status/status.h"
#include "absl/status/statusor.h"
#include "absl/strings/cord.h"
#include "cape/internal/io.h"
#include "cape/utility.h"
#include "cape/vocab.h"
#include "json.hpp"

namespace cape {

enum class ContextMode { kBidirectional, kCausal };

inline std::string_view ContextModeName(ContextMode mode) {
  return mode == ContextMode::kCausal ? "causal" : "bidirectional";
}

inline absl::StatusOr<ContextMode> ParseContextMode(std::string_view name) {
  if (name == "bidirectional") return ContextMode::kBidirectional;
  if (name == "causal") return ContextMode::kCausal;
  return absl::InvalidArgumentError(
      internal::StrCat("unknown context mode '", name,
                   "' (expected bidirectional or causal)"));
}

// Stands in for the target token in a bidirectional context.
inline constexpr TokenId kMaskSentinel = -1;

struct ContextWindow {
  std::vector<TokenId> token_ids;
  size_t target_position = 0;
  ContextMode mode = ContextMode::kBidirectional;

  absl::Status Validate() const {
    if (target_position >= token_ids.size()) {
      return absl::OutOfRangeError(
          internal::StrCat("target position ", target_position,
                       " outside prompt of length ", token_ids.size()));
    }
    return absl::OkStatus();
  }

  // The ids the model may condition on: the prefix before the target in
  // causal mode, the whole prompt with the target masked otherwise.
  std::vector<TokenId> VisibleContext() const {
    if (mode == ContextMode::kCausal) {
      return std::vector<TokenId>(token_ids.begin(),
                                  token_ids.begin() + target_position);
    }
    std::vector<TokenId> ids = token_ids;
    ids[target_position] = kMaskSentinel;
    return ids;
  }

  // Content address of the visible context. Two windows with the same key
  // must receive the same logits.
  std::string Key() const {
    nlohmann::json canonical = {{"mode", ContextModeName(mode)},
                                {"target_position", target_position},
                                {"token_ids", VisibleContext()}};
    return internal::Sha256Hex(canonical.dump());
  }
};

enum class ProviderKind { kFile, kHttp, kInMemory };

struct ProviderDescriptor {
  ProviderKind kind = ProviderKind::kInMemory;
  std::string vocabulary_hash;
  size_t vocab_size = 0;
  std::string model_name;
  ContextMode mode = ContextMode::kBidirectional;
};

inline constexpr char kProviderErrorPayload[] = "cape.provider";

inline absl::Status MarkProviderError(absl::Status status) {
  if (!status.ok()) {
    status.SetPayload(kProviderErrorPayload, absl::Cord("1"));
  }
  return status;
}

inline bool IsProviderError(const absl::Status& status) {
  return status.GetPayload(kProviderErrorPayload).has_value();
}

class Provider {
 public:
  virtual ~Provider() = default;

  virtual const ProviderDescriptor& descriptor() const = 0;

  absl::StatusOr<std::vector<TokenId>> Tokenize(std::string_view text) {
    absl::StatusOr<std::vector<TokenId>> ids = DoTokenize(text);
    if (!ids.ok()) return MarkProviderError(ids.status());
    for (TokenId id : *ids) {
      if (id < 0 || static_cast<size_t>(id) >= descriptor().vocab_size) {
        return MarkProviderError(absl::OutOfRangeError(
            internal::StrCat("provider returned token id ", id,
                         " outside the vocabulary")));
      }
    }
    return ids;
  }

  absl::StatusOr<LogitVector> ContextLogits(const ContextWindow& window) {
    if (absl::Status s = window.Validate(); !s.ok()) return s;
    absl::StatusOr<LogitVector> logits = DoContextLogits(window);
    if (!logits.ok()) return MarkProviderError(logits.status());
    if (logits->values.size() != descriptor().vocab_size) {
      return MarkProviderError(absl::FailedPreconditionError(internal::StrCat(
          "provider returned ", logits->values.size(),
          " logits but the vocabulary has ", descriptor().vocab_size,
          " tokens")));
    }
    for (size_t j = 0; j < logits->values.size(); ++j) {
      if (!std::isfinite(logits->values[j])) {
        return MarkProviderError(absl::DataLossError(
            internal::StrCat("non-finite logit at index ", j)));
      }
    }
    return logits;
  }

  absl::StatusOr<EmbeddingTable> FetchEmbeddingTable() {
    absl::StatusOr<EmbeddingTable> table = DoFetchEmbeddingTable();
    if (!table.ok()) return MarkProviderError(table.status());
    if (table->size() != descriptor().vocab_size) {
      return MarkProviderError(absl::FailedPreconditionError(
          internal::StrCat("provider embedding table has ", table->size(),
                       " rows but the vocabulary has ",
                       descriptor().vocab_size, " tokens")));
    }
    return table;
  }

 protected:
  virtual absl::StatusOr<std::vector<TokenId>> DoTokenize(
      std::string_view text) = 0;
  virtual absl::StatusOr<LogitVector> DoContextLogits(
      const ContextWindow& window) = 0;
  virtual absl::StatusOr<EmbeddingTable> DoFetchEmbeddingTable() = 0;
};

// Fails unless `provider` was built for exactly `vocab`.
inline absl::Status CheckBinding(const Provider& provider,
                                 const Vocabulary& vocab) {
  const ProviderDescriptor& d = provider.descriptor();
  if (d.vocab_size != vocab.size()) {
    return MarkProviderError(absl::FailedPreconditionError(
        internal::StrCat("provider vocabulary has ", d.vocab_size,
                     " tokens, loaded vocabulary has ", vocab.size())));
  }
  if (d.vocabulary_hash != vocab.Sha256()) {
    return MarkProviderError(absl::FailedPreconditionError(internal::StrCat(
        "provider vocabulary checksum ", d.vocabulary_hash,
        " does not match the loaded vocabulary (", vocab.Sha256(), ")")));
  }
  return absl::OkStatus();
}

// Space-separated surface form. Subword fragments are kept as they are.
inline std::string Detokenize(const Vocabulary& vocab,
                              const std::vector<TokenId>& ids) {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i > 0) out.push_back(' ');
    out += vocab.token(ids[i]);
  }
  return out;
}

// Splits on ASCII whitespace and looks every piece up verbatim.
inline absl::StatusOr<std::vector<TokenId>> TokenizePretokenized(
    const Vocabulary& vocab, std::string_view text) {
  std::vector<TokenId> ids;
  size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i])))
      ++i;
    size_t j = i;
    while (j < text.size() &&
           !std::isspace(static_cast<unsigned char>(text[j])))
      ++j;
    if (j > i) {
      std::string_view piece = text.substr(i, j - i);
      std::optional<TokenId> id = vocab.Find(piece);
      if (!id) {
        return absl::NotFoundError(internal::StrCat(
            "token '", piece,
            "' is not in the vocabulary (input must be pre-tokenized)"));
      }
      ids.push_back(*id);
    }
    i = j;
  }
  return ids;
}

// Provider backed by caller-supplied callbacks; used to plug in a local
// model or a scripted attacker.
class FunctionProvider : public Provider {
 public:
  using LogitFn = std::function<absl::StatusOr<LogitVector>(const ContextWindow&)>;

  FunctionProvider(const Vocabulary& vocab, ContextMode mode, LogitFn logits,
                   std::optional<EmbeddingTable> embeddings = std::nullopt,
                   std::string model_name = "function")
      : vocab_(&vocab),
        logits_(std::move(logits)),
        embeddings_(std::move(embeddings)) {
    descriptor_.kind = ProviderKind::kInMemory;
    descriptor_.vocabulary_hash = vocab.Sha256();
    descriptor_.vocab_size = vocab.size();
    descriptor_.model_name = std::move(model_name);
    descriptor_.mode = mode;
  }

  const ProviderDescriptor& descriptor() const override { return descriptor_; }

 protected:
  absl::StatusOr<std::vector<TokenId>> DoTokenize(
      std::string_view text) override {
    return TokenizePretokenized(*vocab_, text);
  }
  absl::StatusOr<LogitVector> DoContextLogits(
      const ContextWindow& window) override {
    return logits_(window);
  }
  absl::StatusOr<EmbeddingTable> DoFetchEmbeddingTable() override {
    if (!embeddings_) {
      return absl::FailedPreconditionError("provider has no embedding table");
    }
    return *embeddings_;
  }

 private:
  const Vocabulary* vocab_;
  LogitFn logits_;
  std::optional<EmbeddingTable> embeddings_;
  ProviderDescriptor descriptor_;
};

}  // namespace cape

#endif  // CAPE_PROVIDERS_H_
