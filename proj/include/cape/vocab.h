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

#ifndef CAPE_VOCAB_H_
#define CAPE_VOCAB_H_

// Vocabularies, embedding tables, the non-sensitive token set and Euclidean
// distance rows over the embedding space.
//
// File formats:
//   vocabulary       one token per line (UTF-8), ids assigned by line order.
//   embeddings text  `token<TAB>v1 v2 ... vd` per line.
//   embeddings bin   "CAPEEMB1", u64 LE header length, JSON header
//                    {"vocab_size", "dim", "tokens"?}, then vocab_size*dim
//                    little-endian float32 values in row-major order.
//   non-sensitive    one token per line.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "absl/status/status.h"
#include "absl/status/statusor.h"
#include "cape/internal/io.h"
#include "json.hpp"

namespace cape {

using TokenId = int32_t;

class Vocabulary {
 public:
  Vocabulary() = default;

  static absl::StatusOr<Vocabulary> FromTokens(std::vector<std::string> tokens) {
    if (tokens.empty()) {
      return absl::InvalidArgumentError("vocabulary is empty");
    }
    Vocabulary vocab;
    vocab.token_to_id_.reserve(tokens.size());
    for (size_t i = 0; i < tokens.size(); ++i) {
      auto [it, inserted] =
          vocab.token_to_id_.emplace(tokens[i], static_cast<TokenId>(i));
      if (!inserted) {
        return absl::InvalidArgumentError(
            internal::StrCat("duplicate token '", tokens[i], "' at lines ",
                         it->second + 1, " and ", i + 1));
      }
    }
    vocab.tokens_ = std::move(tokens);
    return vocab;
  }

  size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(TokenId id) const { return tokens_.at(id); }
  bool Contains(TokenId id) const {
    return id >= 0 && static_cast<size_t>(id) < tokens_.size();
  }

  std::optional<TokenId> Find(std::string_view token) const {
    auto it = token_to_id_.find(std::string(token));
    if (it == token_to_id_.end()) return std::nullopt;
    return it->second;
  }

  // SHA-256 over every token followed by '\n', in id order. Binds provider
  // output to this exact vocabulary.
  std::string Sha256() const {
    std::string joined;
    for (const std::string& t : tokens_) joined += internal::StrCat(t, "\n");
    return internal::Sha256Hex(joined);
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> token_to_id_;
};

inline absl::StatusOr<Vocabulary> LoadVocabulary(
    const std::filesystem::path& path) {
  absl::StatusOr<std::string> contents = internal::ReadFile(path);
  if (!contents.ok()) return contents.status();
  std::vector<std::string> lines = internal::SplitLines(*contents);
  if (lines.empty()) {
    return absl::InvalidArgumentError(
        internal::StrCat("vocabulary file is empty: ", path.string()));
  }
  absl::StatusOr<Vocabulary> vocab = Vocabulary::FromTokens(std::move(lines));
  if (!vocab.ok()) {
    return absl::InvalidArgumentError(
        internal::StrCat(path.string(), ": ", vocab.status().message()));
  }
  return vocab;
}

// Row-major |V| x d table. Coordinates are stored as float32 (the on-disk
// precision of both formats); all arithmetic on them is done in double.
class EmbeddingTable {
 public:
  EmbeddingTable() = default;

  static absl::StatusOr<EmbeddingTable> Create(size_t rows, size_t dim,
                                               std::vector<float> values) {
    if (dim == 0) return absl::InvalidArgumentError("embedding dim is 0");
    if (values.size() != rows * dim) {
      return absl::InvalidArgumentError(
          internal::StrCat("embedding data has ", values.size(),
                       " values, expected ", rows, " x ", dim));
    }
    for (size_t i = 0; i < values.size(); ++i) {
      if (!std::isfinite(values[i])) {
        return absl::InvalidArgumentError(
            internal::StrCat("non-finite embedding value at row ", i / dim,
                         ", column ", i % dim));
      }
    }
    EmbeddingTable table;
    table.rows_ = rows;
    table.dim_ = dim;
    table.values_ = std::move(values);
    return table;
  }

  size_t size() const { return rows_; }
  size_t dim() const { return dim_; }
  std::span<const float> row(TokenId id) const {
    return std::span<const float>(values_).subspan(
        static_cast<size_t>(id) * dim_, dim_);
  }
  const std::vector<float>& values() const { return values_; }

  friend bool operator==(const EmbeddingTable&, const EmbeddingTable&) =
      default;

 private:
  size_t rows_ = 0;
  size_t dim_ = 0;
  std::vector<float> values_;
};

namespace internal {

inline constexpr std::string_view kEmbeddingMagic = "CAPEEMB1";

inline absl::StatusOr<EmbeddingTable> ParseEmbeddingText(
    std::string_view text, const Vocabulary& vocab) {
  std::vector<std::string> lines = SplitLines(text);
  // Tolerate blank trailing lines only.
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  if (lines.size() != vocab.size()) {
    return absl::InvalidArgumentError(
        internal::StrCat("embedding file has ", lines.size(),
                     " rows but the vocabulary has ", vocab.size(), " tokens"));
  }
  size_t dim = 0;
  std::vector<float> values;
  std::vector<bool> seen(vocab.size(), false);
  for (size_t line_no = 0; line_no < lines.size(); ++line_no) {
    const std::string& line = lines[line_no];
    size_t tab = line.find('\t');
    if (tab == std::string::npos) {
      return absl::InvalidArgumentError(
          internal::StrCat("line ", line_no + 1, ": missing TAB separator"));
    }
    std::optional<TokenId> id = vocab.Find(line.substr(0, tab));
    if (!id) {
      return absl::InvalidArgumentError(
          internal::StrCat("line ", line_no + 1, ": token '", line.substr(0, tab),
                       "' is not in the vocabulary"));
    }
    if (seen[*id]) {
      return absl::InvalidArgumentError(internal::StrCat(
          "line ", line_no + 1, ": duplicate row for token '",
          line.substr(0, tab), "'"));
    }
    seen[*id] = true;
    std::vector<double> row;
    const char* p = line.data() + tab + 1;
    const char* end = line.data() + line.size();
    while (p < end) {
      while (p < end && (*p == ' ' || *p == '\t')) ++p;
      if (p == end) break;
      const char* q = p;
      while (q < end && *q != ' ' && *q != '\t') ++q;
      double v = 0;
      auto [ptr, ec] = std::from_chars(p, q, v);
      // from_chars rejects "nan"/"inf" only with some libraries; check both.
      if (ec != std::errc() || ptr != q) {
        std::string field(p, q);
        if (field == "NaN" || field == "nan" || field == "inf" ||
            field == "-inf" || field == "Inf" || field == "-Inf") {
          return absl::InvalidArgumentError(internal::StrCat(
              "line ", line_no + 1, ": non-finite value '", field, "'"));
        }
        return absl::InvalidArgumentError(internal::StrCat(
            "line ", line_no + 1, ": cannot parse '", field, "'"));
      }
      if (!std::isfinite(v)) {
        return absl::InvalidArgumentError(internal::StrCat(
            "line ", line_no + 1, ": non-finite value '", std::string(p, q),
            "'"));
      }
      row.push_back(v);
      p = q;
    }
    if (line_no == 0) {
      dim = row.size();
      if (dim == 0) return absl::InvalidArgumentError("line 1: empty row");
      values.assign(vocab.size() * dim, 0.0f);
    } else if (row.size() != dim) {
      return absl::InvalidArgumentError(
          internal::StrCat("ragged rows: line ", line_no + 1, " has ", row.size(),
                       " values, line 1 has ", dim));
    }
    for (size_t k = 0; k < dim; ++k) {
      values[static_cast<size_t>(*id) * dim + k] = static_cast<float>(row[k]);
    }
  }
  return EmbeddingTable::Create(vocab.size(), dim, std::move(values));
}

}  // namespace internal

// Serializes `table` in the binary format. Token strings are embedded in the
// header when `vocab` is given.
inline std::string EncodeEmbeddingsBinary(const EmbeddingTable& table,
                                          const Vocabulary* vocab = nullptr) {
  nlohmann::json header = {{"vocab_size", table.size()}, {"dim", table.dim()}};
  if (vocab != nullptr) header["tokens"] = vocab->tokens();
  std::string header_text = header.dump();
  std::string out(internal::kEmbeddingMagic);
  internal::AppendU64LE(out, header_text.size());
  out += header_text;
  out.reserve(out.size() + 4 * table.values().size());
  for (float v : table.values()) internal::AppendF32LE(out, v);
  return out;
}

inline absl::StatusOr<EmbeddingTable> DecodeEmbeddingsBinary(
    std::string_view bytes, const Vocabulary& vocab) {
  const size_t magic = internal::kEmbeddingMagic.size();
  if (bytes.size() < magic + 8 ||
      bytes.substr(0, magic) != internal::kEmbeddingMagic) {
    return absl::InvalidArgumentError("not a binary embedding file");
  }
  uint64_t header_len = internal::ReadU64LE(bytes, magic);
  if (bytes.size() < magic + 8 + header_len) {
    return absl::InvalidArgumentError("truncated embedding header");
  }
  nlohmann::json header = nlohmann::json::parse(
      bytes.substr(magic + 8, header_len), nullptr, /*allow_exceptions=*/false);
  if (header.is_discarded() || !header.contains("vocab_size") ||
      !header.contains("dim")) {
    return absl::InvalidArgumentError("malformed embedding header");
  }
  size_t rows = header["vocab_size"].get<size_t>();
  size_t dim = header["dim"].get<size_t>();
  if (rows != vocab.size()) {
    return absl::InvalidArgumentError(
        internal::StrCat("embedding table has ", rows,
                     " rows but the vocabulary has ", vocab.size(), " tokens"));
  }
  if (header.contains("tokens") &&
      header["tokens"].get<std::vector<std::string>>() != vocab.tokens()) {
    return absl::InvalidArgumentError(
        "embedding token order does not match the vocabulary");
  }
  size_t offset = magic + 8 + header_len;
  if (bytes.size() != offset + 4 * rows * dim) {
    return absl::InvalidArgumentError(
        internal::StrCat("embedding payload is ", bytes.size() - offset,
                     " bytes, expected ", 4 * rows * dim));
  }
  std::vector<float> values(rows * dim);
  for (size_t i = 0; i < values.size(); ++i) {
    values[i] = internal::ReadF32LE(bytes, offset + 4 * i);
  }
  return EmbeddingTable::Create(rows, dim, std::move(values));
}

inline std::string EncodeEmbeddingsText(const EmbeddingTable& table,
                                        const Vocabulary& vocab) {
  std::string out;
  char buf[32];
  for (size_t i = 0; i < table.size(); ++i) {
    out += internal::StrCat(vocab.token(static_cast<TokenId>(i)), "\t");
    std::span<const float> row = table.row(static_cast<TokenId>(i));
    for (size_t k = 0; k < row.size(); ++k) {
      auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), row[k]);
      if (k > 0) out.push_back(' ');
      out.append(buf, ptr);
    }
    out.push_back('\n');
  }
  return out;
}

// Loads either format; the binary one is recognized by its magic bytes.
inline absl::StatusOr<EmbeddingTable> LoadEmbeddings(
    const std::filesystem::path& path, const Vocabulary& vocab) {
  absl::StatusOr<std::string> contents = internal::ReadFile(path);
  if (!contents.ok()) return contents.status();
  absl::StatusOr<EmbeddingTable> table =
      contents->starts_with(internal::kEmbeddingMagic)
          ? DecodeEmbeddingsBinary(*contents, vocab)
          : internal::ParseEmbeddingText(*contents, vocab);
  if (!table.ok()) {
    return absl::Status(table.status().code(),
                        internal::StrCat(path.string(), ": ",
                                     table.status().message()));
  }
  return table;
}

struct DistanceRow {
  TokenId origin = 0;
  std::vector<double> distances;
};

inline absl::StatusOr<DistanceRow> ComputeDistanceRow(
    const EmbeddingTable& table, TokenId origin) {
  if (origin < 0 || static_cast<size_t>(origin) >= table.size()) {
    return absl::OutOfRangeError(internal::StrCat(
        "origin token ", origin, " outside [0, ", table.size(), ")"));
  }
  DistanceRow row{origin, std::vector<double>(table.size())};
  std::span<const float> a = table.row(origin);
  for (size_t j = 0; j < table.size(); ++j) {
    std::span<const float> b = table.row(static_cast<TokenId>(j));
    double sum = 0.0;
    for (size_t k = 0; k < a.size(); ++k) {
      double d = static_cast<double>(a[k]) - static_cast<double>(b[k]);
      sum += d * d;
    }
    row.distances[j] = std::sqrt(sum);
  }
  row.distances[origin] = 0.0;
  return row;
}

// Lazily computed, shared distance rows keyed by origin token. Safe for
// concurrent use; two threads racing on the same origin compute identical
// rows and the later insert wins.
class DistanceCache {
 public:
  explicit DistanceCache(const EmbeddingTable& table) : table_(&table) {}

  absl::StatusOr<std::shared_ptr<const DistanceRow>> Row(TokenId origin) {
    {
      std::shared_lock lock(mu_);
      auto it = rows_.find(origin);
      if (it != rows_.end()) return it->second;
    }
    absl::StatusOr<DistanceRow> row = ComputeDistanceRow(*table_, origin);
    if (!row.ok()) return row.status();
    auto shared = std::make_shared<const DistanceRow>(*std::move(row));
    std::unique_lock lock(mu_);
    rows_[origin] = shared;
    return shared;
  }

  void Insert(DistanceRow row) {
    TokenId origin = row.origin;
    auto shared = std::make_shared<const DistanceRow>(std::move(row));
    std::unique_lock lock(mu_);
    rows_[origin] = std::move(shared);
  }

  size_t cached_rows() const {
    std::shared_lock lock(mu_);
    return rows_.size();
  }

  const EmbeddingTable& table() const { return *table_; }

 private:
  const EmbeddingTable* table_;
  mutable std::shared_mutex mu_;
  std::unordered_map<TokenId, std::shared_ptr<const DistanceRow>> rows_;
};

// Full |V| x |V| distance matrix file: "CAPEDST1", u64 header length, JSON
// header {"vocab_size", "vocab_sha256"}, then float64 rows.
inline std::string EncodeDistanceMatrix(DistanceCache& cache,
                                        const Vocabulary& vocab) {
  nlohmann::json header = {{"vocab_size", vocab.size()},
                           {"vocab_sha256", vocab.Sha256()}};
  std::string header_text = header.dump();
  std::string out = "CAPEDST1";
  internal::AppendU64LE(out, header_text.size());
  out += header_text;
  out.reserve(out.size() + 8 * vocab.size() * vocab.size());
  for (size_t i = 0; i < vocab.size(); ++i) {
    auto row = cache.Row(static_cast<TokenId>(i));
    for (double d : (*row)->distances) internal::AppendF64LE(out, d);
  }
  return out;
}

inline absl::Status LoadDistanceMatrix(std::string_view bytes,
                                       const Vocabulary& vocab,
                                       DistanceCache& cache) {
  if (bytes.size() < 16 || bytes.substr(0, 8) != "CAPEDST1") {
    return absl::InvalidArgumentError("not a distance matrix file");
  }
  uint64_t header_len = internal::ReadU64LE(bytes, 8);
  if (bytes.size() < 16 + header_len) {
    return absl::InvalidArgumentError("truncated distance matrix header");
  }
  nlohmann::json header = nlohmann::json::parse(bytes.substr(16, header_len),
                                                nullptr, false);
  if (header.is_discarded() ||
      header.value("vocab_sha256", "") != vocab.Sha256() ||
      header.value("vocab_size", size_t{0}) != vocab.size()) {
    return absl::FailedPreconditionError(
        "distance matrix was computed for a different vocabulary");
  }
  const size_t n = vocab.size();
  size_t offset = 16 + header_len;
  if (bytes.size() != offset + 8 * n * n) {
    return absl::InvalidArgumentError("distance matrix payload size mismatch");
  }
  for (size_t i = 0; i < n; ++i) {
    DistanceRow row{static_cast<TokenId>(i), std::vector<double>(n)};
    for (size_t j = 0; j < n; ++j) {
      row.distances[j] = internal::ReadF64LE(bytes, offset + 8 * (i * n + j));
    }
    cache.Insert(std::move(row));
  }
  return absl::OkStatus();
}

class NonSensitiveSet {
 public:
  NonSensitiveSet() = default;
  explicit NonSensitiveSet(size_t vocab_size) : mask_(vocab_size, false) {}

  void Insert(TokenId id) {
    if (!mask_[id]) {
      mask_[id] = true;
      ++count_;
    }
  }
  bool Contains(TokenId id) const {
    return id >= 0 && static_cast<size_t>(id) < mask_.size() && mask_[id];
  }
  size_t size() const { return count_; }

  std::vector<TokenId> ids() const {
    std::vector<TokenId> out;
    for (size_t i = 0; i < mask_.size(); ++i) {
      if (mask_[i]) out.push_back(static_cast<TokenId>(i));
    }
    return out;
  }

 private:
  std::vector<bool> mask_;
  size_t count_ = 0;
};

struct NonSensitiveLoadResult {
  NonSensitiveSet set;
  // Listed tokens that the vocabulary does not contain; skipped.
  std::vector<std::string> missing;
};

inline NonSensitiveLoadResult ResolveNonSensitive(
    const std::vector<std::string>& tokens, const Vocabulary& vocab) {
  NonSensitiveLoadResult result{NonSensitiveSet(vocab.size()), {}};
  for (const std::string& token : tokens) {
    if (token.empty()) continue;
    if (std::optional<TokenId> id = vocab.Find(token)) {
      result.set.Insert(*id);
    } else {
      result.missing.push_back(token);
    }
  }
  return result;
}

inline absl::StatusOr<NonSensitiveLoadResult> LoadNonSensitive(
    const std::filesystem::path& path, const Vocabulary& vocab) {
  absl::StatusOr<std::string> contents = internal::ReadFile(path);
  if (!contents.ok()) return contents.status();
  return ResolveNonSensitive(internal::SplitLines(*contents), vocab);
}

}  // namespace cape

#endif  // CAPE_VOCAB_H_
