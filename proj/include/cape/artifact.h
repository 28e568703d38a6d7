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

#ifndef CAPE_ARTIFACT_H_
#define CAPE_ARTIFACT_H_

// Corpus input and perturbation artifact (JSON-lines) formats.
//
// Input: one prompt per line, either plain text (tokenized by the provider)
// or a JSON object {"token_ids": [...]} / {"text": "..."} with an optional
// "prompt_id". Prompt ids default to the 0-based line number.
//
// Artifact line:
//   {"prompt_id", "original_ids", "perturbed_ids",
//    "records": [{"pos", "orig", "repl", "skipped", "bucket",
//                 "eps_effective"}],
//    "config": {...}}
// or, for a prompt that failed under --skip-errors,
//   {"prompt_id", "error"}.

#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "absl/status/status.h"
#include "absl/status/statusor.h"
#include "cape/internal/io.h"
#include "cape/mechanism.h"
#include "cape/providers.h"
#include "json.hpp"

namespace cape {

inline absl::StatusOr<std::vector<CorpusPrompt>> ParseCorpus(
    std::string_view contents, Provider& provider) {
  std::vector<CorpusPrompt> prompts;
  std::set<uint64_t> seen;
  std::vector<std::string> lines = internal::SplitLines(contents);
  for (size_t n = 0; n < lines.size(); ++n) {
    const std::string& line = lines[n];
    CorpusPrompt prompt{n, std::vector<TokenId>{}};
    size_t first = line.find_first_not_of(" \t");
    if (first != std::string::npos && line[first] == '{') {
      nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
      if (j.is_discarded() || !j.is_object()) {
        prompt.token_ids = absl::InvalidArgumentError(
            internal::StrCat("line ", n + 1, ": malformed JSON"));
      } else {
        if (j.contains("prompt_id")) {
          prompt.prompt_id = j["prompt_id"].get<uint64_t>();
        }
        if (j.contains("token_ids")) {
          prompt.token_ids = j["token_ids"].get<std::vector<TokenId>>();
        } else if (j.contains("text")) {
          prompt.token_ids = provider.Tokenize(j["text"].get<std::string>());
        } else {
          prompt.token_ids = absl::InvalidArgumentError(internal::StrCat(
              "line ", n + 1, ": expected \"token_ids\" or \"text\""));
        }
      }
    } else {
      prompt.token_ids = provider.Tokenize(line);
    }
    if (!seen.insert(prompt.prompt_id).second) {
      return absl::InvalidArgumentError(
          internal::StrCat("line ", n + 1, ": duplicate prompt_id ",
                       prompt.prompt_id));
    }
    prompts.push_back(std::move(prompt));
  }
  return prompts;
}

inline absl::StatusOr<std::vector<CorpusPrompt>> ReadCorpus(
    const std::filesystem::path& path, Provider& provider) {
  absl::StatusOr<std::string> contents = internal::ReadFile(path);
  if (!contents.ok()) return contents.status();
  return ParseCorpus(*contents, provider);
}

inline nlohmann::json PerturbedPromptToJson(const PerturbedPrompt& prompt,
                                            const MechanismConfig& config) {
  nlohmann::json records = nlohmann::json::array();
  for (const PerturbationRecord& r : prompt.records) {
    records.push_back(
        {{"pos", r.position},
         {"orig", r.original_id},
         {"repl", r.replacement_id},
         {"skipped", r.skipped},
         {"bucket", r.bucket_index ? nlohmann::json(*r.bucket_index)
                                   : nlohmann::json(nullptr)},
         {"eps_effective", r.effective_epsilon
                               ? nlohmann::json(*r.effective_epsilon)
                               : nlohmann::json(nullptr)}});
  }
  return {{"prompt_id", prompt.prompt_id},
          {"original_ids", prompt.original_ids},
          {"perturbed_ids", prompt.PerturbedIds()},
          {"records", std::move(records)},
          {"config", config.ToJson()}};
}

// Each line carries the config with the clip bound the run actually used.
inline std::string EncodeArtifact(const CorpusResult& result,
                                  MechanismConfig config) {
  if (!config.clip_bound && !result.entries.empty()) {
    config.clip_bound = result.summary.clip_bound;
  }
  std::string out;
  for (const CorpusEntry& entry : result.entries) {
    nlohmann::json line =
        entry.result.ok()
            ? PerturbedPromptToJson(*entry.result, config)
            : nlohmann::json{{"prompt_id", entry.prompt_id},
                             {"error", std::string(
                                           entry.result.status().message())}};
    out += line.dump();
    out += '\n';
  }
  return out;
}

struct ArtifactEntry {
  PerturbedPrompt prompt;
  nlohmann::json config;
  // Set for prompts that failed during perturbation.
  std::optional<std::string> error;
};

inline absl::StatusOr<std::vector<ArtifactEntry>> ParseArtifact(
    std::string_view contents) {
  std::vector<ArtifactEntry> entries;
  std::vector<std::string> lines = internal::SplitLines(contents);
  for (size_t n = 0; n < lines.size(); ++n) {
    if (lines[n].empty()) continue;
    nlohmann::json j = nlohmann::json::parse(lines[n], nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("prompt_id")) {
      return absl::InvalidArgumentError(
          internal::StrCat("artifact line ", n + 1, ": malformed"));
    }
    ArtifactEntry entry;
    try {
      entry.prompt.prompt_id = j["prompt_id"].get<uint64_t>();
      if (j.contains("error")) {
        entry.error = j["error"].get<std::string>();
        entries.push_back(std::move(entry));
        continue;
      }
      entry.prompt.original_ids = j["original_ids"].get<std::vector<TokenId>>();
      entry.config = j.value("config", nlohmann::json::object());
      for (const auto& r : j["records"]) {
        PerturbationRecord record;
        record.position = r["pos"].get<size_t>();
        record.original_id = r["orig"].get<TokenId>();
        record.replacement_id = r["repl"].get<TokenId>();
        record.skipped = r["skipped"].get<bool>();
        if (!r["bucket"].is_null()) record.bucket_index = r["bucket"].get<int32_t>();
        if (!r["eps_effective"].is_null()) {
          record.effective_epsilon = r["eps_effective"].get<double>();
        }
        entry.prompt.records.push_back(record);
      }
    } catch (const nlohmann::json::exception& e) {
      return absl::InvalidArgumentError(
          internal::StrCat("artifact line ", n + 1, ": ", e.what()));
    }
    if (entry.prompt.records.size() != entry.prompt.original_ids.size()) {
      return absl::InvalidArgumentError(internal::StrCat(
          "artifact line ", n + 1, ": records and original_ids differ in length"));
    }
    entries.push_back(std::move(entry));
  }
  return entries;
}

inline absl::StatusOr<std::vector<ArtifactEntry>> ReadArtifact(
    const std::filesystem::path& path) {
  absl::StatusOr<std::string> contents = internal::ReadFile(path);
  if (!contents.ok()) return contents.status();
  return ParseArtifact(*contents);
}

}  // namespace cape

#endif  // CAPE_ARTIFACT_H_
