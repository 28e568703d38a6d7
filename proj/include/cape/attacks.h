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

#ifndef CAPE_ATTACKS_H_
#define CAPE_ATTACKS_H_

// Empirical privacy attacks on a perturbation artifact. Both attackers see
// only the perturbed ids; the original ids are read solely to score a guess.
// Skipped (non-sensitive) positions are not attacked and not counted.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "absl/status/status.h"
#include "absl/status/statusor.h"
#include "cape/artifact.h"
#include "cape/internal/parallel.h"
#include "cape/metrics.h"
#include "cape/providers.h"
#include "cape/vocab.h"
#include "json.hpp"

namespace cape {

enum class AttackKind { kKnn, kMti };

struct AttackedPosition {
  uint64_t prompt_id = 0;
  size_t position = 0;
  TokenId original_id = 0;
  TokenId replacement_id = 0;
  // MTI: the attacker's argmax. KNN: unset.
  std::optional<TokenId> prediction;
  bool success = false;
};

struct PromptAttackResult {
  uint64_t prompt_id = 0;
  size_t n_sensitive = 0;
  size_t successes = 0;
  // MTI only: Rouge-L F1 of the reconstructed prompt against the original.
  std::optional<double> rouge_l;
};

struct AttackReport {
  AttackKind kind = AttackKind::kKnn;
  int k = 0;
  size_t n_sensitive = 0;
  size_t successes = 0;
  double asr = 0.0;
  double privacy_score = 1.0;
  std::optional<double> mean_rouge_l;
  std::vector<PromptAttackResult> prompts;
  std::vector<AttackedPosition> positions;

  nlohmann::json ToJson() const {
    nlohmann::json per_prompt = nlohmann::json::array();
    for (const PromptAttackResult& p : prompts) {
      nlohmann::json j = {{"prompt_id", p.prompt_id},
                          {"n_sensitive", p.n_sensitive},
                          {"successes", p.successes}};
      if (p.rouge_l) j["rouge_l_f1"] = *p.rouge_l;
      per_prompt.push_back(std::move(j));
    }
    nlohmann::json j = {{"attack_kind", kind == AttackKind::kKnn ? "knn" : "mti"},
                        {"n_sensitive", n_sensitive},
                        {"successes", successes},
                        {"asr", asr},
                        {"privacy_score", privacy_score},
                        {"prompts", std::move(per_prompt)}};
    if (kind == AttackKind::kKnn) j["k"] = k;
    if (mean_rouge_l) j["rouge_l_f1"] = *mean_rouge_l;
    return j;
  }

  std::string PositionsCsv() const {
    std::string out =
        "prompt_id,position,original_id,replacement_id,prediction,success\n";
    for (const AttackedPosition& p : positions) {
      out += internal::StrCat(p.prompt_id, ",", p.position, ",", p.original_id,
                      ",", p.replacement_id, ",",
                      p.prediction ? internal::StrCat(*p.prediction) : "", ",",
                      p.success ? 1 : 0, "\n");
    }
    return out;
  }
};

namespace internal {

inline void FinishReport(AttackReport& report) {
  for (const PromptAttackResult& p : report.prompts) {
    report.n_sensitive += p.n_sensitive;
    report.successes += p.successes;
  }
  report.asr = report.n_sensitive == 0
                   ? 0.0
                   : static_cast<double>(report.successes) /
                         static_cast<double>(report.n_sensitive);
  report.privacy_score = 1.0 - report.asr;
}

inline absl::Status CheckIds(const ArtifactEntry& entry, size_t vocab_size) {
  for (const PerturbationRecord& r : entry.prompt.records) {
    if (r.original_id < 0 || r.replacement_id < 0 ||
        static_cast<size_t>(r.original_id) >= vocab_size ||
        static_cast<size_t>(r.replacement_id) >= vocab_size) {
      return absl::FailedPreconditionError(internal::StrCat(
          "prompt ", entry.prompt.prompt_id, " position ", r.position,
          ": token id outside the ", vocab_size,
          "-token vocabulary (artifact/vocabulary mismatch)"));
    }
  }
  return absl::OkStatus();
}

}  // namespace internal

// True when `target` is among the k nearest tokens to the row's origin.
// Every token tied with the k-th smallest distance counts as a neighbor.
inline bool WithinKNearest(const DistanceRow& row, TokenId target, int k) {
  std::vector<double> d = row.distances;
  const size_t kth = std::min<size_t>(static_cast<size_t>(k), d.size()) - 1;
  std::nth_element(d.begin(), d.begin() + kth, d.end());
  return row.distances[target] <= d[kth];
}

// For each sensitive position, succeeds iff the original token is among the
// k nearest vocabulary tokens (Euclidean) to the replacement.
inline absl::StatusOr<AttackReport> KnnAttack(
    const std::vector<ArtifactEntry>& artifact, DistanceCache& distances,
    int k, int jobs = 1) {
  if (k < 1) return absl::InvalidArgumentError("k must be >= 1");
  const size_t vocab_size = distances.table().size();
  for (const ArtifactEntry& entry : artifact) {
    if (entry.error) continue;
    if (absl::Status s = internal::CheckIds(entry, vocab_size); !s.ok()) {
      return s;
    }
  }
  AttackReport report;
  report.kind = AttackKind::kKnn;
  report.k = k;
  std::vector<std::vector<AttackedPosition>> per_prompt(artifact.size());
  std::vector<absl::Status> errors(artifact.size());
  internal::ParallelFor(artifact.size(), jobs, [&](size_t i) {
    if (artifact[i].error) return;
    for (const PerturbationRecord& r : artifact[i].prompt.records) {
      if (r.skipped) continue;
      absl::StatusOr<std::shared_ptr<const DistanceRow>> row =
          distances.Row(r.replacement_id);
      if (!row.ok()) {
        errors[i] = row.status();
        return;
      }
      per_prompt[i].push_back(
          AttackedPosition{artifact[i].prompt.prompt_id, r.position,
                           r.original_id, r.replacement_id, std::nullopt,
                           WithinKNearest(**row, r.original_id, k)});
    }
  });
  for (size_t i = 0; i < artifact.size(); ++i) {
    if (!errors[i].ok()) return errors[i];
    if (artifact[i].error) continue;
    PromptAttackResult p{artifact[i].prompt.prompt_id, per_prompt[i].size(), 0,
                         std::nullopt};
    for (const AttackedPosition& a : per_prompt[i]) p.successes += a.success;
    report.prompts.push_back(p);
    report.positions.insert(report.positions.end(), per_prompt[i].begin(),
                            per_prompt[i].end());
  }
  internal::FinishReport(report);
  return report;
}

// Index of the largest logit; the lowest id wins ties.
inline TokenId ArgMax(const std::vector<double>& values) {
  return static_cast<TokenId>(
      std::max_element(values.begin(), values.end()) - values.begin());
}

// Masks each sensitive position of the perturbed prompt in turn (all other
// positions stay perturbed) and takes the attacker's argmax as the guess.
inline absl::StatusOr<AttackReport> MtiAttack(
    const std::vector<ArtifactEntry>& artifact, Provider& attacker,
    int jobs = 1) {
  if (attacker.descriptor().mode != ContextMode::kBidirectional) {
    return absl::FailedPreconditionError(
        "masked-token inference needs a bidirectional attacker model");
  }
  for (const ArtifactEntry& entry : artifact) {
    if (entry.error) continue;
    if (absl::Status s =
            internal::CheckIds(entry, attacker.descriptor().vocab_size);
        !s.ok()) {
      return s;
    }
  }
  AttackReport report;
  report.kind = AttackKind::kMti;
  std::vector<std::vector<AttackedPosition>> per_prompt(artifact.size());
  std::vector<double> rouge(artifact.size(), 0.0);
  std::vector<absl::Status> errors(artifact.size());
  internal::ParallelFor(artifact.size(), jobs, [&](size_t i) {
    const ArtifactEntry& entry = artifact[i];
    if (entry.error) return;
    const std::vector<TokenId> perturbed = entry.prompt.PerturbedIds();
    std::vector<TokenId> reconstructed = perturbed;
    for (const PerturbationRecord& r : entry.prompt.records) {
      if (r.skipped) continue;
      absl::StatusOr<LogitVector> logits = attacker.ContextLogits(
          ContextWindow{perturbed, r.position, ContextMode::kBidirectional});
      if (!logits.ok()) {
        errors[i] = internal::Annotate(
            logits.status(), internal::StrCat("prompt ", entry.prompt.prompt_id,
                                          ", position ", r.position, ": "));
        return;
      }
      const TokenId guess = ArgMax(logits->values);
      reconstructed[r.position] = guess;
      per_prompt[i].push_back(AttackedPosition{entry.prompt.prompt_id,
                                               r.position, r.original_id,
                                               r.replacement_id, guess,
                                               guess == r.original_id});
    }
    rouge[i] = RougeLF1(entry.prompt.original_ids, reconstructed);
  });
  double rouge_sum = 0.0;
  size_t rouge_count = 0;
  for (size_t i = 0; i < artifact.size(); ++i) {
    if (!errors[i].ok()) return errors[i];
    if (artifact[i].error) continue;
    PromptAttackResult p{artifact[i].prompt.prompt_id, per_prompt[i].size(), 0,
                         rouge[i]};
    for (const AttackedPosition& a : per_prompt[i]) p.successes += a.success;
    report.prompts.push_back(p);
    report.positions.insert(report.positions.end(), per_prompt[i].begin(),
                            per_prompt[i].end());
    rouge_sum += rouge[i];
    ++rouge_count;
  }
  if (rouge_count > 0) report.mean_rouge_l = rouge_sum / rouge_count;
  internal::FinishReport(report);
  return report;
}

}  // namespace cape

#endif  // CAPE_ATTACKS_H_
