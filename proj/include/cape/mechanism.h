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

#ifndef CAPE_MECHANISM_H_
#define CAPE_MECHANISM_H_

// End-to-end token perturbation. For every sensitive position of a prompt:
// contextual logits from the provider (always over the original prompt,
// never over already-perturbed tokens), the hybrid utility against the
// origin token's distance row, equal-width bucketing, and a draw from the
// bucketized exponential mechanism. Non-sensitive positions are copied
// verbatim under the default policy.
//
// Randomness: position p of prompt k draws from
// RandomStream::Derive(seed, {k, p}), so outputs do not depend on job count,
// scheduling, or the order prompts appear in a corpus.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "absl/status/status.h"
#include "absl/status/statusor.h"
#include "cape/internal/parallel.h"
#include "cape/providers.h"
#include "cape/random.h"
#include "cape/sampler.h"
#include "cape/utility.h"
#include "cape/vocab.h"
#include "json.hpp"

namespace cape {

enum class NonSensitivePolicy { kSkip, kPerturbAll };
enum class SamplerKind { kBucketized, kStandard };

struct MechanismConfig {
  // Must be set explicitly; zero fails validation.
  double epsilon = 0.0;
  UtilityParams params;
  int n_buckets = 50;
  // Unset: calibrate from the first `calibration_samples` sensitive
  // positions of the input, taken in ascending prompt id order.
  std::optional<double> clip_bound;
  int calibration_samples = 16;
  NonSensitivePolicy nonsensitive_policy = NonSensitivePolicy::kSkip;
  uint64_t seed = 0;
  ContextMode mode = ContextMode::kBidirectional;
  SamplerKind sampler = SamplerKind::kBucketized;

  absl::Status Validate() const {
    if (!(epsilon > 0.0) || !std::isfinite(epsilon)) {
      return absl::InvalidArgumentError(
          internal::StrCat("epsilon must be positive, got ", epsilon));
    }
    if (n_buckets < 1) {
      return absl::InvalidArgumentError(
          internal::StrCat("bucket count must be >= 1, got ", n_buckets));
    }
    if (clip_bound.has_value() &&
        !(*clip_bound > 0.0 && std::isfinite(*clip_bound))) {
      return absl::InvalidArgumentError(
          internal::StrCat("clip bound must be positive, got ", *clip_bound));
    }
    if (!clip_bound.has_value() && calibration_samples < 1) {
      return absl::InvalidArgumentError("calibration needs >= 1 sample");
    }
    return params.Validate();
  }

  nlohmann::json ToJson() const {
    nlohmann::json j = {
        {"epsilon", epsilon},
        {"lambda_l", params.lambda_logit},
        {"lambda_d", params.lambda_distance},
        {"n_buckets", n_buckets},
        {"clip_bound", clip_bound.has_value() ? nlohmann::json(*clip_bound)
                                              : nlohmann::json(nullptr)},
        {"calibration_samples", calibration_samples},
        {"nonsensitive_policy", nonsensitive_policy == NonSensitivePolicy::kSkip
                                    ? "skip"
                                    : "perturb-all"},
        {"seed", seed},
        {"mode", ContextModeName(mode)},
        {"sampler",
         sampler == SamplerKind::kBucketized ? "bucketized" : "standard"}};
    return j;
  }

  // Missing keys keep their current values.
  absl::Status MergeJson(const nlohmann::json& j) {
    if (!j.is_object()) return absl::InvalidArgumentError("config not object");
    try {
      if (j.contains("epsilon")) epsilon = j["epsilon"].get<double>();
      if (j.contains("lambda_l")) params.lambda_logit = j["lambda_l"].get<double>();
      if (j.contains("lambda_d")) {
        params.lambda_distance = j["lambda_d"].get<double>();
      }
      if (j.contains("n_buckets")) n_buckets = j["n_buckets"].get<int>();
      if (j.contains("clip_bound")) {
        clip_bound = j["clip_bound"].is_null()
                         ? std::nullopt
                         : std::optional<double>(j["clip_bound"].get<double>());
      }
      if (j.contains("calibration_samples")) {
        calibration_samples = j["calibration_samples"].get<int>();
      }
      if (j.contains("nonsensitive_policy")) {
        std::string p = j["nonsensitive_policy"].get<std::string>();
        if (p == "skip") {
          nonsensitive_policy = NonSensitivePolicy::kSkip;
        } else if (p == "perturb-all") {
          nonsensitive_policy = NonSensitivePolicy::kPerturbAll;
        } else {
          return absl::InvalidArgumentError(
              internal::StrCat("unknown non-sensitive policy '", p, "'"));
        }
      }
      if (j.contains("seed")) seed = j["seed"].get<uint64_t>();
      if (j.contains("mode")) {
        absl::StatusOr<ContextMode> m =
            ParseContextMode(j["mode"].get<std::string>());
        if (!m.ok()) return m.status();
        mode = *m;
      }
      if (j.contains("sampler")) {
        std::string s = j["sampler"].get<std::string>();
        if (s == "bucketized") {
          sampler = SamplerKind::kBucketized;
        } else if (s == "standard") {
          sampler = SamplerKind::kStandard;
        } else {
          return absl::InvalidArgumentError(
              internal::StrCat("unknown sampler '", s, "'"));
        }
      }
    } catch (const nlohmann::json::exception& e) {
      return absl::InvalidArgumentError(
          internal::StrCat("bad config value: ", e.what()));
    }
    return absl::OkStatus();
  }
};

struct PerturbationRecord {
  size_t position = 0;
  TokenId original_id = 0;
  TokenId replacement_id = 0;
  bool skipped = false;
  std::optional<int32_t> bucket_index;
  // eps + eps' for this position; absent when skipped.
  std::optional<double> effective_epsilon;
};

struct PerturbedPrompt {
  uint64_t prompt_id = 0;
  std::vector<TokenId> original_ids;
  std::vector<PerturbationRecord> records;

  std::vector<TokenId> PerturbedIds() const {
    std::vector<TokenId> out;
    out.reserve(records.size());
    for (const PerturbationRecord& r : records) out.push_back(r.replacement_id);
    return out;
  }

  // eps + max eps' over perturbed positions; unset if nothing was perturbed.
  std::optional<double> MaxEffectiveEpsilon() const {
    std::optional<double> best;
    for (const PerturbationRecord& r : records) {
      if (r.effective_epsilon &&
          (!best || *r.effective_epsilon > *best)) {
        best = r.effective_epsilon;
      }
    }
    return best;
  }
};

// Shared, read-mostly inputs to the mechanism.
struct MechanismContext {
  const Vocabulary* vocab = nullptr;
  DistanceCache* distances = nullptr;
  const NonSensitiveSet* nonsensitive = nullptr;
  Provider* provider = nullptr;
};

// The single-position mechanism for one utility vector, prepared once and
// drawn from any number of times.
class TokenSampler {
 public:
  static absl::StatusOr<TokenSampler> Build(UtilityVector utilities,
                                            const MechanismConfig& config) {
    TokenSampler out;
    out.epsilon_ = config.epsilon;
    out.kind_ = config.sampler;
    if (config.sampler == SamplerKind::kBucketized) {
      out.buckets_ = Bucketize(utilities, config.n_buckets);
    }
    out.utilities_ = std::move(utilities);
    return out;
  }

  absl::StatusOr<SamplingOutcome> Draw(RandomStream& rng) const {
    if (kind_ == SamplerKind::kBucketized) {
      return Sample(*buckets_, epsilon_, rng);
    }
    return SampleStandardEm(utilities_.scores, epsilon_, rng);
  }

  // Exact output distribution over the vocabulary.
  absl::StatusOr<std::vector<double>> Probabilities() const {
    if (kind_ == SamplerKind::kBucketized) {
      return BucketProbabilities(*buckets_, epsilon_);
    }
    return StandardEmProbabilities(utilities_.scores, epsilon_,
                                   UtilityRange(utilities_.scores));
  }

  const UtilityVector& utilities() const { return utilities_; }
  const std::optional<BucketSet>& buckets() const { return buckets_; }

 private:
  double epsilon_ = 0.0;
  SamplerKind kind_ = SamplerKind::kBucketized;
  UtilityVector utilities_;
  std::optional<BucketSet> buckets_;
};

inline bool IsSensitive(const MechanismContext& ctx,
                        const MechanismConfig& config, TokenId id) {
  return config.nonsensitive_policy == NonSensitivePolicy::kPerturbAll ||
         ctx.nonsensitive == nullptr || !ctx.nonsensitive->Contains(id);
}

inline absl::Status ValidatePrompt(const MechanismContext& ctx,
                                   const std::vector<TokenId>& ids) {
  for (size_t i = 0; i < ids.size(); ++i) {
    if (!ctx.vocab->Contains(ids[i])) {
      return absl::OutOfRangeError(internal::StrCat(
          "token id ", ids[i], " at position ", i, " is not in the vocabulary"));
    }
  }
  return absl::OkStatus();
}

// Utility vector for the token at `position`, in the original context.
inline absl::StatusOr<UtilityVector> ComputeUtility(
    const MechanismContext& ctx, const MechanismConfig& config,
    ClipBound bound, const std::vector<TokenId>& ids, size_t position) {
  ContextWindow window{ids, position, config.mode};
  absl::StatusOr<LogitVector> logits = ctx.provider->ContextLogits(window);
  if (!logits.ok()) return logits.status();
  absl::StatusOr<std::shared_ptr<const DistanceRow>> row =
      ctx.distances->Row(ids[position]);
  if (!row.ok()) return row.status();
  return HybridUtility(*logits, **row, config.params, bound);
}

inline absl::StatusOr<TokenSampler> PrepareSampler(
    const MechanismContext& ctx, const MechanismConfig& config,
    ClipBound bound, const std::vector<TokenId>& ids, size_t position) {
  absl::StatusOr<UtilityVector> utilities =
      ComputeUtility(ctx, config, bound, ids, position);
  if (!utilities.ok()) return utilities.status();
  return TokenSampler::Build(*std::move(utilities), config);
}

inline absl::StatusOr<PerturbationRecord> PerturbPosition(
    const MechanismContext& ctx, const MechanismConfig& config,
    ClipBound bound, uint64_t prompt_id, const std::vector<TokenId>& ids,
    size_t position) {
  PerturbationRecord record;
  record.position = position;
  record.original_id = ids[position];
  if (!IsSensitive(ctx, config, ids[position])) {
    record.replacement_id = ids[position];
    record.skipped = true;
    return record;
  }
  absl::StatusOr<TokenSampler> sampler =
      PrepareSampler(ctx, config, bound, ids, position);
  if (!sampler.ok()) return sampler.status();
  RandomStream rng = RandomStream::Derive(config.seed, {prompt_id, position});
  absl::StatusOr<SamplingOutcome> outcome = sampler->Draw(rng);
  if (!outcome.ok()) return outcome.status();
  record.replacement_id = outcome->token_id;
  if (outcome->bucket_index >= 0) record.bucket_index = outcome->bucket_index;
  record.effective_epsilon = outcome->effective_epsilon;
  return record;
}

inline absl::StatusOr<PerturbedPrompt> PerturbPrompt(
    const MechanismContext& ctx, const MechanismConfig& config,
    ClipBound bound, uint64_t prompt_id, const std::vector<TokenId>& ids) {
  if (absl::Status s = config.Validate(); !s.ok()) return s;
  if (absl::Status s = ValidatePrompt(ctx, ids); !s.ok()) return s;
  PerturbedPrompt out{prompt_id, ids, {}};
  out.records.reserve(ids.size());
  for (size_t i = 0; i < ids.size(); ++i) {
    absl::StatusOr<PerturbationRecord> record =
        PerturbPosition(ctx, config, bound, prompt_id, ids, i);
    if (!record.ok()) {
      return internal::Annotate(
          record.status(),
          internal::StrCat("prompt ", prompt_id, ", position ", i, ": "));
    }
    out.records.push_back(*std::move(record));
  }
  return out;
}

struct CorpusPrompt {
  uint64_t prompt_id = 0;
  // Failed input parsing/tokenization carries its error here.
  absl::StatusOr<std::vector<TokenId>> token_ids;
};

// The clip bound from the config, or calibrated from the first sensitive
// positions of `prompts` in ascending prompt id order.
inline absl::StatusOr<ClipBound> ResolveClipBound(
    const MechanismContext& ctx, const MechanismConfig& config,
    const std::vector<CorpusPrompt>& prompts) {
  if (config.clip_bound.has_value()) {
    return ClipBound::Create(*config.clip_bound);
  }
  std::vector<const CorpusPrompt*> order;
  for (const CorpusPrompt& p : prompts) {
    if (p.token_ids.ok()) order.push_back(&p);
  }
  std::sort(order.begin(), order.end(),
            [](const CorpusPrompt* a, const CorpusPrompt* b) {
              return a->prompt_id < b->prompt_id;
            });
  std::vector<LogitVector> samples;
  for (const CorpusPrompt* p : order) {
    const std::vector<TokenId>& ids = *p->token_ids;
    if (!ValidatePrompt(ctx, ids).ok()) continue;
    for (size_t i = 0; i < ids.size(); ++i) {
      if (static_cast<int>(samples.size()) >= config.calibration_samples) break;
      if (!IsSensitive(ctx, config, ids[i])) continue;
      absl::StatusOr<LogitVector> logits =
          ctx.provider->ContextLogits(ContextWindow{ids, i, config.mode});
      if (!logits.ok()) {
        return internal::Annotate(
            logits.status(), internal::StrCat("calibration, prompt ",
                                          p->prompt_id, ", position ", i, ": "));
      }
      samples.push_back(*std::move(logits));
    }
  }
  return CalibrateBound(samples);
}

struct CorpusOptions {
  int jobs = 1;
  // Continue past failed prompts, emitting an error entry for each.
  bool skip_errors = false;
};

struct CorpusEntry {
  uint64_t prompt_id = 0;
  absl::StatusOr<PerturbedPrompt> result;
  double seconds = 0.0;
};

struct CorpusSummary {
  size_t n_prompts = 0;
  size_t n_failed = 0;
  size_t n_sensitive = 0;
  // Sensitive positions whose replacement equals the original.
  size_t retention_count = 0;
  double mean_effective_epsilon = 0.0;
  double max_effective_epsilon = 0.0;
  double clip_bound = 0.0;
  double total_seconds = 0.0;
  double mean_seconds_per_prompt = 0.0;

  nlohmann::json ToJson() const {
    return {{"n_prompts", n_prompts},
            {"n_failed", n_failed},
            {"n_sensitive", n_sensitive},
            {"retention_count", retention_count},
            {"mean_effective_epsilon", mean_effective_epsilon},
            {"max_effective_epsilon", max_effective_epsilon},
            {"clip_bound", clip_bound},
            {"total_seconds", total_seconds},
            {"mean_seconds_per_prompt", mean_seconds_per_prompt}};
  }
};

struct CorpusResult {
  std::vector<CorpusEntry> entries;
  CorpusSummary summary;
};

// Perturbs every prompt, fanning out over `options.jobs` threads. Entries
// come back in input order. Without skip_errors the first failure in input
// order is returned instead.
inline absl::StatusOr<CorpusResult> PerturbCorpus(
    const MechanismContext& ctx, const MechanismConfig& config,
    const std::vector<CorpusPrompt>& prompts, const CorpusOptions& options) {
  if (absl::Status s = config.Validate(); !s.ok()) return s;
  const auto start = std::chrono::steady_clock::now();
  CorpusResult result;
  result.entries.resize(prompts.size());
  result.summary.n_prompts = prompts.size();
  if (prompts.empty()) return result;

  absl::StatusOr<ClipBound> bound = ResolveClipBound(ctx, config, prompts);
  if (!bound.ok()) return bound.status();
  result.summary.clip_bound = bound->value();

  internal::ParallelFor(prompts.size(), options.jobs, [&](size_t i) {
    const auto t0 = std::chrono::steady_clock::now();
    CorpusEntry& entry = result.entries[i];
    entry.prompt_id = prompts[i].prompt_id;
    if (!prompts[i].token_ids.ok()) {
      entry.result = internal::Annotate(
          prompts[i].token_ids.status(),
          internal::StrCat("prompt ", prompts[i].prompt_id, ": "));
    } else {
      entry.result = PerturbPrompt(ctx, config, *bound, prompts[i].prompt_id,
                                   *prompts[i].token_ids);
    }
    entry.seconds = std::chrono::duration<double>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
  });

  double eps_sum = 0.0;
  size_t eps_count = 0;
  for (const CorpusEntry& entry : result.entries) {
    if (!entry.result.ok()) {
      if (!options.skip_errors) return entry.result.status();
      ++result.summary.n_failed;
      continue;
    }
    for (const PerturbationRecord& r : entry.result->records) {
      if (r.skipped) continue;
      ++result.summary.n_sensitive;
      if (r.replacement_id == r.original_id) ++result.summary.retention_count;
      if (r.effective_epsilon) {
        eps_sum += *r.effective_epsilon;
        ++eps_count;
        result.summary.max_effective_epsilon =
            std::max(result.summary.max_effective_epsilon,
                     *r.effective_epsilon);
      }
    }
  }
  if (eps_count > 0) {
    result.summary.mean_effective_epsilon =
        eps_sum / static_cast<double>(eps_count);
  }
  result.summary.total_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  result.summary.mean_seconds_per_prompt =
      result.summary.total_seconds / static_cast<double>(prompts.size());
  return result;
}

}  // namespace cape

#endif  // CAPE_MECHANISM_H_
