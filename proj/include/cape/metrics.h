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

#ifndef CAPE_METRICS_H_
#define CAPE_METRICS_H_

// Utility and empirical-privacy metrics: Rouge-L F1 over token ids, mapping
// set size / retention ratio, and sampling-CDF diagnostics comparing the
// standard and bucketized mechanisms.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "absl/status/status.h"
#include "absl/status/statusor.h"
#include "cape/mechanism.h"
#include "cape/random.h"
#include "cape/sampler.h"
#include "cape/vocab.h"
#include "json.hpp"

namespace cape {

inline size_t LongestCommonSubsequence(std::span<const TokenId> a,
                                       std::span<const TokenId> b) {
  if (a.empty() || b.empty()) return 0;
  std::vector<size_t> prev(b.size() + 1, 0), curr(b.size() + 1, 0);
  for (size_t i = 1; i <= a.size(); ++i) {
    for (size_t j = 1; j <= b.size(); ++j) {
      curr[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1
                                     : std::max(prev[j], curr[j - 1]);
    }
    std::swap(prev, curr);
  }
  return prev[b.size()];
}

// F1 of LCS precision (over the candidate) and recall (over the reference);
// zero when nothing is shared.
inline double RougeLF1(std::span<const TokenId> reference,
                       std::span<const TokenId> candidate) {
  const size_t lcs = LongestCommonSubsequence(reference, candidate);
  if (lcs == 0) return 0.0;
  const double precision =
      static_cast<double>(lcs) / static_cast<double>(candidate.size());
  const double recall =
      static_cast<double>(lcs) / static_cast<double>(reference.size());
  return 2.0 * precision * recall / (precision + recall);
}

struct MappingStats {
  TokenId token_id = 0;
  int trials = 0;
  // S_t: distinct replacements observed.
  size_t distinct_outputs = 0;
  size_t retention_count = 0;
  // N_t = retention_count / trials.
  double retention_ratio = 0.0;

  nlohmann::json ToJson() const {
    return {{"token_id", token_id},
            {"trials", trials},
            {"distinct_outputs", distinct_outputs},
            {"retention_count", retention_count},
            {"retention_ratio", retention_ratio}};
  }
};

inline constexpr int kDefaultMappingTrials = 1000;

// Runs the prepared single-token mechanism `trials` times; trial i uses
// RandomStream::Derive(seed, {token_id, i}).
inline absl::StatusOr<MappingStats> ComputeMappingStats(
    const TokenSampler& sampler, TokenId token_id, int trials, uint64_t seed) {
  if (trials < 1) return absl::InvalidArgumentError("trials must be >= 1");
  std::unordered_set<TokenId> seen;
  MappingStats stats{token_id, trials, 0, 0, 0.0};
  for (int i = 0; i < trials; ++i) {
    RandomStream rng = RandomStream::Derive(
        seed, {static_cast<uint64_t>(token_id), static_cast<uint64_t>(i)});
    absl::StatusOr<SamplingOutcome> outcome = sampler.Draw(rng);
    if (!outcome.ok()) return outcome.status();
    seen.insert(outcome->token_id);
    if (outcome->token_id == token_id) ++stats.retention_count;
  }
  stats.distinct_outputs = seen.size();
  stats.retention_ratio =
      static_cast<double>(stats.retention_count) / static_cast<double>(trials);
  return stats;
}

// Mapping statistics for the token at `window.target_position`, measured in
// that fixed context.
inline absl::StatusOr<MappingStats> ComputeMappingStats(
    const MechanismContext& ctx, const MechanismConfig& config,
    ClipBound bound, const std::vector<TokenId>& ids, size_t position,
    int trials) {
  if (position >= ids.size()) {
    return absl::OutOfRangeError("position outside prompt");
  }
  absl::StatusOr<TokenSampler> sampler =
      PrepareSampler(ctx, config, bound, ids, position);
  if (!sampler.ok()) return sampler.status();
  return ComputeMappingStats(*sampler, ids[position], trials, config.seed);
}

// k * e^eps / (N - k): upper bound on top-k mass relative to the remaining
// mass when per-token probabilities differ by at most e^eps.
inline double LongTailBound(double epsilon, int k, size_t n) {
  return static_cast<double>(k) * std::exp(epsilon) /
         (static_cast<double>(n) - static_cast<double>(k));
}

// Total probability of tokens whose individual probability is below
// `threshold`.
inline double TailMass(std::span<const double> probabilities,
                       double threshold) {
  double mass = 0.0;
  for (double p : probabilities) {
    if (p < threshold) mass += p;
  }
  return mass;
}

inline double TopKMass(std::span<const double> probabilities, int k) {
  std::vector<double> sorted(probabilities.begin(), probabilities.end());
  const size_t take = std::min<size_t>(static_cast<size_t>(std::max(k, 0)),
                                       sorted.size());
  std::partial_sort(sorted.begin(), sorted.begin() + take, sorted.end(),
                    std::greater<>());
  double mass = 0.0;
  for (size_t i = 0; i < take; ++i) mass += sorted[i];
  return mass;
}

struct CdfCurve {
  // Ascending per-token probabilities and their running sum.
  std::vector<double> probabilities;
  std::vector<double> cumulative;

  static CdfCurve From(std::vector<double> probabilities) {
    std::sort(probabilities.begin(), probabilities.end());
    CdfCurve curve{std::move(probabilities), {}};
    curve.cumulative.reserve(curve.probabilities.size());
    double running = 0.0;
    for (double p : curve.probabilities) {
      running += p;
      curve.cumulative.push_back(running);
    }
    return curve;
  }

  // "probability,cumulative" header then one row per token.
  std::string ToCsv() const {
    std::string out = "probability,cumulative\n";
    for (size_t i = 0; i < probabilities.size(); ++i) {
      out += internal::FormatDouble(probabilities[i]);
      out.push_back(',');
      out += internal::FormatDouble(cumulative[i]);
      out.push_back('\n');
    }
    return out;
  }
};

struct CdfReport {
  CdfCurve standard;
  CdfCurve bucketized;
  int k = 10;
  double analytic_bound = 0.0;
  double tail_threshold = 1e-4;
  double standard_tail_mass = 0.0;
  double bucketized_tail_mass = 0.0;
  double standard_top_k_mass = 0.0;
  double bucketized_top_k_mass = 0.0;

  nlohmann::json SummaryJson() const {
    return {{"k", k},
            {"vocab_size", standard.probabilities.size()},
            {"analytic_bound", analytic_bound},
            {"tail_threshold", tail_threshold},
            {"standard_tail_mass", standard_tail_mass},
            {"bucketized_tail_mass", bucketized_tail_mass},
            {"standard_top_k_mass", standard_top_k_mass},
            {"bucketized_top_k_mass", bucketized_top_k_mass}};
  }
};

// Exact probabilities of both mechanisms at the same eps. The standard
// mechanism uses the utility range as sensitivity, the bucketized one the
// bucket-mean range, as the live samplers do.
inline absl::StatusOr<CdfReport> CdfDiagnostic(std::span<const double> utilities,
                                               double epsilon, int n_buckets,
                                               int k = 10,
                                               double tail_threshold = 1e-4) {
  absl::StatusOr<std::vector<double>> standard =
      StandardEmProbabilities(utilities, epsilon, UtilityRange(utilities));
  if (!standard.ok()) return standard.status();
  absl::StatusOr<std::vector<double>> bucketized =
      BucketProbabilities(Bucketize(utilities, n_buckets), epsilon);
  if (!bucketized.ok()) return bucketized.status();
  CdfReport report;
  report.k = k;
  report.analytic_bound = LongTailBound(epsilon, k, utilities.size());
  report.tail_threshold = tail_threshold;
  report.standard_tail_mass = TailMass(*standard, tail_threshold);
  report.bucketized_tail_mass = TailMass(*bucketized, tail_threshold);
  report.standard_top_k_mass = TopKMass(*standard, k);
  report.bucketized_top_k_mass = TopKMass(*bucketized, k);
  report.standard = CdfCurve::From(*std::move(standard));
  report.bucketized = CdfCurve::From(*std::move(bucketized));
  return report;
}

}  // namespace cape

#endif  // CAPE_METRICS_H_
