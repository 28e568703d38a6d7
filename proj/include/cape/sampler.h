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

#ifndef CAPE_SAMPLER_H_
#define CAPE_SAMPLER_H_

// Private selection over a vocabulary: the standard exponential mechanism,
// equal-width utility bucketing, and the bucketized mechanism that picks a
// bucket by its mean utility and then a member uniformly.
//
// All probability math is done in log space with max subtraction; the
// exponent eps*u/(2*sensitivity) overflows doubles for large eps otherwise.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "absl/status/status.h"
#include "absl/status/statusor.h"
#include "cape/random.h"
#include "cape/utility.h"
#include "cape/vocab.h"

namespace cape {

struct Bucket {
  double mean_utility = 0.0;
  // Ascending token ids; never empty.
  std::vector<TokenId> members;
};

struct BucketSet {
  // Nonempty buckets in ascending order of utility interval (and mean).
  std::vector<Bucket> buckets;
  int n_requested = 1;
  double width = 0.0;
  // Largest gap between two bucket means; zero iff there is one bucket.
  double sensitivity = 0.0;
  // ln(largest bucket size / smallest bucket size).
  double epsilon_prime = 0.0;
  // bucket index of every token id.
  std::vector<int32_t> bucket_of;

  size_t vocab_size() const { return bucket_of.size(); }
};

struct SamplingOutcome {
  int32_t bucket_index = 0;
  TokenId token_id = 0;
  double effective_epsilon = 0.0;
};

namespace internal {

// Neumaier-compensated sum.
class CompensatedSum {
 public:
  void Add(double x) {
    double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x)) {
      compensation_ += (sum_ - t) + x;
    } else {
      compensation_ += (x - t) + sum_;
    }
    sum_ = t;
  }
  double value() const { return sum_ + compensation_; }

 private:
  double sum_ = 0.0;
  double compensation_ = 0.0;
};

// exp(log_weights - logsumexp(log_weights)).
inline std::vector<double> NormalizeLogWeights(
    std::span<const double> log_weights) {
  std::vector<double> out(log_weights.size());
  if (log_weights.empty()) return out;
  const double top = *std::max_element(log_weights.begin(), log_weights.end());
  CompensatedSum total;
  for (size_t i = 0; i < log_weights.size(); ++i) {
    out[i] = std::exp(log_weights[i] - top);
    total.Add(out[i]);
  }
  const double z = total.value();
  for (double& p : out) p /= z;
  return out;
}

inline absl::Status CheckEpsilon(double epsilon) {
  if (!(epsilon > 0.0) || std::isinf(epsilon)) {
    return absl::InvalidArgumentError(
        internal::StrCat("epsilon must be positive and finite, got ", epsilon));
  }
  return absl::OkStatus();
}

}  // namespace internal

// p[j] proportional to exp(eps * u[j] / (2 * sensitivity)).
inline absl::StatusOr<std::vector<double>> StandardEmProbabilities(
    std::span<const double> utilities, double epsilon, double sensitivity) {
  if (absl::Status s = internal::CheckEpsilon(epsilon); !s.ok()) return s;
  if (!(sensitivity > 0.0) || std::isinf(sensitivity)) {
    return absl::InvalidArgumentError(
        internal::StrCat("sensitivity must be positive, got ", sensitivity));
  }
  const double scale = epsilon / (2.0 * sensitivity);
  std::vector<double> log_weights(utilities.size());
  for (size_t j = 0; j < utilities.size(); ++j) {
    if (!std::isfinite(utilities[j])) {
      return absl::InvalidArgumentError(
          internal::StrCat("non-finite utility at index ", j));
    }
    log_weights[j] = scale * utilities[j];
  }
  return internal::NormalizeLogWeights(log_weights);
}

// Sensitivity the standard mechanism uses for a single origin: the utility
// range, or 1 when every utility is equal (any positive value gives the same
// uniform distribution then).
inline double UtilityRange(std::span<const double> utilities) {
  if (utilities.empty()) return 1.0;
  auto [lo, hi] = std::minmax_element(utilities.begin(), utilities.end());
  double range = *hi - *lo;
  return range > 0.0 ? range : 1.0;
}

// Equal-width bucketing. A token with utility u lands in bucket
// floor((u - u_min) / width) with u_max clamped into the last bucket; empty
// buckets are dropped.
inline BucketSet Bucketize(std::span<const double> utilities, int n_buckets) {
  BucketSet out;
  out.n_requested = std::max(n_buckets, 1);
  out.bucket_of.assign(utilities.size(), 0);
  if (utilities.empty()) return out;

  auto [lo, hi] = std::minmax_element(utilities.begin(), utilities.end());
  const double u_min = *lo;
  const double range = *hi - u_min;
  out.width = range / out.n_requested;

  std::vector<int32_t> raw_index(utilities.size(), 0);
  if (out.width > 0.0 && out.n_requested > 1) {
    const double last = static_cast<double>(out.n_requested - 1);
    for (size_t j = 0; j < utilities.size(); ++j) {
      double q = std::floor((utilities[j] - u_min) / out.width);
      raw_index[j] = static_cast<int32_t>(std::clamp(q, 0.0, last));
    }
  }

  std::vector<std::vector<TokenId>> members(out.n_requested);
  for (size_t j = 0; j < utilities.size(); ++j) {
    members[raw_index[j]].push_back(static_cast<TokenId>(j));
  }
  std::vector<int32_t> compacted(out.n_requested, -1);
  for (int i = 0; i < out.n_requested; ++i) {
    if (members[i].empty()) continue;
    internal::CompensatedSum sum;
    for (TokenId t : members[i]) sum.Add(utilities[t]);
    compacted[i] = static_cast<int32_t>(out.buckets.size());
    double mean = sum.value() / static_cast<double>(members[i].size());
    out.buckets.push_back(Bucket{mean, std::move(members[i])});
  }
  for (size_t j = 0; j < utilities.size(); ++j) {
    out.bucket_of[j] = compacted[raw_index[j]];
  }

  size_t smallest = out.buckets.front().members.size();
  size_t largest = smallest;
  for (const Bucket& b : out.buckets) {
    smallest = std::min(smallest, b.members.size());
    largest = std::max(largest, b.members.size());
  }
  out.sensitivity =
      out.buckets.back().mean_utility - out.buckets.front().mean_utility;
  out.epsilon_prime = std::log(static_cast<double>(largest) /
                               static_cast<double>(smallest));
  return out;
}

inline BucketSet Bucketize(const UtilityVector& utilities, int n_buckets) {
  return Bucketize(std::span<const double>(utilities.scores), n_buckets);
}

// Probability of selecting each bucket: proportional to
// exp(eps * mean / (2 * sensitivity)). `sensitivity` defaults to the set's
// own; a zero sensitivity selects uniformly over tokens (weight |b_i|).
inline absl::StatusOr<std::vector<double>> BucketSelectionProbabilities(
    const BucketSet& set, double epsilon,
    std::optional<double> sensitivity = std::nullopt) {
  if (absl::Status s = internal::CheckEpsilon(epsilon); !s.ok()) return s;
  const double delta = sensitivity.value_or(set.sensitivity);
  std::vector<double> log_weights(set.buckets.size());
  if (!(delta > 0.0)) {
    for (size_t i = 0; i < set.buckets.size(); ++i) {
      log_weights[i] =
          std::log(static_cast<double>(set.buckets[i].members.size()));
    }
  } else {
    const double scale = epsilon / (2.0 * delta);
    for (size_t i = 0; i < set.buckets.size(); ++i) {
      log_weights[i] = scale * set.buckets[i].mean_utility;
    }
  }
  return internal::NormalizeLogWeights(log_weights);
}

// Per-token probabilities: a bucket's selection probability split evenly
// among its members.
inline absl::StatusOr<std::vector<double>> BucketProbabilities(
    const BucketSet& set, double epsilon,
    std::optional<double> sensitivity = std::nullopt) {
  absl::StatusOr<std::vector<double>> per_bucket =
      BucketSelectionProbabilities(set, epsilon, sensitivity);
  if (!per_bucket.ok()) return per_bucket.status();
  std::vector<double> out(set.vocab_size());
  for (size_t i = 0; i < set.buckets.size(); ++i) {
    const double share = (*per_bucket)[i] /
                         static_cast<double>(set.buckets[i].members.size());
    for (TokenId t : set.buckets[i].members) out[t] = share;
  }
  return out;
}

// Inverse-CDF draw from a probability vector. Rounding slack at the top end
// resolves to the last entry with positive probability.
inline size_t SampleIndex(std::span<const double> probabilities,
                          RandomStream& rng) {
  const double u = rng.UniformDouble();
  double cumulative = 0.0;
  size_t last_positive = 0;
  for (size_t i = 0; i < probabilities.size(); ++i) {
    if (probabilities[i] <= 0.0) continue;
    cumulative += probabilities[i];
    last_positive = i;
    if (u < cumulative) return i;
  }
  return last_positive;
}

// Draws a bucket by the exponential mechanism over bucket means, then a
// member uniformly. With zero sensitivity every token is equally likely and
// the effective budget is eps alone.
inline absl::StatusOr<SamplingOutcome> Sample(const BucketSet& set,
                                              double epsilon,
                                              RandomStream& rng) {
  if (set.buckets.empty()) {
    return absl::InvalidArgumentError("cannot sample from an empty vocabulary");
  }
  absl::StatusOr<std::vector<double>> per_bucket =
      BucketSelectionProbabilities(set, epsilon);
  if (!per_bucket.ok()) return per_bucket.status();
  const size_t bucket = SampleIndex(*per_bucket, rng);
  const std::vector<TokenId>& members = set.buckets[bucket].members;
  const TokenId token = members[rng.UniformIndex(members.size())];
  const double eps_prime = set.sensitivity > 0.0 ? set.epsilon_prime : 0.0;
  return SamplingOutcome{static_cast<int32_t>(bucket), token,
                         epsilon + eps_prime};
}

// Standard exponential mechanism draw using the origin's utility range as
// sensitivity.
inline absl::StatusOr<SamplingOutcome> SampleStandardEm(
    std::span<const double> utilities, double epsilon, RandomStream& rng) {
  absl::StatusOr<std::vector<double>> p =
      StandardEmProbabilities(utilities, epsilon, UtilityRange(utilities));
  if (!p.ok()) return p.status();
  const size_t token = SampleIndex(*p, rng);
  return SamplingOutcome{-1, static_cast<TokenId>(token), epsilon};
}

struct DpCheckResult {
  // max over (t, t', y) of P[R(t) = y] / P[R(t') = y].
  double max_ratio = 1.0;
  // exp(eps + largest cross-origin eps'); eps' is 0 for the standard mechanism.
  double bound = 1.0;
  // Mechanism-level sensitivity: max over y, t, t' of |u(t, y) - u(t', y)|,
  // taken over bucket-mean utilities when bucketing is on.
  double sensitivity = 0.0;
  // Largest eps' reported by any single origin's BucketSet.
  double max_origin_epsilon_prime = 0.0;
  // Largest ln(max |b| / min |b|) over the union of two origins' buckets.
  double max_cross_epsilon_prime = 0.0;
  // Largest ratio divided by its own pair's bound; the check passes iff this
  // is <= 1 + 1e-9.
  double max_bound_usage = 0.0;
  // Some pair exceeds exp(eps + max_origin_epsilon_prime): the per-origin
  // report undercounts the budget for that fixture.
  bool per_origin_undercount = false;
  bool passed = true;
  int32_t worst_origin = 0;
  int32_t worst_neighbor = 0;
  int32_t worst_output = 0;
};

inline constexpr size_t kMaxDpCheckVocabulary = 200;

// Exact-enumeration privacy check. `utilities[t][y]` is the utility of
// candidate y for origin t. With `n_buckets` unset the standard mechanism is
// checked against exp(eps); otherwise the bucketized mechanism is checked,
// for every origin pair, against exp(eps + eps'_cross) where eps'_cross uses
// the bucket sizes of both origins.
inline absl::StatusOr<DpCheckResult> DpRatioCheck(
    const std::vector<std::vector<double>>& utilities, double epsilon,
    std::optional<int> n_buckets) {
  if (absl::Status s = internal::CheckEpsilon(epsilon); !s.ok()) return s;
  if (utilities.empty()) return absl::InvalidArgumentError("no origins");
  const size_t n_out = utilities.front().size();
  if (n_out == 0 || n_out > kMaxDpCheckVocabulary ||
      utilities.size() > kMaxDpCheckVocabulary) {
    return absl::InvalidArgumentError(
        internal::StrCat("exact enumeration needs 1..", kMaxDpCheckVocabulary,
                     " tokens, got ", n_out));
  }
  for (const auto& row : utilities) {
    if (row.size() != n_out) {
      return absl::InvalidArgumentError("ragged utility matrix");
    }
  }
  const size_t n_in = utilities.size();

  DpCheckResult result;
  // Effective per-token utility (bucket mean or raw) and bucket sizes.
  std::vector<std::vector<double>> effective(n_in);
  std::vector<BucketSet> sets;
  std::vector<std::pair<size_t, size_t>> size_range(n_in, {1, 1});
  if (n_buckets.has_value()) {
    sets.reserve(n_in);
    for (size_t t = 0; t < n_in; ++t) {
      sets.push_back(Bucketize(utilities[t], *n_buckets));
      const BucketSet& set = sets.back();
      effective[t].resize(n_out);
      size_t lo = n_out, hi = 0;
      for (const Bucket& b : set.buckets) {
        for (TokenId y : b.members) effective[t][y] = b.mean_utility;
        lo = std::min(lo, b.members.size());
        hi = std::max(hi, b.members.size());
      }
      size_range[t] = {lo, hi};
      result.max_origin_epsilon_prime =
          std::max(result.max_origin_epsilon_prime, set.epsilon_prime);
    }
  } else {
    effective = utilities;
  }

  for (size_t y = 0; y < n_out; ++y) {
    double lo = effective[0][y], hi = effective[0][y];
    for (size_t t = 1; t < n_in; ++t) {
      lo = std::min(lo, effective[t][y]);
      hi = std::max(hi, effective[t][y]);
    }
    result.sensitivity = std::max(result.sensitivity, hi - lo);
  }

  std::vector<std::vector<double>> probs(n_in);
  for (size_t t = 0; t < n_in; ++t) {
    if (!(result.sensitivity > 0.0)) {
      // Every origin has the same effective utilities: one shared
      // distribution, so any ratio is exactly 1.
      probs[t] = n_buckets.has_value()
                     ? *BucketProbabilities(sets[t], epsilon, 0.0)
                     : std::vector<double>(n_out, 1.0 / n_out);
      continue;
    }
    absl::StatusOr<std::vector<double>> p =
        n_buckets.has_value()
            ? BucketProbabilities(sets[t], epsilon, result.sensitivity)
            : StandardEmProbabilities(utilities[t], epsilon,
                                      result.sensitivity);
    if (!p.ok()) return p.status();
    probs[t] = *std::move(p);
  }

  const double slack = 1.0 + 1e-9;
  const double origin_bound =
      std::exp(epsilon + result.max_origin_epsilon_prime);
  for (size_t t = 0; t < n_in; ++t) {
    for (size_t s = 0; s < n_in; ++s) {
      if (s == t) continue;
      double cross = 0.0;
      if (n_buckets.has_value()) {
        size_t lo = std::min(size_range[t].first, size_range[s].first);
        size_t hi = std::max(size_range[t].second, size_range[s].second);
        cross = std::log(static_cast<double>(hi) / static_cast<double>(lo));
      }
      result.max_cross_epsilon_prime =
          std::max(result.max_cross_epsilon_prime, cross);
      const double pair_bound = std::exp(epsilon + cross);
      for (size_t y = 0; y < n_out; ++y) {
        const double num = probs[t][y];
        const double den = probs[s][y];
        if (num <= 0.0 || den <= 0.0) {
          return absl::InternalError(internal::StrCat(
              "zero probability for output ", y, " under origin ",
              num <= 0.0 ? t : s, "; support must be the full vocabulary"));
        }
        const double ratio = num / den;
        if (ratio > result.max_ratio) {
          result.max_ratio = ratio;
          result.worst_origin = static_cast<int32_t>(t);
          result.worst_neighbor = static_cast<int32_t>(s);
          result.worst_output = static_cast<int32_t>(y);
        }
        result.max_bound_usage =
            std::max(result.max_bound_usage, ratio / pair_bound);
        if (ratio > pair_bound * slack) result.passed = false;
        if (ratio > origin_bound * slack) result.per_origin_undercount = true;
      }
    }
  }
  result.bound = std::exp(epsilon + result.max_cross_epsilon_prime);
  return result;
}

}  // namespace cape

#endif  // CAPE_SAMPLER_H_
