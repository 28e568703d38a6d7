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

#ifndef CAPE_UTILITY_H_
#define CAPE_UTILITY_H_

// Hybrid utility: score(r) = clip(L_r)^lambda_logit * exp(-norm(d_r))^lambda_distance
// where norm() is min-max normalization of the origin's distance row.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "absl/status/status.h"
#include "absl/status/statusor.h"
#include "cape/vocab.h"

namespace cape {

struct LogitVector {
  std::vector<double> values;
  // Opaque identifier of the context that produced the logits.
  std::string context_id;
};

class ClipBound {
 public:
  static absl::StatusOr<ClipBound> Create(double bound) {
    if (!(bound > 0.0) || !std::isfinite(bound)) {
      return absl::InvalidArgumentError(
          internal::StrCat("clip bound must be positive and finite, got ", bound));
    }
    return ClipBound(bound);
  }

  double value() const { return value_; }

 private:
  explicit ClipBound(double value) : value_(value) {}
  double value_;
};

struct UtilityParams {
  double lambda_logit = 0.5;
  double lambda_distance = 1.0;

  absl::Status Validate() const {
    if (!(lambda_logit >= 0.0) || !(lambda_distance >= 0.0)) {
      return absl::InvalidArgumentError("importance factors must be >= 0");
    }
    if (lambda_logit == 0.0 && lambda_distance == 0.0) {
      return absl::InvalidArgumentError(
          "lambda_logit and lambda_distance cannot both be zero");
    }
    return absl::OkStatus();
  }
};

struct UtilityVector {
  TokenId origin = 0;
  // In [0, bound^lambda_logit].
  std::vector<double> scores;
  UtilityParams params;
  double bound = 1.0;
};

// exp(-(d - d_min) / (d_max - d_min)); all ones when d_max == d_min.
inline std::vector<double> NormalizeDistances(std::span<const double> raw) {
  std::vector<double> out(raw.size(), 1.0);
  if (raw.empty()) return out;
  auto [lo, hi] = std::minmax_element(raw.begin(), raw.end());
  const double d_min = *lo;
  const double range = *hi - d_min;
  if (!(range > 0.0)) return out;
  for (size_t j = 0; j < raw.size(); ++j) {
    out[j] = std::exp(-(raw[j] - d_min) / range);
  }
  return out;
}

// Clamps into [0, B]. Negative logits floor at zero so that fractional
// exponents stay real.
inline std::vector<double> ClipLogits(std::span<const double> raw,
                                      ClipBound bound) {
  std::vector<double> out(raw.size());
  for (size_t j = 0; j < raw.size(); ++j) {
    out[j] = std::clamp(raw[j], 0.0, bound.value());
  }
  return out;
}

// B = the largest positive logit over every calibration sample.
inline absl::StatusOr<ClipBound> CalibrateBound(
    std::span<const LogitVector> samples) {
  if (samples.empty()) {
    return absl::InvalidArgumentError("no calibration samples");
  }
  double best = 0.0;
  for (const LogitVector& sample : samples) {
    for (double v : sample.values) {
      if (std::isfinite(v) && v > best) best = v;
    }
  }
  if (!(best > 0.0)) {
    return absl::FailedPreconditionError(
        "calibration samples contain no positive logit");
  }
  return ClipBound::Create(best);
}

namespace internal {

// std::pow already gives pow(0, 0) == 1; spelled out because the
// exponent-zero identities rely on it.
inline double PowNonNegative(double base, double exponent) {
  if (exponent == 0.0) return 1.0;
  return std::pow(base, exponent);
}

}  // namespace internal

inline absl::StatusOr<UtilityVector> HybridUtility(const LogitVector& logits,
                                                   const DistanceRow& distances,
                                                   const UtilityParams& params,
                                                   ClipBound bound) {
  if (logits.values.size() != distances.distances.size()) {
    return absl::InvalidArgumentError(
        internal::StrCat("logit length ", logits.values.size(),
                     " does not match distance row length ",
                     distances.distances.size()));
  }
  if (absl::Status s = params.Validate(); !s.ok()) return s;
  for (double v : logits.values) {
    if (std::isnan(v)) return absl::InvalidArgumentError("NaN logit");
  }
  std::vector<double> clipped = ClipLogits(logits.values, bound);
  std::vector<double> closeness = NormalizeDistances(distances.distances);
  UtilityVector out{distances.origin, std::vector<double>(clipped.size()),
                    params, bound.value()};
  for (size_t j = 0; j < clipped.size(); ++j) {
    out.scores[j] =
        internal::PowNonNegative(clipped[j], params.lambda_logit) *
        internal::PowNonNegative(closeness[j], params.lambda_distance);
  }
  return out;
}

}  // namespace cape

#endif  // CAPE_UTILITY_H_
