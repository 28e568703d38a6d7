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

#ifndef CAPE_RANDOM_H_
#define CAPE_RANDOM_H_

#include <cstdint>
#include <initializer_list>
#include <limits>
#include <random>

namespace cape {

// SplitMix64 finalizer (Steele, Lea, Flood 2014). Used only to derive
// well-separated seeds; never as the sampling generator itself.
inline uint64_t MixBits(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// A reproducible random stream.
//
// The engine is std::mt19937_64, whose output sequence is fixed by the C++
// standard. The conversions to doubles and bounded integers are implemented
// here rather than with <random> distributions, which are not specified
// bit-for-bit and differ between standard library vendors.
class RandomStream {
 public:
  explicit RandomStream(uint64_t seed) : engine_(seed) {}

  // Stream keyed by (seed, keys...). Streams with different keys are
  // independent for all practical purposes and the mapping is stable across
  // releases.
  static RandomStream Derive(uint64_t seed,
                             std::initializer_list<uint64_t> keys) {
    uint64_t state = MixBits(seed);
    for (uint64_t key : keys) state = MixBits(state ^ MixBits(key + 1));
    return RandomStream(state);
  }

  uint64_t NextU64() { return engine_(); }

  // Uniform on [0, 1) with 53 random bits.
  double UniformDouble() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Uniform on {0, ..., n-1}; n must be positive. Rejection sampling over the
  // largest multiple of n that fits in 64 bits, so the result is unbiased.
  uint64_t UniformIndex(uint64_t n) {
    const uint64_t limit = std::numeric_limits<uint64_t>::max() -
                           std::numeric_limits<uint64_t>::max() % n;
    uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace cape

#endif  // CAPE_RANDOM_H_
