// lingwav/rng.hpp

// Copyright 2026  The lingwav Authors

// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#ifndef LINGWAV_RNG_HPP_
#define LINGWAV_RNG_HPP_

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "lingwav/common.hpp"

namespace lingwav {

// xoshiro256** with splitmix64 seeding. Self-contained so that generator
// state is exactly four u64 words: streams serialize into checkpoints and
// resumed runs continue the sequence bit-exactly on any platform.
//
// Every run owns one master Rng; consumers get independent child streams
// via Split("name") so adding draws to one consumer does not perturb the
// others.
class Rng {
 public:
  Rng() : Rng(0) {}

  explicit Rng(uint64_t seed) {
    uint64_t x = seed;
    for (auto& word : state_) word = SplitMix64(&x);
  }

  // Child stream keyed by consumer name; deterministic in (parent seed, name).
  Rng Split(std::string_view name) const {
    uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a over the name
    for (char c : name) {
      h ^= static_cast<uint8_t>(c);
      h *= 0x100000001b3ull;
    }
    // Mix the parent's seed words in, without advancing the parent.
    for (auto word : state_) {
      h ^= word + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    }
    return Rng(h);
  }

  uint64_t NextU64() {
    const uint64_t result = Rotl(state_[1] * 5, 7) * 9;
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = Rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 random mantissa bits.
  double Uniform01() {
    return static_cast<double>(NextU64() >> 11) * 0x1.0p-53;
  }

  double Uniform(double lo, double hi) { return lo + (hi - lo) * Uniform01(); }

  // Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  uint64_t UniformInt(uint64_t n) {
    LINGWAV_CHECK(n > 0, ErrorCode::kInternal, "UniformInt: empty range");
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t v;
    do {
      v = NextU64();
    } while (v >= limit);
    return v % n;
  }

  // Box-Muller without a cached spare, so state is the four words only.
  double Normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = Uniform01();
    while (u1 <= 0.0) u1 = Uniform01();
    const double u2 = Uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(2.0 * M_PI * u2);
  }

  // Standard Gumbel(0, 1) noise for the quantizer.
  double Gumbel() {
    double u = Uniform01();
    while (u <= 0.0) u = Uniform01();
    return -std::log(-std::log(u));
  }

  bool Bernoulli(double p) { return Uniform01() < p; }

  // Draw k distinct indices from [0, n) by partial Fisher-Yates.
  std::vector<int64_t> SampleWithoutReplacement(int64_t n, int64_t k) {
    LINGWAV_CHECK(k <= n, ErrorCode::kInternal, "sample k > n");
    std::vector<int64_t> pool(n);
    for (int64_t i = 0; i < n; ++i) pool[i] = i;
    std::vector<int64_t> out(k);
    for (int64_t i = 0; i < k; ++i) {
      const int64_t j = i + static_cast<int64_t>(UniformInt(n - i));
      std::swap(pool[i], pool[j]);
      out[i] = pool[i];
    }
    return out;
  }

  std::array<uint64_t, 4> Serialize() const { return state_; }
  void Restore(const std::array<uint64_t, 4>& state) { state_ = state; }

 private:
  static uint64_t Rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  static uint64_t SplitMix64(uint64_t* x) {
    uint64_t z = (*x += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::array<uint64_t, 4> state_;
};

}  // namespace lingwav

#endif  // LINGWAV_RNG_HPP_
