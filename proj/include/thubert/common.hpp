// Copyright 2026 The thubert Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace thubert {

/// Base error type for the whole library. Messages are structured:
/// "<component>: <what went wrong> <offending values>".
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {
inline void format_parts(std::ostringstream&) {}
template <typename T, typename... Rest>
void format_parts(std::ostringstream& os, const T& head, const Rest&... rest) {
  os << head;
  format_parts(os, rest...);
}
}  // namespace detail

template <typename... Parts>
std::string strcatv(const Parts&... parts) {
  std::ostringstream os;
  detail::format_parts(os, parts...);
  return os.str();
}

template <typename... Parts>
[[noreturn]] void fail(const Parts&... parts) {
  throw Error(strcatv(parts...));
}

#define THBT_CHECK(cond, ...)       \
  do {                              \
    if (!(cond)) ::thubert::fail(__VA_ARGS__); \
  } while (0)

// ---------------------------------------------------------------------------
// Deterministic RNG. Distributions are hand-pinned (no std::*_distribution)
// so results are identical across standard libraries.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Derive an independent stream seed from a master seed and stream tags.
inline uint64_t derive_seed(uint64_t master, uint64_t a, uint64_t b = 0) {
  return splitmix64(splitmix64(master ^ (a * 0x9e3779b97f4a7c15ull)) ^ b);
}

/// xoshiro-free minimal generator: splitmix64 sequence.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  int64_t below(int64_t n) {
    THBT_CHECK(n > 0, "rng: below() needs positive bound, got ", n);
    return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
  }

  /// Standard normal via Box-Muller.
  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return r * std::cos(a);
  }

  /// Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(static_cast<int64_t>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t state_;
  double cached_ = 0.0;
  bool have_cached_ = false;
};

/// Stateless per-element uniform in [0,1), used by counter-based dropout.
inline double hash_uniform(uint64_t seed, uint64_t node, uint64_t index) {
  uint64_t h = splitmix64(seed ^ splitmix64(node * 0x2545f4914f6cdd1dull) ^
                          splitmix64(index + 0x452821e638d01377ull));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

// ---------------------------------------------------------------------------
// Thread cap. THBT_THREADS caps internal parallelism; default 1. Work is
// partitioned into fixed blocks independent of the thread count, and each
// block is computed exactly as the serial path would compute it, so results
// are bit-identical for any thread count.
// ---------------------------------------------------------------------------

inline int thread_cap() {
  static const int cap = [] {
    const char* env = std::getenv("THBT_THREADS");
    if (!env) return 1;
    int v = std::atoi(env);
    return v < 1 ? 1 : v;
  }();
  return cap;
}

/// Runs fn(begin, end) over [0, n) in fixed blocks of `block` items.
template <typename Fn>
void parallel_blocks(int64_t n, int64_t block, Fn&& fn) {
  if (n <= 0) return;
  const int threads = thread_cap();
  const int64_t nblocks = (n + block - 1) / block;
  if (threads <= 1 || nblocks <= 1) {
    for (int64_t b = 0; b < nblocks; ++b)
      fn(b * block, std::min(n, (b + 1) * block));
    return;
  }
  std::vector<std::thread> pool;
  const int use = static_cast<int>(std::min<int64_t>(threads, nblocks));
  std::atomic<int64_t> next{0};
  for (int t = 0; t < use; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        int64_t b = next.fetch_add(1);
        if (b >= nblocks) break;
        fn(b * block, std::min(n, (b + 1) * block));
      }
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace thubert
