#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace gridloop {

// ---------------------------------------------------------------------------
// Errors

struct OverlapError : std::runtime_error { using std::runtime_error::runtime_error; };
struct OutOfBounds : std::runtime_error { using std::runtime_error::runtime_error; };
struct NotFound : std::runtime_error { using std::runtime_error::runtime_error; };
struct Ambiguous : std::runtime_error { using std::runtime_error::runtime_error; };
struct SamplingExhausted : std::runtime_error { using std::runtime_error::runtime_error; };
struct WrongLength : std::runtime_error { using std::runtime_error::runtime_error; };
struct IdOutOfRange : std::runtime_error { using std::runtime_error::runtime_error; };
struct ShapeError : std::runtime_error { using std::runtime_error::runtime_error; };
struct NotNormalized : std::runtime_error { using std::runtime_error::runtime_error; };
struct EmptyMask : std::runtime_error { using std::runtime_error::runtime_error; };
struct DivergenceError : std::runtime_error { using std::runtime_error::runtime_error; };
struct MissingWarmStart : std::runtime_error { using std::runtime_error::runtime_error; };
struct BadCheckpoint : std::runtime_error { using std::runtime_error::runtime_error; };

// ---------------------------------------------------------------------------
// Rng: mt19937_64 engine with hand-rolled draws so that sampled values depend
// only on the engine stream, not on the standard library's distribution
// implementations.

class Rng {
 public:
  Rng() : eng_(0x9e3779b97f4a7c15ull) {}
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t u64() { return eng_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

  // (0, 1), never returns an exact endpoint
  double uniform_open() {
    return (static_cast<double>(u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  // unbiased integer in [0, n)
  int uniform_int(int n) {
    uint64_t bound = static_cast<uint64_t>(n);
    uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    uint64_t x;
    do { x = u64(); } while (x >= limit);
    return static_cast<int>(x % bound);
  }

  // standard Gumbel(0,1) via -log(-log(u))
  double gumbel() { return -std::log(-std::log(uniform_open())); }

  // Box-Muller; one value per call, no cached state
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform_open();
    double u2 = uniform_open();
    return mean + stddev * std::sqrt(-2.0 * std::log(u1)) *
                      std::cos(2.0 * M_PI * u2);
  }

  // independent stream derived from this rng's seed material plus a tag
  static uint64_t derive(uint64_t seed, uint64_t tag) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ull * (tag + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::string save_state() const {
    std::ostringstream os;
    os << eng_;
    return os.str();
  }
  void load_state(const std::string& s) {
    std::istringstream is(s);
    is >> eng_;
    if (!is) throw BadCheckpoint("malformed rng state");
  }

 private:
  std::mt19937_64 eng_;
};

// ---------------------------------------------------------------------------
// parallel_for: runs fn(i) for i in [0, n). Work items must be independent;
// callers that need run-level determinism accumulate results indexed by i.

inline void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  int workers = std::min(threads, n);
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        int i = next.fetch_add(1, std::memory_order_relaxed);
        if (i >= n) return;
        fn(i);
      }
    });
  }
  for (auto& t : pool) t.join();
}

inline int resolve_threads(int requested) {
  if (requested > 0) return requested;
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

}  // namespace gridloop
