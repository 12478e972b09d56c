#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace peg {

inline constexpr const char* kVersion = "0.1.0";

using Index = Eigen::Index;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent input data.
class DataError : public Error {
 public:
  using Error::Error;
};

/// A numerical procedure could not produce a usable answer
/// (singular system, separation, degenerate information, ...).
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Invalid parameter combination supplied by a caller.
class UsageError : public Error {
 public:
  using Error::Error;
};

inline double sup_norm(const Eigen::Ref<const Vector>& v) {
  return v.size() == 0 ? 0.0 : v.cwiseAbs().maxCoeff();
}

// ---------------------------------------------------------------------------
// Threading. Work items are indexed; results are written to per-index slots so
// the outcome never depends on the number of workers.

namespace detail {
inline thread_local bool in_parallel_region = false;
inline std::atomic<int>& thread_override() {
  static std::atomic<int> value{0};
  return value;
}
}  // namespace detail

/// Worker count: set_thread_count() if called, else $PEG_THREADS, else 1.
inline int thread_count() {
  int forced = detail::thread_override().load();
  if (forced > 0) return forced;
  if (const char* env = std::getenv("PEG_THREADS")) {
    int v = std::atoi(env);
    if (v > 0) return v;
  }
  return 1;
}

inline void set_thread_count(int n) { detail::thread_override().store(n > 0 ? n : 0); }

/// Runs fn(i) for i in [0, n). Nested calls run serially on the calling thread.
/// The first exception thrown by any item is rethrown after all workers join.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  int workers = std::min<int>(thread_count(), static_cast<int>(n));
  if (workers <= 1 || detail::in_parallel_region) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto body = [&] {
    detail::in_parallel_region = true;
    for (;;) {
      std::size_t i = next.fetch_add(1);
      if (i >= n) break;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
    detail::in_parallel_region = false;
  };
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers - 1));
  for (int t = 1; t < workers; ++t) pool.emplace_back(body);
  body();
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

// ---------------------------------------------------------------------------
// Random streams. Every stochastic unit of work (bootstrap replicate,
// simulation replication, CV split) draws from an engine keyed by
// (seed, stream id), so results do not depend on execution order.

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::mt19937_64 make_stream(std::uint64_t seed, std::uint64_t stream, std::uint64_t salt = 0) {
  std::uint64_t key = splitmix64(splitmix64(seed ^ splitmix64(salt)) ^ splitmix64(stream + 0x632be59bd9b4e019ULL));
  std::seed_seq seq{static_cast<std::uint32_t>(key), static_cast<std::uint32_t>(key >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(salt)};
  return std::mt19937_64(seq);
}

/// Standard normal draw via Box-Muller on 53-bit uniforms; unlike
/// std::normal_distribution the sequence is fixed across standard libraries.
class NormalSampler {
 public:
  double operator()(std::mt19937_64& eng) {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform(eng);
    double u2 = uniform(eng);
    while (u1 <= 0.0) u1 = uniform(eng);
    double r = std::sqrt(-2.0 * std::log(u1));
    double t = 2.0 * M_PI * u2;
    spare_ = r * std::sin(t);
    has_spare_ = true;
    return r * std::cos(t);
  }

  static double uniform(std::mt19937_64& eng) {
    return static_cast<double>(eng() >> 11) * 0x1.0p-53;
  }

 private:
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// n points from lo to hi, evenly spaced on the log scale.
inline std::vector<double> log_spaced(double lo, double hi, int n) {
  if (n <= 0 || !(lo > 0.0) || !(hi >= lo)) throw UsageError("log_spaced: need n > 0 and 0 < lo <= hi");
  std::vector<double> out(static_cast<std::size_t>(n));
  if (n == 1) {
    out[0] = lo;
    return out;
  }
  double a = std::log(lo), b = std::log(hi);
  for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = std::exp(a + (b - a) * i / (n - 1));
  out.back() = hi;
  return out;
}

}  // namespace peg
