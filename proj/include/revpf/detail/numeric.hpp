#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <boost/math/tools/roots.hpp>

#include "revpf/errors.hpp"

namespace revpf::detail {

// Root of a monotone scalar function. Starts from [x0 - step, x0 + step] and
// doubles the half-width until the sign changes, then runs TOMS 748.
// Returns the midpoint of the final bracket.
template <class Fn>
double find_root_expanding(Fn&& f, double x0, double step, double x_tol, int max_expansions = 12,
                           std::uintmax_t max_iter = 200) {
  double a = x0 - step, b = x0 + step;
  double fa = f(a), fb = f(b);
  int expansions = 0;
  while (std::isfinite(fa) && std::isfinite(fb) && fa * fb > 0.0) {
    if (++expansions > max_expansions)
      throw SolverError("root bracket not found after " + std::to_string(max_expansions) + " expansions");
    step *= 2.0;
    a = x0 - step;
    b = x0 + step;
    fa = f(a);
    fb = f(b);
  }
  if (!std::isfinite(fa) || !std::isfinite(fb)) throw SolverError("root bracket produced a non-finite value");
  if (fa == 0.0) return a;
  if (fb == 0.0) return b;
  auto tol = [x_tol](double lo, double hi) { return std::abs(hi - lo) <= x_tol * std::max(1.0, std::abs(lo)); };
  std::uintmax_t iters = max_iter;
  auto [lo, hi] = boost::math::tools::toms748_solve(f, a, b, fa, fb, tol, iters);
  if (iters >= max_iter && !tol(lo, hi)) throw SolverError("root finder did not reach tolerance");
  return 0.5 * (lo + hi);
}

// Thread count from REVPF_THREADS, defaulting to the hardware concurrency.
inline unsigned default_threads() {
  if (const char* env = std::getenv("REVPF_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n >= 1) return static_cast<unsigned>(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// Runs fn(i) for i in [0, n). Each index must write only its own output slot;
// results are then independent of the schedule. The first exception (lowest
// index) is rethrown.
template <class Fn>
void parallel_for(std::size_t n, unsigned threads, Fn&& fn) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(n)));
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (unsigned w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += threads) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace revpf::detail
