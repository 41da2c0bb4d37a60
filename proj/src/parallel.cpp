#include "adderkit/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <thread>
#include <vector>

namespace adderkit {

namespace {

int initial_threads() {
  if (const char* env = std::getenv("ADDERKIT_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return 1;
}

std::atomic<int>& thread_count() {
  static std::atomic<int> count{initial_threads()};
  return count;
}

}  // namespace

void set_num_threads(int n) {
  thread_count().store(std::max(1, n));
}

int num_threads() {
  return thread_count().load();
}

void parallel_for(std::int64_t begin, std::int64_t end,
                  const std::function<void(std::int64_t)>& fn) {
  const std::int64_t total = end - begin;
  if (total <= 0) return;
  const int workers =
      static_cast<int>(std::min<std::int64_t>(num_threads(), total));
  if (workers == 1) {
    for (std::int64_t i = begin; i < end; ++i) fn(i);
    return;
  }
  const std::int64_t chunk = (total + workers - 1) / workers;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int t = 0; t < workers; ++t) {
    const std::int64_t lo = begin + t * chunk;
    const std::int64_t hi = std::min(end, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (std::int64_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace adderkit
