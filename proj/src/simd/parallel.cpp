#include "levit_unet/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace levit {
namespace {

int threads_from_env() {
  const char* env = std::getenv("LEVIT_UNET_THREADS");
  if (env == nullptr) return 1;
  try {
    return std::max(1, std::stoi(env));
  } catch (...) {
    return 1;
  }
}

std::atomic<int>& thread_cap() {
  static std::atomic<int> cap{threads_from_env()};
  return cap;
}

}  // namespace

int max_threads() { return thread_cap().load(std::memory_order_relaxed); }

void set_max_threads(int n) { thread_cap().store(std::max(1, n), std::memory_order_relaxed); }

void parallel_for(std::size_t count, std::size_t grain,
                  const std::function<void(std::size_t, std::size_t)>& fn) {
  if (count == 0) return;
  grain = std::max<std::size_t>(grain, 1);
  const std::size_t units = (count + grain - 1) / grain;
  const std::size_t workers = std::min<std::size_t>(units, static_cast<std::size_t>(max_threads()));
  if (workers <= 1) {
    fn(0, count);
    return;
  }
  const std::size_t per = (units + workers - 1) / workers;
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) {
    const std::size_t b = std::min(count, w * per * grain);
    const std::size_t e = std::min(count, (w + 1) * per * grain);
    if (b < e) pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  fn(0, std::min(count, per * grain));
}

}  // namespace levit
