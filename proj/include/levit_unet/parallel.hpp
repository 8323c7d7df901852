#pragma once

#include <cstddef>
#include <functional>

namespace levit {

/// Worker-thread cap. Defaults to LEVIT_UNET_THREADS when set, else 1.
int max_threads();
void set_max_threads(int n);

/// Runs fn(begin, end) over [0, count) split into at most max_threads()
/// contiguous chunks. Chunk boundaries are multiples of `grain`.
void parallel_for(std::size_t count, std::size_t grain,
                  const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace levit
