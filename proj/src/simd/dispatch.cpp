#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <string_view>

#include "kernels_impl.hpp"
#include "levit_unet/parallel.hpp"

namespace levit::simd {
namespace {

const KernelSet kScalar{"scalar",
                        detail::gemm_scalar,
                        detail::relu_scalar,
                        detail::hardswish_scalar,
                        detail::scale_shift_scalar,
                        detail::accumulate_scalar};

#if defined(LEVIT_UNET_HAVE_AVX2)
const KernelSet kAvx2{"avx2",
                      detail::gemm_avx2,
                      detail::relu_avx2,
                      detail::hardswish_avx2,
                      detail::scale_shift_avx2,
                      detail::accumulate_avx2};
#endif

const KernelSet* initial_choice() {
  const char* env = std::getenv("LEVIT_UNET_KERNELS");
  if (env != nullptr && std::string_view(env) == "scalar") return &kScalar;
  if (const KernelSet* k = avx2_kernels()) return k;
  return &kScalar;
}

std::atomic<const KernelSet*>& current() {
  static std::atomic<const KernelSet*> k{initial_choice()};
  return k;
}

}  // namespace

bool cpu_supports_avx2_fma() {
#if defined(__x86_64__) || defined(__i386__)
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const KernelSet& scalar_kernels() { return kScalar; }

const KernelSet* avx2_kernels() {
#if defined(LEVIT_UNET_HAVE_AVX2)
  static const bool ok = cpu_supports_avx2_fma();
  return ok ? &kAvx2 : nullptr;
#else
  return nullptr;
#endif
}

const KernelSet& active_kernels() { return *current().load(std::memory_order_relaxed); }

bool select_kernels(std::string_view name) {
  if (name == "scalar") {
    current().store(&kScalar);
    return true;
  }
  if (name == "avx2") {
    if (const KernelSet* k = avx2_kernels()) {
      current().store(k);
      return true;
    }
  }
  return false;
}

void gemm(const GemmProblem& p) {
  const KernelSet& k = active_kernels();
  const double work = static_cast<double>(p.m) * p.n * p.k;
  if (max_threads() <= 1 || work < 4.0e6 || p.n < 64) {
    k.gemm(p);
    return;
  }
  // Column split: every C element still sees the same K blocking, so the
  // result is bit-identical for any thread count.
  parallel_for(static_cast<std::size_t>(p.n), 64, [&](std::size_t b, std::size_t e) {
    GemmProblem sub = p;
    sub.n = static_cast<int>(e - b);
    sub.c = p.c + b;
    sub.b = p.trans_b ? p.b + b * static_cast<std::size_t>(p.ldb) : p.b + b;
    k.gemm(sub);
  });
}

}  // namespace levit::simd
