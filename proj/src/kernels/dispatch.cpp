#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "vqd/kernels.hpp"

namespace vqd::kernels {

#if !VQD_HAVE_AVX2
const KernelTable* avx2_table() { return nullptr; }
#endif

bool supported(SimdLevel level) {
  switch (level) {
    case SimdLevel::kScalar:
      return true;
    case SimdLevel::kAvx2:
#if VQD_HAVE_AVX2 && (defined(__x86_64__) || defined(__i386__))
      return avx2_table() != nullptr && __builtin_cpu_supports("avx2");
#else
      return false;
#endif
  }
  return false;
}

const KernelTable& table(SimdLevel level) {
  if (!supported(level))
    throw std::runtime_error("SIMD level not supported on this CPU: " +
                             std::string(level_name(level)));
  return level == SimdLevel::kAvx2 ? *avx2_table() : scalar_table();
}

namespace {

SimdLevel initial_level() {
  if (const char* env = std::getenv("VQD_SIMD")) {
    const std::string v(env);
    if (v == "scalar") return SimdLevel::kScalar;
    if (v == "avx2" && supported(SimdLevel::kAvx2)) return SimdLevel::kAvx2;
  }
  return supported(SimdLevel::kAvx2) ? SimdLevel::kAvx2 : SimdLevel::kScalar;
}

std::atomic<SimdLevel>& level_slot() {
  static std::atomic<SimdLevel> slot{initial_level()};
  return slot;
}

}  // namespace

const KernelTable& active() { return table(level_slot().load()); }

SimdLevel active_level() { return level_slot().load(); }

void set_active_level(SimdLevel level) {
  table(level);  // throws when unsupported
  level_slot().store(level);
}

std::string_view level_name(SimdLevel level) {
  return level == SimdLevel::kAvx2 ? "avx2" : "scalar";
}

}  // namespace vqd::kernels
