#include <cstdlib>
#include <string>

#include "hybridnet/kernels.hpp"

namespace hybridnet::kernels {

#if defined(__x86_64__) || defined(_M_X64)
const KernelTable& avx2_table();
#endif
#if defined(__aarch64__)
const KernelTable& neon_table();
#endif

namespace {

const KernelTable* g_active = nullptr;

const KernelTable* table_for(Backend b) {
  switch (b) {
    case Backend::kScalar:
      return &scalar_table();
#if defined(__x86_64__) || defined(_M_X64)
    case Backend::kAvx2:
      return __builtin_cpu_supports("avx2") ? &avx2_table() : nullptr;
#endif
#if defined(__aarch64__)
    case Backend::kNeon:
      return &neon_table();
#endif
    default:
      return nullptr;
  }
}

}  // namespace

std::string backend_name(Backend b) {
  switch (b) {
    case Backend::kScalar:
      return "scalar";
    case Backend::kAvx2:
      return "avx2";
    case Backend::kNeon:
      return "neon";
  }
  return "?";
}

bool backend_available(Backend b) { return table_for(b) != nullptr; }

Backend detect_backend() {
  if (const char* env = std::getenv("HYBRIDNET_KERNEL")) {
    const std::string v(env);
    if (v == "scalar") return Backend::kScalar;
    if (v == "avx2" && backend_available(Backend::kAvx2)) return Backend::kAvx2;
    if (v == "neon" && backend_available(Backend::kNeon)) return Backend::kNeon;
    // "auto" and unsupported values fall through to detection
  }
  if (backend_available(Backend::kAvx2)) return Backend::kAvx2;
  if (backend_available(Backend::kNeon)) return Backend::kNeon;
  return Backend::kScalar;
}

const KernelTable& active() {
  if (!g_active) g_active = table_for(detect_backend());
  return *g_active;
}

Backend active_backend() {
  const KernelTable* t = &active();
  if (t == &scalar_table()) return Backend::kScalar;
#if defined(__x86_64__) || defined(_M_X64)
  if (backend_available(Backend::kAvx2) && t == &avx2_table())
    return Backend::kAvx2;
#endif
#if defined(__aarch64__)
  if (t == &neon_table()) return Backend::kNeon;
#endif
  return Backend::kScalar;
}

bool set_backend(Backend b) {
  const KernelTable* t = table_for(b);
  if (!t) return false;
  g_active = t;
  return true;
}

}  // namespace hybridnet::kernels
