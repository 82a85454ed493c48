#include "mamo/runtime.hpp"

#include <cstdlib>
#include <new>

#if __has_include(<malloc.h>)
#include <malloc.h>
#endif

namespace mamo {

void tune_allocator() {
#if defined(M_TOP_PAD) && defined(M_TRIM_THRESHOLD) && defined(M_MMAP_THRESHOLD)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

}  // namespace mamo

// Eigen peels vectorised reductions up to the first packet-aligned element, so
// a sum over a buffer at a different address can round differently. Handing
// out every block on a 64-byte boundary (the widest packet) makes results a
// function of the inputs alone, which resume and same-seed reruns rely on.
namespace {

constexpr std::size_t kAlign = 64;

void* aligned_or_null(std::size_t n) noexcept {
  void* p = nullptr;
  if (posix_memalign(&p, kAlign, n == 0 ? 1 : n) != 0) return nullptr;
  return p;
}

void* aligned_or_throw(std::size_t n) {
  for (;;) {
    if (void* p = aligned_or_null(n)) return p;
    std::new_handler h = std::get_new_handler();
    if (!h) throw std::bad_alloc();
    h();
  }
}

}  // namespace

void* operator new(std::size_t n) { return aligned_or_throw(n); }
void* operator new[](std::size_t n) { return aligned_or_throw(n); }
void* operator new(std::size_t n, const std::nothrow_t&) noexcept { return aligned_or_null(n); }
void* operator new[](std::size_t n, const std::nothrow_t&) noexcept { return aligned_or_null(n); }
void operator delete(void* p) noexcept { std::free(p); }
void operator delete[](void* p) noexcept { std::free(p); }
void operator delete(void* p, std::size_t) noexcept { std::free(p); }
void operator delete[](void* p, std::size_t) noexcept { std::free(p); }
void operator delete(void* p, const std::nothrow_t&) noexcept { std::free(p); }
void operator delete[](void* p, const std::nothrow_t&) noexcept { std::free(p); }
