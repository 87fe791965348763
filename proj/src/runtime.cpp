#include "rsfm/runtime.hpp"

#include <malloc.h>
#include <omp.h>
#include <pmmintrin.h>
#include <xmmintrin.h>

namespace rsfm {

void configure_allocator() {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
}

namespace {
void ftz_daz() {
  _MM_SET_FLUSH_ZERO_MODE(_MM_FLUSH_ZERO_ON);
  _MM_SET_DENORMALS_ZERO_MODE(_MM_DENORMALS_ZERO_ON);
}
}  // namespace

void configure_floating_point() {
  ftz_daz();
#pragma omp parallel
  ftz_daz();
}

void set_threads(int n) {
  if (n > 0) omp_set_num_threads(n);
}

}  // namespace rsfm
