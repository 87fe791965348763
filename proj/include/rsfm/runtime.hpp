#pragma once

namespace rsfm {

// Keeps large activation buffers on the heap instead of fresh mmaps.
// Call once at program start.
void configure_allocator();

// Flush-to-zero and denormals-are-zero on the calling thread and the
// OpenMP pool.
void configure_floating_point();

// Sets the OpenMP thread count when n > 0.
void set_threads(int n);

}  // namespace rsfm
