#pragma once

namespace bgadapt {

// Keeps freed tensor buffers inside the heap instead of returning them to
// the kernel. Training allocates and frees many 128 KiB buffers per sample;
// with the default glibc thresholds each one becomes an mmap/munmap pair.
// No-op on other C libraries.
void tune_allocator();

}  // namespace bgadapt
