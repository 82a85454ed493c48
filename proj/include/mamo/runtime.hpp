#pragma once

namespace mamo {

// Keeps large tensor buffers on the heap instead of fresh mmap regions, so a
// training step does not pay page faults for every activation. Call once at
// program start; a no-op where the allocator offers no such control.
void tune_allocator();

// runtime.cpp also replaces the global operator new so every heap block is
// 64-byte aligned; see the note there.

}  // namespace mamo
