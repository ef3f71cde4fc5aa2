#pragma once

#include <cstddef>
#include <functional>

namespace pgmfuse::threading {

// Process-wide worker count. 0 or 1 disables the pool. The CLI sets this once
// from --threads before any work starts.
void set_thread_count(int n);
int thread_count();

// Runs fn(begin, end) over [0, total) split into fixed-size chunks. Chunk
// boundaries depend only on total and chunk_size, never on the worker count,
// and every chunk writes disjoint state, so results are identical for any
// thread count. fn must not touch shared mutable state outside its chunk.
void parallel_chunks(std::size_t total, std::size_t chunk_size,
                     const std::function<void(std::size_t, std::size_t)>& fn);

// Convenience: one chunk per index block of size ceil(total/max(1,blocks)).
void parallel_items(std::size_t total,
                    const std::function<void(std::size_t)>& fn);

}  // namespace pgmfuse::threading
