#pragma once

#include <cstddef>
#include <functional>

namespace cgnet {

/// Worker count for data-parallel loops: hardware concurrency capped by the
/// CG_THREADS environment variable, or 1 when deterministic mode is on.
std::size_t worker_count();
void set_deterministic(bool on);
bool deterministic();

/// Runs fn(i) for i in [0, n). Iterations must write disjoint outputs.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace cgnet
