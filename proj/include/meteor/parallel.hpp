#pragma once

#include <cstddef>
#include <functional>

namespace meteor {

/// Worker cap: hardware concurrency, lowered by METEOR_THREADS when set.
std::size_t worker_count();

/// Runs body(i) for i in [0, n). Each index is handled by exactly one worker;
/// callers write results into per-index slots so the outcome does not depend
/// on scheduling. The first exception thrown by any body is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace meteor
