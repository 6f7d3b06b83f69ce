#pragma once

#include <cstddef>
#include <functional>

namespace beliefrect {

/// Runs body(i) for i in [0, n) on up to `jobs` threads. Each index is
/// visited exactly once; callers write results into index-addressed slots so
/// the outcome is independent of scheduling. The first exception thrown by
/// any body is rethrown after all threads finish.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& body);

}  // namespace beliefrect
