#pragma once

#include <cstddef>
#include <functional>

namespace invreg {

/// Runs body(i) for i in [0, count) on up to `threads` workers. Work units are
/// claimed dynamically; callers write results into per-index slots, so the
/// outcome never depends on the worker count. The first exception is rethrown.
void parallel_for(std::size_t count, std::size_t threads, const std::function<void(std::size_t)>& body);

}  // namespace invreg
