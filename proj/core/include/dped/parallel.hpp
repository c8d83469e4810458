#pragma once

#include <cstddef>
#include <functional>

namespace dped {

/// Number of worker threads used by parallel_for. Defaults to 1.
void set_num_threads(int n);
int num_threads();

/// Runs body(i) for i in [0, n). Each index is processed by exactly one
/// thread; callers must not rely on execution order. With one thread the
/// loop runs inline and in order.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace dped
