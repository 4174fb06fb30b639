#pragma once

#include <cstddef>
#include <functional>

namespace exitcal {

/// Process-wide default worker count used when a call site passes 0.
void set_default_threads(unsigned n);
unsigned default_threads();

/// Runs fn(i) for i in [0, n). Work items must be independent; results
/// written per index are identical for any thread count, including 1.
/// threads == 0 means "use the process default".
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn,
                  unsigned threads = 0);

}  // namespace exitcal
