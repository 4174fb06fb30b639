#pragma once

#include <cstdint>
#include <vector>

namespace exitcal {

// FLOPs conventions:
//   raw        — a multiply and an add count separately.
//   practical  — a fused multiply-add pair counts as one operation.
enum class FlopConvention { raw, practical };

/// Per-sample sampling cost of the naive Laplace predictive path.
/// The c^3/3 term is kept as an exact rational until the final rounding.
long long flops_naive(long long p, long long c, long long n_mc,
                      FlopConvention conv = FlopConvention::raw);

/// Per-sample sampling cost of the efficient (bias-absorbed) path.
long long flops_efficient(long long p, long long c, long long n_mc,
                          FlopConvention conv = FlopConvention::raw);

/// Cumulative ensembling cost at a 1-based exit index: 3c per exit after
/// the first one.
long long flops_mie(long long c, long long exit_index);

struct ExitShape {
  long long feature_dim = 0;      // p
  long long num_classes = 0;      // c
  long long backbone_flops = 0;   // cumulative cost up to this exit
};

struct OverheadRow {
  int exit = 0;
  long long feature_dim = 0;
  long long num_classes = 0;
  long long backbone_flops = 0;
  long long naive_overhead = 0;
  long long efficient_overhead = 0;
  double naive_rel = 0.0;      // overhead / backbone
  double efficient_rel = 0.0;
};

/// Per-exit absolute and relative sampling overhead for both paths.
/// Throws std::logic_error if the efficient path ever costs relatively
/// more than the naive one.
std::vector<OverheadRow> overhead_report(
    const std::vector<ExitShape>& arch, long long n_mc,
    FlopConvention conv = FlopConvention::practical);

// ---------------------------------------------------------------------------
// Runtime multiply/add counter, used to validate the closed forms against
// what the samplers actually execute. Confined to one thread; enable with
// a FlopScope around the region of interest.
// ---------------------------------------------------------------------------

struct FlopCounter {
  long long raw = 0;
  long long practical = 0;

  long long get(FlopConvention conv) const {
    return conv == FlopConvention::raw ? raw : practical;
  }
};

namespace detail {
extern thread_local FlopCounter* active_flop_counter;
}  // namespace detail

inline void count_fma(long long n) {
  if (auto* c = detail::active_flop_counter) {
    c->raw += 2 * n;
    c->practical += n;
  }
}
inline void count_mul(long long n) {
  if (auto* c = detail::active_flop_counter) {
    c->raw += n;
    c->practical += n;
  }
}
inline void count_add(long long n) {
  if (auto* c = detail::active_flop_counter) {
    c->raw += n;
    c->practical += n;
  }
}

/// RAII: activates (and on destruction deactivates) a counter for the
/// current thread.
class FlopScope {
 public:
  explicit FlopScope(FlopCounter& counter) : previous_(detail::active_flop_counter) {
    detail::active_flop_counter = &counter;
  }
  ~FlopScope() { detail::active_flop_counter = previous_; }
  FlopScope(const FlopScope&) = delete;
  FlopScope& operator=(const FlopScope&) = delete;

 private:
  FlopCounter* previous_;
};

}  // namespace exitcal
