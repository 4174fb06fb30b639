#include "exitcal/flops.hpp"

#include <stdexcept>

namespace exitcal {

namespace detail {
thread_local FlopCounter* active_flop_counter = nullptr;
}  // namespace detail

namespace {

long long halve_round_up(long long raw) {
  return raw / 2 + (raw % 2 != 0 ? 1 : 0);
}

void check_shape(long long p, long long c, long long n_mc) {
  if (p < 1 || c < 1 || n_mc < 1) {
    throw std::invalid_argument("flops: p, c, n_mc must all be >= 1");
  }
}

}  // namespace

long long flops_naive(long long p, long long c, long long n_mc,
                      FlopConvention conv) {
  check_shape(p, c, n_mc);
  // 2c^2(n_mc + 1) + c^3/3 + 2p^2 + p - 1, with the cubic term held as an
  // exact rational until the end.
  const long long numerator =
      3 * (2 * c * c * (n_mc + 1) + 2 * p * p + p - 1) + c * c * c;
  long long raw = numerator / 3;
  if (numerator % 3 == 2) ++raw;  // round to nearest; 1/3 down, 2/3 up
  return conv == FlopConvention::raw ? raw : halve_round_up(raw);
}

long long flops_efficient(long long p, long long c, long long n_mc,
                          FlopConvention conv) {
  check_shape(p, c, n_mc);
  const long long raw = 2 * c * n_mc + 2 * p * p + 5 * p + 2;
  return conv == FlopConvention::raw ? raw : halve_round_up(raw);
}

long long flops_mie(long long c, long long exit_index) {
  if (c < 1 || exit_index < 1) {
    throw std::invalid_argument("flops_mie: c and exit_index must be >= 1");
  }
  return 3 * c * (exit_index - 1);
}

std::vector<OverheadRow> overhead_report(const std::vector<ExitShape>& arch,
                                         long long n_mc, FlopConvention conv) {
  if (arch.empty()) {
    throw std::invalid_argument("overhead_report: empty architecture");
  }
  std::vector<OverheadRow> rows;
  rows.reserve(arch.size());
  for (std::size_t k = 0; k < arch.size(); ++k) {
    const ExitShape& e = arch[k];
    OverheadRow row;
    row.exit = static_cast<int>(k + 1);
    row.feature_dim = e.feature_dim;
    row.num_classes = e.num_classes;
    row.backbone_flops = e.backbone_flops;
    row.naive_overhead = flops_naive(e.feature_dim, e.num_classes, n_mc, conv);
    row.efficient_overhead =
        flops_efficient(e.feature_dim, e.num_classes, n_mc, conv);
    row.naive_rel = static_cast<double>(row.naive_overhead) /
                    static_cast<double>(e.backbone_flops);
    row.efficient_rel = static_cast<double>(row.efficient_overhead) /
                        static_cast<double>(e.backbone_flops);
    if (!(row.efficient_rel < row.naive_rel)) {
      throw std::logic_error(
          "overhead_report: efficient path not cheaper than naive at exit " +
          std::to_string(row.exit));
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace exitcal
