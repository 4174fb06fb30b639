#include "exitcal/numerics.hpp"

#include "exitcal/flops.hpp"

#include <cmath>
#include <numbers>

namespace exitcal {

bool is_prob_vector(const Vector& p, double tol) {
  if (p.size() == 0) return false;
  if (!(p.array() >= 0.0).all()) return false;
  return std::abs(p.sum() - 1.0) <= tol;
}

Matrix cholesky(const Matrix& a, double symmetry_tol) {
  if (a.rows() != a.cols()) {
    throw std::invalid_argument("cholesky: matrix must be square");
  }
  const Eigen::Index n = a.rows();
  const double asym = (a - a.transpose()).cwiseAbs().maxCoeff();
  const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  if (asym > symmetry_tol * scale) {
    throw std::invalid_argument("cholesky: matrix is not symmetric");
  }
  const Matrix sym = 0.5 * (a + a.transpose());

  Matrix l = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) {
      double sum = sym(i, j);
      if (j > 0) {
        sum -= l.row(i).head(j).dot(l.row(j).head(j));
        count_fma(j);
      }
      if (i == j) {
        if (!(sum > 0.0)) {
          throw DecompositionError(
              "cholesky: non-positive pivot at index " + std::to_string(i), i);
        }
        l(i, i) = std::sqrt(sum);
        count_mul(1);  // sqrt
      } else {
        l(i, j) = sum / l(j, j);
        count_mul(1);  // division
      }
    }
  }
  return l;
}

Matrix spd_inverse(const Matrix& a) {
  const Matrix l = cholesky(a);
  const Matrix identity = Matrix::Identity(a.rows(), a.cols());
  const Matrix inv_l = l.triangularView<Eigen::Lower>().solve(identity);
  Matrix inv = l.transpose().triangularView<Eigen::Upper>().solve(inv_l);
  return 0.5 * (inv + inv.transpose());
}

namespace {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t absorb(std::uint64_t h, std::uint64_t v) {
  return splitmix64(h ^ (v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2)));
}

// Uniform in (0, 1]: never zero, safe under log.
inline double u64_to_unit_open(std::uint64_t x) {
  return (static_cast<double>(x >> 11) + 1.0) * 0x1.0p-53;
}

// Uniform in [0, 1).
inline double u64_to_unit(std::uint64_t x) {
  return static_cast<double>(x >> 11) * 0x1.0p-53;
}

}  // namespace

std::uint64_t keyed_u64(std::uint64_t seed, std::uint64_t a, std::uint64_t b,
                        std::uint64_t c, std::uint64_t d) {
  std::uint64_t h = splitmix64(seed);
  h = absorb(h, a);
  h = absorb(h, b);
  h = absorb(h, c);
  h = absorb(h, d);
  return h;
}

double normal_at(const GaussianStream& stream, std::uint64_t lane) {
  const std::uint64_t base =
      keyed_u64(stream.seed, stream.sample, stream.exit, stream.draw, lane);
  const double u1 = u64_to_unit_open(splitmix64(base ^ 0x5bf0363546e92f6bULL));
  const double u2 = u64_to_unit(splitmix64(base ^ 0xa3ec647659359acdULL));
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * std::numbers::pi * u2);
}

Vector draw_gaussian(const GaussianStream& stream, Eigen::Index n) {
  if (n < 1) {
    throw std::invalid_argument("draw_gaussian: n must be >= 1");
  }
  Vector out(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    out(i) = normal_at(stream, static_cast<std::uint64_t>(i));
  }
  return out;
}

std::uint64_t derive_seed(std::uint64_t master, std::string_view component) {
  // FNV-1a over the component name, then mixed with the master seed.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const char ch : component) {
    h ^= static_cast<unsigned char>(ch);
    h *= 0x100000001b3ULL;
  }
  return keyed_u64(master, h, 0, 0, 0);
}

}  // namespace exitcal
