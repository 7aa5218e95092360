#pragma once

// Deterministic sampling, dense symmetric eigendecomposition, sparse SPD
// solves and bracketed root finding shared by the rest of the library.

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "rpce/error.hpp"

namespace rpce {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace detail

// Combines any number of integers into one 64-bit key.  Used to derive
// stream ids from (replicate, sample size, purpose, ...) tuples.
template <typename... Ints>
constexpr std::uint64_t mix_ids(Ints... ids) {
  std::uint64_t h = 0x243F6A8885A308D3ULL;
  ((h = detail::splitmix64(h ^ static_cast<std::uint64_t>(ids))), ...);
  return h;
}

/// Counter-based random stream.
///
/// Draw k of stream (seed, stream_id) is a pure function of the triple
/// (seed, stream_id, k): the 64-bit output is splitmix64 applied twice to a
/// key derived from the seed and stream id, xor-ed with the counter.
/// Uniforms take the top 53 bits and are centred in their cell so they lie
/// strictly inside (0, 1).  Normals use the Box-Muller transform on
/// consecutive uniform pairs, returning the cosine branch first.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id)
      : seed_(seed), stream_(stream_id),
        key_(detail::splitmix64(detail::splitmix64(seed) ^
                                (stream_id * 0xD1B54A32D192ED03ULL + 0x8CB92BA72F3D8DD7ULL))) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64() {
    const std::uint64_t x = key_ ^ (counter_++ * 0x9FB21C651E98DF25ULL);
    return detail::splitmix64(detail::splitmix64(x));
  }

  double uniform() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    if (n == 0) throw InvalidArgument("RngStream::index: empty range");
    return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 2.0 * M_PI * u2;
    spare_ = r * std::sin(t);
    has_spare_ = true;
    return r * std::cos(t);
  }

  // Child stream with an id derived from this stream's id and `tag`.
  RngStream derive(std::uint64_t tag) const { return RngStream(seed_, mix_ids(stream_, tag)); }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// M x d matrix of i.i.d. N(0,1) draws, filled row by row.
inline Matrix sample_std_normal(RngStream& rng, Eigen::Index rows, Eigen::Index dim) {
  if (rows < 1 || dim < 1) throw InvalidArgument("sample_std_normal: need M >= 1 and d >= 1");
  Matrix out(rows, dim);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < dim; ++j) out(i, j) = rng.normal();
  return out;
}

// In-place Fisher-Yates permutation of 0..n-1 driven by `rng`.
inline std::vector<std::size_t> random_permutation(RngStream& rng, std::size_t n) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.index(i)]);
  return p;
}

struct SymEigen {
  Vector eigenvalues;   // descending
  Matrix eigenvectors;  // column k pairs with eigenvalues[k]
};

/// Eigendecomposition of a dense symmetric matrix by cyclic Jacobi rotations.
///
/// Eigenvalues come back in descending order (stable for ties, so a diagonal
/// input keeps its original column order among equal values).  Each
/// eigenvector is signed so that its entry of largest magnitude, first such
/// entry on ties, is non-negative.  The result is a deterministic function of
/// the input bits.
inline SymEigen sym_eigen(const Matrix& input, int max_sweeps = 100) {
  const Eigen::Index n = input.rows();
  if (input.cols() != n) throw InvalidArgument("sym_eigen: matrix is not square");
  const double scale = n > 0 ? input.cwiseAbs().maxCoeff() : 0.0;
  if (!std::isfinite(scale)) throw InvalidArgument("sym_eigen: non-finite entries");
  if ((input - input.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
    throw InvalidArgument("sym_eigen: matrix is not symmetric");

  Matrix a = 0.5 * (input + input.transpose());
  Matrix v = Matrix::Identity(n, n);

  bool converged = n <= 1;
  for (int sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
    double off = 0.0;
    for (Eigen::Index q = 1; q < n; ++q)
      for (Eigen::Index p = 0; p < q; ++p) off += std::abs(a(p, q));
    if (off == 0.0) {
      converged = true;
      break;
    }
    const double threshold = sweep < 3 ? 0.2 * off / static_cast<double>(n * n) : 0.0;
    for (Eigen::Index q = 1; q < n; ++q) {
      for (Eigen::Index p = 0; p < q; ++p) {
        const double apq = a(p, q);
        const double g = 100.0 * std::abs(apq);
        const double app = a(p, p);
        const double aqq = a(q, q);
        if (sweep > 3 && std::abs(app) + g == std::abs(app) && std::abs(aqq) + g == std::abs(aqq)) {
          a(p, q) = 0.0;
          a(q, p) = 0.0;
          continue;
        }
        if (std::abs(apq) <= threshold || apq == 0.0) continue;

        const double theta = (aqq - app) / (2.0 * apq);
        double t = 1.0 / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        if (theta < 0.0) t = -t;
        if (!std::isfinite(theta)) t = 0.5 / theta;  // |theta| overflowed
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;

        for (Eigen::Index k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = 0.0;
        a(q, p) = 0.0;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  if (!converged) throw NumericalFailure("sym_eigen: Jacobi sweeps did not converge");

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index x, Eigen::Index y) { return a(x, x) > a(y, y); });

  SymEigen out{Vector(n), Matrix(n, n)};
  for (Eigen::Index k = 0; k < n; ++k) {
    const Eigen::Index src = order[static_cast<std::size_t>(k)];
    out.eigenvalues[k] = a(src, src);
    Eigen::Index big = 0;
    for (Eigen::Index i = 1; i < n; ++i)
      if (std::abs(v(i, src)) > std::abs(v(big, src))) big = i;
    out.eigenvectors.col(k) = v(big, src) < 0.0 ? Vector(-v.col(src)) : Vector(v.col(src));
  }
  return out;
}

/// Jacobi-preconditioned conjugate gradient for sparse SPD systems.
/// Stops when the true residual satisfies ||Ax - b|| <= tol * ||b||.
inline Vector solve_sym_sparse(const SparseMatrix& a, const Vector& b, double tol = 1e-10) {
  const Eigen::Index n = a.rows();
  if (a.cols() != n || b.size() != n) throw InvalidArgument("solve_sym_sparse: dimension mismatch");
  Vector x = Vector::Zero(n);
  const double bnorm = b.norm();
  if (bnorm == 0.0) return x;

  Vector inv_diag(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double dii = a.coeff(i, i);
    if (!(dii > 0.0)) throw NumericalFailure("solve_sym_sparse: non-positive diagonal entry");
    inv_diag[i] = 1.0 / dii;
  }

  // Aim below the requested tolerance so the recomputed residual passes.
  const double target = 0.1 * tol * bnorm;
  const Eigen::Index cap = 10 * n;
  Vector r = b;
  Eigen::Index it = 0;
  for (int restart = 0; restart < 3; ++restart) {
    Vector z = inv_diag.cwiseProduct(r);
    Vector p = z;
    double rz = r.dot(z);
    while (it < cap && r.norm() > target) {
      const Vector ap = a * p;
      const double pap = p.dot(ap);
      if (!(pap > 0.0)) throw NumericalFailure("solve_sym_sparse: matrix is not positive definite");
      const double alpha = rz / pap;
      x += alpha * p;
      r -= alpha * ap;
      z = inv_diag.cwiseProduct(r);
      const double rz_next = r.dot(z);
      p = z + (rz_next / rz) * p;
      rz = rz_next;
      ++it;
    }
    r = b - a * x;
    if (r.norm() <= tol * bnorm) return x;
    if (it >= cap) break;
  }
  throw NumericalFailure("solve_sym_sparse: conjugate gradient did not converge");
}

struct Bracket {
  double lo;
  double hi;
};

/// One root per bracket by bisection carried to floating-point resolution.
/// Each bracket must show a sign change; roots come back sorted ascending.
inline std::vector<double> find_roots_increasing(const std::function<double(double)>& f,
                                                 const std::vector<Bracket>& brackets) {
  std::vector<double> roots;
  roots.reserve(brackets.size());
  for (const Bracket& br : brackets) {
    double lo = std::min(br.lo, br.hi);
    double hi = std::max(br.lo, br.hi);
    double flo = f(lo);
    const double fhi = f(hi);
    if (flo == 0.0) {
      roots.push_back(lo);
      continue;
    }
    if (fhi == 0.0) {
      roots.push_back(hi);
      continue;
    }
    if (!(std::signbit(flo) != std::signbit(fhi)) || !std::isfinite(flo) || !std::isfinite(fhi))
      throw InvalidArgument("find_roots_increasing: no sign change on [" + std::to_string(lo) +
                            ", " + std::to_string(hi) + "]");
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      if (mid <= lo || mid >= hi) break;
      const double fm = f(mid);
      if (fm == 0.0) {
        lo = hi = mid;
        break;
      }
      if (std::signbit(fm) == std::signbit(flo)) {
        lo = mid;
        flo = fm;
      } else {
        hi = mid;
      }
    }
    roots.push_back(std::abs(f(lo)) <= std::abs(f(hi)) ? lo : hi);
  }
  std::sort(roots.begin(), roots.end());
  return roots;
}

}  // namespace rpce
