#pragma once

// Normalized probabilists' Hermite polynomials in d variables: multi-index
// sets, measurement matrices and the derivative-coupling kernels
// (K_ij)_kl = E[d psi_k / d xi_i * d psi_l / d xi_j].

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "rpce/error.hpp"
#include "rpce/numerics.hpp"

namespace rpce {

using MultiIndex = std::vector<int>;

enum class BasisMode { full, no_interaction };

inline std::string to_string(BasisMode m) {
  return m == BasisMode::full ? "full" : "no_interaction";
}

inline BasisMode basis_mode_from_string(const std::string& s) {
  if (s == "full") return BasisMode::full;
  if (s == "no_interaction") return BasisMode::no_interaction;
  throw InvalidArgument("unknown basis mode '" + s + "'");
}

/// Number of multi-indices of total degree <= order in `dim` variables,
/// i.e. C(order + dim, dim).  Throws CapacityError past `cap`.
inline std::size_t full_basis_size(int dim, int order, std::size_t cap) {
  // C(P+d, P) built up as prod_{k=1..P} (d+k)/k, exact at every step.
  unsigned long long n = 1;
  for (int k = 1; k <= order; ++k) {
    n = n * static_cast<unsigned long long>(dim + k) / static_cast<unsigned long long>(k);
    if (n > cap) throw CapacityError("basis size exceeds cap of " + std::to_string(cap));
  }
  return static_cast<std::size_t>(n);
}

/// Ordered multi-index set.  Ordering is graded lexicographic: by total
/// degree, then by exponents compared from the first variable with larger
/// exponents first (so degree one runs e_1, e_2, ..., e_d).  Position 0 is
/// always the constant.
class MultiIndexBasis {
 public:
  // Nonzero (variable, degree) pairs of one index.
  using Term = std::vector<std::pair<int, int>>;

  static constexpr std::size_t default_cap = 1'000'000;

  MultiIndexBasis(int dim, int order, BasisMode mode = BasisMode::full,
                  std::size_t cap = default_cap)
      : dim_(dim), order_(order), mode_(mode) {
    if (dim < 1) throw InvalidArgument("MultiIndexBasis: dimension must be >= 1");
    if (order < 0) throw InvalidArgument("MultiIndexBasis: order must be >= 0");
    if (order > 255) throw CapacityError("MultiIndexBasis: order above 255 is not supported");
    if (mode == BasisMode::full) {
      indices_.reserve(full_basis_size(dim, order, cap));
      MultiIndex alpha(static_cast<std::size_t>(dim), 0);
      for (int deg = 0; deg <= order; ++deg) fill_degree(alpha, 0, deg);
    } else {
      const std::size_t n = 1 + static_cast<std::size_t>(dim) * static_cast<std::size_t>(order);
      if (n > cap) throw CapacityError("basis size exceeds cap of " + std::to_string(cap));
      indices_.reserve(n);
      indices_.emplace_back(static_cast<std::size_t>(dim), 0);
      for (int deg = 1; deg <= order; ++deg) {
        for (int i = 0; i < dim; ++i) {
          MultiIndex a(static_cast<std::size_t>(dim), 0);
          a[static_cast<std::size_t>(i)] = deg;
          indices_.push_back(std::move(a));
        }
      }
    }
    terms_.reserve(indices_.size());
    lookup_.reserve(indices_.size());
    for (std::size_t n = 0; n < indices_.size(); ++n) {
      Term t;
      for (int i = 0; i < dim_; ++i)
        if (indices_[n][static_cast<std::size_t>(i)] != 0)
          t.emplace_back(i, indices_[n][static_cast<std::size_t>(i)]);
      terms_.push_back(std::move(t));
      lookup_.emplace(key(indices_[n]), n);
    }
  }

  int dim() const { return dim_; }
  int order() const { return order_; }
  BasisMode mode() const { return mode_; }
  std::size_t size() const { return indices_.size(); }
  const MultiIndex& operator[](std::size_t n) const { return indices_[n]; }
  const std::vector<MultiIndex>& indices() const { return indices_; }
  const Term& term(std::size_t n) const { return terms_[n]; }

  // Position of `alpha` in the basis, or -1 when absent.
  std::ptrdiff_t find(const MultiIndex& alpha) const {
    if (alpha.size() != static_cast<std::size_t>(dim_)) return -1;
    for (int a : alpha)
      if (a < 0 || a > 255) return -1;
    auto it = lookup_.find(key(alpha));
    return it == lookup_.end() ? -1 : static_cast<std::ptrdiff_t>(it->second);
  }

  static int total_degree(const MultiIndex& alpha) {
    int s = 0;
    for (int a : alpha) s += a;
    return s;
  }

 private:
  static std::string key(const MultiIndex& alpha) {
    std::string k(alpha.size(), '\0');
    for (std::size_t i = 0; i < alpha.size(); ++i) k[i] = static_cast<char>(alpha[i]);
    return k;
  }

  // Appends every index with exponents fixed before `pos` and `remaining`
  // degree left to distribute over positions pos..d-1, larger first.
  void fill_degree(MultiIndex& alpha, int pos, int remaining) {
    if (pos == dim_ - 1) {
      alpha[static_cast<std::size_t>(pos)] = remaining;
      indices_.push_back(alpha);
      alpha[static_cast<std::size_t>(pos)] = 0;
      return;
    }
    for (int a = remaining; a >= 0; --a) {
      alpha[static_cast<std::size_t>(pos)] = a;
      fill_degree(alpha, pos + 1, remaining - a);
    }
    alpha[static_cast<std::size_t>(pos)] = 0;
  }

  int dim_;
  int order_;
  BasisMode mode_;
  std::vector<MultiIndex> indices_;
  std::vector<Term> terms_;
  std::unordered_map<std::string, std::size_t> lookup_;
};

inline MultiIndexBasis enumerate_basis(int dim, int order, BasisMode mode = BasisMode::full,
                                       std::size_t cap = MultiIndexBasis::default_cap) {
  return MultiIndexBasis(dim, order, mode, cap);
}

// psi_n(x) = He_n(x) / sqrt(n!), He_{n+1} = x He_n - n He_{n-1}.
inline double eval_univariate(int n, double x) {
  if (n < 0) throw InvalidArgument("eval_univariate: negative degree");
  if (n == 0) return 1.0;
  // Normalized recurrence: psi_{k+1} = (x psi_k - sqrt(k) psi_{k-1}) / sqrt(k+1).
  double prev = 1.0;
  double cur = x;
  for (int k = 1; k < n; ++k) {
    const double next = (x * cur - std::sqrt(static_cast<double>(k)) * prev) /
                        std::sqrt(static_cast<double>(k + 1));
    prev = cur;
    cur = next;
  }
  return cur;
}

// Fills values[0..order] with psi_0(x)..psi_order(x).
inline void eval_univariate_all(int order, double x, double* values) {
  values[0] = 1.0;
  if (order >= 1) values[1] = x;
  for (int k = 1; k < order; ++k)
    values[k + 1] = (x * values[k] - std::sqrt(static_cast<double>(k)) * values[k - 1]) /
                    std::sqrt(static_cast<double>(k + 1));
}

/// Psi(q, n) = psi_{alpha_n}(points.row(q)).
inline Matrix measurement_matrix(const MultiIndexBasis& basis, const Matrix& points) {
  if (points.cols() != basis.dim())
    throw InvalidArgument("measurement_matrix: points have " + std::to_string(points.cols()) +
                          " columns, basis dimension is " + std::to_string(basis.dim()));
  const int p1 = basis.order() + 1;
  const Eigen::Index m = points.rows();
  const auto n = static_cast<Eigen::Index>(basis.size());
  Matrix psi(m, n);
  std::vector<double> table(static_cast<std::size_t>(basis.dim() * p1));
  for (Eigen::Index q = 0; q < m; ++q) {
    for (int i = 0; i < basis.dim(); ++i) eval_univariate_all(basis.order(), points(q, i), &table[static_cast<std::size_t>(i * p1)]);
    for (Eigen::Index k = 0; k < n; ++k) {
      double v = 1.0;
      for (const auto& [var, deg] : basis.term(static_cast<std::size_t>(k)))
        v *= table[static_cast<std::size_t>(var * p1 + deg)];
      psi(q, k) = v;
    }
  }
  return psi;
}

struct KernelEntry {
  std::size_t row;
  std::size_t col;
  double value;
};

/// Sparse N x N matrix K_ij with at most one nonzero per row.
struct KernelMatrix {
  int i = 0;
  int j = 0;
  std::size_t size = 0;
  std::vector<KernelEntry> entries;  // sorted by row

  // x^T K y
  double bilinear(const Vector& x, const Vector& y) const {
    double s = 0.0;
    for (const KernelEntry& e : entries)
      s += x[static_cast<Eigen::Index>(e.row)] * e.value * y[static_cast<Eigen::Index>(e.col)];
    return s;
  }

  Matrix dense() const {
    Matrix m = Matrix::Zero(static_cast<Eigen::Index>(size), static_cast<Eigen::Index>(size));
    for (const KernelEntry& e : entries)
      m(static_cast<Eigen::Index>(e.row), static_cast<Eigen::Index>(e.col)) = e.value;
    return m;
  }
};

/// (K_ij)_kl for zero-based dimensions i, j.  Uses
/// d psi_alpha / d xi_i = sqrt(alpha_i) psi_{alpha - e_i}; the only
/// nonzero in row k sits at alpha_l = alpha_k - e_i + e_j with value
/// sqrt((alpha_k)_i (alpha_l)_j), which for i == j is the diagonal entry
/// (alpha_k)_i.
inline KernelMatrix grad_kernel(const MultiIndexBasis& basis, int i, int j) {
  if (i < 0 || j < 0 || i >= basis.dim() || j >= basis.dim())
    throw InvalidArgument("grad_kernel: dimension index out of range");
  KernelMatrix k{i, j, basis.size(), {}};
  MultiIndex beta;
  for (std::size_t row = 0; row < basis.size(); ++row) {
    const MultiIndex& alpha = basis[row];
    const int ai = alpha[static_cast<std::size_t>(i)];
    if (ai == 0) continue;
    if (i == j) {
      k.entries.push_back({row, row, static_cast<double>(ai)});
      continue;
    }
    beta = alpha;
    beta[static_cast<std::size_t>(i)] -= 1;
    beta[static_cast<std::size_t>(j)] += 1;
    const std::ptrdiff_t col = basis.find(beta);
    if (col < 0) continue;
    k.entries.push_back({row, static_cast<std::size_t>(col),
                         std::sqrt(static_cast<double>(ai) * beta[static_cast<std::size_t>(j)])});
  }
  return k;
}

// All d*d kernels, row-major in (i, j).
inline std::vector<KernelMatrix> all_grad_kernels(const MultiIndexBasis& basis) {
  std::vector<KernelMatrix> out;
  out.reserve(static_cast<std::size_t>(basis.dim() * basis.dim()));
  for (int i = 0; i < basis.dim(); ++i)
    for (int j = 0; j < basis.dim(); ++j) out.push_back(grad_kernel(basis, i, j));
  return out;
}

}  // namespace rpce
