#pragma once

// Benchmark quantities of interest, all driven by i.i.d. N(0,1) inputs:
//   ridge        cubic ridge function of sum(xi)
//   compressible random Hermite expansion with |c_n| <= n^-1.5
//   kdv          KdV one-soliton value under KL-expanded additive forcing
//   groundwater  Darcy head under a log-normal KL transmissivity field
//   highdim      exp(2 - sum sin(i) xi_i / i) in 500 variables

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "rpce/error.hpp"
#include "rpce/hermite.hpp"
#include "rpce/numerics.hpp"

namespace rpce {

// ---------------------------------------------------------------- ridge --

// s + s^2/4 + s^3/40 with s = sum(xi).
inline double ridge_eval(std::span<const double> xi) {
  const double s = std::accumulate(xi.begin(), xi.end(), 0.0);
  return s + 0.25 * s * s + 0.025 * s * s * s;
}

// Same function written in eta_1 = sum(xi) / sqrt(d).
inline double ridge_reduced(double eta1, int d) {
  const double rd = std::sqrt(static_cast<double>(d));
  return rd * eta1 + 0.25 * d * eta1 * eta1 + 0.025 * d * rd * eta1 * eta1 * eta1;
}

// ---------------------------------------------------------- compressible --

// Row of psi_n(xi) for one point.
inline Vector basis_row(const MultiIndexBasis& basis, std::span<const double> xi) {
  Eigen::Map<const Eigen::RowVectorXd> row(xi.data(), static_cast<Eigen::Index>(xi.size()));
  return measurement_matrix(basis, Matrix(row)).row(0).transpose();
}

struct CompressibleFunction {
  std::shared_ptr<const MultiIndexBasis> basis;
  Vector coeffs;

  double operator()(std::span<const double> xi) const { return basis_row(*basis, xi).dot(coeffs); }
};

/// c_n = zeta_n / n^1.5 with zeta_n ~ U[-1, 1], n the 1-based basis position.
inline CompressibleFunction compressible_make(int dim, int order, RngStream& rng) {
  CompressibleFunction f;
  f.basis = std::make_shared<const MultiIndexBasis>(dim, order);
  const auto n = static_cast<Eigen::Index>(f.basis->size());
  f.coeffs.resize(n);
  for (Eigen::Index k = 0; k < n; ++k) f.coeffs[k] = rng.uniform(-1.0, 1.0) / std::pow(static_cast<double>(k + 1), 1.5);
  return f;
}

// -------------------------------------------------------------------- KL --

/// Analytic eigenpairs of C(t, t') = exp(-|t - t'| / l_c) on [lo, hi].
/// With a the half length, s = t - centre and c = 1 / l_c, the even family
/// solves c cos(w a) - w sin(w a) = 0 with phi = cos(w s) / sqrt(a + sin(2wa)/(2w)),
/// the odd family solves w cos(w a) + c sin(w a) = 0 with
/// phi = sin(w s) / sqrt(a - sin(2wa)/(2w)); lambda = 2c / (w^2 + c^2) for
/// both.  Roots alternate even/odd, one per half-period bracket.
struct KlExpansion {
  double corr_length = 0.0;
  double lo = 0.0;
  double hi = 1.0;
  std::vector<double> eigenvalues;  // descending
  std::vector<double> omegas;
  std::vector<char> even;
  std::vector<double> norms;  // multiplies cos/sin

  std::size_t terms() const { return eigenvalues.size(); }
  double domain_length() const { return hi - lo; }

  double eigenfunction(std::size_t k, double t) const {
    const double s = t - 0.5 * (lo + hi);
    return norms[k] * (even[k] ? std::cos(omegas[k] * s) : std::sin(omegas[k] * s));
  }
};

inline KlExpansion kl_1d(double corr_length, std::size_t terms, double lo = 0.0, double hi = 1.0) {
  if (!(corr_length > 0.0)) throw InvalidArgument("kl_1d: correlation length must be positive");
  if (terms < 1) throw InvalidArgument("kl_1d: need at least one term");
  if (!(hi > lo)) throw InvalidArgument("kl_1d: empty domain");
  const double a = 0.5 * (hi - lo);
  const double c = 1.0 / corr_length;
  const std::size_t per_family = terms / 2 + 1;

  std::vector<Bracket> even_br, odd_br;
  for (std::size_t k = 0; k < per_family; ++k) {
    const double kp = static_cast<double>(k) * M_PI;
    even_br.push_back({kp / a, (kp + 0.5 * M_PI) / a});
    odd_br.push_back({(kp + 0.5 * M_PI) / a, (kp + M_PI) / a});
  }
  const std::vector<double> even_w =
      find_roots_increasing([&](double w) { return c * std::cos(w * a) - w * std::sin(w * a); }, even_br);
  const std::vector<double> odd_w =
      find_roots_increasing([&](double w) { return w * std::cos(w * a) + c * std::sin(w * a); }, odd_br);

  KlExpansion kl;
  kl.corr_length = corr_length;
  kl.lo = lo;
  kl.hi = hi;
  for (std::size_t k = 0; kl.omegas.size() < terms; ++k) {
    for (int fam = 0; fam < 2 && kl.omegas.size() < terms; ++fam) {
      const bool ev = fam == 0;
      const double w = ev ? even_w[k] : odd_w[k];
      kl.omegas.push_back(w);
      kl.even.push_back(ev ? 1 : 0);
      kl.eigenvalues.push_back(2.0 * c / (w * w + c * c));
      const double sw = std::sin(2.0 * w * a) / (2.0 * w);
      kl.norms.push_back(1.0 / std::sqrt(ev ? a + sw : a - sw));
    }
  }
  return kl;
}

// ------------------------------------------------------------------- KdV --

/// u(6, 1) = sigma sum A_i xi_i - 2 sech^2(2 + 6 sigma sum B_i xi_i) with
/// A_i = sqrt(lambda_i) int_0^1 phi_i and
/// B_i = sqrt(lambda_i) int_0^1 int_0^z phi_i = sqrt(lambda_i) int_0^1 (1 - y) phi_i(y) dy.
class KdvModel {
 public:
  explicit KdvModel(std::size_t dim = 100, double sigma = 0.4, double corr_length = 0.1)
      : sigma_(sigma), kl_(kl_1d(corr_length, dim)) {
    a_.resize(static_cast<Eigen::Index>(dim));
    b_.resize(static_cast<Eigen::Index>(dim));
    using boost::math::quadrature::gauss_kronrod;
    for (std::size_t i = 0; i < dim; ++i) {
      const double sl = std::sqrt(kl_.eigenvalues[i]);
      auto phi = [&](double y) { return kl_.eigenfunction(i, y); };
      auto wphi = [&](double y) { return (1.0 - y) * kl_.eigenfunction(i, y); };
      a_[static_cast<Eigen::Index>(i)] = sl * gauss_kronrod<double, 31>::integrate(phi, 0.0, 1.0, 20, 1e-12);
      b_[static_cast<Eigen::Index>(i)] = sl * gauss_kronrod<double, 31>::integrate(wphi, 0.0, 1.0, 20, 1e-12);
    }
  }

  int dim() const { return static_cast<int>(a_.size()); }
  double sigma() const { return sigma_; }
  const Vector& a() const { return a_; }
  const Vector& b() const { return b_; }
  const KlExpansion& kl() const { return kl_; }

  // (sum A_i xi_i, sum B_i xi_i)
  std::pair<double, double> projections(std::span<const double> xi) const {
    check(xi);
    Eigen::Map<const Vector> x(xi.data(), static_cast<Eigen::Index>(xi.size()));
    return {a_.dot(x), b_.dot(x)};
  }

  // -2 sech^2(2 + 6 sigma sum B_i xi_i), always in [-2, 0].
  double soliton_term(double b_proj) const {
    const double ch = std::cosh(2.0 + 6.0 * sigma_ * b_proj);
    return -2.0 / (ch * ch);
  }

  double operator()(std::span<const double> xi) const {
    const auto [pa, pb] = projections(xi);
    return sigma_ * pa + soliton_term(pb);
  }

 private:
  void check(std::span<const double> xi) const {
    if (static_cast<Eigen::Index>(xi.size()) != a_.size()) throw InvalidArgument("kdv: wrong input dimension");
  }

  double sigma_;
  KlExpansion kl_;
  Vector a_;
  Vector b_;
};

// ----------------------------------------------------------- groundwater --

/// One axis of a separable exponential covariance. Either the analytic
/// eigenpairs on [0, L], or the trapezoid Nystrom eigenpairs on the nodes
/// t_i = i L / (n - 1) with linear interpolation between nodes.
struct AxisKl {
  double length = 0.0;
  std::vector<double> eigenvalues;
  std::optional<KlExpansion> analytic;
  double spacing = 0.0;
  Matrix nodal;  // nodes x terms

  double eigenfunction(std::size_t k, double t) const {
    if (analytic) return analytic->eigenfunction(k, t);
    const Eigen::Index last = nodal.rows() - 1;
    const double f = std::clamp(t / spacing, 0.0, static_cast<double>(last));
    const Eigen::Index i = std::min(static_cast<Eigen::Index>(f), last - 1);
    const double w = f - static_cast<double>(i);
    const auto c = static_cast<Eigen::Index>(k);
    return (1.0 - w) * nodal(i, c) + w * nodal(i + 1, c);
  }
};

inline AxisKl axis_kl_analytic(double corr_length, double length, std::size_t terms) {
  AxisKl ax;
  ax.length = length;
  ax.analytic = kl_1d(corr_length, terms, 0.0, length);
  ax.eigenvalues = ax.analytic->eigenvalues;
  return ax;
}

inline AxisKl axis_kl_grid(double corr_length, double length, int nodes, std::size_t terms) {
  if (nodes < 2) throw InvalidArgument("axis_kl_grid: need two nodes");
  if (terms > static_cast<std::size_t>(nodes)) throw InvalidArgument("axis_kl_grid: more terms than nodes");
  AxisKl ax;
  ax.length = length;
  ax.spacing = length / (nodes - 1);
  Vector w = Vector::Constant(nodes, ax.spacing);
  w[0] = w[nodes - 1] = 0.5 * ax.spacing;
  const Vector root = w.cwiseSqrt();
  Matrix k(nodes, nodes);
  for (int i = 0; i < nodes; ++i)
    for (int j = 0; j < nodes; ++j)
      k(i, j) = root[i] * root[j] * std::exp(-std::abs(i - j) * ax.spacing / corr_length);
  const SymEigen eig = sym_eigen(k);
  ax.nodal.resize(nodes, static_cast<Eigen::Index>(terms));
  for (std::size_t c = 0; c < terms; ++c) {
    const auto col = static_cast<Eigen::Index>(c);
    ax.eigenvalues.push_back(eig.eigenvalues[col]);
    ax.nodal.col(col) = eig.eigenvectors.col(col).cwiseQuotient(root);
  }
  return ax;
}

enum class KlMethod { grid, analytic };

/// Separable 2-D KL of exp(-|dx|/l_x - |dy|/l_y): the `terms` largest
/// products lambda_i^x lambda_j^y, ties by (i, j).
struct Kl2d {
  AxisKl x;
  AxisKl y;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::vector<double> eigenvalues;

  // Sum of all eigenvalues, the domain area for both methods.
  double trace() const { return x.length * y.length; }
  double eigenfunction(std::size_t k, double px, double py) const {
    return x.eigenfunction(pairs[k].first, px) * y.eigenfunction(pairs[k].second, py);
  }
};

inline Kl2d kl_2d_from_axes(AxisKl ax, AxisKl ay, std::size_t terms) {
  Kl2d kl;
  kl.x = std::move(ax);
  kl.y = std::move(ay);
  std::vector<std::pair<std::size_t, std::size_t>> all;
  for (std::size_t i = 0; i < kl.x.eigenvalues.size(); ++i)
    for (std::size_t j = 0; j < kl.y.eigenvalues.size(); ++j) all.emplace_back(i, j);
  auto prod = [&](const std::pair<std::size_t, std::size_t>& p) {
    return kl.x.eigenvalues[p.first] * kl.y.eigenvalues[p.second];
  };
  std::stable_sort(all.begin(), all.end(), [&](const auto& p, const auto& q) { return prod(p) > prod(q); });
  if (all.size() < terms) throw InvalidArgument("kl_2d: not enough axis modes");
  all.resize(terms);
  kl.pairs = all;
  for (const auto& p : all) kl.eigenvalues.push_back(prod(p));
  return kl;
}

// Analytic eigenpairs; terms + 1 modes per axis suffice for the top `terms`.
inline Kl2d kl_2d(double lx, double ly, double len_x, double len_y, std::size_t terms) {
  return kl_2d_from_axes(axis_kl_analytic(lx, len_x, terms + 1), axis_kl_analytic(ly, len_y, terms + 1), terms);
}

// Nystrom eigenpairs on an nx x ny node grid with trapezoid weights.
inline Kl2d kl_2d_grid(double lx, double ly, double len_x, double len_y, int nx, int ny, std::size_t terms) {
  const auto cap = [&](int n) { return std::min<std::size_t>(terms + 1, static_cast<std::size_t>(n)); };
  return kl_2d_from_axes(axis_kl_grid(lx, len_x, nx, cap(nx)), axis_kl_grid(ly, len_y, ny, cap(ny)), terms);
}

struct GroundwaterSpec {
  std::size_t terms = 100;
  double len_x = 2000.0;
  double len_y = 1000.0;
  double corr_x = 300.0;
  double corr_y = 300.0;
  double log_mean = 2.0;
  int nx = 61;
  int ny = 31;
  double head_south = 0.0;   // u(x, 0)
  double head_north = 10.0;  // u(x, Ly)
  double probe_x = 200.0;
  double probe_y = 500.0;
  KlMethod kl_method = KlMethod::grid;
};

/// Steady confined-aquifer flow div(T grad u) = 0 with fixed heads on
/// y = 0 and y = Ly and no flow through x = 0, x = Lx.  Vertex-centred
/// finite volumes on an nx x ny node grid, harmonic face transmissivity,
/// T = exp(S) with S = log_mean + sum sqrt(lambda_k) phi_k xi_k.
class GroundwaterModel {
 public:
  explicit GroundwaterModel(GroundwaterSpec spec = {})
      : spec_(spec) {
    if (spec_.nx < 2 || spec_.ny < 3) throw InvalidArgument("groundwater: grid too small");
    kl_ = spec_.kl_method == KlMethod::grid
              ? kl_2d_grid(spec_.corr_x, spec_.corr_y, spec_.len_x, spec_.len_y, spec_.nx, spec_.ny, spec_.terms)
              : kl_2d(spec_.corr_x, spec_.corr_y, spec_.len_x, spec_.len_y, spec_.terms);
    hx_ = spec_.len_x / (spec_.nx - 1);
    hy_ = spec_.len_y / (spec_.ny - 1);
    const int nodes = spec_.nx * spec_.ny;
    modes_.resize(nodes, static_cast<Eigen::Index>(spec_.terms));
    for (int j = 0; j < spec_.ny; ++j)
      for (int i = 0; i < spec_.nx; ++i)
        for (std::size_t k = 0; k < spec_.terms; ++k)
          modes_(node(i, j), static_cast<Eigen::Index>(k)) =
              std::sqrt(kl_.eigenvalues[k]) * kl_.eigenfunction(k, i * hx_, j * hy_);
  }

  int dim() const { return static_cast<int>(spec_.terms); }
  const Kl2d& kl() const { return kl_; }
  const GroundwaterSpec& spec() const { return spec_; }

  // log-transmissivity S at every node
  Vector log_field(std::span<const double> xi) const {
    if (xi.size() != spec_.terms) throw InvalidArgument("groundwater: wrong input dimension");
    Eigen::Map<const Vector> x(xi.data(), static_cast<Eigen::Index>(xi.size()));
    return (modes_ * x).array() + spec_.log_mean;
  }

  // Head at every node for a nodal transmissivity field.
  Vector solve_head(const Vector& transmissivity) const {
    const int nx = spec_.nx;
    const int ny = spec_.ny;
    const int rows = nx * (ny - 2);
    auto unknown = [&](int i, int j) { return (j - 1) * nx + i; };
    auto face = [&](int a, int b) {
      const double ta = transmissivity[a];
      const double tb = transmissivity[b];
      return 2.0 * ta * tb / (ta + tb);
    };
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(static_cast<std::size_t>(rows) * 5);
    Vector rhs = Vector::Zero(rows);
    for (int j = 1; j < ny - 1; ++j) {
      for (int i = 0; i < nx; ++i) {
        const int row = unknown(i, j);
        const double wx = (i == 0 || i == nx - 1) ? 0.5 * hx_ : hx_;
        double diag = 0.0;
        // east / west faces, height hy
        for (int di : {-1, 1}) {
          const int ii = i + di;
          if (ii < 0 || ii >= nx) continue;
          const double k = face(node(i, j), node(ii, j)) * hy_ / hx_;
          diag += k;
          trip.emplace_back(row, unknown(ii, j), -k);
        }
        // north / south faces, width wx
        for (int dj : {-1, 1}) {
          const int jj = j + dj;
          const double k = face(node(i, j), node(i, jj)) * wx / hy_;
          diag += k;
          if (jj == 0)
            rhs[row] += k * spec_.head_south;
          else if (jj == ny - 1)
            rhs[row] += k * spec_.head_north;
          else
            trip.emplace_back(row, unknown(i, jj), -k);
        }
        trip.emplace_back(row, row, diag);
      }
    }
    SparseMatrix a(rows, rows);
    a.setFromTriplets(trip.begin(), trip.end());
    const Vector inner = solve_sym_sparse(a, rhs, 1e-12);
    Vector head(nx * ny);
    for (int i = 0; i < nx; ++i) {
      head[node(i, 0)] = spec_.head_south;
      head[node(i, ny - 1)] = spec_.head_north;
      for (int j = 1; j < ny - 1; ++j) head[node(i, j)] = inner[unknown(i, j)];
    }
    return head;
  }

  // Bilinear interpolation of nodal values.
  double interpolate(const Vector& nodal, double px, double py) const {
    const double fx = std::clamp(px / hx_, 0.0, static_cast<double>(spec_.nx - 1));
    const double fy = std::clamp(py / hy_, 0.0, static_cast<double>(spec_.ny - 1));
    const int i0 = std::min(static_cast<int>(fx), spec_.nx - 2);
    const int j0 = std::min(static_cast<int>(fy), spec_.ny - 2);
    const double tx = fx - i0;
    const double ty = fy - j0;
    return (1 - tx) * (1 - ty) * nodal[node(i0, j0)] + tx * (1 - ty) * nodal[node(i0 + 1, j0)] +
           (1 - tx) * ty * nodal[node(i0, j0 + 1)] + tx * ty * nodal[node(i0 + 1, j0 + 1)];
  }

  double qoi_for_field(const Vector& transmissivity) const {
    return interpolate(solve_head(transmissivity), spec_.probe_x, spec_.probe_y);
  }

  double operator()(std::span<const double> xi) const {
    return qoi_for_field(log_field(xi).array().exp().matrix());
  }

 private:
  int node(int i, int j) const { return j * spec_.nx + i; }

  GroundwaterSpec spec_;
  Kl2d kl_;
  double hx_ = 0.0;
  double hy_ = 0.0;
  Matrix modes_;  // nodes x terms, sqrt(lambda_k) phi_k at each node
};

// -------------------------------------------------------------- highdim --

// exp(2 - sum_i sin(i) xi_i / i), i 1-based.
inline double highdim_eval(std::span<const double> xi) {
  double s = 0.0;
  for (std::size_t k = 0; k < xi.size(); ++k) {
    const double i = static_cast<double>(k + 1);
    s += std::sin(i) * xi[k] / i;
  }
  return std::exp(2.0 - s);
}

}  // namespace rpce
