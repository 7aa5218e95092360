#pragma once

// Sparse Hermite surrogates with input rotation.
//
// A SurrogateModel evaluates
//
//   u_g(xi) = sum_n c_n psi_n(A (Ahat xi))
//
// where Ahat (optional, d_tilde x d, orthonormal rows) reduces the input
// dimension and A is an accumulated orthogonal rotation.  The fitting
// routines alternate between an l1 solve for the coefficients and a
// rotation taken from the eigenvectors of the gradient matrix
// G_ij = E[du/dxi_i du/dxi_j] of the current expansion.

#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "rpce/error.hpp"
#include "rpce/hermite.hpp"
#include "rpce/numerics.hpp"
#include "rpce/sir.hpp"
#include "rpce/sparse_recovery.hpp"

namespace rpce {

struct IterationRecord {
  double epsilon = 0.0;
  double rotation_distance = std::numeric_limits<double>::quiet_NaN();  // |sum|U_ij| - d|
  double residual = 0.0;
  double validation = std::numeric_limits<double>::quiet_NaN();
};

struct SurrogateModel {
  std::shared_ptr<const MultiIndexBasis> basis;
  Vector coeffs;
  std::optional<Matrix> reduction;  // Ahat
  Matrix rotation;                  // A
  std::vector<IterationRecord> history;
  bool converged = true;

  int input_dim() const { return reduction ? static_cast<int>(reduction->cols()) : basis->dim(); }
  int reduced_dim() const { return basis->dim(); }
};

enum class AdmInit { identity, sir, given };

struct AdmOptions {
  double theta = 0.0;  // <= 0: 0.25 d for d <= 30, else 0.65 d
  int max_rotations = 9;
  int eps_grid_per_iter = 3;
  bool reweighted = false;
  int reweight_iters = 2;
  std::optional<double> reweight_delta;  // absolute; overrides the relative rule
  double reweight_delta_rel = 1e-4;      // delta = rel * ||c||_inf of the previous pass
  double split_fraction = 0.8;
  int cv_repeats = 1;
  // Reconstruction-set tolerances tried by the first cross-validation,
  // as multiples of ||u||; empty gives six values over [1e-4, 1].
  std::vector<double> cv_relative_candidates;
  int slices = 0;  // SIR slice count, 0 for default_slice_count
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
  BpdnOptions bpdn;
};

inline double default_theta(int d) { return d <= 30 ? 0.25 * d : 0.65 * d; }

// Entrywise l1 distance of an orthogonal matrix from the permutations.
inline double rotation_distance(const Matrix& u) {
  return std::abs(u.cwiseAbs().sum() - static_cast<double>(u.rows()));
}

/// G_ij = c^T K_ij c from precomputed kernels (row-major in (i, j)).
inline Matrix gradient_matrix(const Vector& coeffs, const std::vector<KernelMatrix>& kernels, int dim) {
  if (kernels.size() != static_cast<std::size_t>(dim * dim))
    throw InvalidArgument("gradient_matrix: expected d*d kernels");
  Matrix g(dim, dim);
  for (int i = 0; i < dim; ++i)
    for (int j = 0; j < dim; ++j) {
      const KernelMatrix& k = kernels[static_cast<std::size_t>(i * dim + j)];
      if (k.size != static_cast<std::size_t>(coeffs.size()))
        throw InvalidArgument("gradient_matrix: coefficient vector does not match the kernel basis");
      g(i, j) = k.bilinear(coeffs, coeffs);
    }
  return 0.5 * (g + g.transpose());
}

/// Same quantity without materializing the kernels: with
/// g_i[m] = sum_k c_k sqrt((alpha_k)_i) [alpha_k - e_i = alpha_m] the
/// derivative coefficients, G_ij = g_i . g_j.  Every alpha - e_i of a full
/// or no-interaction basis is itself in the basis.
inline Matrix gradient_matrix(const Vector& coeffs, const MultiIndexBasis& basis) {
  if (static_cast<std::size_t>(coeffs.size()) != basis.size())
    throw InvalidArgument("gradient_matrix: coefficient vector does not match the basis");
  const int d = basis.dim();
  Matrix gcoef = Matrix::Zero(static_cast<Eigen::Index>(basis.size()), d);
  MultiIndex lower;
  for (std::size_t k = 0; k < basis.size(); ++k) {
    const double ck = coeffs[static_cast<Eigen::Index>(k)];
    if (ck == 0.0) continue;
    for (const auto& [var, deg] : basis.term(k)) {
      lower = basis[k];
      lower[static_cast<std::size_t>(var)] -= 1;
      const std::ptrdiff_t m = basis.find(lower);
      if (m < 0) throw InvalidArgument("gradient_matrix: basis is not closed under lowering");
      gcoef(m, var) += ck * std::sqrt(static_cast<double>(deg));
    }
  }
  const Matrix g = gcoef.transpose() * gcoef;
  return 0.5 * (g + g.transpose());
}

/// u_g at each row of `points`.
inline Vector evaluate(const SurrogateModel& model, const Matrix& points) {
  if (points.cols() != model.input_dim())
    throw InvalidArgument("evaluate: points have " + std::to_string(points.cols()) + " columns, model expects " +
                          std::to_string(model.input_dim()));
  Vector out(points.rows());
  constexpr Eigen::Index block = 4096;
  for (Eigen::Index start = 0; start < points.rows(); start += block) {
    const Eigen::Index len = std::min(block, points.rows() - start);
    Matrix x = points.middleRows(start, len);
    if (model.reduction) x = x * model.reduction->transpose();
    const Matrix eta = x * model.rotation.transpose();
    out.segment(start, len) = measurement_matrix(*model.basis, eta) * model.coeffs;
  }
  return out;
}

struct Moments {
  double mean = 0.0;
  double variance = 0.0;
};

// Closed form by orthonormality: mean is the constant coefficient, variance
// the sum of squares of the rest.
inline Moments moments(const SurrogateModel& model) {
  Moments mo;
  if (model.coeffs.size() == 0) return mo;
  mo.mean = model.coeffs[0];
  mo.variance = model.coeffs.tail(model.coeffs.size() - 1).squaredNorm();
  return mo;
}

namespace detail {

inline std::vector<double> eps_grid(double eps, int count) {
  if (count <= 1) return {eps};
  if (count == 2) return {eps / 5.0, eps};
  if (count == 3) return {eps / 5.0, eps / 2.0, eps};
  std::vector<double> g;
  for (int i = 0; i < count; ++i) g.push_back(eps * std::pow(5.0, -1.0 + static_cast<double>(i) / (count - 1)));
  return g;
}

inline RecoveryResult solve_once(const Matrix& psi, const Vector& u, double eps, const AdmOptions& opts) {
  if (opts.reweighted)
    return solve_reweighted(psi, u, eps, opts.reweight_iters, opts.reweight_delta, opts.bpdn, opts.reweight_delta_rel);
  return solve_bpdn({psi, u, eps, {}}, opts.bpdn);
}

// Solve at eps; when eps is below the least-squares floor (overdetermined
// systems) lift it just above that floor and retry once.
inline RecoveryResult solve_feasible(const Matrix& psi, const Vector& u, double& eps, const AdmOptions& opts) {
  try {
    return solve_once(psi, u, eps, opts);
  } catch (const Infeasible&) {
    const Vector ls = psi.colPivHouseholderQr().solve(u);
    const double floor = (psi * ls - u).norm();
    eps = std::max(eps, floor * (1.0 + 1e-6) + 1e-12 * u.norm());
    return solve_once(psi, u, eps, opts);
  }
}

// Cross-validation on a split that is identical for every call within one
// fit (fresh copy of the same stream), so validation residuals of
// different iterations compare like for like.  `full_candidates` are
// full-sample tolerances; they are mapped to the reconstruction size.
// Candidates below the least-squares floor of the reconstruction rows are
// raised to it; a grid that still fails is lifted by 100x once.
inline CvResult select_epsilon(const Matrix& psi, const Vector& u, std::vector<double> full_candidates,
                               const AdmOptions& opts) {
  const auto m = static_cast<double>(psi.rows());
  const double mr = std::clamp(std::round(opts.split_fraction * m), 1.0, m - 1.0);
  for (int attempt = 0; attempt < 2; ++attempt) {
    std::vector<double> cand_r;
    for (double e : full_candidates) cand_r.push_back(e * std::sqrt(mr / m));
    RngStream split(opts.seed, mix_ids(opts.stream, 0x5EED5u));
    try {
      return cross_validate_epsilon(psi, u, cand_r, opts.split_fraction, split, opts.cv_repeats, opts.bpdn, true);
    } catch (const Infeasible&) {
      if (attempt == 1) throw;
      for (double& e : full_candidates) e *= 100.0;
    }
  }
  throw Infeasible("select_epsilon: unreachable");
}

inline std::vector<double> initial_candidates(const Vector& u, const AdmOptions& opts) {
  const double unorm = u.norm();
  if (opts.cv_relative_candidates.empty()) return default_cv_candidates(unorm);
  std::vector<double> out;
  for (double r : opts.cv_relative_candidates) out.push_back(r * unorm);
  return out;
}

inline void check_training(const Matrix& samples, const Vector& outputs, int dim) {
  if (samples.rows() != outputs.size()) throw InvalidArgument("training set: samples and outputs disagree in length");
  if (samples.cols() != dim)
    throw InvalidArgument("training set: samples have " + std::to_string(samples.cols()) +
                          " columns, basis dimension is " + std::to_string(dim));
  if (samples.rows() < 2) throw InvalidArgument("training set: need at least two samples");
}

}  // namespace detail

/// Plain (or re-weighted) l1 fit with eps from cross-validation; A = I.
inline SurrogateModel fit_l1(const Matrix& samples, const Vector& outputs,
                             std::shared_ptr<const MultiIndexBasis> basis, const AdmOptions& opts = {}) {
  detail::check_training(samples, outputs, basis->dim());
  SurrogateModel model;
  model.basis = basis;
  model.rotation = Matrix::Identity(basis->dim(), basis->dim());
  if (outputs.norm() == 0.0) {
    model.coeffs = Vector::Zero(static_cast<Eigen::Index>(basis->size()));
    model.history.push_back({0.0, std::numeric_limits<double>::quiet_NaN(), 0.0, 0.0});
    return model;
  }
  const Matrix psi = measurement_matrix(*basis, samples);
  const CvResult cv = detail::select_epsilon(psi, outputs, detail::initial_candidates(outputs, opts), opts);
  double eps = cv.epsilon;
  RecoveryResult rec = detail::solve_feasible(psi, outputs, eps, opts);
  model.coeffs = std::move(rec.coeffs);
  model.converged = rec.converged;
  model.history.push_back({eps, std::numeric_limits<double>::quiet_NaN(), rec.residual_norm, cv.validation});
  return model;
}

/// Alternating direction fit.  `init` picks the first rotation:
///  - identity: warm-start l1 fit, first rotation from its gradient matrix;
///  - sir: first rotation U = Ahat^T from a full-dimension SIR fit, no warm start;
///  - given: first rotation A = `initial_rotation` (U = A^T).
/// Each iteration rotates the samples, picks eps from {eps/5, eps/2, eps}
/// around the previous tolerance by cross-validation, solves for the
/// coefficients and stops once |sum|U_ij| - d| < theta.  If that never
/// happens within max_rotations the iterate with the smallest validation
/// residual is returned and the model is flagged non-converged.
inline SurrogateModel fit_adm(const Matrix& samples, const Vector& outputs,
                              std::shared_ptr<const MultiIndexBasis> basis, const AdmOptions& opts = {},
                              AdmInit init = AdmInit::identity, const Matrix* initial_rotation = nullptr) {
  const int d = basis->dim();
  detail::check_training(samples, outputs, d);
  if (opts.max_rotations < 1) throw InvalidArgument("fit_adm: max_rotations must be >= 1");
  const double theta = opts.theta > 0.0 ? opts.theta : default_theta(d);

  struct Iterate {
    Matrix rotation;
    Vector coeffs;
    double validation;
    bool solver_converged;
  };
  std::vector<Iterate> iterates;
  std::vector<IterationRecord> history;

  Matrix eta = samples;
  Matrix acc = Matrix::Identity(d, d);
  Matrix u_next;
  double eps = 0.0;
  bool have_eps = false;

  if (outputs.norm() == 0.0) {
    SurrogateModel zero;
    zero.basis = basis;
    zero.coeffs = Vector::Zero(static_cast<Eigen::Index>(basis->size()));
    zero.rotation = acc;
    zero.history.push_back({0.0, 0.0, 0.0, 0.0});
    return zero;
  }

  switch (init) {
    case AdmInit::identity: {
      const Matrix psi = measurement_matrix(*basis, eta);
      const CvResult cv = detail::select_epsilon(psi, outputs, detail::initial_candidates(outputs, opts), opts);
      eps = cv.epsilon;
      RecoveryResult rec = detail::solve_feasible(psi, outputs, eps, opts);
      have_eps = true;
      history.push_back({eps, std::numeric_limits<double>::quiet_NaN(), rec.residual_norm, cv.validation});
      iterates.push_back({acc, rec.coeffs, cv.validation, rec.converged});
      u_next = sym_eigen(gradient_matrix(rec.coeffs, *basis)).eigenvectors;
      break;
    }
    case AdmInit::sir: {
      const int h = opts.slices > 0 ? opts.slices : default_slice_count(samples.rows());
      u_next = sir_fit(samples, outputs, h).directions.transpose();
      break;
    }
    case AdmInit::given: {
      if (!initial_rotation || initial_rotation->rows() != d || initial_rotation->cols() != d)
        throw InvalidArgument("fit_adm: given init needs a d x d rotation");
      if ((*initial_rotation * initial_rotation->transpose() - Matrix::Identity(d, d)).cwiseAbs().maxCoeff() > 1e-10)
        throw InvalidArgument("fit_adm: given init is not orthogonal");
      u_next = initial_rotation->transpose();
      break;
    }
  }

  bool stopped = false;
  std::string last_error;
  for (int l = 1; l <= opts.max_rotations; ++l) {
    eta = eta * u_next;
    acc = u_next.transpose() * acc;
    const double dist = rotation_distance(u_next);
    const Matrix psi = measurement_matrix(*basis, eta);
    RecoveryResult rec;
    CvResult cv;
    try {
      cv = have_eps ? detail::select_epsilon(psi, outputs, detail::eps_grid(eps, opts.eps_grid_per_iter), opts)
                    : detail::select_epsilon(psi, outputs, detail::initial_candidates(outputs, opts), opts);
      double e = cv.epsilon;
      rec = detail::solve_feasible(psi, outputs, e, opts);
      eps = e;
      have_eps = true;
    } catch (const Error& ex) {
      last_error = ex.what();
      history.push_back({eps, dist, std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()});
      break;
    }
    history.push_back({eps, dist, rec.residual_norm, cv.validation});
    iterates.push_back({acc, rec.coeffs, cv.validation, rec.converged});
    if (dist < theta) {
      stopped = true;
      break;
    }
    if (l == opts.max_rotations) break;
    u_next = sym_eigen(gradient_matrix(rec.coeffs, *basis)).eigenvectors;
  }

  if (iterates.empty()) throw NumericalFailure("fit_adm: every iteration failed: " + last_error);

  std::size_t pick = iterates.size() - 1;
  if (!stopped) {
    for (std::size_t i = 0; i < iterates.size(); ++i)
      if (iterates[i].validation < iterates[pick].validation) pick = i;
  }
  SurrogateModel model;
  model.basis = std::move(basis);
  model.coeffs = iterates[pick].coeffs;
  model.rotation = iterates[pick].rotation;
  model.history = std::move(history);
  model.converged = stopped && iterates[pick].solver_converged;
  return model;
}

/// SIR reduction to d_tilde variables followed by an identity-initialized
/// ADM fit over a fresh (d_tilde, order) basis.
inline SurrogateModel fit_sadmdr(const Matrix& samples, const Vector& outputs, int d_tilde, int order,
                                 const AdmOptions& opts = {}, BasisMode mode = BasisMode::full) {
  const auto d = static_cast<int>(samples.cols());
  if (d_tilde < 1 || d_tilde >= d)
    throw InvalidArgument("fit_sadmdr: reduced dimension must satisfy 1 <= d_tilde < d");
  const int h = opts.slices > 0 ? opts.slices : default_slice_count(samples.rows());
  const Matrix ahat = reduce(sir_fit(samples, outputs, h), d_tilde);
  const Matrix reduced = samples * ahat.transpose();
  auto basis = std::make_shared<const MultiIndexBasis>(d_tilde, order, mode);
  SurrogateModel model = fit_adm(reduced, outputs, basis, opts, AdmInit::identity);
  model.reduction = ahat;
  return model;
}

struct GradientReduction {
  Matrix map;  // d_tilde x input_dim, orthonormal rows
  Vector eigenvalues;
  bool rank_deficient = false;
};

/// Reduction map from the d_tilde leading eigenvectors of the model's
/// gradient matrix, expressed in the model's input coordinates (the
/// eigenvector rows are composed with A and, when present, Ahat).
inline GradientReduction reduce_via_gradient(const SurrogateModel& model, int d_tilde) {
  const int dm = model.reduced_dim();
  if (d_tilde < 1 || d_tilde > dm) throw InvalidArgument("reduce_via_gradient: d_tilde out of range");
  const SymEigen eig = sym_eigen(gradient_matrix(model.coeffs, *model.basis));
  GradientReduction out;
  out.eigenvalues = eig.eigenvalues;
  Matrix rows = eig.eigenvectors.leftCols(d_tilde).transpose() * model.rotation;
  if (model.reduction) rows = rows * *model.reduction;
  out.map = std::move(rows);
  const double top = eig.eigenvalues[0];
  out.rank_deficient = !(top > 0.0) || eig.eigenvalues[d_tilde - 1] <= 1e-12 * top;
  return out;
}

/// Gradient-based alternative to fit_sadmdr: (re-weighted) l1 fit on the
/// full basis, reduction from its gradient matrix, then ADM on the reduced
/// inputs.
inline SurrogateModel fit_gradient_reduced(const Matrix& samples, const Vector& outputs,
                                           std::shared_ptr<const MultiIndexBasis> full_basis, int d_tilde,
                                           int order, const AdmOptions& opts = {},
                                           BasisMode mode = BasisMode::full) {
  const SurrogateModel base = fit_l1(samples, outputs, std::move(full_basis), opts);
  const GradientReduction red = reduce_via_gradient(base, d_tilde);
  const Matrix reduced = samples * red.map.transpose();
  auto basis = std::make_shared<const MultiIndexBasis>(d_tilde, order, mode);
  SurrogateModel model = fit_adm(reduced, outputs, basis, opts, AdmInit::identity);
  model.reduction = red.map;
  return model;
}

}  // namespace rpce
