#include <gtest/gtest.h>

#include <cmath>
#include <memory>

#include "oracles.hpp"
#include "rpce/problems.hpp"
#include "rpce/rotate.hpp"

using namespace rpce;

namespace {

std::shared_ptr<const MultiIndexBasis> make_basis(int d, int p, BasisMode mode = BasisMode::full) {
  return std::make_shared<const MultiIndexBasis>(d, p, mode);
}

Matrix random_orthogonal(std::uint64_t seed, int d) {
  RngStream rng(seed, 404);
  const Matrix g = sample_std_normal(rng, d, d);
  Eigen::HouseholderQR<Matrix> qr(g);
  return qr.householderQ() * Matrix::Identity(d, d);
}

// Brute-force u_g(xi) with the explicit monomial Hermite polynomials.
double brute_eval(const SurrogateModel& m, const Vector& xi) {
  Vector x = xi;
  if (m.reduction) x = *m.reduction * x;
  const Vector eta = m.rotation * x;
  double s = 0.0;
  for (std::size_t n = 0; n < m.basis->size(); ++n) {
    double v = 1.0;
    for (int k = 0; k < m.basis->dim(); ++k) v *= oracle::psi((*m.basis)[n][static_cast<std::size_t>(k)], eta[k]);
    s += m.coeffs[static_cast<Eigen::Index>(n)] * v;
  }
  return s;
}

double ridge_row(const Matrix& x, Eigen::Index q) {
  const Vector v = x.row(q).transpose();
  return ridge_eval(std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
}

double ridge_vec(const Vector& v) {
  return ridge_eval(std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
}

double relative_error(const SurrogateModel& m, const std::function<double(const Vector&)>& f, int d,
                      std::uint64_t seed, Eigen::Index n = 20000) {
  RngStream rng(seed, 999);
  const Matrix x = sample_std_normal(rng, n, d);
  const Vector approx = evaluate(m, x);
  double num = 0.0, den = 0.0;
  for (Eigen::Index q = 0; q < n; ++q) {
    const double t = f(x.row(q).transpose());
    num += (approx[q] - t) * (approx[q] - t);
    den += t * t;
  }
  return std::sqrt(num / den);
}

}  // namespace

TEST(GradientMatrix, ZeroCoefficients) {
  const MultiIndexBasis b(3, 3);
  const Vector c = Vector::Zero(static_cast<Eigen::Index>(b.size()));
  EXPECT_EQ(gradient_matrix(c, b), Matrix::Zero(3, 3));
  EXPECT_EQ(gradient_matrix(c, all_grad_kernels(b), 3), Matrix::Zero(3, 3));
}

TEST(GradientMatrix, LinearFunctionGivesOuterProduct) {
  const MultiIndexBasis b(4, 2);
  Vector a(4);
  a << 0.5, -1.0, 2.0, 0.25;
  Vector c = Vector::Zero(static_cast<Eigen::Index>(b.size()));
  for (int i = 0; i < 4; ++i) c[1 + i] = a[i];
  EXPECT_LE((gradient_matrix(c, b) - a * a.transpose()).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LE((gradient_matrix(c, all_grad_kernels(b), 4) - a * a.transpose()).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(GradientMatrix, SecondOrderMatchesQuadrature) {
  const MultiIndexBasis b(2, 2);
  Vector c = Vector::Zero(static_cast<Eigen::Index>(b.size()));
  c[b.find({2, 0})] = 1.0;
  const Matrix g = gradient_matrix(c, b);
  // E[(psi_2'(x))^2] by Gauss-Hermite quadrature.
  const oracle::Quadrature q = oracle::gauss_hermite(6);
  double e = 0.0;
  for (std::size_t k = 0; k < q.nodes.size(); ++k) e += q.weights[k] * std::pow(oracle::dpsi(2, q.nodes[k]), 2);
  EXPECT_NEAR(g(0, 0), e, 1e-12);
  EXPECT_NEAR(g(0, 0), 2.0, 1e-12);
  EXPECT_EQ(g(1, 1), 0.0);
  EXPECT_EQ(g(0, 1), 0.0);
}

TEST(GradientMatrix, DerivativeRouteEqualsKernelRoute) {
  for (BasisMode mode : {BasisMode::full, BasisMode::no_interaction}) {
    const MultiIndexBasis b(5, 3, mode);
    RngStream rng(8, 8);
    const Vector c = sample_std_normal(rng, static_cast<Eigen::Index>(b.size()), 1).col(0);
    const Matrix g1 = gradient_matrix(c, b);
    const Matrix g2 = gradient_matrix(c, all_grad_kernels(b), 5);
    EXPECT_LE((g1 - g2).cwiseAbs().maxCoeff(), 1e-12 * g2.cwiseAbs().maxCoeff());
    EXPECT_GE(sym_eigen(g1).eigenvalues.minCoeff(), -1e-10);
  }
}

TEST(GradientMatrix, MatchesQuadratureForRandomCoefficients) {
  const MultiIndexBasis b(2, 3);
  RngStream rng(2, 2);
  const Vector c = sample_std_normal(rng, static_cast<Eigen::Index>(b.size()), 1).col(0);
  const oracle::Quadrature q = oracle::gauss_hermite(6);
  Matrix expect = Matrix::Zero(2, 2);
  for (std::size_t k1 = 0; k1 < q.nodes.size(); ++k1)
    for (std::size_t k2 = 0; k2 < q.nodes.size(); ++k2) {
      Vector grad = Vector::Zero(2);
      for (std::size_t n = 0; n < b.size(); ++n) {
        const int a0 = b[n][0], a1 = b[n][1];
        grad[0] += c[static_cast<Eigen::Index>(n)] * oracle::dpsi(a0, q.nodes[k1]) * oracle::psi(a1, q.nodes[k2]);
        grad[1] += c[static_cast<Eigen::Index>(n)] * oracle::psi(a0, q.nodes[k1]) * oracle::dpsi(a1, q.nodes[k2]);
      }
      expect += q.weights[k1] * q.weights[k2] * grad * grad.transpose();
    }
  EXPECT_LE((gradient_matrix(c, b) - expect).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Rotation, DistanceVanishesOnPermutations) {
  Matrix p = Matrix::Zero(4, 4);
  p(0, 2) = p(1, 0) = p(2, 3) = p(3, 1) = 1.0;
  EXPECT_EQ(rotation_distance(p), 0.0);
  EXPECT_EQ(rotation_distance(Matrix::Identity(5, 5)), 0.0);
  EXPECT_GT(rotation_distance(random_orthogonal(1, 4)), 0.5);
  EXPECT_EQ(default_theta(12), 3.0);
  EXPECT_EQ(default_theta(100), 65.0);
}

TEST(Evaluate, ConstantAndIdentityAndRotatedModels) {
  SurrogateModel m;
  m.basis = make_basis(3, 3);
  m.rotation = Matrix::Identity(3, 3);
  m.coeffs = Vector::Zero(static_cast<Eigen::Index>(m.basis->size()));
  m.coeffs[0] = 1.0;
  RngStream rng(4, 4);
  const Matrix x = sample_std_normal(rng, 50, 3);
  EXPECT_EQ(evaluate(m, x), Vector::Ones(50));

  m.coeffs = sample_std_normal(rng, static_cast<Eigen::Index>(m.basis->size()), 1).col(0);
  const Vector direct = measurement_matrix(*m.basis, x) * m.coeffs;
  EXPECT_LE((evaluate(m, x) - direct).cwiseAbs().maxCoeff(), 1e-13 * direct.cwiseAbs().maxCoeff());

  // Reduced and rotated: 5 inputs -> 3 variables.
  const Matrix q = random_orthogonal(9, 5);
  m.reduction = Matrix(q.topRows(3));
  m.rotation = random_orthogonal(10, 3);
  const Matrix x5 = sample_std_normal(rng, 40, 5);
  const Vector fast = evaluate(m, x5);
  for (Eigen::Index r = 0; r < x5.rows(); ++r) {
    const double slow = brute_eval(m, x5.row(r).transpose());
    EXPECT_NEAR(fast[r], slow, 1e-12 * std::max(1.0, std::abs(slow)));
  }
  EXPECT_THROW(evaluate(m, x), InvalidArgument);
}

TEST(Moments, ClosedForm) {
  SurrogateModel m;
  m.basis = make_basis(2, 2);
  m.rotation = Matrix::Identity(2, 2);
  m.coeffs = Vector::Zero(6);
  Moments z = moments(m);
  EXPECT_EQ(z.mean, 0.0);
  EXPECT_EQ(z.variance, 0.0);
  m.coeffs[0] = 3.0;
  m.coeffs[1] = 4.0;
  z = moments(m);
  EXPECT_EQ(z.mean, 3.0);
  EXPECT_EQ(z.variance, 16.0);
}

TEST(Moments, AgreeWithMonteCarloWithinThreeStandardErrors) {
  SurrogateModel m;
  m.basis = make_basis(3, 3);
  m.reduction = Matrix(random_orthogonal(21, 6).topRows(3));
  m.rotation = random_orthogonal(22, 3);
  RngStream rng(23, 23);
  m.coeffs = sample_std_normal(rng, static_cast<Eigen::Index>(m.basis->size()), 1).col(0);
  const Moments mo = moments(m);
  const Eigen::Index n = 1'000'000;
  const Vector v = evaluate(m, sample_std_normal(rng, n, 6));
  const double mean = v.mean();
  const Vector centred = v.array() - mean;
  const double var = centred.squaredNorm() / static_cast<double>(n - 1);
  const double se_mean = std::sqrt(var / static_cast<double>(n));
  const double m4 = centred.array().pow(4).mean();
  const double se_var = std::sqrt((m4 - var * var) / static_cast<double>(n));
  EXPECT_LE(std::abs(mean - mo.mean), 3.0 * se_mean);
  EXPECT_LE(std::abs(var - mo.variance), 3.0 * se_var);
}

TEST(Moments, InvariantUnderExtraRotation) {
  SurrogateModel m;
  m.basis = make_basis(3, 2);
  m.rotation = Matrix::Identity(3, 3);
  RngStream rng(1, 1);
  m.coeffs = sample_std_normal(rng, static_cast<Eigen::Index>(m.basis->size()), 1).col(0);
  const Moments a = moments(m);
  m.rotation = random_orthogonal(3, 3) * m.rotation;
  const Moments b = moments(m);
  EXPECT_EQ(a.mean, b.mean);
  EXPECT_EQ(a.variance, b.variance);
}

TEST(Rotation, RotatedSamplesStayStandardNormal) {
  RngStream rng(31, 31);
  const Eigen::Index n = 10000;
  const Matrix xi = sample_std_normal(rng, n, 6);
  const Matrix eta = xi * random_orthogonal(32, 6);
  for (Eigen::Index j = 0; j < 6; ++j) {
    const double mean = eta.col(j).mean();
    const double var = (eta.col(j).array() - mean).square().sum() / static_cast<double>(n - 1);
    EXPECT_LE(std::abs(mean), 4.0 / std::sqrt(static_cast<double>(n)));
    EXPECT_LE(std::abs(var - 1.0), 4.0 * std::sqrt(2.0 / static_cast<double>(n)));
  }
}

TEST(FitL1, RecoversSingleHermiteTerm) {
  const auto basis = make_basis(2, 3);
  const Eigen::Index m = 4 * static_cast<Eigen::Index>(basis->size()) / 5;
  RngStream rng(5, 5);
  const Matrix x = sample_std_normal(rng, m, 2);
  Vector u(m);
  for (Eigen::Index q = 0; q < m; ++q) u[q] = eval_univariate(3, x(q, 0));
  AdmOptions opts;
  opts.cv_relative_candidates = {1e-10, 1e-6, 1e-3, 1e-1};
  const SurrogateModel model = fit_l1(x, u, basis, opts);
  Vector truth = Vector::Zero(static_cast<Eigen::Index>(basis->size()));
  truth[basis->find({3, 0})] = 1.0;
  EXPECT_LE((model.coeffs - truth).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(FitL1, ZeroOutputsGiveZeroModel) {
  const auto basis = make_basis(3, 2);
  RngStream rng(5, 6);
  const Matrix x = sample_std_normal(rng, 12, 3);
  const SurrogateModel model = fit_l1(x, Vector::Zero(12), basis);
  EXPECT_EQ(model.coeffs, Vector::Zero(static_cast<Eigen::Index>(basis->size())));
  EXPECT_THROW(fit_l1(x, Vector::Zero(11), basis), InvalidArgument);
}

TEST(FitAdm, OneDimensionReducesToL1) {
  const auto basis = make_basis(1, 4);
  RngStream rng(6, 6);
  const Matrix x = sample_std_normal(rng, 4, 1);
  Vector u(4);
  for (Eigen::Index q = 0; q < 4; ++q) u[q] = std::exp(0.3 * x(q, 0));
  AdmOptions opts;
  opts.eps_grid_per_iter = 1;
  const SurrogateModel l1 = fit_l1(x, u, basis, opts);
  const SurrogateModel adm = fit_adm(x, u, basis, opts);
  ASSERT_EQ(adm.rotation.rows(), 1);
  EXPECT_EQ(std::abs(adm.rotation(0, 0)), 1.0);
  Vector c = l1.coeffs;
  if (adm.rotation(0, 0) < 0)
    for (Eigen::Index n = 0; n < c.size(); ++n) c[n] *= (n % 2 ? -1.0 : 1.0);
  EXPECT_LE((adm.coeffs - c).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_TRUE(adm.converged);
}

TEST(FitAdm, RidgeImprovesOnL1AndKeepsRotationsOrthogonal) {
  const int d = 6;
  const auto basis = make_basis(d, 3);
  RngStream rng(7, 7);
  const Eigen::Index m = 40;
  const Matrix x = sample_std_normal(rng, m, d);
  Vector u(m);
  for (Eigen::Index q = 0; q < m; ++q) u[q] = ridge_row(x, q);
  AdmOptions opts;
  const SurrogateModel l1 = fit_l1(x, u, basis, opts);
  const SurrogateModel adm = fit_adm(x, u, basis, opts);
  const Matrix& a = adm.rotation;
  EXPECT_LE((a * a.transpose() - Matrix::Identity(d, d)).cwiseAbs().maxCoeff(), 1e-10);
  auto truth = [](const Vector& xi) { return ridge_vec(xi); };
  const double e_l1 = relative_error(l1, truth, d, 1);
  const double e_adm = relative_error(adm, truth, d, 1);
  EXPECT_LT(e_adm, e_l1);
  EXPECT_FALSE(adm.history.empty());
}

TEST(FitAdm, SirInitAndGivenInit) {
  const int d = 4;
  const auto basis = make_basis(d, 2);
  RngStream rng(8, 8);
  const Matrix x = sample_std_normal(rng, 30, d);
  Vector u(30);
  for (Eigen::Index q = 0; q < 30; ++q) u[q] = ridge_row(x, q);
  const SurrogateModel s = fit_adm(x, u, basis, {}, AdmInit::sir);
  EXPECT_LE((s.rotation * s.rotation.transpose() - Matrix::Identity(d, d)).cwiseAbs().maxCoeff(), 1e-10);
  const Matrix r = random_orthogonal(4, d);
  const SurrogateModel g = fit_adm(x, u, basis, {}, AdmInit::given, &r);
  EXPECT_LE((g.rotation * g.rotation.transpose() - Matrix::Identity(d, d)).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_THROW(fit_adm(x, u, basis, {}, AdmInit::given, nullptr), InvalidArgument);
}

TEST(FitAdm, NeverStoppingIsFlagged) {
  const int d = 4;
  const auto basis = make_basis(d, 3);
  RngStream rng(9, 9);
  const Matrix x = sample_std_normal(rng, 25, d);
  Vector u(25);
  for (Eigen::Index q = 0; q < 25; ++q) u[q] = std::exp(0.3 * x(q, 0) - 0.2 * x(q, 1) * x(q, 2));
  AdmOptions opts;
  opts.theta = 1e-300;
  opts.max_rotations = 2;
  const SurrogateModel m = fit_adm(x, u, basis, opts, AdmInit::sir);
  EXPECT_FALSE(m.converged);
}

// A skewed ridge along (1, 1) is found by the slice step and fitted in one
// reduced variable. Accuracy is bounded by the direction estimate.
TEST(FitSadmdr, SkewedRidgeReduction) {
  RngStream rng(10, 10);
  const Eigen::Index m = 2000;
  const Matrix x = sample_std_normal(rng, m, 2);
  auto truth = [](const Vector& xi) {
    const double s = xi[0] + xi[1];
    return s + 0.25 * s * s;
  };
  Vector u(m);
  for (Eigen::Index q = 0; q < m; ++q) u[q] = truth(x.row(q).transpose());
  AdmOptions opts;
  opts.cv_relative_candidates = {1e-9, 1e-6, 1e-3, 1e-1, 1.0};
  const SurrogateModel model = fit_sadmdr(x, u, 1, 2, opts);
  ASSERT_TRUE(model.reduction.has_value());
  EXPECT_EQ(model.reduction->rows(), 1);
  EXPECT_NEAR(std::abs((*model.reduction)(0, 0)), 1.0 / std::sqrt(2.0), 0.05);
  EXPECT_LE(relative_error(model, truth, 2, 3), 0.1);
  EXPECT_THROW(fit_sadmdr(x, u, 2, 2, opts), InvalidArgument);
}

TEST(FitSadmdr, PublishedBasisSizes) {
  EXPECT_EQ(MultiIndexBasis(12, 3).size(), 455u);
  EXPECT_EQ(MultiIndexBasis(20, 3).size(), 1771u);
}

TEST(GradientReduction, LinearModelGivesNormalizedDirection) {
  SurrogateModel m;
  m.basis = make_basis(3, 2);
  m.rotation = Matrix::Identity(3, 3);
  m.coeffs = Vector::Zero(static_cast<Eigen::Index>(m.basis->size()));
  Vector a(3);
  a << 1.0, -2.0, 2.0;
  for (int i = 0; i < 3; ++i) m.coeffs[1 + i] = a[i];
  const GradientReduction r = reduce_via_gradient(m, 1);
  const Vector dir = r.map.row(0).transpose();
  EXPECT_NEAR(std::abs(dir.dot(a / a.norm())), 1.0, 1e-12);
  EXPECT_FALSE(r.rank_deficient);
  EXPECT_TRUE(reduce_via_gradient(m, 2).rank_deficient);
  const GradientReduction full = reduce_via_gradient(m, 3);
  EXPECT_LE((full.map * full.map.transpose() - Matrix::Identity(3, 3)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(GradientReduction, WellFitRidgeModelPointsAlongOnes) {
  const int d = 6;
  const auto basis = make_basis(d, 3);
  RngStream rng(11, 11);
  const Eigen::Index m = 150;
  const Matrix x = sample_std_normal(rng, m, d);
  Vector u(m);
  for (Eigen::Index q = 0; q < m; ++q) u[q] = ridge_row(x, q);
  const SurrogateModel model = fit_l1(x, u, basis);
  const GradientReduction r = reduce_via_gradient(model, 1);
  const double cosang = std::abs(r.map.row(0).sum()) / std::sqrt(static_cast<double>(d));
  EXPECT_GE(cosang, std::cos(5.0 * M_PI / 180.0));
}

TEST(GradientReduction, FitGradientReducedRuns) {
  const int d = 4;
  RngStream rng(12, 12);
  const Matrix x = sample_std_normal(rng, 60, d);
  Vector u(60);
  for (Eigen::Index q = 0; q < 60; ++q) u[q] = ridge_row(x, q);
  const SurrogateModel m = fit_gradient_reduced(x, u, make_basis(d, 3), 1, 3);
  ASSERT_TRUE(m.reduction.has_value());
  EXPECT_EQ(m.input_dim(), d);
  EXPECT_EQ(m.reduced_dim(), 1);
  auto truth = [](const Vector& xi) { return ridge_vec(xi); };
  EXPECT_LE(relative_error(m, truth, d, 5), 1e-2);
}
