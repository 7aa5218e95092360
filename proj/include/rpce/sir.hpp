#pragma once

// Sliced inverse regression: slice the outputs into equal-count quantile
// bins, average the inputs within each slice and eigendecompose the
// weighted covariance of the slice means.  Leading eigenvectors span the
// estimated central subspace.

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "rpce/error.hpp"
#include "rpce/numerics.hpp"

namespace rpce {

struct SirResult {
  Vector eigenvalues;                    // descending, >= 0 up to round-off
  Matrix directions;                     // d x d, row k = k-th eigenvector
  std::vector<Eigen::Index> slice_counts;  // sums to M
};

// max(5, min(10, M / 20))
inline int default_slice_count(Eigen::Index m) {
  return static_cast<int>(std::max<Eigen::Index>(5, std::min<Eigen::Index>(10, m / 20)));
}

/// Fits SIR with `slices` equal-count slices of the sorted outputs (stable
/// sort, so ties keep sample order).  Slice h holds sorted positions
/// [floor(h M / H), floor((h + 1) M / H)).  With `standardize` the inputs are
/// centred and whitened by their sample covariance first and the directions
/// are mapped back to the original coordinates and re-orthonormalized.
inline SirResult sir_fit(const Matrix& samples, const Vector& outputs, int slices, bool standardize = false) {
  const Eigen::Index m = samples.rows();
  const Eigen::Index d = samples.cols();
  if (outputs.size() != m) throw InvalidArgument("sir_fit: samples and outputs disagree in length");
  if (slices < 2) throw InvalidArgument("sir_fit: need at least two slices");
  if (slices > m) throw InvalidArgument("sir_fit: more slices (" + std::to_string(slices) + ") than samples (" + std::to_string(m) + ")");
  if (d < 1) throw InvalidArgument("sir_fit: empty input dimension");
  if (outputs.maxCoeff() == outputs.minCoeff()) throw DegenerateInput("sir_fit: outputs are constant");

  Matrix x = samples;
  Matrix whiten;  // maps centred inputs to whitened ones, z = whiten * (xi - mean)
  if (standardize) {
    const Vector mean = x.colwise().mean().transpose();
    x.rowwise() -= mean.transpose();
    const Matrix cov = (x.transpose() * x) / static_cast<double>(m > 1 ? m - 1 : 1);
    const SymEigen ce = sym_eigen(0.5 * (cov + cov.transpose()));
    if (ce.eigenvalues.minCoeff() <= 0.0) throw DegenerateInput("sir_fit: singular input covariance");
    whiten = ce.eigenvectors * ce.eigenvalues.cwiseSqrt().cwiseInverse().asDiagonal() * ce.eigenvectors.transpose();
    x = x * whiten;  // whiten is symmetric
  }

  std::vector<Eigen::Index> order(static_cast<std::size_t>(m));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index a, Eigen::Index b) { return outputs[a] < outputs[b]; });

  SirResult res;
  res.slice_counts.resize(static_cast<std::size_t>(slices));
  Matrix v = Matrix::Zero(d, d);
  for (int h = 0; h < slices; ++h) {
    const Eigen::Index lo = h * m / slices;
    const Eigen::Index hi = (h + 1) * m / slices;
    Vector mean = Vector::Zero(d);
    for (Eigen::Index p = lo; p < hi; ++p) mean += x.row(order[static_cast<std::size_t>(p)]).transpose();
    const Eigen::Index nh = hi - lo;
    res.slice_counts[static_cast<std::size_t>(h)] = nh;
    if (nh == 0) continue;
    mean /= static_cast<double>(nh);
    v.noalias() += (static_cast<double>(nh) / static_cast<double>(m)) * mean * mean.transpose();
  }
  v = 0.5 * (v + v.transpose());
  SymEigen eig = sym_eigen(v);

  if (standardize) {
    // Directions in whitened space -> original space, then orthonormalize
    // in eigenvalue order.
    Matrix back = whiten * eig.eigenvectors;
    Eigen::HouseholderQR<Matrix> qr(back);
    Matrix qm = qr.householderQ() * Matrix::Identity(d, d);
    for (Eigen::Index k = 0; k < d; ++k)
      if (qm.col(k).dot(back.col(k)) < 0.0) qm.col(k) = -qm.col(k);
    eig.eigenvectors = qm;
  }
  res.eigenvalues = eig.eigenvalues;
  res.directions = eig.eigenvectors.transpose();
  return res;
}

inline SirResult sir_fit(const Matrix& samples, const Vector& outputs) {
  return sir_fit(samples, outputs, default_slice_count(samples.rows()));
}

/// First d_tilde rows of the direction matrix.
inline Matrix reduce(const SirResult& result, Eigen::Index d_tilde) {
  const Eigen::Index d = result.directions.rows();
  if (d_tilde < 1 || d_tilde > d)
    throw InvalidArgument("reduce: reduced dimension must lie in [1, " + std::to_string(d) + "]");
  return result.directions.topRows(d_tilde);
}

/// Smallest d_tilde whose leading eigenvalues carry at least `fraction` of
/// the total.
inline Eigen::Index suggest_dtilde(const SirResult& result, double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw InvalidArgument("suggest_dtilde: fraction must lie in (0, 1)");
  const Vector lam = result.eigenvalues.cwiseMax(0.0);
  const double total = lam.sum();
  if (!(total > 0.0)) throw DegenerateInput("suggest_dtilde: all eigenvalues are zero");
  double acc = 0.0;
  for (Eigen::Index k = 0; k < lam.size(); ++k) {
    acc += lam[k];
    if (acc >= fraction * total) return k + 1;
  }
  return lam.size();
}

}  // namespace rpce
