#pragma once

// Basis pursuit denoising
//
//   min ||W c||_1  subject to  ||Psi c - u||_2 <= eps
//
// solved by following the LASSO solution path
//
//   x(lambda) = argmin 1/2 ||A x - u||^2 + lambda ||x||_1,   A = Psi W^{-1}
//
// from lambda = ||A^T u||_inf down to the breakpoint segment on which the
// residual norm crosses eps.  The path is piecewise linear in lambda and the
// residual norm is monotone along it, so the crossing point is the exact
// root of the Pareto curve and is located in closed form inside its segment.
// A single path serves every residual target at once, which is what the
// cross-validation below exploits.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/QR>

#include "rpce/error.hpp"
#include "rpce/numerics.hpp"

namespace rpce {

struct BpdnProblem {
  Eigen::Ref<const Matrix> psi;
  Eigen::Ref<const Vector> u;
  double epsilon = 0.0;
  Vector weights;  // empty means all ones
};

struct BpdnOptions {
  // Path breakpoints allowed before giving up; 0 picks 10 * (M + N).
  int max_steps = 0;
  // A result counts as converged when its residual is within
  // eps * (1 + feasibility_slack) + abs_floor * ||u||.
  double feasibility_slack = 1e-6;
  double abs_floor = 1e-13;
};

struct RecoveryResult {
  Vector coeffs;
  double residual_norm = 0.0;
  int iterations = 0;
  bool converged = false;
};

struct PathPoint {
  Vector x;
  double residual = 0.0;
  bool feasible = false;
  bool reached = false;  // false when the step cap cut the path short
  int steps = 0;
};

/// Traces the LASSO homotopy for min 1/2||Ax - y||^2 + lambda||x||_1 and
/// returns, for each residual target, the point where ||Ax - y|| first drops
/// to that target.  Targets below the end-of-path residual are reported
/// infeasible and carry the least-residual point reached.
inline std::vector<PathPoint> trace_lasso_path(const Eigen::Ref<const Matrix>& a,
                                               const Eigen::Ref<const Vector>& y,
                                               const std::vector<double>& targets,
                                               const BpdnOptions& opts = {}) {
  const Eigen::Index m = a.rows();
  const Eigen::Index n = a.cols();
  if (y.size() != m) throw InvalidArgument("trace_lasso_path: dimension mismatch");
  for (double t : targets)
    if (!(t >= 0.0)) throw InvalidArgument("trace_lasso_path: residual targets must be >= 0");

  std::vector<PathPoint> out(targets.size());
  std::vector<std::size_t> order(targets.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t p, std::size_t q) { return targets[p] > targets[q]; });
  std::size_t next = 0;  // position in `order` of the next unmet target

  Vector x = Vector::Zero(n);
  Vector r = y;
  const double ynorm = y.norm();
  double rnorm = ynorm;
  int steps = 0;

  auto record = [&](std::size_t slot, const Vector& xs, double res, bool feasible) {
    out[slot].x = xs;
    out[slot].residual = res;
    out[slot].feasible = feasible;
    out[slot].reached = true;
    out[slot].steps = steps;
  };
  auto meets = [&](double res, double target) {
    return res <= target * (1.0 + opts.feasibility_slack) + opts.abs_floor * ynorm;
  };

  while (next < order.size() && rnorm <= targets[order[next]]) {
    record(order[next], x, rnorm, true);
    ++next;
  }
  if (next == order.size()) return out;

  Vector c = a.transpose() * r;
  Eigen::Index first = 0;
  double lambda = c.cwiseAbs().maxCoeff(&first);
  if (lambda == 0.0) {
    for (; next < order.size(); ++next) record(order[next], x, rnorm, meets(rnorm, targets[order[next]]));
    return out;
  }

  Vector col_norm = a.colwise().norm().transpose();
  const Eigen::Index kmax = std::min(m, n);
  Matrix q(m, kmax);     // orthonormal basis of the active columns
  Matrix rfac(kmax, kmax);  // A_active = Q R
  std::vector<Eigen::Index> active;
  std::vector<double> sign;
  std::vector<char> is_active(static_cast<std::size_t>(n), 0);
  std::vector<char> excluded(static_cast<std::size_t>(n), 0);

  // Appends column j to the factorization; false when it is numerically
  // dependent on the active set.
  auto add_column = [&](Eigen::Index j) -> bool {
    const auto k = static_cast<Eigen::Index>(active.size());
    if (k >= kmax) return false;
    Vector w = a.col(j);
    Vector coef = Vector::Zero(k);
    for (int pass = 0; pass < 2; ++pass) {
      if (k == 0) break;
      const Vector h = q.leftCols(k).transpose() * w;
      w -= q.leftCols(k) * h;
      coef += h;
    }
    const double rho = w.norm();
    if (!(rho > 1e-10 * col_norm[j])) return false;
    q.col(k) = w / rho;
    rfac.block(0, k, k, 1) = coef;
    rfac.block(k, 0, 1, k).setZero();
    rfac(k, k) = rho;
    return true;
  };
  auto refactor = [&]() {
    const auto k = static_cast<Eigen::Index>(active.size());
    if (k == 0) return;
    Matrix sub(m, k);
    for (Eigen::Index i = 0; i < k; ++i) sub.col(i) = a.col(active[static_cast<std::size_t>(i)]);
    Eigen::HouseholderQR<Matrix> qr(sub);
    q.leftCols(k) = qr.householderQ() * Matrix::Identity(m, k);
    rfac.topLeftCorner(k, k) = qr.matrixQR().topLeftCorner(k, k).template triangularView<Eigen::Upper>();
  };

  if (!add_column(first)) throw NumericalFailure("trace_lasso_path: zero column selected");
  active.push_back(first);
  sign.push_back(c[first] > 0 ? 1.0 : -1.0);
  is_active[static_cast<std::size_t>(first)] = 1;

  const int max_steps = opts.max_steps > 0 ? opts.max_steps : static_cast<int>(10 * (m + n));
  Eigen::Index just_dropped = -1;
  Eigen::Index just_added = first;
  bool path_end = false;

  while (next < order.size()) {
    if (steps >= max_steps) break;
    ++steps;
    const auto k = static_cast<Eigen::Index>(active.size());
    Vector s(k);
    for (Eigen::Index i = 0; i < k; ++i) s[i] = sign[static_cast<std::size_t>(i)];

    // G d = s with G = R^T R; v = A_active d = Q R^{-T} s.
    const auto rk = rfac.topLeftCorner(k, k).template triangularView<Eigen::Upper>();
    const Vector w = rk.transpose().solve(s);
    const Vector d = rk.solve(w);
    const Vector v = q.leftCols(k) * w;
    const Vector av = a.transpose() * v;

    double gamma = lambda;
    Eigen::Index event = -1;
    bool event_join = false;
    double event_sign = 0.0;
    // A column that just left (or just entered) sits exactly on its
    // boundary; only a strictly positive step may bring it back.
    const double tiny = 1e-11 * lambda;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (is_active[static_cast<std::size_t>(j)] || excluded[static_cast<std::size_t>(j)]) continue;
      const double aj = av[j];
      const double cj = c[j];
      const double floor = j == just_dropped ? tiny : 0.0;
      if (aj < 1.0) {
        const double g = (lambda - cj) / (1.0 - aj);
        if (g > floor && g < gamma) {
          gamma = g;
          event = j;
          event_join = true;
          event_sign = 1.0;
        }
      }
      if (aj > -1.0) {
        const double g = (lambda + cj) / (1.0 + aj);
        if (g > floor && g < gamma) {
          gamma = g;
          event = j;
          event_join = true;
          event_sign = -1.0;
        }
      }
    }
    for (Eigen::Index i = 0; i < k; ++i) {
      const Eigen::Index j = active[static_cast<std::size_t>(i)];
      if (d[i] == 0.0) continue;
      const double g = -x[j] / d[i];
      if (g > (j == just_added ? tiny : 0.0) && g < gamma) {
        gamma = g;
        event = i;
        event_join = false;
      }
    }

    // Residual targets crossed inside this segment.
    const double rr = r.squaredNorm();
    const double rv = r.dot(v);
    const double vv = v.squaredNorm();
    const double end_sq = std::max(0.0, rr - 2.0 * gamma * rv + gamma * gamma * vv);
    while (next < order.size()) {
      const double tau = targets[order[next]];
      if (tau * tau < end_sq) break;
      double t = 0.0;
      if (vv > 0.0 && rr > tau * tau) {
        const double disc = std::max(0.0, rv * rv - vv * (rr - tau * tau));
        t = (rr - tau * tau) / (rv + std::sqrt(disc));
        t = std::clamp(t, 0.0, gamma);
      }
      Vector xt = x;
      for (Eigen::Index i = 0; i < k; ++i) xt[active[static_cast<std::size_t>(i)]] += t * d[i];
      const double res = (y - a * xt).norm();
      record(order[next], xt, res, true);
      ++next;
    }
    if (next == order.size()) break;

    for (Eigen::Index i = 0; i < k; ++i) x[active[static_cast<std::size_t>(i)]] += gamma * d[i];
    lambda -= gamma;
    if (steps % 25 == 0) {
      r = y - a * x;
      c = a.transpose() * r;
    } else {
      r -= gamma * v;
      c -= gamma * av;
    }
    rnorm = r.norm();
    just_dropped = -1;
    just_added = -1;

    if (event < 0) {
      path_end = true;
      break;
    }
    if (event_join) {
      if (add_column(event)) {
        active.push_back(event);
        sign.push_back(event_sign);
        is_active[static_cast<std::size_t>(event)] = 1;
        just_added = event;
      } else {
        excluded[static_cast<std::size_t>(event)] = 1;
      }
    } else {
      const Eigen::Index j = active[static_cast<std::size_t>(event)];
      x[j] = 0.0;
      is_active[static_cast<std::size_t>(j)] = 0;
      active.erase(active.begin() + event);
      sign.erase(sign.begin() + event);
      just_dropped = j;
      refactor();
      if (active.empty()) {
        // Only possible through round-off; restart from the current point.
        r = y - a * x;
        c = a.transpose() * r;
        Eigen::Index jmax = 0;
        lambda = c.cwiseAbs().maxCoeff(&jmax);
        if (lambda == 0.0 || !add_column(jmax)) {
          path_end = true;
          break;
        }
        active.push_back(jmax);
        sign.push_back(c[jmax] > 0 ? 1.0 : -1.0);
        is_active[static_cast<std::size_t>(jmax)] = 1;
      }
    }
  }

  if (next < order.size()) {
    const double res = (y - a * x).norm();
    for (; next < order.size(); ++next) {
      const std::size_t slot = order[next];
      record(slot, x, res, path_end && meets(res, targets[slot]));
      out[slot].reached = path_end;
    }
  }
  return out;
}

namespace detail {

inline Matrix scale_columns(const Eigen::Ref<const Matrix>& psi, const Vector& weights) {
  Matrix a = psi;
  for (Eigen::Index j = 0; j < a.cols(); ++j) a.col(j) /= weights[j];
  return a;
}

inline void check_weights(const Vector& w, Eigen::Index n) {
  if (w.size() != n) throw InvalidArgument("weights length does not match the number of columns");
  for (Eigen::Index j = 0; j < n; ++j)
    if (!(w[j] > 0.0) || !std::isfinite(w[j])) throw InvalidArgument("weights must be positive and finite");
}

}  // namespace detail

inline RecoveryResult solve_bpdn(const BpdnProblem& prob, const BpdnOptions& opts = {}) {
  if (prob.psi.rows() != prob.u.size()) throw InvalidArgument("solve_bpdn: Psi rows != length of u");
  if (!(prob.epsilon >= 0.0)) throw InvalidArgument("solve_bpdn: epsilon must be >= 0");
  const bool weighted = prob.weights.size() > 0;
  PathPoint pt;
  if (weighted) {
    detail::check_weights(prob.weights, prob.psi.cols());
    const Matrix a = detail::scale_columns(prob.psi, prob.weights);
    pt = trace_lasso_path(a, prob.u, {prob.epsilon}, opts).front();
    pt.x = pt.x.cwiseQuotient(prob.weights);
  } else {
    pt = trace_lasso_path(prob.psi, prob.u, {prob.epsilon}, opts).front();
  }
  if (pt.reached && !pt.feasible)
    throw Infeasible("solve_bpdn: epsilon " + std::to_string(prob.epsilon) +
                     " is below the least-squares residual " + std::to_string(pt.residual));
  RecoveryResult res;
  res.coeffs = std::move(pt.x);
  res.residual_norm = (prob.psi * res.coeffs - prob.u).norm();
  res.iterations = pt.steps;
  res.converged = pt.feasible && pt.reached;
  return res;
}

// w_i = 1 / (|c_i| + delta)
inline Vector reweight(const Vector& coeffs, double delta) {
  if (!(delta > 0.0)) throw InvalidArgument("reweight: delta must be positive");
  return (coeffs.cwiseAbs().array() + delta).inverse().matrix();
}

// rel * ||c||_inf (rel = 1e-4 by default), floored at 1e-12.
inline double default_reweight_delta(const Vector& coeffs, double rel = 1e-4) {
  const double cmax = coeffs.size() ? coeffs.cwiseAbs().maxCoeff() : 0.0;
  return std::max(rel * cmax, 1e-12);
}

/// One unweighted solve followed by `iters` weighted passes with
/// w_i = 1 / (|c_i| + delta) built from the previous pass.  Without an
/// explicit delta each pass uses default_reweight_delta(input, delta_rel).
inline RecoveryResult solve_reweighted(const Eigen::Ref<const Matrix>& psi, const Eigen::Ref<const Vector>& u,
                                       double epsilon, int iters, std::optional<double> delta = {},
                                       const BpdnOptions& opts = {}, double delta_rel = 1e-4) {
  if (iters < 1) throw InvalidArgument("solve_reweighted: iters must be >= 1");
  if (delta && !(*delta > 0.0)) throw InvalidArgument("solve_reweighted: delta must be positive");
  if (!(delta_rel > 0.0)) throw InvalidArgument("solve_reweighted: delta_rel must be positive");
  RecoveryResult cur = solve_bpdn({psi, u, epsilon, {}}, opts);
  for (int l = 0; l < iters; ++l) {
    const double del = delta ? *delta : default_reweight_delta(cur.coeffs, delta_rel);
    RecoveryResult nxt = solve_bpdn({psi, u, epsilon, reweight(cur.coeffs, del)}, opts);
    nxt.iterations += cur.iterations;
    cur = std::move(nxt);
  }
  return cur;
}

// Six values log-spaced over [1e-4, 1] * ||u||.
inline std::vector<double> default_cv_candidates(double unorm, int count = 6) {
  std::vector<double> out;
  for (int i = 0; i < count; ++i) {
    const double e = count == 1 ? 0.0 : -4.0 + 4.0 * i / (count - 1);
    out.push_back(unorm * std::pow(10.0, e));
  }
  return out;
}

struct CvResult {
  double epsilon = 0.0;        // scaled to the full sample size
  double epsilon_r = 0.0;      // winning reconstruction tolerance
  double validation = 0.0;     // its validation residual (summed over repeats)
  std::vector<double> validation_residuals;  // per candidate, +inf if infeasible
  Eigen::Index reconstruction_rows = 0;
};

/// Hold-out selection of the residual tolerance: split the rows into a
/// reconstruction part (fraction `split_fraction`) and a validation part,
/// fit on the former for every candidate eps_r, keep the candidate with the
/// smallest validation residual and return sqrt(M / M_r) * eps_r.  With
/// `repeats` > 1 the validation residuals of independent splits are summed.
/// With `lift_infeasible` a candidate below the least-squares floor of the
/// reconstruction rows is raised to that floor instead of being discarded.
inline CvResult cross_validate_epsilon(const Eigen::Ref<const Matrix>& psi, const Eigen::Ref<const Vector>& u,
                                       const std::vector<double>& candidates, double split_fraction,
                                       RngStream& rng, int repeats = 1, const BpdnOptions& opts = {},
                                       bool lift_infeasible = false) {
  const Eigen::Index m = psi.rows();
  if (u.size() != m) throw InvalidArgument("cross_validate_epsilon: dimension mismatch");
  if (candidates.empty()) throw InvalidArgument("cross_validate_epsilon: no candidates");
  if (!(split_fraction > 0.0 && split_fraction < 1.0))
    throw InvalidArgument("cross_validate_epsilon: split fraction must lie in (0, 1)");
  if (m < 2) throw InvalidArgument("cross_validate_epsilon: need at least two samples");
  if (repeats < 1) throw InvalidArgument("cross_validate_epsilon: repeats must be >= 1");

  const Eigen::Index mr = std::clamp<Eigen::Index>(
      static_cast<Eigen::Index>(std::llround(split_fraction * static_cast<double>(m))), 1, m - 1);
  CvResult res;
  res.reconstruction_rows = mr;
  res.validation_residuals.assign(candidates.size(), 0.0);
  std::vector<double> effective = candidates;

  for (int rep = 0; rep < repeats; ++rep) {
    const std::vector<std::size_t> perm = random_permutation(rng, static_cast<std::size_t>(m));
    Matrix psi_r(mr, psi.cols()), psi_v(m - mr, psi.cols());
    Vector u_r(mr), u_v(m - mr);
    for (Eigen::Index i = 0; i < m; ++i) {
      const auto src = static_cast<Eigen::Index>(perm[static_cast<std::size_t>(i)]);
      if (i < mr) {
        psi_r.row(i) = psi.row(src);
        u_r[i] = u[src];
      } else {
        psi_v.row(i - mr) = psi.row(src);
        u_v[i - mr] = u[src];
      }
    }
    const std::vector<PathPoint> pts = trace_lasso_path(psi_r, u_r, candidates, opts);
    for (std::size_t k = 0; k < candidates.size(); ++k) {
      if (!pts[k].feasible) {
        if (lift_infeasible && pts[k].reached) {
          effective[k] = std::max(effective[k], pts[k].residual * (1.0 + 1e-6));
        } else {
          res.validation_residuals[k] = std::numeric_limits<double>::infinity();
          continue;
        }
      }
      res.validation_residuals[k] += (psi_v * pts[k].x - u_v).norm();
    }
  }

  std::size_t best = candidates.size();
  for (std::size_t k = 0; k < candidates.size(); ++k) {
    if (!std::isfinite(res.validation_residuals[k])) continue;
    if (best == candidates.size() || res.validation_residuals[k] < res.validation_residuals[best]) best = k;
  }
  if (best == candidates.size()) throw Infeasible("cross_validate_epsilon: every candidate is infeasible");
  res.epsilon_r = effective[best];
  res.validation = res.validation_residuals[best];
  res.epsilon = std::sqrt(static_cast<double>(m) / static_cast<double>(mr)) * res.epsilon_r;
  return res;
}

}  // namespace rpce
