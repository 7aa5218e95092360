#pragma once

// Experiment orchestration: strict JSON configs, the built-in problem
// registry, paired replicate runs over a method matrix, error metrics and
// deterministic reports (per-replicate CSV, summary JSON, gnuplot TSV).

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "rpce/error.hpp"
#include "rpce/hermite.hpp"
#include "rpce/problems.hpp"
#include "rpce/rotate.hpp"

#ifndef RPCE_VERSION
#define RPCE_VERSION "0.1.0"
#endif

namespace rpce {

using json = nlohmann::json;
using Qoi = std::function<double(std::span<const double>)>;

inline constexpr const char* kVersion = RPCE_VERSION;

// ------------------------------------------------------------- metrics --

struct RelL2 {
  double value = 0.0;
  double std_error = 0.0;
};

/// ||model - truth|| / ||truth|| estimated on given points, with a
/// delta-method standard error for the ratio of the two sample means.
inline RelL2 relative_l2(const SurrogateModel& model, const Matrix& points, const Vector& truth) {
  const auto n = points.rows();
  if (n < 2 || truth.size() != n) throw InvalidArgument("relative_l2: need matching points and truth values");
  const Vector approx = evaluate(model, points);
  const Eigen::ArrayXd e2 = (approx - truth).array().square();
  const Eigen::ArrayXd u2 = truth.array().square();
  const double a = e2.mean();
  const double b = u2.mean();
  if (!(b > 0.0) || std::sqrt(b) <= 1e-300) throw DegenerateInput("relative_l2: truth norm is zero");
  const double nd = static_cast<double>(n);
  const double va = (e2 - a).square().sum() / (nd - 1.0);
  const double vb = (u2 - b).square().sum() / (nd - 1.0);
  const double cab = ((e2 - a) * (u2 - b)).sum() / (nd - 1.0);
  const double ratio = a / b;
  const double var_ratio = std::max(0.0, (va / (b * b) - 2.0 * cab * a / (b * b * b) + a * a * vb / (b * b * b * b)) / nd);
  RelL2 out;
  out.value = std::sqrt(ratio);
  out.std_error = out.value > 0.0 ? std::sqrt(var_ratio) / (2.0 * out.value) : std::sqrt(std::sqrt(var_ratio));
  return out;
}

inline Vector evaluate_qoi(const Qoi& f, const Matrix& points) {
  Vector out(points.rows());
  Vector row(points.cols());
  for (Eigen::Index q = 0; q < points.rows(); ++q) {
    row = points.row(q).transpose();
    out[q] = f(std::span<const double>(row.data(), static_cast<std::size_t>(row.size())));
  }
  return out;
}

inline RelL2 relative_l2(const SurrogateModel& model, const Qoi& truth, Eigen::Index n_mc, RngStream& rng) {
  if (n_mc < 1000) throw InvalidArgument("relative_l2: n_mc must be >= 1000");
  const Matrix x = sample_std_normal(rng, n_mc, model.input_dim());
  return relative_l2(model, x, evaluate_qoi(truth, x));
}

struct Reference {
  double mean = 0.0;
  double std = 0.0;
  double mean_se = 0.0;  // zero for exact references
  double std_se = 0.0;
};

struct MomentErrors {
  double mean = 0.0;
  double std = 0.0;
  bool mean_absolute = false;  // reference mean was zero
};

inline MomentErrors moment_errors(double mean, double std, const Reference& ref) {
  if (!(ref.std > 0.0)) throw DegenerateInput("moment_errors: reference std must be positive");
  MomentErrors e;
  e.mean_absolute = std::abs(ref.mean) <= 1e-14 * ref.std;
  e.mean = e.mean_absolute ? std::abs(mean - ref.mean) : std::abs(mean - ref.mean) / std::abs(ref.mean);
  e.std = std::abs(std - ref.std) / ref.std;
  return e;
}

inline MomentErrors moment_errors(const SurrogateModel& model, const Reference& ref) {
  const Moments m = moments(model);
  return moment_errors(m.mean, std::sqrt(m.variance), ref);
}

// Direct Monte-Carlo estimate from the outputs themselves.
inline MomentErrors moment_errors_from_samples(const Vector& outputs, const Reference& ref) {
  if (outputs.size() < 2) throw InvalidArgument("moment_errors: need at least two samples");
  const double mean = outputs.mean();
  const double var = (outputs.array() - mean).square().sum() / static_cast<double>(outputs.size() - 1);
  return moment_errors(mean, std::sqrt(var), ref);
}

// Nearest-rank quantile of unsorted values, p in (0, 1].
inline double nearest_rank(std::vector<double> v, double p) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const auto n = static_cast<double>(v.size());
  const auto rank = static_cast<std::size_t>(std::max(1.0, std::ceil(p * n - 1e-12)));
  return v[std::min(rank, v.size()) - 1];
}

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Shortest decimal that round-trips; "nan" and "inf" spelled out.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

// -------------------------------------------------------------- config --

namespace detail {

inline void allow_keys(const json& obj, const std::string& where, std::initializer_list<const char*> keys) {
  if (!obj.is_object()) throw ConfigError(where + ": expected an object");
  std::set<std::string> ok(keys.begin(), keys.end());
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (!ok.count(it.key())) throw ConfigError(where + ": unknown key '" + it.key() + "'");
}

inline long long get_int(const json& obj, const char* key, long long fallback, const std::string& where) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_number_integer()) throw ConfigError(where + "." + key + ": expected an integer");
  return v.get<long long>();
}

inline double get_real(const json& obj, const char* key, double fallback, const std::string& where) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_number()) throw ConfigError(where + "." + key + ": expected a number");
  return v.get<double>();
}

inline bool get_bool(const json& obj, const char* key, bool fallback, const std::string& where) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_boolean()) throw ConfigError(where + "." + key + ": expected true or false");
  return v.get<bool>();
}

inline std::string get_string(const json& obj, const char* key, const std::string& fallback, const std::string& where) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_string()) throw ConfigError(where + "." + key + ": expected a string");
  return v.get<std::string>();
}

inline std::vector<double> get_reals(const json& obj, const char* key, const std::string& where) {
  std::vector<double> out;
  if (!obj.contains(key)) return out;
  const json& v = obj.at(key);
  if (!v.is_array()) throw ConfigError(where + "." + key + ": expected an array");
  for (const json& e : v) {
    if (!e.is_number()) throw ConfigError(where + "." + key + ": expected numbers");
    out.push_back(e.get<double>());
  }
  return out;
}

}  // namespace detail

struct ProblemConfig {
  std::string name = "ridge";
  int d = 0;  // 0: problem default
  double sigma = 0.4;
  double corr_length = 0.1;
  int signal_order = 3;
  bool pin_signal = false;
  int nx = 61;
  int ny = 31;
  double corr_x = 300.0;
  double corr_y = 300.0;
  std::string kl_method = "grid";
};

inline const std::vector<std::string>& problem_names() {
  static const std::vector<std::string> names{"ridge", "compressible", "kdv", "groundwater", "highdim"};
  return names;
}

inline int default_problem_dim(const std::string& name) {
  if (name == "ridge") return 12;
  if (name == "compressible") return 20;
  if (name == "kdv" || name == "groundwater") return 100;
  if (name == "highdim") return 500;
  throw ConfigError("unknown problem '" + name + "'");
}

inline ProblemConfig parse_problem(const json& j) {
  const std::string w = "problem";
  detail::allow_keys(j, w, {"name", "d", "sigma", "corr_length", "signal_order", "pin_signal", "nx", "ny", "corr_x",
                            "corr_y", "kl_method"});
  ProblemConfig p;
  p.name = detail::get_string(j, "name", "", w);
  if (p.name.empty()) throw ConfigError("problem.name is required");
  p.d = static_cast<int>(detail::get_int(j, "d", default_problem_dim(p.name), w));
  p.sigma = detail::get_real(j, "sigma", p.sigma, w);
  p.corr_length = detail::get_real(j, "corr_length", p.corr_length, w);
  p.signal_order = static_cast<int>(detail::get_int(j, "signal_order", p.signal_order, w));
  p.pin_signal = detail::get_bool(j, "pin_signal", p.pin_signal, w);
  p.nx = static_cast<int>(detail::get_int(j, "nx", p.nx, w));
  p.ny = static_cast<int>(detail::get_int(j, "ny", p.ny, w));
  p.corr_x = detail::get_real(j, "corr_x", p.corr_x, w);
  p.corr_y = detail::get_real(j, "corr_y", p.corr_y, w);
  p.kl_method = detail::get_string(j, "kl_method", p.kl_method, w);
  if (p.d < 1) throw ConfigError("problem.d must be >= 1");
  if (!(p.corr_length > 0.0) || !(p.corr_x > 0.0) || !(p.corr_y > 0.0))
    throw ConfigError("problem: correlation lengths must be positive");
  if (p.signal_order < 0) throw ConfigError("problem.signal_order must be >= 0");
  if (p.nx < 2 || p.ny < 3) throw ConfigError("problem: groundwater grid too small");
  if (p.kl_method != "grid" && p.kl_method != "analytic") throw ConfigError("problem.kl_method must be grid or analytic");
  if (p.name == "groundwater" && p.kl_method == "grid" &&
      static_cast<std::size_t>(p.d) > static_cast<std::size_t>(p.nx) * static_cast<std::size_t>(p.ny))
    throw ConfigError("problem.d exceeds the grid KL mode count");
  return p;
}

inline json problem_to_json(const ProblemConfig& p) {
  json j{{"name", p.name}, {"d", p.d}};
  if (p.name == "compressible") {
    j["signal_order"] = p.signal_order;
    j["pin_signal"] = p.pin_signal;
  } else if (p.name == "kdv") {
    j["sigma"] = p.sigma;
    j["corr_length"] = p.corr_length;
  } else if (p.name == "groundwater") {
    j["nx"] = p.nx;
    j["ny"] = p.ny;
    j["corr_x"] = p.corr_x;
    j["corr_y"] = p.corr_y;
    j["kl_method"] = p.kl_method;
  }
  return j;
}

/// One draw of a problem: the QoI and, where known, its exact moments.
struct ProblemInstance {
  Qoi qoi;
  std::optional<Reference> exact;
};

/// A built problem. Expensive tables (KL, FD topology) are built once and
/// shared; instance(r) is cheap except for the compressible signal draw.
class Problem {
 public:
  Problem(ProblemConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), seed_(seed) {
    const std::string& n = cfg_.name;
    if (n == "kdv") {
      kdv_ = std::make_shared<const KdvModel>(static_cast<std::size_t>(cfg_.d), cfg_.sigma, cfg_.corr_length);
    } else if (n == "groundwater") {
      GroundwaterSpec s;
      s.terms = static_cast<std::size_t>(cfg_.d);
      s.nx = cfg_.nx;
      s.ny = cfg_.ny;
      s.corr_x = cfg_.corr_x;
      s.corr_y = cfg_.corr_y;
      s.kl_method = cfg_.kl_method == "grid" ? KlMethod::grid : KlMethod::analytic;
      gw_ = std::make_shared<const GroundwaterModel>(s);
    } else if (n != "ridge" && n != "compressible" && n != "highdim") {
      throw ConfigError("unknown problem '" + n + "'");
    }
  }

  const ProblemConfig& config() const { return cfg_; }
  int dim() const { return cfg_.d; }

  ProblemInstance instance(std::size_t replicate) const {
    ProblemInstance inst;
    const std::string& n = cfg_.name;
    if (n == "ridge") {
      inst.qoi = [](std::span<const double> x) { return ridge_eval(x); };
      // s ~ N(0, d): E s^2 = v, E s^4 = 3 v^2, E s^6 = 15 v^3.
      const double v = cfg_.d;
      const double a = 0.25, b = 0.025;
      const double m2 = v + 3.0 * a * a * v * v + 15.0 * b * b * v * v * v + 6.0 * b * v * v;
      inst.exact = Reference{a * v, std::sqrt(m2 - a * a * v * v), 0.0, 0.0};
    } else if (n == "compressible") {
      RngStream rng(seed_, mix_ids(cfg_.pin_signal ? 0 : replicate, 0xC0FFEEu));
      auto f = std::make_shared<const CompressibleFunction>(compressible_make(cfg_.d, cfg_.signal_order, rng));
      inst.qoi = [f](std::span<const double> x) { return (*f)(x); };
      const Vector& c = f->coeffs;
      inst.exact = Reference{c[0], c.tail(c.size() - 1).norm(), 0.0, 0.0};
    } else if (n == "kdv") {
      auto m = kdv_;
      inst.qoi = [m](std::span<const double> x) { return (*m)(x); };
    } else if (n == "groundwater") {
      auto m = gw_;
      inst.qoi = [m](std::span<const double> x) { return (*m)(x); };
    } else {
      inst.qoi = [](std::span<const double> x) { return highdim_eval(x); };
      // 2 - sum sin(i) xi_i / i is N(2, s2), so u is log-normal.
      double s2 = 0.0;
      for (int i = 1; i <= cfg_.d; ++i) s2 += std::pow(std::sin(i) / i, 2);
      inst.exact = Reference{std::exp(2.0 + 0.5 * s2), std::sqrt(std::expm1(s2) * std::exp(4.0 + s2)), 0.0, 0.0};
    }
    return inst;
  }

  json describe() const {
    json j = problem_to_json(cfg_);
    const std::string& n = cfg_.name;
    if (n == "ridge") j["qoi"] = "s + s^2/4 + s^3/40, s = sum xi_i";
    if (n == "compressible") j["qoi"] = "sum c_n psi_n(xi), c_n = U[-1,1] / n^1.5 on the total-degree basis";
    if (n == "kdv") j["qoi"] = "sigma sum A_i xi_i - 2 sech^2(2 + 6 sigma sum B_i xi_i), soliton at x=6, t=1";
    if (n == "groundwater") j["qoi"] = "head at (200, 500) for div(exp(S) grad u) = 0 on [0,2000]x[0,1000]";
    if (n == "highdim") j["qoi"] = "exp(2 - sum sin(i) xi_i / i)";
    if (gw_) {
      const auto& ev = gw_->kl().eigenvalues;
      j["kl_capture"] = std::accumulate(ev.begin(), ev.end(), 0.0) / gw_->kl().trace();
    }
    if (kdv_) {
      const auto& ev = kdv_->kl().eigenvalues;
      j["kl_capture"] = std::accumulate(ev.begin(), ev.end(), 0.0);
    }
    return j;
  }

 private:
  ProblemConfig cfg_;
  std::uint64_t seed_;
  std::shared_ptr<const KdvModel> kdv_;
  std::shared_ptr<const GroundwaterModel> gw_;
};

inline const std::vector<std::string>& method_names() {
  static const std::vector<std::string> names{"mc", "l1", "rwl1", "adm", "sadm", "sadmdr", "gradient_dr"};
  return names;
}

inline bool is_reduction_method(const std::string& m) { return m == "sadmdr" || m == "gradient_dr"; }

struct ReferenceConfig {
  std::string type = "mc";  // mc | exact | file | given
  long long samples = 100000;
  std::string path;
  double mean = 0.0;
  double std = 0.0;
};

struct ExperimentConfig {
  ProblemConfig problem;
  std::vector<std::string> methods;
  std::vector<long long> m_values;
  int replicates = 1;
  int order = 3;
  BasisMode mode = BasisMode::full;
  int d_tilde = 0;
  int order_reduced = 3;
  BasisMode mode_reduced = BasisMode::full;
  AdmOptions adm;
  ReferenceConfig reference;
  long long rel_l2_samples = 0;  // 0 disables rel_l2
  std::uint64_t seed = 1;
  std::string output_dir = ".";
  std::string output_prefix = "experiment";
  bool write_tsv = true;
  bool record_timing = false;
  double max_failure_fraction = 0.2;
};

inline ExperimentConfig parse_config(const json& j) {
  detail::allow_keys(j, "config", {"problem", "methods", "M_values", "replicates", "basis", "d_tilde", "order_reduced",
                                   "mode_reduced", "adm", "reference", "rel_l2_samples", "seed", "output",
                                   "record_timing", "max_failure_fraction"});
  ExperimentConfig c;
  if (!j.contains("problem")) throw ConfigError("config.problem is required");
  c.problem = parse_problem(j.at("problem"));

  if (!j.contains("methods") || !j.at("methods").is_array() || j.at("methods").empty())
    throw ConfigError("config.methods must be a non-empty array");
  for (const json& m : j.at("methods")) {
    if (!m.is_string()) throw ConfigError("config.methods: expected strings");
    const auto name = m.get<std::string>();
    if (std::find(method_names().begin(), method_names().end(), name) == method_names().end())
      throw ConfigError("config.methods: unknown method '" + name + "'");
    if (std::find(c.methods.begin(), c.methods.end(), name) != c.methods.end())
      throw ConfigError("config.methods: duplicate method '" + name + "'");
    c.methods.push_back(name);
  }

  if (!j.contains("M_values") || !j.at("M_values").is_array() || j.at("M_values").empty())
    throw ConfigError("config.M_values must be a non-empty array");
  for (const json& m : j.at("M_values")) {
    if (!m.is_number_integer() || m.get<long long>() < 2) throw ConfigError("config.M_values: integers >= 2 required");
    c.m_values.push_back(m.get<long long>());
  }

  c.replicates = static_cast<int>(detail::get_int(j, "replicates", 1, "config"));
  if (c.replicates < 1) throw ConfigError("config.replicates must be >= 1");

  if (j.contains("basis")) {
    const json& b = j.at("basis");
    detail::allow_keys(b, "basis", {"order", "mode"});
    c.order = static_cast<int>(detail::get_int(b, "order", c.order, "basis"));
    try {
      c.mode = basis_mode_from_string(detail::get_string(b, "mode", "full", "basis"));
    } catch (const InvalidArgument& e) {
      throw ConfigError(std::string("basis.mode: ") + e.what());
    }
  }
  if (c.order < 0) throw ConfigError("basis.order must be >= 0");

  c.d_tilde = static_cast<int>(detail::get_int(j, "d_tilde", 0, "config"));
  c.order_reduced = static_cast<int>(detail::get_int(j, "order_reduced", c.order, "config"));
  try {
    c.mode_reduced = basis_mode_from_string(detail::get_string(j, "mode_reduced", "full", "config"));
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("mode_reduced: ") + e.what());
  }
  const bool needs_reduction = std::any_of(c.methods.begin(), c.methods.end(), is_reduction_method);
  if (needs_reduction && (c.d_tilde < 1 || c.d_tilde >= c.problem.d))
    throw ConfigError("config.d_tilde must satisfy 1 <= d_tilde < d for reduction methods");
  if (c.order_reduced < 0) throw ConfigError("config.order_reduced must be >= 0");

  if (j.contains("adm")) {
    const json& a = j.at("adm");
    const std::string w = "adm";
    detail::allow_keys(a, w, {"theta", "max_rotations", "eps_grid_per_iter", "cv_candidates", "split_fraction",
                              "cv_repeats", "slices", "reweighted", "reweight_iters", "reweight_delta_rel"});
    c.adm.theta = detail::get_real(a, "theta", 0.0, w);
    c.adm.max_rotations = static_cast<int>(detail::get_int(a, "max_rotations", c.adm.max_rotations, w));
    c.adm.eps_grid_per_iter = static_cast<int>(detail::get_int(a, "eps_grid_per_iter", c.adm.eps_grid_per_iter, w));
    c.adm.cv_relative_candidates = detail::get_reals(a, "cv_candidates", w);
    c.adm.split_fraction = detail::get_real(a, "split_fraction", c.adm.split_fraction, w);
    c.adm.cv_repeats = static_cast<int>(detail::get_int(a, "cv_repeats", c.adm.cv_repeats, w));
    c.adm.slices = static_cast<int>(detail::get_int(a, "slices", 0, w));
    c.adm.reweighted = detail::get_bool(a, "reweighted", false, w);
    c.adm.reweight_iters = static_cast<int>(detail::get_int(a, "reweight_iters", c.adm.reweight_iters, w));
    c.adm.reweight_delta_rel = detail::get_real(a, "reweight_delta_rel", c.adm.reweight_delta_rel, w);
  }
  if (c.adm.max_rotations < 1) throw ConfigError("adm.max_rotations must be >= 1");
  if (c.adm.eps_grid_per_iter < 1) throw ConfigError("adm.eps_grid_per_iter must be >= 1");
  if (!(c.adm.split_fraction > 0.0 && c.adm.split_fraction < 1.0)) throw ConfigError("adm.split_fraction must be in (0, 1)");
  if (c.adm.cv_repeats < 1) throw ConfigError("adm.cv_repeats must be >= 1");
  if (c.adm.slices < 0 || c.adm.slices == 1) throw ConfigError("adm.slices must be 0 (default) or >= 2");
  if (c.adm.reweight_iters < 1) throw ConfigError("adm.reweight_iters must be >= 1");
  for (double e : c.adm.cv_relative_candidates)
    if (!(e >= 0.0)) throw ConfigError("adm.cv_candidates must be non-negative");
  if (!(c.adm.reweight_delta_rel > 0.0)) throw ConfigError("adm.reweight_delta_rel must be positive");

  if (j.contains("reference")) {
    const json& r = j.at("reference");
    detail::allow_keys(r, "reference", {"type", "samples", "path", "mean", "std"});
    c.reference.type = detail::get_string(r, "type", "mc", "reference");
    c.reference.samples = detail::get_int(r, "samples", c.reference.samples, "reference");
    c.reference.path = detail::get_string(r, "path", "", "reference");
    c.reference.mean = detail::get_real(r, "mean", 0.0, "reference");
    c.reference.std = detail::get_real(r, "std", 0.0, "reference");
  }
  const std::string& rt = c.reference.type;
  if (rt != "mc" && rt != "exact" && rt != "file" && rt != "given")
    throw ConfigError("reference.type must be mc, exact, file or given");
  if (rt == "mc" && c.reference.samples < 2) throw ConfigError("reference.samples must be >= 2");
  if (rt == "file" && c.reference.path.empty()) throw ConfigError("reference.path is required for type file");
  if (rt == "given" && !(c.reference.std > 0.0)) throw ConfigError("reference.std must be positive");
  if (rt == "exact" && (c.problem.name == "kdv" || c.problem.name == "groundwater"))
    throw ConfigError("reference.type exact is not available for problem " + c.problem.name);

  c.rel_l2_samples = detail::get_int(j, "rel_l2_samples", 0, "config");
  if (c.rel_l2_samples != 0 && c.rel_l2_samples < 1000) throw ConfigError("rel_l2_samples must be 0 or >= 1000");

  if (j.contains("seed")) {
    const json& s = j.at("seed");
    if (!s.is_number_unsigned() && !(s.is_number_integer() && s.get<long long>() >= 0))
      throw ConfigError("config.seed must be a non-negative integer");
    c.seed = s.get<std::uint64_t>();
  }
  if (j.contains("output")) {
    const json& o = j.at("output");
    detail::allow_keys(o, "output", {"dir", "prefix", "tsv"});
    c.output_dir = detail::get_string(o, "dir", c.output_dir, "output");
    c.output_prefix = detail::get_string(o, "prefix", c.output_prefix, "output");
    c.write_tsv = detail::get_bool(o, "tsv", c.write_tsv, "output");
  }
  c.record_timing = detail::get_bool(j, "record_timing", false, "config");
  c.max_failure_fraction = detail::get_real(j, "max_failure_fraction", 0.2, "config");
  if (!(c.max_failure_fraction >= 0.0 && c.max_failure_fraction <= 1.0))
    throw ConfigError("max_failure_fraction must be in [0, 1]");
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
  return parse_config(j);
}

// Normalized echo of a config with every default filled in.
inline json config_to_json(const ExperimentConfig& c) {
  json adm{{"theta", c.adm.theta},
           {"max_rotations", c.adm.max_rotations},
           {"eps_grid_per_iter", c.adm.eps_grid_per_iter},
           {"cv_candidates", c.adm.cv_relative_candidates},
           {"split_fraction", c.adm.split_fraction},
           {"cv_repeats", c.adm.cv_repeats},
           {"slices", c.adm.slices},
           {"reweighted", c.adm.reweighted},
           {"reweight_iters", c.adm.reweight_iters},
           {"reweight_delta_rel", c.adm.reweight_delta_rel}};
  json ref{{"type", c.reference.type}};
  if (c.reference.type == "mc") ref["samples"] = c.reference.samples;
  if (c.reference.type == "file") ref["path"] = c.reference.path;
  if (c.reference.type == "given") {
    ref["mean"] = c.reference.mean;
    ref["std"] = c.reference.std;
  }
  return json{{"problem", problem_to_json(c.problem)},
              {"methods", c.methods},
              {"M_values", c.m_values},
              {"replicates", c.replicates},
              {"basis", {{"order", c.order}, {"mode", to_string(c.mode)}}},
              {"d_tilde", c.d_tilde},
              {"order_reduced", c.order_reduced},
              {"mode_reduced", to_string(c.mode_reduced)},
              {"adm", adm},
              {"reference", ref},
              {"rel_l2_samples", c.rel_l2_samples},
              {"seed", c.seed},
              {"output", {{"dir", c.output_dir}, {"prefix", c.output_prefix}, {"tsv", c.write_tsv}}},
              {"record_timing", c.record_timing},
              {"max_failure_fraction", c.max_failure_fraction}};
}

inline std::uint64_t config_hash(const ExperimentConfig& c) { return fnv1a64(config_to_json(c).dump()); }

// -------------------------------------------------------------- report --

struct ReplicateRow {
  std::string method;
  long long m = 0;
  int replicate = 0;
  double err_mean = std::numeric_limits<double>::quiet_NaN();
  double err_std = std::numeric_limits<double>::quiet_NaN();
  double rel_l2 = std::numeric_limits<double>::quiet_NaN();
  double rel_l2_se = std::numeric_limits<double>::quiet_NaN();
  long long n_basis = 0;
  int d_tilde = 0;
  bool converged = false;
  double seconds = 0.0;
  bool failed = false;
  std::string error;
};

struct Stat {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double median = std::numeric_limits<double>::quiet_NaN();
  double q25 = std::numeric_limits<double>::quiet_NaN();
  double q75 = std::numeric_limits<double>::quiet_NaN();
};

inline Stat summarize(const std::vector<double>& v) {
  Stat s;
  if (v.empty()) return s;
  double sum = 0.0;
  for (double x : v) sum += x;
  s.mean = sum / static_cast<double>(v.size());
  s.median = nearest_rank(v, 0.5);
  s.q25 = nearest_rank(v, 0.25);
  s.q75 = nearest_rank(v, 0.75);
  return s;
}

struct CellSummary {
  std::string method;
  long long m = 0;
  int ok = 0;
  int failed = 0;
  int converged = 0;
  Stat err_mean;
  Stat err_std;
  std::optional<Stat> rel_l2;
  long long n_basis = 0;
  int d_tilde = 0;
  bool quota_exceeded = false;
  double mean_seconds = 0.0;
};

struct ExperimentReport {
  ExperimentConfig config;
  std::vector<ReplicateRow> rows;  // replicate-major, then M, then method
  std::vector<CellSummary> cells;  // method-major, then M
  Reference reference;
  bool mean_error_absolute = false;
  std::vector<std::string> advisories;
  std::vector<std::string> warnings;
  std::map<std::string, double> theta;  // per method, the stop threshold used
  bool partial = false;
};

inline std::string report_csv(const ExperimentReport& r) {
  std::ostringstream os;
  os << "method,M,replicate,err_mean,err_std,rel_l2,N,d_tilde,converged,seconds\n";
  for (const ReplicateRow& row : r.rows) {
    os << row.method << ',' << row.m << ',' << row.replicate << ',' << format_double(row.err_mean) << ','
       << format_double(row.err_std) << ',' << format_double(row.rel_l2) << ',' << row.n_basis << ','
       << row.d_tilde << ',' << (row.converged ? 1 : 0) << ',' << format_double(row.seconds) << '\n';
  }
  return os.str();
}

namespace detail {

inline json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline json stat_json(const Stat& s) {
  return json{{"mean", number_or_null(s.mean)},
              {"median", number_or_null(s.median)},
              {"q25", number_or_null(s.q25)},
              {"q75", number_or_null(s.q75)}};
}

inline std::string hex64(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace detail

inline json report_summary(const ExperimentReport& r) {
  json cells = json::array();
  for (const CellSummary& c : r.cells) {
    json j{{"method", c.method},
           {"M", c.m},
           {"replicates_ok", c.ok},
           {"replicates_failed", c.failed},
           {"converged", c.converged},
           {"N", c.n_basis},
           {"d_tilde", c.d_tilde},
           {"err_mean", detail::stat_json(c.err_mean)},
           {"err_std", detail::stat_json(c.err_std)},
           {"rel_l2", c.rel_l2 ? detail::stat_json(*c.rel_l2) : json(nullptr)},
           {"quota_exceeded", c.quota_exceeded}};
    if (r.config.record_timing) j["mean_seconds"] = c.mean_seconds;
    cells.push_back(j);
  }
  json theta = json::object();
  for (const auto& [k, v] : r.theta) theta[k] = v;
  return json{{"provenance",
               {{"library", "rpce"},
                {"version", kVersion},
                {"config_hash", detail::hex64(config_hash(r.config))},
                {"seed", r.config.seed}}},
              {"config", config_to_json(r.config)},
              {"reference",
               {{"mean", r.reference.mean},
                {"std", r.reference.std},
                {"mean_se", r.reference.mean_se},
                {"std_se", r.reference.std_se},
                {"mean_error_absolute", r.mean_error_absolute}}},
              {"theta", theta},
              {"cells", cells},
              {"advisories", r.advisories},
              {"warnings", r.warnings},
              {"partial", r.partial}};
}

// One gnuplot index block per method: M, then mean/median/q25/q75 of each
// metric.
inline std::string report_tsv(const ExperimentReport& r) {
  std::ostringstream os;
  bool first = true;
  for (const std::string& method : r.config.methods) {
    if (!first) os << "\n\n";
    first = false;
    os << "# method=" << method << "\n";
    os << "# M\terr_mean\terr_mean_median\terr_mean_q25\terr_mean_q75\terr_std\terr_std_median\terr_std_q25\t"
          "err_std_q75\trel_l2\trel_l2_median\trel_l2_q25\trel_l2_q75\n";
    for (const CellSummary& c : r.cells) {
      if (c.method != method) continue;
      const Stat none;
      const Stat& l2 = c.rel_l2 ? *c.rel_l2 : none;
      os << c.m;
      for (const Stat* s : {&c.err_mean, &c.err_std, &l2})
        for (double v : {s->mean, s->median, s->q25, s->q75}) os << '\t' << format_double(v);
      os << '\n';
    }
  }
  return os.str();
}

// ------------------------------------------------------------- running --

inline int worker_count(int tasks) {
  int n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* env = std::getenv("RPCE_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) n = std::min<long>(n, v);
  }
  return std::max(1, std::min(n, tasks));
}

inline Reference read_reference_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read reference '" + path + "'");
  json j;
  try {
    in >> j;
    detail::allow_keys(j, "reference file", {"mean", "std", "mean_se", "std_se"});
    Reference r{j.at("mean").get<double>(), j.at("std").get<double>(), j.value("mean_se", 0.0), j.value("std_se", 0.0)};
    if (!(r.std > 0.0)) throw ConfigError("reference file: std must be positive");
    return r;
  } catch (const json::exception& e) {
    throw ConfigError("reference '" + path + "': " + e.what());
  }
}

/// Reference moments by plain Monte Carlo in chunks, with standard errors.
inline Reference mc_reference(const Qoi& f, int dim, long long samples, std::uint64_t seed, std::uint64_t stream) {
  RngStream rng(seed, stream);
  double mean = 0.0, m2 = 0.0, m4 = 0.0;
  long long n = 0;
  const long long chunk = 4096;
  std::vector<double> all;
  all.reserve(static_cast<std::size_t>(samples));
  for (long long done = 0; done < samples; done += chunk) {
    const auto rows = static_cast<Eigen::Index>(std::min(chunk, samples - done));
    const Vector u = evaluate_qoi(f, sample_std_normal(rng, rows, dim));
    for (Eigen::Index q = 0; q < rows; ++q) {
      all.push_back(u[q]);
      ++n;
      const double delta = u[q] - mean;
      mean += delta / static_cast<double>(n);
      m2 += delta * (u[q] - mean);
    }
  }
  const double nd = static_cast<double>(n);
  const double var = m2 / (nd - 1.0);
  for (double v : all) {
    const double c = v - mean;
    m4 += c * c * c * c;
  }
  Reference r;
  r.mean = mean;
  r.std = std::sqrt(var);
  r.mean_se = std::sqrt(var / nd);
  // SE of the sample std from the fourth central moment.
  const double mu4 = m4 / nd;
  r.std_se = r.std > 0.0 ? std::sqrt(std::max(0.0, (mu4 - var * var) / nd)) / (2.0 * r.std) : 0.0;
  return r;
}

namespace detail {

struct FitOutcome {
  SurrogateModel model;
  long long n_basis = 0;
  int d_tilde = 0;
};

inline FitOutcome fit_method(const std::string& method, const Matrix& x, const Vector& u, const ExperimentConfig& cfg,
                             const std::shared_ptr<const MultiIndexBasis>& full_basis, AdmOptions opts) {
  FitOutcome out;
  const int d = static_cast<int>(x.cols());
  if (method == "rwl1") opts.reweighted = true;
  if (method == "l1" || method == "rwl1") {
    if (method == "l1") opts.reweighted = false;
    out.model = fit_l1(x, u, full_basis, opts);
    out.n_basis = static_cast<long long>(full_basis->size());
    out.d_tilde = d;
  } else if (method == "adm" || method == "sadm") {
    out.model = fit_adm(x, u, full_basis, opts, method == "adm" ? AdmInit::identity : AdmInit::sir);
    out.n_basis = static_cast<long long>(full_basis->size());
    out.d_tilde = d;
  } else if (method == "sadmdr") {
    out.model = fit_sadmdr(x, u, cfg.d_tilde, cfg.order_reduced, opts, cfg.mode_reduced);
    out.n_basis = static_cast<long long>(out.model.basis->size());
    out.d_tilde = cfg.d_tilde;
  } else if (method == "gradient_dr") {
    out.model = fit_gradient_reduced(x, u, full_basis, cfg.d_tilde, cfg.order_reduced, opts, cfg.mode_reduced);
    out.n_basis = static_cast<long long>(out.model.basis->size());
    out.d_tilde = cfg.d_tilde;
  } else {
    throw ConfigError("unknown method '" + method + "'");
  }
  return out;
}

}  // namespace detail

/// Runs every (replicate, M, method) cell. Replicates run in parallel, one
/// RNG stream per replicate; all methods in a (replicate, M) cell share one
/// training set, the first M rows of the replicate's sample draw.
inline ExperimentReport run_experiment(const ExperimentConfig& cfg) {
  ExperimentReport rep;
  rep.config = cfg;
  const Problem problem(cfg.problem, cfg.seed);
  const int d = problem.dim();
  const bool needs_full_basis = std::any_of(cfg.methods.begin(), cfg.methods.end(), [](const std::string& m) {
    return m == "l1" || m == "rwl1" || m == "adm" || m == "sadm" || m == "gradient_dr";
  });
  std::shared_ptr<const MultiIndexBasis> full_basis;
  if (needs_full_basis) {
    try {
      full_basis = std::make_shared<const MultiIndexBasis>(d, cfg.order, cfg.mode);
    } catch (const CapacityError& e) {
      throw ConfigError(std::string("basis: ") + e.what());
    }
  }
  const long long max_m = *std::max_element(cfg.m_values.begin(), cfg.m_values.end());

  // Fixed reference unless the QoI itself changes per replicate.
  const bool per_replicate = cfg.problem.name == "compressible" && !cfg.problem.pin_signal;
  auto reference_for = [&](const ProblemInstance& inst) -> Reference {
    const std::string& t = cfg.reference.type;
    if (t == "exact") return *inst.exact;
    if (t == "given") return Reference{cfg.reference.mean, cfg.reference.std, 0.0, 0.0};
    if (t == "file") return read_reference_file(cfg.reference.path);
    return mc_reference(inst.qoi, d, cfg.reference.samples, cfg.seed, mix_ids(0x5EFu, 0u));
  };
  std::optional<Reference> shared_ref;
  if (!per_replicate) shared_ref = reference_for(problem.instance(0));

  // Shared rel-L2 test points.
  Matrix test_x;
  Vector shared_truth;
  if (cfg.rel_l2_samples > 0) {
    RngStream trng(cfg.seed, mix_ids(0x7E57u, 0u));
    test_x = sample_std_normal(trng, static_cast<Eigen::Index>(cfg.rel_l2_samples), d);
    if (!per_replicate) shared_truth = evaluate_qoi(problem.instance(0).qoi, test_x);
  }

  std::map<std::string, double> theta;
  for (const std::string& m : cfg.methods) {
    if (m == "mc") continue;
    const int dim = is_reduction_method(m) ? cfg.d_tilde : d;
    theta[m] = cfg.adm.theta > 0.0 ? cfg.adm.theta : default_theta(dim);
  }
  rep.theta = theta;

  std::vector<std::vector<ReplicateRow>> per_rep(static_cast<std::size_t>(cfg.replicates));
  std::vector<Reference> rep_refs(static_cast<std::size_t>(cfg.replicates));
  std::atomic<int> next{0};
  std::exception_ptr fatal;
  std::mutex fatal_mu;

  auto work = [&]() {
    for (;;) {
      const int r = next.fetch_add(1);
      if (r >= cfg.replicates) return;
      try {
        const ProblemInstance inst = problem.instance(static_cast<std::size_t>(r));
        const Reference ref = shared_ref ? *shared_ref : reference_for(inst);
        rep_refs[static_cast<std::size_t>(r)] = ref;
        const Vector truth = cfg.rel_l2_samples > 0 && !shared_ref ? evaluate_qoi(inst.qoi, test_x) : shared_truth;
        RngStream srng(cfg.seed, mix_ids(static_cast<std::uint64_t>(r), 0x7241u));
        const Matrix all_x = sample_std_normal(srng, static_cast<Eigen::Index>(max_m), d);
        const Vector all_u = evaluate_qoi(inst.qoi, all_x);
        auto& rows = per_rep[static_cast<std::size_t>(r)];
        for (std::size_t mi = 0; mi < cfg.m_values.size(); ++mi) {
          const auto m = static_cast<Eigen::Index>(cfg.m_values[mi]);
          const Matrix x = all_x.topRows(m);
          const Vector u = all_u.head(m);
          for (const std::string& method : cfg.methods) {
            ReplicateRow row;
            row.method = method;
            row.m = cfg.m_values[mi];
            row.replicate = r;
            const auto t0 = std::chrono::steady_clock::now();
            try {
              if (method == "mc") {
                const MomentErrors e = moment_errors_from_samples(u, ref);
                row.err_mean = e.mean;
                row.err_std = e.std;
                row.d_tilde = d;
                row.converged = true;
              } else {
                AdmOptions opts = cfg.adm;
                opts.seed = cfg.seed;
                opts.stream = mix_ids(static_cast<std::uint64_t>(r), mi, 0xF17u);
                opts.theta = theta.at(method);
                const detail::FitOutcome fit = detail::fit_method(method, x, u, cfg, full_basis, opts);
                const MomentErrors e = moment_errors(fit.model, ref);
                row.err_mean = e.mean;
                row.err_std = e.std;
                row.n_basis = fit.n_basis;
                row.d_tilde = fit.d_tilde;
                row.converged = fit.model.converged;
                if (cfg.rel_l2_samples > 0) {
                  const RelL2 l2 = relative_l2(fit.model, test_x, truth);
                  row.rel_l2 = l2.value;
                  row.rel_l2_se = l2.std_error;
                }
              }
              if (!std::isfinite(row.err_mean) || !std::isfinite(row.err_std))
                throw NumericalFailure("non-finite error metric");
            } catch (const Error& e) {
              row.failed = true;
              row.error = e.what();
              row.err_mean = row.err_std = row.rel_l2 = std::numeric_limits<double>::quiet_NaN();
              row.converged = false;
            }
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            row.seconds = cfg.record_timing ? secs : 0.0;
            rows.push_back(std::move(row));
          }
        }
      } catch (...) {
        std::lock_guard<std::mutex> lock(fatal_mu);
        if (!fatal) fatal = std::current_exception();
        next.store(cfg.replicates);
        return;
      }
    }
  };

  const int workers = worker_count(cfg.replicates);
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < workers; ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (fatal) std::rethrow_exception(fatal);

  for (auto& rows : per_rep)
    for (auto& row : rows) rep.rows.push_back(std::move(row));

  rep.reference = shared_ref ? *shared_ref : rep_refs.front();
  rep.mean_error_absolute = moment_errors(0.0, 1.0, rep.reference).mean_absolute;
  if (per_replicate)
    rep.warnings.push_back("reference moments differ per replicate; the summary reference is replicate 0's");

  for (const std::string& method : cfg.methods) {
    double prev_secs = -1.0;
    for (long long m : cfg.m_values) {
      CellSummary c;
      c.method = method;
      c.m = m;
      std::vector<double> em, es, l2, secs;
      for (const ReplicateRow& row : rep.rows) {
        if (row.method != method || row.m != m) continue;
        c.n_basis = std::max(c.n_basis, row.n_basis);
        if (row.d_tilde) c.d_tilde = row.d_tilde;
        if (row.failed) {
          ++c.failed;
          continue;
        }
        ++c.ok;
        if (row.converged) ++c.converged;
        em.push_back(row.err_mean);
        es.push_back(row.err_std);
        if (!std::isnan(row.rel_l2)) l2.push_back(row.rel_l2);
        secs.push_back(row.seconds);
      }
      c.err_mean = summarize(em);
      c.err_std = summarize(es);
      if (!l2.empty()) c.rel_l2 = summarize(l2);
      c.mean_seconds = summarize(secs).mean;
      c.quota_exceeded = c.failed > cfg.max_failure_fraction * cfg.replicates;
      if (c.quota_exceeded) rep.partial = true;
      if (method != "mc" && c.n_basis > 0 && (c.n_basis < 2 * m || c.n_basis > 5 * m))
        rep.advisories.push_back(method + " at M=" + std::to_string(m) + ": N=" + std::to_string(c.n_basis) +
                                 " is outside [2M, 5M]");
      if (cfg.record_timing && c.ok > 0) {
        if (c.mean_seconds < prev_secs)
          rep.warnings.push_back(method + ": mean wall time decreases at M=" + std::to_string(m));
        prev_secs = c.mean_seconds;
      }
      rep.cells.push_back(c);
    }
  }
  for (const ReplicateRow& row : rep.rows)
    if (row.failed)
      rep.warnings.push_back(row.method + " M=" + std::to_string(row.m) + " replicate " +
                             std::to_string(row.replicate) + " failed: " + row.error);
  return rep;
}

struct ReportPaths {
  std::string csv;
  std::string summary;
  std::string tsv;
};

inline ReportPaths write_report(const ExperimentReport& r) {
  namespace fs = std::filesystem;
  const fs::path dir(r.config.output_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create output directory '" + dir.string() + "'");
  ReportPaths p;
  p.csv = (dir / (r.config.output_prefix + ".csv")).string();
  p.summary = (dir / (r.config.output_prefix + ".summary.json")).string();
  auto write = [](const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write '" + path + "'");
    out << text;
  };
  write(p.csv, report_csv(r));
  write(p.summary, report_summary(r).dump(2) + "\n");
  if (r.config.write_tsv) {
    p.tsv = (dir / (r.config.output_prefix + ".tsv")).string();
    write(p.tsv, report_tsv(r));
  }
  return p;
}

}  // namespace rpce
