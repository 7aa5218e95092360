// rpce command-line front end.
//
// Exit codes: 0 success, 2 configuration or usage error, 3 numerical
// failure, 4 partial results (failure quota exceeded).

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "rpce/rpce.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kNumericalFailure = 3;
constexpr int kPartial = 4;

struct Table {
  std::vector<std::string> header;
  rpce::Matrix values;
};

// Comma-separated numbers with one header row.
Table read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw rpce::ConfigError("cannot read '" + path + "'");
  Table t;
  std::string line;
  if (!std::getline(in, line)) throw rpce::ConfigError("'" + path + "' is empty");
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) t.header.push_back(cell);
  }
  std::vector<std::vector<double>> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      char* end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      if (end == cell.c_str()) throw rpce::ConfigError(path + ":" + std::to_string(lineno) + ": not a number");
      row.push_back(v);
    }
    if (row.size() != t.header.size())
      throw rpce::ConfigError(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(t.header.size()) +
                              " fields");
    rows.push_back(std::move(row));
  }
  t.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(t.header.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      t.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return t;
}

std::ostream& open_out(const std::string& path, std::ofstream& file) {
  if (path.empty() || path == "-") return std::cout;
  file.open(path);
  if (!file) throw rpce::ConfigError("cannot write '" + path + "'");
  return file;
}

void write_samples(std::ostream& os, const rpce::Matrix& x, const rpce::Vector& u) {
  for (Eigen::Index j = 0; j < x.cols(); ++j) os << "xi" << j + 1 << ',';
  os << "u\n";
  for (Eigen::Index q = 0; q < x.rows(); ++q) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) os << rpce::format_double(x(q, j)) << ',';
    os << rpce::format_double(u[q]) << '\n';
  }
}

rpce::ProblemConfig problem_config(const std::string& name, int d) {
  rpce::json j{{"name", name}};
  if (d > 0) j["d"] = d;
  return rpce::parse_problem(j);
}

int cmd_problems_list() {
  for (const std::string& n : rpce::problem_names())
    std::cout << n << "\td=" << rpce::default_problem_dim(n) << '\n';
  return kOk;
}

int cmd_problems_describe(const std::string& name, int d) {
  const rpce::Problem p(problem_config(name, d), 0);
  std::cout << p.describe().dump(2) << '\n';
  return kOk;
}

int cmd_problems_sample(const std::string& name, int d, long long n, std::uint64_t seed, const std::string& out) {
  if (n < 1) throw rpce::ConfigError("--n must be >= 1");
  const rpce::Problem p(problem_config(name, d), seed);
  rpce::RngStream rng(seed, rpce::mix_ids(0x5A3u, 0u));
  const rpce::Matrix x = rpce::sample_std_normal(rng, static_cast<Eigen::Index>(n), p.dim());
  const rpce::Vector u = rpce::evaluate_qoi(p.instance(0).qoi, x);
  std::ofstream file;
  write_samples(open_out(out, file), x, u);
  return kOk;
}

struct FitArgs {
  std::string samples;
  std::string method = "adm";
  int order = 3;
  std::string mode = "full";
  int d_tilde = 0;
  int order_reduced = -1;
  std::uint64_t seed = 1;
  int max_rotations = 9;
  double theta = 0.0;
  bool reweighted = false;
  std::vector<double> cv;
  std::string out;
};

int cmd_fit(const FitArgs& a) {
  const Table t = read_csv(a.samples);
  if (t.values.cols() < 2) throw rpce::ConfigError("samples need at least one input column and the output column");
  const rpce::Matrix x = t.values.leftCols(t.values.cols() - 1);
  const rpce::Vector u = t.values.col(t.values.cols() - 1);
  const int d = static_cast<int>(x.cols());
  rpce::AdmOptions opts;
  opts.seed = a.seed;
  opts.max_rotations = a.max_rotations;
  opts.theta = a.theta;
  opts.reweighted = a.reweighted || a.method == "rwl1";
  opts.cv_relative_candidates = a.cv;
  const rpce::BasisMode mode = rpce::basis_mode_from_string(a.mode);
  const int pr = a.order_reduced >= 0 ? a.order_reduced : a.order;
  rpce::SurrogateModel model;
  auto full = [&] { return std::make_shared<const rpce::MultiIndexBasis>(d, a.order, mode); };
  if (a.method == "l1" || a.method == "rwl1") {
    model = rpce::fit_l1(x, u, full(), opts);
  } else if (a.method == "adm" || a.method == "sadm") {
    model = rpce::fit_adm(x, u, full(), opts, a.method == "adm" ? rpce::AdmInit::identity : rpce::AdmInit::sir);
  } else if (a.method == "sadmdr") {
    model = rpce::fit_sadmdr(x, u, a.d_tilde, pr, opts, mode);
  } else if (a.method == "gradient_dr") {
    model = rpce::fit_gradient_reduced(x, u, full(), a.d_tilde, pr, opts, mode);
  } else {
    throw rpce::ConfigError("unknown method '" + a.method + "'");
  }
  std::ofstream file;
  open_out(a.out, file) << rpce::model_to_json(model).dump(1) << '\n';
  const rpce::Moments mo = rpce::moments(model);
  std::cerr << "N=" << model.basis->size() << " mean=" << mo.mean << " std=" << std::sqrt(mo.variance)
            << " converged=" << (model.converged ? "yes" : "no") << '\n';
  return kOk;
}

int cmd_eval(const std::string& model_path, const std::string& points, const std::string& out) {
  const rpce::SurrogateModel model = rpce::load_model(model_path);
  const Table t = read_csv(points);
  rpce::Matrix x = t.values;
  // A trailing output column (as written by `problems sample`) is ignored.
  if (x.cols() == model.input_dim() + 1 && t.header.back() == "u") x = rpce::Matrix(x.leftCols(x.cols() - 1));
  if (x.cols() != model.input_dim())
    throw rpce::ConfigError("points have " + std::to_string(x.cols()) + " columns, model expects " +
                            std::to_string(model.input_dim()));
  const rpce::Vector u = rpce::evaluate(model, x);
  std::ofstream file;
  std::ostream& os = open_out(out, file);
  os << "u_hat\n";
  for (Eigen::Index q = 0; q < u.size(); ++q) os << rpce::format_double(u[q]) << '\n';
  return kOk;
}

int cmd_experiment(const std::string& path, const std::string& out_dir, bool quiet) {
  rpce::ExperimentConfig cfg = rpce::load_config(path);
  if (!out_dir.empty()) cfg.output_dir = out_dir;
  const rpce::ExperimentReport rep = rpce::run_experiment(cfg);
  const rpce::ReportPaths paths = rpce::write_report(rep);
  if (!quiet) {
    std::cout << std::left << std::setw(12) << "method" << std::setw(8) << "M" << std::setw(6) << "ok"
              << std::setw(14) << "err_mean med" << std::setw(14) << "err_std med" << "rel_l2 med\n";
    for (const rpce::CellSummary& c : rep.cells) {
      std::cout << std::setw(12) << c.method << std::setw(8) << c.m << std::setw(6) << c.ok << std::setw(14)
                << c.err_mean.median << std::setw(14) << c.err_std.median
                << (c.rel_l2 ? std::to_string(c.rel_l2->median) : std::string("-")) << '\n';
    }
    for (const std::string& a : rep.advisories) std::cout << "advisory: " << a << '\n';
    std::cout << "wrote " << paths.csv << ", " << paths.summary << (paths.tsv.empty() ? "" : ", " + paths.tsv)
              << '\n';
  }
  for (const std::string& w : rep.warnings) std::cerr << "warning: " << w << '\n';
  return rep.partial ? kPartial : kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse Hermite chaos surrogates with rotations and dimension reduction"};
  app.require_subcommand(1);

  auto* version = app.add_subcommand("version", "Print the library version");

  auto* problems = app.add_subcommand("problems", "Built-in benchmark problems");
  problems->require_subcommand(1);
  auto* plist = problems->add_subcommand("list", "List problem names and default dimensions");
  std::string pname;
  int pdim = 0;
  auto* pdesc = problems->add_subcommand("describe", "Print a problem's parameters as JSON");
  pdesc->add_option("name", pname, "Problem name")->required();
  pdesc->add_option("--d", pdim, "Dimension (default: the problem's own)");
  auto* psample = problems->add_subcommand("sample", "Write n samples (xi..., u) as CSV");
  long long pn = 100;
  std::uint64_t pseed = 1;
  std::string pout;
  psample->add_option("name", pname, "Problem name")->required();
  psample->add_option("--d", pdim, "Dimension");
  psample->add_option("--n", pn, "Number of samples");
  psample->add_option("--seed", pseed, "Seed");
  psample->add_option("-o,--out", pout, "Output file (default stdout)");

  FitArgs fa;
  auto* fit = app.add_subcommand("fit", "Fit one model from a CSV sample file (last column is the output)");
  fit->add_option("samples", fa.samples, "Sample CSV")->required();
  fit->add_option("--method", fa.method, "l1, rwl1, adm, sadm, sadmdr or gradient_dr");
  fit->add_option("--order", fa.order, "Total order P of the full basis");
  fit->add_option("--mode", fa.mode, "Basis mode: full or no_interaction");
  fit->add_option("--d-tilde", fa.d_tilde, "Reduced dimension for sadmdr and gradient_dr");
  fit->add_option("--order-reduced", fa.order_reduced, "Order of the reduced basis (default --order)");
  fit->add_option("--seed", fa.seed, "Seed for cross-validation splits");
  fit->add_option("--max-rotations", fa.max_rotations, "ADM rotation cap");
  fit->add_option("--theta", fa.theta, "ADM stop threshold (default from d)");
  fit->add_flag("--reweighted", fa.reweighted, "Use re-weighted l1 inside every solve");
  fit->add_option("--cv", fa.cv, "Cross-validation tolerances relative to ||u||");
  fit->add_option("-o,--out", fa.out, "Model file (default stdout)");

  std::string model_path, points, eout;
  auto* eval = app.add_subcommand("eval", "Evaluate a saved model at points from a CSV file");
  eval->add_option("model", model_path, "Model JSON")->required();
  eval->add_option("points", points, "Point CSV")->required();
  eval->add_option("-o,--out", eout, "Output file (default stdout)");

  std::string cfg_path, out_dir;
  bool quiet = false;
  auto* exp = app.add_subcommand("experiment", "Run an experiment config and write its reports");
  exp->add_option("config", cfg_path, "Config JSON")->required();
  exp->add_option("--out-dir", out_dir, "Override output.dir");
  exp->add_flag("-q,--quiet", quiet, "No summary table");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*version) {
      std::cout << "rpce " << rpce::kVersion << '\n';
      return kOk;
    }
    if (*plist) return cmd_problems_list();
    if (*pdesc) return cmd_problems_describe(pname, pdim);
    if (*psample) return cmd_problems_sample(pname, pdim, pn, pseed, pout);
    if (*fit) return cmd_fit(fa);
    if (*eval) return cmd_eval(model_path, points, eout);
    if (*exp) return cmd_experiment(cfg_path, out_dir, quiet);
  } catch (const rpce::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const rpce::InvalidArgument& e) {
    std::cerr << "invalid argument: " << e.what() << '\n';
    return kConfigError;
  } catch (const rpce::Error& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumericalFailure;
  }
  return kConfigError;
}
