#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "rpce/harness.hpp"

using namespace rpce;

namespace {

json small_config() {
  return json::parse(R"({
    "problem": {"name": "ridge", "d": 4},
    "methods": ["mc", "l1", "adm"],
    "M_values": [20, 40],
    "replicates": 3,
    "basis": {"order": 3},
    "reference": {"type": "exact"},
    "rel_l2_samples": 2000,
    "seed": 7,
    "adm": {"max_rotations": 3}
  })");
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    out.push_back(f);
  }
  return out;
}

double moment_oracle_mean(const Vector& v) { return v.sum() / static_cast<double>(v.size()); }

double moment_oracle_std(const Vector& v) {
  const double m = moment_oracle_mean(v);
  double s = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) s += (v[i] - m) * (v[i] - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

SurrogateModel ridge_truth_model(int d) {
  // Exact expansion of the ridge function in eta = sum(xi)/sqrt(d).
  SurrogateModel m;
  m.basis = std::make_shared<const MultiIndexBasis>(1, 3);
  const double rd = std::sqrt(static_cast<double>(d));
  const double a = rd, b = 0.25 * d, c = 0.025 * d * rd;
  // a x + b x^2 + c x^3 in He_n / sqrt(n!)
  m.coeffs = Vector(4);
  m.coeffs << b, a + 3.0 * c, b * std::sqrt(2.0), c * std::sqrt(6.0);
  m.rotation = Matrix::Identity(1, 1);
  m.reduction = Matrix::Constant(1, d, 1.0 / rd);
  return m;
}

Qoi ridge_qoi() {
  return [](std::span<const double> x) { return ridge_eval(x); };
}

}  // namespace

TEST(Metrics, MomentErrorArithmetic) {
  const MomentErrors e = moment_errors(1.1, 1.0, Reference{1.0, 2.0, 0.0, 0.0});
  EXPECT_NEAR(e.mean, 0.1, 1e-12);
  EXPECT_NEAR(e.std, 0.5, 1e-12);
  EXPECT_FALSE(e.mean_absolute);
  const MomentErrors z = moment_errors(3.0, 2.0, Reference{3.0, 2.0, 0.0, 0.0});
  EXPECT_EQ(z.mean, 0.0);
  EXPECT_EQ(z.std, 0.0);
  const MomentErrors a = moment_errors(0.25, 1.0, Reference{0.0, 1.0, 0.0, 0.0});
  EXPECT_TRUE(a.mean_absolute);
  EXPECT_NEAR(a.mean, 0.25, 1e-15);
  EXPECT_THROW(moment_errors(0.0, 1.0, Reference{1.0, 0.0, 0.0, 0.0}), DegenerateInput);
}

TEST(Metrics, SampleMomentsMatchDirectFormulas) {
  RngStream rng(3, 3);
  const Vector u = sample_std_normal(rng, 57, 1).col(0).array() * 2.0 + 5.0;
  const Reference ref{5.0, 2.0, 0.0, 0.0};
  const MomentErrors e = moment_errors_from_samples(u, ref);
  EXPECT_NEAR(e.mean, std::abs(moment_oracle_mean(u) - 5.0) / 5.0, 1e-14);
  EXPECT_NEAR(e.std, std::abs(moment_oracle_std(u) - 2.0) / 2.0, 1e-14);
}

TEST(Metrics, RelativeL2ExactModelIsNearZero) {
  const int d = 5;
  RngStream rng(4, 4);
  const RelL2 r = relative_l2(ridge_truth_model(d), ridge_qoi(), 5000, rng);
  EXPECT_LE(r.value, 1e-12);
}

TEST(Metrics, RelativeL2OfZeroModelIsOne) {
  SurrogateModel zero;
  zero.basis = std::make_shared<const MultiIndexBasis>(2, 1);
  zero.coeffs = Vector::Zero(3);
  zero.rotation = Matrix::Identity(2, 2);
  RngStream rng(5, 5);
  const Qoi psi1 = [](std::span<const double> x) { return x[0]; };
  const RelL2 r = relative_l2(zero, psi1, 4000, rng);
  EXPECT_NEAR(r.value, 1.0, 1e-12);
  EXPECT_THROW(relative_l2(zero, psi1, 999, rng), InvalidArgument);
}

// A perturbed model against an independent 1e6-sample estimate.
TEST(Metrics, RelativeL2AgreesWithLargeIndependentEstimate) {
  const int d = 4;
  SurrogateModel m = ridge_truth_model(d);
  m.coeffs[1] *= 0.9;
  m.coeffs[3] += 0.3;
  RngStream small(6, 1);
  const RelL2 est = relative_l2(m, ridge_qoi(), 20000, small);
  RngStream big(6, 2);
  double num = 0.0, den = 0.0;
  const Eigen::Index n = 1'000'000;
  const Qoi f = ridge_qoi();
  for (Eigen::Index chunk = 0; chunk < n; chunk += 100000) {
    const Matrix x = sample_std_normal(big, 100000, d);
    const Vector approx = evaluate(m, x);
    for (Eigen::Index q = 0; q < x.rows(); ++q) {
      const Vector row = x.row(q).transpose();
      const double t = f(std::span<const double>(row.data(), d));
      num += (approx[q] - t) * (approx[q] - t);
      den += t * t;
    }
  }
  const double oracle = std::sqrt(num / den);
  EXPECT_GT(est.std_error, 0.0);
  EXPECT_LE(std::abs(est.value - oracle), 3.0 * est.std_error * std::sqrt(1.0 + 20000.0 / 1e6));
}

TEST(Metrics, ClosedFormMomentsMatchMonteCarloOnModel) {
  const SurrogateModel m = ridge_truth_model(3);
  const Moments mo = moments(m);
  RngStream rng(8, 8);
  const Vector v = evaluate(m, sample_std_normal(rng, 1'000'000, 3));
  const double mean = moment_oracle_mean(v);
  const double sd = moment_oracle_std(v);
  EXPECT_LE(std::abs(mean - mo.mean), 3.0 * sd / 1000.0);
  // Variance SE from the fourth central moment.
  double m4 = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) m4 += std::pow(v[i] - mean, 4);
  m4 /= static_cast<double>(v.size());
  EXPECT_LE(std::abs(sd * sd - mo.variance), 3.0 * std::sqrt((m4 - std::pow(sd, 4)) / 1e6));
}

TEST(Metrics, NearestRankQuantiles) {
  const std::vector<double> v{5, 1, 4, 2, 3};
  EXPECT_EQ(nearest_rank(v, 0.25), 2);
  EXPECT_EQ(nearest_rank(v, 0.5), 3);
  EXPECT_EQ(nearest_rank(v, 0.75), 4);
  EXPECT_EQ(nearest_rank(v, 1.0), 5);
  const std::vector<double> four{10, 20, 30, 40};
  EXPECT_EQ(nearest_rank(four, 0.25), 10);
  EXPECT_EQ(nearest_rank(four, 0.5), 20);
  EXPECT_EQ(nearest_rank(four, 0.75), 30);
  EXPECT_TRUE(std::isnan(nearest_rank({}, 0.5)));
}

TEST(Metrics, FormatDoubleRoundTrips) {
  for (double v : {0.1, 1.0 / 3.0, 1e-300, -2.5e17, 123456.789})
    EXPECT_EQ(std::strtod(format_double(v).c_str(), nullptr), v);
  EXPECT_EQ(format_double(std::nan("")), "nan");
}

TEST(Problems, ExactReferencesMatchMonteCarlo) {
  for (const char* name : {"ridge", "highdim"}) {
    ProblemConfig pc;
    pc.name = name;
    pc.d = std::string(name) == "ridge" ? 6 : 50;
    const Problem p(pc, 1);
    const ProblemInstance inst = p.instance(0);
    ASSERT_TRUE(inst.exact.has_value());
    const Reference mc = mc_reference(inst.qoi, pc.d, 400000, 2, 2);
    EXPECT_LE(std::abs(mc.mean - inst.exact->mean), 4.0 * mc.mean_se) << name;
    EXPECT_LE(std::abs(mc.std - inst.exact->std), 4.0 * mc.std_se) << name;
  }
}

TEST(Problems, CompressibleExactReferenceFromCoefficients) {
  ProblemConfig pc;
  pc.name = "compressible";
  pc.d = 3;
  const Problem p(pc, 4);
  const ProblemInstance a = p.instance(0), b = p.instance(1);
  ASSERT_TRUE(a.exact && b.exact);
  EXPECT_NE(a.exact->mean, b.exact->mean);
  const Reference mc = mc_reference(a.qoi, 3, 200000, 5, 5);
  EXPECT_LE(std::abs(mc.mean - a.exact->mean), 4.0 * mc.mean_se);
  EXPECT_LE(std::abs(mc.std - a.exact->std), 4.0 * mc.std_se);
  pc.pin_signal = true;
  const Problem pinned(pc, 4);
  EXPECT_EQ(pinned.instance(0).exact->mean, pinned.instance(5).exact->mean);
}

TEST(Config, MinimalConfigGetsDefaults) {
  const ExperimentConfig c = parse_config(json::parse(R"({"problem":{"name":"kdv"},"methods":["mc"],"M_values":[10]})"));
  EXPECT_EQ(c.problem.d, 100);
  EXPECT_EQ(c.replicates, 1);
  EXPECT_EQ(c.order, 3);
  EXPECT_EQ(c.reference.type, "mc");
  EXPECT_EQ(c.reference.samples, 100000);
  EXPECT_EQ(c.adm.max_rotations, 9);
  EXPECT_FALSE(c.record_timing);
}

TEST(Config, StrictSchema) {
  auto bad = [](const std::string& text) { return parse_config(json::parse(text)); };
  const std::string base = R"("methods":["mc"],"M_values":[10])";
  EXPECT_THROW(bad(R"({"problem":{"name":"ridge"},)" + base + R"(,"extra":1})"), ConfigError);
  EXPECT_THROW(bad(R"({"problem":{"name":"ridge","dd":3},)" + base + "}"), ConfigError);
  EXPECT_THROW(bad(R"({"problem":{"name":"ridge"},)" + base + R"(,"adm":{"thetaa":1}})"), ConfigError);
  EXPECT_THROW(bad(R"({"problem":{"name":"nope"},)" + base + "}"), ConfigError);
  EXPECT_THROW(bad(R"({"problem":{"name":"ridge"},"methods":["mc","mc"],"M_values":[10]})"), ConfigError);
  EXPECT_THROW(bad(R"({"problem":{"name":"ridge"},"methods":["lasso"],"M_values":[10]})"), ConfigError);
  EXPECT_THROW(bad(R"({"problem":{"name":"ridge"},"methods":["mc"],"M_values":[0]})"), ConfigError);
  EXPECT_THROW(bad(R"({"problem":{"name":"ridge"},"methods":["mc"],"M_values":[10.5]})"), ConfigError);
  EXPECT_THROW(bad(R"({"problem":{"name":"ridge"},)" + base + R"(,"replicates":0})"), ConfigError);
  EXPECT_THROW(bad(R"({"problem":{"name":"ridge"},"methods":["sadmdr"],"M_values":[10]})"), ConfigError);
  EXPECT_THROW(bad(R"({"problem":{"name":"ridge","d":4},"methods":["sadmdr"],"M_values":[10],"d_tilde":4})"),
               ConfigError);
  EXPECT_THROW(bad(R"({"problem":{"name":"kdv"},)" + base + R"(,"reference":{"type":"exact"}})"), ConfigError);
  EXPECT_THROW(bad(R"({"problem":{"name":"ridge"},)" + base + R"(,"rel_l2_samples":10})"), ConfigError);
  EXPECT_THROW(bad(R"({"problem":{"name":"ridge"},)" + base + R"(,"basis":{"mode":"sparse"}})"), ConfigError);
  EXPECT_THROW(bad(R"({"problem":{"name":"ridge"},)" + base + R"(,"seed":-1})"), ConfigError);
  EXPECT_THROW(bad(R"({"problem":{"name":"ridge"},)" + base + R"(,"replicates":"3"})"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/config.json"), ConfigError);
}

TEST(Config, EchoReparsesToTheSameHash) {
  const ExperimentConfig c = parse_config(small_config());
  const ExperimentConfig again = parse_config(config_to_json(c));
  EXPECT_EQ(config_hash(c), config_hash(again));
  json changed = small_config();
  changed["seed"] = 8;
  EXPECT_NE(config_hash(c), config_hash(parse_config(changed)));
}

TEST(Experiment, McOnlyEchoesSampleStatistics) {
  json j = json::parse(R"({"problem":{"name":"ridge","d":3},"methods":["mc"],"M_values":[25],
                          "replicates":1,"reference":{"type":"exact"},"seed":11})");
  const ExperimentReport r = run_experiment(parse_config(j));
  ASSERT_EQ(r.rows.size(), 1u);
  // Training set of replicate r is stream (seed, mix_ids(r, 0x7241)).
  RngStream rng(11, mix_ids(0u, 0x7241u));
  const Matrix x = sample_std_normal(rng, 25, 3);
  const Vector u = evaluate_qoi(ridge_qoi(), x);
  const double v = 3.0;
  const double mean = 0.25 * v;
  const double sd = std::sqrt(v + 3.0 * 0.0625 * v * v + 15.0 * 0.025 * 0.025 * v * v * v + 6.0 * 0.025 * v * v -
                              0.0625 * v * v);
  EXPECT_NEAR(r.rows[0].err_mean, std::abs(moment_oracle_mean(u) - mean) / mean, 1e-12);
  EXPECT_NEAR(r.rows[0].err_std, std::abs(moment_oracle_std(u) - sd) / sd, 1e-12);
  EXPECT_EQ(r.cells.size(), 1u);
  EXPECT_EQ(r.cells[0].err_mean.mean, r.rows[0].err_mean);
}

TEST(Experiment, ByteIdenticalAcrossRunsAndThreadCounts) {
  const ExperimentConfig c = parse_config(small_config());
  setenv("RPCE_THREADS", "1", 1);
  const ExperimentReport a = run_experiment(c);
  setenv("RPCE_THREADS", "3", 1);
  const ExperimentReport b = run_experiment(c);
  unsetenv("RPCE_THREADS");
  EXPECT_EQ(report_csv(a), report_csv(b));
  EXPECT_EQ(report_summary(a).dump(2), report_summary(b).dump(2));
  EXPECT_EQ(report_tsv(a), report_tsv(b));
  EXPECT_EQ(a.rows.size(), 3u * 2u * 3u);
}

TEST(Experiment, SummaryRecomputesFromCsvRows) {
  const ExperimentReport r = run_experiment(parse_config(small_config()));
  const auto csv = parse_csv(report_csv(r));
  ASSERT_EQ(csv[0], (std::vector<std::string>{"method", "M", "replicate", "err_mean", "err_std", "rel_l2", "N",
                                               "d_tilde", "converged", "seconds"}));
  const json s = report_summary(r);
  for (const json& cell : s["cells"]) {
    std::vector<double> em, es, l2;
    for (std::size_t i = 1; i < csv.size(); ++i) {
      if (csv[i][0] != cell["method"] || std::stoll(csv[i][1]) != cell["M"].get<long long>()) continue;
      em.push_back(std::strtod(csv[i][3].c_str(), nullptr));
      es.push_back(std::strtod(csv[i][4].c_str(), nullptr));
      if (csv[i][5] != "nan") l2.push_back(std::strtod(csv[i][5].c_str(), nullptr));
      EXPECT_EQ(csv[i][9], "0");
    }
    const Stat sm = summarize(em), ss = summarize(es);
    EXPECT_EQ(cell["err_mean"]["mean"].get<double>(), sm.mean);
    EXPECT_EQ(cell["err_mean"]["q25"].get<double>(), sm.q25);
    EXPECT_EQ(cell["err_mean"]["q75"].get<double>(), sm.q75);
    EXPECT_EQ(cell["err_mean"]["median"].get<double>(), sm.median);
    EXPECT_EQ(cell["err_std"]["mean"].get<double>(), ss.mean);
    EXPECT_LE(cell["err_mean"]["q25"].get<double>(), cell["err_mean"]["q75"].get<double>());
    if (cell["method"] == "mc") {
      EXPECT_TRUE(cell["rel_l2"].is_null());
    } else {
      ASSERT_EQ(l2.size(), 3u);
      EXPECT_EQ(cell["rel_l2"]["mean"].get<double>(), summarize(l2).mean);
    }
  }
  EXPECT_EQ(s["provenance"]["seed"], 7);
  EXPECT_EQ(s["provenance"]["version"], kVersion);
  EXPECT_EQ(s["provenance"]["config_hash"].get<std::string>().size(), 16u);
}

TEST(Experiment, PairedTrainingSetsAcrossMethods) {
  json j = small_config();
  j["methods"] = {"mc", "l1", "rwl1"};
  j["replicates"] = 2;
  const ExperimentReport r = run_experiment(parse_config(j));
  for (int rep = 0; rep < 2; ++rep) {
    for (long long m : {20LL, 40LL}) {
      int seen = 0;
      for (const ReplicateRow& row : r.rows)
        if (row.replicate == rep && row.m == m) ++seen;
      EXPECT_EQ(seen, 3);
    }
  }
  // The mc row depends only on the training set; regenerate it.
  RngStream rng(7, mix_ids(1u, 0x7241u));
  const Matrix x = sample_std_normal(rng, 40, 4);
  const Vector u = evaluate_qoi(ridge_qoi(), x).head(20);
  const ProblemConfig pc = parse_config(j).problem;
  const Reference ref = *Problem(pc, 7).instance(0).exact;
  for (const ReplicateRow& row : r.rows)
    if (row.method == "mc" && row.replicate == 1 && row.m == 20)
      EXPECT_EQ(row.err_mean, moment_errors_from_samples(u, ref).mean);
}

TEST(Experiment, FailureQuotaMarksPartialResults) {
  // More SIR slices than samples makes every SIR-started fit throw.
  json j = json::parse(R"({"problem":{"name":"ridge","d":2},"methods":["mc","sadm"],"M_values":[12],
                          "replicates":2,"basis":{"order":1},"reference":{"type":"exact"},
                          "adm":{"slices":20}})");
  const ExperimentReport r = run_experiment(parse_config(j));
  int failed = 0;
  for (const ReplicateRow& row : r.rows)
    if (row.failed) ++failed;
  EXPECT_EQ(failed, 2);
  EXPECT_TRUE(r.partial);
  EXPECT_FALSE(r.warnings.empty());
  for (const CellSummary& c : r.cells) EXPECT_EQ(c.quota_exceeded, c.method == "sadm");
  EXPECT_NE(report_csv(r).find("sadm,12,0,nan,nan,nan"), std::string::npos);
}

TEST(Experiment, ReductionMethodsAndAdvisory) {
  json j = json::parse(R"({"problem":{"name":"ridge","d":4},"methods":["sadmdr","gradient_dr"],"M_values":[40],
                          "replicates":1,"d_tilde":1,"order_reduced":3,"reference":{"type":"exact"},
                          "adm":{"max_rotations":2}})");
  const ExperimentReport r = run_experiment(parse_config(j));
  ASSERT_EQ(r.rows.size(), 2u);
  for (const ReplicateRow& row : r.rows) {
    EXPECT_FALSE(row.failed) << row.error;
    EXPECT_EQ(row.n_basis, 4);
    EXPECT_EQ(row.d_tilde, 1);
    EXPECT_TRUE(std::isfinite(row.err_mean));
  }
  // N = 4 < 2M = 80.
  ASSERT_EQ(r.advisories.size(), 2u);
  EXPECT_NE(r.advisories[0].find("outside [2M, 5M]"), std::string::npos);
  EXPECT_EQ(r.theta.at("sadmdr"), 0.25);
}

TEST(Experiment, WritesReportFiles) {
  json j = small_config();
  const auto dir = std::filesystem::temp_directory_path() / "rpce_harness_test_out";
  std::filesystem::remove_all(dir);
  j["output"] = {{"dir", dir.string()}, {"prefix", "run"}, {"tsv", true}};
  j["methods"] = {"mc"};
  const ExperimentReport r = run_experiment(parse_config(j));
  const ReportPaths p = write_report(r);
  std::ifstream csv(p.csv), sum(p.summary), tsv(p.tsv);
  ASSERT_TRUE(csv && sum && tsv);
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, "method,M,replicate,err_mean,err_std,rel_l2,N,d_tilde,converged,seconds");
  const json s = json::parse(sum);
  EXPECT_EQ(s["cells"].size(), 2u);
  std::string first;
  std::getline(tsv, first);
  EXPECT_EQ(first, "# method=mc");
  std::filesystem::remove_all(dir);
}
