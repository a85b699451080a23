#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "oracles.hpp"
#include "uxprop/experiment.hpp"

using namespace uxprop;
namespace fs = std::filesystem;

namespace {

const std::string kData = UXPROP_DATA_DIR;
const std::string kFixtures = UXPROP_FIXTURE_DIR;

std::vector<CurvePoint> read_fixture(const std::string& name) {
  std::ifstream in(kFixtures + "/" + name);
  std::string line;
  std::getline(in, line);
  std::vector<CurvePoint> c;
  while (std::getline(in, line)) {
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ss(line);
    CurvePoint p;
    ss >> p.sigma2 >> p.mue_lin >> p.mue_mc;
    c.push_back(p);
  }
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

MueRecord record(std::size_t id, const std::string& explainer, double sigma, double lin, double mc,
                 std::string flag = "") {
  MueRecord r;
  r.dataset = "autompg";
  r.sample_id = id;
  r.explainer = explainer;
  r.sigma = sigma;
  r.mue_lin = lin;
  r.mue_mc = mc;
  r.n_samples = 100;
  r.m = 9;
  r.ref_norm_sq = 2.5;
  r.flag = std::move(flag);
  return r;
}

}  // namespace

TEST(Config, DefaultSigmaLists) {
  const SweepConfig c;
  EXPECT_EQ(c.sigmas_low, (std::vector<double>{1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1}));
  EXPECT_EQ(c.sigmas_high, (std::vector<double>{0.2, 0.3, 0.4, 0.5}));
  EXPECT_EQ(c.n_samples_mc, 100u);
  EXPECT_EQ(c.n_eval_samples, 10u);
  EXPECT_EQ(c.delta, 1e-4);
  EXPECT_EQ(c.explainers.size(), 5u);
}

TEST(Config, ParsesKeysAndRejectsBadInput) {
  const auto c = parse_sweep_config(
      "# comment\n"
      "dataset = mnist\n"
      "explainers = [Saliency, \"Occlusion\"]\n"
      "target = weights\n"
      "sigmas_low = [1e-4, 1e-3]\n"
      "sigmas_high = []\n"
      "n_samples_mc = 20\n"
      "seed = 7   # trailing comment\n"
      "output_dir = \"out dir\"\n");
  EXPECT_EQ(c.dataset, DatasetName::MNIST);
  EXPECT_EQ(c.explainers, (std::vector<Method>{Method::Saliency, Method::Occlusion}));
  EXPECT_EQ(c.target, PerturbationKind::FinalDenseWeights);
  EXPECT_EQ(c.all_sigmas(), (std::vector<double>{1e-4, 1e-3}));
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.output_dir, "out dir");
  EXPECT_THROW((void)parse_sweep_config("colour = red\n"), ConfigError);
  EXPECT_THROW((void)parse_sweep_config("sigmas_low = [1e-3, 1e-4]\n"), ConfigError);
  EXPECT_THROW((void)parse_sweep_config("sigmas_low = [0, 1e-4]\n"), ConfigError);
  EXPECT_THROW((void)parse_sweep_config("n_samples_mc = many\n"), ConfigError);
  EXPECT_THROW((void)parse_sweep_config("seed = -1\n"), ConfigError);
  EXPECT_THROW((void)parse_sweep_config("explainers = [LRP]\n"), ConfigError);
  EXPECT_THROW((void)parse_sweep_config("seed = 1\nseed = 2\n"), ConfigError);
  EXPECT_THROW((void)parse_sweep_config("just words\n"), ConfigError);
  try {
    (void)load_sweep_config("/nonexistent/missing.toml");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/missing.toml"), std::string::npos);
  }
}

TEST(Config, ShippedConfigsLoad) {
  for (const char* name : {"autompg_input.cfg", "mnist_input.cfg", "mnist_weights.cfg"}) {
    const auto cfg = load_sweep_config(std::string(UXPROP_CONFIG_DIR) + "/" + name);
    EXPECT_EQ(cfg.explainers.size(), 5u) << name;
    EXPECT_EQ(cfg.sigmas_low, default_sigmas_low()) << name;
    EXPECT_EQ(cfg.sigmas_high, default_sigmas_high()) << name;
  }
  EXPECT_EQ(load_sweep_config(std::string(UXPROP_CONFIG_DIR) + "/mnist_weights.cfg").target, PerturbationKind::FinalDenseWeights);
}

TEST(Config, HashTracksContent) {
  SweepConfig a, b;
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.seed = 1;
  EXPECT_NE(config_hash(a), config_hash(b));
  EXPECT_EQ(parse_sweep_config(canonical_config(b)).seed, 1u);
}

TEST(Classify, SyntheticFixtures) {
  EXPECT_EQ(classify_case(read_fixture("case1_aligned.csv")).label, Case::Case1_Aligned);
  EXPECT_EQ(classify_case(read_fixture("case2_zero_threshold.csv")).label, Case::Case2_ZeroThreshold);
  EXPECT_EQ(classify_case(read_fixture("case3_plateau.csv")).label, Case::Case3_Plateau);
  const auto c1 = classify_case(read_fixture("case1_aligned.csv"));
  EXPECT_NEAR(c1.evidence.loglog_slope_mc, 1.0, 1e-12);
  EXPECT_NEAR(c1.evidence.median_ratio, 1.0, 1e-12);
  const auto c3 = classify_case(read_fixture("case3_plateau.csv"));
  EXPECT_NEAR(c3.evidence.plateau_span, 1.0, 1e-12);
  EXPECT_NEAR(c3.evidence.loglog_slope_lin, 1.0, 1e-12);
}

TEST(Classify, EdgeCases) {
  auto curve = read_fixture("case1_aligned.csv");
  curve.resize(3);
  EXPECT_THROW((void)classify_case(curve), InvalidArgument);
  // High-regime points do not count toward the four.
  auto high = curve;
  high.push_back({0.04, 0.04, 0.04});
  high.push_back({0.25, 0.25, 0.25});
  EXPECT_THROW((void)classify_case(high), InvalidArgument);
  // Slope 1 but MC 10x above the linear estimate: not aligned.
  auto off = read_fixture("case1_aligned.csv");
  for (auto& p : off) {
    p.mue_mc *= 10.0;
  }
  EXPECT_EQ(classify_case(off).label, Case::Unclassified);
}

TEST(Aggregation, MeanOfNonFlaggedRecords) {
  const std::vector<MueRecord> recs{record(0, "Saliency", 0.1, 1.0, 2.0), record(1, "Saliency", 0.1, 3.0, 4.0),
                                    record(2, "Saliency", 0.1, NAN, NAN, "degenerate-reference: zero"),
                                    record(0, "Occlusion", 0.1, 5.0, 6.0)};
  const auto agg = aggregate_records(recs, {"Saliency", "Occlusion"}, {0.1});
  ASSERT_EQ(agg.size(), 2u);
  EXPECT_EQ(agg[0].n_valid, 2u);
  EXPECT_DOUBLE_EQ(agg[0].mue_lin_mean, 2.0);
  EXPECT_DOUBLE_EQ(agg[0].mue_mc_mean, 3.0);
  EXPECT_DOUBLE_EQ(agg[1].mue_lin_mean, 5.0);
}

TEST(Sweep, CrossProductCountAndDeterminism) {
  SweepConfig cfg;
  cfg.explainers = {Method::Occlusion};
  cfg.sigmas_low = {1e-3, 1e-2};
  cfg.sigmas_high = {};
  cfg.n_eval_samples = 3;
  cfg.n_samples_mc = 10;
  const auto [train_ds, test_ds] = load_auto_mpg(kData + "/auto-mpg.data");
  const Model model = reference_mlp(0);
  const auto a = compute_sweep(cfg, model, test_ds);
  EXPECT_EQ(a.records.size(), 6u);
  cfg.threads = 3;
  const auto b = compute_sweep(cfg, model, test_ds);
  EXPECT_EQ(results_csv(a), results_csv(b));
  for (std::size_t i = 1; i < a.records.size(); ++i) {
    const auto& p = a.records[i - 1];
    const auto& q = a.records[i];
    EXPECT_TRUE(std::tie(p.sample_id, p.explainer, p.sigma) < std::tie(q.sample_id, q.explainer, q.sigma));
  }
}

TEST(Sweep, FailedCellsAreFlaggedNotFatal) {
  SweepConfig cfg;
  cfg.explainers = {Method::Saliency, Method::Occlusion};
  cfg.sigmas_low = {1e-3};
  cfg.sigmas_high = {};
  cfg.n_eval_samples = 2;
  cfg.n_samples_mc = 5;
  Model zero = reference_mlp(1);
  zero = zero.with_parameters(std::vector<double>(zero.parameter_count(), 0.0));
  const auto [train_ds, test_ds] = load_auto_mpg(kData + "/auto-mpg.data");
  const auto r = compute_sweep(cfg, zero, test_ds);
  ASSERT_EQ(r.records.size(), 4u);
  for (const auto& rec : r.records) {
    EXPECT_EQ(rec.flag.rfind("degenerate-reference", 0), 0u) << rec.flag;
  }
  EXPECT_EQ(r.failed_count(), 0u);
  EXPECT_EQ(r.aggregates[0].n_valid, 0u);
  EXPECT_EQ(r.case_labels[0].second.label, Case::Unclassified);
}

TEST(Export, CsvHeaderRowsAndEmptyResult) {
  SweepResult empty;
  EXPECT_EQ(results_csv(empty), std::string(kCsvHeader) + "\n");
  EXPECT_EQ(std::string(kCsvHeader), "dataset,sample_id,explainer,target,sigma,mue_lin,mue_mc,n_mc,m,ref_norm_sq,flag");
  SweepResult r;
  r.records = {record(0, "Saliency", 1e-3, 1.5e-7, 2e-7), record(1, "Saliency", 1e-3, NAN, NAN, "error: a, b")};
  const auto csv = results_csv(r);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_NE(csv.find("error: a; b"), std::string::npos);
}

TEST(Export, JsonRoundTripIsLossless) {
  SweepResult r;
  r.config_hash = "abc";
  r.records = {record(0, "Saliency", 1e-6, 1.0 / 3.0, 0.1 + 0.2), record(4, "Occlusion", 0.5, 2e-300, 7.0)};
  r.aggregates = aggregate_records(r.records, {"Saliency", "Occlusion"}, {1e-6, 0.5});
  r.case_labels = {{"Saliency", classify_case(read_fixture("case3_plateau.csv"))}};
  const auto j = to_json(r);
  EXPECT_EQ(j.at("version"), 1);
  const auto back = sweep_result_from_json(nlohmann::json::parse(j.dump()));
  EXPECT_EQ(back.records, r.records);
  EXPECT_EQ(back.config_hash, r.config_hash);
  ASSERT_EQ(back.aggregates.size(), r.aggregates.size());
  for (std::size_t i = 0; i < r.aggregates.size(); ++i) {
    EXPECT_EQ(back.aggregates[i].n_valid, r.aggregates[i].n_valid);
    EXPECT_EQ(std::isnan(back.aggregates[i].mue_mc_mean), std::isnan(r.aggregates[i].mue_mc_mean));
    if (!std::isnan(r.aggregates[i].mue_mc_mean)) {
      EXPECT_EQ(back.aggregates[i].mue_mc_mean, r.aggregates[i].mue_mc_mean);
    }
  }
  EXPECT_EQ(back.case_labels[0].second.label, Case::Case3_Plateau);
  EXPECT_EQ(back.case_labels[0].second.evidence.plateau_span, r.case_labels[0].second.evidence.plateau_span);
  EXPECT_THROW((void)sweep_result_from_json(nlohmann::json{{"version", 2}}), ParseError);
}

TEST(Export, FilesAndUnwritableDirectory) {
  const auto dir = fs::temp_directory_path() / "uxprop_test_export";
  fs::remove_all(dir);
  SweepResult r;
  r.records = {record(0, "Saliency", 1e-3, 1.0, 1.0)};
  r.aggregates = aggregate_records(r.records, {"Saliency"}, {1e-3});
  const auto files = export_results(r, ExportFormat::CSV, dir.string());
  EXPECT_TRUE(fs::exists(dir / "results.csv"));
  EXPECT_TRUE(fs::exists(dir / "curve_Saliency.csv"));
  EXPECT_TRUE(fs::exists(dir / "cases.csv"));
  (void)export_results(r, ExportFormat::JSON, dir.string());
  EXPECT_EQ(sweep_result_from_json(nlohmann::json::parse(slurp(dir / "results.json"))).records, r.records);
  std::ofstream(dir / "blocker") << "x";
  EXPECT_THROW((void)export_results(r, ExportFormat::CSV, (dir / "blocker" / "sub").string()), IoError);
}

TEST(Histogram, CountsReferenceAndBounds) {
  const Model mlp = reference_mlp(2);
  const auto x = oracle::random_vector(9, 3);
  const auto spec = default_spec(Method::GradientInput, mlp);
  const std::vector<double> sigmas{0.0, 0.1};
  const auto h = histogram_data(spec, mlp, x, PerturbationKind::Input, sigmas, 2, 50, RngStream{1, 0});
  ASSERT_EQ(h.series.size(), 2u);
  for (const auto& s : h.series) {
    EXPECT_EQ(s.values.size(), 50u);
  }
  for (double v : h.series[0].values) {
    EXPECT_EQ(v, h.reference);
  }
  EXPECT_EQ(h.reference, explain(spec, mlp, x).values[2]);
  EXPECT_THROW((void)histogram_data(spec, mlp, x, PerturbationKind::Input, sigmas, 9, 50, RngStream{}),
               InvalidArgument);
  const auto path = fs::temp_directory_path() / "uxprop_test_hist.csv";
  export_histograms(h, path.string());
  const auto text = slurp(path);
  EXPECT_EQ(text.rfind("sigma,draw,value,reference\n", 0), 0u);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 101);
}

TEST(Diagonals, IdentityStubAndPsd) {
  const std::size_t n = 12;
  const Model carrier(Task::Regression, {n}, {Layer::dense(Matrix(1, n, std::vector<double>(n, 1.0)), {0.0})});
  const ExplainFn identity = [](const Model&, std::span<const double> x) {
    return std::vector<double>(x.begin(), x.end());
  };
  const auto x = oracle::random_vector(n, 4);
  const auto jac = jacobian_block(identity, carrier, x, PerturbationKind::Input, 1e-4);
  const auto lin = analytical_covariance(jac, 0.1);
  const auto mc = mc_covariance(identity, carrier, x, PerturbationKind::Input, 0.1, 50, RngStream{2, 0});
  const auto d = diagonal_maps(jac, lin, mc, 3, 4);
  ASSERT_EQ(d.jacobian.size(), n);
  for (std::size_t i = 0; i < n; ++i) {
    EXPECT_NEAR(d.jacobian[i], 1.0, 1e-10);
    EXPECT_GE(d.cov_lin[i], -1e-9);
    EXPECT_GE(d.cov_mc[i], -1e-9);
  }
  CovarianceEstimate bad = mc;
  bad.matrix = Matrix(n, n - 1);
  EXPECT_THROW((void)diagonal_maps(jac, lin, bad), InvalidArgument);
  EXPECT_THROW((void)diagonal_maps(jac, lin, mc, 5, 5), InvalidArgument);
}

TEST(Diagonals, MnistPixelDiagonalReducesChannels) {
  const Model cnn = reference_cnn(0);
  const auto x = oracle::random_vector(2352, 5, 0, 1);
  const auto spec = default_spec(Method::GradientInput, cnn);
  const auto jac = jacobian_block(spec, cnn, x, PerturbationKind::Input, 1e-4);
  const auto lin = analytical_covariance(jac, 1e-3);
  const auto d = diagonal_maps(jac, lin, lin, 28, 28);
  ASSERT_EQ(d.jacobian.size(), 784u);
  const std::size_t p = 300;
  EXPECT_DOUBLE_EQ(d.jacobian[p], (jac.matrix(p, 3 * p) + jac.matrix(p, 3 * p + 1) + jac.matrix(p, 3 * p + 2)) / 3.0);
}
