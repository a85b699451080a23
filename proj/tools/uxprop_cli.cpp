// Command-line driver: train, explain, sweep, hist, diag, classify.
//
// Exit codes: 0 success, 1 runtime failure or partially failed sweep,
// 2 invalid configuration or arguments.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "uxprop/experiment.hpp"

namespace {

using namespace uxprop;

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string data_dir;
  std::optional<std::size_t> threads;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "Config file (key = value lines)");
  cmd->add_option("--seed", f.seed, "Override the sampling seed");
  cmd->add_option("--out", f.out, "Output path");
  cmd->add_option("--data-dir", f.data_dir, "Directory holding mnist/ and auto-mpg.data");
  cmd->add_option("--threads", f.threads, "Worker threads (0 = all cores)");
}

SweepConfig resolve_config(const CommonFlags& f) {
  SweepConfig cfg = f.config.empty() ? SweepConfig{} : load_sweep_config(f.config);
  if (f.seed) {
    cfg.seed = *f.seed;
  }
  if (!f.data_dir.empty()) {
    cfg.data_dir = f.data_dir;
  }
  if (f.threads) {
    cfg.threads = *f.threads;
  }
  return cfg;
}

Method pick_method(const SweepConfig& cfg, const std::string& name) {
  return name.empty() ? cfg.explainers.front() : parse_method(name);
}

void write_values(const std::vector<double>& values, const std::string& path) {
  std::ofstream out(path);
  if (!out) {
    throw IoError("cannot write '" + path + "'");
  }
  out << "index,value\n";
  for (std::size_t i = 0; i < values.size(); ++i) {
    out << i << "," << detail::fmt_real(values[i]) << "\n";
  }
}

/// Reads (sigma2, mue_lin, mue_mc) from a CSV with those columns or a curve_<explainer>.csv file.
std::vector<CurvePoint> read_curve(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw IoError("cannot read curve file '" + path + "'");
  }
  std::string line;
  if (!std::getline(in, line)) {
    throw ParseError("curve file '" + path + "' is empty");
  }
  std::map<std::string, std::size_t> col;
  {
    std::stringstream ss(line);
    std::size_t i = 0;
    for (std::string name; std::getline(ss, name, ',');) {
      col[detail::trim(name)] = i++;
    }
  }
  auto find = [&](std::initializer_list<const char*> names) {
    for (const char* n : names) {
      if (auto it = col.find(n); it != col.end()) {
        return it->second;
      }
    }
    throw ParseError("curve file '" + path + "': missing column " + *names.begin());
  };
  const std::size_t c_s2 = find({"sigma2"});
  const std::size_t c_lin = find({"mue_lin", "mue_lin_mean"});
  const std::size_t c_mc = find({"mue_mc", "mue_mc_mean"});
  std::vector<CurvePoint> curve;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) {
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) {
      cells.push_back(detail::trim(c));
    }
    try {
      curve.push_back({std::stod(cells.at(c_s2)), std::stod(cells.at(c_lin)), std::stod(cells.at(c_mc))});
    } catch (const std::exception&) {
      throw ParseError("curve file '" + path + "' line " + std::to_string(line_no) + ": malformed row");
    }
  }
  return curve;
}

int cmd_train(const CommonFlags& f, const std::string& dataset, std::size_t epochs, const std::string& activation) {
  SweepConfig cfg = resolve_config(f);
  if (!dataset.empty()) {
    cfg.dataset = parse_dataset_name(dataset);
  }
  if (!activation.empty()) {
    cfg.activation = parse_activation_mode(activation);
  }
  if (epochs != 0) {
    cfg.train_epochs = epochs;
  }
  if (f.seed) {
    cfg.train_seed = *f.seed;
  }
  const std::string out = f.out.empty() ? "model.bin" : f.out;
  const Dataset train_ds = load_dataset(cfg.dataset, cfg.data_dir, Split::Train, cfg.split_seed);
  const Dataset test_ds = load_dataset(cfg.dataset, cfg.data_dir, Split::Test, cfg.split_seed);
  const auto report = train_reference_model(cfg.dataset, train_ds, cfg.activation, cfg.train_seed, cfg.train_epochs);
  save_model(report.model, out);
  if (cfg.dataset == DatasetName::MNIST) {
    std::cout << "test_accuracy " << accuracy(report.model, test_ds) << "\n";
  } else {
    std::cout << "test_mae " << mean_absolute_error(report.model, test_ds) << "\n";
  }
  std::cout << "model " << out << "\n";
  return 0;
}

int cmd_explain(const CommonFlags& f, const std::string& explainer, std::size_t sample_index) {
  const SweepConfig cfg = resolve_config(f);
  const Dataset eval = load_dataset(cfg.dataset, cfg.data_dir, Split::Test, cfg.split_seed);
  if (sample_index >= eval.size()) {
    throw InvalidArgument("sample index " + std::to_string(sample_index) + " out of range");
  }
  const Model model = obtain_model(cfg);
  const auto e = explain(default_spec(pick_method(cfg, explainer), model), model, eval.sample(sample_index),
                         sample_index);
  const std::vector<double> values(e.values.data().begin(), e.values.data().end());
  write_values(values, f.out.empty() ? "explanation.csv" : f.out);
  std::cout << "target " << e.target << "\n";
  return 0;
}

int cmd_sweep(const CommonFlags& f) {
  if (f.config.empty()) {
    throw ConfigError("sweep requires --config");
  }
  SweepConfig cfg = resolve_config(f);
  if (!f.out.empty()) {
    cfg.output_dir = f.out;
  }
  const SweepResult result = run_sweep(cfg);
  for (const auto& [name, label] : result.case_labels) {
    std::cout << name << " " << to_string(label.label) << "\n";
  }
  std::cout << "records " << result.records.size() << " failed " << result.failed_count() << "\n";
  return result.failed_count() == 0 ? 0 : 1;
}

int cmd_hist(const CommonFlags& f, const std::string& explainer, std::size_t sample_index, std::size_t feature,
             std::size_t n) {
  const SweepConfig cfg = resolve_config(f);
  const Dataset eval = load_dataset(cfg.dataset, cfg.data_dir, Split::Test, cfg.split_seed);
  if (sample_index >= eval.size()) {
    throw InvalidArgument("sample index " + std::to_string(sample_index) + " out of range");
  }
  const Model model = obtain_model(cfg);
  const auto sigmas = cfg.all_sigmas();
  const auto data = histogram_data(default_spec(pick_method(cfg, explainer), model), model, eval.sample(sample_index),
                                   cfg.target, sigmas, feature, n, RngStream{cfg.seed, sample_index}, cfg.threads);
  export_histograms(data, f.out.empty() ? "histogram.csv" : f.out);
  return 0;
}

int cmd_diag(const CommonFlags& f, const std::string& explainer, std::size_t sample_index, double sigma) {
  const SweepConfig cfg = resolve_config(f);
  const Dataset eval = load_dataset(cfg.dataset, cfg.data_dir, Split::Test, cfg.split_seed);
  if (sample_index >= eval.size()) {
    throw InvalidArgument("sample index " + std::to_string(sample_index) + " out of range");
  }
  const Model model = obtain_model(cfg);
  const auto spec = default_spec(pick_method(cfg, explainer), model);
  const auto x = eval.sample(sample_index);
  const ExplainFn e = bind_explainer(spec, resolve_target(spec.target, model, x));
  const auto jac = jacobian_block(spec, model, x, cfg.target, cfg.delta, cfg.threads);
  const auto lin = analytical_covariance(jac, sigma);
  const auto mc = mc_covariance(e, model, x, cfg.target, sigma, cfg.n_samples_mc, RngStream{cfg.seed, sample_index},
                                cfg.threads);
  const bool image = is_image_model(model);
  const auto maps = diagonal_maps(jac, lin, mc, image ? model.input_shape()[0] : 0, image ? model.input_shape()[1] : 0);
  export_diagonals(maps, f.out.empty() ? "diagonals.csv" : f.out);
  return 0;
}

int cmd_classify(const std::string& in, const std::string& out) {
  const CaseLabel c = classify_case(read_curve(in));
  std::ostringstream s;
  s << "label " << to_string(c.label) << "\n"
    << "loglog_slope_mc " << detail::fmt_real(c.evidence.loglog_slope_mc) << "\n"
    << "loglog_slope_lin " << detail::fmt_real(c.evidence.loglog_slope_lin) << "\n"
    << "median_ratio " << detail::fmt_real(c.evidence.median_ratio) << "\n"
    << "plateau_span " << detail::fmt_real(c.evidence.plateau_span) << "\n";
  std::cout << s.str();
  if (!out.empty()) {
    std::ofstream o(out);
    if (!o) {
      throw IoError("cannot write '" + out + "'");
    }
    o << s.str();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Uncertainty propagation through feature-attribution explainers"};
  app.require_subcommand(1);

  CommonFlags train_f, explain_f, sweep_f, hist_f, diag_f;
  std::string dataset, activation, explainer, curve_in, classify_out;
  std::size_t epochs = 0, sample_index = 0, feature = 0, n_hist = 1000;
  double sigma = 1e-3;

  auto* train_cmd = app.add_subcommand("train", "Train a reference model and save it");
  add_common(train_cmd, train_f);
  train_cmd->add_option("--dataset", dataset, "mnist or autompg");
  train_cmd->add_option("--epochs", epochs, "Epochs (0 = dataset default)");
  train_cmd->add_option("--activation", activation, "relu or linear");

  auto* explain_cmd = app.add_subcommand("explain", "Explain one test sample");
  add_common(explain_cmd, explain_f);
  explain_cmd->add_option("--explainer", explainer, "Explainer name");
  explain_cmd->add_option("--sample-index", sample_index, "Test-split row");

  auto* sweep_cmd = app.add_subcommand("sweep", "Run a sigma sweep and write results");
  add_common(sweep_cmd, sweep_f);

  auto* hist_cmd = app.add_subcommand("hist", "Explanation-coordinate values under N perturbations");
  add_common(hist_cmd, hist_f);
  hist_cmd->add_option("--explainer", explainer, "Explainer name");
  hist_cmd->add_option("--sample-index", sample_index, "Test-split row");
  hist_cmd->add_option("--feature", feature, "Explanation coordinate");
  hist_cmd->add_option("--n", n_hist, "Perturbations per sigma");

  auto* diag_cmd = app.add_subcommand("diag", "Diagonals of J, Sigma_lin and Sigma_mc");
  add_common(diag_cmd, diag_f);
  diag_cmd->add_option("--explainer", explainer, "Explainer name");
  diag_cmd->add_option("--sample-index", sample_index, "Test-split row");
  diag_cmd->add_option("--sigma", sigma, "Perturbation scale");

  auto* classify_cmd = app.add_subcommand("classify", "Label a (sigma2, mue_lin, mue_mc) curve");
  classify_cmd->add_option("--in", curve_in, "Curve CSV")->required();
  classify_cmd->add_option("--out", classify_out, "Write the label and evidence here too");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train_cmd) {
      return cmd_train(train_f, dataset, epochs, activation);
    }
    if (*explain_cmd) {
      return cmd_explain(explain_f, explainer, sample_index);
    }
    if (*sweep_cmd) {
      return cmd_sweep(sweep_f);
    }
    if (*hist_cmd) {
      return cmd_hist(hist_f, explainer, sample_index, feature, n_hist);
    }
    if (*diag_cmd) {
      return cmd_diag(diag_f, explainer, sample_index, sigma);
    }
    if (*classify_cmd) {
      return cmd_classify(curve_in, classify_out);
    }
  } catch (const ConfigError& e) {
    std::cerr << "invalid config: " << e.what() << "\n";
    return 2;
  } catch (const InvalidArgument& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
