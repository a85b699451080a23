/**
 * @file experiment.hpp
 * @brief Sigma sweeps over samples and explainers, regime classification and exports.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "uxprop/datasets.hpp"
#include "uxprop/errors.hpp"
#include "uxprop/explainers.hpp"
#include "uxprop/nn.hpp"
#include "uxprop/uncertainty.hpp"

namespace uxprop {

/// Bad or unreadable configuration (CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

inline const std::vector<double>& default_sigmas_low() {
  static const std::vector<double> v{1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1};
  return v;
}

inline const std::vector<double>& default_sigmas_high() {
  static const std::vector<double> v{0.2, 0.3, 0.4, 0.5};
  return v;
}

struct SweepConfig {
  DatasetName dataset = DatasetName::AutoMPG;
  std::string data_dir = "data";
  std::string model_path;  // empty: train the reference model
  ActivationMode activation = ActivationMode::ReLU;
  std::size_t train_epochs = 0;  // 0: dataset default
  std::uint64_t train_seed = 0;
  std::uint64_t split_seed = 0;
  std::vector<Method> explainers{kAllMethods.begin(), kAllMethods.end()};
  PerturbationKind target = PerturbationKind::Input;
  std::vector<double> sigmas_low = default_sigmas_low();
  std::vector<double> sigmas_high = default_sigmas_high();
  std::size_t n_samples_mc = 100;
  std::size_t n_eval_samples = 10;
  double delta = 1e-4;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::string output_dir = "out";

  [[nodiscard]] std::vector<double> all_sigmas() const {
    std::vector<double> s = sigmas_low;
    s.insert(s.end(), sigmas_high.begin(), sigmas_high.end());
    return s;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) {
    return {};
  }
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string unquote(const std::string& s) {
  if (s.size() >= 2 && (s.front() == '"' || s.front() == '\'') && s.back() == s.front()) {
    return s.substr(1, s.size() - 2);
  }
  return s;
}

inline std::vector<std::string> split_list(const std::string& value, const std::string& key) {
  if (value.size() < 2 || value.front() != '[' || value.back() != ']') {
    throw ConfigError("config key '" + key + "': expected a [ ... ] list");
  }
  std::vector<std::string> items;
  std::stringstream ss(value.substr(1, value.size() - 2));
  for (std::string item; std::getline(ss, item, ',');) {
    item = unquote(trim(item));
    if (!item.empty()) {
      items.push_back(item);
    }
  }
  return items;
}

inline double parse_real(const std::string& v, const std::string& key) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size() || !std::isfinite(d)) {
      throw std::invalid_argument(v);
    }
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': '" + v + "' is not a number");
  }
}

inline std::uint64_t parse_uint(const std::string& v, const std::string& key) {
  try {
    std::size_t used = 0;
    const auto u = std::stoull(v, &used);
    if (used != v.size() || v.front() == '-') {
      throw std::invalid_argument(v);
    }
    return u;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': '" + v + "' is not a non-negative integer");
  }
}

inline std::vector<double> parse_sigmas(const std::string& value, const std::string& key) {
  std::vector<double> out;
  for (const auto& item : split_list(value, key)) {
    out.push_back(parse_real(item, key));
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(out[i] > 0.0) || (i > 0 && !(out[i] > out[i - 1]))) {
      throw ConfigError("config key '" + key + "': sigmas must be positive and strictly ascending");
    }
  }
  return out;
}

}  // namespace detail

/**
 * Parses the flat `key = value` config format: one key per line, `#`
 * comments, strings optionally quoted, lists written as [a, b, c].
 * Unknown keys are errors.
 */
[[nodiscard]] inline SweepConfig parse_sweep_config(const std::string& text) {
  SweepConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  std::map<std::string, std::size_t> seen;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) {
      line.erase(hash);
    }
    line = detail::trim(line);
    if (line.empty()) {
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string raw = detail::trim(line.substr(eq + 1));
    const std::string value = detail::unquote(raw);
    if (seen.count(key) != 0) {
      throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    }
    seen[key] = line_no;
    try {
      if (key == "dataset") {
        cfg.dataset = parse_dataset_name(value);
      } else if (key == "data_dir") {
        cfg.data_dir = value;
      } else if (key == "model_path") {
        cfg.model_path = value;
      } else if (key == "activation") {
        cfg.activation = parse_activation_mode(value);
      } else if (key == "train_epochs") {
        cfg.train_epochs = detail::parse_uint(value, key);
      } else if (key == "train_seed") {
        cfg.train_seed = detail::parse_uint(value, key);
      } else if (key == "split_seed") {
        cfg.split_seed = detail::parse_uint(value, key);
      } else if (key == "explainers") {
        cfg.explainers.clear();
        for (const auto& name : detail::split_list(raw, key)) {
          cfg.explainers.push_back(parse_method(name));
        }
        if (cfg.explainers.empty()) {
          throw ConfigError("config key 'explainers': list is empty");
        }
      } else if (key == "target") {
        cfg.target = parse_perturbation_kind(value);
      } else if (key == "sigmas_low") {
        cfg.sigmas_low = detail::parse_sigmas(raw, key);
      } else if (key == "sigmas_high") {
        cfg.sigmas_high = detail::parse_sigmas(raw, key);
      } else if (key == "n_samples_mc") {
        cfg.n_samples_mc = detail::parse_uint(value, key);
        if (cfg.n_samples_mc < 2) {
          throw ConfigError("config key 'n_samples_mc': must be >= 2");
        }
      } else if (key == "n_eval_samples") {
        cfg.n_eval_samples = detail::parse_uint(value, key);
      } else if (key == "delta") {
        cfg.delta = detail::parse_real(value, key);
        if (!(cfg.delta > 0.0)) {
          throw ConfigError("config key 'delta': must be positive");
        }
      } else if (key == "seed") {
        cfg.seed = detail::parse_uint(value, key);
      } else if (key == "threads") {
        cfg.threads = detail::parse_uint(value, key);
      } else if (key == "output_dir") {
        cfg.output_dir = value;
      } else {
        throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
      }
    } catch (const InvalidArgument& e) {
      throw ConfigError("config key '" + key + "': " + e.what());
    }
  }
  return cfg;
}

[[nodiscard]] inline SweepConfig load_sweep_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot read config file '" + path + "'");
  }
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_sweep_config(ss.str());
}

/// Canonical one-line-per-key rendering; the config hash is taken over this text.
[[nodiscard]] inline std::string canonical_config(const SweepConfig& c) {
  std::ostringstream out;
  out << std::setprecision(17);
  auto list = [&](const std::vector<double>& v) {
    out << "[";
    for (std::size_t i = 0; i < v.size(); ++i) {
      out << (i ? ", " : "") << v[i];
    }
    out << "]\n";
  };
  out << "dataset = " << to_string(c.dataset) << "\n"
      << "model_path = \"" << c.model_path << "\"\n"
      << "activation = " << to_string(c.activation) << "\n"
      << "train_epochs = " << c.train_epochs << "\n"
      << "train_seed = " << c.train_seed << "\n"
      << "split_seed = " << c.split_seed << "\n"
      << "explainers = [";
  for (std::size_t i = 0; i < c.explainers.size(); ++i) {
    out << (i ? ", " : "") << to_string(c.explainers[i]);
  }
  out << "]\n"
      << "target = " << to_string(c.target) << "\n"
      << "sigmas_low = ";
  list(c.sigmas_low);
  out << "sigmas_high = ";
  list(c.sigmas_high);
  out << "n_samples_mc = " << c.n_samples_mc << "\n"
      << "n_eval_samples = " << c.n_eval_samples << "\n"
      << "delta = " << c.delta << "\n"
      << "seed = " << c.seed << "\n";
  return out.str();
}

[[nodiscard]] inline std::string config_hash(const SweepConfig& c) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : canonical_config(c)) {
    h = (h ^ ch) * 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Data and models
// ---------------------------------------------------------------------------

[[nodiscard]] inline Dataset load_dataset(DatasetName name, const std::string& data_dir, Split split,
                                          std::uint64_t split_seed = 0) {
  if (name == DatasetName::MNIST) {
    return load_mnist_dir(data_dir + "/mnist", split);
  }
  auto [train_ds, test_ds] = load_auto_mpg(data_dir + "/auto-mpg.data", split_seed);
  return split == Split::Train ? std::move(train_ds) : std::move(test_ds);
}

/// Reference recipe: CNN lr 0.01 / 5 epochs, MLP lr 0.001 / 200 epochs; momentum 0.9, batch 32.
[[nodiscard]] inline TrainParams default_train_params(DatasetName name, std::uint64_t seed, std::size_t epochs = 0) {
  TrainParams p;
  p.seed = seed;
  if (name == DatasetName::MNIST) {
    p.lr = 0.01;
    p.epochs = epochs == 0 ? 5 : epochs;
  } else {
    p.lr = 0.001;
    p.epochs = epochs == 0 ? 200 : epochs;
  }
  return p;
}

[[nodiscard]] inline TrainReport train_reference_model(DatasetName name, const Dataset& train_ds, ActivationMode mode,
                                                       std::uint64_t seed, std::size_t epochs = 0) {
  Model init = name == DatasetName::MNIST ? reference_cnn(seed, mode) : reference_mlp(seed, mode);
  return train(std::move(init), train_ds, default_train_params(name, seed, epochs));
}

[[nodiscard]] inline Model obtain_model(const SweepConfig& cfg) {
  if (!cfg.model_path.empty()) {
    if (!std::filesystem::exists(cfg.model_path)) {
      throw IoError("model file '" + cfg.model_path + "' does not exist");
    }
    Model m = load_model(cfg.model_path);
    return m.activation_mode() == cfg.activation ? m : m.with_activation_mode(cfg.activation);
  }
  const Dataset train_ds = load_dataset(cfg.dataset, cfg.data_dir, Split::Train, cfg.split_seed);
  return train_reference_model(cfg.dataset, train_ds, cfg.activation, cfg.train_seed, cfg.train_epochs).model;
}

[[nodiscard]] inline ExplainerSpec default_spec(Method method, const Model& model) {
  ExplainerSpec spec;
  spec.method = method;
  spec.target.kind =
      model.task() == Task::Regression ? TargetRule::Kind::RegressionOutput : TargetRule::Kind::PredictedClass;
  if (!is_image_model(model)) {
    spec.occlusion = {1, 1, 1, 0.0};
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Regime classification
// ---------------------------------------------------------------------------

enum class Case { Case1_Aligned, Case2_ZeroThreshold, Case3_Plateau, Unclassified };

[[nodiscard]] inline std::string to_string(Case c) {
  switch (c) {
    case Case::Case1_Aligned:
      return "Case1_Aligned";
    case Case::Case2_ZeroThreshold:
      return "Case2_ZeroThreshold";
    case Case::Case3_Plateau:
      return "Case3_Plateau";
    case Case::Unclassified:
      return "Unclassified";
  }
  return "?";
}

[[nodiscard]] inline Case parse_case(const std::string& s) {
  for (Case c : {Case::Case1_Aligned, Case::Case2_ZeroThreshold, Case::Case3_Plateau, Case::Unclassified}) {
    if (to_string(c) == s) {
      return c;
    }
  }
  throw InvalidArgument("unknown case label '" + s + "'");
}

struct CurvePoint {
  double sigma2 = 0.0;
  double mue_lin = 0.0;
  double mue_mc = 0.0;
};

/// NaN marks evidence that is undefined for the curve (e.g. a slope of an all-zero curve).
struct CaseEvidence {
  double loglog_slope_mc = std::numeric_limits<double>::quiet_NaN();
  double loglog_slope_lin = std::numeric_limits<double>::quiet_NaN();
  double median_ratio = std::numeric_limits<double>::quiet_NaN();
  double plateau_span = std::numeric_limits<double>::quiet_NaN();
};

struct CaseLabel {
  Case label = Case::Unclassified;
  CaseEvidence evidence;
};

/// Thresholds separating the three propagation regimes.
struct CaseThresholds {
  double low_regime_max_sigma2 = 1e-2;
  double zero_lin = 1e-12;
  double zero_mc = 1e-10;
  double zero_check_max_sigma2 = 1e-6;
  double plateau_min_lin_decades = 4.0;
  double plateau_max_span = 10.0;
  double slope_lo = 0.8;
  double slope_hi = 1.2;
  double ratio_lo = 1.0 / 3.0;
  double ratio_hi = 3.0;
};

namespace detail {

/// Least-squares slope of log10(y) against log10(x) over points with y > 0.
inline double loglog_slope(const std::vector<std::pair<double, double>>& pts) {
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  std::size_t n = 0;
  for (const auto& [x, y] : pts) {
    if (!(x > 0.0) || !(y > 0.0)) {
      continue;
    }
    const double lx = std::log10(x), ly = std::log10(y);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
    ++n;
  }
  if (n < 2) {
    return std::numeric_limits<double>::quiet_NaN();
  }
  const double denom = static_cast<double>(n) * sxx - sx * sx;
  if (denom == 0.0) {
    return std::numeric_limits<double>::quiet_NaN();
  }
  return (static_cast<double>(n) * sxy - sx * sy) / denom;
}

inline double median(std::vector<double> v) {
  if (v.empty()) {
    return std::numeric_limits<double>::quiet_NaN();
  }
  std::sort(v.begin(), v.end());
  const std::size_t mid = v.size() / 2;
  return v.size() % 2 == 1 ? v[mid] : 0.5 * (v[mid - 1] + v[mid]);
}

}  // namespace detail

/**
 * Labels a (sigma^2, mue_lin, mue_mc) curve using its low-regime points
 * (sigma^2 <= 1e-2).  Checked in order:
 *
 *   Case 2  max mue_lin < 1e-12 and mue_mc < 1e-10 wherever sigma^2 <= 1e-6;
 *   Case 3  mue_lin spans >= 4 decades while max/min mue_mc < 10;
 *   Case 1  log-log slope of mue_mc vs sigma^2 in [0.8, 1.2] and
 *           median(mue_mc / mue_lin) in [1/3, 3].
 */
[[nodiscard]] inline CaseLabel classify_case(const std::vector<CurvePoint>& curve, const CaseThresholds& t = {}) {
  std::vector<CurvePoint> low;
  for (const auto& p : curve) {
    if (p.sigma2 <= t.low_regime_max_sigma2 * (1.0 + 1e-9)) {
      low.push_back(p);
    }
  }
  if (low.size() < 4) {
    throw InvalidArgument("classify_case: need at least 4 low-regime points, got " + std::to_string(low.size()));
  }
  std::vector<std::pair<double, double>> mc_pts, lin_pts;
  std::vector<double> ratios;
  double lin_max = 0.0, lin_min = std::numeric_limits<double>::infinity();
  double mc_max = 0.0, mc_min = std::numeric_limits<double>::infinity();
  bool zero_mc = true;
  for (const auto& p : low) {
    mc_pts.emplace_back(p.sigma2, p.mue_mc);
    lin_pts.emplace_back(p.sigma2, p.mue_lin);
    if (p.mue_lin > 0.0) {
      ratios.push_back(p.mue_mc / p.mue_lin);
    }
    lin_max = std::max(lin_max, p.mue_lin);
    lin_min = std::min(lin_min, p.mue_lin);
    mc_max = std::max(mc_max, p.mue_mc);
    mc_min = std::min(mc_min, p.mue_mc);
    if (p.sigma2 <= t.zero_check_max_sigma2 * (1.0 + 1e-9) && !(p.mue_mc < t.zero_mc)) {
      zero_mc = false;
    }
  }
  CaseLabel out;
  out.evidence.loglog_slope_mc = detail::loglog_slope(mc_pts);
  out.evidence.loglog_slope_lin = detail::loglog_slope(lin_pts);
  out.evidence.median_ratio = detail::median(ratios);
  if (mc_min > 0.0) {
    out.evidence.plateau_span = mc_max / mc_min;
  } else if (mc_max > 0.0) {
    out.evidence.plateau_span = std::numeric_limits<double>::infinity();
  }

  if (lin_max < t.zero_lin && zero_mc) {
    out.label = Case::Case2_ZeroThreshold;
  } else if (lin_min > 0.0 && std::log10(lin_max / lin_min) >= t.plateau_min_lin_decades &&
             out.evidence.plateau_span < t.plateau_max_span) {
    out.label = Case::Case3_Plateau;
  } else if (out.evidence.loglog_slope_mc >= t.slope_lo && out.evidence.loglog_slope_mc <= t.slope_hi &&
             out.evidence.median_ratio >= t.ratio_lo && out.evidence.median_ratio <= t.ratio_hi) {
    out.label = Case::Case1_Aligned;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

struct Aggregate {
  std::string explainer;
  double sigma = 0.0;
  double mue_lin_mean = std::numeric_limits<double>::quiet_NaN();
  double mue_mc_mean = std::numeric_limits<double>::quiet_NaN();
  std::size_t n_valid = 0;
};

struct SweepResult {
  std::string config_hash;
  std::vector<MueRecord> records;
  std::vector<Aggregate> aggregates;
  std::vector<std::pair<std::string, CaseLabel>> case_labels;

  /// Records whose flag reports an error other than a degenerate reference.
  [[nodiscard]] std::size_t failed_count() const {
    return static_cast<std::size_t>(std::count_if(records.begin(), records.end(), [](const MueRecord& r) {
      return !r.flag.empty() && r.flag.rfind("degenerate-reference", 0) != 0;
    }));
  }
};

inline const std::string kDegenerateFlag = "degenerate-reference";

/// Mean of the non-flagged per-sample MUEs for every (explainer, sigma), in record order.
[[nodiscard]] inline std::vector<Aggregate> aggregate_records(const std::vector<MueRecord>& records,
                                                              const std::vector<std::string>& explainers,
                                                              const std::vector<double>& sigmas) {
  std::vector<Aggregate> out;
  for (const auto& name : explainers) {
    for (double s : sigmas) {
      Aggregate a{name, s};
      double lin = 0.0, mc = 0.0;
      for (const auto& r : records) {
        if (r.explainer == name && r.sigma == s && r.flag.empty()) {
          lin += r.mue_lin;
          mc += r.mue_mc;
          ++a.n_valid;
        }
      }
      if (a.n_valid > 0) {
        a.mue_lin_mean = lin / static_cast<double>(a.n_valid);
        a.mue_mc_mean = mc / static_cast<double>(a.n_valid);
      }
      out.push_back(a);
    }
  }
  return out;
}

[[nodiscard]] inline std::vector<CurvePoint> curve_for(const std::vector<Aggregate>& aggregates,
                                                       const std::string& explainer) {
  std::vector<CurvePoint> c;
  for (const auto& a : aggregates) {
    if (a.explainer == explainer && a.n_valid > 0) {
      c.push_back({a.sigma * a.sigma, a.mue_lin_mean, a.mue_mc_mean});
    }
  }
  return c;
}

/// Per-sigma median over non-flagged samples; robust to the few samples that straddle a ReLU kink.
[[nodiscard]] inline std::vector<CurvePoint> median_curve_for(const std::vector<MueRecord>& records,
                                                              const std::string& explainer,
                                                              const std::vector<double>& sigmas) {
  std::vector<CurvePoint> c;
  for (double s : sigmas) {
    std::vector<double> lin, mc;
    for (const auto& r : records) {
      if (r.explainer == explainer && r.sigma == s && r.flag.empty()) {
        lin.push_back(r.mue_lin);
        mc.push_back(r.mue_mc);
      }
    }
    if (!lin.empty()) {
      c.push_back({s * s, detail::median(lin), detail::median(mc)});
    }
  }
  return c;
}

[[nodiscard]] inline std::vector<CurvePoint> curve_for(const std::vector<MueRecord>& records) {
  std::vector<CurvePoint> c;
  for (const auto& r : records) {
    if (r.flag.empty()) {
      c.push_back({r.sigma * r.sigma, r.mue_lin, r.mue_mc});
    }
  }
  return c;
}

[[nodiscard]] inline CaseLabel classify_or_unclassified(const std::vector<CurvePoint>& curve) {
  try {
    return classify_case(curve);
  } catch (const InvalidArgument&) {
    return {};
  }
}

/// Records for one (sample, explainer) cell; failures become flagged rows, one per sigma.
[[nodiscard]] inline std::vector<MueRecord> run_cell(const SweepConfig& cfg, const Model& model,
                                                     std::span<const double> x, std::size_t sample_id, Method method,
                                                     const RngStream& rng) {
  const auto sigmas = cfg.all_sigmas();
  std::vector<MueRecord> recs;
  std::string flag;
  try {
    recs = uxai(default_spec(method, model), model, x, cfg.target, sigmas, rng,
                {cfg.delta, cfg.n_samples_mc, cfg.threads});
  } catch (const DegenerateReference& e) {
    flag = kDegenerateFlag + ": " + e.what();
  } catch (const std::exception& e) {
    flag = std::string("error: ") + e.what();
  }
  if (!flag.empty()) {
    recs.clear();
    for (double s : sigmas) {
      MueRecord r;
      r.explainer = to_string(method);
      r.target = cfg.target;
      r.sigma = s;
      r.mue_lin = std::numeric_limits<double>::quiet_NaN();
      r.mue_mc = std::numeric_limits<double>::quiet_NaN();
      r.n_samples = cfg.n_samples_mc;
      r.m = explanation_size(model);
      r.ref_norm_sq = std::numeric_limits<double>::quiet_NaN();
      r.flag = flag;
      recs.push_back(std::move(r));
    }
  }
  for (auto& r : recs) {
    r.dataset = to_string(cfg.dataset);
    r.sample_id = sample_id;
  }
  return recs;
}

/// Runs every (sample, explainer) cell; does not write files (see run_sweep).
[[nodiscard]] inline SweepResult compute_sweep(const SweepConfig& cfg, const Model& model, const Dataset& eval) {
  SweepResult result;
  result.config_hash = config_hash(cfg);
  auto sel = select_samples(eval, cfg.seed, cfg.n_eval_samples);
  std::vector<std::size_t> ids = sel.indices;
  std::sort(ids.begin(), ids.end());
  std::vector<Method> methods = cfg.explainers;
  std::sort(methods.begin(), methods.end(), [](Method a, Method b) { return to_string(a) < to_string(b); });
  const RngStream base{cfg.seed, 0x5357454550000000ULL};
  for (std::size_t id : ids) {
    for (Method method : methods) {
      const std::uint64_t cell = id * 16 + static_cast<std::uint64_t>(method);
      auto recs = run_cell(cfg, model, eval.sample(id), id, method, base.substream(cell));
      result.records.insert(result.records.end(), recs.begin(), recs.end());
    }
  }
  std::vector<std::string> names;
  for (Method m : methods) {
    names.push_back(to_string(m));
  }
  result.aggregates = aggregate_records(result.records, names, cfg.all_sigmas());
  for (const auto& name : names) {
    result.case_labels.emplace_back(name,
                                    classify_or_unclassified(median_curve_for(result.records, name, cfg.all_sigmas())));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

inline constexpr const char* kCsvHeader = "dataset,sample_id,explainer,target,sigma,mue_lin,mue_mc,n_mc,m,ref_norm_sq,flag";

namespace detail {

inline std::string fmt_real(double v) {
  if (std::isnan(v)) {
    return "nan";
  }
  if (std::isinf(v)) {
    return v > 0 ? "inf" : "-inf";
  }
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string csv_safe(std::string s) {
  std::replace(s.begin(), s.end(), ',', ';');
  std::replace(s.begin(), s.end(), '\n', ' ');
  std::replace(s.begin(), s.end(), '\r', ' ');
  std::replace(s.begin(), s.end(), '"', '\'');
  return s;
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  std::error_code ec;
  std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw IoError("cannot write '" + path.string() + "'");
  }
  return out;
}

inline nlohmann::json real_json(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

inline double json_real(const nlohmann::json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

}  // namespace detail

[[nodiscard]] inline std::string results_csv(const SweepResult& result) {
  std::ostringstream out;
  out << kCsvHeader << "\n";
  for (const auto& r : result.records) {
    out << r.dataset << "," << r.sample_id << "," << r.explainer << "," << to_string(r.target) << ","
        << detail::fmt_real(r.sigma) << "," << detail::fmt_real(r.mue_lin) << "," << detail::fmt_real(r.mue_mc)
        << "," << r.n_samples << "," << r.m << "," << detail::fmt_real(r.ref_norm_sq) << ","
        << detail::csv_safe(r.flag) << "\n";
  }
  return out.str();
}

[[nodiscard]] inline nlohmann::json to_json(const SweepResult& result) {
  using nlohmann::json;
  json j;
  j["version"] = 1;
  j["config_hash"] = result.config_hash;
  j["records"] = json::array();
  for (const auto& r : result.records) {
    j["records"].push_back({{"dataset", r.dataset},
                            {"sample_id", r.sample_id},
                            {"explainer", r.explainer},
                            {"target", to_string(r.target)},
                            {"sigma", r.sigma},
                            {"mue_lin", detail::real_json(r.mue_lin)},
                            {"mue_mc", detail::real_json(r.mue_mc)},
                            {"n_mc", r.n_samples},
                            {"m", r.m},
                            {"ref_norm_sq", detail::real_json(r.ref_norm_sq)},
                            {"flag", r.flag}});
  }
  j["aggregates"] = json::array();
  for (const auto& a : result.aggregates) {
    j["aggregates"].push_back({{"explainer", a.explainer},
                               {"sigma", a.sigma},
                               {"mue_lin_mean", detail::real_json(a.mue_lin_mean)},
                               {"mue_mc_mean", detail::real_json(a.mue_mc_mean)},
                               {"n_valid", a.n_valid}});
  }
  j["case_labels"] = json::array();
  for (const auto& [name, c] : result.case_labels) {
    j["case_labels"].push_back({{"explainer", name},
                                {"label", to_string(c.label)},
                                {"loglog_slope_mc", detail::real_json(c.evidence.loglog_slope_mc)},
                                {"loglog_slope_lin", detail::real_json(c.evidence.loglog_slope_lin)},
                                {"median_ratio", detail::real_json(c.evidence.median_ratio)},
                                {"plateau_span", detail::real_json(c.evidence.plateau_span)}});
  }
  return j;
}

[[nodiscard]] inline SweepResult sweep_result_from_json(const nlohmann::json& j) {
  if (j.value("version", 0) != 1) {
    throw ParseError("sweep JSON: unsupported or missing 'version'");
  }
  SweepResult r;
  try {
    r.config_hash = j.at("config_hash").get<std::string>();
    for (const auto& e : j.at("records")) {
      MueRecord m;
      m.dataset = e.at("dataset").get<std::string>();
      m.sample_id = e.at("sample_id").get<std::size_t>();
      m.explainer = e.at("explainer").get<std::string>();
      m.target = parse_perturbation_kind(e.at("target").get<std::string>());
      m.sigma = e.at("sigma").get<double>();
      m.mue_lin = detail::json_real(e.at("mue_lin"));
      m.mue_mc = detail::json_real(e.at("mue_mc"));
      m.n_samples = e.at("n_mc").get<std::size_t>();
      m.m = e.at("m").get<std::size_t>();
      m.ref_norm_sq = detail::json_real(e.at("ref_norm_sq"));
      m.flag = e.at("flag").get<std::string>();
      r.records.push_back(std::move(m));
    }
    for (const auto& e : j.at("aggregates")) {
      r.aggregates.push_back({e.at("explainer").get<std::string>(), e.at("sigma").get<double>(),
                              detail::json_real(e.at("mue_lin_mean")), detail::json_real(e.at("mue_mc_mean")),
                              e.at("n_valid").get<std::size_t>()});
    }
    for (const auto& e : j.at("case_labels")) {
      CaseLabel c;
      c.label = parse_case(e.at("label").get<std::string>());
      c.evidence = {detail::json_real(e.at("loglog_slope_mc")), detail::json_real(e.at("loglog_slope_lin")),
                    detail::json_real(e.at("median_ratio")), detail::json_real(e.at("plateau_span"))};
      r.case_labels.emplace_back(e.at("explainer").get<std::string>(), c);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("sweep JSON: ") + e.what());
  }
  return r;
}

enum class ExportFormat { CSV, JSON };

/**
 * Writes results.csv or results.json into @p dir; the CSV export also writes
 * per-explainer plot data (curve_<explainer>.csv: sigma, sigma2, mean MUEs)
 * and cases.csv.  Returns the written paths.
 */
inline std::vector<std::string> export_results(const SweepResult& result, ExportFormat format,
                                               const std::string& dir) {
  namespace fs = std::filesystem;
  std::vector<std::string> written;
  if (format == ExportFormat::JSON) {
    const fs::path p = fs::path(dir) / "results.json";
    auto out = detail::open_out(p);
    out << to_json(result).dump(2) << "\n";
    written.push_back(p.string());
    return written;
  }
  {
    const fs::path p = fs::path(dir) / "results.csv";
    auto out = detail::open_out(p);
    out << results_csv(result);
    written.push_back(p.string());
  }
  std::vector<std::string> names;
  for (const auto& a : result.aggregates) {
    if (std::find(names.begin(), names.end(), a.explainer) == names.end()) {
      names.push_back(a.explainer);
    }
  }
  for (const auto& name : names) {
    const fs::path p = fs::path(dir) / ("curve_" + name + ".csv");
    auto out = detail::open_out(p);
    out << "sigma,sigma2,mue_lin_mean,mue_mc_mean,n_valid\n";
    for (const auto& a : result.aggregates) {
      if (a.explainer == name) {
        out << detail::fmt_real(a.sigma) << "," << detail::fmt_real(a.sigma * a.sigma) << ","
            << detail::fmt_real(a.mue_lin_mean) << "," << detail::fmt_real(a.mue_mc_mean) << "," << a.n_valid
            << "\n";
      }
    }
    written.push_back(p.string());
  }
  const fs::path p = fs::path(dir) / "cases.csv";
  auto out = detail::open_out(p);
  out << "explainer,label,loglog_slope_mc,loglog_slope_lin,median_ratio,plateau_span\n";
  for (const auto& [name, c] : result.case_labels) {
    out << name << "," << to_string(c.label) << "," << detail::fmt_real(c.evidence.loglog_slope_mc) << ","
        << detail::fmt_real(c.evidence.loglog_slope_lin) << "," << detail::fmt_real(c.evidence.median_ratio) << ","
        << detail::fmt_real(c.evidence.plateau_span) << "\n";
  }
  written.push_back(p.string());
  return written;
}

/// Loads data and model, runs every cell, writes CSV and JSON results to cfg.output_dir.
inline SweepResult run_sweep(const SweepConfig& cfg) {
  const Dataset eval = load_dataset(cfg.dataset, cfg.data_dir, Split::Test, cfg.split_seed);
  const Model model = obtain_model(cfg);
  SweepResult result = compute_sweep(cfg, model, eval);
  export_results(result, ExportFormat::CSV, cfg.output_dir);
  export_results(result, ExportFormat::JSON, cfg.output_dir);
  return result;
}

// ---------------------------------------------------------------------------
// Histogram and diagonal-map data
// ---------------------------------------------------------------------------

struct HistogramSeries {
  double sigma = 0.0;
  std::vector<double> values;  // explanation coordinate under each of the N draws
};

struct HistogramData {
  std::size_t feature_index = 0;
  double reference = 0.0;
  std::vector<HistogramSeries> series;
};

/// Values of explanation coordinate @p feature_index under N perturbations, per sigma.
[[nodiscard]] inline HistogramData histogram_data(const ExplainerSpec& spec, const Model& model,
                                                  std::span<const double> x, PerturbationKind kind,
                                                  std::span<const double> sigmas, std::size_t feature_index,
                                                  std::size_t n, const RngStream& rng, std::size_t threads = 1) {
  const std::size_t m = explanation_size(model);
  if (feature_index >= m) {
    throw InvalidArgument("export_histograms: feature index " + std::to_string(feature_index) +
                          " out of range [0, " + std::to_string(m) + ")");
  }
  const ExplainFn e = bind_explainer(spec, resolve_target(spec.target, model, x));
  HistogramData h;
  h.feature_index = feature_index;
  h.reference = e(model, x)[feature_index];
  for (double s : sigmas) {
    HistogramSeries series{s, {}};
    for (const auto& v : mc_explanations(e, model, x, kind, s, n, rng, threads)) {
      series.values.push_back(v[feature_index]);
    }
    h.series.push_back(std::move(series));
  }
  return h;
}

/// CSV columns: sigma,draw,value,reference
inline void export_histograms(const HistogramData& h, const std::string& path) {
  auto out = detail::open_out(path);
  out << "sigma,draw,value,reference\n";
  for (const auto& s : h.series) {
    for (std::size_t k = 0; k < s.values.size(); ++k) {
      out << detail::fmt_real(s.sigma) << "," << k << "," << detail::fmt_real(s.values[k]) << ","
          << detail::fmt_real(h.reference) << "\n";
    }
  }
}

struct DiagonalMaps {
  std::size_t height = 0;  // 28 x 28 grid for images, m x 1 otherwise
  std::size_t width = 0;
  std::vector<double> jacobian;  // NaN when J has no pixel-wise diagonal (weight blocks)
  std::vector<double> cov_lin;
  std::vector<double> cov_mc;
};

/**
 * Diagonals of J, Sigma_lin and Sigma_mc.  For an image input block
 * (d = channels * m) the Jacobian diagonal of pixel p is the channel mean of
 * d e_p / d x_(p, c).
 */
[[nodiscard]] inline DiagonalMaps diagonal_maps(const JacobianBlock& jac, const CovarianceEstimate& cov_lin,
                                                const CovarianceEstimate& cov_mc, std::size_t height = 0,
                                                std::size_t width = 0) {
  const std::size_t m = jac.matrix.rows();
  for (const auto* c : {&cov_lin, &cov_mc}) {
    if (!c->matrix.square()) {
      throw InvalidArgument("export_diagonals: covariance is not square");
    }
    if (c->matrix.rows() != m) {
      throw InvalidArgument("export_diagonals: covariance size does not match the Jacobian rows");
    }
  }
  DiagonalMaps d;
  d.height = height == 0 ? m : height;
  d.width = width == 0 ? 1 : width;
  if (d.height * d.width != m) {
    throw InvalidArgument("export_diagonals: grid does not cover m entries");
  }
  const std::size_t cols = jac.matrix.cols();
  const bool pixelwise = jac.target.kind == PerturbationKind::Input && cols % m == 0;
  const std::size_t ch = pixelwise ? cols / m : 0;
  for (std::size_t i = 0; i < m; ++i) {
    double jd = std::numeric_limits<double>::quiet_NaN();
    if (pixelwise) {
      jd = 0.0;
      for (std::size_t c = 0; c < ch; ++c) {
        jd += jac.matrix(i, i * ch + c);
      }
      jd /= static_cast<double>(ch);
    }
    d.jacobian.push_back(jd);
    d.cov_lin.push_back(cov_lin.matrix(i, i));
    d.cov_mc.push_back(cov_mc.matrix(i, i));
  }
  return d;
}

/// CSV columns: index,row,col,jacobian,cov_lin,cov_mc
inline void export_diagonals(const DiagonalMaps& d, const std::string& path) {
  auto out = detail::open_out(path);
  out << "index,row,col,jacobian,cov_lin,cov_mc\n";
  for (std::size_t i = 0; i < d.jacobian.size(); ++i) {
    out << i << "," << i / d.width << "," << i % d.width << "," << detail::fmt_real(d.jacobian[i]) << ","
        << detail::fmt_real(d.cov_lin[i]) << "," << detail::fmt_real(d.cov_mc[i]) << "\n";
  }
}

}  // namespace uxprop
