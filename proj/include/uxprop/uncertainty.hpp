/**
 * @file uncertainty.hpp
 * @brief Propagation of Gaussian input / weight noise into explanations.
 *
 * Two estimators of the explanation covariance under an isotropic
 * perturbation N(0, sigma^2 I) of either the input x or the final Dense
 * weights:
 *
 *   - analytical (first order):  sigma^2 * J * J^T, with J the forward
 *     difference Jacobian of the explanation w.r.t. the perturbed quantity;
 *   - Monte Carlo:                sample covariance of N perturbed explanations.
 *
 * Both are summarised by the mean uncertainty in the explanation,
 *
 *   MUE = trace(Sigma) / (m * ||e(x)||^2).
 *
 * Jacobian columns and Monte Carlo draws are independent work items.  Draw k
 * uses the substream rng.substream(k) for every sigma (common random
 * numbers), so results are a pure function of the inputs and the seed.
 */
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "uxprop/errors.hpp"
#include "uxprop/explainers.hpp"
#include "uxprop/linalg.hpp"
#include "uxprop/nn.hpp"
#include "uxprop/parallel.hpp"

namespace uxprop {

enum class PerturbationKind { Input, FinalDenseWeights };

[[nodiscard]] inline std::string to_string(PerturbationKind k) {
  return k == PerturbationKind::Input ? "input" : "weights";
}

[[nodiscard]] inline PerturbationKind parse_perturbation_kind(const std::string& s) {
  if (s == "input" || s == "Input") {
    return PerturbationKind::Input;
  }
  if (s == "weights" || s == "FinalDenseWeights") {
    return PerturbationKind::FinalDenseWeights;
  }
  throw InvalidArgument("unknown perturbation target '" + s + "' (expected input or weights)");
}

struct PerturbationTarget {
  PerturbationKind kind = PerturbationKind::Input;
  std::size_t dimension = 0;  // n for Input, r for FinalDenseWeights
};

[[nodiscard]] inline PerturbationTarget make_target(PerturbationKind kind, const Model& model) {
  return {kind, kind == PerturbationKind::Input ? model.input_size() : model.final_dense().weight_count};
}

/// Explainer with its output target already fixed: (model, x) -> explanation values.
using ExplainFn = std::function<std::vector<double>(const Model&, std::span<const double>)>;

[[nodiscard]] inline ExplainFn bind_explainer(ExplainerSpec spec, std::size_t target) {
  return [spec = std::move(spec), target](const Model& model, std::span<const double> x) {
    return explain_values(spec, model, x, target);
  };
}

struct JacobianBlock {
  Matrix matrix;  // m x d
  PerturbationTarget target;
  double delta = 0.0;
  std::string explainer;
  std::size_t sample_id = 0;
};

enum class Estimator { Analytical, MonteCarlo };

struct CovarianceEstimate {
  double sigma = 0.0;
  Matrix matrix;
  Estimator estimator = Estimator::Analytical;
  std::size_t n_samples = 0;  // MonteCarlo only
  std::uint64_t seed = 0;     // MonteCarlo only
};

struct MueRecord {
  std::string dataset;
  std::size_t sample_id = 0;
  std::string explainer;
  PerturbationKind target = PerturbationKind::Input;
  double sigma = 0.0;
  double mue_lin = 0.0;
  double mue_mc = 0.0;
  std::size_t n_samples = 0;
  std::size_t m = 0;
  double ref_norm_sq = 0.0;
  std::string flag;  // empty when the record is valid

  friend bool operator==(const MueRecord&, const MueRecord&) = default;
};

inline constexpr double kDegenerateNormSq = 1e-12;

struct PropagationOptions {
  double delta = 1e-4;
  std::size_t n_samples = 100;
  std::size_t threads = 1;
};

namespace detail {

inline void check_finite_probe(const std::vector<double>& e, const char* what, std::size_t index) {
  if (!all_finite(e)) {
    throw NonFiniteValue(std::string(what) + " " + std::to_string(index) + ": explanation is not finite");
  }
}

inline void check_input(const Model& model, std::span<const double> x, const char* who) {
  if (x.size() != model.input_size()) {
    throw InvalidArgument(std::string(who) + ": input has " + std::to_string(x.size()) + " values, model expects " +
                          shape_string(model.input_shape()));
  }
}

/// Calls visit(k, perturbed_model, perturbed_x) with x or the final weights shifted by shift(k).
template <class Shift, class Visit>
void for_each_perturbation(const Model& model, std::span<const double> x, PerturbationKind kind, std::size_t count,
                           std::size_t threads, Shift&& shift, Visit&& visit) {
  check_input(model, x, "perturbation");
  const std::size_t workers = std::min(resolve_threads(threads), std::max<std::size_t>(count, 1));
  // Worker-local copies; each work item patches them and restores afterwards.
  std::vector<Model> models(kind == PerturbationKind::FinalDenseWeights ? workers : 0, model);
  std::vector<std::vector<double>> inputs(kind == PerturbationKind::Input ? workers : 0,
                                          std::vector<double>(x.begin(), x.end()));
  const std::vector<double> w0 =
      kind == PerturbationKind::FinalDenseWeights ? get_final_dense_weights(model).values() : std::vector<double>{};
  parallel_for(workers, workers, [&](std::size_t w) {
    for (std::size_t k = w; k < count; k += workers) {
      if (kind == PerturbationKind::Input) {
        auto& xp = inputs[w];
        shift(k, std::span<const double>(x), std::span<double>(xp));
        visit(k, model, std::span<const double>(xp));
        std::copy(x.begin(), x.end(), xp.begin());
      } else {
        auto& mp = models[w];
        auto wp = mp.final_dense_weight_mut().data();
        shift(k, std::span<const double>(w0), wp);
        visit(k, static_cast<const Model&>(mp), x);
        std::copy(w0.begin(), w0.end(), wp.begin());
      }
    }
  });
}

}  // namespace detail

/**
 * Forward-difference Jacobian: column i = (e(p + delta*u_i) - e(p)) / delta,
 * where p is the input or the final Dense weight vector.  @p reference is
 * e evaluated at the unperturbed point.
 */
[[nodiscard]] inline JacobianBlock jacobian_block(const ExplainFn& explainer, const Model& model,
                                                  std::span<const double> x, const std::vector<double>& reference,
                                                  PerturbationKind kind, double delta, std::size_t threads = 1) {
  if (!(delta > 0.0) || !std::isfinite(delta)) {
    throw InvalidArgument("jacobian_block: delta must be positive");
  }
  const PerturbationTarget target = make_target(kind, model);
  const std::size_t m = reference.size();
  Matrix jac(m, target.dimension);
  detail::for_each_perturbation(
      model, x, kind, target.dimension, threads,
      [delta](std::size_t i, std::span<const double>, std::span<double> p) { p[i] += delta; },
      [&](std::size_t i, const Model& mp, std::span<const double> xp) {
        const auto e = explainer(mp, xp);
        detail::check_finite_probe(e, "jacobian_block: coordinate", i);
        if (e.size() != m) {
          throw InvalidArgument("jacobian_block: explanation length changed under probe " + std::to_string(i));
        }
        for (std::size_t r = 0; r < m; ++r) {
          jac(r, i) = (e[r] - reference[r]) / delta;
        }
      });
  return {std::move(jac), target, delta, {}, 0};
}

[[nodiscard]] inline JacobianBlock jacobian_block(const ExplainFn& explainer, const Model& model,
                                                  std::span<const double> x, PerturbationKind kind, double delta,
                                                  std::size_t threads = 1) {
  detail::check_input(model, x, "jacobian_block");
  const auto reference = explainer(model, x);
  detail::check_finite_probe(reference, "jacobian_block: reference", 0);
  return jacobian_block(explainer, model, x, reference, kind, delta, threads);
}

/// Spec-based overload; a classification target is fixed at the unperturbed prediction.
[[nodiscard]] inline JacobianBlock jacobian_block(const ExplainerSpec& spec, const Model& model,
                                                  std::span<const double> x, PerturbationKind kind, double delta,
                                                  std::size_t threads = 1) {
  auto block = jacobian_block(bind_explainer(spec, resolve_target(spec.target, model, x)), model, x, kind, delta,
                              threads);
  block.explainer = to_string(spec.method);
  return block;
}

/// sigma^2 * J * J^T, exactly symmetric.
[[nodiscard]] inline CovarianceEstimate analytical_covariance(const JacobianBlock& jac, double sigma) {
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) {
    throw InvalidArgument("analytical_covariance: sigma must be finite and non-negative");
  }
  return {sigma, scaled(matmul_transposed(jac.matrix), sigma * sigma), Estimator::Analytical, 0, 0};
}

/// The N explanations e(p + sigma * z_k), z_k ~ N(0, I) from rng.substream(k).
[[nodiscard]] inline std::vector<std::vector<double>> mc_explanations(const ExplainFn& explainer, const Model& model,
                                                                      std::span<const double> x,
                                                                      PerturbationKind kind, double sigma,
                                                                      std::size_t n, const RngStream& rng,
                                                                      std::size_t threads = 1) {
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) {
    throw InvalidArgument("mc_covariance: sigma must be finite and non-negative");
  }
  if (n < 2) {
    throw InvalidArgument("mc_covariance: need N >= 2 draws, got " + std::to_string(n));
  }
  std::vector<std::vector<double>> out(n);
  const std::size_t dim = make_target(kind, model).dimension;
  detail::for_each_perturbation(
      model, x, kind, n, threads,
      [&](std::size_t k, std::span<const double> base, std::span<double> p) {
        std::vector<double> z(dim);
        fill_standard_normal(z, rng.substream(k));
        for (std::size_t i = 0; i < dim; ++i) {
          p[i] = base[i] + sigma * z[i];
        }
      },
      [&](std::size_t k, const Model& mp, std::span<const double> xp) {
        try {
          out[k] = explainer(mp, xp);
        } catch (const std::exception& e) {
          throw std::runtime_error("mc_covariance: draw " + std::to_string(k) + ": " + e.what());
        }
        detail::check_finite_probe(out[k], "mc_covariance: draw", k);
      });
  return out;
}

[[nodiscard]] inline CovarianceEstimate mc_covariance(const ExplainFn& explainer, const Model& model,
                                                      std::span<const double> x, PerturbationKind kind, double sigma,
                                                      std::size_t n, const RngStream& rng, std::size_t threads = 1) {
  const auto samples = mc_explanations(explainer, model, x, kind, sigma, n, rng, threads);
  return {sigma, empirical_covariance(std::span<const std::vector<double>>(samples)), Estimator::MonteCarlo, n,
          rng.seed};
}

[[nodiscard]] inline CovarianceEstimate mc_covariance(const ExplainerSpec& spec, const Model& model,
                                                      std::span<const double> x, PerturbationKind kind, double sigma,
                                                      std::size_t n, const RngStream& rng, std::size_t threads = 1) {
  return mc_covariance(bind_explainer(spec, resolve_target(spec.target, model, x)), model, x, kind, sigma, n, rng,
                       threads);
}

/// trace / (m * ref_norm_sq); throws DegenerateReference when ref_norm_sq < 1e-12.
[[nodiscard]] inline double mue_from_trace(double trace_value, double ref_norm_sq, std::size_t m) {
  if (!(ref_norm_sq >= kDegenerateNormSq)) {
    throw DegenerateReference("MUE: reference explanation has squared norm " + std::to_string(ref_norm_sq) +
                              " < 1e-12");
  }
  return trace_value / (static_cast<double>(m) * ref_norm_sq);
}

[[nodiscard]] inline double mue(const CovarianceEstimate& cov, std::span<const double> reference) {
  if (!cov.matrix.square() || cov.matrix.rows() != reference.size()) {
    throw InvalidArgument("mue: covariance is " + std::to_string(cov.matrix.rows()) + "x" +
                          std::to_string(cov.matrix.cols()) + " but the reference has length " +
                          std::to_string(reference.size()));
  }
  return mue_from_trace(trace(cov.matrix), squared_norm(reference), reference.size());
}

/// (sigma, sigma^2 ||J||_F^2 / (m ||e||^2)) for every sigma, from one Jacobian.
[[nodiscard]] inline std::vector<std::pair<double, double>> mue_curve_analytical(const JacobianBlock& jac,
                                                                                 std::span<const double> reference,
                                                                                 std::span<const double> sigmas) {
  if (jac.matrix.rows() != reference.size()) {
    throw InvalidArgument("mue_curve_analytical: Jacobian has " + std::to_string(jac.matrix.rows()) +
                          " rows but the reference has length " + std::to_string(reference.size()));
  }
  const double frob = frobenius_norm_sq(jac.matrix);
  const double norm_sq = squared_norm(reference);
  std::vector<std::pair<double, double>> curve;
  curve.reserve(sigmas.size());
  for (double s : sigmas) {
    curve.emplace_back(s, mue_from_trace(s * s * frob, norm_sq, reference.size()));
  }
  return curve;
}

/**
 * Analytical and Monte Carlo MUE for every sigma: one reference explanation,
 * one Jacobian, and N perturbed explanations per sigma.  The classification
 * target is fixed at the prediction for the unperturbed (x, model).
 */
[[nodiscard]] inline std::vector<MueRecord> uxai(const ExplainerSpec& spec, const Model& model,
                                                 std::span<const double> x, PerturbationKind kind,
                                                 std::span<const double> sigmas, const RngStream& rng,
                                                 const PropagationOptions& opt = {}) {
  if (sigmas.empty()) {
    return {};
  }
  detail::check_input(model, x, "uxai");
  const std::size_t target = resolve_target(spec.target, model, x);
  const ExplainFn explainer = bind_explainer(spec, target);
  const auto reference = explainer(model, x);
  detail::check_finite_probe(reference, "uxai: reference", 0);
  const double norm_sq = squared_norm(reference);
  if (norm_sq < kDegenerateNormSq) {
    throw DegenerateReference("uxai: " + to_string(spec.method) + " reference explanation has squared norm " +
                              std::to_string(norm_sq) + " < 1e-12");
  }
  const auto jac = jacobian_block(explainer, model, x, reference, kind, opt.delta, opt.threads);
  const auto curve = mue_curve_analytical(jac, reference, sigmas);
  std::vector<MueRecord> records;
  records.reserve(sigmas.size());
  for (std::size_t s = 0; s < sigmas.size(); ++s) {
    const auto samples = mc_explanations(explainer, model, x, kind, sigmas[s], opt.n_samples, rng, opt.threads);
    MueRecord r;
    r.explainer = to_string(spec.method);
    r.target = kind;
    r.sigma = sigmas[s];
    r.mue_lin = curve[s].second;
    r.mue_mc = mue_from_trace(empirical_covariance_trace(samples), norm_sq, reference.size());
    r.n_samples = opt.n_samples;
    r.m = reference.size();
    r.ref_norm_sq = norm_sq;
    records.push_back(std::move(r));
  }
  return records;
}

[[nodiscard]] inline std::vector<MueRecord> uxai_input(const ExplainerSpec& spec, const Model& model,
                                                       std::span<const double> x, std::span<const double> sigmas,
                                                       const RngStream& rng, const PropagationOptions& opt = {}) {
  return uxai(spec, model, x, PerturbationKind::Input, sigmas, rng, opt);
}

[[nodiscard]] inline std::vector<MueRecord> uxai_weights(const ExplainerSpec& spec, const Model& model,
                                                         std::span<const double> x, std::span<const double> sigmas,
                                                         const RngStream& rng, const PropagationOptions& opt = {}) {
  return uxai(spec, model, x, PerturbationKind::FinalDenseWeights, sigmas, rng, opt);
}

}  // namespace uxprop
