/**
 * @file explainers.hpp
 * @brief Saliency, Gradient x Input, Guided Backprop, Integrated Gradients and Occlusion.
 *
 * Every explainer is a deterministic function of (spec, model, x, target).
 * Image attributions are computed per input value and then reduced to one
 * value per pixel by averaging the signed channel values, so MNIST
 * explanations have 28*28 entries and tabular ones have one per feature.
 */
#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "uxprop/errors.hpp"
#include "uxprop/linalg.hpp"
#include "uxprop/nn.hpp"

namespace uxprop {

enum class Method { Saliency, GradientInput, GuidedBackprop, IntegratedGradients, Occlusion };

inline constexpr std::array<Method, 5> kAllMethods{Method::Saliency, Method::GradientInput, Method::GuidedBackprop,
                                                   Method::IntegratedGradients, Method::Occlusion};

[[nodiscard]] inline std::string to_string(Method m) {
  switch (m) {
    case Method::Saliency:
      return "Saliency";
    case Method::GradientInput:
      return "GradientInput";
    case Method::GuidedBackprop:
      return "GuidedBackprop";
    case Method::IntegratedGradients:
      return "IntegratedGradients";
    case Method::Occlusion:
      return "Occlusion";
  }
  return "?";
}

[[nodiscard]] inline Method parse_method(const std::string& s) {
  for (Method m : kAllMethods) {
    if (s == to_string(m)) {
      return m;
    }
  }
  throw InvalidArgument("unknown explainer '" + s + "'");
}

struct TargetRule {
  enum class Kind { RegressionOutput, PredictedClass, FixedClass };
  Kind kind = Kind::PredictedClass;
  std::size_t fixed_class = 0;
};

struct OcclusionParams {
  std::size_t patch_h = 4;
  std::size_t patch_w = 4;
  std::size_t stride = 4;
  double fill = 0.0;
};

struct ExplainerSpec {
  Method method = Method::Saliency;
  TargetRule target;
  std::size_t ig_steps = 64;
  std::optional<std::vector<double>> ig_baseline;  // zero baseline when empty
  OcclusionParams occlusion;
};

struct Explanation {
  Tensor values;
  Method method = Method::Saliency;
  std::size_t sample_id = 0;
  std::size_t target = 0;
};

[[nodiscard]] inline bool is_image_model(const Model& model) { return model.input_shape().size() == 3; }

/// Number of explanation entries m for @p model: h*w for images, n otherwise.
[[nodiscard]] inline std::size_t explanation_size(const Model& model) {
  const auto& s = model.input_shape();
  return is_image_model(model) ? s[0] * s[1] : shape_size(s);
}

/// Signed per-pixel mean over the channel axis of an [h, w, c] attribution.
[[nodiscard]] inline std::vector<double> reduce_channels(std::span<const double> raw, const Shape& shape) {
  if (shape.size() != 3 || shape_size(shape) != raw.size()) {
    throw InvalidArgument("reduce_channels: expected an [h,w,c] tensor, got shape " + shape_string(shape));
  }
  const std::size_t pixels = shape[0] * shape[1], c = shape[2];
  std::vector<double> out(pixels);
  for (std::size_t p = 0; p < pixels; ++p) {
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      s += raw[p * c + k];
    }
    out[p] = s / static_cast<double>(c);
  }
  return out;
}

[[nodiscard]] inline Tensor reduce_channels(const Tensor& raw) {
  return Tensor::vector(reduce_channels(raw.data(), raw.shape()));
}

namespace detail {

inline std::vector<double> finish(const Model& model, std::vector<double> raw) {
  return is_image_model(model) ? reduce_channels(raw, model.input_shape()) : raw;
}

}  // namespace detail

/// Output index the explainers attribute; classification defaults to the predicted class.
[[nodiscard]] inline std::size_t resolve_target(const TargetRule& rule, const Model& model, std::span<const double> x) {
  if (model.task() == Task::Regression) {
    return 0;
  }
  switch (rule.kind) {
    case TargetRule::Kind::FixedClass:
      detail::check_target(model, rule.fixed_class);
      return rule.fixed_class;
    case TargetRule::Kind::RegressionOutput:
      throw InvalidArgument("resolve_target: RegressionOutput rule on a classification model");
    case TargetRule::Kind::PredictedClass:
      break;
  }
  return predicted_class(model, x);
}

[[nodiscard]] inline std::vector<double> saliency(const Model& model, std::span<const double> x, std::size_t target) {
  return detail::finish(model, detail::gradient_of_output(model, x, target, BackwardRule::Plain));
}

[[nodiscard]] inline std::vector<double> gradient_input(const Model& model, std::span<const double> x,
                                                        std::size_t target) {
  auto g = detail::gradient_of_output(model, x, target, BackwardRule::Plain);
  for (std::size_t i = 0; i < g.size(); ++i) {
    g[i] *= x[i];
  }
  return detail::finish(model, std::move(g));
}

[[nodiscard]] inline std::vector<double> guided_backprop(const Model& model, std::span<const double> x,
                                                         std::size_t target) {
  return detail::finish(model, detail::gradient_of_output(model, x, target, BackwardRule::Guided));
}

/// Midpoint-rule path integral of the gradient times (x - baseline), one value per input entry.
[[nodiscard]] inline std::vector<double> integrated_gradients_unreduced(const Model& model, std::span<const double> x,
                                                                        std::size_t target,
                                                                        std::span<const double> baseline,
                                                                        std::size_t steps) {
  if (steps < 2) {
    throw InvalidArgument("integrated_gradients: steps must be >= 2, got " + std::to_string(steps));
  }
  if (baseline.size() != x.size()) {
    throw InvalidArgument("integrated_gradients: baseline has " + std::to_string(baseline.size()) +
                          " values, input has " + std::to_string(x.size()));
  }
  std::vector<double> acc(x.size(), 0.0);
  std::vector<double> point(x.size());
  for (std::size_t k = 0; k < steps; ++k) {
    const double alpha = (static_cast<double>(k) + 0.5) / static_cast<double>(steps);
    for (std::size_t i = 0; i < x.size(); ++i) {
      point[i] = baseline[i] + alpha * (x[i] - baseline[i]);
    }
    const auto g = detail::gradient_of_output(model, point, target, BackwardRule::Plain);
    for (std::size_t i = 0; i < x.size(); ++i) {
      acc[i] += g[i];
    }
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    acc[i] *= (x[i] - baseline[i]) / static_cast<double>(steps);
  }
  return acc;
}

[[nodiscard]] inline std::vector<double> integrated_gradients(const Model& model, std::span<const double> x,
                                                              std::size_t target, std::span<const double> baseline,
                                                              std::size_t steps) {
  return detail::finish(model, integrated_gradients_unreduced(model, x, target, baseline, steps));
}

/**
 * Score drop f(x) - f(x_occluded) attributed to the occluded entries.
 *
 * Images: a patch_h x patch_w window slides with @p stride over the spatial
 * grid; all channels under it are set to @p fill and every covered pixel
 * receives the mean drop of the windows covering it (0 if never covered).
 * Tabular: one feature at a time is set to @p fill.
 */
[[nodiscard]] inline std::vector<double> occlusion(const Model& model, std::span<const double> x, std::size_t target,
                                                   const OcclusionParams& p) {
  if (p.stride == 0 || p.patch_h == 0 || p.patch_w == 0) {
    throw InvalidArgument("occlusion: patch size and stride must be positive");
  }
  const double reference = selected_output(model, x, target);
  std::vector<double> probe(x.begin(), x.end());
  if (!is_image_model(model)) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      probe[i] = p.fill;
      out[i] = reference - selected_output(model, probe, target);
      probe[i] = x[i];
    }
    return out;
  }
  const auto& s = model.input_shape();
  const std::size_t h = s[0], w = s[1], c = s[2];
  if (p.patch_h > h || p.patch_w > w) {
    throw InvalidArgument("occlusion: patch " + std::to_string(p.patch_h) + "x" + std::to_string(p.patch_w) +
                          " larger than image " + std::to_string(h) + "x" + std::to_string(w));
  }
  std::vector<double> sum(h * w, 0.0);
  std::vector<double> count(h * w, 0.0);
  for (std::size_t y0 = 0; y0 + p.patch_h <= h; y0 += p.stride) {
    for (std::size_t x0 = 0; x0 + p.patch_w <= w; x0 += p.stride) {
      for (std::size_t y = y0; y < y0 + p.patch_h; ++y) {
        for (std::size_t xx = x0; xx < x0 + p.patch_w; ++xx) {
          std::fill_n(probe.begin() + static_cast<std::ptrdiff_t>((y * w + xx) * c), c, p.fill);
        }
      }
      const double drop = reference - selected_output(model, probe, target);
      for (std::size_t y = y0; y < y0 + p.patch_h; ++y) {
        for (std::size_t xx = x0; xx < x0 + p.patch_w; ++xx) {
          sum[y * w + xx] += drop;
          count[y * w + xx] += 1.0;
          const std::size_t off = (y * w + xx) * c;
          std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(off), c, probe.begin() + static_cast<std::ptrdiff_t>(off));
        }
      }
    }
  }
  for (std::size_t i = 0; i < sum.size(); ++i) {
    if (count[i] > 0.0) {
      sum[i] /= count[i];
    }
  }
  return sum;
}

/// Raw explanation values for a fixed target; the hot path used by the propagation code.
[[nodiscard]] inline std::vector<double> explain_values(const ExplainerSpec& spec, const Model& model,
                                                        std::span<const double> x, std::size_t target) {
  switch (spec.method) {
    case Method::Saliency:
      return saliency(model, x, target);
    case Method::GradientInput:
      return gradient_input(model, x, target);
    case Method::GuidedBackprop:
      return guided_backprop(model, x, target);
    case Method::IntegratedGradients: {
      if (spec.ig_baseline) {
        return integrated_gradients(model, x, target, *spec.ig_baseline, spec.ig_steps);
      }
      const std::vector<double> zero(x.size(), 0.0);
      return integrated_gradients(model, x, target, zero, spec.ig_steps);
    }
    case Method::Occlusion:
      return occlusion(model, x, target, spec.occlusion);
  }
  throw InvalidArgument("explain: unknown method");
}

/// Resolves the target from spec.target and wraps the result.
[[nodiscard]] inline Explanation explain(const ExplainerSpec& spec, const Model& model, std::span<const double> x,
                                         std::size_t sample_id = 0) {
  if (x.size() != model.input_size()) {
    throw InvalidArgument("explain: input has " + std::to_string(x.size()) + " values, model expects " +
                          shape_string(model.input_shape()));
  }
  const std::size_t target = resolve_target(spec.target, model, x);
  auto values = explain_values(spec, model, x, target);
  if (values.size() != explanation_size(model)) {
    throw std::logic_error("explain: explanation length mismatch");
  }
  if (!all_finite(values)) {
    throw NonFiniteValue("explain: " + to_string(spec.method) + " produced a non-finite value");
  }
  return {Tensor::vector(std::move(values)), spec.method, sample_id, target};
}

}  // namespace uxprop
