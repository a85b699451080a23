/**
 * @file nn.hpp
 * @brief Small feed-forward network engine: forward pass, input/guided gradients,
 *        SGD training, final-Dense weight access and a binary model format.
 *
 * Activations use HWC layout for image tensors.  A Model is a value: the
 * gradient and forward functions only read it, and weight updates return a
 * new Model.
 */
#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "uxprop/datasets.hpp"
#include "uxprop/errors.hpp"
#include "uxprop/linalg.hpp"

namespace uxprop {

enum class LayerKind { Dense, ReLU, Conv2D, MaxPool2x2, AvgPool2x2, Flatten, Softmax };
enum class Task { Regression, Classification };

/// Linear replaces every ReLU by the identity (activation ablation).
enum class ActivationMode { ReLU, Linear };

/// Guided: ReLU backward steps also zero negative incoming signals.
enum class BackwardRule { Plain, Guided };

[[nodiscard]] inline std::string to_string(ActivationMode m) { return m == ActivationMode::ReLU ? "relu" : "linear"; }

[[nodiscard]] inline ActivationMode parse_activation_mode(const std::string& s) {
  if (s == "relu") {
    return ActivationMode::ReLU;
  }
  if (s == "linear") {
    return ActivationMode::Linear;
  }
  throw InvalidArgument("unknown activation mode '" + s + "' (expected relu or linear)");
}

struct Layer {
  LayerKind kind = LayerKind::ReLU;
  Matrix weight;              // Dense: out x in
  Tensor kernel;              // Conv2D: [out_ch, in_ch, kh, kw]
  std::vector<double> bias;   // Dense: out; Conv2D: out_ch (all zero when !use_bias)
  bool use_bias = true;       // Conv2D only
  Shape in_shape;             // filled in by Model
  Shape out_shape;            // filled in by Model

  static Layer dense(Matrix w, std::vector<double> b) {
    if (w.rows() != b.size()) {
      throw InvalidArgument("Dense: weight rows " + std::to_string(w.rows()) + " != bias length " +
                            std::to_string(b.size()));
    }
    Layer l;
    l.kind = LayerKind::Dense;
    l.weight = std::move(w);
    l.bias = std::move(b);
    return l;
  }
  static Layer dense(std::size_t in, std::size_t out) { return dense(Matrix(out, in), std::vector<double>(out, 0.0)); }

  static Layer conv2d(Tensor kernel, std::vector<double> bias, bool use_bias = true) {
    if (kernel.shape().size() != 4 || kernel.shape()[2] != kernel.shape()[3]) {
      throw InvalidArgument("Conv2D: kernel must be [out_ch, in_ch, k, k], got " + shape_string(kernel.shape()));
    }
    if (bias.size() != kernel.shape()[0]) {
      throw InvalidArgument("Conv2D: bias length " + std::to_string(bias.size()) + " != out_ch " +
                            std::to_string(kernel.shape()[0]));
    }
    Layer l;
    l.kind = LayerKind::Conv2D;
    l.kernel = std::move(kernel);
    l.bias = std::move(bias);
    l.use_bias = use_bias;
    if (!use_bias) {
      std::fill(l.bias.begin(), l.bias.end(), 0.0);
    }
    return l;
  }
  static Layer conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t k, bool use_bias = true) {
    return conv2d(Tensor(Shape{out_ch, in_ch, k, k}), std::vector<double>(out_ch, 0.0), use_bias);
  }

  static Layer relu() { return simple(LayerKind::ReLU); }
  static Layer max_pool() { return simple(LayerKind::MaxPool2x2); }
  static Layer avg_pool() { return simple(LayerKind::AvgPool2x2); }
  static Layer flatten() { return simple(LayerKind::Flatten); }
  static Layer softmax() { return simple(LayerKind::Softmax); }

  [[nodiscard]] std::size_t parameter_count() const noexcept {
    switch (kind) {
      case LayerKind::Dense:
        return weight.data().size() + bias.size();
      case LayerKind::Conv2D:
        return kernel.size() + bias.size();
      default:
        return 0;
    }
  }

  friend bool operator==(const Layer&, const Layer&) = default;

 private:
  static Layer simple(LayerKind k) {
    Layer l;
    l.kind = k;
    return l;
  }
};

/// Index of the last Dense layer and its weight count r (bias excluded).
struct FinalDenseSelector {
  std::size_t layer_index = 0;
  std::size_t weight_count = 0;

  friend bool operator==(const FinalDenseSelector&, const FinalDenseSelector&) = default;
};

class Model {
 public:
  Model() = default;

  /// Validates that the layer shapes compose starting from @p input_shape.
  Model(Task task, Shape input_shape, std::vector<Layer> layers, ActivationMode mode = ActivationMode::ReLU)
      : task_(task), input_shape_(std::move(input_shape)), layers_(std::move(layers)), mode_(mode) {
    if (layers_.empty()) {
      throw InvalidArgument("Model: no layers");
    }
    infer_shapes();
    pack_kernels();
  }

  [[nodiscard]] Task task() const noexcept { return task_; }
  [[nodiscard]] ActivationMode activation_mode() const noexcept { return mode_; }
  [[nodiscard]] const Shape& input_shape() const noexcept { return input_shape_; }
  [[nodiscard]] std::size_t input_size() const noexcept { return shape_size(input_shape_); }
  [[nodiscard]] const std::vector<Layer>& layers() const noexcept { return layers_; }
  [[nodiscard]] std::size_t output_size() const { return shape_size(layers_.back().out_shape); }

  /// Number of leading layers that produce the logits (everything before a trailing Softmax).
  [[nodiscard]] std::size_t logit_end() const noexcept {
    return layers_.back().kind == LayerKind::Softmax ? layers_.size() - 1 : layers_.size();
  }

  [[nodiscard]] FinalDenseSelector final_dense() const { return final_dense_; }

  [[nodiscard]] Model with_activation_mode(ActivationMode mode) const {
    Model m = *this;
    m.mode_ = mode;
    return m;
  }

  [[nodiscard]] std::size_t parameter_count() const noexcept { return param_count_; }
  [[nodiscard]] std::size_t parameter_offset(std::size_t layer) const { return param_offset_.at(layer); }

  /// All parameters flattened in declaration order (weights then bias per layer).
  [[nodiscard]] std::vector<double> parameters() const {
    std::vector<double> p;
    p.reserve(param_count_);
    for (const auto& l : layers_) {
      if (l.kind == LayerKind::Dense) {
        p.insert(p.end(), l.weight.data().begin(), l.weight.data().end());
      } else if (l.kind == LayerKind::Conv2D) {
        p.insert(p.end(), l.kernel.data().begin(), l.kernel.data().end());
      }
      if (l.kind == LayerKind::Dense || l.kind == LayerKind::Conv2D) {
        p.insert(p.end(), l.bias.begin(), l.bias.end());
      }
    }
    return p;
  }

  [[nodiscard]] Model with_parameters(std::span<const double> p) const {
    if (p.size() != param_count_) {
      throw InvalidArgument("with_parameters: expected " + std::to_string(param_count_) + " values, got " +
                            std::to_string(p.size()));
    }
    Model m = *this;
    std::size_t k = 0;
    for (auto& l : m.layers_) {
      std::span<double> w;
      if (l.kind == LayerKind::Dense) {
        w = l.weight.data();
      } else if (l.kind == LayerKind::Conv2D) {
        w = l.kernel.data();
      } else {
        continue;
      }
      std::copy_n(p.begin() + static_cast<std::ptrdiff_t>(k), w.size(), w.begin());
      k += w.size();
      std::copy_n(p.begin() + static_cast<std::ptrdiff_t>(k), l.bias.size(), l.bias.begin());
      k += l.bias.size();
    }
    m.pack_kernels();
    return m;
  }

  /// Conv2D kernel re-laid out as [kh][kw][in_ch][out_ch] for the inner loops.
  [[nodiscard]] const std::vector<double>& packed_kernel(std::size_t layer) const { return packed_.at(layer); }

  /// Mutable access for weight-perturbation probes that patch one value and restore it.
  [[nodiscard]] Matrix& final_dense_weight_mut() { return layers_[final_dense_.layer_index].weight; }

  friend bool operator==(const Model&, const Model&) = default;

 private:
  void infer_shapes() {
    if (input_shape_.empty() || shape_size(input_shape_) == 0) {
      throw InvalidArgument("Model: empty input shape");
    }
    Shape cur = input_shape_;
    std::optional<std::size_t> last_dense;
    param_offset_.clear();
    param_count_ = 0;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      auto& l = layers_[i];
      const std::string where = "Model: layer " + std::to_string(i) + ": ";
      l.in_shape = cur;
      param_offset_.push_back(param_count_);
      switch (l.kind) {
        case LayerKind::Dense:
          if (cur.size() != 1 || cur[0] != l.weight.cols()) {
            throw InvalidArgument(where + "Dense expects [" + std::to_string(l.weight.cols()) + "], got " +
                                  shape_string(cur));
          }
          if (l.bias.size() != l.weight.rows()) {
            throw InvalidArgument(where + "Dense bias length mismatch");
          }
          cur = {l.weight.rows()};
          last_dense = i;
          break;
        case LayerKind::Conv2D: {
          const auto& ks = l.kernel.shape();
          if (cur.size() != 3 || cur[2] != ks[1] || cur[0] < ks[2] || cur[1] < ks[3]) {
            throw InvalidArgument(where + "Conv2D kernel " + shape_string(ks) + " incompatible with input " +
                                  shape_string(cur));
          }
          cur = {cur[0] - ks[2] + 1, cur[1] - ks[3] + 1, ks[0]};
          break;
        }
        case LayerKind::MaxPool2x2:
        case LayerKind::AvgPool2x2:
          if (cur.size() != 3 || cur[0] < 2 || cur[1] < 2) {
            throw InvalidArgument(where + "2x2 pooling needs an [h,w,c] input with h,w >= 2, got " +
                                  shape_string(cur));
          }
          cur = {cur[0] / 2, cur[1] / 2, cur[2]};
          break;
        case LayerKind::Flatten:
          cur = {shape_size(cur)};
          break;
        case LayerKind::Softmax:
          if (i + 1 != layers_.size() || cur.size() != 1) {
            throw InvalidArgument(where + "Softmax must be the last layer and follow a vector");
          }
          break;
        case LayerKind::ReLU:
          break;
      }
      l.out_shape = cur;
      param_count_ += l.parameter_count();
    }
    if (!last_dense) {
      throw InvalidArgument("Model: no Dense layer");
    }
    final_dense_ = {*last_dense, layers_[*last_dense].weight.data().size()};
    if (task_ == Task::Regression && (output_size() != 1 || layers_.back().kind == LayerKind::Softmax)) {
      throw InvalidArgument("Model: regression models must end in a single linear output");
    }
    if (task_ == Task::Classification && layers_.back().kind != LayerKind::Softmax) {
      throw InvalidArgument("Model: classification models must end in Softmax");
    }
  }

  void pack_kernels() {
    packed_.assign(layers_.size(), {});
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      if (l.kind != LayerKind::Conv2D) {
        continue;
      }
      const auto& s = l.kernel.shape();
      const std::size_t out_ch = s[0], in_ch = s[1], kh = s[2], kw = s[3];
      auto& p = packed_[i];
      p.resize(l.kernel.size());
      for (std::size_t o = 0; o < out_ch; ++o) {
        for (std::size_t c = 0; c < in_ch; ++c) {
          for (std::size_t y = 0; y < kh; ++y) {
            for (std::size_t x = 0; x < kw; ++x) {
              p[((y * kw + x) * in_ch + c) * out_ch + o] = l.kernel[((o * in_ch + c) * kh + y) * kw + x];
            }
          }
        }
      }
    }
  }

  Task task_ = Task::Regression;
  Shape input_shape_;
  std::vector<Layer> layers_;
  ActivationMode mode_ = ActivationMode::ReLU;
  FinalDenseSelector final_dense_;
  std::vector<std::size_t> param_offset_;
  std::size_t param_count_ = 0;
  std::vector<std::vector<double>> packed_;
};

// ---------------------------------------------------------------------------
// Layer kernels
// ---------------------------------------------------------------------------

namespace detail {

/// Per-thread scratch buffers; act[i] is the input of layer i.
struct Workspace {
  std::vector<std::vector<double>> act;
  std::vector<double> grad_a;
  std::vector<double> grad_b;
};

inline Workspace& thread_workspace() {
  thread_local Workspace ws;
  return ws;
}

inline void conv_forward(const Layer& l, const std::vector<double>& packed, const double* in, double* out) {
  const std::size_t w_in = l.in_shape[1], c_in = l.in_shape[2];
  const std::size_t h_out = l.out_shape[0], w_out = l.out_shape[1], c_out = l.out_shape[2];
  const std::size_t k = l.kernel.shape()[2];
  for (std::size_t oy = 0; oy < h_out; ++oy) {
    for (std::size_t ox = 0; ox < w_out; ++ox) {
      double* o = out + (oy * w_out + ox) * c_out;
      std::copy(l.bias.begin(), l.bias.end(), o);
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const double* ip = in + ((oy + ky) * w_in + ox + kx) * c_in;
          const double* wp = packed.data() + (ky * k + kx) * c_in * c_out;
          for (std::size_t c = 0; c < c_in; ++c) {
            const double v = ip[c];
            if (v == 0.0) {
              continue;
            }
            const double* wc = wp + c * c_out;
            for (std::size_t q = 0; q < c_out; ++q) {
              o[q] += v * wc[q];
            }
          }
        }
      }
    }
  }
}

inline void conv_backward(const Layer& l, const std::vector<double>& packed, const double* in, const double* g_out,
                          double* g_in, double* g_param) {
  const std::size_t h_in = l.in_shape[0], w_in = l.in_shape[1], c_in = l.in_shape[2];
  const std::size_t h_out = l.out_shape[0], w_out = l.out_shape[1], c_out = l.out_shape[2];
  const std::size_t k = l.kernel.shape()[2];
  std::fill(g_in, g_in + h_in * w_in * c_in, 0.0);
  for (std::size_t oy = 0; oy < h_out; ++oy) {
    for (std::size_t ox = 0; ox < w_out; ++ox) {
      const double* g = g_out + (oy * w_out + ox) * c_out;
      bool any = false;
      for (std::size_t q = 0; q < c_out; ++q) {
        any = any || g[q] != 0.0;
      }
      if (!any) {
        continue;
      }
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const std::size_t in_off = ((oy + ky) * w_in + ox + kx) * c_in;
          const double* wp = packed.data() + (ky * k + kx) * c_in * c_out;
          for (std::size_t c = 0; c < c_in; ++c) {
            const double* wc = wp + c * c_out;
            double s = 0.0;
            for (std::size_t q = 0; q < c_out; ++q) {
              s += wc[q] * g[q];
            }
            g_in[in_off + c] += s;
            if (g_param != nullptr) {
              const double v = in[in_off + c];
              for (std::size_t q = 0; q < c_out; ++q) {
                g_param[((q * c_in + c) * k + ky) * k + kx] += v * g[q];
              }
            }
          }
        }
      }
      if (g_param != nullptr && l.use_bias) {
        double* gb = g_param + l.kernel.size();
        for (std::size_t q = 0; q < c_out; ++q) {
          gb[q] += g[q];
        }
      }
    }
  }
}

inline void pool_forward(const Layer& l, const double* in, double* out) {
  const std::size_t w_in = l.in_shape[1], c = l.in_shape[2];
  const std::size_t h_out = l.out_shape[0], w_out = l.out_shape[1];
  const bool is_max = l.kind == LayerKind::MaxPool2x2;
  for (std::size_t oy = 0; oy < h_out; ++oy) {
    for (std::size_t ox = 0; ox < w_out; ++ox) {
      const double* p00 = in + ((2 * oy) * w_in + 2 * ox) * c;
      const double* p01 = p00 + c;
      const double* p10 = p00 + w_in * c;
      const double* p11 = p10 + c;
      double* o = out + (oy * w_out + ox) * c;
      for (std::size_t q = 0; q < c; ++q) {
        o[q] = is_max ? std::max({p00[q], p01[q], p10[q], p11[q]}) : 0.25 * (p00[q] + p01[q] + p10[q] + p11[q]);
      }
    }
  }
}

inline void pool_backward(const Layer& l, const double* in, const double* g_out, double* g_in) {
  const std::size_t h_in = l.in_shape[0], w_in = l.in_shape[1], c = l.in_shape[2];
  const std::size_t h_out = l.out_shape[0], w_out = l.out_shape[1];
  std::fill(g_in, g_in + h_in * w_in * c, 0.0);
  const bool is_max = l.kind == LayerKind::MaxPool2x2;
  for (std::size_t oy = 0; oy < h_out; ++oy) {
    for (std::size_t ox = 0; ox < w_out; ++ox) {
      const std::array<std::size_t, 4> off{((2 * oy) * w_in + 2 * ox) * c, ((2 * oy) * w_in + 2 * ox + 1) * c,
                                           ((2 * oy + 1) * w_in + 2 * ox) * c, ((2 * oy + 1) * w_in + 2 * ox + 1) * c};
      const double* g = g_out + (oy * w_out + ox) * c;
      for (std::size_t q = 0; q < c; ++q) {
        if (is_max) {
          // First maximum in scan order receives the gradient.
          std::size_t best = 0;
          for (std::size_t t = 1; t < 4; ++t) {
            if (in[off[t] + q] > in[off[best] + q]) {
              best = t;
            }
          }
          g_in[off[best] + q] += g[q];
        } else {
          for (std::size_t t = 0; t < 4; ++t) {
            g_in[off[t] + q] += 0.25 * g[q];
          }
        }
      }
    }
  }
}

inline void softmax_inplace(std::span<double> v) {
  const double mx = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double& x : v) {
    x = std::exp(x - mx);
    s += x;
  }
  for (double& x : v) {
    x /= s;
  }
}

/// Runs layers [0, end) on @p x, leaving every layer input in ws.act.
inline void run_forward(const Model& model, std::span<const double> x, std::size_t end, Workspace& ws) {
  if (x.size() != model.input_size()) {
    throw InvalidArgument("forward: input has " + std::to_string(x.size()) + " values, model expects " +
                          shape_string(model.input_shape()));
  }
  const auto& layers = model.layers();
  ws.act.resize(layers.size() + 1);
  ws.act[0].assign(x.begin(), x.end());
  const bool linear = model.activation_mode() == ActivationMode::Linear;
  for (std::size_t i = 0; i < end; ++i) {
    const Layer& l = layers[i];
    const auto& in = ws.act[i];
    auto& out = ws.act[i + 1];
    out.resize(shape_size(l.out_shape));
    switch (l.kind) {
      case LayerKind::Dense: {
        const std::size_t n_in = l.weight.cols();
        for (std::size_t r = 0; r < l.weight.rows(); ++r) {
          const double* w = l.weight.data().data() + r * n_in;
          double s = l.bias[r];
          for (std::size_t j = 0; j < n_in; ++j) {
            s += w[j] * in[j];
          }
          out[r] = s;
        }
        break;
      }
      case LayerKind::ReLU:
        for (std::size_t j = 0; j < in.size(); ++j) {
          out[j] = (linear || in[j] > 0.0) ? in[j] : 0.0;
        }
        break;
      case LayerKind::Conv2D:
        conv_forward(l, model.packed_kernel(i), in.data(), out.data());
        break;
      case LayerKind::MaxPool2x2:
      case LayerKind::AvgPool2x2:
        pool_forward(l, in.data(), out.data());
        break;
      case LayerKind::Flatten:
        std::copy(in.begin(), in.end(), out.begin());
        break;
      case LayerKind::Softmax:
        std::copy(in.begin(), in.end(), out.begin());
        softmax_inplace(out);
        break;
    }
  }
}

/**
 * Back-propagates @p grad (w.r.t. the output of layer end-1) to the input.
 * When @p param_grad is non-null, parameter gradients are accumulated into it
 * using the flat layout of Model::parameters().  Result is left in ws.grad_a.
 */
inline void run_backward(const Model& model, std::size_t end, Workspace& ws, BackwardRule rule,
                         double* param_grad) {
  const auto& layers = model.layers();
  const bool linear = model.activation_mode() == ActivationMode::Linear;
  for (std::size_t i = end; i-- > 0;) {
    const Layer& l = layers[i];
    const auto& in = ws.act[i];
    auto& g_out = ws.grad_a;
    auto& g_in = ws.grad_b;
    g_in.resize(in.size());
    double* pg = param_grad == nullptr ? nullptr : param_grad + model.parameter_offset(i);
    switch (l.kind) {
      case LayerKind::Dense: {
        const std::size_t n_in = l.weight.cols();
        std::fill(g_in.begin(), g_in.end(), 0.0);
        for (std::size_t r = 0; r < l.weight.rows(); ++r) {
          const double g = g_out[r];
          if (g == 0.0) {
            continue;
          }
          const double* w = l.weight.data().data() + r * n_in;
          for (std::size_t j = 0; j < n_in; ++j) {
            g_in[j] += w[j] * g;
          }
          if (pg != nullptr) {
            double* gw = pg + r * n_in;
            for (std::size_t j = 0; j < n_in; ++j) {
              gw[j] += g * in[j];
            }
            pg[l.weight.data().size() + r] += g;
          }
        }
        break;
      }
      case LayerKind::ReLU:
        for (std::size_t j = 0; j < in.size(); ++j) {
          const double g = g_out[j];
          if (linear) {
            g_in[j] = g;
          } else if (rule == BackwardRule::Guided) {
            g_in[j] = (in[j] > 0.0 && g > 0.0) ? g : 0.0;
          } else {
            g_in[j] = in[j] > 0.0 ? g : 0.0;
          }
        }
        break;
      case LayerKind::Conv2D:
        conv_backward(l, model.packed_kernel(i), in.data(), g_out.data(), g_in.data(), pg);
        break;
      case LayerKind::MaxPool2x2:
      case LayerKind::AvgPool2x2:
        pool_backward(l, in.data(), g_out.data(), g_in.data());
        break;
      case LayerKind::Flatten:
        std::copy(g_out.begin(), g_out.end(), g_in.begin());
        break;
      case LayerKind::Softmax:
        throw std::logic_error("run_backward: Softmax is not differentiated directly");
    }
    std::swap(ws.grad_a, ws.grad_b);
  }
}

inline void check_target(const Model& model, std::size_t target) {
  const std::size_t n = shape_size(model.layers()[model.logit_end() - 1].out_shape);
  if (target >= n) {
    throw InvalidArgument("target output " + std::to_string(target) + " out of range [0, " + std::to_string(n) + ")");
  }
}

inline std::vector<double> gradient_of_output(const Model& model, std::span<const double> x, std::size_t target,
                                              BackwardRule rule) {
  check_target(model, target);
  auto& ws = thread_workspace();
  const std::size_t end = model.logit_end();
  run_forward(model, x, end, ws);
  ws.grad_a.assign(ws.act[end].size(), 0.0);
  ws.grad_a[target] = 1.0;
  run_backward(model, end, ws, rule, nullptr);
  return ws.grad_a;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Public operations
// ---------------------------------------------------------------------------

/// Model output: a scalar for regression, class probabilities for classification.
[[nodiscard]] inline Tensor forward(const Model& model, std::span<const double> x) {
  auto& ws = detail::thread_workspace();
  detail::run_forward(model, x, model.layers().size(), ws);
  return Tensor::vector(ws.act[model.layers().size()]);
}

/// Output before a trailing Softmax (identical to forward for regression).
[[nodiscard]] inline std::vector<double> logits(const Model& model, std::span<const double> x) {
  auto& ws = detail::thread_workspace();
  detail::run_forward(model, x, model.logit_end(), ws);
  return ws.act[model.logit_end()];
}

/// The scalar the explainers attribute: regression output or pre-softmax logit @p target.
[[nodiscard]] inline double selected_output(const Model& model, std::span<const double> x, std::size_t target) {
  detail::check_target(model, target);
  auto& ws = detail::thread_workspace();
  detail::run_forward(model, x, model.logit_end(), ws);
  return ws.act[model.logit_end()][target];
}

[[nodiscard]] inline std::size_t predicted_class(const Model& model, std::span<const double> x) {
  const auto z = logits(model, x);
  return static_cast<std::size_t>(std::distance(z.begin(), std::max_element(z.begin(), z.end())));
}

/// d selected_output / dx, shaped like the model input.
[[nodiscard]] inline Tensor input_gradient(const Model& model, std::span<const double> x, std::size_t target) {
  return Tensor(model.input_shape(), detail::gradient_of_output(model, x, target, BackwardRule::Plain));
}

/// Guided-backprop gradient: ReLU steps pass only positive signals through active units.
[[nodiscard]] inline Tensor guided_gradient(const Model& model, std::span<const double> x, std::size_t target) {
  return Tensor(model.input_shape(), detail::gradient_of_output(model, x, target, BackwardRule::Guided));
}

struct LossGradient {
  double loss = 0.0;
  std::vector<double> params;  // same layout as Model::parameters()
};

/**
 * Training loss and its parameter gradient for one example.  Classification
 * uses softmax cross-entropy against class @p label; regression uses
 * 0.5 * (y - label)^2.
 */
[[nodiscard]] inline LossGradient loss_gradient(const Model& model, std::span<const double> x, double label) {
  auto& ws = detail::thread_workspace();
  const std::size_t end = model.logit_end();
  detail::run_forward(model, x, end, ws);
  std::vector<double> z = ws.act[end];
  LossGradient out;
  out.params.assign(model.parameter_count(), 0.0);
  if (model.task() == Task::Classification) {
    const auto cls = static_cast<std::size_t>(label);
    detail::check_target(model, cls);
    detail::softmax_inplace(z);
    out.loss = -std::log(std::max(z[cls], 1e-300));
    z[cls] -= 1.0;
    ws.grad_a = z;
  } else {
    const double r = z[0] - label;
    out.loss = 0.5 * r * r;
    ws.grad_a = {r};
  }
  detail::run_backward(model, end, ws, BackwardRule::Plain, out.params.data());
  return out;
}

// ---------------------------------------------------------------------------
// Final Dense layer access
// ---------------------------------------------------------------------------

[[nodiscard]] inline Tensor get_final_dense_weights(const Model& model) {
  const auto& w = model.layers()[model.final_dense().layer_index].weight;
  return Tensor::vector({w.data().begin(), w.data().end()});
}

/// Copy of @p model with the final Dense weights (not bias) replaced by @p w.
[[nodiscard]] inline Model set_final_dense_weights(const Model& model, std::span<const double> w) {
  const auto sel = model.final_dense();
  if (w.size() != sel.weight_count) {
    throw InvalidArgument("set_final_dense_weights: expected " + std::to_string(sel.weight_count) +
                          " weights, got " + std::to_string(w.size()));
  }
  Model out = model;
  auto dst = out.final_dense_weight_mut().data();
  std::copy(w.begin(), w.end(), dst.begin());
  return out;
}

// ---------------------------------------------------------------------------
// Reference architectures
// ---------------------------------------------------------------------------

namespace detail {

/// Uniform(-limit, limit) fill from a seeded stream.
inline void fill_uniform(std::span<double> out, double limit, const RngStream& rng) {
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = limit * (2.0 * rng.uniform(i) - 1.0);
  }
}

inline void he_uniform_init(std::vector<Layer>& layers, std::uint64_t seed) {
  const RngStream base{seed, 0x494e4954ULL};
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto& l = layers[i];
    if (l.kind == LayerKind::Dense) {
      fill_uniform(l.weight.data(), std::sqrt(6.0 / static_cast<double>(l.weight.cols())), base.substream(i));
    } else if (l.kind == LayerKind::Conv2D) {
      const auto& s = l.kernel.shape();
      fill_uniform(l.kernel.data(), std::sqrt(6.0 / static_cast<double>(s[1] * s[2] * s[3])), base.substream(i));
    }
  }
}

}  // namespace detail

/// 9 -> Dense(64) -> ReLU -> Dense(64) -> ReLU -> Dense(1); He-uniform weights, zero biases.
[[nodiscard]] inline Model reference_mlp(std::uint64_t seed, ActivationMode mode = ActivationMode::ReLU) {
  std::vector<Layer> layers{Layer::dense(kAutoMpgFeatures, 64), Layer::relu(), Layer::dense(64, 64), Layer::relu(),
                            Layer::dense(64, 1)};
  detail::he_uniform_init(layers, seed);
  return Model(Task::Regression, {kAutoMpgFeatures}, std::move(layers), mode);
}

struct CnnOptions {
  LayerKind pooling = LayerKind::AvgPool2x2;
  bool conv_bias = false;
};

/**
 * 28x28x3 -> Conv(8, 3x3) -> ReLU -> Pool -> Conv(16, 3x3) -> ReLU -> Pool
 *         -> Flatten -> Dense(64) -> ReLU -> Dense(10) -> Softmax.
 */
[[nodiscard]] inline Model reference_cnn(std::uint64_t seed, ActivationMode mode = ActivationMode::ReLU,
                                         CnnOptions opt = {}) {
  auto pool = [&] { return opt.pooling == LayerKind::MaxPool2x2 ? Layer::max_pool() : Layer::avg_pool(); };
  std::vector<Layer> layers{Layer::conv2d(kMnistChannels, 8, 3, opt.conv_bias),
                            Layer::relu(),
                            pool(),
                            Layer::conv2d(8, 16, 3, opt.conv_bias),
                            Layer::relu(),
                            pool(),
                            Layer::flatten(),
                            Layer::dense(5 * 5 * 16, 64),
                            Layer::relu(),
                            Layer::dense(64, kMnistClasses),
                            Layer::softmax()};
  detail::he_uniform_init(layers, seed);
  return Model(Task::Classification, {kMnistSide, kMnistSide, kMnistChannels}, std::move(layers), mode);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainParams {
  double lr = 0.01;
  double momentum = 0.9;
  std::size_t epochs = 5;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

struct TrainReport {
  Model model;
  std::vector<double> epoch_loss;  // mean training loss per epoch
};

/// Regression targets are fitted in standardised units (dataset.normalization).
[[nodiscard]] inline double training_label(const Dataset& data, std::size_t i, Task task) {
  if (task == Task::Classification) {
    return data.targets[i];
  }
  return (data.targets[i] - data.normalization.target_mean) / data.normalization.target_std;
}

/// Mini-batch SGD with momentum; deterministic given params.seed.
[[nodiscard]] inline TrainReport train(Model model, const Dataset& data, const TrainParams& params) {
  if (data.size() == 0) {
    throw InvalidArgument("train: empty dataset");
  }
  if (data.feature_count() != model.input_size()) {
    throw InvalidArgument("train: dataset has " + std::to_string(data.feature_count()) +
                          " features, model expects " + std::to_string(model.input_size()));
  }
  if (params.batch_size == 0) {
    throw InvalidArgument("train: batch_size must be positive");
  }
  TrainReport report;
  std::vector<double> theta = model.parameters();
  std::vector<double> velocity(theta.size(), 0.0);
  std::vector<double> grad(theta.size());
  for (std::size_t epoch = 0; epoch < params.epochs; ++epoch) {
    const auto order = detail::seeded_permutation(data.size(), params.seed, 0x45504f4348000000ULL + epoch);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += params.batch_size) {
      const std::size_t stop = std::min(order.size(), start + params.batch_size);
      std::fill(grad.begin(), grad.end(), 0.0);
      for (std::size_t k = start; k < stop; ++k) {
        const std::size_t i = order[k];
        const auto lg = loss_gradient(model, data.sample(i), training_label(data, i, model.task()));
        epoch_loss += lg.loss;
        for (std::size_t p = 0; p < grad.size(); ++p) {
          grad[p] += lg.params[p];
        }
      }
      const double scale = 1.0 / static_cast<double>(stop - start);
      for (std::size_t p = 0; p < theta.size(); ++p) {
        velocity[p] = params.momentum * velocity[p] - params.lr * grad[p] * scale;
        theta[p] += velocity[p];
      }
      model = model.with_parameters(theta);
    }
    report.epoch_loss.push_back(epoch_loss / static_cast<double>(data.size()));
  }
  report.model = std::move(model);
  return report;
}

[[nodiscard]] inline double accuracy(const Model& model, const Dataset& data) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    correct += predicted_class(model, data.sample(i)) == static_cast<std::size_t>(data.targets[i]) ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

/// Mean absolute error in original target units.
[[nodiscard]] inline double mean_absolute_error(const Model& model, const Dataset& data) {
  double s = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double pred = forward(model, data.sample(i))[0] * data.normalization.target_std +
                        data.normalization.target_mean;
    s += std::abs(pred - data.targets[i]);
  }
  return s / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline constexpr const char* kModelMagic = "UXPROP-MODEL\n";
inline constexpr int kModelFormatVersion = 1;

namespace detail {

inline std::string layer_descriptor(const Layer& l) {
  switch (l.kind) {
    case LayerKind::Dense:
      return "dense " + std::to_string(l.weight.cols()) + " " + std::to_string(l.weight.rows());
    case LayerKind::Conv2D: {
      const auto& s = l.kernel.shape();
      return "conv2d " + std::to_string(s[1]) + " " + std::to_string(s[0]) + " " + std::to_string(s[2]) + " " +
             std::to_string(s[3]) + " " + (l.use_bias ? "1" : "0");
    }
    case LayerKind::ReLU:
      return "relu";
    case LayerKind::MaxPool2x2:
      return "maxpool2x2";
    case LayerKind::AvgPool2x2:
      return "avgpool2x2";
    case LayerKind::Flatten:
      return "flatten";
    case LayerKind::Softmax:
      return "softmax";
  }
  return "?";
}

inline void put_le64(std::ostream& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  std::array<char, 8> b{};
  for (std::size_t i = 0; i < 8; ++i) {
    b[i] = static_cast<char>((bits >> (8 * i)) & 0xffU);
  }
  out.write(b.data(), 8);
}

inline double get_le64(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < 8; ++i) {
    bits |= std::uint64_t{p[i]} << (8 * i);
  }
  return std::bit_cast<double>(bits);
}

}  // namespace detail

/**
 * Text header (magic, version, task, activation, input shape, one line per
 * layer) followed by the parameter payload as little-endian float64 in
 * Model::parameters() order.
 */
inline void save_model(const Model& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw IoError("cannot write '" + path + "'");
  }
  out << kModelMagic << "version " << kModelFormatVersion << "\n"
      << "task " << (model.task() == Task::Classification ? "classification" : "regression") << "\n"
      << "activation " << to_string(model.activation_mode()) << "\n"
      << "input";
  for (auto d : model.input_shape()) {
    out << " " << d;
  }
  out << "\nlayers " << model.layers().size() << "\n";
  for (const auto& l : model.layers()) {
    out << detail::layer_descriptor(l) << "\n";
  }
  const auto params = model.parameters();
  out << "params " << params.size() << "\n";
  for (double v : params) {
    detail::put_le64(out, v);
  }
  if (!out) {
    throw IoError("failed writing '" + path + "'");
  }
}

[[nodiscard]] inline Model load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("cannot open '" + path + "'");
  }
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t pos = 0;
  auto next_line = [&](const char* field) {
    const auto* begin = bytes.data() + pos;
    const auto* nl = std::find(begin, bytes.data() + bytes.size(), static_cast<unsigned char>('\n'));
    if (nl == bytes.data() + bytes.size()) {
      throw ParseError(path + ": truncated before field '" + field + "'");
    }
    std::string line(begin, nl);
    pos = static_cast<std::size_t>(nl - bytes.data()) + 1;
    return line;
  };
  auto expect_key = [&](const char* key) {
    std::istringstream ls(next_line(key));
    std::string k;
    ls >> k;
    if (k != key) {
      throw ParseError(path + ": expected field '" + key + "', found '" + k + "'");
    }
    std::string rest;
    std::getline(ls, rest);
    return std::istringstream(rest);
  };
  auto read_count = [&](std::istringstream& ls, const char* field) {
    long long v = -1;
    if (!(ls >> v) || v < 0) {
      throw ParseError(path + ": bad value for field '" + field + "'");
    }
    return static_cast<std::size_t>(v);
  };

  if (next_line("magic") + "\n" != kModelMagic) {
    throw ParseError(path + ": bad magic (not a UXPROP-MODEL file)");
  }
  {
    auto ls = expect_key("version");
    if (read_count(ls, "version") != kModelFormatVersion) {
      throw ParseError(path + ": unsupported field 'version'");
    }
  }
  Task task{};
  {
    auto ls = expect_key("task");
    std::string t;
    ls >> t;
    if (t == "classification") {
      task = Task::Classification;
    } else if (t == "regression") {
      task = Task::Regression;
    } else {
      throw ParseError(path + ": bad value for field 'task': '" + t + "'");
    }
  }
  ActivationMode mode{};
  {
    auto ls = expect_key("activation");
    std::string a;
    ls >> a;
    try {
      mode = parse_activation_mode(a);
    } catch (const InvalidArgument&) {
      throw ParseError(path + ": bad value for field 'activation': '" + a + "'");
    }
  }
  Shape input;
  {
    auto ls = expect_key("input");
    for (std::size_t d; ls >> d;) {
      input.push_back(d);
    }
    if (input.empty()) {
      throw ParseError(path + ": empty field 'input'");
    }
  }
  std::vector<Layer> layers;
  {
    auto ls = expect_key("layers");
    const std::size_t n = read_count(ls, "layers");
    for (std::size_t i = 0; i < n; ++i) {
      const std::string field = "layer " + std::to_string(i);
      std::istringstream ld(next_line(field.c_str()));
      std::string kind;
      ld >> kind;
      if (kind == "dense") {
        const std::size_t in_dim = read_count(ld, field.c_str());
        const std::size_t out_dim = read_count(ld, field.c_str());
        layers.push_back(Layer::dense(in_dim, out_dim));
      } else if (kind == "conv2d") {
        std::array<std::size_t, 5> v{};
        for (auto& x : v) {
          x = read_count(ld, field.c_str());
        }
        layers.push_back(Layer::conv2d(Tensor(Shape{v[1], v[0], v[2], v[3]}), std::vector<double>(v[1], 0.0),
                                       v[4] != 0));
      } else if (kind == "relu") {
        layers.push_back(Layer::relu());
      } else if (kind == "maxpool2x2") {
        layers.push_back(Layer::max_pool());
      } else if (kind == "avgpool2x2") {
        layers.push_back(Layer::avg_pool());
      } else if (kind == "flatten") {
        layers.push_back(Layer::flatten());
      } else if (kind == "softmax") {
        layers.push_back(Layer::softmax());
      } else {
        throw ParseError(path + ": unknown kind '" + kind + "' in field '" + field + "'");
      }
    }
  }
  Model skeleton;
  try {
    skeleton = Model(task, input, std::move(layers), mode);
  } catch (const InvalidArgument& e) {
    throw ParseError(path + ": inconsistent field 'layers': " + e.what());
  }
  auto ls = expect_key("params");
  const std::size_t declared = read_count(ls, "params");
  if (declared != skeleton.parameter_count()) {
    throw ParseError(path + ": field 'params' declares " + std::to_string(declared) + " values but the architecture has " +
                     std::to_string(skeleton.parameter_count()));
  }
  if (bytes.size() - pos != declared * 8) {
    throw ParseError(path + ": field 'params' payload has " + std::to_string(bytes.size() - pos) +
                     " bytes, expected " + std::to_string(declared * 8));
  }
  std::vector<double> params(declared);
  for (std::size_t i = 0; i < declared; ++i) {
    params[i] = detail::get_le64(bytes.data() + pos + 8 * i);
  }
  for (std::size_t i = 0; i < skeleton.layers().size(); ++i) {
    const auto& l = skeleton.layers()[i];
    if (l.kind == LayerKind::Conv2D && !l.use_bias) {
      const std::size_t off = skeleton.parameter_offset(i) + l.kernel.size();
      for (std::size_t q = 0; q < l.bias.size(); ++q) {
        if (params[off + q] != 0.0) {
          throw ParseError(path + ": field 'params' has a non-zero bias for bias-free layer " + std::to_string(i));
        }
      }
    }
  }
  return skeleton.with_parameters(params);
}

}  // namespace uxprop
