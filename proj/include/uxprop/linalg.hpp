/**
 * @file linalg.hpp
 * @brief Dense tensors and matrices, seeded Gaussian sampling, covariance and trace.
 *
 * Everything is 64-bit floating point and row-major.  Tensor and Matrix are
 * plain values; the free functions below never mutate their inputs.
 */
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "uxprop/errors.hpp"

namespace uxprop {

using Shape = std::vector<std::size_t>;

[[nodiscard]] inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

[[nodiscard]] inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != 0) {
      s += ",";
    }
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Multi-dimensional array of doubles; product(shape) == data.size().
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_size(shape_), 0.0) { check_shape(); }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (shape_size(shape_) != data_.size()) {
      throw InvalidArgument("Tensor: shape " + shape_string(shape_) + " does not match " +
                            std::to_string(data_.size()) + " values");
    }
  }

  /// 1-D tensor holding @p values.
  static Tensor vector(std::vector<double> values) {
    Shape shape{values.size()};
    return Tensor(std::move(shape), std::move(values));
  }

  [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
  [[nodiscard]] std::span<const double> data() const noexcept { return data_; }
  [[nodiscard]] std::span<double> data() noexcept { return data_; }
  [[nodiscard]] const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  void check_shape() const {
    for (std::size_t d : shape_) {
      if (d == 0) {
        throw InvalidArgument("Tensor: zero-sized dimension in shape " + shape_string(shape_));
      }
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

/// Row-major rows x cols matrix.
class Matrix {
 public:
  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (rows_ * cols_ != data_.size()) {
      throw InvalidArgument("Matrix: " + std::to_string(rows_) + "x" + std::to_string(cols_) +
                            " does not match " + std::to_string(data_.size()) + " values");
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      m(i, i) = 1.0;
    }
    return m;
  }

  [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
  [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
  [[nodiscard]] bool square() const noexcept { return rows_ == cols_; }
  [[nodiscard]] std::span<const double> data() const noexcept { return data_; }
  [[nodiscard]] std::span<double> data() noexcept { return data_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  [[nodiscard]] std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  [[nodiscard]] std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Random numbers
// ---------------------------------------------------------------------------

namespace detail {

[[nodiscard]] constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

/**
 * @brief Counter-based random stream identified by (seed, stream_id).
 *
 * The k-th 64-bit word is a pure function of (seed, stream_id, k), so a
 * stream can be consumed from any thread and substreams never overlap in
 * practice.  Parallel callers derive a substream per work item instead of
 * sharing one.
 */
struct RngStream {
  std::uint64_t seed = 0;
  std::uint64_t stream_id = 0;

  /// Child stream keyed by @p index; distinct indices give independent streams.
  [[nodiscard]] RngStream substream(std::uint64_t index) const noexcept {
    return {seed, detail::splitmix64(stream_id ^ detail::splitmix64(index + 0x632be59bd9b4e019ULL))};
  }

  [[nodiscard]] std::uint64_t word(std::uint64_t counter) const noexcept {
    const std::uint64_t key = detail::splitmix64(seed ^ detail::splitmix64(stream_id));
    return detail::splitmix64(key + detail::splitmix64(counter));
  }

  /// Uniform double in (0, 1], 53 bits.
  [[nodiscard]] double uniform(std::uint64_t counter) const noexcept {
    return (static_cast<double>(word(counter) >> 11) + 1.0) * 0x1.0p-53;
  }

  friend bool operator==(const RngStream&, const RngStream&) = default;
};

/// Standard normal draws via Box-Muller; z[i] depends only on (rng, i).
inline void fill_standard_normal(std::span<double> out, const RngStream& rng) {
  for (std::size_t i = 0; i < out.size(); i += 2) {
    const double u1 = rng.uniform(i);
    const double u2 = rng.uniform(i + 1);
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    out[i] = radius * std::cos(angle);
    if (i + 1 < out.size()) {
      out[i + 1] = radius * std::sin(angle);
    }
  }
}

/// @p dim independent N(0, sigma^2) draws, deterministic in @p rng.
[[nodiscard]] inline Tensor sample_gaussian(std::size_t dim, double sigma, const RngStream& rng) {
  if (dim == 0) {
    throw InvalidArgument("sample_gaussian: dim must be positive");
  }
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) {
    throw InvalidArgument("sample_gaussian: sigma must be finite and non-negative");
  }
  std::vector<double> z(dim);
  fill_standard_normal(z, rng);
  for (double& v : z) {
    v *= sigma;
  }
  return Tensor::vector(std::move(z));
}

// ---------------------------------------------------------------------------
// Matrix algebra
// ---------------------------------------------------------------------------

[[nodiscard]] inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw InvalidArgument("matmul: inner dimensions " + std::to_string(a.cols()) + " and " +
                          std::to_string(b.rows()) + " differ");
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out_row = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) {
        continue;
      }
      const auto b_row = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) {
        out_row[j] += aik * b_row[j];
      }
    }
  }
  return out;
}

/// A * A^T, computed from row dot products; the result is exactly symmetric.
[[nodiscard]] inline Matrix matmul_transposed(const Matrix& a) {
  Matrix out(a.rows(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto ri = a.row(i);
    for (std::size_t j = i; j < a.rows(); ++j) {
      const auto rj = a.row(j);
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) {
        s += ri[k] * rj[k];
      }
      out(i, j) = s;
      out(j, i) = s;
    }
  }
  return out;
}

/// A * B^T without materialising B^T.
[[nodiscard]] inline Matrix matmul_transposed(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw InvalidArgument("matmul_transposed: column counts " + std::to_string(a.cols()) + " and " +
                          std::to_string(b.cols()) + " differ");
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto ri = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const auto rj = b.row(j);
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) {
        s += ri[k] * rj[k];
      }
      out(i, j) = s;
    }
  }
  return out;
}

[[nodiscard]] inline double trace(const Matrix& m) {
  if (!m.square()) {
    throw InvalidArgument("trace: matrix is " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                          ", not square");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    s += m(i, i);
  }
  return s;
}

[[nodiscard]] inline double frobenius_norm_sq(const Matrix& m) {
  double s = 0.0;
  for (double v : m.data()) {
    s += v * v;
  }
  return s;
}

[[nodiscard]] inline double squared_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) {
    s += x * x;
  }
  return s;
}

[[nodiscard]] inline Matrix scaled(Matrix m, double factor) {
  for (double& v : m.data()) {
    v *= factor;
  }
  return m;
}

[[nodiscard]] inline bool all_finite(std::span<const double> values) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Sample statistics
// ---------------------------------------------------------------------------

namespace detail {

inline std::size_t check_samples(std::span<const std::vector<double>> samples, const char* who) {
  if (samples.size() < 2) {
    throw InvalidArgument(std::string(who) + ": need at least 2 samples, got " + std::to_string(samples.size()));
  }
  const std::size_t m = samples.front().size();
  for (std::size_t k = 0; k < samples.size(); ++k) {
    if (samples[k].size() != m) {
      throw InvalidArgument(std::string(who) + ": sample " + std::to_string(k) + " has length " +
                            std::to_string(samples[k].size()) + ", expected " + std::to_string(m));
    }
  }
  return m;
}

}  // namespace detail

/**
 * Unbiased (divisor N-1) covariance of N equally long samples.
 *
 * Deviations are taken from the first sample before the mean correction, so
 * N identical samples give an exactly zero matrix.  The result is exactly
 * symmetric.
 */
[[nodiscard]] inline Matrix empirical_covariance(std::span<const std::vector<double>> samples) {
  const std::size_t m = detail::check_samples(samples, "empirical_covariance");
  const std::size_t n = samples.size();
  const auto& pivot = samples.front();
  Matrix shifted(n, m);
  std::vector<double> shift_sum(m, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t i = 0; i < m; ++i) {
      shifted(k, i) = samples[k][i] - pivot[i];
      shift_sum[i] += shifted(k, i);
    }
  }
  Matrix cov(m, m);
  const double inv_n = 1.0 / static_cast<double>(n);
  const double denom = static_cast<double>(n - 1);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i; j < m; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        s += shifted(k, i) * shifted(k, j);
      }
      cov(i, j) = (s - shift_sum[i] * shift_sum[j] * inv_n) / denom;
      cov(j, i) = cov(i, j);
    }
  }
  return cov;
}

[[nodiscard]] inline Matrix empirical_covariance(std::span<const Tensor> samples) {
  std::vector<std::vector<double>> rows;
  rows.reserve(samples.size());
  for (const auto& t : samples) {
    rows.push_back(t.values());
  }
  return empirical_covariance(std::span<const std::vector<double>>(rows));
}

/// trace(empirical_covariance(samples)) without forming the m x m matrix.
[[nodiscard]] inline double empirical_covariance_trace(std::span<const std::vector<double>> samples) {
  const std::size_t m = detail::check_samples(samples, "empirical_covariance_trace");
  const std::size_t n = samples.size();
  const auto& pivot = samples.front();
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    double s2 = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const double d = samples[k][i] - pivot[i];
      s += d;
      s2 += d * d;
    }
    total += (s2 - s * s / static_cast<double>(n)) / static_cast<double>(n - 1);
  }
  return total;
}

}  // namespace uxprop
