/**
 * @file datasets.hpp
 * @brief MNIST (IDX) and Auto MPG loaders plus seeded evaluation-sample selection.
 */
#pragma once

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "uxprop/errors.hpp"
#include "uxprop/linalg.hpp"

namespace uxprop {

enum class DatasetName { MNIST, AutoMPG };
enum class Split { Train, Test };

[[nodiscard]] inline std::string to_string(DatasetName name) {
  return name == DatasetName::MNIST ? "mnist" : "autompg";
}

[[nodiscard]] inline DatasetName parse_dataset_name(const std::string& s) {
  if (s == "mnist" || s == "MNIST") {
    return DatasetName::MNIST;
  }
  if (s == "autompg" || s == "AutoMPG" || s == "auto_mpg") {
    return DatasetName::AutoMPG;
  }
  throw InvalidArgument("unknown dataset '" + s + "' (expected mnist or autompg)");
}

inline constexpr std::size_t kMnistSide = 28;
inline constexpr std::size_t kMnistChannels = 3;
inline constexpr std::size_t kMnistFeatures = kMnistSide * kMnistSide * kMnistChannels;  // 2352
inline constexpr std::size_t kMnistPixels = kMnistSide * kMnistSide;                      // 784
inline constexpr std::size_t kMnistClasses = 10;
inline constexpr std::size_t kAutoMpgFeatures = 9;
inline constexpr std::size_t kAutoMpgNumericFeatures = 6;

/// Per-feature standardisation (AutoMPG) or pixel scale (MNIST), kept for de-standardisation.
struct Normalization {
  std::vector<double> feature_mean;
  std::vector<double> feature_std;
  double pixel_scale = 1.0;
  double target_mean = 0.0;
  double target_std = 1.0;

  friend bool operator==(const Normalization&, const Normalization&) = default;
};

/// Rows are samples; MNIST rows are HWC-ordered 28x28x3 images.
struct Dataset {
  DatasetName name = DatasetName::MNIST;
  Split split = Split::Train;
  Matrix features;
  std::vector<double> targets;
  std::vector<std::string> feature_names;
  Normalization normalization;

  [[nodiscard]] std::size_t size() const noexcept { return features.rows(); }
  [[nodiscard]] std::size_t feature_count() const noexcept { return features.cols(); }
  [[nodiscard]] std::span<const double> sample(std::size_t i) const { return features.row(i); }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct SampleSelection {
  DatasetName dataset = DatasetName::MNIST;
  std::uint64_t seed = 0;
  std::size_t count = 0;
  std::vector<std::size_t> indices;
};

namespace detail {

/// Whole file, transparently gunzipped when it carries a gzip header.
inline std::vector<unsigned char> read_maybe_gzipped(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (f == nullptr) {
    throw IoError("cannot open '" + path + "'");
  }
  std::vector<unsigned char> bytes;
  std::array<unsigned char, 1 << 16> chunk{};
  while (true) {
    const int n = gzread(f, chunk.data(), static_cast<unsigned>(chunk.size()));
    if (n < 0) {
      gzclose(f);
      throw ParseError("'" + path + "': corrupt compressed stream");
    }
    if (n == 0) {
      break;
    }
    bytes.insert(bytes.end(), chunk.begin(), chunk.begin() + n);
  }
  gzclose(f);
  return bytes;
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t offset, const std::string& what) {
  if (offset + 4 > b.size()) {
    throw ParseError(what + ": truncated header");
  }
  return (std::uint32_t{b[offset]} << 24) | (std::uint32_t{b[offset + 1]} << 16) |
         (std::uint32_t{b[offset + 2]} << 8) | std::uint32_t{b[offset + 3]};
}

struct IdxImages {
  std::size_t count = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<unsigned char> pixels;
};

inline IdxImages parse_idx_images(const std::vector<unsigned char>& b, const std::string& what) {
  const std::uint32_t magic = read_be32(b, 0, what);
  if (magic != 2051) {
    throw ParseError(what + ": bad magic number " + std::to_string(magic) + " (expected 2051)");
  }
  IdxImages img;
  img.count = read_be32(b, 4, what);
  img.rows = read_be32(b, 8, what);
  img.cols = read_be32(b, 12, what);
  const std::size_t payload = img.count * img.rows * img.cols;
  if (b.size() != 16 + payload) {
    throw ParseError(what + ": expected " + std::to_string(payload) + " pixel bytes, found " +
                     std::to_string(b.size() - 16));
  }
  img.pixels.assign(b.begin() + 16, b.end());
  return img;
}

inline std::vector<unsigned char> parse_idx_labels(const std::vector<unsigned char>& b, const std::string& what) {
  const std::uint32_t magic = read_be32(b, 0, what);
  if (magic != 2049) {
    throw ParseError(what + ": bad magic number " + std::to_string(magic) + " (expected 2049)");
  }
  const std::size_t count = read_be32(b, 4, what);
  if (b.size() != 8 + count) {
    throw ParseError(what + ": expected " + std::to_string(count) + " labels, found " + std::to_string(b.size() - 8));
  }
  return {b.begin() + 8, b.end()};
}

/// Seeded Fisher-Yates permutation of [0, n).
inline std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed, std::uint64_t salt) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const RngStream rng{seed, salt};
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.word(i) % i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

}  // namespace detail

/// Parses an IDX image/label pair, scales pixels by 1/255 and replicates gray to RGB.
[[nodiscard]] inline Dataset load_mnist(const std::string& images_path, const std::string& labels_path,
                                        Split split) {
  const auto images = detail::parse_idx_images(detail::read_maybe_gzipped(images_path), images_path);
  const auto labels = detail::parse_idx_labels(detail::read_maybe_gzipped(labels_path), labels_path);
  if (images.count != labels.size()) {
    throw ParseError("MNIST: " + std::to_string(images.count) + " images but " + std::to_string(labels.size()) +
                     " labels");
  }
  if (images.rows != kMnistSide || images.cols != kMnistSide) {
    throw ParseError("MNIST: images are " + std::to_string(images.rows) + "x" + std::to_string(images.cols) +
                     ", expected 28x28");
  }
  Dataset ds;
  ds.name = DatasetName::MNIST;
  ds.split = split;
  ds.normalization.pixel_scale = 1.0 / 255.0;
  ds.features = Matrix(images.count, kMnistFeatures);
  ds.targets.resize(images.count);
  for (std::size_t s = 0; s < images.count; ++s) {
    auto row = ds.features.row(s);
    for (std::size_t p = 0; p < kMnistPixels; ++p) {
      const double v = images.pixels[s * kMnistPixels + p] / 255.0;
      for (std::size_t c = 0; c < kMnistChannels; ++c) {
        row[p * kMnistChannels + c] = v;
      }
    }
    if (labels[s] >= kMnistClasses) {
      throw ParseError("MNIST: label " + std::to_string(labels[s]) + " at index " + std::to_string(s) +
                       " out of range");
    }
    ds.targets[s] = labels[s];
  }
  ds.feature_names.reserve(kMnistFeatures);
  static constexpr std::array<const char*, 3> kChannel{"r", "g", "b"};
  for (std::size_t p = 0; p < kMnistPixels; ++p) {
    for (std::size_t c = 0; c < kMnistChannels; ++c) {
      ds.feature_names.push_back("px_" + std::to_string(p / kMnistSide) + "_" + std::to_string(p % kMnistSide) +
                                 "_" + kChannel[c]);
    }
  }
  return ds;
}

/// Loads `<dir>/{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]`.
[[nodiscard]] inline Dataset load_mnist_dir(const std::string& dir, Split split) {
  const std::string prefix = dir + "/" + (split == Split::Train ? "train" : "t10k");
  auto pick = [](const std::string& base) {
    std::ifstream gz(base + ".gz");
    return gz.good() ? base + ".gz" : base;
  };
  return load_mnist(pick(prefix + "-images-idx3-ubyte"), pick(prefix + "-labels-idx1-ubyte"), split);
}

inline const std::vector<std::string>& auto_mpg_feature_names() {
  static const std::vector<std::string> names{"cylinders",    "displacement", "horsepower",
                                              "weight",       "acceleration", "model_year",
                                              "origin_USA",   "origin_Europe", "origin_Japan"};
  return names;
}

/**
 * @brief Loads the raw Auto MPG table and returns standardised (train, test) splits.
 *
 * Accepts the UCI whitespace layout (car name quoted at the end) or a comma
 * separated variant.  Rows with a missing horsepower ('?') are dropped; any
 * other unparseable row is an error naming its line.  The six numeric
 * columns are z-scored with train-split statistics; origin is one-hot.
 */
[[nodiscard]] inline std::pair<Dataset, Dataset> load_auto_mpg(const std::string& path, std::uint64_t seed = 0,
                                                               double train_fraction = 0.8) {
  std::ifstream in(path);
  if (!in) {
    throw IoError("cannot open '" + path + "'");
  }
  std::vector<std::array<double, kAutoMpgFeatures>> rows;
  std::vector<double> mpg;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto q = line.find('"'); q != std::string::npos) {
      line.erase(q);
    }
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream fields(line);
    std::vector<std::string> tok;
    for (std::string t; fields >> t && tok.size() < 8;) {
      tok.push_back(t);
    }
    if (tok.empty()) {
      continue;
    }
    if (tok.size() < 8) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": expected 8 numeric fields, found " +
                       std::to_string(tok.size()));
    }
    if (tok[3] == "?") {
      continue;
    }
    std::array<double, 8> v{};
    for (std::size_t k = 0; k < 8; ++k) {
      try {
        std::size_t used = 0;
        v[k] = std::stod(tok[k], &used);
        if (used != tok[k].size() || !std::isfinite(v[k])) {
          throw std::invalid_argument(tok[k]);
        }
      } catch (const std::exception&) {
        throw ParseError(path + ":" + std::to_string(line_no) + ": cannot parse field " + std::to_string(k + 1) +
                         " ('" + tok[k] + "')");
      }
    }
    const int origin = static_cast<int>(v[7]);
    if (origin < 1 || origin > 3 || v[7] != origin) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": origin must be 1, 2 or 3");
    }
    std::array<double, kAutoMpgFeatures> feat{v[1], v[2], v[3], v[4], v[5], v[6], 0.0, 0.0, 0.0};
    feat[kAutoMpgNumericFeatures + static_cast<std::size_t>(origin - 1)] = 1.0;
    rows.push_back(feat);
    mpg.push_back(v[0]);
  }
  if (rows.size() < 2) {
    throw ParseError(path + ": fewer than two usable rows");
  }

  const auto perm = detail::seeded_permutation(rows.size(), seed, 0x4155544f4d5047ULL);
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(rows.size())));
  if (n_train == 0 || n_train >= rows.size()) {
    throw InvalidArgument("load_auto_mpg: train fraction leaves an empty split");
  }

  Normalization norm;
  norm.feature_mean.assign(kAutoMpgFeatures, 0.0);
  norm.feature_std.assign(kAutoMpgFeatures, 1.0);
  for (std::size_t j = 0; j < kAutoMpgNumericFeatures; ++j) {
    double mean = 0.0;
    for (std::size_t k = 0; k < n_train; ++k) {
      mean += rows[perm[k]][j];
    }
    mean /= static_cast<double>(n_train);
    double var = 0.0;
    for (std::size_t k = 0; k < n_train; ++k) {
      const double d = rows[perm[k]][j] - mean;
      var += d * d;
    }
    norm.feature_mean[j] = mean;
    norm.feature_std[j] = std::sqrt(var / static_cast<double>(n_train));
  }
  double t_mean = 0.0;
  for (std::size_t k = 0; k < n_train; ++k) {
    t_mean += mpg[perm[k]];
  }
  t_mean /= static_cast<double>(n_train);
  double t_var = 0.0;
  for (std::size_t k = 0; k < n_train; ++k) {
    t_var += (mpg[perm[k]] - t_mean) * (mpg[perm[k]] - t_mean);
  }
  norm.target_mean = t_mean;
  norm.target_std = std::sqrt(t_var / static_cast<double>(n_train));

  auto make = [&](Split split, std::size_t begin, std::size_t end) {
    Dataset ds;
    ds.name = DatasetName::AutoMPG;
    ds.split = split;
    ds.feature_names = auto_mpg_feature_names();
    ds.normalization = norm;
    ds.features = Matrix(end - begin, kAutoMpgFeatures);
    for (std::size_t k = begin; k < end; ++k) {
      auto row = ds.features.row(k - begin);
      const auto& raw = rows[perm[k]];
      for (std::size_t j = 0; j < kAutoMpgFeatures; ++j) {
        row[j] = (raw[j] - norm.feature_mean[j]) / norm.feature_std[j];
      }
      ds.targets.push_back(mpg[perm[k]]);
    }
    if (ds.feature_count() != kAutoMpgFeatures) {
      throw std::logic_error("load_auto_mpg: feature count is not 9");
    }
    return ds;
  };
  return {make(Split::Train, 0, n_train), make(Split::Test, n_train, rows.size())};
}

/// @p count distinct row indices drawn deterministically from (dataset, seed).
[[nodiscard]] inline SampleSelection select_samples(const Dataset& dataset, std::uint64_t seed, std::size_t count) {
  if (count > dataset.size()) {
    throw InvalidArgument("select_samples: count " + std::to_string(count) + " exceeds dataset size " +
                          std::to_string(dataset.size()));
  }
  SampleSelection sel{dataset.name, seed, count, {}};
  const std::size_t n = dataset.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const RngStream rng{seed, 0x53454c4543540000ULL + static_cast<std::uint64_t>(dataset.name)};
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.word(i) % (n - i));
    std::swap(idx[i], idx[j]);
  }
  sel.indices.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(count));
  return sel;
}

}  // namespace uxprop
