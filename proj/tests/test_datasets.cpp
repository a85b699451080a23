#include <gtest/gtest.h>
#include <zlib.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "uxprop/datasets.hpp"

using namespace uxprop;
namespace fs = std::filesystem;

namespace {

const std::string kData = UXPROP_DATA_DIR;

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("uxprop_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void put_be32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) {
    b.push_back(static_cast<unsigned char>(v >> s));
  }
}

std::vector<unsigned char> idx_images(std::uint32_t count, std::uint32_t side, std::uint32_t magic = 2051) {
  std::vector<unsigned char> b;
  put_be32(b, magic);
  put_be32(b, count);
  put_be32(b, side);
  put_be32(b, side);
  for (std::uint32_t i = 0; i < count * side * side; ++i) {
    b.push_back(static_cast<unsigned char>((i * 37 + 11) % 256));
  }
  return b;
}

std::vector<unsigned char> idx_labels(std::uint32_t count) {
  std::vector<unsigned char> b;
  put_be32(b, 2049);
  put_be32(b, count);
  for (std::uint32_t i = 0; i < count; ++i) {
    b.push_back(static_cast<unsigned char>(i % 10));
  }
  return b;
}

void write_raw(const fs::path& p, const std::vector<unsigned char>& b) {
  std::ofstream(p, std::ios::binary).write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

void write_gz(const fs::path& p, const std::vector<unsigned char>& b) {
  gzFile f = gzopen(p.string().c_str(), "wb");
  gzwrite(f, b.data(), static_cast<unsigned>(b.size()));
  gzclose(f);
}

/// Independent reader: byte at offset of a gzipped file.
std::vector<unsigned char> gunzip_all(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  std::vector<unsigned char> out;
  unsigned char buf[1 << 15];
  for (int n; (n = gzread(f, buf, sizeof buf)) > 0;) {
    out.insert(out.end(), buf, buf + n);
  }
  gzclose(f);
  return out;
}

}  // namespace

TEST(Mnist, SyntheticIdxRawAndGzipAgree) {
  const auto dir = temp_dir("idx");
  write_raw(dir / "img", idx_images(3, 28));
  write_raw(dir / "lbl", idx_labels(3));
  write_gz(dir / "img.gz", idx_images(3, 28));
  write_gz(dir / "lbl.gz", idx_labels(3));
  const Dataset raw = load_mnist((dir / "img").string(), (dir / "lbl").string(), Split::Test);
  const Dataset gz = load_mnist((dir / "img.gz").string(), (dir / "lbl.gz").string(), Split::Test);
  EXPECT_EQ(raw, gz);
  ASSERT_EQ(raw.size(), 3u);
  ASSERT_EQ(raw.feature_count(), 2352u);
  EXPECT_EQ(raw.targets, (std::vector<double>{0, 1, 2}));
  // Pixel p of image s holds byte ((s*784 + p)*37 + 11) % 256, replicated over 3 channels.
  for (std::size_t s : {0u, 2u}) {
    for (std::size_t p : {0u, 100u, 783u}) {
      const double expect = static_cast<double>(((s * 784 + p) * 37 + 11) % 256) / 255.0;
      for (std::size_t c = 0; c < 3; ++c) {
        EXPECT_DOUBLE_EQ(raw.sample(s)[p * 3 + c], expect);
      }
    }
  }
}

TEST(Mnist, MalformedFilesAreParseErrors) {
  const auto dir = temp_dir("idx_bad");
  write_raw(dir / "img_magic", idx_images(2, 28, 2050));
  write_raw(dir / "lbl", idx_labels(2));
  write_raw(dir / "lbl3", idx_labels(3));
  write_raw(dir / "img", idx_images(2, 28));
  auto trunc = idx_images(2, 28);
  trunc.resize(trunc.size() - 5);
  write_raw(dir / "img_trunc", trunc);
  write_raw(dir / "img_small", idx_images(2, 27));
  EXPECT_THROW((void)load_mnist((dir / "img_magic").string(), (dir / "lbl").string(), Split::Train), ParseError);
  EXPECT_THROW((void)load_mnist((dir / "img").string(), (dir / "lbl3").string(), Split::Train), ParseError);
  EXPECT_THROW((void)load_mnist((dir / "img_trunc").string(), (dir / "lbl").string(), Split::Train), ParseError);
  EXPECT_THROW((void)load_mnist((dir / "img_small").string(), (dir / "lbl").string(), Split::Train), ParseError);
  EXPECT_THROW((void)load_mnist((dir / "nope").string(), (dir / "lbl").string(), Split::Train), IoError);
}

TEST(Mnist, PackagedSplits) {
  const Dataset train = load_mnist_dir(kData + "/mnist", Split::Train);
  const Dataset test = load_mnist_dir(kData + "/mnist", Split::Test);
  EXPECT_EQ(train.size(), 8000u);
  EXPECT_EQ(test.size(), 2000u);
  EXPECT_EQ(test.feature_count(), kMnistFeatures);
  std::set<double> labels(test.targets.begin(), test.targets.end());
  EXPECT_EQ(labels.size(), 10u);
  for (double v : test.features.data()) {
    ASSERT_GE(v, 0.0);
    ASSERT_LE(v, 1.0);
  }
  // Cross-check one image against a direct byte read of the file.
  const auto bytes = gunzip_all(kData + "/mnist/t10k-images-idx3-ubyte.gz");
  const std::size_t s = 17;
  for (std::size_t p = 0; p < 784; ++p) {
    ASSERT_DOUBLE_EQ(test.sample(s)[p * 3 + 1], bytes[16 + s * 784 + p] / 255.0);
  }
}

TEST(AutoMpg, SplitSizesAndStandardisation) {
  const auto [train, test] = load_auto_mpg(kData + "/auto-mpg.data");
  EXPECT_EQ(train.size() + test.size(), 392u);  // 398 rows, 6 with unknown horsepower
  EXPECT_EQ(train.size(), 314u);
  EXPECT_EQ(train.feature_names, auto_mpg_feature_names());
  for (std::size_t j = 0; j < kAutoMpgNumericFeatures; ++j) {
    double mean = 0, sq = 0;
    for (std::size_t i = 0; i < train.size(); ++i) {
      mean += train.sample(i)[j];
      sq += train.sample(i)[j] * train.sample(i)[j];
    }
    mean /= static_cast<double>(train.size());
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(sq / static_cast<double>(train.size()), 1.0, 1e-12);
  }
  for (const auto* ds : {&train, &test}) {
    for (std::size_t i = 0; i < ds->size(); ++i) {
      const auto row = ds->sample(i);
      EXPECT_DOUBLE_EQ(row[6] + row[7] + row[8], 1.0);
      EXPECT_GT(ds->targets[i], 5.0);
      EXPECT_LT(ds->targets[i], 50.0);
    }
  }
}

TEST(AutoMpg, DeterministicPerSeed) {
  const auto a = load_auto_mpg(kData + "/auto-mpg.data", 3);
  const auto b = load_auto_mpg(kData + "/auto-mpg.data", 3);
  const auto c = load_auto_mpg(kData + "/auto-mpg.data", 4);
  EXPECT_EQ(a.second, b.second);
  EXPECT_NE(a.second.targets, c.second.targets);
}

TEST(AutoMpg, HandWrittenRowsAndErrors) {
  const auto dir = temp_dir("mpg");
  {
    std::ofstream f(dir / "ok.data");
    f << "18.0   8   307.0      130.0      3504.      12.0   70  1\t\"chevrolet chevelle malibu\"\n"
      << "25.0   4   98.00      ?          2046.      19.0   71  1\t\"ford pinto\"\n"
      << "24.0   4   113.0      95.00      2372.      15.0   70  3\t\"toyota corona mark ii\"\n"
      << "26.0   4   97.00      46.00      1835.      20.5   70  2\t\"volkswagen 1131 deluxe sedan\"\n"
      << "15.0   8   350.0      165.0      3693.      11.5   70  1\t\"buick skylark 320\"\n";
  }
  const auto [train, test] = load_auto_mpg((dir / "ok.data").string(), 0, 0.5);
  EXPECT_EQ(train.size() + test.size(), 4u);
  {
    std::ofstream f(dir / "bad.data");
    f << "18.0   8   307.0      130.0      3504.      12.0   70  1\t\"a\"\n"
      << "18.0   8   307.0      13x.0      3504.      12.0   70  1\t\"b\"\n";
  }
  try {
    (void)load_auto_mpg((dir / "bad.data").string());
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
  }
  EXPECT_THROW((void)load_auto_mpg((dir / "missing.data").string()), IoError);
}

TEST(Selection, DistinctDeterministicAndBounded) {
  const auto [train, test] = load_auto_mpg(kData + "/auto-mpg.data");
  const auto a = select_samples(test, 5, 10);
  const auto b = select_samples(test, 5, 10);
  EXPECT_EQ(a.indices, b.indices);
  EXPECT_EQ(std::set<std::size_t>(a.indices.begin(), a.indices.end()).size(), 10u);
  for (std::size_t i : a.indices) {
    EXPECT_LT(i, test.size());
  }
  EXPECT_NE(select_samples(test, 6, 10).indices, a.indices);
  EXPECT_THROW((void)select_samples(test, 0, test.size() + 1), InvalidArgument);
  EXPECT_EQ(parse_dataset_name("mnist"), DatasetName::MNIST);
  EXPECT_THROW((void)parse_dataset_name("cifar"), InvalidArgument);
}
