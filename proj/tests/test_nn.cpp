#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "uxprop/nn.hpp"

using namespace uxprop;
namespace fs = std::filesystem;

namespace {

/// Small CNN with every layer kind: 6x6x2 -> conv(3,3x3) -> relu -> maxpool -> flatten -> dense(4) -> softmax.
Model small_cnn(std::uint64_t seed, bool bias = true, ActivationMode mode = ActivationMode::ReLU) {
  std::vector<Layer> layers{Layer::conv2d(2, 3, 3, bias), Layer::relu(),  Layer::max_pool(),
                            Layer::flatten(),             Layer::dense(12, 4), Layer::softmax()};
  Model m(Task::Classification, {6, 6, 2}, std::move(layers), mode);
  auto p = oracle::random_vector(m.parameter_count(), static_cast<unsigned>(seed));
  if (!bias) {
    // conv bias entries sit right after the 54 kernel weights and must stay zero
    std::fill(p.begin() + 54, p.begin() + 57, 0.0);
  }
  return m.with_parameters(p);
}

Model small_mlp(std::uint64_t seed, ActivationMode mode = ActivationMode::ReLU) {
  std::vector<Layer> layers{Layer::dense(5, 7), Layer::relu(), Layer::dense(7, 1)};
  Model m(Task::Regression, {5}, std::move(layers), mode);
  return m.with_parameters(oracle::random_vector(m.parameter_count(), static_cast<unsigned>(seed)));
}

/// Direct valid cross-correlation of an HWC image with an [O, C, K, K] kernel.
std::vector<double> conv_oracle(const std::vector<double>& in, std::size_t h, std::size_t w, std::size_t c,
                                const Tensor& k, const std::vector<double>& b) {
  const std::size_t o = k.shape()[0], ks = k.shape()[2], oh = h - ks + 1, ow = w - ks + 1;
  std::vector<double> out(oh * ow * o);
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      for (std::size_t f = 0; f < o; ++f) {
        double s = b[f];
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t i = 0; i < ks; ++i) {
            for (std::size_t j = 0; j < ks; ++j) {
              s += k[((f * c + ch) * ks + i) * ks + j] * in[((y + i) * w + (x + j)) * c + ch];
            }
          }
        }
        out[(y * ow + x) * o + f] = s;
      }
    }
  }
  return out;
}

}  // namespace

TEST(Model, DenseForwardHandExample) {
  std::vector<Layer> layers{Layer::dense(Matrix(2, 2, {1, -1, 2, 0.5}), {0.5, -3}), Layer::relu(),
                            Layer::dense(Matrix(1, 2, {2, 3}), {1})};
  const Model m(Task::Regression, {2}, std::move(layers));
  // h = relu([1-2+0.5, 2+1-3]) = [0, 0] -> y = 1;  x = (3, 1): h = relu([2.5, 3.5]) -> y = 16.5
  EXPECT_DOUBLE_EQ(forward(m, std::vector<double>{1, 2})[0], 1.0);
  EXPECT_DOUBLE_EQ(forward(m, std::vector<double>{3, 1})[0], 16.5);
  EXPECT_DOUBLE_EQ(forward(m.with_activation_mode(ActivationMode::Linear), std::vector<double>{1, 2})[0],
                   1.0 + 2 * -0.5 + 3 * 0.0);
}

TEST(Model, ConvMatchesDirectOracle) {
  Tensor k({3, 2, 3, 3}, oracle::random_vector(54, 4));
  const std::vector<double> b{0.1, -0.2, 0.3};
  std::vector<Layer> layers{Layer::conv2d(k, b), Layer::flatten(), Layer::dense(48, 1)};
  Matrix w(1, 48);
  w(0, 7) = 1.0;
  layers[2] = Layer::dense(w, {0.0});
  const Model m(Task::Regression, {6, 6, 2}, std::move(layers));
  const auto x = oracle::random_vector(72, 5);
  const auto ref = conv_oracle(x, 6, 6, 2, k, b);
  EXPECT_NEAR(forward(m, x)[0], ref[7], 1e-14);
  for (std::size_t probe : {0u, 13u, 47u}) {
    Matrix wp(1, 48);
    wp(0, probe) = 1.0;
    std::vector<Layer> l2{Layer::conv2d(k, b), Layer::flatten(), Layer::dense(wp, {0.0})};
    const Model mp(Task::Regression, {6, 6, 2}, std::move(l2));
    EXPECT_NEAR(forward(mp, x)[0], ref[probe], 1e-14);
  }
}

TEST(Model, ShapeValidation) {
  EXPECT_THROW(Model(Task::Regression, {3}, {Layer::dense(4, 1)}), InvalidArgument);
  EXPECT_THROW(Model(Task::Classification, {3}, {Layer::dense(3, 2)}), InvalidArgument);
  EXPECT_THROW(Model(Task::Regression, {3}, {Layer::dense(3, 2)}), InvalidArgument);
  EXPECT_THROW(Model(Task::Regression, {3}, {}), InvalidArgument);
}

TEST(Gradients, InputGradientMatchesCentralDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Model cnn = small_cnn(seed);
    const auto x = oracle::random_vector(72, static_cast<unsigned>(100 + seed), 0.0, 1.0);
    for (std::size_t t = 0; t < 4; ++t) {
      const auto g = input_gradient(cnn, x, t);
      const auto fd = oracle::central_gradient(
          [&](const std::vector<double>& v) { return selected_output(cnn, v, t); }, x, 1e-6);
      EXPECT_LT(oracle::rel_l2_error(g.values(), fd), 1e-6) << "seed " << seed << " target " << t;
    }
    const Model mlp = small_mlp(seed);
    const auto xm = oracle::random_vector(5, static_cast<unsigned>(200 + seed));
    const auto fd = oracle::central_gradient(
        [&](const std::vector<double>& v) { return forward(mlp, v)[0]; }, xm, 1e-6);
    EXPECT_LT(oracle::rel_l2_error(input_gradient(mlp, xm, 0).values(), fd), 1e-6);
  }
}

TEST(Gradients, ParameterGradientMatchesCentralDifferences) {
  for (bool bias : {true, false}) {
    const Model cnn = small_cnn(7, bias);
    const auto x = oracle::random_vector(72, 8, 0.0, 1.0);
    const auto lg = loss_gradient(cnn, x, 2.0);
    const auto p = cnn.parameters();
    auto fd = oracle::central_gradient(
        [&](const std::vector<double>& q) { return loss_gradient(cnn.with_parameters(q), x, 2.0).loss; }, p, 1e-6);
    if (!bias) {
      std::fill(fd.begin() + 54, fd.begin() + 57, 0.0);
    }
    EXPECT_LT(oracle::rel_l2_error(lg.params, fd), 1e-6);
  }
  const Model mlp = small_mlp(3);
  const auto x = oracle::random_vector(5, 9);
  const auto fd = oracle::central_gradient(
      [&](const std::vector<double>& q) { return loss_gradient(mlp.with_parameters(q), x, 0.7).loss; },
      mlp.parameters(), 1e-6);
  EXPECT_LT(oracle::rel_l2_error(loss_gradient(mlp, x, 0.7).params, fd), 1e-6);
}

TEST(Gradients, GuidedRuleHandExample) {
  // y = 1*relu(x0 - x1) - 1*relu(x0 + x1): at x = (2, 1) both units active.
  std::vector<Layer> layers{Layer::dense(Matrix(2, 2, {1, -1, 1, 1}), {0, 0}), Layer::relu(),
                            Layer::dense(Matrix(1, 2, {1, -1}), {0})};
  const Model m(Task::Regression, {2}, std::move(layers));
  const std::vector<double> x{2, 1};
  EXPECT_EQ(input_gradient(m, x, 0).values(), (std::vector<double>{0, -2}));
  // Guided: the negative signal into unit 2 is zeroed, leaving unit 1's (1, -1).
  EXPECT_EQ(guided_gradient(m, x, 0).values(), (std::vector<double>{1, -1}));
}

TEST(Gradients, MaxPoolRoutesToFirstMaximum) {
  std::vector<Layer> layers{Layer::max_pool(), Layer::flatten(), Layer::dense(Matrix(1, 1, {1}), {0})};
  const Model m(Task::Regression, {2, 2, 1}, std::move(layers));
  EXPECT_EQ(input_gradient(m, std::vector<double>{0.5, 0.9, 0.9, 0.1}, 0).values(),
            (std::vector<double>{0, 1, 0, 0}));
}

TEST(Gradients, LinearModeGradientIsConstant) {
  const Model ref = reference_cnn(0, ActivationMode::Linear);
  const auto r1 = input_gradient(ref, oracle::random_vector(2352, 3, 0, 1), 4);
  const auto r2 = input_gradient(ref, oracle::random_vector(2352, 4, 0, 1), 4);
  EXPECT_LT(oracle::rel_l2_error(r1.values(), r2.values()), 1e-12);
}

TEST(Model, ReferenceArchitectures) {
  const Model mlp = reference_mlp(0);
  EXPECT_EQ(mlp.input_size(), 9u);
  EXPECT_EQ(mlp.final_dense().weight_count, 64u);
  const Model cnn = reference_cnn(0);
  EXPECT_EQ(cnn.input_size(), 2352u);
  EXPECT_EQ(cnn.final_dense().weight_count, 640u);
  EXPECT_EQ(cnn.output_size(), 10u);
  EXPECT_EQ(reference_cnn(0), reference_cnn(0));
  EXPECT_NE(reference_cnn(0).parameters(), reference_cnn(1).parameters());
  double sum = 0.0;
  const Tensor probs = forward(cnn, std::vector<double>(2352, 0.5));
  for (double p : probs.values()) {
    sum += p;
  }
  EXPECT_NEAR(sum, 1.0, 1e-12);
}

TEST(Model, FinalDenseWeightsRoundTrip) {
  const Model mlp = reference_mlp(2);
  auto w = get_final_dense_weights(mlp).values();
  ASSERT_EQ(w.size(), 64u);
  w[5] += 1.0;
  const Model changed = set_final_dense_weights(mlp, w);
  EXPECT_EQ(get_final_dense_weights(changed).values(), w);
  EXPECT_THROW((void)set_final_dense_weights(mlp, std::vector<double>(63)), InvalidArgument);
}

TEST(Training, FitsLinearRegressionTarget) {
  Dataset ds;
  ds.name = DatasetName::AutoMPG;
  ds.features = Matrix(200, 9);
  for (std::size_t i = 0; i < 200; ++i) {
    const auto x = oracle::random_vector(9, static_cast<unsigned>(i));
    std::copy(x.begin(), x.end(), ds.features.row(i).begin());
    ds.targets.push_back(2.0 * x[0] - x[3] + 0.5);
  }
  TrainParams p;
  p.lr = 0.01;
  p.epochs = 60;
  const auto rep = train(reference_mlp(0), ds, p);
  EXPECT_LT(rep.epoch_loss.back(), 0.1 * rep.epoch_loss.front());
  EXPECT_LT(mean_absolute_error(rep.model, ds), 0.2);
  EXPECT_EQ(train(reference_mlp(0), ds, p).model, rep.model);
}

TEST(Serialization, RoundTripAndErrors) {
  const auto dir = fs::temp_directory_path() / "uxprop_test_model";
  fs::create_directories(dir);
  for (const Model& m : {reference_cnn(3), reference_mlp(4, ActivationMode::Linear)}) {
    const auto path = (dir / "m.bin").string();
    save_model(m, path);
    EXPECT_EQ(load_model(path), m);
  }
  const auto good = (dir / "m.bin").string();
  std::ifstream in(good, std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto write = [&](const std::string& name, const std::string& content) {
    std::ofstream(dir / name, std::ios::binary) << content;
    return (dir / name).string();
  };
  EXPECT_THROW((void)load_model(write("trunc.bin", bytes.substr(0, bytes.size() - 3))), ParseError);
  EXPECT_THROW((void)load_model(write("magic.bin", "NOT-A-MODEL\n" + bytes.substr(13))), ParseError);
  std::string wrong = bytes;
  const auto at = wrong.find("params ");
  wrong.replace(at, wrong.find('\n', at) - at, "params 5");
  try {
    (void)load_model(write("count.bin", wrong));
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("params"), std::string::npos) << e.what();
  }
  EXPECT_THROW((void)load_model((dir / "absent.bin").string()), IoError);
}
