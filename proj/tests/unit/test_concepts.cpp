#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include <Eigen/Dense>

#include "cilmp/concepts.hpp"
#include "cilmp/errors.hpp"
#include "cilmp/ops.hpp"
#include "cilmp/parameters.hpp"
#include "cilmp/rng.hpp"
#include "test_util.hpp"

using namespace cilmp;

namespace {

Tensor random_tensor(Rng& rng, const Shape& shape, double stddev = 1.0) {
  return Tensor::from(shape, rng.normal_vector(shape_numel(shape), stddev));
}

Tensor prototypes(std::uint64_t seed, std::size_t c, std::size_t d) {
  Rng rng(seed);
  return ops::normalize_rows(random_tensor(rng, {c, d}));
}

ConceptBank make_bank(std::uint64_t seed, double drift = 0.5, double noise = 0.1, std::size_t c = 6,
                      std::size_t l = 8, std::size_t d = 24) {
  BankSpec spec;
  spec.seed = seed;
  spec.num_classes = c;
  spec.seq_len = l;
  spec.width = d;
  spec.layer_drift = drift;
  spec.noise_std = noise;
  return generate_bank(spec, prototypes(seed + 1000, c, d));
}

using Mat = Eigen::MatrixXd;

Mat to_eigen(const Tensor& t) {
  Mat m(t.rows(), t.cols());
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m(r, c) = t.at(r, c);
  return m;
}

// Kernel route: HSIC on centred Gram matrices, independent of the feature-space formula.
double cka_gram(const Tensor& x, const Tensor& y) {
  const Mat X = to_eigen(x), Y = to_eigen(y);
  const auto n = X.rows();
  const Mat H = Mat::Identity(n, n) - Mat::Constant(n, n, 1.0 / static_cast<double>(n));
  const Mat K = H * (X * X.transpose()) * H;
  const Mat L = H * (Y * Y.transpose()) * H;
  return (K.cwiseProduct(L)).sum() / std::sqrt((K.cwiseProduct(K)).sum() * (L.cwiseProduct(L)).sum());
}

}  // namespace

TEST(GenerateBank, SameSeedBitIdentical) {
  EXPECT_EQ(make_bank(3).checksum(), make_bank(3).checksum());
  EXPECT_NE(make_bank(3).checksum(), make_bank(4).checksum());
}

TEST(GenerateBank, ZeroDriftZeroNoiseRepeatsLayers) {
  const ConceptBank b = make_bank(5, 0.0, 0.0);
  for (std::size_t c = 0; c < b.num_classes; ++c) {
    const Tensor seq = b.class_sequence(c);
    for (std::size_t l = 1; l < b.seq_len; ++l)
      for (std::size_t k = 0; k < b.width; ++k) EXPECT_EQ(seq.at(l, k), seq.at(0, k));
  }
}

TEST(GenerateBank, RowsUnitNormAndDistinctAcrossLayers) {
  const ConceptBank b = make_bank(6);
  for (std::size_t c = 0; c < b.num_classes; ++c) {
    const Tensor seq = b.class_sequence(c);
    for (std::size_t l = 0; l < b.seq_len; ++l) {
      double s = 0.0;
      for (std::size_t k = 0; k < b.width; ++k) s += seq.at(l, k) * seq.at(l, k);
      EXPECT_NEAR(s, 1.0, 1e-12);
      for (std::size_t m = 0; m < l; ++m) {
        bool same = true;
        for (std::size_t k = 0; k < b.width; ++k) same = same && seq.at(l, k) == seq.at(m, k);
        EXPECT_FALSE(same) << "class " << c << " layers " << m << "," << l;
      }
    }
  }
}

TEST(GenerateBank, NearerPrototypesGiveNearerRepresentations) {
  // Two prototypes nearly equal, a third orthogonal.
  const std::size_t d = 16;
  std::vector<double> p(3 * d, 0.0);
  p[0] = 1.0;
  p[d + 0] = std::cos(0.1);
  p[d + 1] = std::sin(0.1);
  p[2 * d + 2] = 1.0;
  BankSpec spec;
  spec.seed = 9;
  spec.num_classes = 3;
  spec.seq_len = 4;
  spec.width = d;
  spec.layer_drift = 0.2;
  spec.noise_std = 0.05;
  const ConceptBank b = generate_bank(spec, Tensor::from({3, d}, p));
  auto mean_dot = [&](std::size_t i, std::size_t j) {
    const Tensor a = b.class_sequence(i), c = b.class_sequence(j);
    double s = 0.0;
    for (std::size_t l = 0; l < 4; ++l)
      for (std::size_t k = 0; k < d; ++k) s += a.at(l, k) * c.at(l, k);
    return s / 4;
  };
  EXPECT_GT(mean_dot(0, 1), mean_dot(0, 2));
}

TEST(GenerateBank, Errors) {
  EXPECT_THROW(make_bank(1, 0.5, 0.1, 1), ConfigError);
  EXPECT_THROW(make_bank(1, 1.5), ConfigError);
  BankSpec spec;
  spec.num_classes = 3;
  spec.width = 8;
  EXPECT_THROW(generate_bank(spec, Tensor::zeros({3, 9})), DimensionError);
}

TEST(Cka, SelfSimilarityAndInvariances) {
  Rng rng(1);
  for (int t = 0; t < 10; ++t) {
    const Tensor x = random_tensor(rng, {12, 5});
    EXPECT_NEAR(cka(x, x), 1.0, 1e-10);
    // orthogonal Q from a QR factorisation
    const Mat q = Eigen::HouseholderQR<Mat>(to_eigen(random_tensor(rng, {5, 5}))).householderQ();
    const Mat xq = to_eigen(x) * q;
    std::vector<double> v(xq.size());
    for (Eigen::Index r = 0; r < xq.rows(); ++r)
      for (Eigen::Index c = 0; c < xq.cols(); ++c) v[r * xq.cols() + c] = xq(r, c);
    EXPECT_NEAR(cka(x, Tensor::from({12, 5}, v)), 1.0, 1e-10);
    EXPECT_NEAR(cka(x, ops::scale(x, -3.7)), 1.0, 1e-10);
  }
}

TEST(Cka, TwoSampleClosedForm) {
  const Tensor x = Tensor::from({2, 1}, {1, -1});
  const Tensor y = Tensor::from({2, 1}, {1, 1.0001});
  // centred: x = [1, -1], y = [-5e-5, 5e-5]
  const double yx = (-5e-5) * 1 + 5e-5 * (-1);
  const double xx = 2.0, yy = 2 * 5e-5 * 5e-5;
  EXPECT_NEAR(cka(x, y), yx * yx / (xx * yy), 1e-10);
}

TEST(Cka, MatchesGramRoute) {
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    const Tensor x = random_tensor(rng, {9, 4});
    const Tensor y = random_tensor(rng, {9, 7});
    const double v = cka(x, y);
    EXPECT_NEAR(v, cka_gram(x, y), 1e-10);
    EXPECT_GE(v, -1e-10);
    EXPECT_LE(v, 1.0 + 1e-10);
  }
}

TEST(Cka, Errors) {
  EXPECT_THROW(cka(Tensor::ones({4, 3}), Tensor::from({4, 1}, {1, 2, 3, 4})), DegenerateInputError);
  EXPECT_THROW(cka(Tensor::ones({4, 3}), Tensor::ones({5, 3})), DimensionError);
}

TEST(CkaHeatmap, SymmetricUnitDiagonal) {
  const ConceptBank b = make_bank(7);
  const CkaMatrix m = cka_heatmap(b, 0);
  ASSERT_EQ(m.values.rows(), b.seq_len);
  for (std::size_t i = 0; i < b.seq_len; ++i) {
    EXPECT_NEAR(m.values.at(i, i), 1.0, 1e-10);
    for (std::size_t j = 0; j < b.seq_len; ++j) {
      EXPECT_NEAR(m.values.at(i, j), m.values.at(j, i), 1e-12);
      EXPECT_GE(m.values.at(i, j), -1e-10);
      EXPECT_LE(m.values.at(i, j), 1.0 + 1e-10);
    }
  }
  EXPECT_THROW(cka_heatmap(b, b.num_classes), IndexError);
}

TEST(CkaHeatmap, AdjacentLayersMoreSimilarThanDistant) {
  double adjacent = 0.0, distant = 0.0, margin = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const ConceptBank b = make_bank(seed);
    const CkaMatrix m = cka_heatmap(b, 0);
    const std::size_t l = b.seq_len;
    for (std::size_t i = 0; i + 1 < l; ++i) adjacent += m.values.at(i, i + 1) / static_cast<double>(l - 1);
    distant += m.values.at(0, l - 1);
    margin += cka_layer_margin(m);
  }
  EXPECT_GT(adjacent, distant);
  EXPECT_GT(margin, 0.0);
}

TEST(CkaHeatmap, MoreNoiseWeaklyShrinksMargin) {
  std::vector<double> margins;
  for (double noise : {0.0, 0.1, 0.3, 1.0}) {
    double m = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) m += cka_layer_margin(cka_heatmap(make_bank(seed, 0.5, noise), 0));
    margins.push_back(m / 10);
  }
  for (std::size_t i = 1; i < margins.size(); ++i) EXPECT_LE(margins[i], margins[i - 1] + 1e-12) << i;
}

TEST(BankFile, RoundTripBitExact) {
  ConceptBank b = make_bank(8);
  b.class_names = {"a", "b", "c", "d", "e", "f"};
  const auto path = test_util::temp_path("bank.bin");
  save_bank(b, path);
  const ConceptBank back = load_bank(path);
  EXPECT_EQ(back.num_classes, b.num_classes);
  EXPECT_EQ(back.seq_len, b.seq_len);
  EXPECT_EQ(back.width, b.width);
  EXPECT_EQ(back.class_names, b.class_names);
  ASSERT_EQ(back.data.numel(), b.data.numel());
  EXPECT_EQ(std::memcmp(back.data.values().data(), b.data.values().data(), b.data.numel() * sizeof(double)), 0);
  EXPECT_EQ(test_util::read_bytes(path).substr(0, 10), "CILMPBANK1");
}

TEST(BankFile, CorruptInputs) {
  ConceptBank b = make_bank(8, 0.5, 0.1, 2, 3, 4);
  b.class_names = {"x", "y"};
  const auto path = test_util::temp_path("bank.bin");
  save_bank(b, path);
  const std::string good = test_util::read_bytes(path);

  std::string bad = good;
  bad[0] = 'X';
  test_util::write_bytes(path, bad);
  EXPECT_THROW(load_bank(path), FormatError);

  test_util::write_bytes(path, good.substr(0, good.size() - 20));
  EXPECT_THROW(load_bank(path), FormatError);

  // header claims a larger D_h than the payload holds
  bad = good;
  bad[10 + 12] = 5;
  test_util::write_bytes(path, bad);
  try {
    load_bank(path);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos) << e.what();
  }

  // overflowing header
  bad = good;
  for (int i = 0; i < 4; ++i) bad[10 + 4 + i] = '\xff';
  test_util::write_bytes(path, bad);
  EXPECT_THROW(load_bank(path), FormatError);
}

TEST(BankImmutability, TrainingNeverTouchesTheBankTensor) {
  const ConceptBank b = make_bank(9);
  EXPECT_FALSE(b.data.requires_grad());
}
