#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "cilmp/encoders.hpp"
#include "cilmp/errors.hpp"
#include "cilmp/ops.hpp"
#include "test_util.hpp"

using namespace cilmp;
namespace op = cilmp::ops;

namespace {

EncoderConfig small_config(std::size_t deep = 2) {
  EncoderConfig c;
  c.embed_dim = 16;
  c.num_layers = 2;
  c.hidden_dim = 32;
  c.image_tokens = 4;
  c.text_max_len = 12;
  c.vocab_size = 20;
  c.deep_prompt_layers = deep;
  return c;
}

Tensor random_tensor(Rng& rng, const Shape& shape, double stddev = 1.0) {
  return Tensor::from(shape, rng.normal_vector(shape_numel(shape), stddev));
}

double row_norm(const Tensor& t, std::size_t r) {
  double s = 0.0;
  for (std::size_t c = 0; c < t.cols(); ++c) s += t.at(r, c) * t.at(r, c);
  return std::sqrt(s);
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    if (std::bit_cast<std::uint64_t>(a.at(i)) != std::bit_cast<std::uint64_t>(b.at(i))) return false;
  }
  return true;
}

}  // namespace

TEST(ImageEncoder, EmbeddingsHaveUnitNorm) {
  const ClipModel m(small_config(), 1);
  Rng rng(2);
  const Tensor z = m.image().encode(random_tensor(rng, {5 * 4, 16}, 3.0));
  ASSERT_EQ(z.rows(), 5u);
  for (std::size_t r = 0; r < 5; ++r) EXPECT_NEAR(row_norm(z, r), 1.0, 1e-12);
}

TEST(ImageEncoder, Deterministic) {
  const ClipModel a(small_config(), 7), b(small_config(), 7);
  Rng rng(3);
  const Tensor x = random_tensor(rng, {4, 16});
  EXPECT_TRUE(bit_equal(a.image().encode(x), b.image().encode(x.clone())));
  // zero-magnitude perturbation
  const Tensor y = op::add(x, Tensor::zeros({4, 16}));
  EXPECT_TRUE(bit_equal(a.image().encode(x), a.image().encode(y)));
}

TEST(ImageEncoder, NonFiniteInput) {
  const ClipModel m(small_config(), 1);
  Tensor x = Tensor::zeros({4, 16});
  x.mutable_values()[3] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(m.image().encode(x), EvaluationError);
}

TEST(ImageEncoder, ShallowPromptingIgnoresDeeperLayers) {
  const ClipModel m(small_config(1), 4);
  Rng rng(5);
  const Tensor x = random_tensor(rng, {8, 16});
  const std::vector<Tensor> both{random_tensor(rng, {3, 16}), random_tensor(rng, {3, 16})};
  const std::vector<Tensor> first{both[0]};
  EXPECT_TRUE(bit_equal(m.image().encode(x, both), m.image().encode(x, first)));
}

TEST(ImageEncoder, DeepPromptsChangeOutput) {
  const ClipModel m(small_config(2), 4);
  Rng rng(5);
  const Tensor x = random_tensor(rng, {4, 16});
  const std::vector<Tensor> both{random_tensor(rng, {3, 16}), random_tensor(rng, {3, 16})};
  const std::vector<Tensor> other{both[0], random_tensor(rng, {3, 16})};
  EXPECT_FALSE(bit_equal(m.image().encode(x, both), m.image().encode(x, other)));
}

TEST(TextEncoder, EmbeddingsHaveUnitNorm) {
  const ClipModel m(small_config(), 1);
  const std::vector<std::vector<int>> seqs{{2, 3, 4, 1}, {5, 6, 1}, {7, 1}};
  const Tensor w = m.text().encode(make_text_batch(m.text(), seqs, 0));
  ASSERT_EQ(w.rows(), 3u);
  for (std::size_t r = 0; r < 3; ++r) EXPECT_NEAR(row_norm(w, r), 1.0, 1e-12);
}

TEST(TextEncoder, TooLongSequence) {
  const ClipModel m(small_config(), 1);
  const std::vector<int> ids(13, 2);
  EXPECT_THROW(m.text().encode(TextSequence{m.text().embed(ids), 12}), LengthError);
}

TEST(TextEncoder, TokensAfterEosDoNotMatter) {
  const ClipModel m(small_config(), 1);
  const std::vector<int> a{2, 3, 4, 1, 8, 9, 10}, b{2, 3, 4, 1, 10, 8, 9};
  const Tensor wa = m.text().encode(TextSequence{m.text().embed(a), 3});
  const Tensor wb = m.text().encode(TextSequence{m.text().embed(b), 3});
  EXPECT_TRUE(bit_equal(wa, wb));
}

TEST(TextEncoder, ShallowPromptingIgnoresDeeperLayers) {
  const ClipModel m(small_config(1), 6);
  Rng rng(8);
  const std::vector<int> ids{2, 3, 4, 5, 6, 1};
  const TextSequence seq{m.text().embed(ids), 5};
  const std::vector<Tensor> prompts{random_tensor(rng, {2, 16}), random_tensor(rng, {2, 16})};
  EXPECT_TRUE(bit_equal(m.text().encode(seq, prompts, 1), m.text().encode(seq)));
}

TEST(TextEncoder, DeepPromptsReplaceSlots) {
  const ClipModel m(small_config(2), 6);
  Rng rng(8);
  const std::vector<int> ids{2, 3, 4, 5, 6, 1};
  const TextSequence seq{m.text().embed(ids), 5};
  const std::vector<Tensor> p1{Tensor(), random_tensor(rng, {2, 16})};
  const std::vector<Tensor> p2{Tensor(), random_tensor(rng, {2, 16})};
  EXPECT_FALSE(bit_equal(m.text().encode(seq, p1, 1), m.text().encode(seq, p2, 1)));
}

TEST(TextEncoder, BatchMatchesSingleSequences) {
  const ClipModel m(small_config(), 3);
  const std::vector<std::vector<int>> seqs{{2, 3, 4, 1}, {5, 6, 7, 1}};
  const Tensor batch = m.text().encode(make_text_batch(m.text(), seqs, 0));
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    const Tensor one = m.text().encode(TextSequence{m.text().embed(seqs[s]), seqs[s].size() - 1});
    for (std::size_t c = 0; c < 16; ++c) EXPECT_NEAR(batch.at(s, c), one.at(0, c), 1e-12);
  }
}

TEST(InfoNce, RandomEmbeddingsNearLogN) {
  // Logit spread is (1/tau) / sqrt(D); at 1/tau = 20 this needs a wide embedding.
  Rng rng(10);
  double total = 0.0;
  const int trials = 200;
  for (int t = 0; t < trials; ++t) {
    const Tensor z = op::normalize_rows(random_tensor(rng, {4, 512}));
    const Tensor w = op::normalize_rows(random_tensor(rng, {4, 512}));
    total += info_nce(z, w, Tensor::scalar(std::log(0.05))).image_to_text.item();
  }
  EXPECT_NEAR(total / trials, std::log(4.0), 0.5);
}

TEST(InfoNce, EqualLogitsGiveLogN) {
  const Tensor z = Tensor::from({5, 2}, std::vector<double>(10, std::sqrt(0.5)));
  const InfoNceLoss l = info_nce(z, z, Tensor::scalar(std::log(0.05)));
  EXPECT_NEAR(l.total.item(), std::log(5.0), 1e-10);
}

TEST(InfoNce, SwappingRolesSwapsTerms) {
  Rng rng(12);
  const Tensor z = op::normalize_rows(random_tensor(rng, {6, 8}));
  const Tensor w = op::normalize_rows(random_tensor(rng, {6, 8}));
  const Tensor lt = Tensor::scalar(std::log(0.07));
  const InfoNceLoss a = info_nce(z, w, lt), b = info_nce(w, z, lt);
  // z.w and w.z accumulate in a different order inside the matrix kernel
  EXPECT_NEAR(a.image_to_text.item(), b.text_to_image.item(), 1e-13);
  EXPECT_NEAR(a.text_to_image.item(), b.image_to_text.item(), 1e-13);
  EXPECT_NEAR(a.total.item(), b.total.item(), 1e-13);
}

TEST(InfoNce, SinglePairRejected) {
  const Tensor z = Tensor::from({1, 2}, {1, 0});
  EXPECT_THROW(info_nce(z, z, Tensor::scalar(0.0)), ConfigError);
}

TEST(Pretrain, SeparatesFourPairs) {
  EncoderConfig cfg = small_config();
  ClipModel m(cfg, 21);
  Rng rng(22);
  std::vector<ImageTextPair> pairs;
  for (int i = 0; i < 4; ++i) {
    Tensor img = Tensor::zeros({4, 16});
    for (std::size_t r = 0; r < 4; ++r) img.mutable_values()[r * 16 + static_cast<std::size_t>(i) * 3] = 2.0;
    pairs.push_back({img, {2 + i, 8 + i, 1}});
  }
  PretrainOptions opts;
  opts.epochs = 150;
  opts.lr = 3e-3;
  opts.batch_size = 4;
  opts.seed = 1;
  const auto loss = pretrain_clip(m, pairs, opts);
  EXPECT_LT(loss.back(), loss.front());

  std::vector<Tensor> imgs;
  std::vector<std::vector<int>> texts;
  for (const auto& p : pairs) {
    imgs.push_back(p.image);
    texts.push_back(p.tokens);
  }
  const Tensor z = m.image().encode(op::concat(imgs, 0));
  const Tensor w = m.text().encode(make_text_batch(m.text(), texts, 0));
  const Tensor sim = op::matmul_nt(z, w);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      if (i != j) EXPECT_GT(sim.at(i, i), sim.at(i, j)) << i << "," << j;
    }
  }
}

TEST(Pretrain, BatchOfOneRejected) {
  ClipModel m(small_config(), 1);
  std::vector<ImageTextPair> pairs{{Tensor::zeros({4, 16}), {2, 1}}, {Tensor::zeros({4, 16}), {3, 1}}};
  PretrainOptions opts;
  opts.batch_size = 1;
  EXPECT_THROW(pretrain_clip(m, pairs, opts), ConfigError);
}

TEST(Pretrain, BitReproducible) {
  auto run = [] {
    ClipModel m(small_config(), 5);
    Rng rng(6);
    std::vector<ImageTextPair> pairs;
    for (int i = 0; i < 8; ++i) pairs.push_back({random_tensor(rng, {4, 16}), {2 + i % 5, 9, 1}});
    PretrainOptions opts;
    opts.epochs = 3;
    opts.batch_size = 4;
    opts.seed = 3;
    pretrain_clip(m, pairs, opts);
    return m.checksum();
  };
  EXPECT_EQ(run(), run());
}

TEST(Freeze, IdempotentAndBlocksUpdates) {
  ClipModel m(small_config(), 1);
  Sgd before(m.parameters(), 0.1, 0.0);
  const FrozenFlag a = m.freeze();
  const FrozenFlag b = m.freeze();
  EXPECT_TRUE(a.frozen);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.checksum, m.checksum());
  EXPECT_THROW(before.step(), FrozenParameterError);
  EXPECT_THROW(Sgd(m.parameters(), 0.1, 0.0), FrozenParameterError);
  EXPECT_THROW(Adam(m.parameters(), 0.1), FrozenParameterError);
  for (const auto& p : m.parameters()) EXPECT_TRUE(p.tensor.frozen()) << p.name;
}

TEST(Temperature, StartsAtTwentyAndStaysPositive) {
  const ClipModel m(small_config(), 1);
  EXPECT_NEAR(m.inverse_temperature(), 20.0, 1e-12);
}

TEST(EncoderFile, RoundTrip) {
  const ClipModel m(small_config(), 9);
  const auto path = test_util::temp_path("enc.bin");
  m.save(path);
  const ClipModel back = ClipModel::load(path);
  EXPECT_EQ(back.config(), m.config());
  EXPECT_EQ(back.checksum(), m.checksum());
  std::ifstream in(path, std::ios::binary);
  std::string magic(9, '\0');
  in.read(magic.data(), 9);
  EXPECT_EQ(magic, "CILMPENC1");
}

TEST(EncoderFile, TruncatedAndBadMagic) {
  const ClipModel m(small_config(), 9);
  const auto path = test_util::temp_path("enc_trunc.bin");
  m.save(path);
  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 5);
  EXPECT_THROW(ClipModel::load(path), FormatError);
  test_util::write_bytes(path, "NOTMAGIC!rest");
  EXPECT_THROW(ClipModel::load(path), FormatError);
}

TEST(EncoderConfig, Validation) {
  EncoderConfig c = small_config();
  c.deep_prompt_layers = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c.deep_prompt_layers = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.embed_dim = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}
