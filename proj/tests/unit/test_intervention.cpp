#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "cilmp/errors.hpp"
#include "cilmp/intervention.hpp"
#include "cilmp/ops.hpp"
#include "cilmp/rng.hpp"

using namespace cilmp;
namespace op = cilmp::ops;

namespace {

Tensor random_tensor(Rng& rng, const Shape& shape, double stddev = 1.0) {
  return Tensor::from(shape, rng.normal_vector(shape_numel(shape), stddev));
}

Tensor unit_z(Rng& rng, std::size_t d) { return op::l2_normalize(random_tensor(rng, {d})); }

// Random parameters, with R deliberately not orthonormal.
InterventionParams random_params(Rng& rng, std::size_t r, std::size_t d, bool conditional) {
  return {random_tensor(rng, {r, d}), random_tensor(rng, {r, conditional ? 2 * d : d}), random_tensor(rng, {r})};
}

void expect_values(const Tensor& t, const std::vector<double>& expected, double tol = 1e-12) {
  ASSERT_EQ(t.numel(), expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(t.at(i), expected[i], tol) << "index " << i;
}

bool rows_bit_equal(const Tensor& a, const Tensor& b, std::size_t row) {
  for (std::size_t c = 0; c < a.cols(); ++c) {
    if (std::bit_cast<std::uint64_t>(a.at(row, c)) != std::bit_cast<std::uint64_t>(b.at(row, c))) return false;
  }
  return true;
}

}  // namespace

TEST(RelationshipDescriptor, HandExample) {
  // D_p = 1, z = [1], U = I, V = [[3], [4]] so U V z = [3, 4].
  const ZProjection proj{Tensor::from({2, 2}, {1, 0, 0, 1}), Tensor::from({2, 1}, {3, 4})};
  expect_values(relationship_descriptor(Tensor::from({2}, {1, 2}), Tensor::from({1}, {1}), proj), {1, 2, 3, 8});
}

TEST(RelationshipDescriptor, OnesProjectionDuplicatesH) {
  const ZProjection proj{Tensor::from({3, 1}, {1, 1, 1}), Tensor::from({1, 2}, {1, 0})};
  const Tensor z = Tensor::from({2}, {1, 0});
  expect_values(relationship_descriptor(Tensor::from({3}, {0.5, -2, 4}), z, proj), {0.5, -2, 4, 0.5, -2, 4});
}

TEST(RelationshipDescriptor, ZeroH) {
  Rng rng(1);
  const ZProjection proj{random_tensor(rng, {4, 2}), random_tensor(rng, {2, 5})};
  expect_values(relationship_descriptor(Tensor::zeros({4}), unit_z(rng, 5), proj), std::vector<double>(8, 0.0));
}

TEST(RelationshipDescriptor, DimensionMismatch) {
  Rng rng(1);
  const ZProjection proj{random_tensor(rng, {4, 2}), random_tensor(rng, {2, 5})};
  EXPECT_THROW(relationship_descriptor(Tensor::zeros({3}), unit_z(rng, 5), proj), DimensionError);
  EXPECT_THROW(relationship_descriptor(Tensor::zeros({4}), unit_z(rng, 6), proj), DimensionError);
}

TEST(Unconditional, ZeroRIsIdentity) {
  Rng rng(2);
  InterventionParams p = random_params(rng, 2, 4, false);
  p.R = Tensor::zeros({2, 4});
  const Tensor h = random_tensor(rng, {4});
  expect_values(intervene_unconditional(h, p), std::vector<double>(h.values().begin(), h.values().end()));
}

TEST(Unconditional, FixedPoint) {
  Rng rng(3);
  InterventionParams p = random_params(rng, 2, 4, false);
  const Tensor h = random_tensor(rng, {4});
  // b = R h - W h
  const Tensor rh = op::reshape(op::matmul_nt(op::reshape(h, {1, 4}), p.R), {2});
  const Tensor wh = op::reshape(op::matmul_nt(op::reshape(h, {1, 4}), p.W), {2});
  p.b = op::sub(rh, wh).clone();
  expect_values(intervene_unconditional(h, p), std::vector<double>(h.values().begin(), h.values().end()), 1e-12);
}

TEST(Unconditional, HandExample) {
  // h = [1, 0], R = [[1, 0]], W h + b = [3]
  const InterventionParams p{Tensor::from({1, 2}, {1, 0}), Tensor::from({1, 2}, {2, 7}), Tensor::from({1}, {1})};
  expect_values(intervene_unconditional(Tensor::from({2}, {1, 0}), p), {3, 0});
}

TEST(Conditional, ZeroWeightsProjectOutSubspace) {
  Rng rng(4);
  for (int t = 0; t < 10; ++t) {
    InterventionParams p = random_params(rng, 3, 6, true);
    orthonormalize_rows(p.R);
    p.W = Tensor::zeros({3, 12});
    p.b = Tensor::zeros({3});
    const ZProjection proj{random_tensor(rng, {6, 2}), random_tensor(rng, {2, 5})};
    const Tensor h = random_tensor(rng, {6});
    const Tensor out = intervene_conditional(h, unit_z(rng, 5), p, proj);
    // (I - R^T R) h
    const Tensor rh = op::matmul_nt(op::reshape(h, {1, 6}), p.R);
    const Tensor expected = op::sub(op::reshape(h, {1, 6}), op::matmul(rh, p.R));
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(out.at(i), expected.at(i), 1e-12);
  }
}

TEST(Conditional, FixedPoint) {
  Rng rng(5);
  InterventionParams p = random_params(rng, 2, 4, true);
  const ZProjection proj{random_tensor(rng, {4, 3}), random_tensor(rng, {3, 5})};
  const Tensor h = random_tensor(rng, {4}), z = unit_z(rng, 5);
  const Tensor t = op::reshape(relationship_descriptor(h, z, proj), {1, 8});
  const Tensor rh = op::reshape(op::matmul_nt(op::reshape(h, {1, 4}), p.R), {2});
  p.b = op::sub(rh, op::reshape(op::matmul_nt(t, p.W), {2})).clone();
  expect_values(intervene_conditional(h, z, p, proj), std::vector<double>(h.values().begin(), h.values().end()), 1e-12);
}

TEST(Conditional, SameImageSameOutput) {
  Rng rng(6);
  const InterventionParams p = random_params(rng, 2, 4, true);
  const ZProjection proj{random_tensor(rng, {4, 3}), random_tensor(rng, {3, 5})};
  const Tensor h = random_tensor(rng, {4}), z = unit_z(rng, 5);
  const Tensor a = intervene_conditional(h, z, p, proj), b = intervene_conditional(h, z.clone(), p, proj);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(a.at(i), b.at(i));
}

TEST(Conditional, DependsOnImageUnlikeUnconditional) {
  Rng rng(7);
  for (int t = 0; t < 20; ++t) {
    const InterventionParams pc = random_params(rng, 3, 6, true);
    const InterventionParams pu = random_params(rng, 3, 6, false);
    const ZProjection proj{random_tensor(rng, {6, 4}), random_tensor(rng, {4, 5})};
    const Tensor h = random_tensor(rng, {6, 6}), z1 = unit_z(rng, 5), z2 = unit_z(rng, 5);
    const PositionSets pos{3, 3};
    const Tensor c1 = apply_bilateral(h, z1, pc, pc, proj, pos, InterventionMode::conditional);
    const Tensor c2 = apply_bilateral(h, z2, pc, pc, proj, pos, InterventionMode::conditional);
    double diff = 0.0;
    for (std::size_t i = 0; i < c1.numel(); ++i) diff = std::max(diff, std::abs(c1.at(i) - c2.at(i)));
    EXPECT_GT(diff, 1e-8);
    const Tensor u1 = apply_bilateral(h, z1, pu, pu, proj, pos, InterventionMode::unconditional);
    const Tensor u2 = apply_bilateral(h, z2, pu, pu, proj, pos, InterventionMode::unconditional);
    for (std::size_t i = 0; i < u1.numel(); ++i) EXPECT_EQ(u1.at(i), u2.at(i));
  }
}

TEST(SubspaceResidual, EditsStayInRowSpace) {
  Rng rng(8);
  for (int t = 0; t < 100; ++t) {
    const std::size_t d = 4 + rng.index(8), r = 1 + rng.index(d);
    const Tensor h = random_tensor(rng, {d});
    const InterventionParams pu = random_params(rng, r, d, false);
    EXPECT_LE(subspace_residual(h, intervene_unconditional(h, pu), pu.R).residual, 1e-9);
    const InterventionParams pc = random_params(rng, r, d, true);
    const ZProjection proj{random_tensor(rng, {d, 3}), random_tensor(rng, {3, 6})};
    const Tensor z = unit_z(rng, 6);
    EXPECT_LE(subspace_residual(h, intervene_conditional(h, z, pc, proj), pc.R).residual, 1e-9);
    const Tensor hi = intervene_conditional(h, z, pc, proj, InterventionMode::conditional_image_only);
    EXPECT_LE(subspace_residual(h, hi, pc.R).residual, 1e-9);
  }
}

TEST(SubspaceResidual, IdentityIsZeroAndRankDeficiencyFlagged) {
  Rng rng(9);
  const Tensor h = random_tensor(rng, {5});
  const SubspaceResidual s = subspace_residual(h, h, random_tensor(rng, {2, 5}));
  EXPECT_EQ(s.residual, 0.0);
  EXPECT_FALSE(s.rank_deficient);
  const Tensor row = random_tensor(rng, {1, 5});
  const Tensor dup = op::concat({row, row}, 0);
  EXPECT_TRUE(subspace_residual(h, h, dup).rank_deficient);
}

TEST(OrthonormalReadout, RPsiEqualsEditTarget) {
  Rng rng(10);
  for (int t = 0; t < 50; ++t) {
    InterventionParams p = random_params(rng, 3, 7, true);
    orthonormalize_rows(p.R);
    const ZProjection proj{random_tensor(rng, {7, 2}), random_tensor(rng, {2, 4})};
    const Tensor h = random_tensor(rng, {7}), z = unit_z(rng, 4);
    const Tensor psi = op::reshape(intervene_conditional(h, z, p, proj), {1, 7});
    const Tensor tt = op::reshape(relationship_descriptor(h, z, proj), {1, 14});
    const Tensor lhs = op::matmul_nt(psi, p.R);
    const Tensor rhs = op::add_rowwise(op::matmul_nt(tt, p.W), p.b);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(lhs.at(i), rhs.at(i), 1e-10);
  }
}

TEST(OrthonormalizeRows, ProducesOrthonormalRows) {
  Rng rng(11);
  Tensor r = random_tensor(rng, {4, 9});
  orthonormalize_rows(r);
  const Tensor g = op::matmul_nt(r, r);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(g.at(i, j), i == j ? 1.0 : 0.0, 1e-12);
}

TEST(Bilateral, EmptySetsAndIdentityPassThrough) {
  Rng rng(12);
  const InterventionParams p = random_params(rng, 2, 5, true);
  const ZProjection proj{random_tensor(rng, {5, 2}), random_tensor(rng, {2, 3})};
  const Tensor h = random_tensor(rng, {6, 5}), z = unit_z(rng, 3);
  const Tensor a = apply_bilateral(h, z, p, p, proj, PositionSets{0, 0}, InterventionMode::conditional);
  const Tensor b = apply_bilateral(h, z, p, p, proj, PositionSets{3, 3}, InterventionMode::identity);
  for (std::size_t r = 0; r < 6; ++r) {
    EXPECT_TRUE(rows_bit_equal(a, h, r));
    EXPECT_TRUE(rows_bit_equal(b, h, r));
  }
}

TEST(Bilateral, PositionLocality) {
  Rng rng(13);
  const InterventionParams pre = random_params(rng, 2, 5, true), suf = random_params(rng, 2, 5, true);
  const ZProjection proj{random_tensor(rng, {5, 2}), random_tensor(rng, {2, 3})};
  const Tensor h = random_tensor(rng, {8, 5}), z = unit_z(rng, 3);
  const PositionSets pos{2, 3};
  const Tensor out = apply_bilateral(h, z, pre, suf, proj, pos, InterventionMode::conditional);
  // rows 0-1 prefix, 5-7 suffix, 2-4 untouched
  for (std::size_t r : {2u, 3u, 4u}) EXPECT_TRUE(rows_bit_equal(out, h, r)) << r;
  for (std::size_t r : {0u, 1u, 5u, 6u, 7u}) EXPECT_FALSE(rows_bit_equal(out, h, r)) << r;
  // prefix rows use prefix params, suffix rows suffix params
  const Tensor row0 = intervene_conditional(op::slice(h, 0, 0, 1), z, pre, proj);
  const Tensor row7 = intervene_conditional(op::slice(h, 0, 7, 8), z, suf, proj);
  for (std::size_t c = 0; c < 5; ++c) {
    EXPECT_NEAR(out.at(0, c), row0.at(c), 1e-12);
    EXPECT_NEAR(out.at(7, c), row7.at(c), 1e-12);
  }
}

TEST(Bilateral, OperatingPointFourFour) {
  const PositionSets pos{4, 4};
  EXPECT_NO_THROW(pos.validate(8));
  EXPECT_EQ(pos.prefix_positions(), (std::vector<std::size_t>{0, 1, 2, 3}));
  EXPECT_EQ(pos.suffix_positions(8), (std::vector<std::size_t>{4, 5, 6, 7}));
}

TEST(Bilateral, OverlapRejected) {
  EXPECT_THROW((PositionSets{4, 5}).validate(8), ConfigError);
  Rng rng(14);
  const InterventionParams p = random_params(rng, 2, 5, false);
  const ZProjection proj{random_tensor(rng, {5, 2}), random_tensor(rng, {2, 3})};
  EXPECT_THROW(apply_bilateral(random_tensor(rng, {4, 5}), unit_z(rng, 3), p, p, proj, PositionSets{3, 2},
                               InterventionMode::unconditional),
               ConfigError);
}

TEST(GradientFlow, ReachesParametersButNotFrozenInputs) {
  Rng rng(15);
  InterventionParams p{Tensor::parameter({2, 5}, rng.normal_vector(10)), Tensor::parameter({2, 10}, rng.normal_vector(20)),
                       Tensor::parameter({2}, rng.normal_vector(2))};
  ZProjection proj{Tensor::parameter({5, 2}, rng.normal_vector(10)), Tensor::parameter({2, 3}, rng.normal_vector(6))};
  Tensor bank = Tensor::parameter({4, 5}, rng.normal_vector(20));
  bank.freeze();
  Tensor z = Tensor::parameter({3}, rng.normal_vector(3));
  z.freeze();
  const Tensor out = apply_bilateral(bank, z, p, p, proj, PositionSets{2, 2}, InterventionMode::conditional);
  backward(op::sum(op::hadamard(out, out)));
  for (const Tensor* t : {&p.R, &p.W, &p.b, &proj.U, &proj.V}) EXPECT_TRUE(t->has_grad());
  EXPECT_FALSE(bank.has_grad());
  EXPECT_FALSE(z.has_grad());
}

TEST(GradientFlow, FiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    InterventionParams p{Tensor::parameter({2, 4}, rng.normal_vector(8)), Tensor::parameter({2, 8}, rng.normal_vector(16)),
                         Tensor::parameter({2}, rng.normal_vector(2))};
    ZProjection proj{Tensor::parameter({4, 2}, rng.normal_vector(8)), Tensor::parameter({2, 3}, rng.normal_vector(6))};
    const Tensor h = random_tensor(rng, {5, 4}), z = unit_z(rng, 3);
    const Tensor w = random_tensor(rng, {5, 4});
    std::vector<Tensor> params{p.R, p.W, p.b, proj.U, proj.V};
    const double err = op::gradient_check(
        [&] {
          return op::sum(op::hadamard(apply_bilateral(h, z, p, p, proj, PositionSets{2, 2}, InterventionMode::conditional), w));
        },
        params);
    EXPECT_LT(err, 1e-5) << "seed " << seed;
  }
}

TEST(MakeParams, ShapesAndOrthonormalInit) {
  Rng rng(16);
  const InterventionParams c = make_intervention_params(3, 8, true, rng);
  EXPECT_EQ(c.W.shape(), (Shape{3, 16}));
  EXPECT_TRUE(c.conditional());
  const InterventionParams u = make_intervention_params(3, 8, false, rng);
  EXPECT_EQ(u.W.shape(), (Shape{3, 8}));
  EXPECT_FALSE(u.conditional());
  const Tensor g = op::matmul_nt(c.R, c.R);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(g.at(i, j), i == j ? 1.0 : 0.0, 1e-12);
  for (double v : c.b.values()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(make_intervention_params(9, 8, true, rng), ConfigError);
}
