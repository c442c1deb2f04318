#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "narpq/numerics.hpp"

using namespace narpq;

TEST(SoftmaxXent, SymmetricPair) {
  const std::vector<Scalar> logits{0, 0};
  const auto r = softmax_xent(logits, 0);
  EXPECT_NEAR(r.loss, std::log(2.0), 1e-6);
  EXPECT_NEAR(r.grad[0], -0.5, 1e-6);
  EXPECT_NEAR(r.grad[1], 0.5, 1e-6);
}

TEST(SoftmaxXent, ConfidentCorrectClass) {
  const std::vector<Scalar> logits{10, -10};
  const auto r = softmax_xent(logits, 0);
  // -log sigmoid(20) = log(1 + e^-20)
  EXPECT_NEAR(r.loss, std::log1p(std::exp(-20.0)), 1e-12);
  EXPECT_NEAR(r.loss, 2.06e-9, 0.01e-9);
}

TEST(SoftmaxXent, UniformLogitsGiveLogV) {
  for (std::size_t v : {2u, 7u, 32u, 256u}) {
    std::vector<Scalar> logits(v, Scalar(3.25));
    EXPECT_NEAR(softmax_xent(logits, v / 2).loss, std::log(double(v)), 1e-5);
  }
}

TEST(SoftmaxXent, GradientSumsToZero) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Scalar> logits(17);
    for (auto& l : logits) l = static_cast<Scalar>(rng.normal() * 4);
    const auto r = softmax_xent(logits, rng.index(17));
    double s = 0;
    for (auto g : r.grad) s += g;
    EXPECT_NEAR(s, 0.0, 1e-6);
  }
}

TEST(SoftmaxXent, Errors) {
  const std::vector<Scalar> logits{1, 2, 3};
  EXPECT_THROW(softmax_xent(logits, 3), IndexError);
  const std::vector<Scalar> one{1};
  EXPECT_THROW(softmax_xent(one, 0), ArgumentError);
  const std::vector<Scalar> bad{1, NAN};
  EXPECT_THROW(softmax_xent(bad, 0), NumericError);
}

TEST(GradCheck, Square) {
  std::vector<Param> ps;
  ps.emplace_back("w", Tensor({1}, Scalar(3)));
  auto f = [&] {
    const double w = ps[0].value[0];
    ps[0].grad[0] += static_cast<Scalar>(2 * w);
    return w * w;
  };
  EXPECT_LT(grad_check(f, ps, 1e-4), 1e-6);
}

TEST(GradCheck, ConstantFunction) {
  std::vector<Param> ps;
  ps.emplace_back("w", Tensor({4}, Scalar(1)));
  EXPECT_EQ(grad_check([] { return 5.0; }, ps, 1e-3), 0.0);
}

TEST(GradCheck, DetectsWrongGradient) {
  std::vector<Param> ps;
  ps.emplace_back("w", Tensor({1}, Scalar(2)));
  auto f = [&] {
    const double w = ps[0].value[0];
    ps[0].grad[0] += static_cast<Scalar>(3 * w);  // true derivative is 2w
    return w * w;
  };
  EXPECT_GT(grad_check(f, ps, 1e-3), 0.1);
}

TEST(GradCheck, RejectsNondeterministicObjective) {
  std::vector<Param> ps;
  ps.emplace_back("w", Tensor({1}, Scalar(2)));
  double drift = 0;
  auto f = [&] { return (drift += 1.0); };
  EXPECT_THROW(grad_check(f, ps, 1e-3), ContractError);
}

TEST(GradCheck, EpsOutOfRange) {
  std::vector<Param> ps;
  ps.emplace_back("w", Tensor({1}));
  EXPECT_THROW(grad_check([] { return 0.0; }, ps, 0.5), ArgumentError);
}

TEST(GradCheck, LinearLayerWithXent) {
  Rng rng(11);
  const std::size_t in = 6, out = 5;
  std::vector<Param> ps;
  ps.emplace_back("w", randn({in, out}, 0.5, rng));
  ps.emplace_back("b", randn({out}, 0.5, rng));
  std::vector<Scalar> x(in);
  for (auto& v : x) v = static_cast<Scalar>(rng.normal());
  const std::size_t target = 2;
  auto f = [&] {
    std::vector<Scalar> logits(out);
    for (std::size_t o = 0; o < out; ++o) {
      double s = ps[1].value[o];
      for (std::size_t i = 0; i < in; ++i) s += x[i] * ps[0].value.at(i, o);
      logits[o] = static_cast<Scalar>(s);
    }
    const auto r = softmax_xent(logits, target);
    for (std::size_t o = 0; o < out; ++o) {
      ps[1].grad[o] += r.grad[o];
      for (std::size_t i = 0; i < in; ++i) ps[0].grad.at(i, o) += x[i] * r.grad[o];
    }
    return static_cast<double>(r.loss);
  };
  EXPECT_LT(grad_check(f, ps, 1e-3), 1e-3);
}

TEST(Rng, SeededDeterminism) {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    differs |= x != c.next_u64();
  }
  EXPECT_TRUE(differs);
  EXPECT_EQ(a.draws(), 100u);
}

TEST(Rng, UniformIntBounds) {
  Rng r(1);
  std::set<std::int64_t> seen;
  for (int i = 0; i < 2000; ++i) {
    const auto v = r.uniform_int(-2, 3);
    ASSERT_GE(v, -2);
    ASSERT_LE(v, 3);
    seen.insert(v);
  }
  EXPECT_EQ(seen.size(), 6u);
}

TEST(Multinomial, DegenerateSupport) {
  const std::vector<Scalar> w{1, 0, 0};
  for (std::uint64_t s = 0; s < 50; ++s) {
    Rng rng(s);
    EXPECT_EQ(multinomial_without_replacement<Scalar>(w, 1, rng), std::vector<std::size_t>{0});
  }
}

TEST(Multinomial, ExhaustiveDraw) {
  const std::vector<Scalar> w{1, 1, 1, 1};
  Rng rng(5);
  auto idx = multinomial_without_replacement<Scalar>(w, 4, rng);
  std::sort(idx.begin(), idx.end());
  EXPECT_EQ(idx, (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(Multinomial, FrequencyMatchesWeights) {
  const std::vector<Scalar> w{9, 1};
  std::size_t zeros = 0;
  const std::size_t trials = 100000;
  for (std::uint64_t s = 0; s < trials; ++s) {
    Rng rng(s);
    zeros += multinomial_without_replacement<Scalar>(w, 1, rng)[0] == 0;
  }
  EXPECT_NEAR(double(zeros) / trials, 0.9, 0.01);
}

TEST(Multinomial, Errors) {
  Rng rng(0);
  const std::vector<Scalar> w{1, 0, 2};
  EXPECT_THROW(multinomial_without_replacement<Scalar>(w, 3, rng), ArgumentError);
  const std::vector<Scalar> z{0, 0};
  EXPECT_THROW(multinomial_without_replacement<Scalar>(z, 1, rng), ArgumentError);
  const std::vector<Scalar> neg{1, -1};
  EXPECT_THROW(multinomial_without_replacement<Scalar>(neg, 1, rng), ArgumentError);
}

TEST(Multinomial, SameSeedSameDraw) {
  std::vector<Scalar> w(40);
  Rng g(9);
  for (auto& v : w) v = static_cast<Scalar>(g.uniform());
  Rng a(77), b(77);
  EXPECT_EQ(multinomial_without_replacement<Scalar>(w, 25, a), multinomial_without_replacement<Scalar>(w, 25, b));
}

TEST(Tensor, ShapeInvariant) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<Scalar>(5)), ArgumentError);
  EXPECT_THROW(Tensor({2, 0}), ArgumentError);
  Tensor t({2, 3});
  EXPECT_EQ(t.size(), 6u);
  t.at(1, 2) = 4;
  EXPECT_EQ(t.row(1)[2], 4);
  EXPECT_EQ(t.matrix()(1, 2), 4);
}

TEST(Param, ZeroGrad) {
  Param p("x", Tensor({3}, Scalar(1)));
  EXPECT_EQ(p.grad.shape(), p.value.shape());
  p.grad.fill(2);
  p.zero_grad();
  for (auto g : p.grad.values()) EXPECT_EQ(g, 0);
}

TEST(MomentumSgd, ClipsGlobalNorm) {
  std::vector<Param> ps;
  ps.emplace_back("a", Tensor({2}));
  ps[0].grad[0] = 3;
  ps[0].grad[1] = 4;
  MomentumSgd opt(1.0, 0.0, 1.0);
  EXPECT_NEAR(opt.step(ps), 5.0, 1e-9);
  EXPECT_NEAR(ps[0].value[0], -0.6, 1e-6);
  EXPECT_NEAR(ps[0].value[1], -0.8, 1e-6);
}
