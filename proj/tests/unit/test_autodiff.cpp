#include "ndlab/autodiff.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "test_util.hpp"

namespace ndlab::ad {
namespace {

using ndlab::testing::random_tensor;

TEST(AutodiffEval, MatmulIdentityReturnsOperand) {
  Graph g;
  Var i = g.input("i", {2, 2});
  Var x = g.input("x", {2, 2});
  g.set_output("y", matmul(i, x));
  const Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor xv = Tensor::from({2, 2}, {3.5, -1, 2, 7});
  auto out = eval(g, {{"i", eye}, {"x", xv}});
  EXPECT_TRUE(bit_identical(out.at("y"), xv));
}

TEST(AutodiffEval, SoftmaxOfEqualLogitsIsUniform) {
  Graph g;
  g.set_output("p", softmax(g.input("x", {2})));
  auto out = eval(g, {{"x", Tensor::from({2}, {0, 0})}});
  EXPECT_DOUBLE_EQ(out.at("p")[0], 0.5);
  EXPECT_DOUBLE_EQ(out.at("p")[1], 0.5);
}

TEST(AutodiffEval, SoftmaxSurvivesLargeLogits) {
  Graph g;
  g.set_output("p", softmax(g.input("x", {3})));
  auto out = eval(g, {{"x", Tensor::from({3}, {1000, 1000, -1000})}});
  EXPECT_DOUBLE_EQ(out.at("p")[0], 0.5);
  EXPECT_DOUBLE_EQ(out.at("p")[2], 0.0);
}

TEST(AutodiffEval, CrossEntropyDecreasesAsPeakSharpens) {
  Graph g;
  Var logits = g.input("logits", {1, 4});
  Var target = g.input("t", {1});
  g.set_output("ce", cross_entropy(logits, target));
  double prev = INFINITY;
  for (double peak : {0.5, 1.0, 2.0, 4.0, 8.0}) {
    auto out = eval(g, {{"logits", Tensor::from({1, 4}, {0, peak, 0, 0})},
                        {"t", Tensor::from({1}, {1})}});
    const double ce = out.at("ce").item();
    EXPECT_LT(ce, prev);
    prev = ce;
  }
}

TEST(AutodiffEval, ShapeMismatchReportsNode) {
  Graph g;
  Var a = g.input("a", {2, 3});
  Var b = g.input("b", {2, 3});
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_EQ(e.node(), 2u);
  }
  Graph g2;
  Var x = g2.input("x", {2, 2});
  g2.set_output("y", scale(x, 2.0));
  try {
    eval(g2, {{"x", Tensor({3, 2})}});
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_EQ(e.node(), 0u);
  }
}

TEST(AutodiffEval, TrailingBroadcastOnlyFromLeadingBatch) {
  Graph g;
  Var a = g.input("a", {4, 3});
  EXPECT_NO_THROW(a + g.input("row", {3}));
  EXPECT_THROW(a + g.input("col", {4}), ShapeError);
}

TEST(AutodiffEval, DeterministicBitIdentical) {
  std::mt19937_64 rng(7);
  Graph g;
  Var x = g.input("x", {5, 8});
  Var w = g.input("w", {8, 8});
  g.set_output("y", softmax(rms_norm(matmul(x, w))));
  Bindings b{{"x", random_tensor({5, 8}, rng)}, {"w", random_tensor({8, 8}, rng)}};
  EXPECT_TRUE(bit_identical(eval(g, b).at("y"), eval(g, b).at("y")));
}

TEST(AutodiffEval, SinglePrecisionRoundsThroughFloat) {
  Graph g(Precision::kSingle);
  g.set_output("y", scale(g.input("x", {1}), 1.0 / 3.0));
  const double y = eval(g, {{"x", Tensor::from({1}, {1.0})}}).at("y")[0];
  EXPECT_EQ(y, static_cast<double>(static_cast<float>(y)));
  EXPECT_NE(y, 1.0 / 3.0);
}

TEST(AutodiffBackward, SumGivesOnes) {
  Graph g;
  Var x = g.input("x", {3, 2}, true);
  Var loss = sum(x);
  std::mt19937_64 rng(1);
  Bindings b{{"x", random_tensor({3, 2}, rng)}};
  auto grads = backward(g, evaluate(g, b), loss);
  for (double v : grads.at("x").data()) EXPECT_EQ(v, 1.0);
}

TEST(AutodiffBackward, DotWithSelfGivesTwoX) {
  Graph g;
  Var x = g.input("x", {4}, true);
  Var loss = sum(x * x);
  std::mt19937_64 rng(2);
  Tensor xv = random_tensor({4}, rng);
  auto grads = backward(g, evaluate(g, {{"x", xv}}), loss);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(grads.at("x")[i], 2.0 * xv[i]);
}

TEST(AutodiffBackward, UnusedParameterGetsExactZero) {
  Graph g;
  Var x = g.input("x", {3}, true);
  g.input("unused", {2, 2}, true);
  Var loss = sum(exp(x));
  auto grads = backward(g, evaluate(g, {{"x", Tensor({3}, 0.5)}, {"unused", Tensor({2, 2}, 9.0)}}), loss);
  ASSERT_EQ(grads.count("unused"), 1u);
  for (double v : grads.at("unused").data()) EXPECT_EQ(v, 0.0);
}

TEST(AutodiffBackward, RejectsNonScalarLoss) {
  Graph g;
  Var x = g.input("x", {3}, true);
  Var y = scale(x, 2.0);
  auto ev = evaluate(g, {{"x", Tensor({3}, 1.0)}});
  EXPECT_THROW(backward(g, ev, y), std::invalid_argument);
}

TEST(GradCheck, LinearLossHasNoError) {
  Graph g;
  Var x = g.input("x", {6}, true);
  Var w = g.input("w", {6});
  Var loss = sum(x * w);
  std::mt19937_64 rng(3);
  auto r = finite_difference_check(g, {{"x", random_tensor({6}, rng)}, {"w", random_tensor({6}, rng)}},
                                   loss, "x");
  EXPECT_TRUE(r.pass);
  EXPECT_LT(r.max_rel_error, 1e-8);
  EXPECT_EQ(r.coordinates, 6u);
}

TEST(GradCheck, ArgmaxIsFlaggedNotSilent) {
  Graph g;
  Var x = g.input("x", {2, 5}, true);
  Var loss = sum(argmax(x)) + sum(x);
  std::mt19937_64 rng(4);
  auto r = finite_difference_check(g, {{"x", random_tensor({2, 5}, rng)}}, loss, "x");
  EXPECT_TRUE(r.nondifferentiable);
  EXPECT_FALSE(r.pass);
}

// One random instance per seed: loss = sum(op(inputs) * probe).
struct OpCase {
  const char* name;
  std::vector<std::pair<std::string, Shape>> inputs;
  std::function<Var(Graph&, std::vector<Var>&)> build;
  double input_offset = 0.0;
};

class OpGradient : public ::testing::TestWithParam<OpCase> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
  const OpCase& c = GetParam();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed * 7919 + 11);
    Graph g;
    std::vector<Var> vars;
    Bindings b;
    for (const auto& [name, shape] : c.inputs) {
      vars.push_back(g.input(name, shape, true));
      Tensor t = random_tensor(shape, rng);
      for (double& v : t.storage()) v += c.input_offset;
      b[name] = t;
    }
    Var y = c.build(g, vars);
    Var probe = g.input("probe", y.shape());
    b["probe"] = random_tensor(y.shape(), rng);
    Var loss = sum(y * probe);
    for (const auto& [name, shape] : c.inputs) {
      auto r = finite_difference_check(g, b, loss, name);
      EXPECT_TRUE(r.pass) << c.name << " seed " << seed << " input " << name
                          << " rel err " << r.max_rel_error;
    }
  }
}

INSTANTIATE_TEST_SUITE_P(
    Ops, OpGradient,
    ::testing::Values(
        OpCase{"matmul_shared", {{"a", {2, 3, 4}}, {"b", {4, 5}}},
               [](Graph&, std::vector<Var>& v) { return matmul(v[0], v[1]); }},
        OpCase{"matmul_batched", {{"a", {2, 3, 4}}, {"b", {2, 4, 2}}},
               [](Graph&, std::vector<Var>& v) { return matmul(v[0], v[1]); }},
        OpCase{"add_sub_mul_broadcast", {{"a", {3, 4}}, {"b", {4}}},
               [](Graph&, std::vector<Var>& v) { return (v[0] + v[1]) * v[1] - v[1]; }},
        OpCase{"scale_add_scalar", {{"a", {5}}},
               [](Graph&, std::vector<Var>& v) { return add_scalar(scale(v[0], -1.7), 0.3); }},
        OpCase{"transpose_permute_reshape", {{"a", {2, 3, 4}}},
               [](Graph&, std::vector<Var>& v) {
                 return reshape(permute(transpose(v[0]), {2, 0, 1}), {6, 4});
               }},
        OpCase{"broadcast_concat_slice", {{"a", {2, 3}}, {"b", {4, 2, 3}}},
               [](Graph&, std::vector<Var>& v) {
                 return slice(concat({broadcast_leading(v[0], 4), v[1]}, 1), 1, 1, 4);
               }},
        OpCase{"softmax", {{"a", {3, 5}}},
               [](Graph&, std::vector<Var>& v) { return softmax(v[0]); }},
        OpCase{"rms_norm", {{"a", {3, 6}}},
               [](Graph&, std::vector<Var>& v) { return rms_norm(v[0]); }},
        OpCase{"column_mean_variance", {{"a", {7, 3}}},
               [](Graph&, std::vector<Var>& v) {
                 Var c = v[0] - column_mean(v[0]);
                 return c * rsqrt_floor(column_mean(c * c), 1e-5);
               }},
        OpCase{"log_exp", {{"a", {4}}},
               [](Graph&, std::vector<Var>& v) { return log(add_scalar(exp(v[0]), 1.0)); }},
        OpCase{"silu_tanh", {{"a", {6}}},
               [](Graph&, std::vector<Var>& v) { return silu(v[0]) + tanh(v[0]); }},
        OpCase{"gather_table", {{"table", {5, 3}}},
               [](Graph& g, std::vector<Var>& v) {
                 Var ids = g.constant(Tensor::from({2, 2}, {0, 4, 4, 2}));
                 return gather(v[0], ids);
               }},
        OpCase{"cross_entropy", {{"logits", {2, 3, 6}}},
               [](Graph& g, std::vector<Var>& v) {
                 Var t = g.constant(Tensor::from({2, 3}, {0, 5, 2, 1, 1, 3}));
                 return reshape(cross_entropy(v[0], t), {1});
               }},
        OpCase{"frobenius_mean", {{"a", {3, 3}}},
               [](Graph&, std::vector<Var>& v) {
                 return reshape(frobenius_sq(v[0]) + mean(v[0]), {1});
               }}),
    [](const ::testing::TestParamInfo<OpCase>& info) { return std::string(info.param.name); });

}  // namespace
}  // namespace ndlab::ad
