#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "test_util.hpp"
#include "vqg/autograd.hpp"
#include "vqg/checks.hpp"
#include "vqg/gradcheck.hpp"

using namespace vqg;
using vqg::test::random_tensor;

namespace {

constexpr double kOpTolerance = 1e-4;
constexpr int kSeeds = 50;

}  // namespace

TEST(Tensor, ShapeAndIndexing) {
  Tensor t({2, 3});
  EXPECT_EQ(t.size(), 6u);
  t.at({1, 2}) = 4.0;
  EXPECT_EQ(t[5], 4.0);
  EXPECT_THROW(t.at({2, 0}), std::out_of_range);
  EXPECT_THROW(Tensor({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
  EXPECT_EQ(Tensor::scalar(3.5).item(), 3.5);
  EXPECT_THROW(t.item(), ShapeError);
}

TEST(Ops, MatmulIdentity) {
  std::mt19937_64 rng(3);
  Tensor eye({3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye.at({i, i}) = 1.0;
  const Tensor x = random_tensor({3, 5}, rng);
  EXPECT_EQ(matmul(Value::constant(eye), Value::constant(x)).data(), x);
}

TEST(Ops, SoftmaxOfZerosIsUniform) {
  const Value y = softmax(Value::constant(Tensor::vector({0, 0, 0, 0, 0})), 0);
  for (double v : y.data().data()) EXPECT_DOUBLE_EQ(v, 0.2);
}

TEST(Ops, SoftmaxIsStableForLargeInputs) {
  const Value y = softmax(Value::constant(Tensor::vector({1000.0, 1000.0, -1000.0})), 0);
  EXPECT_DOUBLE_EQ(y.data()[0], 0.5);
  EXPECT_DOUBLE_EQ(y.data()[1], 0.5);
  EXPECT_EQ(y.data()[2], 0.0);
}

TEST(Ops, Relu) {
  const Value y = relu(Value::constant(Tensor::vector({-1.5, 0.0, 2.5})));
  EXPECT_EQ(y.data(), Tensor::vector({0.0, 0.0, 2.5}));
}

TEST(Ops, InputsAreNotMutated) {
  std::mt19937_64 rng(5);
  const Tensor a = random_tensor({2, 3}, rng);
  const Value va = Value::parameter(a);
  backward(sum_all(softmax(scale(va, 2.0), 1)));
  EXPECT_EQ(va.data(), a);
}

TEST(Ops, ShapeMismatchNamesOpAndShapes) {
  try {
    add(Value::constant(Tensor({2, 3})), Value::constant(Tensor({3, 2})));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos);
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[3x2]"), std::string::npos) << msg;
  }
  EXPECT_THROW(matmul(Value::constant(Tensor({2, 3})), Value::constant(Tensor({2, 3}))),
               ShapeError);
}

TEST(Ops, NonFiniteInputIsRejected) {
  const Value bad = Value::constant(Tensor::vector({1.0, std::nan("")}));
  EXPECT_THROW(relu(bad), NonFiniteError);
  EXPECT_THROW(sum_all(bad), NonFiniteError);
  EXPECT_THROW(log(Value::constant(Tensor::vector({0.0}))), NonFiniteError);
}

TEST(Backward, SumGivesOnes) {
  std::mt19937_64 rng(1);
  Value x = Value::parameter(random_tensor({2, 3, 4}, rng));
  backward(sum_all(x));
  EXPECT_EQ(x.grad(), Tensor::full({2, 3, 4}, 1.0));
}

TEST(Backward, ReluSubgradient) {
  Value x = Value::parameter(Tensor::vector({-1.0, 2.0}));
  backward(sum_all(relu(x)));
  EXPECT_EQ(x.grad(), Tensor::vector({0.0, 1.0}));
}

TEST(Backward, SigmoidAtZero) {
  Value x = Value::parameter(Tensor::vector({0.0}));
  backward(mean_all(sigmoid(x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.25);
}

TEST(Backward, AccumulatesAcrossUses) {
  Value x = Value::parameter(Tensor::vector({3.0, -2.0}));
  // Diamond: x feeds two branches that meet again.
  backward(sum_all(add(mul(x, x), scale(x, 4.0))));
  EXPECT_EQ(x.grad(), Tensor::vector({10.0, 0.0}));
  backward(sum_all(x));
  EXPECT_EQ(x.grad(), Tensor::vector({11.0, 1.0}));
  x.zero_grad();
  EXPECT_FALSE(x.has_grad());
}

TEST(Backward, MaxRoutesToFirstMaximalIndex) {
  Value x = Value::parameter(Tensor::vector({1.0, 5.0, 5.0, 2.0}));
  backward(sum_all(max(x, 0)));
  EXPECT_EQ(x.grad(), Tensor::vector({0.0, 1.0, 0.0, 0.0}));
}

TEST(Backward, GradShapeMatchesOutput) {
  std::mt19937_64 rng(2);
  Value a = Value::parameter(random_tensor({2, 3, 4}, rng));
  Value w = Value::parameter(random_tensor({4, 5}, rng));
  backward(mean_all(matmul(a, w)));
  EXPECT_EQ(a.grad().shape(), a.shape());
  EXPECT_EQ(w.grad().shape(), w.shape());
}

TEST(Backward, ConstantsReceiveNoGradient) {
  Value c = Value::constant(Tensor::vector({1.0, 2.0}));
  Value p = Value::parameter(Tensor::vector({3.0, 4.0}));
  const auto reached = backward(sum_all(mul(c, p)));
  ASSERT_EQ(reached.size(), 1u);
  EXPECT_TRUE(reached.front().same_node(p));
  EXPECT_FALSE(c.has_grad());
}

TEST(Backward, NonScalarRootIsRejected) {
  Value x = Value::parameter(Tensor::vector({1.0, 2.0}));
  EXPECT_THROW(backward(relu(x)), ShapeError);
}

TEST(Backward, MissingRuleIsRejected) {
  Value x = Value::parameter(Tensor::vector({1.0}));
  Value y = Value::from_op("opaque", Tensor::scalar(1.0), {x}, nullptr);
  EXPECT_THROW(backward(y), std::logic_error);
}

TEST(Reductions, MatchNaiveLoopsExactly) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = random_tensor({3, 4, 5}, rng, -10.0, 10.0);
    const Value v = Value::constant(x);
    const std::size_t dims[3] = {3, 4, 5};
    for (std::size_t axis = 0; axis < 3; ++axis) {
      const Tensor s = sum(v, axis).data();
      const Tensor m = mean(v, axis).data();
      const Tensor mx = max(v, axis).data();
      std::size_t k = 0;
      for (std::size_t i = 0; i < dims[0]; ++i) {
        for (std::size_t j = 0; j < dims[1]; ++j) {
          for (std::size_t l = 0; l < dims[2]; ++l) {
            const std::size_t idx[3] = {i, j, l};
            if (idx[axis] != 0) continue;
            double acc = 0.0;
            double best = -INFINITY;
            for (std::size_t r = 0; r < dims[axis]; ++r) {
              std::size_t at[3] = {i, j, l};
              at[axis] = r;
              const double e = x.at({at[0], at[1], at[2]});
              acc += e;
              best = std::max(best, e);
            }
            EXPECT_EQ(s[k], acc);
            EXPECT_EQ(m[k], acc / static_cast<double>(dims[axis]));
            EXPECT_EQ(mx[k], best);
            ++k;
          }
        }
      }
    }
    double total = 0.0;
    for (double e : x.data()) total += e;
    EXPECT_EQ(sum_all(v).item(), total);
    EXPECT_EQ(mean_all(v).item(), total / static_cast<double>(x.size()));
  }
}

TEST(Gradcheck, SumOfSquares) {
  const GradcheckReport r = gradcheck(
      [](LeafFactory& f) {
        const Value x = f.leaf({3, 3});
        return sum_all(mul(x, x));
      },
      7);
  EXPECT_EQ(r.entries_checked, 9u);
  EXPECT_LE(r.max_rel_error, 1e-6);
}

TEST(Gradcheck, ConstantBuilderHasZeroError) {
  const GradcheckReport r =
      gradcheck([](LeafFactory&) { return Value::constant(Tensor::scalar(2.0)); }, 1);
  EXPECT_EQ(r.max_rel_error, 0.0);
  EXPECT_EQ(r.entries_checked, 0u);
}

TEST(Gradcheck, DetectsAWrongRule) {
  const GradcheckReport r = gradcheck(
      [](LeafFactory& f) {
        Value x = f.leaf({4});
        Tensor out = x.data();
        for (double& v : out.data()) v = v * v;
        Value y = Value::from_op("bad_square", out, {x}, [](detail::Node& self) {
          auto& g = self.parents[0]->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];  // should be 2x
        });
        return sum_all(y);
      },
      3);
  EXPECT_GT(r.max_rel_error, 1e-2);
}

class OpGradcheck : public ::testing::TestWithParam<std::size_t> {};

TEST_P(OpGradcheck, FiftySeeds) {
  const NamedCheck& check = op_checks().at(GetParam());
  double worst = 0.0;
  for (int seed = 1; seed <= kSeeds; ++seed) {
    const GradcheckReport r = gradcheck(check.build, static_cast<std::uint64_t>(seed));
    ASSERT_GT(r.entries_checked, 0u) << check.name;
    worst = std::max(worst, r.max_rel_error);
  }
  EXPECT_LE(worst, kOpTolerance) << check.name;
}

INSTANTIATE_TEST_SUITE_P(
    AllOps, OpGradcheck, ::testing::Range<std::size_t>(0, op_checks().size()),
    [](const ::testing::TestParamInfo<std::size_t>& info) {
      return op_checks().at(info.param).name;
    });

TEST(Determinism, IdenticalSeedsGiveIdenticalOutputs) {
  auto run = [] {
    std::mt19937_64 rng(99);
    const Value a = Value::constant(random_tensor({2, 3, 4}, rng));
    const Value w = Value::constant(random_tensor({4, 4}, rng));
    return softmax(matmul(a, w), 2).data();
  };
  EXPECT_EQ(run(), run());
}
