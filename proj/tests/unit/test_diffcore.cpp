#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "saor/diffcore/diffcore.hpp"
#include "support/gradcheck.hpp"

using namespace saor;
using ad::Tensor;
using saor::testing::DTensor;
using saor::testing::grad_check;

namespace {

std::vector<double> random_values(ad::Rng& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

}  // namespace

TEST(Elementwise, AddAndRelu) {
  auto a = Tensor::constant({2}, {1, 2});
  auto b = Tensor::constant({2}, {3, 4});
  auto c = ad::add(a, b);
  EXPECT_EQ(c[0], 4.0f);
  EXPECT_EQ(c[1], 6.0f);
  auto r = ad::relu(Tensor::constant({3}, {-1, 0, 2}));
  EXPECT_EQ(std::vector<float>(r.values().begin(), r.values().end()), (std::vector<float>{0, 0, 2}));
}

TEST(Elementwise, TrailingBroadcast) {
  auto m = Tensor::constant({2, 3}, {1, 2, 3, 4, 5, 6});
  auto bias = Tensor::constant({3}, {10, 20, 30});
  auto out = ad::add(m, bias);
  EXPECT_EQ(out.shape(), (ad::Shape{2, 3}));
  EXPECT_EQ(out[4], 25.0f);
  auto col = Tensor::constant({2, 1}, {1, 2});
  auto out2 = ad::mul(m, col);
  EXPECT_EQ(out2[5], 12.0f);
}

TEST(Elementwise, ShapeMismatchNamesBothShapes) {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({4});
  try {
    ad::add(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(2,3)"), std::string::npos);
    EXPECT_NE(msg.find("(4)"), std::string::npos);
  }
}

TEST(Elementwise, SquareDerivativeMatchesFiniteDifference) {
  auto x = Tensor::variable({1}, {3.0f});
  auto y = ad::mul(x, x);
  ad::backward(y);
  const double fd = ((3.001 * 3.001) - (2.999 * 2.999)) / 0.002;
  EXPECT_NEAR(x.grad()[0], 6.0, 1e-5);
  EXPECT_NEAR(x.grad()[0], fd, 1e-4 * fd);
}

TEST(Elementwise, GradientsPassFiniteDifferences) {
  ad::Rng rng(7);
  const std::vector<ad::Binary> binary = {ad::Binary::Add, ad::Binary::Sub, ad::Binary::Mul, ad::Binary::Div};
  for (auto op : binary) {
    for (int trial = 0; trial < 10; ++trial) {
      auto a = random_values(rng, 6);
      auto b = random_values(rng, 3, 0.5, 2.0);
      auto r = grad_check([op](const std::vector<DTensor>& in) {
        return ad::sum(ad::mul(ad::elementwise(op, in[0], in[1]), in[0]));
      }, {{2, 3}, {3}}, {a, b});
      EXPECT_LT(r.rel_error, 1e-3) << "binary op " << static_cast<int>(op);
    }
  }
  const std::vector<ad::Unary> unary = {ad::Unary::Relu, ad::Unary::Tanh, ad::Unary::Sigmoid, ad::Unary::Exp,
                                        ad::Unary::Log, ad::Unary::Abs, ad::Unary::Square, ad::Unary::Sqrt};
  for (auto op : unary) {
    for (int trial = 0; trial < 10; ++trial) {
      auto a = random_values(rng, 5, 0.2, 2.0);
      if (op == ad::Unary::Relu || op == ad::Unary::Abs || op == ad::Unary::Tanh) {
        // Keep away from the kink at zero.
        for (auto& x : a) x = (rng.uniform() < 0.5 ? -1 : 1) * x;
      }
      auto r = grad_check([op](const std::vector<DTensor>& in) {
        return ad::sum(ad::mul(ad::elementwise(op, in[0]), in[0]));
      }, {{5}}, {a});
      EXPECT_LT(r.rel_error, 1e-3) << "unary op " << static_cast<int>(op);
    }
  }
}

TEST(Matmul, IdentityAndHandArithmetic) {
  auto I = Tensor::constant({2, 2}, {1, 0, 0, 1});
  auto A = Tensor::constant({2, 2}, {1, 2, 3, 4});
  auto P = ad::matmul(I, A);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(P[i], A[i]);
  auto r = ad::matmul(Tensor::constant({1, 2}, {1, 2}), Tensor::constant({2, 1}, {3, 4}));
  EXPECT_EQ(r.item(), 11.0f);
  EXPECT_THROW(ad::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
}

TEST(Matmul, GradientOfSumIsOnesTimesBTransposed) {
  ad::Rng rng(3);
  std::vector<float> b(12);
  for (auto& x : b) x = static_cast<float>(rng.uniform(-1, 1));
  auto A = Tensor::variable({2, 3}, {1, 2, 3, 4, 5, 6});
  auto B = Tensor::constant({3, 4}, b);
  ad::backward(ad::sum(ad::matmul(A, B)));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t k = 0; k < 3; ++k) {
      float expected = 0;
      for (std::size_t j = 0; j < 4; ++j) expected += b[k * 4 + j];
      EXPECT_NEAR(A.grad()[i * 3 + k], expected, 1e-5);
    }
  for (int trial = 0; trial < 10; ++trial) {
    auto r = grad_check([](const std::vector<DTensor>& in) {
      return ad::sum(ad::square(ad::matmul(in[0], in[1])));
    }, {{3, 4}, {4, 2}}, {random_values(rng, 12), random_values(rng, 8)});
    EXPECT_LT(r.rel_error, 1e-3);
  }
}

TEST(Conv2d, IdentityKernelAndBox) {
  ad::Rng rng(11);
  std::vector<float> img(2 * 5 * 6);
  for (auto& v : img) v = static_cast<float>(rng.uniform());
  std::vector<float> k(2 * 2 * 9, 0.0f);
  k[(0 * 2 + 0) * 9 + 4] = 1.0f;
  k[(1 * 2 + 1) * 9 + 4] = 1.0f;
  auto out = ad::conv2d(Tensor::constant({2, 5, 6}, img), Tensor::constant({2, 2, 3, 3}, k));
  ASSERT_EQ(out.shape(), (ad::Shape{2, 5, 6}));
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_EQ(out[i], img[i]);

  auto box = ad::conv2d(Tensor::full({1, 6, 6}, 2.0f), Tensor::full({1, 1, 3, 3}, 1.0f));
  for (std::size_t y = 1; y < 5; ++y)
    for (std::size_t x = 1; x < 5; ++x) EXPECT_FLOAT_EQ(box[y * 6 + x], 18.0f);
  EXPECT_FLOAT_EQ(box[0], 8.0f);  // corner sees 4 taps

  EXPECT_THROW(ad::conv2d(Tensor::zeros({3, 4, 4}), Tensor::zeros({2, 2, 3, 3})), ShapeError);
}

TEST(Conv2d, GradientsPassFiniteDifferences) {
  ad::Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    auto r = grad_check([](const std::vector<DTensor>& in) {
      return ad::sum(ad::square(ad::conv2d(in[0], in[1], in[2])));
    }, {{1, 4, 4}, {2, 1, 3, 3}, {2}},
       {random_values(rng, 16), random_values(rng, 18), random_values(rng, 2)});
    EXPECT_LT(r.rel_error, 1e-3);
  }
}

TEST(Upsample, ReplicatesAndSumsBack) {
  auto one = ad::upsample_nearest2(Tensor::constant({1, 1, 1}, {1}));
  EXPECT_EQ(one.shape(), (ad::Shape{1, 2, 2}));
  for (int i = 0; i < 4; ++i) EXPECT_EQ(one[i], 1.0f);
  EXPECT_EQ(ad::upsample_nearest2(Tensor::zeros({16, 4, 4})).shape(), (ad::Shape{16, 8, 8}));

  auto x = Tensor::variable({2, 3, 3}, std::vector<float>(18, 0.5f));
  ad::backward(ad::sum(ad::upsample_nearest2(x)));
  for (float g : x.grad()) EXPECT_EQ(g, 4.0f);

  ad::Rng rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    auto r = grad_check([](const std::vector<DTensor>& in) {
      return ad::sum(ad::square(ad::upsample_nearest2(in[0])));
    }, {{2, 2, 3}}, {random_values(rng, 12)});
    EXPECT_LT(r.rel_error, 1e-3);
  }
}

TEST(Softmax, UniformStableAndNormalized) {
  auto s = ad::softmax(Tensor::constant({3}, {0, 0, 0}), 0);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(s[i], 1.0 / 3.0, 1e-7);
  auto big = ad::softmax(Tensor::constant({2}, {1000, 0}), 0);
  EXPECT_TRUE(std::isfinite(big[0]));
  EXPECT_NEAR(big[0], 1.0, 1e-7);
  EXPECT_NEAR(big[1], 0.0, 1e-7);

  ad::Rng rng(1);
  std::vector<float> v(40 * 7);
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1000, 1000));
  auto rows = ad::softmax(Tensor::constant({40, 7}, v), 1);
  for (std::size_t r = 0; r < 40; ++r) {
    double total = 0;
    for (std::size_t k = 0; k < 7; ++k) total += rows[r * 7 + k];
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(Softmax, GradientsPassFiniteDifferences) {
  ad::Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    auto w = random_values(rng, 12);
    auto r = grad_check([w](const std::vector<DTensor>& in) {
      auto weights = DTensor::constant({3, 4}, w);
      return ad::sum(ad::mul(ad::softmax(in[0], 1), weights));
    }, {{3, 4}}, {random_values(rng, 12, -3, 3)});
    EXPECT_LT(r.rel_error, 1e-3);
    auto r2 = grad_check([w](const std::vector<DTensor>& in) {
      auto weights = DTensor::constant({3, 4}, w);
      return ad::sum(ad::mul(ad::log_softmax(in[0], 0), weights));
    }, {{3, 4}}, {random_values(rng, 12, -3, 3)});
    EXPECT_LT(r2.rel_error, 1e-3);
  }
}

TEST(Reduce, SumAndMeanAlongAxis) {
  auto m = Tensor::constant({2, 3}, {1, 2, 3, 4, 5, 6});
  auto s0 = ad::reduce(ad::Reduce::Sum, m, 0);
  EXPECT_EQ(s0.shape(), (ad::Shape{3}));
  EXPECT_EQ(s0[2], 9.0f);
  auto m1 = ad::reduce(ad::Reduce::Mean, m, 1);
  EXPECT_EQ(m1[1], 5.0f);
  ad::Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    auto r = grad_check([](const std::vector<DTensor>& in) {
      return ad::sum(ad::square(ad::reduce(ad::Reduce::Mean, in[0], 1)));
    }, {{2, 3, 2}}, {random_values(rng, 12)});
    EXPECT_LT(r.rel_error, 1e-3);
  }
}

TEST(Backward, OnesDisconnectedAndAccumulation) {
  auto p = Tensor::variable({3}, {1, 2, 3});
  auto q = Tensor::variable({2}, {1, 1});
  auto loss = ad::sum(p);
  ad::backward(loss);
  for (float g : p.grad()) EXPECT_EQ(g, 1.0f);
  EXPECT_FALSE(q.has_grad());  // disconnected -> zero (never written)
  ad::backward(loss);
  for (float g : p.grad()) EXPECT_EQ(g, 2.0f);
  EXPECT_THROW(ad::backward(p), ShapeError);
}

TEST(Backward, TapeIsTopologicalAndVisitsOnce) {
  auto x = Tensor::variable({2}, {1, 2});
  auto y = ad::mul(x, x);
  auto z = ad::add(y, y);  // diamond
  auto loss = ad::sum(ad::add(z, x));
  const auto tape = ad::Tape<float>::record(loss);
  std::vector<const ad::Node<float>*> seen;
  for (auto* n : tape.nodes()) {
    for (const auto& parent : n->parents) {
      if (!parent->requires_grad) continue;
      EXPECT_NE(std::find(seen.begin(), seen.end(), parent.get()), seen.end()) << "input after consumer";
    }
    EXPECT_EQ(std::find(seen.begin(), seen.end(), n), seen.end()) << "visited twice";
    seen.push_back(n);
  }
  ad::backward(loss);
  EXPECT_FLOAT_EQ(x.grad()[1], 4 * 2 + 1);
}

TEST(Adam, SingleStepOnSquare) {
  ad::ParamStore<float> store;
  auto x = store.add("x", {1}, {1.0f});
  ad::backward(ad::mul(x, x));
  ad::AdamConfig cfg;
  cfg.lr = 0.1;
  store.adam_step(cfg);
  EXPECT_NEAR(store.get("x")[0], 0.9, 1e-6);
  EXPECT_FALSE(store.get("x").has_grad());
}

TEST(Adam, ZeroOrMissingGradientLeavesParameter) {
  ad::ParamStore<float> store;
  auto a = store.add("a", {2}, {0.5f, -0.5f});
  auto b = store.add("b", {1}, {3.0f});
  ad::backward(ad::mul(ad::sum(a), Tensor::scalar(0.0f)));
  EXPECT_EQ(store.adam_step({}), 1u);  // b skipped
  EXPECT_EQ(store.get("a")[0], 0.5f);
  EXPECT_EQ(store.get("a")[1], -0.5f);
  EXPECT_EQ(store.get("b")[0], 3.0f);
  EXPECT_DOUBLE_EQ(ad::AdamConfig{}.lr, 1e-4);
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
  ad::ParamStore<float> store;
  ad::Rng rng(42);
  store.add_kaiming("enc/w", {4, 3}, 3, rng);
  store.add_zeros("enc/b", {4});
  ad::backward(ad::sum(ad::square(store.get("enc/w"))));
  store.adam_step({});
  const auto path = (std::filesystem::temp_directory_path() / "saor_ckpt_test.bin").string();
  ad::save_checkpoint(store, path, "{\"epoch\":3}");

  ad::ParamStore<float> other;
  ad::Rng rng2(1);
  other.add_kaiming("enc/w", {4, 3}, 3, rng2);
  other.add_zeros("enc/b", {4});
  EXPECT_EQ(ad::load_checkpoint(other, path), "{\"epoch\":3}");
  EXPECT_EQ(ad::serialize_checkpoint(other, "{\"epoch\":3}"), ad::serialize_checkpoint(store, "{\"epoch\":3}"));

  ad::ParamStore<float> wrong;
  wrong.add_zeros("enc/w", {3, 4});
  wrong.add_zeros("enc/b", {4});
  EXPECT_THROW(ad::load_checkpoint(wrong, path), IoError);
  std::filesystem::remove(path);
}

TEST(Determinism, RepeatedEvaluationIsBitwiseIdentical) {
  auto run = [] {
    ad::ParamStore<float> store;
    ad::Rng rng(123);
    auto w = store.add_kaiming("w", {2, 3, 3, 3}, 27, rng);
    std::vector<float> img(3 * 8 * 8);
    for (auto& v : img) v = static_cast<float>(rng.uniform());
    auto y = ad::conv2d(Tensor::constant({3, 8, 8}, img), w);
    return ad::mean(ad::square(ad::tanh(y))).item();
  };
  const float first = run();
  for (int i = 0; i < 5; ++i) EXPECT_EQ(run(), first);
}
