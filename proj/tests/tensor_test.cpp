#include <gtest/gtest.h>

#include <vector>

#include "oracles.hpp"
#include "sgz/rng.hpp"
#include "sgz/tensor.hpp"

using sgz::ConvParams;
using sgz::Rng;
using sgz::Tensor;

TEST(TensorNew, ZeroFill) {
  Tensor t = Tensor::zeros({2, 2});
  ASSERT_EQ(t.size(), 4u);
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(t[i], 0.0f);
}

TEST(TensorNew, ConstantFill) {
  Tensor t = Tensor::full({3}, 1.5f);
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(t[i], 1.5f);
}

TEST(TensorNew, SeededUniformIsDeterministic) {
  Rng r1(7), r2(7);
  Tensor a = Tensor::uniform({4}, 0.0f, 1.0f, r1);
  Tensor b = Tensor::uniform({4}, 0.0f, 1.0f, r2);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i], b[i]);
    EXPECT_GE(a[i], 0.0f);
    EXPECT_LT(a[i], 1.0f);
  }
}

TEST(TensorNew, InvalidShapeRejected) {
  EXPECT_THROW(Tensor::zeros({}), sgz::ShapeError);
  EXPECT_THROW(Tensor::zeros({2, 0}), sgz::ShapeError);
  EXPECT_THROW(Tensor::zeros({-1}), sgz::ShapeError);
}

TEST(TensorReshape, PreservesCount) {
  Tensor t = Tensor::full({2, 3}, 2.0f);
  Tensor r = t.reshaped({6});
  EXPECT_EQ(r.shape(), (std::vector<int>{6}));
  EXPECT_THROW(t.reshaped({4}), sgz::ShapeError);
}

TEST(Matmul, IdentityTimesMatrix) {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor b({2, 2}, {3, 4, 5, 6});
  Tensor c = sgz::matmul(eye, b);
  EXPECT_EQ(c.at(0, 0), 3.0f);
  EXPECT_EQ(c.at(0, 1), 4.0f);
  EXPECT_EQ(c.at(1, 0), 5.0f);
  EXPECT_EQ(c.at(1, 1), 6.0f);
}

TEST(Matmul, RowTimesColumn) {
  Tensor a({1, 2}, {1, 2});
  Tensor b({2, 1}, {3, 4});
  Tensor c = sgz::matmul(a, b);
  ASSERT_EQ(c.size(), 1u);
  EXPECT_FLOAT_EQ(c[0], 11.0f);
}

TEST(Matmul, MatchesTripleLoopOracle) {
  Rng rng(11);
  Tensor a = Tensor::uniform({5, 7}, -1.0f, 1.0f, rng);
  Tensor b = Tensor::uniform({7, 3}, -1.0f, 1.0f, rng);
  Tensor c = sgz::matmul(a, b);
  std::vector<float> av(a.data(), a.data() + a.size());
  std::vector<float> bv(b.data(), b.data() + b.size());
  auto ref = oracle::matmul(av, bv, 5, 7, 3);
  for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(c[i], ref[i], 1e-5);
}

TEST(Matmul, DimensionMismatchRejected) {
  Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b({2, 2}, {1, 2, 3, 4});
  EXPECT_THROW(sgz::matmul(a, b), sgz::ShapeError);
}

TEST(Conv2d, HandComputedWindow) {
  Tensor in({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  ConvParams p{Tensor::full({1, 1, 2, 2}, 1.0f), Tensor::zeros({1}), 1, 0};
  Tensor out = sgz::conv2d(in, p);
  ASSERT_EQ(out.shape(), (std::vector<int>{1, 2, 2}));
  EXPECT_FLOAT_EQ(out.at(0, 0, 0), 12.0f);
  EXPECT_FLOAT_EQ(out.at(0, 0, 1), 16.0f);
  EXPECT_FLOAT_EQ(out.at(0, 1, 0), 24.0f);
  EXPECT_FLOAT_EQ(out.at(0, 1, 1), 28.0f);
}

TEST(Conv2d, UnitKernelIsIdentity) {
  Rng rng(3);
  Tensor in = Tensor::uniform({2, 4, 5}, -1.0f, 1.0f, rng);
  Tensor kernel = Tensor::zeros({2, 2, 1, 1});
  kernel.at(0, 0, 0, 0) = 1.0f;
  kernel.at(1, 1, 0, 0) = 1.0f;
  ConvParams p{kernel, Tensor::zeros({2}), 1, 0};
  Tensor out = sgz::conv2d(in, p);
  ASSERT_TRUE(out.same_shape(in));
  for (std::size_t i = 0; i < in.size(); ++i) EXPECT_FLOAT_EQ(out[i], in[i]);
}

TEST(Conv2d, ZeroKernelGivesBias) {
  Rng rng(4);
  Tensor in = Tensor::uniform({3, 5, 5}, -1.0f, 1.0f, rng);
  ConvParams p{Tensor::zeros({2, 3, 3, 3}), Tensor::full({2}, 0.75f), 1, 1};
  Tensor out = sgz::conv2d(in, p);
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_FLOAT_EQ(out[i], 0.75f);
}

TEST(Conv2d, MatchesBruteForceOracle) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Rng rng(seed);
    Tensor in = Tensor::uniform({3, 7, 6}, -1.0f, 1.0f, rng);
    Tensor kernel = Tensor::uniform({4, 3, 3, 3}, -1.0f, 1.0f, rng);
    Tensor bias = Tensor::uniform({4}, -1.0f, 1.0f, rng);
    for (int stride : {1, 2}) {
      for (int pad : {0, 1}) {
        ConvParams p{kernel, bias, stride, pad};
        Tensor got = sgz::conv2d(in, p);
        Tensor ref = oracle::conv2d(in, kernel, bias, stride, pad);
        ASSERT_TRUE(got.same_shape(ref));
        EXPECT_LT(oracle::max_rel_diff(got, ref), 1e-5);
      }
    }
  }
}

TEST(Conv2d, LinearityProperty) {
  Rng rng(9);
  Tensor x = Tensor::uniform({2, 6, 6}, -1.0f, 1.0f, rng);
  Tensor y = Tensor::uniform({2, 6, 6}, -1.0f, 1.0f, rng);
  Tensor kernel = Tensor::uniform({3, 2, 3, 3}, -1.0f, 1.0f, rng);
  ConvParams p{kernel, Tensor::zeros({3}), 1, 1};
  const float a = 0.7f, b = -1.3f;
  Tensor axby = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) axby[i] = a * x[i] + b * y[i];
  Tensor lhs = sgz::conv2d(axby, p);
  Tensor cx = sgz::conv2d(x, p), cy = sgz::conv2d(y, p);
  for (std::size_t i = 0; i < lhs.size(); ++i)
    EXPECT_NEAR(lhs[i], a * cx[i] + b * cy[i], 1e-4);
}

TEST(Conv2d, ShapeErrorsRejected) {
  Tensor in = Tensor::zeros({2, 3, 3});
  ConvParams wrong_ch{Tensor::zeros({1, 3, 2, 2}), Tensor::zeros({1}), 1, 0};
  EXPECT_THROW(sgz::conv2d(in, wrong_ch), sgz::ShapeError);
  ConvParams too_big{Tensor::zeros({1, 2, 5, 5}), Tensor::zeros({1}), 1, 0};
  EXPECT_THROW(sgz::conv2d(in, too_big), sgz::ShapeError);
}

TEST(MaxPool, HandComputedWindow) {
  Tensor in({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  auto r = sgz::maxpool2d(in, 2, 1);
  ASSERT_EQ(r.output.shape(), (std::vector<int>{1, 2, 2}));
  EXPECT_FLOAT_EQ(r.output.at(0, 0, 0), 5.0f);
  EXPECT_FLOAT_EQ(r.output.at(0, 0, 1), 6.0f);
  EXPECT_FLOAT_EQ(r.output.at(0, 1, 0), 8.0f);
  EXPECT_FLOAT_EQ(r.output.at(0, 1, 1), 9.0f);
}

TEST(MaxPool, ConstantInputTieRule) {
  Tensor in = Tensor::full({1, 4, 4}, 2.5f);
  auto r = sgz::maxpool2d(in, 2, 2);
  // First element of each window in row-major scan.
  EXPECT_EQ(r.argmax[0], 0);
  EXPECT_EQ(r.argmax[1], 2);
  EXPECT_EQ(r.argmax[2], 8);
  EXPECT_EQ(r.argmax[3], 10);
  for (std::size_t i = 0; i < r.output.size(); ++i)
    EXPECT_FLOAT_EQ(r.output[i], 2.5f);
}

TEST(MaxPool, UnitWindowIsIdentity) {
  Rng rng(5);
  Tensor in = Tensor::uniform({2, 3, 4}, -1.0f, 1.0f, rng);
  auto r = sgz::maxpool2d(in, 1, 1);
  ASSERT_TRUE(r.output.same_shape(in));
  for (std::size_t i = 0; i < in.size(); ++i) EXPECT_FLOAT_EQ(r.output[i], in[i]);
}

TEST(MaxPool, MatchesBruteForceOracle) {
  for (std::uint64_t seed : {21u, 22u, 23u}) {
    Rng rng(seed);
    Tensor in = Tensor::uniform({3, 8, 7}, -1.0f, 1.0f, rng);
    for (int window : {2, 3}) {
      for (int stride : {1, 2}) {
        for (int pad : {0, 1}) {
          auto got = sgz::maxpool2d(in, window, stride, pad);
          Tensor ref = oracle::maxpool(in, window, stride, pad);
          ASSERT_TRUE(got.output.same_shape(ref));
          EXPECT_LT(oracle::max_abs_diff(got.output, ref), 1e-6);
        }
      }
    }
  }
}

TEST(MaxPool, ArgmaxPointsAtSourceValue) {
  Rng rng(31);
  Tensor in = Tensor::uniform({2, 6, 6}, -1.0f, 1.0f, rng);
  auto r = sgz::maxpool2d(in, 3, 2, 1);
  for (std::size_t i = 0; i < r.output.size(); ++i) {
    ASSERT_GE(r.argmax[i], 0);
    EXPECT_FLOAT_EQ(in[static_cast<std::size_t>(r.argmax[i])], r.output[i]);
  }
}

TEST(MaxPool, OversizedWindowRejected) {
  Tensor in = Tensor::zeros({1, 2, 2});
  EXPECT_THROW(sgz::maxpool2d(in, 3, 1), sgz::ShapeError);
}

TEST(ConcatChannels, SingleInputIdentity) {
  Rng rng(6);
  Tensor in = Tensor::uniform({3, 2, 2}, -1.0f, 1.0f, rng);
  Tensor out = sgz::concat_channels({in});
  ASSERT_TRUE(out.same_shape(in));
  for (std::size_t i = 0; i < in.size(); ++i) EXPECT_FLOAT_EQ(out[i], in[i]);
}

TEST(ConcatChannels, ConstantBlocks) {
  Tensor ones = Tensor::full({1, 2, 2}, 1.0f);
  Tensor twos = Tensor::full({1, 2, 2}, 2.0f);
  Tensor out = sgz::concat_channels({ones, twos});
  ASSERT_EQ(out.shape(), (std::vector<int>{2, 2, 2}));
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x) {
      EXPECT_FLOAT_EQ(out.at(0, y, x), 1.0f);
      EXPECT_FLOAT_EQ(out.at(1, y, x), 2.0f);
    }
}

TEST(ConcatChannels, SlicesRecoverInputs) {
  Rng rng(77);
  std::vector<Tensor> inputs;
  for (int c : {2, 1, 3})
    inputs.push_back(Tensor::uniform({c, 4, 5}, -1.0f, 1.0f, rng));
  Tensor out = sgz::concat_channels(inputs);
  int c0 = 0;
  for (const auto& in : inputs) {
    for (int c = 0; c < in.dim(0); ++c)
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 5; ++x)
          EXPECT_FLOAT_EQ(out.at(c0 + c, y, x), in.at(c, y, x));
    c0 += in.dim(0);
  }
}

TEST(ConcatChannels, SpatialMismatchRejected) {
  EXPECT_THROW(
      sgz::concat_channels({Tensor::zeros({1, 2, 2}), Tensor::zeros({1, 3, 2})}),
      sgz::ShapeError);
}

TEST(AddElementwise, Identity) {
  Rng rng(8);
  Tensor a = Tensor::uniform({3, 2}, -1.0f, 1.0f, rng);
  Tensor out = sgz::add_elementwise(a, Tensor::zeros({3, 2}));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_FLOAT_EQ(out[i], a[i]);
}

TEST(AddElementwise, SmallExample) {
  Tensor a({2}, {1, 2});
  Tensor b({2}, {3, 4});
  Tensor out = sgz::add_elementwise(a, b);
  EXPECT_FLOAT_EQ(out[0], 4.0f);
  EXPECT_FLOAT_EQ(out[1], 6.0f);
}

TEST(AddElementwise, MatchesLoopOracle) {
  Rng rng(12);
  Tensor a = Tensor::uniform({4, 3, 2}, -5.0f, 5.0f, rng);
  Tensor b = Tensor::uniform({4, 3, 2}, -5.0f, 5.0f, rng);
  Tensor out = sgz::add_elementwise(a, b);
  for (std::size_t i = 0; i < out.size(); ++i)
    EXPECT_FLOAT_EQ(out[i], a[i] + b[i]);
}

TEST(AddElementwise, ShapeMismatchRejected) {
  EXPECT_THROW(
      sgz::add_elementwise(Tensor::zeros({2, 2}), Tensor::zeros({4})),
      sgz::ShapeError);
}
