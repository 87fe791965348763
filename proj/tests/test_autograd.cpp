#include <algorithm>
#include <cmath>
#include <memory>

#include "doctest.h"
#include "rsfm/autograd.hpp"
#include "rsfm/kernels.hpp"
#include "test_support.hpp"

using namespace rsfm;
using rsfm::testing::op_gradient_error;
using rsfm::testing::random_tensor;
using V = Var<double>;
using VV = std::vector<V>;

TEST_CASE("linear gradients") {
  Rng rng(1);
  double err = op_gradient_error({random_tensor({2, 3, 5}, rng), random_tensor({4, 5}, rng), random_tensor({4}, rng)},
                                 [](const VV& v) { return ag::linear(v[0], v[1], v[2]); });
  CHECK(err < 1e-6);
  err = op_gradient_error({random_tensor({3, 5}, rng), random_tensor({2, 5}, rng)},
                          [](const VV& v) { return ag::linear(v[0], v[1], V()); });
  CHECK(err < 1e-6);
}

TEST_CASE("elementwise gradients") {
  Rng rng(2);
  auto a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
  CHECK(op_gradient_error({a, b}, [](const VV& v) { return ag::add(v[0], v[1]); }) < 1e-6);
  CHECK(op_gradient_error({a, b}, [](const VV& v) { return ag::sub(v[0], v[1]); }) < 1e-6);
  CHECK(op_gradient_error({a, b}, [](const VV& v) { return ag::mul(v[0], v[1]); }) < 1e-6);
  CHECK(op_gradient_error({a, b}, [](const VV& v) { return ag::abs_diff(v[0], v[1]); }) < 1e-6);
  CHECK(op_gradient_error({a}, [](const VV& v) { return ag::gelu(v[0]); }) < 1e-6);
  CHECK(op_gradient_error({a}, [](const VV& v) { return ag::scale(v[0], 2.5); }) < 1e-6);
  CHECK(op_gradient_error({a}, [](const VV& v) { return ag::sum(v[0]); }) < 1e-6);
}

TEST_CASE("layer norm gradients") {
  Rng rng(3);
  double err = op_gradient_error({random_tensor({4, 6}, rng), random_tensor({6}, rng), random_tensor({6}, rng)},
                                 [](const VV& v) { return ag::layer_norm(v[0], v[1], v[2]); });
  CHECK(err < 1e-5);
}

TEST_CASE("gather, concat, mean, resize, reshape gradients") {
  Rng rng(4);
  auto idx = std::make_shared<std::vector<std::int64_t>>(std::vector<std::int64_t>{3, 0, -1, 3, 5, 1, 2, 2});
  CHECK(op_gradient_error({random_tensor({6}, rng)}, [idx](const VV& v) { return ag::gather(v[0], idx, {2, 4}); }) <
        1e-6);
  CHECK(op_gradient_error({random_tensor({2, 3, 2}, rng), random_tensor({2, 3, 4}, rng)},
                          [](const VV& v) { return ag::concat_last(VV{v[0], v[1]}); }) < 1e-6);
  CHECK(op_gradient_error({random_tensor({2, 3, 4}, rng)},
                          [](const VV& v) { return ag::mean_middle(v[0], 2, 3, 4, {2, 4}); }) < 1e-6);
  CHECK(op_gradient_error({random_tensor({2, 3, 2, 3}, rng)},
                          [](const VV& v) { return ag::resize_bilinear(v[0], 7, 5); }) < 1e-6);
  CHECK(op_gradient_error({random_tensor({2, 6}, rng)}, [](const VV& v) { return ag::reshape(v[0], {3, 4}); }) <
        1e-6);
}

TEST_CASE("masked row fill routes gradients to the token") {
  Rng rng(5);
  std::vector<std::uint8_t> masked{1, 0, 1, 0};
  double err = op_gradient_error({random_tensor({4, 3}, rng), random_tensor({3}, rng)},
                                 [masked](const VV& v) { return ag::fill_masked_rows(v[0], masked, v[1]); });
  CHECK(err < 1e-6);
}

TEST_CASE("attention gradients with bias and mask") {
  Rng rng(6);
  kernels::AttentionShape s{4, 5, 2, 3, 2};
  Tensor<double> mask(Shape{2, 5, 5});
  mask.at(1, 0, 4) = -std::numeric_limits<double>::infinity();
  mask.at(1, 2, 3) = -std::numeric_limits<double>::infinity();
  double err = op_gradient_error({random_tensor({4, 5, 18}, rng), random_tensor({2, 5, 5}, rng)},
                                 [&](const VV& v) { return ag::attention(v[0], v[1], mask, s); });
  CHECK(err < 1e-5);
}

TEST_CASE("cross entropy gradients") {
  Rng rng(7);
  std::vector<std::int32_t> labels{0, 2, 1, -1, 2, 0};
  CHECK(op_gradient_error({random_tensor({2, 3, 3}, rng)},
                          [&](const VV& v) { return ag::cross_entropy(v[0], labels); }) < 1e-6);
  std::vector<double> w{0.5, 2.0, 1.0};
  CHECK(op_gradient_error({random_tensor({2, 3, 3}, rng)},
                          [&](const VV& v) { return ag::cross_entropy(v[0], labels, w); }) < 1e-6);
}

TEST_CASE("no-grad guard records no graph") {
  V a(Tensor<double>({2}, 1.0), true);
  NoGradGuard guard;
  V b = ag::scale(a, 2.0);
  CHECK_FALSE(b.requires_grad());
}

TEST_CASE("parallel kernels agree with serial references") {
  Rng rng(8);
  const Index M = 37, K = 19, N = 11;
  auto x = random_tensor({M, K}, rng), w = random_tensor({N, K}, rng), b = random_tensor({N}, rng);
  Tensor<double> y1({M, N}), y2({M, N});
  kernels::linear_forward(x.data(), w.data(), b.data(), y1.data(), M, K, N);
  kernels::serial::linear_forward(x.data(), w.data(), b.data(), y2.data(), M, K, N);
  CHECK(rsfm::testing::max_abs_diff(y1, y2) < 1e-12);

  auto dy = random_tensor({M, N}, rng);
  Tensor<double> dx1({M, K}), dx2({M, K}), dw1({N, K}), dw2({N, K}), db1({N}), db2({N});
  kernels::linear_backward_input(dy.data(), w.data(), dx1.data(), M, K, N);
  kernels::serial::linear_backward_input(dy.data(), w.data(), dx2.data(), M, K, N);
  kernels::linear_backward_params(dy.data(), x.data(), dw1.data(), db1.data(), M, K, N);
  kernels::serial::linear_backward_params(dy.data(), x.data(), dw2.data(), db2.data(), M, K, N);
  CHECK(rsfm::testing::max_abs_diff(dx1, dx2) < 1e-12);
  CHECK(rsfm::testing::max_abs_diff(dw1, dw2) < 1e-12);
  CHECK(rsfm::testing::max_abs_diff(db1, db2) < 1e-12);

  kernels::AttentionShape s{6, 9, 3, 4, 3};
  auto qkv = random_tensor({6, 9, 36}, rng), bias = random_tensor({3, 9, 9}, rng), mask = random_tensor({3, 9, 9}, rng);
  Tensor<double> o1({6, 9, 12}), o2({6, 9, 12}), p1({6, 3, 9, 9}), p2({6, 3, 9, 9});
  kernels::attention_forward(qkv.data(), bias.data(), mask.data(), o1.data(), p1.data(), s, 0.5);
  kernels::serial::attention_forward(qkv.data(), bias.data(), mask.data(), o2.data(), p2.data(), s, 0.5);
  CHECK(rsfm::testing::max_abs_diff(o1, o2) < 1e-12);
  CHECK(rsfm::testing::max_abs_diff(p1, p2) < 1e-12);
  auto dout = random_tensor({6, 9, 12}, rng);
  Tensor<double> dq1(qkv.shape()), dq2(qkv.shape()), dbias1({3, 9, 9}), dbias2({3, 9, 9});
  kernels::attention_backward(qkv.data(), p1.data(), dout.data(), dq1.data(), dbias1.data(), s, 0.5);
  kernels::serial::attention_backward(qkv.data(), p2.data(), dout.data(), dq2.data(), dbias2.data(), s, 0.5);
  CHECK(rsfm::testing::max_abs_diff(dq1, dq2) < 1e-12);
  CHECK(rsfm::testing::max_abs_diff(dbias1, dbias2) < 1e-12);

  auto g = random_tensor({K}, rng), be = random_tensor({K}, rng);
  Tensor<double> ly1({M, K}), ly2({M, K}), h1({M, K}), h2({M, K}), r1({M}), r2({M});
  kernels::layer_norm_forward(x.data(), g.data(), be.data(), ly1.data(), h1.data(), r1.data(), M, K, 1e-5);
  kernels::serial::layer_norm_forward(x.data(), g.data(), be.data(), ly2.data(), h2.data(), r2.data(), M, K, 1e-5);
  CHECK(rsfm::testing::max_abs_diff(ly1, ly2) < 1e-12);
}

TEST_CASE("float gelu kernel tracks the exact form") {
  std::vector<float> xf;
  for (int i = -40000; i <= 40000; ++i) xf.push_back(static_cast<float>(i) * 2.5e-4f);
  for (float v : {-100.0f, -30.0f, -9.0f, 9.0f, 30.0f, 100.0f}) xf.push_back(v);
  const Index n = static_cast<Index>(xf.size());
  std::vector<float> yf(xf.size()), df(xf.size());
  kernels::gelu_forward(xf.data(), yf.data(), df.data(), n);
  std::vector<double> xd(xf.begin(), xf.end()), yd(xd.size()), dd(xd.size()), ys(xd.size()), ds(xd.size());
  kernels::gelu_forward(xd.data(), yd.data(), dd.data(), n);
  kernels::serial::gelu_forward(xd.data(), ys.data(), ds.data(), n);
  double worst_y = 0, worst_d = 0;
  for (Index i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    REQUIRE(std::isfinite(yf[k]));
    REQUIRE(std::isfinite(df[k]));
    CHECK(yd[k] == ys[k]);
    worst_y = std::max(worst_y, std::abs(yf[k] - yd[k]) / std::max(1.0, std::abs(xd[k])));
    worst_d = std::max(worst_d, std::abs(df[k] - dd[k]));
  }
  CHECK(worst_y < 1e-6);
  CHECK(worst_d < 1e-6);
}
