#include <cmath>

#include "doctest.h"
#include "deformer/errors.hpp"
#include "deformer/ops.hpp"
#include "helpers.hpp"

using namespace deformer;
using testing::op_grad_error;
using testing::probe;
using testing::random_tensor;
using V = std::vector<Tensor<double>>;

TEST_CASE("layout ops move values and gradients") {
  auto x = random_tensor({2, 3, 4}, 1);
  auto p = ops::permute(x, {2, 0, 1});
  CHECK(p.shape() == Shape{4, 2, 3});
  CHECK(p[(3 * 2 + 1) * 3 + 2] == x[(1 * 3 + 2) * 4 + 3]);
  auto t = ops::transpose(x);
  CHECK(t.shape() == Shape{2, 4, 3});
  auto s = ops::slice(x, 1, 1, 2);
  CHECK(s.shape() == Shape{2, 2, 4});
  CHECK(s[0] == x[4]);
  auto c = ops::concat<double>({x, s}, 1);
  CHECK(c.shape() == Shape{2, 5, 4});
  CHECK_THROWS_AS(ops::reshape(x, Shape{5, 5}), DimensionError);
  CHECK_THROWS_AS(ops::slice(x, 1, 2, 2), DimensionError);

  CHECK(op_grad_error([](V& v) { return probe(ops::permute(v[0], {1, 2, 0})); }, {x}) < 1e-7);
  CHECK(op_grad_error([](V& v) { return probe(ops::transpose(v[0])); }, {x}) < 1e-7);
  CHECK(op_grad_error([](V& v) { return probe(ops::slice(v[0], 2, 1, 2)); }, {x}) < 1e-7);
  CHECK(op_grad_error([](V& v) { return probe(ops::concat<double>({v[0], v[1]}, 2)); },
                      {x, random_tensor({2, 3, 2}, 2)}) < 1e-7);
}

TEST_CASE("elementwise values") {
  Tensor<double> x(Shape{3}, std::vector<double>{-1.0, 0.0, 1.0});
  auto e = ops::elu(x);
  CHECK(e[0] == doctest::Approx(std::exp(-1.0) - 1.0));
  CHECK(e[2] == 1.0);
  auto g = ops::gelu(x);
  CHECK(g[2] == doctest::Approx(0.8413447460685429).epsilon(1e-14));
  CHECK(g[0] == doctest::Approx(-0.15865525393145707).epsilon(1e-14));
  CHECK(g[1] == 0.0);
  auto b = ops::add_broadcast(random_tensor({2, 3}, 3), Tensor<double>(Shape{3}, 1.0));
  CHECK(b.shape() == Shape{2, 3});
  CHECK_THROWS_AS(ops::add(x, Tensor<double>(Shape{2}, 1.0)), DimensionError);
}

TEST_CASE("elementwise gradients") {
  auto a = random_tensor({3, 4}, 4), b = random_tensor({3, 4}, 5);
  auto pos = random_tensor({3, 4}, 6);
  for (auto& v : pos.data()) v = std::abs(v) + 0.5;
  CHECK(op_grad_error([](V& v) { return probe(ops::add(v[0], v[1])); }, {a, b}) < 1e-7);
  CHECK(op_grad_error([](V& v) { return probe(ops::sub(v[0], v[1])); }, {a, b}) < 1e-7);
  CHECK(op_grad_error([](V& v) { return probe(ops::mul(v[0], v[1])); }, {a, b}) < 1e-7);
  CHECK(op_grad_error([](V& v) { return probe(ops::square(v[0])); }, {a}) < 1e-7);
  CHECK(op_grad_error([](V& v) { return probe(ops::log(v[0])); }, {pos}) < 1e-7);
  CHECK(op_grad_error([](V& v) { return probe(ops::sqrt(v[0])); }, {pos}) < 1e-7);
  CHECK(op_grad_error([](V& v) { return probe(ops::elu(v[0])); }, {a}) < 1e-6);
  CHECK(op_grad_error([](V& v) { return probe(ops::gelu(v[0])); }, {a}) < 1e-7);
  CHECK(op_grad_error([](V& v) { return probe(ops::add_broadcast(v[0], v[1])); }, {a, random_tensor({4}, 7)}) < 1e-7);
  CHECK(op_grad_error([](V& v) { return probe(ops::add_channel_bias(v[0], v[1])); },
                      {random_tensor({2, 3, 5}, 8), random_tensor({3}, 9)}) < 1e-7);
  CHECK(op_grad_error([](V& v) { return probe(ops::mean_last(v[0])); }, {a}) < 1e-7);
  CHECK(op_grad_error([](V& v) { return probe(ops::expand_last(v[0], 3)); }, {a}) < 1e-7);
  CHECK(op_grad_error([](V& v) { return ops::mean(ops::square(v[0])); }, {a}) < 1e-7);
}

TEST_CASE("matmul and linear") {
  Tensor<double> a(Shape{2, 2}, std::vector<double>{1, 2, 3, 4});
  Tensor<double> b(Shape{2, 2}, std::vector<double>{5, 6, 7, 8});
  auto c = ops::matmul(a, b);
  CHECK(c[0] == 19.0);
  CHECK(c[1] == 22.0);
  CHECK(c[2] == 43.0);
  CHECK(c[3] == 50.0);
  CHECK_THROWS_AS(ops::matmul(a, Tensor<double>(Shape{3, 2}, 1.0)), DimensionError);
  CHECK(op_grad_error([](V& v) { return probe(ops::matmul(v[0], v[1])); },
                      {random_tensor({3, 4, 5}, 10), random_tensor({3, 5, 2}, 11)}) < 1e-7);
  CHECK(op_grad_error([](V& v) { return probe(ops::matmul(v[0], v[1])); },
                      {random_tensor({3, 4, 5}, 12), random_tensor({5, 2}, 13)}) < 1e-7);
  CHECK(op_grad_error([](V& v) { return probe(ops::matmul(v[0], v[1])); },
                      {random_tensor({4, 5}, 14), random_tensor({3, 5, 2}, 15)}) < 1e-7);
  CHECK(op_grad_error([](V& v) { return probe(ops::linear(v[0], v[1], v[2])); },
                      {random_tensor({2, 3, 4}, 16), random_tensor({4, 6}, 17), random_tensor({6}, 18)}) < 1e-7);
}

TEST_CASE("convolutions") {
  // A centred delta kernel is the identity under "same" padding.
  Tensor<double> x = random_tensor({1, 1, 7}, 19);
  Tensor<double> w(Shape{1, 1, 3}, std::vector<double>{0, 1, 0});
  auto y = ops::conv1d_same(x, w, Tensor<double>(Shape{1}, 0.0));
  for (std::size_t i = 0; i < 7; ++i) CHECK(y[i] == x[i]);
  // Shift kernel: y[t] = x[t+1] with zero padding at the end (correlation).
  Tensor<double> shift(Shape{1, 1, 3}, std::vector<double>{0, 0, 1});
  auto ys = ops::conv1d_same(x, shift, Tensor<double>(Shape{1}, 0.0));
  CHECK(ys[0] == x[1]);
  CHECK(ys[6] == 0.0);
  CHECK_THROWS_AS(ops::conv1d_same(x, Tensor<double>(Shape{1, 1, 4}, 1.0), Tensor<double>(Shape{1}, 0.0)),
                  ConfigError);
  CHECK_THROWS_AS(ops::conv_spatial(random_tensor({1, 2, 3, 5}, 20), random_tensor({2, 2, 4, 1}, 21),
                                    Tensor<double>(Shape{2}, 0.0)),
                  ConfigError);

  // Each input enters linearly, so central differences are exact up to
  // round-off and a large step keeps that round-off small.
  CHECK(op_grad_error([](V& v) { return probe(ops::conv1d_same(v[0], v[1], v[2])); },
                      {random_tensor({2, 3, 9}, 22), random_tensor({4, 3, 5}, 23), random_tensor({4}, 24)}, 1e-2) < 1e-7);
  CHECK(op_grad_error([](V& v) { return probe(ops::conv_temporal(v[0], v[1], v[2])); },
                      {random_tensor({2, 1, 3, 8}, 25), random_tensor({4, 1, 1, 3}, 26), random_tensor({4}, 27)},
                      1e-2) < 1e-7);
  CHECK(op_grad_error([](V& v) { return probe(ops::conv_spatial(v[0], v[1], v[2])); },
                      {random_tensor({2, 4, 3, 8}, 28), random_tensor({5, 4, 3, 1}, 29), random_tensor({5}, 30)},
                      1e-2) < 1e-7);
}

TEST_CASE("weight norm") {
  Tensor<double> v(Shape{2, 2}, std::vector<double>{3, 4, 0, 2});
  Tensor<double> g(Shape{2}, std::vector<double>{10, 1});
  auto w = ops::weight_norm(v, g);
  CHECK(w[0] == doctest::Approx(6.0));
  CHECK(w[1] == doctest::Approx(8.0));
  CHECK(w[3] == doctest::Approx(1.0));
  CHECK(op_grad_error([](V& t) { return probe(ops::weight_norm(t[0], t[1])); },
                      {random_tensor({3, 2, 4, 1}, 31), random_tensor({3}, 32)}) < 1e-7);
}

TEST_CASE("maxpool floors odd lengths and routes ties to the first element") {
  Tensor<double> x(Shape{1, 5}, std::vector<double>{1, 3, 2, 2, 9});
  x.set_requires_grad(true);
  auto y = ops::maxpool(x, 1);
  CHECK(y.shape() == Shape{1, 2});
  CHECK(y[0] == 3.0);
  CHECK(y[1] == 2.0);
  ops::sum(y).backward();
  CHECK(x.grad()[1] == 1.0);
  CHECK(x.grad()[2] == 1.0);
  CHECK(x.grad()[3] == 0.0);
  CHECK(x.grad()[4] == 0.0);
  CHECK_THROWS_AS(ops::maxpool(Tensor<double>(Shape{2, 1}, 0.0), 1), DimensionError);
  CHECK(op_grad_error([](V& v) { return probe(ops::maxpool(v[0], 1)); }, {random_tensor({3, 8, 2}, 33)}) < 1e-7);
}

TEST_CASE("batchnorm statistics and running update") {
  // Two features, batch of 2, length 2.
  Tensor<double> x(Shape{2, 2, 2}, std::vector<double>{1, 2, 10, 10, 3, 4, 10, 10});
  Tensor<double> gamma(Shape{2}, 1.0), beta(Shape{2}, std::vector<double>{0.0, 5.0});
  BatchNormState<double> st(2);
  auto y = ops::batchnorm(x, gamma, beta, st, Mode::kTrain);
  // feature 0: values {1,2,3,4}, mean 2.5, population var 1.25
  CHECK(y[0] == doctest::Approx((1 - 2.5) / std::sqrt(1.25 + 1e-5)));
  // constant feature -> beta
  CHECK(y[2] == doctest::Approx(5.0));
  CHECK(st.running_mean[0] == doctest::Approx(0.9 * 0 + 0.1 * 2.5));
  CHECK(st.running_var[0] == doctest::Approx(0.9 * 1 + 0.1 * 1.25));
  CHECK(st.running_mean[1] == doctest::Approx(1.0));

  auto snapshot = st.running_mean;
  auto ye = ops::batchnorm(x, gamma, beta, st, Mode::kEval);
  CHECK(st.running_mean == snapshot);
  CHECK(ye[0] == doctest::Approx((1 - st.running_mean[0]) / std::sqrt(st.running_var[0] + 1e-5)));

  BatchNormState<double> s2(3);
  CHECK(op_grad_error(
            [&](V& v) {
              BatchNormState<double> s = s2;
              return probe(ops::batchnorm(v[0], v[1], v[2], s, Mode::kTrain));
            },
            {random_tensor({4, 3, 5}, 34), random_tensor({3}, 35), random_tensor({3}, 36)}) < 1e-6);
  CHECK(op_grad_error(
            [&](V& v) {
              BatchNormState<double> s = s2;
              return probe(ops::batchnorm(v[0], v[1], v[2], s, Mode::kEval));
            },
            {random_tensor({4, 3, 5}, 37), random_tensor({3}, 38), random_tensor({3}, 39)}) < 1e-7);
}

TEST_CASE("layernorm and softmax") {
  Tensor<double> x(Shape{1, 2}, std::vector<double>{0.0, 2.0});
  auto y = ops::layernorm(x, Tensor<double>(Shape{2}, 1.0), Tensor<double>(Shape{2}, 0.0));
  CHECK(y[0] == doctest::Approx(-1.0).epsilon(1e-5));
  CHECK(y[1] == doctest::Approx(1.0).epsilon(1e-5));
  auto s = ops::softmax(random_tensor({3, 4}, 40), 1);
  for (std::size_t r = 0; r < 3; ++r) {
    double sum = 0;
    for (std::size_t c = 0; c < 4; ++c) sum += s[r * 4 + c];
    CHECK(sum == doctest::Approx(1.0));
  }
  Tensor<double> big(Shape{2}, std::vector<double>{1000.0, 1000.0});
  CHECK(ops::softmax(big, 0)[0] == doctest::Approx(0.5));
  CHECK(op_grad_error([](V& v) { return probe(ops::layernorm(v[0], v[1], v[2])); },
                      {random_tensor({3, 6}, 41), random_tensor({6}, 42), random_tensor({6}, 43)}) < 1e-6);
  CHECK(op_grad_error([](V& v) { return probe(ops::softmax(v[0], 1)); }, {random_tensor({2, 5, 3}, 44)}) < 1e-7);
  CHECK(op_grad_error([](V& v) { return probe(ops::softmax(v[0], 2)); }, {random_tensor({2, 5, 3}, 45)}) < 1e-7);
}

TEST_CASE("dropout") {
  auto x = random_tensor({1000}, 46);
  auto rng = RngState::from_seed(1);
  CHECK(ops::dropout(x, 0.5, Mode::kEval, rng).same_storage(x));
  CHECK(ops::dropout(x, 0.0, Mode::kTrain, rng).same_storage(x));
  CHECK_THROWS_AS(ops::dropout(x, 1.0, Mode::kTrain, rng), ConfigError);
  CHECK_THROWS_AS(ops::dropout(x, -0.1, Mode::kTrain, rng), ConfigError);
  Tensor<double> ones(Shape{20000}, 1.0);
  auto d = ops::dropout(ones, 0.25, Mode::kTrain, rng);
  double sum = 0;
  std::size_t zeros = 0;
  for (double v : d.data()) {
    sum += v;
    zeros += v == 0.0;
    if (v != 0.0) CHECK(v == doctest::Approx(1.0 / 0.75));
  }
  CHECK(sum / 20000 == doctest::Approx(1.0).epsilon(0.03));
  CHECK(static_cast<double>(zeros) / 20000 == doctest::Approx(0.25).epsilon(0.08));
  auto r1 = RngState::from_seed(5), r2 = RngState::from_seed(5);
  auto a = ops::dropout(x, 0.5, Mode::kTrain, r1), b = ops::dropout(x, 0.5, Mode::kTrain, r2);
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  CHECK(op_grad_error(
            [](V& v) {
              auto r = RngState::from_seed(9);
              return probe(ops::dropout(v[0], 0.3, Mode::kTrain, r));
            },
            {random_tensor({4, 6}, 47)}) < 1e-7);
}

TEST_CASE("cross entropy") {
  Tensor<double> uniform(Shape{1, 2}, 0.0);
  const std::vector<int> y0{0};
  CHECK(ops::cross_entropy(uniform, y0).item() == doctest::Approx(std::log(2.0)));
  Tensor<double> confident(Shape{1, 2}, std::vector<double>{10.0, -10.0});
  CHECK(ops::cross_entropy(confident, y0).item() == doctest::Approx(0.0).epsilon(1e-8));
  Tensor<double> huge(Shape{1, 2}, std::vector<double>{1000.0, 0.0});
  CHECK(std::isfinite(ops::cross_entropy(huge, std::vector<int>{1}).item()));
  CHECK_THROWS_AS(ops::cross_entropy(uniform, std::vector<int>{2}), DomainError);
  CHECK_THROWS_AS(ops::cross_entropy(uniform, std::vector<int>{-1}), DomainError);

  // d/dlogits = (softmax - onehot) / B
  auto z = random_tensor({3, 4}, 48);
  z.set_requires_grad(true);
  const std::vector<int> labels{1, 3, 0};
  ops::cross_entropy(z, labels).backward();
  for (std::size_t b = 0; b < 3; ++b) {
    double denom = 0;
    for (std::size_t c = 0; c < 4; ++c) denom += std::exp(z[b * 4 + c]);
    for (std::size_t c = 0; c < 4; ++c) {
      const double want = (std::exp(z[b * 4 + c]) / denom - (static_cast<int>(c) == labels[b] ? 1.0 : 0.0)) / 3.0;
      CHECK(z.grad()[b * 4 + c] == doctest::Approx(want).epsilon(1e-12));
    }
  }
  CHECK(op_grad_error([&](V& v) { return ops::cross_entropy(v[0], labels); }, {random_tensor({3, 4}, 49)}) < 1e-7);
}

TEST_CASE("gradcheck helpers") {
  Tensor<double> x(Shape{2}, std::vector<double>{1.0, 2.0});
  auto g = finite_diff_grad<double>([](Tensor<double>& t) { return t[0] * t[0] + 3 * t[1]; }, x, 1e-5);
  CHECK(g[0] == doctest::Approx(2.0));
  CHECK(g[1] == doctest::Approx(3.0));
  CHECK(x[0] == 1.0);
  const std::vector<double> a{1.0, 0.0}, n{1.1, 1e-12};
  CHECK(max_relative_error<double>(a, n, 1e-6) == doctest::Approx(0.1 / 1.1));
}
