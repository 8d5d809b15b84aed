#include <cmath>
#include <numbers>

#include "doctest.h"
#include "deformer/errors.hpp"
#include "deformer/ops.hpp"
#include "deformer/optim.hpp"

using namespace deformer;

TEST_CASE("adam single-step references") {
  AdamHyper h;
  std::vector<double> p{1.0}, m{0.0}, v{0.0};
  const std::vector<double> zero{0.0}, one{1.0};
  adam_update<double>(p, zero, m, v, 1, 1e-3, h);
  CHECK(p[0] == 1.0);

  p = {1.0}, m = {0.0}, v = {0.0};
  adam_update<double>(p, one, m, v, 1, 1e-3, h);
  // m_hat = 1, v_hat = 1 -> step lr / (1 + eps)
  CHECK(p[0] == doctest::Approx(1.0 - 1e-3 / (1.0 + 1e-8)).epsilon(1e-14));

  // coupled decay: effective gradient wd * p
  h.weight_decay = 1e-5;
  p = {1.0}, m = {0.0}, v = {0.0};
  adam_update<double>(p, zero, m, v, 1, 1e-3, h);
  CHECK(m[0] == doctest::Approx(0.1 * 1e-5).epsilon(1e-12));
  CHECK(v[0] == doctest::Approx(0.001 * 1e-10).epsilon(1e-12));
  CHECK(p[0] < 1.0);

  CHECK_THROWS_AS(adam_update<double>(p, zero, m, v, 0, 1e-3, h), ContractError);
}

TEST_CASE("adam bias correction over several steps") {
  AdamHyper h;
  std::vector<double> p{0.5}, m{0.0}, v{0.0};
  double mr = 0, vr = 0, pr = 0.5;
  for (std::size_t t = 1; t <= 5; ++t) {
    const double g = 0.3 * static_cast<double>(t);
    adam_update<double>(p, std::vector<double>{g}, m, v, t, 0.01, h);
    mr = 0.9 * mr + 0.1 * g;
    vr = 0.999 * vr + 0.001 * g * g;
    pr -= 0.01 * (mr / (1 - std::pow(0.9, t))) / (std::sqrt(vr / (1 - std::pow(0.999, t))) + 1e-8);
  }
  CHECK(p[0] == doctest::Approx(pr).epsilon(1e-13));
}

TEST_CASE("adam reduces a convex quadratic") {
  Tensor<double> w(Shape{3}, std::vector<double>{2.0, -1.0, 0.5});
  w.set_requires_grad(true);
  const Tensor<double> target(Shape{3}, std::vector<double>{0.3, 0.2, -0.4});
  auto loss = [&] { return ops::sum(ops::square(ops::sub(w, target))); };
  Adam<double> opt({w}, AdamHyper{});
  const double before = loss().item();
  loss().backward();
  opt.step(0.05);
  CHECK(loss().item() < before);
  CHECK(opt.steps == 1);
  for (int i = 0; i < 300; ++i) {
    w.zero_grad();
    loss().backward();
    opt.step(0.05);
  }
  CHECK(loss().item() < 1e-3);
}

TEST_CASE("cosine schedule") {
  CHECK(cosine_lr(0, 10, 1e-3, 0.0) == doctest::Approx(1e-3));
  CHECK(cosine_lr(10, 10, 1e-3, 1e-5) == 1e-5);
  CHECK(cosine_lr(5, 10, 1e-3, 1e-5) == doctest::Approx((1e-3 + 1e-5) / 2));
  CHECK(cosine_lr(12, 10, 1e-3, 1e-5) == 1e-5);
  double prev = 1.0;
  for (std::size_t e = 0; e <= 200; ++e) {
    const double lr = cosine_lr(e, 200, 1e-3, 0.0);
    CHECK(lr <= prev);
    prev = lr;
  }
  CHECK_THROWS_AS(cosine_lr(0, 0, 1e-3, 0.0), ConfigError);
}
