#include <algorithm>
#include <random>

#include "doctest.h"
#include "deformer/errors.hpp"
#include "deformer/metrics.hpp"

using namespace deformer;

TEST_CASE("accuracy and F1 worked examples") {
  const std::vector<int> p{0, 0, 1, 1}, y{0, 1, 1, 1};
  CHECK(accuracy(p, y) == 0.75);
  const auto f1 = per_class_f1(p, y, 2);
  CHECK(f1[0] == doctest::Approx(2.0 / 3.0));
  CHECK(f1[1] == doctest::Approx(0.8));
  CHECK(macro_f1(p, y, 2) == doctest::Approx((2.0 / 3.0 + 0.8) / 2));
  CHECK(accuracy(y, y) == 1.0);
  CHECK(macro_f1(y, y, 2) == 1.0);
  const std::vector<int> a{0, 1}, b{1, 0};
  CHECK(accuracy(a, b) == 0.0);
  CHECK_THROWS_AS(accuracy(std::vector<int>{}, std::vector<int>{}), DomainError);
  CHECK_THROWS_AS(macro_f1(std::vector<int>{}, std::vector<int>{}, 2), DomainError);
  CHECK_THROWS_AS(accuracy(a, std::vector<int>{1}), DimensionError);
  CHECK_THROWS_AS(macro_f1(a, std::vector<int>{0, 3}, 2), DomainError);
}

TEST_CASE("absent classes score zero and count in the macro mean") {
  const std::vector<int> p{0, 0}, y{0, 0};
  const auto f1 = per_class_f1(p, y, 3);
  CHECK(f1 == std::vector<double>{1.0, 0.0, 0.0});
  CHECK(macro_f1(p, y, 3) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("report invariants") {
  std::mt19937 gen(4);
  std::uniform_int_distribution<int> d(0, 2);
  std::vector<int> p(50), y(50);
  for (auto& v : p) v = d(gen);
  for (auto& v : y) v = d(gen);
  const auto r = make_report(p, y, 3);
  CHECK(r.sample_count() == 50);
  for (std::size_t c = 0; c < 3; ++c) {
    std::size_t support = 0, row = 0;
    for (int v : y) support += v == static_cast<int>(c);
    for (auto v : r.confusion[c]) row += v;
    CHECK(row == support);
  }
  CHECK(r.accuracy >= 0.0);
  CHECK(r.accuracy <= 1.0);
  CHECK(r.macro_f1 <= 1.0);
  CHECK(to_json(r)["samples"] == 50);
}

TEST_CASE("metrics are invariant under a consistent relabelling") {
  std::mt19937 gen(5);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 4;
    std::uniform_int_distribution<int> d(0, n - 1);
    std::vector<int> p(30), y(30), perm{0, 1, 2, 3};
    for (auto& v : p) v = d(gen);
    for (auto& v : y) v = d(gen);
    std::shuffle(perm.begin(), perm.end(), gen);
    std::vector<int> pp, yy;
    for (int v : p) pp.push_back(perm[v]);
    for (int v : y) yy.push_back(perm[v]);
    CHECK(accuracy(p, y) == accuracy(pp, yy));
    CHECK(macro_f1(p, y, n) == doctest::Approx(macro_f1(pp, yy, n)).epsilon(1e-14));
  }
}

TEST_CASE("mean and std") {
  const std::vector<double> v{1.0, 2.0, 3.0, 4.0};
  const auto pop = mean_std(v);
  CHECK(pop.mean == 2.5);
  CHECK(pop.std == doctest::Approx(std::sqrt(1.25)));
  CHECK(mean_std(v, true).std == doctest::Approx(std::sqrt(5.0 / 3.0)));
  CHECK_THROWS_AS(mean_std(std::vector<double>{}), DomainError);
}
