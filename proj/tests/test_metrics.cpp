#include <doctest.h>

#include <cmath>
#include <limits>

#include "exitrec/errors.hpp"
#include "exitrec/metrics.hpp"
#include "exitrec/rng.hpp"
#include "oracles.hpp"

using namespace exitrec;

TEST_SUITE("metrics") {

TEST_CASE("bidimensional softmax") {
  CHECK(bidimensional_softmax(0.3, 0.3) == 0.5);
  CHECK(bidimensional_softmax(1, 0) == doctest::Approx(0.73106).epsilon(1e-5));
  const double big = bidimensional_softmax(1000, 0);
  CHECK(std::isfinite(big));
  CHECK(big > 1 - 1e-9);
  CHECK(bidimensional_softmax(-1000, 1000) == 0.0);
  Rng rng(1);
  for (int k = 0; k < 10000; ++k) {
    const double a = (rng.uniform() - 0.5) * 2000, b = (rng.uniform() - 0.5) * 2000;
    CHECK(bidimensional_softmax(a, b) == 1.0 - bidimensional_softmax(b, a));
    CHECK(std::fabs(bidimensional_softmax(a, b) - oracle::logistic(a - b)) < 1e-12);
  }
}

TEST_CASE("auc examples") {
  CHECK(auc(std::vector{0.9, 0.8, 0.3, 0.2}, std::vector{1, 1, 0, 0}) == 1.0);
  CHECK(auc(std::vector{0.9, 0.8, 0.3, 0.2}, std::vector{1, 0, 1, 0}) == 0.75);
  CHECK(auc(std::vector{0.4, 0.4, 0.4}, std::vector{1, 0, 1}) == 0.5);
  CHECK_THROWS_AS(auc(std::vector{0.1, 0.2}, std::vector{0, 0}), UndefinedMetric);
  CHECK_THROWS_AS(auc(std::vector{0.1, std::nan("")}, std::vector{0, 1}), DataError);
  CHECK_THROWS_AS(auc(std::vector{0.1}, std::vector{0, 1}), ConfigError);
}

TEST_CASE("auc matches pairwise counting and is rank invariant") {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.index(300);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.index(20)) / 20.0;
      y[i] = rng.bernoulli(0.4) ? 1 : 0;
    }
    y[0] = 1;
    y[1] = 0;
    const double got = auc(s, y);
    CHECK(std::fabs(got - oracle::pairwise_auc(s, y)) < 1e-12);
    std::vector<double> t(n);
    for (std::size_t i = 0; i < n; ++i) t[i] = std::exp(3 * s[i]) - 7;
    CHECK(auc(t, y) == got);
  }
}

}
