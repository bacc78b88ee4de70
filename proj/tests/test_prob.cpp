#include <doctest.h>

#include <cmath>

#include "bbta/prob.hpp"
#include "testutil.hpp"

using namespace bbta;

TEST_CASE("entropy: uniform and one-hot bounds") {
  CHECK(entropy(ProbVector::uniform(1000)) == doctest::Approx(std::log(1000.0)).epsilon(1e-12));
  CHECK(entropy(ProbVector::one_hot(5, 2)) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("entropy: hand-evaluated two-class case") {
  // -0.9*ln(0.9) - 0.1*ln(0.1), evaluated by hand calculator.
  ProbVector p({0.9, 0.1});
  CHECK(entropy(p) == doctest::Approx(0.3250830).epsilon(1e-6));
}

TEST_CASE("entropy: rejects non-normalized input") {
  CHECK_THROWS_AS(ProbVector({0.5, 0.4}), ConfigError);
  CHECK_THROWS_AS(ProbVector({1.2, -0.2}), ConfigError);
  CHECK_THROWS_AS(ProbVector({1.0}), ConfigError);
}

TEST_CASE("kl: identity, analytic, hand-evaluated") {
  ProbVector p({0.25, 0.75});
  CHECK(kl(p, p) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(kl(ProbVector({1.0, 0.0}), ProbVector({0.5, 0.5})) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  // 0.7*ln(0.7/0.3) + 0.3*ln(0.3/0.7) = 0.4*ln(7/3), by hand.
  CHECK(kl(ProbVector({0.7, 0.3}), ProbVector({0.3, 0.7})) ==
        doctest::Approx(0.3389191).epsilon(1e-6));
}

TEST_CASE("kl: infinity sentinel and dimension mismatch") {
  CHECK(std::isinf(kl(ProbVector({0.5, 0.5}), ProbVector({1.0, 0.0}))));
  CHECK_THROWS_AS(kl(ProbVector({0.5, 0.5}), ProbVector::uniform(3)), ConfigError);
}

TEST_CASE("harmonize: endpoints and symmetry") {
  ProbVector ps({0.8, 0.2}), pb({0.3, 0.7});
  CHECK(harmonize(ps, pb, 1.0).values() == ps.values());
  CHECK(harmonize(ps, pb, 0.0).values() == pb.values());
  ProbVector mix = harmonize(ProbVector({1.0, 0.0}), ProbVector({0.0, 1.0}), 0.5);
  CHECK(mix[0] == doctest::Approx(0.5));
  CHECK(mix[1] == doctest::Approx(0.5));
  CHECK_THROWS_AS(harmonize(ps, pb, 1.5), ConfigError);
  CHECK_THROWS_AS(harmonize(ps, ProbVector::uniform(3), 0.5), ConfigError);
}

TEST_CASE("js_alpha: vanishing and maximally disjoint cases") {
  ProbVector p({0.4, 0.6});
  CHECK(js_alpha(p, p, 0.3) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(js_alpha(ProbVector({1.0, 0.0}), ProbVector({0.0, 1.0}), 0.5) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-9));
}

TEST_CASE("js_alpha: decomposition identity over 1000 random triples") {
  Rng rng(42);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int k = 2 + static_cast<int>(uniform(rng, 0.0, 1.0) * 30);
    ProbVector ps(testutil::random_simplex(rng, k));
    ProbVector pb(testutil::random_simplex(rng, k));
    const double alpha = uniform(rng, 0.0, 1.0);
    const ProbVector ph = harmonize(ps, pb, alpha);
    const double lhs = entropy(ph) - alpha * entropy(ps) - (1.0 - alpha) * entropy(pb);
    const double rhs = js_alpha(ps, pb, alpha);
    CHECK(rhs >= 0.0);
    worst = std::max(worst, std::fabs(lhs - rhs));
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("js_alpha: near-zero divergence implies near-equal inputs") {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const int k = 2 + static_cast<int>(uniform(rng, 0.0, 1.0) * 10);
    ProbVector ps(testutil::random_simplex(rng, k));
    const double alpha = uniform(rng, 0.05, 0.95);
    if (js_alpha(ps, ps, alpha) < 1e-12) {
      // p_b == p_s by construction; check the contrapositive on a perturbed copy
      std::vector<double> v = ps.values();
      v[0] = std::min(1.0, v[0] + 1e-3);
      double sum = 0.0;
      for (double x : v) sum += x;
      for (double& x : v) x /= sum;
      ProbVector pb(v);
      double max_gap = 0.0;
      for (int i = 0; i < k; ++i) max_gap = std::max(max_gap, std::fabs(ps[i] - pb[i]));
      if (js_alpha(ps, pb, alpha) < 1e-12) CHECK(max_gap < 1e-5);
    }
  }
}

TEST_CASE("entropy bounds hold for random vectors") {
  Rng rng(11);
  for (int trial = 0; trial < 500; ++trial) {
    const int k = 2 + static_cast<int>(uniform(rng, 0.0, 1.0) * 40);
    ProbVector p(testutil::random_simplex(rng, k));
    const double h = entropy(p);
    CHECK(h >= 0.0);
    CHECK(h <= std::log(static_cast<double>(k)) + 1e-12);
  }
}

TEST_CASE("reliability_weight: boundary, analytic, paper margin") {
  const double eps = 0.9 * std::log(1000.0);
  CHECK(reliability_weight(eps, eps) == 0.0);
  CHECK(reliability_weight(eps - 1.0, eps) == doctest::Approx(std::exp(1.0)).epsilon(1e-12));
  // exp(0.9*ln(1000)) = 1000^0.9, by direct evaluation.
  CHECK(reliability_weight(0.0, eps) == doctest::Approx(501.18723).epsilon(1e-6));
  CHECK_THROWS_AS(reliability_weight(-0.1, eps), ConfigError);
  CHECK_THROWS_AS(reliability_weight(0.5, 0.0), ConfigError);
}

TEST_CASE("reliability_weight: zero at/above margin, positive below") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const double eps = uniform(rng, 0.1, 7.0);
    const double h = uniform(rng, 0.0, 9.0);
    const double w = reliability_weight(h, eps);
    if (h >= eps)
      CHECK(w == 0.0);
    else
      CHECK(w > 0.0);
  }
  // strictly decreasing on [0, eps)
  const double eps = 2.0;
  double prev = reliability_weight(0.0, eps);
  for (double h = 0.1; h < eps; h += 0.1) {
    const double w = reliability_weight(h, eps);
    CHECK(w < prev);
    prev = w;
  }
}

TEST_CASE("diversity_gate: identical, orthogonal, hand-computed cosine") {
  ProbVector p({0.6, 0.4});
  CHECK_FALSE(diversity_gate(p, p, 1.0));
  CHECK(diversity_gate(ProbVector::one_hot(4, 0), ProbVector::one_hot(4, 3), 0.5));
  // dot = 0.48, norms sqrt(0.52) each -> cos = 12/13 ~ 0.9231
  CHECK(diversity_gate(ProbVector({0.6, 0.4}), ProbVector({0.4, 0.6}), 0.98));
  CHECK_FALSE(diversity_gate(ProbVector({0.6, 0.4}), ProbVector({0.4, 0.6}), 0.9));
  CHECK_THROWS_AS(diversity_gate(p, ProbVector::uniform(3), 0.5), ConfigError);
}

TEST_CASE("diversity_gate: sentinel EMA passes") {
  ProbVector sentinel;  // flag state before the first reliable sample
  CHECK(diversity_gate(ProbVector({0.6, 0.4}), sentinel, 0.01));
}

TEST_CASE("FilterParams validation") {
  FilterParams ok{2.0, 0.05, 0.4, 50.0};
  CHECK_NOTHROW(ok.validate());
  FilterParams bad_eps{0.0, 0.05, 0.4, 50.0};
  CHECK_THROWS_AS(bad_eps.validate(), ConfigError);
  FilterParams bad_d{2.0, 1.5, 0.4, 50.0};
  CHECK_THROWS_AS(bad_d.validate(), ConfigError);
  FilterParams bad_alpha{2.0, 0.05, -0.1, 50.0};
  CHECK_THROWS_AS(bad_alpha.validate(), ConfigError);
  FilterParams bad_lambda{2.0, 0.05, 0.4, -1.0};
  CHECK_THROWS_AS(bad_lambda.validate(), ConfigError);
}
