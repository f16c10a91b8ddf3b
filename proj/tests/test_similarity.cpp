#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ex2l/similarity.hpp"
#include "ex2l/rng.hpp"
#include "similarity_oracle.hpp"

using namespace ex2l;
namespace ad = ex2l::ad;

namespace {

NDArray map2(double a, double b, double c, double d) {
  return NDArray({2, 2}, {a, b, c, d});
}

NDArray random_map(Rng& rng, std::size_t h = 4, std::size_t w = 4, double lo = 0.0,
                   double hi = 1.0) {
  NDArray m({h, w});
  for (std::size_t i = 0; i < m.numel(); ++i) m[i] = rng.uniform(lo, hi);
  return m;
}

std::vector<double> flat(const NDArray& m) {
  return {m.data(), m.data() + m.numel()};
}

double eval(SimKind kind, const NDArray& a, const NDArray& b) {
  SimilarityFn fn;
  fn.kind = kind;
  return evaluate_value(fn, a, b);
}

}  // namespace

TEST_CASE("kind name registry round trips and is complete") {
  CHECK(all_sim_kinds().size() == 11);
  for (SimKind k : all_sim_kinds())
    CHECK(sim_kind_from_string(sim_kind_name(k)) == k);
  CHECK_THROWS_AS(sim_kind_from_string("manhattan"), ConfigError);
}

TEST_CASE("l1_normalize: examples from the contract") {
  auto p = l1_normalize(ad::constant(map2(1, 1, 1, 1)));
  for (int i = 0; i < 4; ++i) CHECK(p->value[i] == doctest::Approx(0.25));

  auto z = l1_normalize(ad::constant(map2(0, 0, 0, 0)));
  for (int i = 0; i < 4; ++i) CHECK(z->value[i] == doctest::Approx(0.25));

  auto q = l1_normalize(ad::constant(map2(3, 1, 0, 0)));
  CHECK(q->value[0] == doctest::Approx(0.75));
  CHECK(q->value[1] == doctest::Approx(0.25));
  CHECK(q->value[2] == 0.0);
  CHECK(q->value[3] == 0.0);

  double sum = q->value[0] + q->value[1] + q->value[2] + q->value[3];
  CHECK(std::fabs(sum - 1.0) < 1e-9);
}

TEST_CASE("identity cases") {
  Rng rng(17);
  NDArray a = random_map(rng);
  NDArray binary({2, 2}, {1, 0, 1, 1});

  CHECK(eval(SimKind::NegMae, a, a) == doctest::Approx(0.0));
  CHECK(eval(SimKind::Cosine, a, a) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(eval(SimKind::SoftDice, binary, binary) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(eval(SimKind::SoftIou, binary, binary) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(eval(SimKind::NegJsd, a, a) == doctest::Approx(0.0));
  CHECK(eval(SimKind::Ncc, a, a) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(eval(SimKind::Ssim, a, a) == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("disjoint supports: neg-js-div reaches -ln 2") {
  NDArray a = map2(1, 1, 0, 0), b = map2(0, 0, 1, 1);
  CHECK(eval(SimKind::NegJsDiv, a, b) == doctest::Approx(-std::log(2.0)).epsilon(1e-6));
  CHECK(eval(SimKind::NegJsd, a, b) ==
        doctest::Approx(-std::sqrt(std::log(2.0))).epsilon(1e-6));
}

TEST_CASE("hand-computed 2x2 pair") {
  NDArray a = map2(1, 1, 0, 0), b = map2(1, 0, 1, 0);
  CHECK(eval(SimKind::SoftDice, a, b) == doctest::Approx(0.5).epsilon(1e-7));
  CHECK(eval(SimKind::NegMae, a, b) == doctest::Approx(-0.5));
  CHECK(eval(SimKind::Cosine, a, b) == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("ncc of a perfect anticorrelation is -1") {
  NDArray a = map2(0, 1, 2, 3), b = map2(3, 2, 1, 0);
  CHECK(eval(SimKind::Ncc, a, b) == doctest::Approx(-1.0).epsilon(1e-6));
}

TEST_CASE("constant maps: ncc defined as 0, ssim as 1") {
  NDArray a = map2(0.5, 0.5, 0.5, 0.5), b = map2(0.25, 0.25, 0.25, 0.25);
  CHECK(eval(SimKind::Ncc, a, b) == doctest::Approx(0.0));
  CHECK(std::isfinite(eval(SimKind::Ssim, a, b)));
}

TEST_CASE("oracle equivalence: 1000 random 4x4 pairs at 1e-10") {
  Rng rng(1234);
  for (int trial = 0; trial < 1000; ++trial) {
    NDArray a = random_map(rng), b = random_map(rng);
    auto fa = flat(a), fb = flat(b);
    for (SimKind k : all_sim_kinds()) {
      double got = eval(k, a, b);
      double want = sim_oracle::evaluate(sim_kind_name(k), fa, fb);
      CAPTURE(trial);
      CAPTURE(sim_kind_name(k));
      REQUIRE(std::fabs(got - want) < 1e-10);
    }
  }
}

TEST_CASE("identity maximality over random maps") {
  // soft-dice / soft-iou are maximal at identity only on binary maps
  // (dice(a,a) = sum a^2 / sum a < 1 for fractional a, and a scaled-up b
  // can beat it); their own identity examples are binary-qualified, so the
  // property is checked on binary maps for those two kinds.
  Rng rng(55);
  for (int trial = 0; trial < 200; ++trial) {
    NDArray a = random_map(rng), b = random_map(rng);
    NDArray ab({4, 4}), bb({4, 4});
    for (int i = 0; i < 16; ++i) {
      ab[i] = a[i] > 0.5 ? 1.0 : 0.0;
      bb[i] = b[i] > 0.5 ? 1.0 : 0.0;
    }
    for (SimKind k : all_sim_kinds()) {
      CAPTURE(sim_kind_name(k));
      bool binary_kind = k == SimKind::SoftDice || k == SimKind::SoftIou;
      const NDArray& x = binary_kind ? ab : a;
      const NDArray& y = binary_kind ? bb : b;
      // the asymmetric kind holds with the reference (second argument) fixed
      double self = eval(k, x, x);
      double cross = k == SimKind::NegKl ? eval(k, y, x) : eval(k, x, y);
      CHECK(self >= cross - 1e-9);
    }
  }
}

TEST_CASE("bounds on random [0,1] maps") {
  Rng rng(77);
  for (int trial = 0; trial < 200; ++trial) {
    NDArray a = random_map(rng), b = random_map(rng);
    double eps = 1e-9;
    CHECK(eval(SimKind::Cosine, a, b) >= 0.0 - eps);
    CHECK(eval(SimKind::Cosine, a, b) <= 1.0 + eps);
    CHECK(eval(SimKind::SoftDice, a, b) >= 0.0 - eps);
    CHECK(eval(SimKind::SoftDice, a, b) <= 1.0 + eps);
    CHECK(eval(SimKind::SoftIou, a, b) >= 0.0 - eps);
    CHECK(eval(SimKind::SoftIou, a, b) <= 1.0 + eps);
    CHECK(eval(SimKind::Ncc, a, b) >= -1.0 - eps);
    CHECK(eval(SimKind::Ncc, a, b) <= 1.0 + eps);
    CHECK(eval(SimKind::NegJsd, a, b) >= -std::sqrt(std::log(2.0)) - 1e-6);
    CHECK(eval(SimKind::NegJsd, a, b) <= 0.0 + eps);
    CHECK(eval(SimKind::NegMae, a, b) <= 0.0 + eps);
    CHECK(eval(SimKind::NegMse, a, b) <= 0.0 + eps);
    CHECK(eval(SimKind::NegRmse, a, b) <= 0.0 + eps);
  }
}

TEST_CASE("symmetry for every kind except the KL direction") {
  Rng rng(99);
  for (int trial = 0; trial < 100; ++trial) {
    NDArray a = random_map(rng), b = random_map(rng);
    for (SimKind k : all_sim_kinds()) {
      if (k == SimKind::NegKl) continue;
      CAPTURE(sim_kind_name(k));
      CHECK(std::fabs(eval(k, a, b) - eval(k, b, a)) < 1e-12);
    }
  }
  // and the KL direction really is asymmetric
  NDArray a = map2(0.7, 0.2, 0.05, 0.05), b = map2(0.1, 0.1, 0.4, 0.4);
  CHECK(std::fabs(eval(SimKind::NegKl, a, b) - eval(SimKind::NegKl, b, a)) > 1e-3);
}

TEST_CASE("triangle inequality: distance form holds, divergence form fails") {
  // the square-root form is a metric on random triples
  Rng rng(31);
  SimilarityFn jsd{SimKind::NegJsd};
  for (int trial = 0; trial < 200; ++trial) {
    NDArray a = random_map(rng), b = random_map(rng), c = random_map(rng);
    double dab = -evaluate_value(jsd, a, b);
    double dbc = -evaluate_value(jsd, b, c);
    double dac = -evaluate_value(jsd, a, c);
    CHECK(dac <= dab + dbc + 1e-9);
  }

  // constructed violation for the raw divergence
  NDArray p({1, 2}, {1.0, 0.0});
  NDArray q({1, 2}, {0.5, 0.5});
  NDArray r({1, 2}, {0.0, 1.0});
  SimilarityFn jsdiv{SimKind::NegJsDiv};
  double dpr = -evaluate_value(jsdiv, p, r);
  double dpq = -evaluate_value(jsdiv, p, q);
  double dqr = -evaluate_value(jsdiv, q, r);
  CHECK(dpr > dpq + dqr + 1e-3);
}

TEST_CASE("batch inputs return the batch mean") {
  Rng rng(41);
  NDArray a1 = random_map(rng), a2 = random_map(rng);
  NDArray b1 = random_map(rng), b2 = random_map(rng);
  NDArray abatch({2, 4, 4}), bbatch({2, 4, 4});
  for (int i = 0; i < 16; ++i) {
    abatch[i] = a1[i];
    abatch[16 + i] = a2[i];
    bbatch[i] = b1[i];
    bbatch[16 + i] = b2[i];
  }
  for (SimKind k : all_sim_kinds()) {
    double batched = eval(k, abatch, bbatch);
    double mean = 0.5 * (eval(k, a1, b1) + eval(k, a2, b2));
    CAPTURE(sim_kind_name(k));
    CHECK(batched == doctest::Approx(mean).epsilon(1e-12));
  }
}

TEST_CASE("shape mismatch is a usage error") {
  SimilarityFn fn{SimKind::NegMae};
  CHECK_THROWS_AS(
      evaluate(fn, ad::constant(NDArray({2, 2})), ad::constant(NDArray({2, 3}))),
      UsageError);
}

TEST_CASE("gradients of every kind match finite differences") {
  Rng rng(61);
  for (SimKind k : all_sim_kinds()) {
    CAPTURE(sim_kind_name(k));
    // strictly positive values keep abs/sqrt away from their kinks
    NDArray av = random_map(rng, 4, 4, 0.15, 1.4);
    NDArray bv = random_map(rng, 4, 4, 0.15, 1.4);
    auto a = ad::param(av);
    auto b = ad::constant(bv);
    SimilarityFn fn;
    fn.kind = k;

    ad::backward(evaluate(fn, a, b));
    for (std::size_t i = 0; i < av.numel(); ++i) {
      double eps = 1e-6;
      a->value[i] = av[i] + eps;
      double lp = evaluate(fn, a, b)->value[0];
      a->value[i] = av[i] - eps;
      double lm = evaluate(fn, a, b)->value[0];
      a->value[i] = av[i];
      double fd = (lp - lm) / (2.0 * eps);
      double an = a->grad[i];
      double rel = std::fabs(an - fd) / std::max({std::fabs(an), std::fabs(fd), 1e-5});
      CAPTURE(i);
      CHECK(rel < 1e-4);
    }
  }
}
