#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ex2l/autodiff.hpp"
#include "ex2l/rng.hpp"

using namespace ex2l;
namespace ad = ex2l::ad;

namespace {

NDArray random_array(std::vector<std::size_t> shape, Rng& rng, double lo = -2.0,
                     double hi = 2.0) {
  NDArray a(std::move(shape));
  for (std::size_t i = 0; i < a.numel(); ++i) a[i] = rng.uniform(lo, hi);
  return a;
}

// independent central-difference probe of one element of a leaf
double fd_probe(const ad::NodePtr& leaf, std::size_t idx,
                const std::function<ad::NodePtr()>& build, double eps = 1e-6) {
  double orig = leaf->value[idx];
  leaf->value[idx] = orig + eps;
  double lp = build()->value[0];
  leaf->value[idx] = orig - eps;
  double lm = build()->value[0];
  leaf->value[idx] = orig;
  return (lp - lm) / (2.0 * eps);
}

void check_grads_match_fd(const ad::NodePtr& leaf,
                          const std::function<ad::NodePtr()>& build,
                          double tol = 1e-4) {
  leaf->grad.fill(0.0);
  ad::backward(build());
  for (std::size_t i = 0; i < leaf->value.numel(); ++i) {
    double fd = fd_probe(leaf, i, build);
    double an = leaf->grad[i];
    double rel = std::fabs(an - fd) / std::max({std::fabs(an), std::fabs(fd), 1e-6});
    CAPTURE(i);
    CHECK(rel < tol);
  }
  leaf->grad.fill(0.0);
}

}  // namespace

TEST_CASE("linear composition: sum(w*x) has grad x") {
  auto w = ad::param(NDArray({3}, {1.0, 2.0, 3.0}));
  auto x = ad::constant(NDArray({3}, {4.0, 5.0, 6.0}));
  ad::backward(ad::sum_all(ad::mul(w, x)));
  CHECK(w->grad[0] == doctest::Approx(4.0));
  CHECK(w->grad[1] == doctest::Approx(5.0));
  CHECK(w->grad[2] == doctest::Approx(6.0));
}

TEST_CASE("dead relu kills the gradient") {
  auto p = ad::param(NDArray({1}, {2.0}));
  auto loss = ad::sum_all(ad::relu(ad::mul_scalar(p, -1.0)));
  CHECK(loss->value[0] == 0.0);
  ad::backward(loss);
  CHECK(p->grad[0] == 0.0);
}

TEST_CASE("backward accumulates: two passes double every slot exactly") {
  Rng rng(11);
  auto w = ad::param(random_array({4, 3}, rng));
  auto x = ad::constant(random_array({4, 3}, rng));
  auto loss = ad::mean_all(ad::mul(ad::sub(w, x), ad::sub(w, x)));
  ad::backward(loss);
  NDArray once = w->grad;
  ad::backward(loss);
  for (std::size_t i = 0; i < once.numel(); ++i)
    CHECK(w->grad[i] == 2.0 * once[i]);  // exact, not approximate
}

TEST_CASE("grad_of: linear cases") {
  auto a = ad::param(NDArray({2, 2}, {1.0, 2.0, 3.0, 4.0}));
  auto scalar = ad::sum_all(ad::mul_scalar(a, 3.0));
  NDArray g = ad::grad_of(scalar, a);
  for (std::size_t i = 0; i < 4; ++i) CHECK(g[i] == doctest::Approx(3.0));
}

TEST_CASE("grad_of leaves grad slots and graph size alone") {
  Rng rng(7);
  auto w = ad::param(random_array({5}, rng));
  auto x = ad::constant(random_array({5}, rng));
  auto mid = ad::mul(w, x);
  auto loss = ad::sum_all(ad::relu(mid));
  ad::backward(loss);
  NDArray before = w->grad;

  std::uint64_t nodes_before = ad::nodes_created();
  NDArray g = ad::grad_of(loss, mid);
  CHECK(ad::nodes_created() == nodes_before);
  for (std::size_t i = 0; i < before.numel(); ++i) CHECK(w->grad[i] == before[i]);
  CHECK(g.numel() == 5);
}

TEST_CASE("grad_of rejects unreachable targets") {
  auto a = ad::param(NDArray({1}, {1.0}));
  auto b = ad::param(NDArray({1}, {2.0}));
  auto loss = ad::sum_all(ad::mul_scalar(a, 2.0));
  CHECK_THROWS_AS(ad::grad_of(loss, b), UsageError);
}

TEST_CASE("backward rejects non-scalar roots") {
  auto a = ad::param(NDArray({3}, {1.0, 2.0, 3.0}));
  CHECK_THROWS_AS(ad::backward(ad::mul_scalar(a, 2.0)), UsageError);
}

TEST_CASE("relu output is non-negative on random inputs") {
  Rng rng(5);
  auto x = ad::constant(random_array({64}, rng));
  auto y = ad::relu(x);
  for (std::size_t i = 0; i < y->value.numel(); ++i) CHECK(y->value[i] >= 0.0);
}

TEST_CASE("bce_with_logits matches the closed forms") {
  // logit 0 -> ln 2 regardless of target
  auto l0 = ad::constant(NDArray({1}, {0.0}));
  CHECK(ad::bce_with_logits(l0, {1})->value[0] == doctest::Approx(std::log(2.0)));
  CHECK(ad::bce_with_logits(l0, {0})->value[0] == doctest::Approx(std::log(2.0)));

  // confident-correct limit
  auto big = ad::constant(NDArray({1}, {40.0}));
  CHECK(ad::bce_with_logits(big, {1})->value[0] == doctest::Approx(0.0).epsilon(1e-12));

  // logits [2,-1], targets [1,0] -> mean of ln(1+e^-2), ln(1+e^-1)
  auto l = ad::constant(NDArray({2}, {2.0, -1.0}));
  double want = 0.5 * (std::log1p(std::exp(-2.0)) + std::log1p(std::exp(-1.0)));
  CHECK(ad::bce_with_logits(l, {1, 0})->value[0] == doctest::Approx(want).epsilon(1e-12));

  // extreme logits stay finite
  auto extreme = ad::constant(NDArray({2}, {800.0, -800.0}));
  CHECK(std::isfinite(ad::bce_with_logits(extreme, {0, 1})->value[0]));

  CHECK_THROWS_AS(ad::bce_with_logits(l, {1, 2}), DataError);
}

TEST_CASE("cce_with_logits matches an independent softmax oracle") {
  // uniform logits over K classes -> ln K
  auto u = ad::constant(NDArray({1, 5}, {0.3, 0.3, 0.3, 0.3, 0.3}));
  CHECK(ad::cce_with_logits(u, {2})->value[0] == doctest::Approx(std::log(5.0)));

  // dominant logit -> ~0
  auto dom = ad::constant(NDArray({1, 3}, {50.0, 0.0, 0.0}));
  CHECK(ad::cce_with_logits(dom, {0})->value[0] == doctest::Approx(0.0).epsilon(1e-12));

  // random 3x4 vs direct softmax
  Rng rng(3);
  NDArray logits = random_array({3, 4}, rng);
  std::vector<int> targets = {1, 3, 0};
  double want = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    double z = 0.0;
    for (std::size_t k = 0; k < 4; ++k) z += std::exp(logits[i * 4 + k]);
    want -= std::log(std::exp(logits[i * 4 + targets[i]]) / z);
  }
  want /= 3.0;
  CHECK(ad::cce_with_logits(ad::constant(logits), targets)->value[0] ==
        doctest::Approx(want).epsilon(1e-10));

  CHECK_THROWS_AS(ad::cce_with_logits(ad::constant(logits), {0, 0, 4}), DataError);
}

TEST_CASE("per-op gradients match finite differences") {
  Rng rng(23);

  SUBCASE("elementwise chain") {
    auto w = ad::param(random_array({6}, rng, 0.2, 2.0));
    auto c = ad::constant(random_array({6}, rng, 0.2, 2.0));
    check_grads_match_fd(w, [&] {
      auto t = ad::mul(ad::add(w, c), ad::sub(w, c));
      return ad::mean_all(ad::abs_val(t));
    });
  }

  SUBCASE("sqrt and log") {
    auto w = ad::param(random_array({5}, rng, 0.5, 2.0));
    check_grads_match_fd(w, [&] {
      return ad::sum_all(ad::add(ad::sqrt_val(w), ad::log_eps(w, 1e-8)));
    });
  }

  SUBCASE("row ops") {
    auto w = ad::param(random_array({3, 4}, rng, 0.1, 2.0));
    auto s = ad::param(random_array({3}, rng, 0.5, 2.0));
    check_grads_match_fd(w, [&] {
      return ad::mean_all(ad::div_rows_eps(ad::sub_rows(w, s), s, 1e-8));
    });
    check_grads_match_fd(s, [&] { return ad::mean_all(ad::mul_rows(w, s)); });
    check_grads_match_fd(s, [&] {
      return ad::mean_all(ad::div_rows_eps(w, s, 1e-8));
    });
  }

  SUBCASE("l1 normalize") {
    auto w = ad::param(random_array({2, 6}, rng, 0.1, 1.5));
    check_grads_match_fd(w, [&] {
      auto p = ad::l1_normalize_rows(w, 1e-8);
      return ad::sum_all(ad::mul(p, p));
    });
  }

  SUBCASE("conv2d") {
    auto x = ad::param(random_array({2, 2, 6, 6}, rng));
    auto w = ad::param(random_array({3, 2, 3, 3}, rng, -0.5, 0.5));
    auto b = ad::param(random_array({3}, rng, -0.1, 0.1));
    auto build = [&] { return ad::mean_all(ad::mul(ad::conv2d(x, w, b, 1, 1),
                                                   ad::conv2d(x, w, b, 1, 1))); };
    check_grads_match_fd(w, build);
    check_grads_match_fd(b, build);
    check_grads_match_fd(x, build);
  }

  SUBCASE("conv2d stride 2 no pad") {
    auto x = ad::param(random_array({1, 1, 6, 6}, rng));
    auto w = ad::param(random_array({2, 1, 3, 3}, rng, -0.5, 0.5));
    auto b = ad::param(random_array({2}, rng, -0.1, 0.1));
    check_grads_match_fd(w, [&] {
      return ad::mean_all(ad::conv2d(x, w, b, 2, 0));
    });
  }

  SUBCASE("maxpool + dense") {
    auto x = ad::param(random_array({2, 1, 4, 4}, rng));
    auto w = ad::param(random_array({2, 4}, rng, -0.5, 0.5));
    auto b = ad::param(random_array({2}, rng, -0.1, 0.1));
    auto build = [&] {
      auto pooled = ad::maxpool2(x);
      auto flat = ad::reshape(pooled, {2, 4});
      return ad::mean_all(ad::dense(flat, w, b));
    };
    check_grads_match_fd(w, build);
    check_grads_match_fd(x, build);
  }

  SUBCASE("losses") {
    auto logits = ad::param(random_array({4}, rng));
    check_grads_match_fd(logits, [&] {
      return ad::bce_with_logits(logits, {1, 0, 1, 0});
    });
    auto ml = ad::param(random_array({3, 4}, rng));
    check_grads_match_fd(ml, [&] { return ad::cce_with_logits(ml, {0, 2, 3}); });
  }

  SUBCASE("scale_channels_sum") {
    auto act = ad::param(random_array({2, 3, 2, 2}, rng));
    NDArray alpha = random_array({2, 3}, rng);
    check_grads_match_fd(act, [&] {
      auto m = ad::scale_channels_sum(act, alpha);
      return ad::mean_all(ad::mul(m, m));
    });
  }
}

TEST_CASE("mul_scalar by exact zero adds nothing to gradients") {
  Rng rng(9);
  auto w = ad::param(random_array({4}, rng));
  auto base = ad::sum_all(ad::mul(w, w));
  auto extra = ad::mul_scalar(ad::sum_all(ad::abs_val(w)), 0.0);
  ad::backward(ad::add(base, extra));
  NDArray with_zero = w->grad;
  w->grad.fill(0.0);
  ad::backward(base);
  for (std::size_t i = 0; i < 4; ++i) CHECK(with_zero[i] == w->grad[i]);
}

TEST_CASE("kernel determinism: identical forward twice, threads respected") {
  Rng rng(31);
  auto x = ad::constant(random_array({4, 3, 8, 8}, rng));
  auto w = ad::constant(random_array({8, 3, 3, 3}, rng));
  auto b = ad::constant(random_array({8}, rng));
  auto y1 = ad::conv2d(x, w, b, 1, 1);
  auto y2 = ad::conv2d(x, w, b, 1, 1);
  for (std::size_t i = 0; i < y1->value.numel(); ++i)
    CHECK(y1->value[i] == y2->value[i]);

  int saved = ad::kernel_threads();
  ad::set_kernel_threads(2);
  auto y3 = ad::conv2d(x, w, b, 1, 1);
  auto y4 = ad::conv2d(x, w, b, 1, 1);
  for (std::size_t i = 0; i < y3->value.numel(); ++i)
    CHECK(y3->value[i] == y4->value[i]);
  ad::set_kernel_threads(saved);
}
