#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "ex2l/gradcam.hpp"
#include "ex2l/similarity.hpp"

using namespace ex2l;
namespace ad = ex2l::ad;

namespace {

NDArray random_array(std::vector<std::size_t> shape, Rng& rng, double lo = -1.0,
                     double hi = 1.0) {
  NDArray a(std::move(shape));
  for (std::size_t i = 0; i < a.numel(); ++i) a[i] = rng.uniform(lo, hi);
  return a;
}

// trace over a free-standing activation leaf with a dense head on top
struct LeafTrace {
  ForwardTrace trace;
  ad::NodePtr act;
  ad::NodePtr w, b;
};

LeafTrace make_leaf_trace(std::size_t B, std::size_t K, std::size_t H,
                          std::size_t W, std::size_t n_logits, Rng& rng) {
  LeafTrace t;
  t.act = ad::param(random_array({B, K, H, W}, rng));
  t.w = ad::param(random_array({n_logits, K * H * W}, rng, -0.3, 0.3));
  t.b = ad::param(random_array({n_logits}, rng, -0.1, 0.1));
  auto flat = ad::reshape(t.act, {B, K * H * W});
  t.trace.activation = t.act;
  t.trace.latent = flat;
  t.trace.logits = ad::dense(flat, t.w, t.b);
  return t;
}

}  // namespace

TEST_CASE("target_logit selection") {
  auto logits = ad::constant(NDArray({1}, {2.0}));
  CHECK(target_logit(logits, {1}, HeadKind::Binary)->value[0] == 2.0);
  CHECK(target_logit(logits, {0}, HeadKind::Binary)->value[0] == -2.0);

  auto multi = ad::constant(NDArray({1, 3}, {0.1, -3.0, 5.0}));
  CHECK(target_logit(multi, {2}, HeadKind::Multiclass)->value[0] == 5.0);

  CHECK_THROWS_AS(target_logit(logits, {2}, HeadKind::Binary), DataError);
  CHECK_THROWS_AS(target_logit(multi, {3}, HeadKind::Multiclass), DataError);
}

TEST_CASE("cam_weights: linear head with per-channel coefficients") {
  // target = sum_k c_k * sum_ij A^k  =>  alpha_k = c_k
  std::size_t B = 2, K = 3, H = 2, W = 2;
  Rng rng(5);
  auto act = ad::param(random_array({B, K, H, W}, rng));
  NDArray coeff({B, K}, {1.0, -2.0, 0.5, 3.0, 0.0, -1.0});
  auto combined = ad::scale_channels_sum(act, coeff);
  auto target = ad::sum_all(combined);

  ForwardTrace trace;
  trace.activation = act;
  NDArray alpha = cam_weights(trace, target);
  for (std::size_t i = 0; i < coeff.numel(); ++i)
    CHECK(alpha[i] == doctest::Approx(coeff[i]).epsilon(1e-12));
}

TEST_CASE("cam_weights: target independent of the activation gives zeros") {
  Rng rng(6);
  auto act = ad::param(random_array({1, 2, 2, 2}, rng));
  auto target = ad::mul_scalar(ad::sum_all(act), 0.0);
  ForwardTrace trace;
  trace.activation = act;
  NDArray alpha = cam_weights(trace, target);
  for (std::size_t i = 0; i < alpha.numel(); ++i) CHECK(alpha[i] == 0.0);
}

TEST_CASE("cam_weights match finite differences of the target w.r.t. pixels") {
  Rng rng(7);
  LeafTrace t = make_leaf_trace(2, 3, 3, 3, 1, rng);
  std::vector<int> targets = {1, 0};
  auto build = [&] {
    return ad::sum_all(target_logit(t.trace.logits, targets, HeadKind::Binary));
  };
  // rebuild head per evaluation so perturbed activations propagate
  auto rebuild = [&] {
    auto flat = ad::reshape(t.act, {std::size_t{2}, std::size_t{27}});
    auto logits = ad::dense(flat, t.w, t.b);
    return ad::sum_all(target_logit(logits, targets, HeadKind::Binary));
  };
  (void)build;
  NDArray alpha = cam_weights(t.trace, target_logit(t.trace.logits, targets,
                                                    HeadKind::Binary));

  std::size_t P = 9;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t k = 0; k < 3; ++k) {
      // finite-difference mean over the channel's pixels
      double fd_mean = 0.0;
      for (std::size_t p = 0; p < P; ++p) {
        std::size_t idx = (b * 3 + k) * P + p;
        double orig = t.act->value[idx];
        double eps = 1e-5;
        t.act->value[idx] = orig + eps;
        double lp = rebuild()->value[0];
        t.act->value[idx] = orig - eps;
        double lm = rebuild()->value[0];
        t.act->value[idx] = orig;
        fd_mean += (lp - lm) / (2.0 * eps);
      }
      fd_mean /= static_cast<double>(P);
      double rel = std::fabs(alpha[b * 3 + k] - fd_mean) /
                   std::max({std::fabs(fd_mean), std::fabs(alpha[b * 3 + k]), 1e-6});
      CHECK(rel < 1e-4);
    }
}

TEST_CASE("heatmap: hand-evaluated combination and ReLU clamp") {
  // K=2, alpha=[1,-1], A^1=[[2,0]], A^2=[[0,3]] -> ReLU([2,-3]) = [2,0]
  NDArray act({1, 2, 1, 2}, {2.0, 0.0, 0.0, 3.0});
  ForwardTrace trace;
  trace.activation = ad::constant(act);
  NDArray alpha({1, 2}, {1.0, -1.0});
  auto map = heatmap(trace, alpha);
  CHECK(map->value.shape() == std::vector<std::size_t>{1, 1, 2});
  CHECK(map->value[0] == 2.0);
  CHECK(map->value[1] == 0.0);
}

TEST_CASE("heatmap degenerate cases are zero maps") {
  Rng rng(9);
  ForwardTrace trace;
  trace.activation = ad::constant(random_array({1, 2, 2, 2}, rng));
  NDArray zero_alpha({1, 2});
  auto z = heatmap(trace, zero_alpha);
  for (std::size_t i = 0; i < z->value.numel(); ++i) CHECK(z->value[i] == 0.0);

  ForwardTrace neg;
  neg.activation = ad::constant(random_array({1, 1, 2, 2}, rng, -2.0, -0.5));
  NDArray one_alpha({1, 1}, {1.0});
  auto n = heatmap(neg, one_alpha);
  for (std::size_t i = 0; i < n->value.numel(); ++i) CHECK(n->value[i] == 0.0);
}

TEST_CASE("heatmaps are non-negative on random nets") {
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    LeafTrace t = make_leaf_trace(2, 4, 3, 3, 1, rng);
    std::vector<int> targets = {static_cast<int>(rng.uniform_index(2)),
                                static_cast<int>(rng.uniform_index(2))};
    auto tl = target_logit(t.trace.logits, targets, HeadKind::Binary);
    auto map = heatmap(t.trace, cam_weights(t.trace, tl));
    for (std::size_t i = 0; i < map->value.numel(); ++i)
      CHECK(map->value[i] >= 0.0);
  }
}

TEST_CASE("positive scaling of the target scales alpha and keeps the support") {
  Rng rng(11);
  LeafTrace t = make_leaf_trace(1, 3, 4, 4, 1, rng);
  auto tl = target_logit(t.trace.logits, {1}, HeadKind::Binary);
  NDArray a1 = cam_weights(t.trace, tl);
  NDArray a3 = cam_weights(t.trace, ad::mul_scalar(tl, 3.0));
  for (std::size_t i = 0; i < a1.numel(); ++i)
    CHECK(a3[i] == doctest::Approx(3.0 * a1[i]).epsilon(1e-12));

  auto m1 = heatmap(t.trace, a1);
  auto m3 = heatmap(t.trace, a3);
  for (std::size_t i = 0; i < m1->value.numel(); ++i)
    CHECK((m1->value[i] > 0.0) == (m3->value[i] > 0.0));
}

TEST_CASE("alpha detachment: frozen weights reproduce parameter gradients") {
  Rng rng(12);
  LeafTrace ty = make_leaf_trace(2, 3, 3, 3, 1, rng);
  LeafTrace tc = make_leaf_trace(2, 3, 3, 3, 1, rng);
  std::vector<int> y = {1, 0}, c = {0, 1};
  SimilarityFn fn{SimKind::NegMae};

  auto run = [&](const NDArray* frozen_y, const NDArray* frozen_c) {
    NDArray ay = frozen_y ? *frozen_y
                          : cam_weights(ty.trace, target_logit(ty.trace.logits, y,
                                                               HeadKind::Binary));
    NDArray ac = frozen_c ? *frozen_c
                          : cam_weights(tc.trace, target_logit(tc.trace.logits, c,
                                                               HeadKind::Binary));
    auto loss = evaluate(fn, heatmap(ty.trace, ay), heatmap(tc.trace, ac));
    ty.w->grad.fill(0.0);
    ty.act->grad.fill(0.0);
    ad::backward(loss);
    return std::pair<NDArray, NDArray>{ty.w->grad, ty.act->grad};
  };

  NDArray ay = cam_weights(ty.trace, target_logit(ty.trace.logits, y, HeadKind::Binary));
  NDArray ac = cam_weights(tc.trace, target_logit(tc.trace.logits, c, HeadKind::Binary));

  auto [gw_live, gact_live] = run(nullptr, nullptr);
  auto [gw_frozen, gact_frozen] = run(&ay, &ac);
  // alpha is a constant either way, so gradients agree bit for bit
  for (std::size_t i = 0; i < gw_live.numel(); ++i)
    CHECK(gw_live[i] == gw_frozen[i]);
  for (std::size_t i = 0; i < gact_live.numel(); ++i)
    CHECK(gact_live[i] == gact_frozen[i]);
}

TEST_CASE("corrupting the activation backward changes parameter gradients") {
  Rng rng(13);
  LeafTrace ty = make_leaf_trace(2, 3, 3, 3, 1, rng);
  LeafTrace tc = make_leaf_trace(2, 3, 3, 3, 1, rng);
  std::vector<int> y = {1, 0}, c = {0, 1};
  SimilarityFn fn{SimKind::NegMse};

  NDArray ay = cam_weights(ty.trace, target_logit(ty.trace.logits, y, HeadKind::Binary));
  NDArray ac = cam_weights(tc.trace, target_logit(tc.trace.logits, c, HeadKind::Binary));

  auto grads_with = [&](bool corrupt) {
    auto map_y = heatmap(ty.trace, ay);
    if (corrupt) {
      auto inner = map_y->backward_fn;
      map_y->backward_fn = [inner](const ad::Node& self, const NDArray& g,
                                   const std::vector<NDArray*>& pg) {
        NDArray g2 = g;
        for (std::size_t i = 0; i < g2.numel(); ++i) g2[i] *= 1.5;
        inner(self, g2, pg);
      };
    }
    auto loss = evaluate(fn, map_y, heatmap(tc.trace, ac));
    ty.act->grad.fill(0.0);
    ad::backward(loss);
    return ty.act->grad;
  };

  NDArray clean = grads_with(false);
  NDArray dirty = grads_with(true);
  double diff = 0.0;
  for (std::size_t i = 0; i < clean.numel(); ++i)
    diff = std::max(diff, std::fabs(clean[i] - dirty[i]));
  CHECK(diff > 1e-8);
}

TEST_CASE("export_heatmap: PGM bytes for the reference map") {
  NDArray m({2, 2}, {0.0, 1.0, 2.0, 4.0});
  std::string path = "/tmp/ex2l_test_map.pgm";
  export_heatmap(m, path);

  std::ifstream in(path, std::ios::binary);
  std::string header;
  std::getline(in, header);
  CHECK(header == "P5");
  std::string dims, maxval;
  std::getline(in, dims);
  std::getline(in, maxval);
  CHECK(dims == "2 2");
  CHECK(maxval == "255");
  unsigned char px[4];
  in.read(reinterpret_cast<char*>(px), 4);
  CHECK(px[0] == 0);
  CHECK(px[1] == 63);
  CHECK(px[2] == 127);
  CHECK(px[3] == 255);
  std::remove(path.c_str());
}

TEST_CASE("export_heatmap: constant and zero maps export all-zero pixels") {
  for (double v : {0.0, 0.7}) {
    NDArray m = NDArray::full({2, 2}, v);
    std::string path = "/tmp/ex2l_test_const.pgm";
    export_heatmap(m, path);
    std::ifstream in(path, std::ios::binary);
    std::string line;
    for (int i = 0; i < 3; ++i) std::getline(in, line);
    unsigned char px[4];
    in.read(reinterpret_cast<char*>(px), 4);
    for (int i = 0; i < 4; ++i) CHECK(px[i] == 0);
    std::remove(path.c_str());
  }
}

TEST_CASE("export_heatmap failure paths") {
  NDArray m({2, 2}, {0.0, 1.0, 2.0, 4.0});
  CHECK_THROWS_AS(export_heatmap(m, "/nonexistent_dir_zz/x.pgm"), DataError);
  CHECK_THROWS_AS(export_heatmap(NDArray({4}), "/tmp/x.pgm"), UsageError);
}

TEST_CASE("label and confounder maps from one architecture share a shape") {
  Rng rng(14);
  LeafTrace a = make_leaf_trace(3, 4, 5, 5, 1, rng);
  LeafTrace b = make_leaf_trace(3, 4, 5, 5, 1, rng);
  std::vector<int> y = {1, 0, 1};
  auto ma = heatmap(a.trace, cam_weights(a.trace, target_logit(a.trace.logits, y,
                                                               HeadKind::Binary)));
  auto mb = heatmap(b.trace, cam_weights(b.trace, target_logit(b.trace.logits, y,
                                                               HeadKind::Binary)));
  CHECK(ma->value.shape() == mb->value.shape());
}
