#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "ex2l/metrics.hpp"
#include "ex2l/rng.hpp"

using namespace ex2l;

namespace {

Dataset make_dataset(const std::vector<std::pair<int, int>>& cy) {
  Dataset d;
  for (auto [c, y] : cy) {
    Example e;
    e.image = NDArray({1, 1, 1});
    e.label = y;
    e.confounder = c;
    e.group = group_encode(c, y, 2);
    d.examples.push_back(e);
  }
  return d;
}

}  // namespace

TEST_CASE("accuracy report: all correct") {
  Dataset d = make_dataset({{0, 0}, {0, 1}, {1, 0}, {1, 1}});
  std::vector<int> preds = {0, 1, 0, 1};
  auto rep = accuracy_report(preds, d, "val");
  CHECK(rep.aa == 1.0);
  CHECK(rep.wga == 1.0);
}

TEST_CASE("worst group is the min over non-empty groups") {
  // groups: g0 x10 at 0.9, g1 x10 at 0.5, g2 x10 at 0.7, g3 empty
  Dataset d;
  std::vector<int> preds;
  auto push = [&](int c, int y, int n_correct, int n_total) {
    for (int i = 0; i < n_total; ++i) {
      Example e;
      e.image = NDArray({1, 1, 1});
      e.label = y;
      e.confounder = c;
      e.group = group_encode(c, y, 2);
      d.examples.push_back(e);
      preds.push_back(i < n_correct ? y : 1 - y);
    }
  };
  push(0, 0, 9, 10);
  push(0, 1, 5, 10);
  push(1, 0, 7, 10);
  auto rep = accuracy_report(preds, d, "test");
  CHECK(rep.wga == doctest::Approx(0.5));
  CHECK(rep.groups[3].count == 0);  // empty group excluded from the min
}

TEST_CASE("two groups sized (3,1): enumeration example") {
  Dataset d = make_dataset({{0, 0}, {0, 0}, {0, 0}, {1, 1}});
  std::vector<int> preds = {0, 0, 1, 1};  // group0: 2/3, group3: 1
  auto rep = accuracy_report(preds, d, "test");
  CHECK(rep.aa == doctest::Approx(0.75));
  CHECK(rep.groups[0].accuracy == doctest::Approx(2.0 / 3.0));
  CHECK(rep.groups[3].accuracy == doctest::Approx(1.0));
  CHECK(rep.wga == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("wga equals brute-force enumeration on random instances") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Dataset d;
    std::vector<int> preds;
    int n = 20 + static_cast<int>(rng.uniform_index(40));
    for (int i = 0; i < n; ++i) {
      Example e;
      e.image = NDArray({1, 1, 1});
      e.label = static_cast<int>(rng.uniform_index(2));
      e.confounder = static_cast<int>(rng.uniform_index(2));
      e.group = group_encode(e.confounder, e.label, 2);
      d.examples.push_back(e);
      preds.push_back(static_cast<int>(rng.uniform_index(2)));
    }
    auto rep = accuracy_report(preds, d, "x");

    // oracle: direct per-group tallies
    double oracle = 1.0;
    for (int g = 0; g < 4; ++g) {
      int tot = 0, ok = 0;
      for (int i = 0; i < n; ++i)
        if (d.examples[i].group == g) {
          ++tot;
          ok += preds[i] == d.examples[i].label;
        }
      if (tot > 0) oracle = std::min(oracle, static_cast<double>(ok) / tot);
    }
    CHECK(rep.wga == doctest::Approx(oracle).epsilon(1e-12));
  }
}

TEST_CASE("aa invariant under reordering, wga under within-group reordering") {
  Rng rng(9);
  Dataset d = make_dataset({{0, 0}, {0, 0}, {0, 1}, {1, 0}, {1, 1}, {1, 1}});
  std::vector<int> preds = {0, 1, 1, 0, 1, 0};
  auto base = accuracy_report(preds, d, "x");

  // full permutation of (example, pred) pairs
  std::vector<int> perm = {5, 3, 1, 0, 4, 2};
  Dataset d2;
  std::vector<int> p2;
  for (int i : perm) {
    d2.examples.push_back(d.examples[i]);
    p2.push_back(preds[i]);
  }
  auto rep2 = accuracy_report(p2, d2, "x");
  CHECK(rep2.aa == base.aa);
  CHECK(rep2.wga == base.wga);
}

TEST_CASE("accuracy report rejects empty and misaligned inputs") {
  Dataset empty;
  CHECK_THROWS_AS(accuracy_report({}, empty, "x"), UsageError);
  Dataset d = make_dataset({{0, 0}});
  CHECK_THROWS_AS(accuracy_report({0, 1}, d, "x"), UsageError);
}

TEST_CASE("linear mmd basics") {
  NDArray a({3, 2}, {1, 2, 3, 4, 5, 6});
  CHECK(linear_mmd(a, a) == 0.0);

  // means differ by a unit vector; with scaling off the value is 1
  NDArray u({2, 2}, {0, 0, 0, 0});
  NDArray v({2, 2}, {1, 0, 1, 0});
  CHECK(linear_mmd(u, v, false) == doctest::Approx(1.0));
  CHECK(linear_mmd(u, v, true) == doctest::Approx(0.5));  // divided by d

  CHECK(linear_mmd(u, v) == linear_mmd(v, u));
  CHECK(linear_mmd(u, v) >= 0.0);

  NDArray w({1, 3});
  CHECK_THROWS_AS(linear_mmd(u, w), UsageError);
}

TEST_CASE("linear mmd is zero iff the mean vectors coincide") {
  // same mean, different samples
  NDArray a({2, 2}, {1.0, 0.0, 3.0, 2.0});
  NDArray b({2, 2}, {0.0, 1.0, 4.0, 1.0});
  CHECK(linear_mmd(a, b) < 1e-12);
  NDArray c({2, 2}, {0.0, 1.0, 4.0, 1.5});
  CHECK(linear_mmd(a, c) > 1e-12);
}

TEST_CASE("monte carlo: gaussian clouds converge to the squared mean gap") {
  Rng rng(11);
  std::size_t n = 10000, d = 8;
  std::vector<double> gap = {0.8, -0.4, 0.0, 1.2, 0.1, -0.9, 0.3, 0.5};
  double want = 0.0;
  for (double g : gap) want += g * g;

  NDArray a({n, d}), b({n, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      a[i * d + j] = rng.normal();
      b[i * d + j] = rng.normal() + gap[j];
    }
  CHECK(linear_mmd(a, b, false) == doctest::Approx(want).epsilon(0.05));
}

TEST_CASE("partition report: identical parts give zero everywhere") {
  Dataset d = make_dataset({{0, 0}, {1, 1}, {0, 1}, {1, 0}});
  NDArray latents({4, 3});
  latents.fill(0.25);
  CHECK(mmd_partition(latents, d, Partition::ByLabel) == 0.0);
  CHECK(mmd_partition(latents, d, Partition::ByConfounder) == 0.0);
}

TEST_CASE("partition report separates the structured axis") {
  Rng rng(21);
  Dataset d;
  std::size_t n = 400, dim = 4;
  NDArray latents({n, dim});
  for (std::size_t i = 0; i < n; ++i) {
    Example e;
    e.image = NDArray({1, 1, 1});
    e.label = static_cast<int>(i % 2);
    e.confounder = static_cast<int>(rng.uniform_index(2));
    e.group = group_encode(e.confounder, e.label, 2);
    d.examples.push_back(e);
    for (std::size_t j = 0; j < dim; ++j)
      latents[i * dim + j] = rng.normal() + (e.label ? 3.0 : -3.0);
  }
  double by_label = mmd_partition(latents, d, Partition::ByLabel);
  double by_conf = mmd_partition(latents, d, Partition::ByConfounder);
  CHECK(by_label > 100.0 * by_conf);

  // permuting the partition labels pushes the value to resampling noise
  Dataset shuffled = d;
  for (auto& e : shuffled.examples) e.label = static_cast<int>(rng.uniform_index(2));
  CHECK(mmd_partition(latents, shuffled, Partition::ByLabel) < 0.05 * by_label);
}

TEST_CASE("partition report needs two non-empty parts") {
  Dataset d = make_dataset({{0, 0}, {0, 0}});
  NDArray latents({2, 2});
  CHECK_THROWS_AS(mmd_partition(latents, d, Partition::ByLabel), UsageError);
}

TEST_CASE("multi-part partitions aggregate as the mean of pairwise values") {
  Dataset d;
  NDArray latents({6, 1});
  double centers[3] = {0.0, 1.0, 3.0};
  for (int env = 0; env < 3; ++env)
    for (int i = 0; i < 2; ++i) {
      Example e;
      e.image = NDArray({1, 1, 1});
      e.env = env;
      d.examples.push_back(e);
      latents[(env * 2 + i)] = centers[env];
    }
  // pairwise squared gaps: 1, 9, 4 -> mean 14/3 (d-scaling keeps d=1)
  CHECK(mmd_partition(latents, d, Partition::ByEnv) ==
        doctest::Approx(14.0 / 3.0));
}

TEST_CASE("partition names round trip") {
  CHECK(partition_from_string("by-label") == Partition::ByLabel);
  CHECK(partition_from_string("by-confounder") == Partition::ByConfounder);
  CHECK(partition_from_string("by-env") == Partition::ByEnv);
  CHECK_THROWS_AS(partition_from_string("by-color"), UsageError);
}
