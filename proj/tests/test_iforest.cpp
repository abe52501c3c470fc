/*
 * Copyright 2026 The Fallscope Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "fallscope/errors.hpp"
#include "fallscope/iforest.hpp"

namespace fallscope {
namespace {

FeatureMatrix Gaussian(int rows, int cols, std::uint64_t seed) {
  Rng rng(seed);
  FeatureMatrix m(rows, cols);
  for (auto& v : m.values) v = rng.Normal();
  return m;
}

ITree Leaf(std::uint64_t size) {
  ITree t;
  t.nodes.push_back(ITreeNode{true, 0, 0.0f, -1, -1, size});
  return t;
}

std::vector<std::uint64_t> LeafSizes(const ITree& t) {
  std::vector<std::uint64_t> out;
  for (const auto& n : t.nodes) {
    if (n.leaf) out.push_back(n.size);
  }
  return out;
}

// Direct evaluation of 2 H(n-1) - 2 (n-1)/n with H(i) ~ ln(i) + gamma.
double DirectC(double n) { return 2.0 * (std::log(n - 1.0) + 0.5772156649) - 2.0 * (n - 1.0) / n; }

TEST_SUITE("iforest") {

TEST_CASE("average path length") {
  CHECK(AveragePathLength(0) == 0.0);
  CHECK(AveragePathLength(1) == 0.0);
  CHECK(AveragePathLength(2) == 1.0);
  CHECK(std::fabs(AveragePathLength(256) - DirectC(256)) <= 0.01);
  CHECK(AveragePathLength(256) == doctest::Approx(10.244).epsilon(1e-4));
  for (std::uint64_t n = 3; n < 5000; ++n) CHECK(AveragePathLength(n) >= AveragePathLength(n - 1));
}

TEST_CASE("degenerate trees") {
  Rng rng(1);
  FeatureMatrix one(1, 3);
  const std::vector<int> idx1{0};
  const auto t1 = BuildTree(one, idx1, 8, rng);
  REQUIRE(t1.nodes.size() == 1);
  CHECK(t1.nodes[0].leaf);
  CHECK(t1.nodes[0].size == 1);
  CHECK(t1.Depth() == 0);

  FeatureMatrix same(9, 2);
  for (int r = 0; r < 9; ++r) same.row(r)[0] = 0.7, same.row(r)[1] = -3.0;
  std::vector<int> idx9(9);
  std::iota(idx9.begin(), idx9.end(), 0);
  const auto t9 = BuildTree(same, idx9, 8, rng);
  REQUIRE(t9.nodes.size() == 1);
  CHECK(t9.nodes[0].size == 9);

  // Adjacent floats leave no float strictly between them.
  FeatureMatrix tight(2, 1);
  tight.values = {1.0, static_cast<double>(std::nextafter(1.0f, 2.0f))};
  const std::vector<int> idx2{0, 1};
  CHECK(BuildTree(tight, idx2, 8, rng).nodes.size() == 1);
}

TEST_CASE("eight distinct points") {
  FeatureMatrix data(8, 1);
  data.values = {-3.1, -1.0, -0.2, 0.0, 0.4, 1.5, 2.25, 9.0};
  std::vector<int> idx(8);
  std::iota(idx.begin(), idx.end(), 0);
  bool some_unresolved = false;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(seed);
    // Unlimited height always isolates every point.
    const auto full = BuildTree(data, idx, 7, rng);
    for (auto s : LeafSizes(full)) CHECK(s == 1);
    // At the log2 limit a lopsided split can leave a shared leaf.
    Rng rng3(seed);
    const auto capped = BuildTree(data, idx, 3, rng3);
    CHECK(capped.Depth() <= 3);
    const auto sizes = LeafSizes(capped);
    CHECK(std::accumulate(sizes.begin(), sizes.end(), std::uint64_t{0}) == 8);
    some_unresolved |= std::any_of(sizes.begin(), sizes.end(), [](auto s) { return s > 1; });
  }
  CHECK(some_unresolved);
}

TEST_CASE("split values lie strictly inside the node range") {
  const auto data = Gaussian(300, 3, 5);
  std::vector<int> idx(300);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(6);
  const auto tree = BuildTree(data, idx, 20, rng);
  // Replay: route every point and check each internal node separates its points.
  std::vector<std::vector<int>> members(tree.nodes.size());
  members[0] = idx;
  for (std::size_t i = 0; i < tree.nodes.size(); ++i) {
    const auto& n = tree.nodes[i];
    if (n.leaf) {
      CHECK(n.size == members[i].size());
      continue;
    }
    double mn = 1e300, mx = -1e300;
    for (int r : members[i]) {
      const double v = data.row(r)[n.split_attr];
      mn = std::min(mn, v), mx = std::max(mx, v);
      members[v < n.split_value ? n.left : n.right].push_back(r);
    }
    CHECK(mn < n.split_value);
    CHECK(n.split_value < mx);
    CHECK(n.left == static_cast<int>(i) + 1);
  }
}

TEST_CASE("fit sizes") {
  const auto big = Gaussian(12236, 4, 7);
  const auto forest = IsolationForest::Fit(big, ForestOptions{256, 100, 1});
  CHECK(forest.trees().size() == 100);
  CHECK(forest.sample_size() == 256);
  CHECK(forest.height_limit() == 8);
  for (const auto& t : forest.trees()) {
    const auto sizes = LeafSizes(t);
    CHECK(std::accumulate(sizes.begin(), sizes.end(), std::uint64_t{0}) == 256);
    CHECK(t.Depth() <= 8);
  }

  const auto small = Gaussian(10, 2, 8);
  const auto f10 = IsolationForest::Fit(small, ForestOptions{256, 5, 1});
  CHECK(f10.sample_size() == 10);
  for (const auto& t : f10.trees()) {
    const auto sizes = LeafSizes(t);
    CHECK(std::accumulate(sizes.begin(), sizes.end(), std::uint64_t{0}) == 10);
  }
}

TEST_CASE("fit preconditions") {
  CHECK_THROWS_AS(IsolationForest::Fit(FeatureMatrix(0, 2), ForestOptions{}), ContractError);
  const auto data = Gaussian(20, 2, 1);
  CHECK_THROWS_AS(IsolationForest::Fit(data, ForestOptions{1, 10, 0}), ContractError);
  CHECK_THROWS_AS(IsolationForest::Fit(data, ForestOptions{256, 0, 0}), ContractError);
  auto bad = data;
  bad.values[3] = std::nan("");
  CHECK_THROWS_AS(IsolationForest::Fit(bad, ForestOptions{}), ContractError);
}

TEST_CASE("fit is deterministic per seed") {
  const auto data = Gaussian(1000, 4, 9);
  const auto a = IsolationForest::Fit(data, ForestOptions{256, 50, 3});
  const auto b = IsolationForest::Fit(data, ForestOptions{256, 50, 3});
  const auto c = IsolationForest::Fit(data, ForestOptions{256, 50, 4});
  CHECK(a == b);
  for (std::size_t t = 0; t < a.trees().size(); ++t) CHECK(a.trees()[t] == b.trees()[t]);
  CHECK_FALSE(a == c);
  CHECK(a.ScoreAll(data) == b.ScoreAll(data));
}

TEST_CASE("path lengths on hand-built trees") {
  const std::vector<double> x{0.5};
  CHECK(PathLength(Leaf(1), x) == 0.0);

  ITree t;
  t.nodes = {ITreeNode{false, 0, 1.0f, 1, 2, 0}, ITreeNode{true, 0, 0.0f, -1, -1, 2},
             ITreeNode{true, 0, 0.0f, -1, -1, 1}};
  CHECK(PathLength(t, x) == 2.0);
  CHECK(PathLength(t, std::vector<double>{1.0}) == 1.0);  // ties go right

  // A chain of 8 internal nodes ending in a 256-point leaf.
  ITree pre;
  for (int d = 0; d < 8; ++d) pre.nodes.push_back(ITreeNode{false, 0, 100.0f, d + 1, 0, 0});
  pre.nodes.push_back(ITreeNode{true, 0, 0.0f, -1, -1, 256});
  for (int d = 7; d >= 0; --d) {
    pre.nodes[d].right = static_cast<std::int32_t>(pre.nodes.size());
    pre.nodes.push_back(ITreeNode{true, 0, 0.0f, -1, -1, 1});
  }
  CHECK(PathLength(pre, x) == doctest::Approx(8.0 + AveragePathLength(256)).epsilon(1e-15));
  CHECK(PathLength(pre, x) == doctest::Approx(18.244).epsilon(1e-4));
  CHECK(pre.Depth() == 8);

  IsolationForest f(ForestOptions{256, 1, 0}, 1, 256, {pre});
  CHECK_THROWS_AS(f.Score(std::vector<double>{1.0, 2.0}), ContractError);
}

TEST_CASE("score endpoints") {
  // Every tree a single leaf holding the whole sample: E(h) = c(psi).
  std::vector<ITree> full(10, Leaf(256));
  IsolationForest half(ForestOptions{256, 10, 0}, 2, 256, full);
  CHECK(half.Score(std::vector<double>{0.0, 0.0}) == 0.5);
  std::vector<ITree> isolated(10, Leaf(1));
  IsolationForest one(ForestOptions{256, 10, 0}, 2, 256, isolated);
  CHECK(one.Score(std::vector<double>{0.0, 0.0}) == 1.0);

  CHECK_THROWS_AS(IsolationForest(ForestOptions{256, 3, 0}, 2, 256, full), ContractError);
  CHECK_THROWS_AS(IsolationForest(ForestOptions{256, 0, 0}, 2, 256, {}), ContractError);
}

TEST_CASE("scores lie in the open unit interval and fall with path length") {
  const auto data = Gaussian(2000, 3, 11);
  const auto forest = IsolationForest::Fit(data, ForestOptions{256, 100, 2});
  const auto test = Gaussian(500, 3, 12);
  std::vector<std::pair<double, double>> pairs;
  for (int i = 0; i < test.rows; ++i) {
    const double s = forest.Score(test.row(i));
    CHECK(s > 0.0);
    CHECK(s < 1.0);
    pairs.emplace_back(forest.MeanPathLength(test.row(i)), s);
  }
  std::sort(pairs.begin(), pairs.end());
  for (std::size_t i = 1; i < pairs.size(); ++i) CHECK(pairs[i].second <= pairs[i - 1].second);
}

TEST_CASE("a planted far outlier scores above the median") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto data = Gaussian(1000, 1, seed);
    data.values[0] = 8.0;
    const auto forest = IsolationForest::Fit(data, ForestOptions{256, 100, seed});
    auto scores = forest.ScoreAll(data);
    const double outlier = scores[0];
    std::nth_element(scores.begin(), scores.begin() + 500, scores.end());
    CHECK(outlier > scores[500]);
  }
}

TEST_CASE("planted outliers rank at the top") {
  int good = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(MixSeed(seed, 99));
    FeatureMatrix data(1020, 1);
    for (int i = 0; i < 1000; ++i) data.values[i] = rng.Normal();
    for (int i = 0; i < 20; ++i) data.values[1000 + i] = (i % 2 ? 1 : -1) * rng.Uniform(6.0, 10.0);
    const auto forest = IsolationForest::Fit(data, ForestOptions{256, 100, seed});
    const auto th = ThresholdByFraction(forest.ScoreAll(data), 40.0 / 1020.0);
    REQUIRE(th.flagged_count == 40);
    bool all = true;
    for (int i = 0; i < 20; ++i) all &= th.flags[1000 + i] == 1;
    good += all;
  }
  CHECK(good >= 9);
}

TEST_CASE("rescaling one feature by two changes nothing") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto data = Gaussian(800, 3, seed + 20);
    auto scaled = data;
    for (int r = 0; r < scaled.rows; ++r) scaled.row(r)[1] *= 2.0;
    const ForestOptions opt{256, 50, seed};
    const auto a = IsolationForest::Fit(data, opt);
    const auto b = IsolationForest::Fit(scaled, opt);
    for (std::size_t t = 0; t < a.trees().size(); ++t) {
      const auto& na = a.trees()[t].nodes;
      const auto& nb = b.trees()[t].nodes;
      REQUIRE(na.size() == nb.size());
      for (std::size_t i = 0; i < na.size(); ++i) {
        CHECK(na[i].split_attr == nb[i].split_attr);
        CHECK(na[i].size == nb[i].size);
        const float factor = (!na[i].leaf && na[i].split_attr == 1) ? 2.0f : 1.0f;
        CHECK(nb[i].split_value == factor * na[i].split_value);
      }
    }
    const auto sa = a.ScoreAll(data);
    const auto sb = b.ScoreAll(scaled);
    CHECK(sa == sb);
    CHECK(ThresholdByFraction(sa, 0.04).flags == ThresholdByFraction(sb, 0.04).flags);
  }
}

TEST_CASE("fraction threshold counts") {
  std::vector<double> scores(1000);
  Rng rng(1);
  for (auto& s : scores) s = rng.Uniform();
  const auto t = ThresholdByFraction(scores, 0.04);
  CHECK(t.flagged_count == 40);
  CHECK(std::count(t.flags.begin(), t.flags.end(), 1) == 40);

  CHECK(FlagCount(2070, 0.167) == 346);
  CHECK(FlagCount(1000, 0.04) == 40);
  CHECK(FlagCount(100, 0.07) == 7);
  CHECK(FlagCount(3, 0.5) == 2);
  CHECK(FlagCount(0, 0.5) == 0);
  CHECK_THROWS_AS(FlagCount(10, 0.0), ContractError);
  CHECK_THROWS_AS(FlagCount(10, 1.0), ContractError);
  CHECK_THROWS_AS(ThresholdByFraction(scores, -0.1), ContractError);
  CHECK_THROWS_AS(ThresholdByFraction(scores, std::nan("")), ContractError);
}

TEST_CASE("fraction threshold selects the top scores") {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.Below(3000);
    std::vector<double> scores(n);
    // Coarse values force ties.
    for (auto& s : scores) s = std::round(rng.Uniform() * 50) / 50;
    const double fraction = rng.Uniform(0.001, 0.999);
    const auto t = ThresholdByFraction(scores, fraction);
    // Oracle: sort (score desc, index asc) and take the first k.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](auto a, auto b) {
      return scores[a] != scores[b] ? scores[a] > scores[b] : a < b;
    });
    const std::size_t k = static_cast<std::size_t>(std::ceil(fraction * n - 1e-9));
    CHECK(t.flagged_count == k);
    std::vector<std::uint8_t> want(n, 0);
    for (std::size_t i = 0; i < k; ++i) want[order[i]] = 1;
    CHECK(t.flags == want);
    if (k > 0) CHECK(t.threshold == scores[order[k - 1]]);
  }
  const std::vector<double> equal(10, 0.5);
  const auto t = ThresholdByFraction(equal, 0.3);
  CHECK(t.flags == std::vector<std::uint8_t>{1, 1, 1, 0, 0, 0, 0, 0, 0, 0});
}

}  // TEST_SUITE

}  // namespace
}  // namespace fallscope
