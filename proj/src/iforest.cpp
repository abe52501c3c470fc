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

#include "fallscope/iforest.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "fallscope/errors.hpp"

namespace fallscope {

namespace {

constexpr double kEulerGamma = 0.5772156649;

// Smallest float strictly greater than v (as a double comparison).
float FloatAbove(double v) {
  float f = static_cast<float>(v);
  while (static_cast<double>(f) <= v) f = std::nextafter(f, std::numeric_limits<float>::infinity());
  return f;
}

float FloatBelow(double v) {
  float f = static_cast<float>(v);
  while (static_cast<double>(f) >= v) f = std::nextafter(f, -std::numeric_limits<float>::infinity());
  return f;
}

struct Builder {
  const FeatureMatrix& data;
  int height_limit;
  Rng& rng;
  ITree tree;
  std::vector<int> candidates;
  std::vector<double> lo, hi;

  void Grow(std::span<int> rows, int depth) {
    const int self = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();
    if (depth >= height_limit || rows.size() <= 1) {
      tree.nodes[self].size = rows.size();
      return;
    }
    // Attributes with room for a float split strictly inside (min, max).
    candidates.clear();
    lo.assign(data.cols, 0.0);
    hi.assign(data.cols, 0.0);
    for (int a = 0; a < data.cols; ++a) {
      double mn = std::numeric_limits<double>::infinity();
      double mx = -mn;
      for (int r : rows) {
        const double v = data.row(r)[a];
        mn = std::min(mn, v);
        mx = std::max(mx, v);
      }
      lo[a] = mn;
      hi[a] = mx;
      if (mn < mx && static_cast<double>(FloatAbove(mn)) < mx) candidates.push_back(a);
    }
    if (candidates.empty()) {
      tree.nodes[self].size = rows.size();
      return;
    }
    const int attr = candidates[rng.Below(candidates.size())];
    const double mn = lo[attr];
    const double mx = hi[attr];
    const double drawn = mn + rng.UniformOpen() * (mx - mn);
    const float split = std::clamp(static_cast<float>(drawn), FloatAbove(mn), FloatBelow(mx));

    auto middle = std::stable_partition(rows.begin(), rows.end(), [&](int r) {
      return data.row(r)[attr] < static_cast<double>(split);
    });
    const auto left_count = static_cast<std::size_t>(middle - rows.begin());

    tree.nodes[self].leaf = false;
    tree.nodes[self].split_attr = static_cast<std::uint32_t>(attr);
    tree.nodes[self].split_value = split;
    tree.nodes[self].left = static_cast<int>(tree.nodes.size());
    Grow(rows.subspan(0, left_count), depth + 1);
    tree.nodes[self].right = static_cast<int>(tree.nodes.size());
    Grow(rows.subspan(left_count), depth + 1);
  }
};

int DepthFrom(const ITree& tree, int node) {
  const auto& n = tree.nodes[node];
  if (n.leaf) return 0;
  return 1 + std::max(DepthFrom(tree, n.left), DepthFrom(tree, n.right));
}

int HeightLimitFor(int sample_size) {
  return sample_size <= 1 ? 0 : static_cast<int>(std::ceil(std::log2(static_cast<double>(sample_size))));
}

}  // namespace

void FeatureMatrix::AppendRow(std::span<const double> r) {
  if (rows == 0 && cols == 0) cols = static_cast<int>(r.size());
  if (static_cast<int>(r.size()) != cols) throw ContractError("feature row width differs");
  values.insert(values.end(), r.begin(), r.end());
  ++rows;
}

int ITree::Depth() const { return nodes.empty() ? 0 : DepthFrom(*this, 0); }

double AveragePathLength(std::uint64_t n) {
  if (n <= 1) return 0.0;
  if (n == 2) return 1.0;
  const double m = static_cast<double>(n - 1);
  return 2.0 * (std::log(m) + kEulerGamma) - 2.0 * m / static_cast<double>(n);
}

ITree BuildTree(const FeatureMatrix& data, std::span<const int> subsample, int height_limit,
                Rng& rng) {
  if (subsample.empty()) throw ContractError("build_tree: empty subsample");
  std::vector<int> rows(subsample.begin(), subsample.end());
  Builder builder{data, height_limit, rng, {}, {}, {}, {}};
  builder.Grow(rows, 0);
  return std::move(builder.tree);
}

double PathLength(const ITree& tree, std::span<const double> x) {
  int node = 0;
  int edges = 0;
  while (!tree.nodes[node].leaf) {
    const auto& n = tree.nodes[node];
    if (n.split_attr >= x.size()) throw ContractError("path_length: feature dimension mismatch");
    node = x[n.split_attr] < static_cast<double>(n.split_value) ? n.left : n.right;
    ++edges;
  }
  return edges + AveragePathLength(tree.nodes[node].size);
}

IsolationForest::IsolationForest(ForestOptions options, int dim, int sample_size,
                                 std::vector<ITree> trees)
    : options_(options), dim_(dim), sample_size_(sample_size), trees_(std::move(trees)) {
  if (trees_.empty()) throw ContractError("forest needs at least one tree");
  if (static_cast<int>(trees_.size()) != options_.trees) {
    throw ContractError("forest tree count differs from its options");
  }
  if (dim_ < 1 || sample_size_ < 1) throw ContractError("forest dimension and sample size must be positive");
  for (const auto& t : trees_) {
    if (t.nodes.empty()) throw ContractError("empty tree");
    for (const auto& n : t.nodes) {
      if (!n.leaf && (n.split_attr >= static_cast<std::uint32_t>(dim_) || n.left <= 0 || n.right <= 0 ||
                      n.left >= static_cast<int>(t.nodes.size()) ||
                      n.right >= static_cast<int>(t.nodes.size()))) {
        throw ContractError("malformed tree node");
      }
    }
  }
}

IsolationForest IsolationForest::Fit(const FeatureMatrix& data, const ForestOptions& options) {
  if (data.rows < 1 || data.cols < 1) throw ContractError("iforest fit: empty data");
  if (options.psi < 2) throw ContractError("iforest fit: psi must be >= 2");
  if (options.trees < 1) throw ContractError("iforest fit: need at least one tree");
  for (double v : data.values) {
    if (!std::isfinite(v)) throw ContractError("iforest fit: non-finite feature value");
  }

  const int sample_size = std::min(options.psi, data.rows);
  const int height_limit = HeightLimitFor(sample_size);
  std::vector<ITree> trees;
  trees.reserve(options.trees);
  std::vector<int> pool(data.rows);
  for (int t = 0; t < options.trees; ++t) {
    Rng rng(MixSeed(options.seed, static_cast<std::uint64_t>(t)));
    std::iota(pool.begin(), pool.end(), 0);
    // Partial Fisher-Yates: the first sample_size entries are the subsample.
    for (int i = 0; i < sample_size; ++i) {
      const int j = i + static_cast<int>(rng.Below(static_cast<std::uint64_t>(data.rows - i)));
      std::swap(pool[i], pool[j]);
    }
    trees.push_back(BuildTree(data, std::span<const int>(pool.data(), sample_size), height_limit, rng));
  }
  return IsolationForest(options, data.cols, sample_size, std::move(trees));
}

int IsolationForest::height_limit() const { return HeightLimitFor(sample_size_); }

double IsolationForest::MeanPathLength(std::span<const double> x) const {
  if (static_cast<int>(x.size()) != dim_) throw ContractError("score: feature dimension mismatch");
  double sum = 0.0;
  for (const auto& t : trees_) sum += PathLength(t, x);
  return sum / static_cast<double>(trees_.size());
}

double IsolationForest::Score(std::span<const double> x) const {
  // A one-point sample has c = 0; normalize by c(2) = 1 instead.
  const double norm = std::max(AveragePathLength(static_cast<std::uint64_t>(sample_size_)), 1.0);
  return std::exp2(-MeanPathLength(x) / norm);
}

std::vector<double> IsolationForest::ScoreAll(const FeatureMatrix& data) const {
  std::vector<double> scores(data.rows);
  for (int i = 0; i < data.rows; ++i) scores[i] = Score(data.row(i));
  return scores;
}

std::size_t FlagCount(std::size_t n, double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ContractError("fraction must lie in (0, 1)");
  // The small slack keeps products such as 0.07 * 100 = 7.000000000000001
  // from rounding up to an extra flag.
  const double exact = fraction * static_cast<double>(n);
  const auto k = static_cast<std::size_t>(std::ceil(exact - 1e-9));
  return std::min(k, n);
}

FractionThreshold ThresholdByFraction(std::span<const double> scores, double fraction) {
  const std::size_t k = FlagCount(scores.size(), fraction);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  FractionThreshold out;
  out.flags.assign(scores.size(), 0);
  out.flagged_count = k;
  out.threshold = k == 0 ? std::numeric_limits<double>::infinity() : scores[order[k - 1]];
  for (std::size_t i = 0; i < k; ++i) out.flags[order[i]] = 1;
  return out;
}

}  // namespace fallscope
