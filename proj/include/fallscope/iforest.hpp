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

// Isolation forest over real-valued feature vectors.
//
// Each tree is grown on a subsample drawn without replacement by recursively
// choosing a uniformly random attribute with non-zero range and a uniformly
// random split value strictly inside that attribute's range. A point's path
// length is the number of edges to the leaf it reaches plus c(leaf size), and
// the anomaly score is 2^(-E[h(x)] / c(sample size)).

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "fallscope/random.hpp"

namespace fallscope {

// Dense row-major matrix of feature vectors.
struct FeatureMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> values;

  FeatureMatrix() = default;
  FeatureMatrix(int r, int c) : rows(r), cols(c), values(static_cast<std::size_t>(r) * c, 0.0) {}

  std::span<const double> row(int i) const {
    return {values.data() + static_cast<std::size_t>(i) * cols, static_cast<std::size_t>(cols)};
  }
  std::span<double> row(int i) {
    return {values.data() + static_cast<std::size_t>(i) * cols, static_cast<std::size_t>(cols)};
  }
  void AppendRow(std::span<const double> r);
};

struct ITreeNode {
  bool leaf = true;
  std::uint32_t split_attr = 0;
  float split_value = 0.0f;  // points with x[attr] < split_value go left
  std::int32_t left = -1;
  std::int32_t right = -1;
  std::uint64_t size = 0;  // leaf only

  friend bool operator==(const ITreeNode&, const ITreeNode&) = default;
};

// Nodes in pre-order; nodes[0] is the root and an internal node's left child
// immediately follows it.
struct ITree {
  std::vector<ITreeNode> nodes;

  int Depth() const;
  friend bool operator==(const ITree&, const ITree&) = default;
};

// c(n): average path length of an unsuccessful BST search over n points.
double AveragePathLength(std::uint64_t n);

ITree BuildTree(const FeatureMatrix& data, std::span<const int> subsample, int height_limit,
                Rng& rng);

double PathLength(const ITree& tree, std::span<const double> x);

struct ForestOptions {
  int psi = 256;
  int trees = 100;
  std::uint64_t seed = 0;
  friend bool operator==(const ForestOptions&, const ForestOptions&) = default;
};

class IsolationForest {
 public:
  IsolationForest() = default;
  // Assembles a forest from decoded parts; throws ContractError if
  // inconsistent.
  IsolationForest(ForestOptions options, int dim, int sample_size, std::vector<ITree> trees);

  // Throws ContractError on empty data, psi < 2 or trees < 1.
  static IsolationForest Fit(const FeatureMatrix& data, const ForestOptions& options);

  double MeanPathLength(std::span<const double> x) const;
  double Score(std::span<const double> x) const;
  std::vector<double> ScoreAll(const FeatureMatrix& data) const;

  const ForestOptions& options() const { return options_; }
  int dim() const { return dim_; }
  int sample_size() const { return sample_size_; }
  int height_limit() const;
  const std::vector<ITree>& trees() const { return trees_; }

  friend bool operator==(const IsolationForest&, const IsolationForest&) = default;

 private:
  ForestOptions options_;
  int dim_ = 0;
  int sample_size_ = 0;
  std::vector<ITree> trees_;
};

struct FractionThreshold {
  double threshold = 0.0;  // lowest flagged score
  std::size_t flagged_count = 0;
  std::vector<std::uint8_t> flags;
};

// Flags the ceil(fraction * n) highest scores; ties broken by input order.
// Throws ContractError unless 0 < fraction < 1.
FractionThreshold ThresholdByFraction(std::span<const double> scores, double fraction);

// Number of points ThresholdByFraction flags out of n.
std::size_t FlagCount(std::size_t n, double fraction);

}  // namespace fallscope
