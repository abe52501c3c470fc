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

#include "fallscope/anomaly.hpp"

#include <algorithm>
#include <cmath>

#include "fallscope/errors.hpp"

namespace fallscope {

ErrorMap ComputeErrorMap(std::span<const float> x, std::span<const float> xhat, int size) {
  if (x.size() != xhat.size() || x.size() != static_cast<std::size_t>(size) * size) {
    throw ContractError("error_map: patch shapes differ");
  }
  ErrorMap map;
  map.size = size;
  map.values.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    map.values[i] = std::clamp(std::fabs(x[i] - xhat[i]), 0.0f, 1.0f);
  }
  return map;
}

PatchFeatures ComputePatchFeatures(const ErrorMap& map) {
  if (map.values.empty()) throw ContractError("patch_features: empty error map");
  const std::size_t n = map.values.size();
  PatchFeatures f;
  double sum = 0.0;
  for (float v : map.values) sum += v;
  f.mean = sum / static_cast<double>(n);
  double sq = 0.0;
  for (float v : map.values) {
    const double d = v - f.mean;
    sq += d * d;
  }
  f.std = std::sqrt(sq / static_cast<double>(n));

  std::vector<float> sorted(map.values);
  std::sort(sorted.begin(), sorted.end());
  f.max = sorted.back();
  // Nearest rank: the ceil(0.99 n)-th smallest value (1-based). Integer
  // arithmetic so 0.99 * n never lands a hair above an exact rank.
  const std::size_t rank = (99 * n + 99) / 100;
  f.p99 = sorted[std::max<std::size_t>(rank, 1) - 1];
  return f;
}

std::vector<double> FeatureVector(const PatchFeatures& features, FeatureMode mode) {
  if (mode == FeatureMode::kMeanOnly) return {features.mean};
  const auto a = features.AsArray();
  return {a.begin(), a.end()};
}

std::vector<std::uint8_t> BinaryMask(const ErrorMap& map, const TrainErrorStats& stats) {
  const double threshold = stats.Threshold();
  std::vector<std::uint8_t> mask(map.values.size());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = map.values[i] > threshold ? 1 : 0;
  return mask;
}

TrainErrorStats FitTrainStats(std::span<const ErrorMap> maps) {
  std::size_t n = 0;
  double sum = 0.0;
  for (const auto& m : maps) {
    for (float v : m.values) sum += v;
    n += m.values.size();
  }
  if (n == 0) throw ContractError("fit_train_stats: no error maps");
  TrainErrorStats stats;
  stats.mean = sum / static_cast<double>(n);
  double sq = 0.0;
  for (const auto& m : maps) {
    for (float v : m.values) {
      const double d = v - stats.mean;
      sq += d * d;
    }
  }
  stats.sigma = std::sqrt(sq / static_cast<double>(n));
  return stats;
}

}  // namespace fallscope
