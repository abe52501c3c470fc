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

// Reconstruction-error features and masks.

#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

namespace fallscope {

// Per-pixel |x - xhat|, same layout as the patch.
struct ErrorMap {
  int size = 64;
  std::vector<float> values;
};

enum class FeatureMode { kSummary, kMeanOnly };

// [mean, population std, max, p99 (nearest rank)].
struct PatchFeatures {
  double mean = 0.0;
  double std = 0.0;
  double max = 0.0;
  double p99 = 0.0;

  std::array<double, 4> AsArray() const { return {mean, std, max, p99}; }
};

struct TrainErrorStats {
  double mean = 0.0;
  double sigma = 0.0;

  // Pixels with error above this are marked anomalous.
  double Threshold() const { return mean + 3.0 * sigma; }
};

ErrorMap ComputeErrorMap(std::span<const float> x, std::span<const float> xhat, int size = 64);

PatchFeatures ComputePatchFeatures(const ErrorMap& map);

// Feature vector handed to the isolation forest: all four summaries, or just
// the mean error in kMeanOnly mode.
std::vector<double> FeatureVector(const PatchFeatures& features, FeatureMode mode);

std::vector<std::uint8_t> BinaryMask(const ErrorMap& map, const TrainErrorStats& stats);

// Mean and population standard deviation over every pixel of every map.
TrainErrorStats FitTrainStats(std::span<const ErrorMap> maps);

}  // namespace fallscope
