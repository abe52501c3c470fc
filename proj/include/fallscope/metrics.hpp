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

// Evaluation metrics: SSIM and Dice for masks, confusion counts with
// recall/precision, and score histograms.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fallscope/imagegrid.hpp"

namespace fallscope {

inline constexpr int kDefaultSsimWindow = 7;

// Mean SSIM over every valid position of a uniform window x window box, with
// C1 = 0.01^2 and C2 = 0.03^2 (unit dynamic range, population statistics).
double Ssim(const GrayImage& a, const GrayImage& b, int window = kDefaultSsimWindow);

// Casts a {0,1} mask of the given shape to an image.
GrayImage MaskToImage(std::span<const std::uint8_t> mask, int width, int height);

// 2|A n B| / (|A| + |B|); 1.0 when both masks are empty.
double Dice(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b);

struct ConfusionMatrix {
  std::uint64_t tn = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  std::uint64_t tp = 0;

  std::uint64_t total() const { return tn + fp + fn + tp; }
  // Empty when the denominator is zero.
  std::optional<double> Recall() const;
  std::optional<double> Precision() const;

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

ConfusionMatrix Confusion(std::span<const std::uint8_t> predicted,
                          std::span<const std::uint8_t> actual);

// Percentage rounded half-up to one decimal ("82.8%"), or "undefined".
std::string FormatPercent(std::optional<double> ratio);

struct Histogram {
  std::vector<double> edges;  // bins + 1 strictly increasing edges over [0, 1]
  std::vector<std::uint64_t> counts;
};

// Equal-width bins over [0, 1]; bins are [lo, hi) except the last, [lo, 1].
// Values outside [0, 1] are clamped into the end bins.
Histogram MakeHistogram(std::span<const double> scores, int bins);

}  // namespace fallscope
