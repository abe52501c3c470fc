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

#include "fallscope/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "fallscope/errors.hpp"

namespace fallscope {

namespace {

constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

// Summed-area table with a zero first row/column.
std::vector<double> Integral(const GrayImage& img, bool squared) {
  const int w = img.width, h = img.height;
  std::vector<double> s(static_cast<std::size_t>(w + 1) * (h + 1), 0.0);
  for (int r = 0; r < h; ++r) {
    double row = 0.0;
    for (int c = 0; c < w; ++c) {
      const double v = img.at(r, c);
      row += squared ? v * v : v;
      s[static_cast<std::size_t>(r + 1) * (w + 1) + c + 1] = s[static_cast<std::size_t>(r) * (w + 1) + c + 1] + row;
    }
  }
  return s;
}

std::vector<double> CrossIntegral(const GrayImage& a, const GrayImage& b) {
  const int w = a.width, h = a.height;
  std::vector<double> s(static_cast<std::size_t>(w + 1) * (h + 1), 0.0);
  for (int r = 0; r < h; ++r) {
    double row = 0.0;
    for (int c = 0; c < w; ++c) {
      row += static_cast<double>(a.at(r, c)) * b.at(r, c);
      s[static_cast<std::size_t>(r + 1) * (w + 1) + c + 1] = s[static_cast<std::size_t>(r) * (w + 1) + c + 1] + row;
    }
  }
  return s;
}

double BoxSum(const std::vector<double>& s, int w, int r0, int c0, int size) {
  const auto at = [&](int r, int c) { return s[static_cast<std::size_t>(r) * (w + 1) + c]; };
  return at(r0 + size, c0 + size) - at(r0, c0 + size) - at(r0 + size, c0) + at(r0, c0);
}

}  // namespace

double Ssim(const GrayImage& a, const GrayImage& b, int window) {
  if (a.width != b.width || a.height != b.height) throw ContractError("ssim: dimension mismatch");
  if (window < 1 || window % 2 == 0) throw ContractError("ssim: window must be odd and positive");
  if (a.width < window || a.height < window) throw ContractError("ssim: image smaller than window");

  const auto sa = Integral(a, false), sb = Integral(b, false);
  const auto saa = Integral(a, true), sbb = Integral(b, true);
  const auto sab = CrossIntegral(a, b);
  const double n = static_cast<double>(window) * window;
  const int w = a.width;
  double total = 0.0;
  long positions = 0;
  for (int r = 0; r + window <= a.height; ++r) {
    for (int c = 0; c + window <= a.width; ++c) {
      const double mu_a = BoxSum(sa, w, r, c, window) / n;
      const double mu_b = BoxSum(sb, w, r, c, window) / n;
      // Cancellation error here is far below C2, so no clamping.
      const double var_a = BoxSum(saa, w, r, c, window) / n - mu_a * mu_a;
      const double var_b = BoxSum(sbb, w, r, c, window) / n - mu_b * mu_b;
      const double cov = BoxSum(sab, w, r, c, window) / n - mu_a * mu_b;
      const double num = (2.0 * mu_a * mu_b + kC1) * (2.0 * cov + kC2);
      const double den = (mu_a * mu_a + mu_b * mu_b + kC1) * (var_a + var_b + kC2);
      total += num / den;
      ++positions;
    }
  }
  return total / static_cast<double>(positions);
}

GrayImage MaskToImage(std::span<const std::uint8_t> mask, int width, int height) {
  if (mask.size() != static_cast<std::size_t>(width) * height) {
    throw ContractError("mask size does not match image shape");
  }
  GrayImage img(width, height);
  for (std::size_t i = 0; i < mask.size(); ++i) img.pixels[i] = mask[i] ? 1.0f : 0.0f;
  return img;
}

double Dice(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  if (a.size() != b.size()) throw ContractError("dice: dimension mismatch");
  std::uint64_t inter = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] != 0, y = b[i] != 0;
    na += x;
    nb += y;
    inter += x && y;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

std::optional<double> ConfusionMatrix::Recall() const {
  if (tp + fn == 0) return std::nullopt;
  return static_cast<double>(tp) / static_cast<double>(tp + fn);
}

std::optional<double> ConfusionMatrix::Precision() const {
  if (tp + fp == 0) return std::nullopt;
  return static_cast<double>(tp) / static_cast<double>(tp + fp);
}

ConfusionMatrix Confusion(std::span<const std::uint8_t> predicted,
                          std::span<const std::uint8_t> actual) {
  if (predicted.size() != actual.size()) throw ContractError("confusion: length mismatch");
  ConfusionMatrix m;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const bool p = predicted[i] != 0, a = actual[i] != 0;
    if (p && a) ++m.tp;
    else if (p) ++m.fp;
    else if (a) ++m.fn;
    else ++m.tn;
  }
  return m;
}

std::string FormatPercent(std::optional<double> ratio) {
  if (!ratio) return "undefined";
  // Half-up at one decimal; the epsilon absorbs binary representation error
  // (0.8285 is stored as 0.82849999...).
  const double tenths = std::floor(*ratio * 1000.0 + 0.5 + 1e-9);
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f%%", tenths / 10.0);
  return buf;
}

Histogram MakeHistogram(std::span<const double> scores, int bins) {
  if (bins < 1) throw ContractError("histogram: bins must be >= 1");
  Histogram h;
  h.edges.resize(bins + 1);
  for (int i = 0; i <= bins; ++i) h.edges[i] = static_cast<double>(i) / bins;
  h.counts.assign(bins, 0);
  for (double s : scores) {
    const auto it = std::upper_bound(h.edges.begin(), h.edges.end(), s);
    const auto bin = std::clamp<std::ptrdiff_t>(it - h.edges.begin() - 1, 0, bins - 1);
    ++h.counts[bin];
  }
  return h;
}

}  // namespace fallscope
