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

// Procedural road frames and labelled fallen-object injection.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fallscope/imagegrid.hpp"
#include "fallscope/random.hpp"

namespace fallscope {

struct SceneConfig {
  int width = 640;
  int height = 256;
  double base_gray = 0.45;
  double noise_amplitude = 0.05;
  int noise_scale = 16;  // lattice spacing in pixels
  double vertical_gradient = 0.08;
  std::uint64_t seed = 0;

  void Validate() const;
};

enum class ObjectKind { kStone, kPlywood, kSnow };

const char* ObjectKindName(ObjectKind kind);
ObjectKind ParseObjectKind(const std::string& name);

// Concrete parameters of one object. SampleInjection draws them from the
// generator's ranges; tests build them directly.
struct InjectionSpec {
  ObjectKind kind = ObjectKind::kStone;
  double offset = 0.25;  // signed intensity change (snow: brightness lift)
  // Stone: ellipse semi-axes. Plywood: rectangle width and length.
  double extent_a = 8.0;
  double extent_b = 8.0;
  double angle = 0.0;  // radians
  // Snow: grid cells covered and the fraction of each cell's rows covered.
  std::vector<int> snow_cells;
  double coverage = 1.0;
  // Stone/plywood placement: a fixed centre (x, y) in pixels, or a random
  // centre inside one of `placement_cells`.
  std::optional<std::pair<double, double>> center;
  std::vector<int> placement_cells;
  double jitter = 0.02;
};

struct LabeledFrame {
  GrayImage image;
  std::vector<std::uint8_t> object_mask;  // aligned with image
  std::vector<std::uint8_t> patch_labels;  // one per grid cell
  std::optional<ObjectKind> kind;           // empty for clean frames
};

inline constexpr int kDefaultMinOverlap = 32;
inline constexpr int kMaxPlacementAttempts = 100;

GrayImage GenerateRoadFrame(const SceneConfig& cfg);

InjectionSpec SampleInjection(ObjectKind kind, const PatchGridSpec& grid, const RoadMask& road,
                              Rng& rng);

// Applies the object to a copy of `frame`. Throws GenerationError when no
// in-bounds placement is found within kMaxPlacementAttempts.
LabeledFrame Inject(const GrayImage& frame, const InjectionSpec& spec, const PatchGridSpec& grid,
                    Rng& rng, int min_overlap = kDefaultMinOverlap);

// A cell is anomalous iff at least min_overlap mask pixels fall inside it.
std::vector<std::uint8_t> PatchLabels(const std::vector<std::uint8_t>& mask, int width, int height,
                                      const PatchGridSpec& grid, int min_overlap);

LabeledFrame CleanFrame(const GrayImage& frame, const PatchGridSpec& grid);

struct DatasetConfig {
  SceneConfig scene;
  PatchGridSpec grid;
  RoadMask road = RoadMask::Default();
  int n_train = 0;
  int n_test = 0;
  double contamination = 0.04;
  std::vector<ObjectKind> kinds = {ObjectKind::kStone, ObjectKind::kPlywood};
  int min_overlap = kDefaultMinOverlap;
  std::uint64_t seed = 0;
};

struct Dataset {
  std::vector<GrayImage> train;
  std::vector<LabeledFrame> test;
  double injection_probability = 0.0;
  double expected_cells_per_object = 0.0;
};

// Per-frame streams are derived from (seed, frame index), so any frame can be
// regenerated on its own.
SceneConfig TrainFrameScene(const DatasetConfig& cfg, int index);
LabeledFrame MakeTestFrame(const DatasetConfig& cfg, int index, double injection_probability);

// Probability that a test frame receives an object so that the expected
// fraction of anomalous road cells equals cfg.contamination. Estimated with a
// seeded pilot of sampled placements.
double InjectionProbability(const DatasetConfig& cfg, double* expected_cells = nullptr);

Dataset GenerateDataset(const DatasetConfig& cfg);

}  // namespace fallscope
