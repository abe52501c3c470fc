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

#include "fallscope/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "fallscope/errors.hpp"

namespace fallscope {

namespace {

// Stream tags for MixSeed.
constexpr std::uint64_t kTrainStream = 0x7261696E;
constexpr std::uint64_t kTestStream = 0x74657374;
constexpr std::uint64_t kInjectStream = 0x696E6A;
constexpr std::uint64_t kPilotStream = 0x70696C;
constexpr int kPilotSamples = 512;

struct Extent {
  double half_x;
  double half_y;
};

Extent ShapeExtent(const InjectionSpec& spec) {
  const double c = std::fabs(std::cos(spec.angle));
  const double s = std::fabs(std::sin(spec.angle));
  if (spec.kind == ObjectKind::kStone) {
    const double a = spec.extent_a, b = spec.extent_b;
    return {std::sqrt(a * a * c * c + b * b * s * s), std::sqrt(a * a * s * s + b * b * c * c)};
  }
  const double hw = spec.extent_a / 2, hl = spec.extent_b / 2;
  return {hw * c + hl * s, hw * s + hl * c};
}

// Point-in-shape at (x, y) relative to the object centre.
bool InsideShape(const InjectionSpec& spec, double dx, double dy) {
  const double c = std::cos(spec.angle), s = std::sin(spec.angle);
  const double u = dx * c + dy * s;
  const double v = -dx * s + dy * c;
  if (spec.kind == ObjectKind::kStone) {
    const double ua = u / spec.extent_a, vb = v / spec.extent_b;
    return ua * ua + vb * vb <= 1.0;
  }
  return std::fabs(u) <= spec.extent_a / 2 && std::fabs(v) <= spec.extent_b / 2;
}

void CheckGridMatches(const GrayImage& frame, const PatchGridSpec& grid) {
  if (frame.width != grid.image_width() || frame.height != grid.image_height()) {
    throw GeometryError("frame does not match the patch grid");
  }
}

float Jittered(float pixel, double offset, double jitter, Rng& rng) {
  const double j = jitter > 0 ? rng.Uniform(-jitter, jitter) : 0.0;
  return static_cast<float>(std::clamp(pixel + offset + j, 0.0, 1.0));
}

}  // namespace

void SceneConfig::Validate() const {
  if (width < 1 || height < 1) throw ContractError("scene dimensions must be positive");
  if (noise_scale < 1) throw ContractError("noise_scale must be >= 1");
  if (noise_amplitude < 0 || vertical_gradient < 0) {
    throw ContractError("noise amplitude and gradient must be non-negative");
  }
  const double swing = noise_amplitude + vertical_gradient;
  if (base_gray - swing < 0.0 || base_gray + swing > 1.0) {
    throw ContractError("base_gray +/- (noise_amplitude + vertical_gradient) leaves [0, 1]");
  }
}

const char* ObjectKindName(ObjectKind kind) {
  switch (kind) {
    case ObjectKind::kStone:
      return "stone";
    case ObjectKind::kPlywood:
      return "plywood";
    case ObjectKind::kSnow:
      return "snow";
  }
  return "unknown";
}

ObjectKind ParseObjectKind(const std::string& name) {
  if (name == "stone") return ObjectKind::kStone;
  if (name == "plywood") return ObjectKind::kPlywood;
  if (name == "snow") return ObjectKind::kSnow;
  throw ContractError("unknown object kind '" + name + "'");
}

GrayImage GenerateRoadFrame(const SceneConfig& cfg) {
  cfg.Validate();
  Rng rng(cfg.seed);
  const int lw = cfg.width / cfg.noise_scale + 2;
  const int lh = cfg.height / cfg.noise_scale + 2;
  std::vector<double> lattice(static_cast<std::size_t>(lw) * lh);
  for (auto& v : lattice) v = rng.Uniform(-1.0, 1.0);

  GrayImage img(cfg.width, cfg.height);
  for (int r = 0; r < cfg.height; ++r) {
    const double gy = static_cast<double>(r) / cfg.noise_scale;
    const int y0 = static_cast<int>(gy);
    const double fy = gy - y0;
    const double grad = cfg.vertical_gradient * (2.0 * (r + 0.5) / cfg.height - 1.0);
    for (int c = 0; c < cfg.width; ++c) {
      const double gx = static_cast<double>(c) / cfg.noise_scale;
      const int x0 = static_cast<int>(gx);
      const double fx = gx - x0;
      const auto l = [&](int y, int x) { return lattice[static_cast<std::size_t>(y) * lw + x]; };
      const double top = l(y0, x0) + fx * (l(y0, x0 + 1) - l(y0, x0));
      const double bot = l(y0 + 1, x0) + fx * (l(y0 + 1, x0 + 1) - l(y0 + 1, x0));
      const double noise = cfg.noise_amplitude * (top + fy * (bot - top));
      img.at(r, c) = static_cast<float>(std::clamp(cfg.base_gray + noise + grad, 0.0, 1.0));
    }
  }
  return img;
}

InjectionSpec SampleInjection(ObjectKind kind, const PatchGridSpec& grid, const RoadMask& road,
                              Rng& rng) {
  if (road.selected.empty()) throw ContractError("cannot place objects without road cells");
  InjectionSpec spec;
  spec.kind = kind;
  spec.placement_cells = road.selected;
  switch (kind) {
    case ObjectKind::kStone: {
      spec.extent_a = rng.Uniform(4.0, 20.0);
      spec.extent_b = rng.Uniform(4.0, 20.0);
      spec.angle = rng.Uniform(0.0, std::numbers::pi);
      const double magnitude = rng.Uniform(0.15, 0.4);
      spec.offset = rng.Bernoulli(0.5) ? magnitude : -magnitude;
      break;
    }
    case ObjectKind::kPlywood:
      spec.extent_a = rng.Uniform(10.0, 40.0);
      spec.extent_b = rng.Uniform(20.0, 60.0);
      spec.angle = rng.Uniform(0.0, std::numbers::pi);
      spec.offset = rng.Uniform(0.1, 0.3);
      break;
    case ObjectKind::kSnow: {
      spec.coverage = rng.Uniform(0.2, 1.0);
      spec.offset = rng.Uniform(0.3, 0.5);
      // A drift over a random 4-connected cluster of 4..9 road cells.
      std::vector<int> cells = road.selected;
      std::sort(cells.begin(), cells.end());
      const std::set<int> on_road(cells.begin(), cells.end());
      const int target = 4 + static_cast<int>(rng.Below(6));
      std::set<int> chosen = {cells[rng.Below(cells.size())]};
      while (static_cast<int>(chosen.size()) < target) {
        std::set<int> frontier;
        for (int cell : chosen) {
          const int r = cell / grid.cols, c = cell % grid.cols;
          const int nbrs[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
          for (const auto& n : nbrs) {
            if (n[0] < 0 || n[0] >= grid.rows || n[1] < 0 || n[1] >= grid.cols) continue;
            const int idx = n[0] * grid.cols + n[1];
            if (on_road.count(idx) && !chosen.count(idx)) frontier.insert(idx);
          }
        }
        if (frontier.empty()) break;
        auto it = frontier.begin();
        std::advance(it, static_cast<long>(rng.Below(frontier.size())));
        chosen.insert(*it);
      }
      spec.snow_cells.assign(chosen.begin(), chosen.end());
      break;
    }
  }
  return spec;
}

std::vector<std::uint8_t> PatchLabels(const std::vector<std::uint8_t>& mask, int width, int height,
                                      const PatchGridSpec& grid, int min_overlap) {
  if (width != grid.image_width() || height != grid.image_height() ||
      mask.size() != static_cast<std::size_t>(width) * height) {
    throw GeometryError("mask does not match the patch grid");
  }
  std::vector<int> counts(grid.cell_count(), 0);
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      if (mask[static_cast<std::size_t>(r) * width + c]) {
        ++counts[(r / grid.patch_size) * grid.cols + c / grid.patch_size];
      }
    }
  }
  std::vector<std::uint8_t> labels(grid.cell_count());
  for (int i = 0; i < grid.cell_count(); ++i) labels[i] = counts[i] >= min_overlap ? 1 : 0;
  return labels;
}

LabeledFrame CleanFrame(const GrayImage& frame, const PatchGridSpec& grid) {
  CheckGridMatches(frame, grid);
  LabeledFrame lf;
  lf.image = frame;
  lf.object_mask.assign(frame.pixels.size(), 0);
  lf.patch_labels.assign(grid.cell_count(), 0);
  return lf;
}

LabeledFrame Inject(const GrayImage& frame, const InjectionSpec& spec, const PatchGridSpec& grid,
                    Rng& rng, int min_overlap) {
  CheckGridMatches(frame, grid);
  LabeledFrame lf = CleanFrame(frame, grid);
  lf.kind = spec.kind;
  const int ps = grid.patch_size;

  if (spec.kind == ObjectKind::kSnow) {
    if (spec.snow_cells.empty()) throw GenerationError("snow injection without cells");
    const int band = std::clamp(static_cast<int>(std::lround(spec.coverage * ps)), 1, ps);
    for (int cell : spec.snow_cells) {
      if (cell < 0 || cell >= grid.cell_count()) throw GenerationError("snow cell outside grid");
      const int top = static_cast<int>(rng.Below(static_cast<std::uint64_t>(ps - band + 1)));
      const int r0 = (cell / grid.cols) * ps + top;
      const int c0 = (cell % grid.cols) * ps;
      for (int r = r0; r < r0 + band; ++r) {
        for (int c = c0; c < c0 + ps; ++c) {
          const std::size_t i = static_cast<std::size_t>(r) * frame.width + c;
          lf.image.pixels[i] = Jittered(frame.pixels[i], spec.offset, spec.jitter, rng);
          lf.object_mask[i] = 1;
        }
      }
    }
    lf.patch_labels = PatchLabels(lf.object_mask, frame.width, frame.height, grid, min_overlap);
    return lf;
  }

  const Extent ext = ShapeExtent(spec);
  const auto fits = [&](double cx, double cy) {
    return cx - ext.half_x >= 0 && cx + ext.half_x <= frame.width && cy - ext.half_y >= 0 &&
           cy + ext.half_y <= frame.height;
  };
  double cx = 0, cy = 0;
  if (spec.center) {
    std::tie(cx, cy) = *spec.center;
    if (!fits(cx, cy)) throw GenerationError("object does not fit inside the frame");
  } else {
    if (spec.placement_cells.empty()) throw GenerationError("no placement cells");
    bool placed = false;
    for (int attempt = 0; attempt < kMaxPlacementAttempts && !placed; ++attempt) {
      const int cell = spec.placement_cells[rng.Below(spec.placement_cells.size())];
      cx = (cell % grid.cols) * ps + rng.Uniform() * ps;
      cy = (cell / grid.cols) * ps + rng.Uniform() * ps;
      placed = fits(cx, cy);
    }
    if (!placed) {
      throw GenerationError(std::string("no in-bounds placement for ") + ObjectKindName(spec.kind) +
                            " after " + std::to_string(kMaxPlacementAttempts) + " attempts");
    }
  }

  const int r_lo = std::max(0, static_cast<int>(std::floor(cy - ext.half_y)));
  const int r_hi = std::min(frame.height - 1, static_cast<int>(std::ceil(cy + ext.half_y)));
  const int c_lo = std::max(0, static_cast<int>(std::floor(cx - ext.half_x)));
  const int c_hi = std::min(frame.width - 1, static_cast<int>(std::ceil(cx + ext.half_x)));
  for (int r = r_lo; r <= r_hi; ++r) {
    for (int c = c_lo; c <= c_hi; ++c) {
      if (!InsideShape(spec, c + 0.5 - cx, r + 0.5 - cy)) continue;
      const std::size_t i = static_cast<std::size_t>(r) * frame.width + c;
      lf.image.pixels[i] = Jittered(frame.pixels[i], spec.offset, spec.jitter, rng);
      lf.object_mask[i] = 1;
    }
  }
  lf.patch_labels = PatchLabels(lf.object_mask, frame.width, frame.height, grid, min_overlap);
  return lf;
}

SceneConfig TrainFrameScene(const DatasetConfig& cfg, int index) {
  SceneConfig scene = cfg.scene;
  scene.seed = MixSeed(MixSeed(cfg.seed, kTrainStream), static_cast<std::uint64_t>(index));
  return scene;
}

LabeledFrame MakeTestFrame(const DatasetConfig& cfg, int index, double injection_probability) {
  SceneConfig scene = cfg.scene;
  scene.seed = MixSeed(MixSeed(cfg.seed, kTestStream), static_cast<std::uint64_t>(index));
  const GrayImage frame = GenerateRoadFrame(scene);
  Rng rng(MixSeed(MixSeed(cfg.seed, kInjectStream), static_cast<std::uint64_t>(index)));
  if (cfg.kinds.empty() || !rng.Bernoulli(injection_probability)) return CleanFrame(frame, cfg.grid);
  const ObjectKind kind = cfg.kinds[rng.Below(cfg.kinds.size())];
  const InjectionSpec spec = SampleInjection(kind, cfg.grid, cfg.road, rng);
  return Inject(frame, spec, cfg.grid, rng, cfg.min_overlap);
}

double InjectionProbability(const DatasetConfig& cfg, double* expected_cells) {
  if (!(cfg.contamination >= 0.0 && cfg.contamination < 1.0)) {
    throw ContractError("contamination must lie in [0, 1)");
  }
  if (expected_cells) *expected_cells = 0.0;
  if (cfg.contamination == 0.0 || cfg.kinds.empty()) return 0.0;
  cfg.road.Validate(cfg.grid);

  const GrayImage blank(cfg.grid.image_width(), cfg.grid.image_height(),
                        static_cast<float>(cfg.scene.base_gray));
  Rng rng(MixSeed(cfg.seed, kPilotStream));
  double road_cells = 0.0;
  for (int i = 0; i < kPilotSamples; ++i) {
    const ObjectKind kind = cfg.kinds[rng.Below(cfg.kinds.size())];
    const auto spec = SampleInjection(kind, cfg.grid, cfg.road, rng);
    const auto lf = Inject(blank, spec, cfg.grid, rng, cfg.min_overlap);
    for (int cell : cfg.road.selected) road_cells += lf.patch_labels[cell];
  }
  const double per_object = road_cells / kPilotSamples;
  if (expected_cells) *expected_cells = per_object;
  if (per_object <= 0.0) throw GenerationError("sampled objects never cover a road cell");
  const double wanted = cfg.contamination * static_cast<double>(cfg.road.selected.size());
  return std::min(1.0, wanted / per_object);
}

Dataset GenerateDataset(const DatasetConfig& cfg) {
  if (cfg.n_train < 0 || cfg.n_test < 0) throw ContractError("frame counts must be non-negative");
  cfg.scene.Validate();
  if (cfg.scene.width != cfg.grid.image_width() || cfg.scene.height != cfg.grid.image_height()) {
    throw GeometryError("scene size must match the patch grid");
  }
  Dataset ds;
  ds.injection_probability = InjectionProbability(cfg, &ds.expected_cells_per_object);
  ds.train.reserve(cfg.n_train);
  for (int i = 0; i < cfg.n_train; ++i) ds.train.push_back(GenerateRoadFrame(TrainFrameScene(cfg, i)));
  ds.test.reserve(cfg.n_test);
  for (int i = 0; i < cfg.n_test; ++i) ds.test.push_back(MakeTestFrame(cfg, i, ds.injection_probability));
  return ds;
}

}  // namespace fallscope
