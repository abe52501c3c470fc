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

// Raster I/O and the geometric path from a camera frame to road-surface
// unit patches: crop -> bilinear resize -> patch grid -> road mask.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace fallscope {

// Grayscale raster, row-major, pixel values in [0, 1].
struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<float> pixels;

  GrayImage() = default;
  GrayImage(int w, int h, float fill = 0.0f);

  float at(int row, int col) const { return pixels[static_cast<std::size_t>(row) * width + col]; }
  float& at(int row, int col) { return pixels[static_cast<std::size_t>(row) * width + col]; }

  friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

struct CropRect {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;
};

struct PatchGridSpec {
  int patch_size = 64;
  int rows = 4;
  int cols = 10;

  int cell_count() const { return rows * cols; }
  int image_width() const { return cols * patch_size; }
  int image_height() const { return rows * patch_size; }
};

// Grid cells (row-major indices) that cover the road surface.
struct RoadMask {
  std::vector<int> selected;

  // Stand-in trapezoid for the 4x10 grid: bottom three rows with the
  // upper/outer corners dropped, 23 cells in total.
  static RoadMask Default();

  // Throws GeometryError on duplicates or indices outside the grid.
  void Validate(const PatchGridSpec& grid) const;
};

struct Patch {
  int size = 64;
  int grid_index = 0;
  std::int64_t source_frame = 0;
  std::vector<float> data;  // size * size, row-major

  std::span<const float> view() const { return data; }
};

// Binary portable graymap (P5). maxval must be in [1, 255].
GrayImage ReadPgm(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> WritePgm(const GrayImage& image);

GrayImage ReadPgmFile(const std::string& path);
void WritePgmFile(const std::string& path, const GrayImage& image);

GrayImage Crop(const GrayImage& image, const CropRect& rect);

// Bilinear interpolation with half-pixel centres and edge clamping.
GrayImage ResizeBilinear(const GrayImage& image, int out_w, int out_h);

std::vector<Patch> ExtractPatches(const GrayImage& image, const PatchGridSpec& grid,
                                  std::int64_t frame_id = 0);

// Inverse of ExtractPatches for a complete row-major patch list.
GrayImage AssemblePatches(std::span<const Patch> patches, const PatchGridSpec& grid);

std::vector<Patch> SelectRoadPatches(std::span<const Patch> patches, const RoadMask& mask);

}  // namespace fallscope
