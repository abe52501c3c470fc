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

#include "fallscope/imagegrid.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <set>
#include <string>

#include "fallscope/errors.hpp"

namespace fallscope {

GrayImage::GrayImage(int w, int h, float fill) : width(w), height(h) {
  if (w <= 0 || h <= 0) throw GeometryError("image dimensions must be positive");
  pixels.assign(static_cast<std::size_t>(w) * h, fill);
}

RoadMask RoadMask::Default() {
  RoadMask mask;
  for (int c = 3; c <= 7; ++c) mask.selected.push_back(10 + c);
  for (int c = 1; c <= 8; ++c) mask.selected.push_back(20 + c);
  for (int c = 0; c <= 9; ++c) mask.selected.push_back(30 + c);
  return mask;
}

void RoadMask::Validate(const PatchGridSpec& grid) const {
  std::set<int> seen;
  for (int idx : selected) {
    if (idx < 0 || idx >= grid.cell_count()) {
      throw GeometryError("road mask index " + std::to_string(idx) + " outside grid of " +
                          std::to_string(grid.cell_count()) + " cells");
    }
    if (!seen.insert(idx).second) {
      throw GeometryError("duplicate road mask index " + std::to_string(idx));
    }
  }
}

namespace {

class PgmHeaderReader {
 public:
  explicit PgmHeaderReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  void SkipWhitespaceAndComments() {
    while (pos_ < bytes_.size()) {
      const auto c = bytes_[pos_];
      if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n' && bytes_[pos_] != '\r') ++pos_;
      } else if (std::isspace(c)) {
        ++pos_;
      } else {
        return;
      }
    }
  }

  long ReadUnsigned(const char* field) {
    SkipWhitespaceAndComments();
    const std::size_t start = pos_;
    long value = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      value = value * 10 + (bytes_[pos_] - '0');
      if (value > 1'000'000) throw ParseError(std::string("PGM ") + field + " too large", start);
      ++pos_;
    }
    if (pos_ == start) throw ParseError(std::string("PGM expected ") + field, pos_);
    return value;
  }

  std::size_t pos() const { return pos_; }
  void Advance(std::size_t n) { pos_ += n; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

GrayImage ReadPgm(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') {
    throw ParseError("PGM bad magic, expected P5", 0);
  }
  PgmHeaderReader reader(bytes);
  reader.Advance(2);
  const long width = reader.ReadUnsigned("width");
  const long height = reader.ReadUnsigned("height");
  const std::size_t maxval_offset = reader.pos();
  const long maxval = reader.ReadUnsigned("maxval");
  if (width <= 0 || height <= 0) throw ParseError("PGM dimensions must be positive", maxval_offset);
  if (maxval < 1 || maxval > 255) throw ParseError("PGM maxval outside [1,255]", maxval_offset);
  // Exactly one whitespace byte separates the header from the raster.
  if (reader.pos() >= bytes.size() || !std::isspace(bytes[reader.pos()])) {
    throw ParseError("PGM missing separator before raster", reader.pos());
  }
  reader.Advance(1);

  const std::size_t count = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  if (bytes.size() - reader.pos() < count) {
    throw ParseError("PGM truncated pixel data: expected " + std::to_string(count) + " bytes",
                     bytes.size());
  }
  GrayImage image(static_cast<int>(width), static_cast<int>(height));
  const auto* raster = bytes.data() + reader.pos();
  const float scale = 1.0f / static_cast<float>(maxval);
  for (std::size_t i = 0; i < count; ++i) {
    if (raster[i] > maxval) {
      throw ParseError("PGM sample exceeds maxval", reader.pos() + i);
    }
    image.pixels[i] = std::min(1.0f, static_cast<float>(raster[i]) * scale);
  }
  return image;
}

std::vector<std::uint8_t> WritePgm(const GrayImage& image) {
  const std::string header =
      "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + image.pixels.size());
  for (float p : image.pixels) {
    const float clamped = std::clamp(p, 0.0f, 1.0f);
    out.push_back(static_cast<std::uint8_t>(std::lround(clamped * 255.0f)));
  }
  return out;
}

GrayImage ReadPgmFile(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  try {
    return ReadPgm(bytes);
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what(), e.offset());
  }
}

void WritePgmFile(const std::string& path, const GrayImage& image) {
  const auto bytes = WritePgm(image);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to " + path);
}

GrayImage Crop(const GrayImage& image, const CropRect& rect) {
  if (rect.x < 0 || rect.y < 0 || rect.w <= 0 || rect.h <= 0 ||
      rect.x + rect.w > image.width || rect.y + rect.h > image.height) {
    throw GeometryError("crop rect (" + std::to_string(rect.x) + "," + std::to_string(rect.y) +
                        "," + std::to_string(rect.w) + "x" + std::to_string(rect.h) +
                        ") outside " + std::to_string(image.width) + "x" +
                        std::to_string(image.height) + " image");
  }
  GrayImage out(rect.w, rect.h);
  for (int r = 0; r < rect.h; ++r) {
    const float* src = &image.pixels[static_cast<std::size_t>(rect.y + r) * image.width + rect.x];
    std::copy(src, src + rect.w, &out.pixels[static_cast<std::size_t>(r) * rect.w]);
  }
  return out;
}

namespace {

struct Tap {
  int lo;
  int hi;
  float frac;
};

// Source taps for each destination coordinate along one axis.
std::vector<Tap> BilinearTaps(int in_size, int out_size) {
  std::vector<Tap> taps(out_size);
  const double scale = static_cast<double>(in_size) / out_size;
  for (int i = 0; i < out_size; ++i) {
    double src = (i + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in_size - 1));
    const int lo = static_cast<int>(std::floor(src));
    const int hi = std::min(lo + 1, in_size - 1);
    taps[i] = {lo, hi, static_cast<float>(src - lo)};
  }
  return taps;
}

}  // namespace

GrayImage ResizeBilinear(const GrayImage& image, int out_w, int out_h) {
  if (out_w < 1 || out_h < 1) throw GeometryError("resize target must be at least 1x1");
  const auto xs = BilinearTaps(image.width, out_w);
  const auto ys = BilinearTaps(image.height, out_h);
  GrayImage out(out_w, out_h);
  for (int r = 0; r < out_h; ++r) {
    const auto& ty = ys[r];
    for (int c = 0; c < out_w; ++c) {
      const auto& tx = xs[c];
      const float top = image.at(ty.lo, tx.lo) + tx.frac * (image.at(ty.lo, tx.hi) - image.at(ty.lo, tx.lo));
      const float bot = image.at(ty.hi, tx.lo) + tx.frac * (image.at(ty.hi, tx.hi) - image.at(ty.hi, tx.lo));
      out.at(r, c) = std::clamp(top + ty.frac * (bot - top), 0.0f, 1.0f);
    }
  }
  return out;
}

std::vector<Patch> ExtractPatches(const GrayImage& image, const PatchGridSpec& grid,
                                  std::int64_t frame_id) {
  if (grid.patch_size <= 0 || grid.rows <= 0 || grid.cols <= 0) {
    throw GeometryError("patch grid must have positive size");
  }
  if (image.width != grid.image_width() || image.height != grid.image_height()) {
    throw GeometryError(std::to_string(image.width) + "x" + std::to_string(image.height) +
                        " image does not divide into a " + std::to_string(grid.rows) + "x" +
                        std::to_string(grid.cols) + " grid of " + std::to_string(grid.patch_size) +
                        "px patches");
  }
  const int ps = grid.patch_size;
  std::vector<Patch> patches;
  patches.reserve(grid.cell_count());
  for (int gr = 0; gr < grid.rows; ++gr) {
    for (int gc = 0; gc < grid.cols; ++gc) {
      Patch p;
      p.size = ps;
      p.grid_index = gr * grid.cols + gc;
      p.source_frame = frame_id;
      p.data.resize(static_cast<std::size_t>(ps) * ps);
      for (int r = 0; r < ps; ++r) {
        const float* src = &image.pixels[static_cast<std::size_t>(gr * ps + r) * image.width + gc * ps];
        std::copy(src, src + ps, &p.data[static_cast<std::size_t>(r) * ps]);
      }
      patches.push_back(std::move(p));
    }
  }
  return patches;
}

GrayImage AssemblePatches(std::span<const Patch> patches, const PatchGridSpec& grid) {
  if (static_cast<int>(patches.size()) != grid.cell_count()) {
    throw GeometryError("patch count does not match grid");
  }
  const int ps = grid.patch_size;
  GrayImage image(grid.image_width(), grid.image_height());
  for (const auto& p : patches) {
    if (p.size != ps || p.grid_index < 0 || p.grid_index >= grid.cell_count()) {
      throw GeometryError("patch does not belong to grid");
    }
    const int gr = p.grid_index / grid.cols;
    const int gc = p.grid_index % grid.cols;
    for (int r = 0; r < ps; ++r) {
      std::copy_n(&p.data[static_cast<std::size_t>(r) * ps], ps,
                  &image.pixels[static_cast<std::size_t>(gr * ps + r) * image.width + gc * ps]);
    }
  }
  return image;
}

std::vector<Patch> SelectRoadPatches(std::span<const Patch> patches, const RoadMask& mask) {
  std::vector<int> order = mask.selected;
  std::sort(order.begin(), order.end());
  std::vector<Patch> out;
  out.reserve(order.size());
  for (int idx : order) {
    if (idx < 0 || static_cast<std::size_t>(idx) >= patches.size()) {
      throw GeometryError("road mask index " + std::to_string(idx) + " outside " +
                          std::to_string(patches.size()) + " patches");
    }
    out.push_back(patches[idx]);
  }
  return out;
}

}  // namespace fallscope
