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

#include "fallscope/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include "fallscope/errors.hpp"
#include "fallscope/metrics.hpp"
#include "fallscope/persist.hpp"

namespace fs = std::filesystem;

namespace fallscope {

namespace {

// ---------------------------------------------------------------- parsing --

std::string Trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> Split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(Trim(cur));
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

long long ToInt(const std::string& key, const std::string& v) {
  char* end = nullptr;
  errno = 0;
  const long long x = std::strtoll(v.c_str(), &end, 10);
  if (v.empty() || *end != '\0' || errno != 0) throw ConfigError("'" + key + "' expects an integer, got '" + v + "'");
  return x;
}

std::uint64_t ToU64(const std::string& key, const std::string& v) {
  char* end = nullptr;
  errno = 0;
  const unsigned long long x = std::strtoull(v.c_str(), &end, 10);
  if (v.empty() || v[0] == '-' || *end != '\0' || errno != 0) {
    throw ConfigError("'" + key + "' expects an unsigned integer, got '" + v + "'");
  }
  return x;
}

double ToDouble(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (v.empty() || *end != '\0' || !std::isfinite(x)) throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
  return x;
}

int ToPosInt(const std::string& key, const std::string& v) {
  const long long x = ToInt(key, v);
  if (x < 0 || x > (1 << 30)) throw ConfigError("'" + key + "' out of range: " + v);
  return static_cast<int>(x);
}

std::vector<int> ToIntList(const std::string& key, const std::string& v) {
  std::vector<int> out;
  if (Trim(v).empty()) return out;
  for (const auto& item : Split(v, ',')) out.push_back(static_cast<int>(ToInt(key, item)));
  return out;
}

// ---------------------------------------------------------------- helpers --

std::string Fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string FrameName(const char* prefix, std::int64_t id) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%06" PRId64 ".pgm", prefix, id);
  return buf;
}

struct FrameFile {
  std::int64_t id;
  std::string path;
};

std::vector<FrameFile> ListFrames(const std::string& dir, const std::string& prefix) {
  if (!fs::is_directory(dir)) throw ConfigError("missing directory " + dir);
  std::vector<FrameFile> frames;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind(prefix + "_", 0) != 0 || entry.path().extension() != ".pgm") continue;
    const std::string digits = name.substr(prefix.size() + 1, name.size() - prefix.size() - 5);
    if (digits.empty() || !std::all_of(digits.begin(), digits.end(), ::isdigit)) continue;
    frames.push_back({std::stoll(digits), entry.path().string()});
  }
  std::sort(frames.begin(), frames.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return frames;
}

// Runs fn(i) for i in [0, n) on up to `jobs` threads; rethrows the first error.
template <typename F>
void ParallelFor(std::size_t n, int jobs, F&& fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  const int workers = static_cast<int>(std::min<std::size_t>(jobs, n));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::string& header) : path_(path), out_(path + ".tmp", std::ios::binary | std::ios::trunc) {
    if (!out_) throw ConfigError("cannot write " + path);
    out_ << header << '\n';
  }
  void Row(const std::string& row) { out_ << row << '\n'; }
  void Close() {
    out_.close();
    if (!out_) throw ConfigError("short write to " + path_);
    fs::rename(path_ + ".tmp", path_);
  }

 private:
  std::string path_;
  std::ofstream out_;
};

std::vector<std::vector<std::string>> ReadCsv(const std::string& path, const std::string& header) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("missing file " + path);
  std::string line;
  if (!std::getline(in, line) || Trim(line) != header) {
    throw ParseError(path + ": expected header '" + header + "'", 1);
  }
  const std::size_t fields = Split(header, ',').size();
  std::vector<std::vector<std::string>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (Trim(line).empty()) continue;
    auto cells = Split(Trim(line), ',');
    if (cells.size() != fields) throw ParseError(path + ": wrong field count", line_no);
    rows.push_back(std::move(cells));
  }
  return rows;
}

std::map<std::string, std::string> ReadKeyValueFile(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("missing file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ParseConfigText(ss.str());
}

std::vector<float> Flatten(const std::vector<std::vector<Patch>>& per_frame, std::size_t dim) {
  std::size_t n = 0;
  for (const auto& f : per_frame) n += f.size();
  std::vector<float> flat;
  flat.reserve(n * dim);
  for (const auto& f : per_frame) {
    for (const auto& p : f) flat.insert(flat.end(), p.data.begin(), p.data.end());
  }
  return flat;
}

VaeParams LoadModelFile(const PipelineConfig& cfg) {
  const std::string path = cfg.ModelPath();
  if (!fs::exists(path)) throw ConfigError("missing model file " + path + " (run 'train' first)");
  auto model = LoadModel(ReadFileBytes(path));
  if (model.params.arch.input_dim != cfg.patch_size * cfg.patch_size) {
    throw ConfigError("model input size does not match patch_size");
  }
  return std::move(model.params);
}

// Per-frame patches, error maps and features.
struct FrameAnalysis {
  std::vector<Patch> patches;
  std::vector<ErrorMap> maps;
  std::vector<PatchFeatures> features;
};

FrameAnalysis AnalyzeFrame(const GrayImage& frame, const PipelineConfig& cfg, const VaeParams& params,
                           std::int64_t frame_id) {
  FrameAnalysis a;
  a.patches = PrepareRoadPatches(frame, cfg, frame_id);
  if (a.patches.empty()) return a;
  const std::size_t dim = a.patches[0].data.size();
  std::vector<float> flat;
  flat.reserve(a.patches.size() * dim);
  for (const auto& p : a.patches) flat.insert(flat.end(), p.data.begin(), p.data.end());
  const auto recon = ReconstructBatch(params, flat);
  for (std::size_t i = 0; i < a.patches.size(); ++i) {
    std::span<const float> xhat(recon.data() + i * dim, dim);
    a.maps.push_back(ComputeErrorMap(a.patches[i].data, xhat, cfg.patch_size));
    a.features.push_back(ComputePatchFeatures(a.maps.back()));
  }
  return a;
}

std::vector<FrameAnalysis> AnalyzeFrames(const std::vector<FrameFile>& frames, const PipelineConfig& cfg,
                                         const VaeParams& params) {
  std::vector<FrameAnalysis> out(frames.size());
  ParallelFor(frames.size(), cfg.jobs, [&](std::size_t i) {
    out[i] = AnalyzeFrame(ReadPgmFile(frames[i].path), cfg, params, frames[i].id);
  });
  return out;
}

void WriteFeaturesCsv(const std::string& path, const std::vector<FrameAnalysis>& frames) {
  CsvWriter csv(path, "frame_id,grid_index,mean,std,max,p99");
  for (const auto& f : frames) {
    for (std::size_t i = 0; i < f.patches.size(); ++i) {
      const auto& ft = f.features[i];
      csv.Row(std::to_string(f.patches[i].source_frame) + "," + std::to_string(f.patches[i].grid_index) + "," +
              Fmt(ft.mean) + "," + Fmt(ft.std) + "," + Fmt(ft.max) + "," + Fmt(ft.p99));
    }
  }
  csv.Close();
}

FeatureMatrix ToMatrix(const std::vector<FrameAnalysis>& frames, FeatureMode mode) {
  FeatureMatrix m;
  for (const auto& f : frames) {
    for (const auto& ft : f.features) m.AppendRow(FeatureVector(ft, mode));
  }
  return m;
}

const char* FeatureModeName(FeatureMode mode) { return mode == FeatureMode::kMeanOnly ? "mean" : "summary"; }

}  // namespace

// ------------------------------------------------------------------ config --

PatchGridSpec PipelineConfig::Grid() const {
  PatchGridSpec grid;
  grid.patch_size = patch_size;
  grid.rows = patch_size > 0 ? resize_h / patch_size : 0;
  grid.cols = patch_size > 0 ? resize_w / patch_size : 0;
  return grid;
}

std::string PipelineConfig::ModelPath() const {
  return model_file.empty() ? OutPath("model.fsva") : model_file;
}

std::string PipelineConfig::ForestPath() const {
  return forest_file.empty() ? OutPath("forest.fsif") : forest_file;
}

std::string PipelineConfig::OutPath(const std::string& name) const {
  return (fs::path(out_dir) / name).string();
}

void PipelineConfig::Validate() const {
  if (patch_size < 1) throw ConfigError("patch_size must be positive");
  if (resize_w < patch_size || resize_h < patch_size || resize_w % patch_size != 0 || resize_h % patch_size != 0) {
    throw ConfigError("resize " + std::to_string(resize_w) + "x" + std::to_string(resize_h) +
                      " does not divide into " + std::to_string(patch_size) + "px patches");
  }
  if (crop.x < 0 || crop.y < 0 || crop.w < 0 || crop.h < 0) throw ConfigError("crop values must be non-negative");
  try {
    road.Validate(Grid());
    train.Validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (road.selected.empty()) throw ConfigError("road_mask selects no cells");
  if (arch.input_dim != patch_size * patch_size) throw ConfigError("VAE input must equal patch_size^2");
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("fraction must lie in (0, 1)");
  if (!(contamination >= 0.0 && contamination < 1.0)) throw ConfigError("contamination must lie in [0, 1)");
  if (forest.psi < 2 || forest.trees < 1) throw ConfigError("psi must be >= 2 and trees >= 1");
  if (hist_bins < 1) throw ConfigError("hist_bins must be >= 1");
  if (jobs < 1) throw ConfigError("jobs must be >= 1");
  if (ssim_window < 1 || ssim_window % 2 == 0 || ssim_window > patch_size) throw ConfigError("ssim_window must be odd and <= patch_size");
  if (n_train < 0 || n_test < 0) throw ConfigError("frame counts must be non-negative");
}

std::map<std::string, std::string> ParseConfigText(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = Trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
    out[Trim(line.substr(0, eq))] = Trim(line.substr(eq + 1));
  }
  return out;
}

void ApplySettings(PipelineConfig& cfg, const std::map<std::string, std::string>& settings) {
  if (auto it = settings.find("seed"); it != settings.end()) {
    cfg.seed = ToU64("seed", it->second);
    cfg.train.seed = cfg.seed;
    cfg.forest.seed = cfg.seed;
    cfg.scene.seed = cfg.seed;
  }
  for (const auto& [key, v] : settings) {
    if (key == "seed") continue;
    if (key == "crop_x") cfg.crop.x = ToPosInt(key, v);
    else if (key == "crop_y") cfg.crop.y = ToPosInt(key, v);
    else if (key == "crop_w") cfg.crop.w = ToPosInt(key, v);
    else if (key == "crop_h") cfg.crop.h = ToPosInt(key, v);
    else if (key == "resize_w") cfg.resize_w = ToPosInt(key, v);
    else if (key == "resize_h") cfg.resize_h = ToPosInt(key, v);
    else if (key == "patch_size") cfg.patch_size = ToPosInt(key, v);
    else if (key == "road_mask") cfg.road.selected = ToIntList(key, v);
    else if (key == "hidden") cfg.arch.hidden = ToIntList(key, v);
    else if (key == "latent_dim") cfg.arch.latent_dim = ToPosInt(key, v);
    else if (key == "epochs") cfg.train.epochs = static_cast<int>(ToInt(key, v));
    else if (key == "batch_size") cfg.train.batch_size = static_cast<int>(ToInt(key, v));
    else if (key == "learning_rate") cfg.train.learning_rate = ToDouble(key, v);
    else if (key == "adam_beta1") cfg.train.adam_beta1 = ToDouble(key, v);
    else if (key == "adam_beta2") cfg.train.adam_beta2 = ToDouble(key, v);
    else if (key == "adam_eps") cfg.train.adam_eps = ToDouble(key, v);
    else if (key == "kl_weight") cfg.train.kl_weight = ToDouble(key, v);
    else if (key == "train_seed") cfg.train.seed = ToU64(key, v);
    else if (key == "psi") cfg.forest.psi = static_cast<int>(ToInt(key, v));
    else if (key == "trees") cfg.forest.trees = static_cast<int>(ToInt(key, v));
    else if (key == "forest_seed") cfg.forest.seed = ToU64(key, v);
    else if (key == "feature_mode") {
      if (v == "summary") cfg.feature_mode = FeatureMode::kSummary;
      else if (v == "mean") cfg.feature_mode = FeatureMode::kMeanOnly;
      else throw ConfigError("feature_mode must be 'summary' or 'mean'");
    } else if (key == "fraction") cfg.fraction = ToDouble(key, v);
    else if (key == "hist_bins") cfg.hist_bins = static_cast<int>(ToInt(key, v));
    else if (key == "ssim_window") cfg.ssim_window = static_cast<int>(ToInt(key, v));
    else if (key == "n_train") cfg.n_train = static_cast<int>(ToInt(key, v));
    else if (key == "n_test") cfg.n_test = static_cast<int>(ToInt(key, v));
    else if (key == "contamination") cfg.contamination = ToDouble(key, v);
    else if (key == "kinds") {
      cfg.kinds.clear();
      for (const auto& k : Split(v, ',')) {
        try {
          cfg.kinds.push_back(ParseObjectKind(k));
        } catch (const ContractError& e) {
          throw ConfigError(e.what());
        }
      }
    } else if (key == "base_gray") cfg.scene.base_gray = ToDouble(key, v);
    else if (key == "noise_amplitude") cfg.scene.noise_amplitude = ToDouble(key, v);
    else if (key == "noise_scale") cfg.scene.noise_scale = ToPosInt(key, v);
    else if (key == "vertical_gradient") cfg.scene.vertical_gradient = ToDouble(key, v);
    else if (key == "data_seed") cfg.scene.seed = ToU64(key, v);
    else if (key == "min_overlap") cfg.min_overlap = ToPosInt(key, v);
    else if (key == "data_dir") cfg.data_dir = v;
    else if (key == "out_dir") cfg.out_dir = v;
    else if (key == "model_file") cfg.model_file = v;
    else if (key == "forest_file") cfg.forest_file = v;
    else if (key == "jobs") cfg.jobs = static_cast<int>(ToInt(key, v));
    else throw ConfigError("unknown configuration key '" + key + "'");
  }
  cfg.arch.input_dim = cfg.patch_size * cfg.patch_size;
}

PipelineConfig LoadPipelineConfig(const std::string& config_path,
                                  const std::map<std::string, std::string>& overrides) {
  std::map<std::string, std::string> merged;
  if (!config_path.empty()) merged = ReadKeyValueFile(config_path);
  if (const char* env = std::getenv("FALLSCOPE_OUT"); env && *env) merged["out_dir"] = env;
  for (const auto& [k, v] : overrides) merged[k] = v;
  PipelineConfig cfg;
  ApplySettings(cfg, merged);
  cfg.Validate();
  return cfg;
}

// ---------------------------------------------------------------- geometry --

namespace {

GrayImage ToCanvas(const GrayImage& frame, const PipelineConfig& cfg) {
  CropRect rect = cfg.crop;
  if (rect.w == 0) rect.w = frame.width - rect.x;
  if (rect.h == 0) rect.h = frame.height - rect.y;
  const GrayImage cropped = Crop(frame, rect);
  if (cropped.width == cfg.resize_w && cropped.height == cfg.resize_h) return cropped;
  return ResizeBilinear(cropped, cfg.resize_w, cfg.resize_h);
}

}  // namespace

std::vector<Patch> PrepareRoadPatches(const GrayImage& frame, const PipelineConfig& cfg,
                                      std::int64_t frame_id) {
  const auto patches = ExtractPatches(ToCanvas(frame, cfg), cfg.Grid(), frame_id);
  return SelectRoadPatches(patches, cfg.road);
}

std::vector<std::vector<std::uint8_t>> PrepareRoadMaskPatches(const GrayImage& mask,
                                                              const PipelineConfig& cfg) {
  GrayImage canvas = ToCanvas(mask, cfg);
  for (auto& p : canvas.pixels) p = p >= 0.5f ? 1.0f : 0.0f;
  const auto patches = SelectRoadPatches(ExtractPatches(canvas, cfg.Grid()), cfg.road);
  std::vector<std::vector<std::uint8_t>> out;
  for (const auto& p : patches) {
    std::vector<std::uint8_t> m(p.data.size());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = p.data[i] > 0.5f ? 1 : 0;
    out.push_back(std::move(m));
  }
  return out;
}

// ---------------------------------------------------------------- gen-data --

void CmdGenData(const PipelineConfig& cfg, std::ostream& log) {
  DatasetConfig dc;
  dc.grid = cfg.Grid();
  dc.scene = cfg.scene;
  dc.scene.width = dc.grid.image_width();
  dc.scene.height = dc.grid.image_height();
  dc.road = cfg.road;
  dc.n_train = cfg.n_train;
  dc.n_test = cfg.n_test;
  dc.contamination = cfg.contamination;
  dc.kinds = cfg.kinds;
  dc.min_overlap = cfg.min_overlap;
  dc.seed = cfg.scene.seed;
  try {
    dc.scene.Validate();
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
  if (cfg.crop.w != 0 || cfg.crop.h != 0 || cfg.crop.x != 0 || cfg.crop.y != 0) {
    throw ConfigError("gen-data writes canvas-sized frames; leave crop unset");
  }

  const fs::path root(cfg.data_dir);
  std::error_code ec;
  fs::create_directories(root / "train", ec);
  fs::create_directories(root / "test", ec);
  if (ec || !fs::is_directory(root / "train") || !fs::is_directory(root / "test")) {
    throw ConfigError("cannot create data directory " + cfg.data_dir);
  }
  // Stale frames from an earlier, larger run would leak into training.
  for (const auto& sub : {"train", "test"}) {
    for (const auto& entry : fs::directory_iterator(root / sub)) {
      const auto name = entry.path().filename().string();
      if (entry.path().extension() == ".pgm" && (name.rfind("frame_", 0) == 0 || name.rfind("mask_", 0) == 0)) {
        fs::remove(entry.path());
      }
    }
  }

  double expected_cells = 0.0;
  const double p = InjectionProbability(dc, &expected_cells);

  ParallelFor(static_cast<std::size_t>(dc.n_train), cfg.jobs, [&](std::size_t i) {
    const int idx = static_cast<int>(i);
    WritePgmFile((root / "train" / FrameName("frame", idx)).string(), GenerateRoadFrame(TrainFrameScene(dc, idx)));
  });
  std::vector<std::vector<std::uint8_t>> labels(dc.n_test);
  std::vector<std::string> kinds(dc.n_test, "none");
  ParallelFor(static_cast<std::size_t>(dc.n_test), cfg.jobs, [&](std::size_t i) {
    const int idx = static_cast<int>(i);
    const LabeledFrame lf = MakeTestFrame(dc, idx, p);
    WritePgmFile((root / "test" / FrameName("frame", idx)).string(), lf.image);
    WritePgmFile((root / "test" / FrameName("mask", idx)).string(),
                 MaskToImage(lf.object_mask, lf.image.width, lf.image.height));
    labels[i] = lf.patch_labels;
    if (lf.kind) kinds[i] = ObjectKindName(*lf.kind);
  });

  std::size_t positives = 0;
  CsvWriter manifest((root / "labels.csv").string(), "frame_id,grid_index,label,kind");
  for (int f = 0; f < dc.n_test; ++f) {
    for (int cell = 0; cell < dc.grid.cell_count(); ++cell) {
      const bool label = labels[f][cell] != 0;
      manifest.Row(std::to_string(f) + "," + std::to_string(cell) + "," + (label ? "1" : "0") + "," +
                   (label ? kinds[f] : "none"));
    }
    for (int cell : dc.road.selected) positives += labels[f][cell];
  }
  manifest.Close();

  const std::size_t road_cells = dc.road.selected.size();
  const std::size_t train_patches = road_cells * dc.n_train;
  const std::size_t test_patches = road_cells * dc.n_test;
  {
    std::ofstream summary(root / "dataset.txt", std::ios::binary | std::ios::trunc);
    summary << "n_train_frames=" << dc.n_train << "\n"
            << "n_test_frames=" << dc.n_test << "\n"
            << "road_cells=" << road_cells << "\n"
            << "train_patches=" << train_patches << "\n"
            << "test_patches=" << test_patches << "\n"
            << "positive_patches=" << positives << "\n"
            << "injection_probability=" << Fmt(p) << "\n";
    if (!summary) throw ConfigError("cannot write dataset summary");
  }
  log << "gen-data: " << dc.n_train << " train frames (" << train_patches << " training patches), "
      << dc.n_test << " test frames (" << test_patches << " test patches, " << positives << " anomalous)\n";
}

// ------------------------------------------------------------------- train --

void CmdTrain(const PipelineConfig& cfg, std::ostream& log) {
  const auto frames = ListFrames((fs::path(cfg.data_dir) / "train").string(), "frame");
  if (frames.empty()) throw ConfigError("no training frames in " + cfg.data_dir + "/train");
  std::vector<std::vector<Patch>> per_frame(frames.size());
  ParallelFor(frames.size(), cfg.jobs, [&](std::size_t i) {
    per_frame[i] = PrepareRoadPatches(ReadPgmFile(frames[i].path), cfg, frames[i].id);
  });
  const auto flat = Flatten(per_frame, static_cast<std::size_t>(cfg.arch.input_dim));
  fs::create_directories(cfg.out_dir);

  const auto result = Train(flat, cfg.arch, cfg.train, [&](const EpochLoss& e) {
    if (e.epoch == 1 || e.epoch == cfg.train.epochs || e.epoch % 10 == 0) {
      log << "epoch " << e.epoch << "/" << cfg.train.epochs << " loss " << Fmt(e.total) << "\n" << std::flush;
    }
  });

  CsvWriter csv(cfg.OutPath("loss.csv"), "epoch,recon,kl,total");
  for (const auto& e : result.trace) {
    csv.Row(std::to_string(e.epoch) + "," + Fmt(e.recon) + "," + Fmt(e.kl) + "," + Fmt(e.total));
  }
  csv.Close();
  ModelMeta meta{cfg.train.seed, static_cast<std::uint32_t>(cfg.train.epochs)};
  WriteFileBytes(cfg.ModelPath(), SaveModel(result.params, meta));
  log << "train: " << flat.size() / cfg.arch.input_dim << " patches, " << cfg.train.epochs
      << " epochs, final loss " << Fmt(result.trace.back().total) << " -> " << cfg.ModelPath() << "\n";
}

// ------------------------------------------------------------------- score --

void CmdScore(const PipelineConfig& cfg, std::ostream& log) {
  const VaeParams params = LoadModelFile(cfg);
  const auto train_frames = ListFrames((fs::path(cfg.data_dir) / "train").string(), "frame");
  const auto test_frames = ListFrames((fs::path(cfg.data_dir) / "test").string(), "frame");
  if (train_frames.empty()) throw ConfigError("no training frames in " + cfg.data_dir + "/train");
  fs::create_directories(cfg.out_dir);

  const auto train = AnalyzeFrames(train_frames, cfg, params);
  std::vector<ErrorMap> maps;
  for (const auto& f : train) maps.insert(maps.end(), f.maps.begin(), f.maps.end());
  const TrainErrorStats stats = FitTrainStats(maps);
  maps.clear();
  {
    std::ofstream out(cfg.OutPath("train_stats.txt"), std::ios::binary | std::ios::trunc);
    out << "mean=" << Fmt(stats.mean) << "\nsigma=" << Fmt(stats.sigma) << "\nfeature_mode="
        << FeatureModeName(cfg.feature_mode) << "\n";
    if (!out) throw ConfigError("cannot write train_stats.txt");
  }
  WriteFeaturesCsv(cfg.OutPath("train_features.csv"), train);

  const auto train_matrix = ToMatrix(train, cfg.feature_mode);
  const std::size_t train_rows = train_matrix.rows;
  const auto forest = IsolationForest::Fit(train_matrix, cfg.forest);
  WriteFileBytes(cfg.ForestPath(), SaveForest(forest));

  const auto test = AnalyzeFrames(test_frames, cfg, params);
  WriteFeaturesCsv(cfg.OutPath("features.csv"), test);
  const auto matrix = ToMatrix(test, cfg.feature_mode);
  const auto scores = forest.ScoreAll(matrix);
  const auto flags = ThresholdByFraction(scores, cfg.fraction);
  std::vector<ScoreRow> rows;
  std::size_t i = 0;
  for (const auto& f : test) {
    for (const auto& p : f.patches) {
      rows.push_back({p.source_frame, p.grid_index, scores[i], flags.flags[i] != 0});
      ++i;
    }
  }
  WriteScoresCsv(cfg.OutPath("scores.csv"), rows);
  log << "score: " << forest.trees().size() << " trees fitted on " << train_rows << " training patches ("
      << forest.sample_size() << "-point subsamples); " << rows.size() << " test patches scored\n";
}

// ------------------------------------------------------------------ detect --

void CmdDetect(const PipelineConfig& cfg, std::ostream& log) {
  auto rows = ReadScoresCsv(cfg.OutPath("scores.csv"));
  std::vector<double> scores;
  for (const auto& r : rows) scores.push_back(r.score);
  const auto th = ThresholdByFraction(scores, cfg.fraction);
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i].flagged = th.flags[i] != 0;
  WriteScoresCsv(cfg.OutPath("detections.csv"), rows);
  log << "detect: threshold " << Fmt(th.threshold) << ", flagged " << th.flagged_count << " of "
      << rows.size() << " patches (fraction " << cfg.fraction << ")\n";
}

// -------------------------------------------------------------------- eval --

void CmdEval(const PipelineConfig& cfg, std::ostream& log) {
  const auto detections = ReadScoresCsv(cfg.OutPath("detections.csv"));
  const auto labels = ReadLabelsCsv((fs::path(cfg.data_dir) / "labels.csv").string());
  std::map<std::pair<std::int64_t, int>, bool> truth;
  for (const auto& l : labels) truth[{l.frame_id, l.grid_index}] = l.label;

  std::vector<std::uint8_t> predicted, actual;
  std::vector<double> scores;
  for (const auto& d : detections) {
    const auto it = truth.find({d.frame_id, d.grid_index});
    if (it == truth.end()) {
      throw ConfigError("detection for frame " + std::to_string(d.frame_id) + " cell " +
                        std::to_string(d.grid_index) + " has no ground-truth label");
    }
    predicted.push_back(d.flagged);
    actual.push_back(it->second);
    scores.push_back(d.score);
  }
  const ConfusionMatrix cm = Confusion(predicted, actual);
  const Histogram hist = MakeHistogram(scores, cfg.hist_bins);

  // Mask quality over anomalous patches.
  const VaeParams params = LoadModelFile(cfg);
  const auto stats_kv = ReadKeyValueFile(cfg.OutPath("train_stats.txt"));
  TrainErrorStats stats;
  try {
    stats.mean = ToDouble("mean", stats_kv.at("mean"));
    stats.sigma = ToDouble("sigma", stats_kv.at("sigma"));
  } catch (const std::out_of_range&) {
    throw ConfigError("train_stats.txt is incomplete");
  }
  std::map<std::int64_t, std::vector<int>> anomalous_cells;
  for (const auto& d : detections) {
    if (truth[{d.frame_id, d.grid_index}]) anomalous_cells[d.frame_id].push_back(d.grid_index);
  }
  std::vector<std::int64_t> frame_ids;
  for (const auto& [id, cells] : anomalous_cells) frame_ids.push_back(id);
  std::vector<std::vector<std::pair<double, double>>> quality(frame_ids.size());
  const fs::path test_dir = fs::path(cfg.data_dir) / "test";
  std::vector<int> road_sorted = cfg.road.selected;
  std::sort(road_sorted.begin(), road_sorted.end());
  ParallelFor(frame_ids.size(), cfg.jobs, [&](std::size_t i) {
    const std::int64_t id = frame_ids[i];
    const auto analysis = AnalyzeFrame(ReadPgmFile((test_dir / FrameName("frame", id)).string()), cfg, params, id);
    const auto truth_masks = PrepareRoadMaskPatches(ReadPgmFile((test_dir / FrameName("mask", id)).string()), cfg);
    for (int cell : anomalous_cells[id]) {
      const auto pos = static_cast<std::size_t>(std::lower_bound(road_sorted.begin(), road_sorted.end(), cell) - road_sorted.begin());
      const auto predicted_mask = BinaryMask(analysis.maps[pos], stats);
      const double d = Dice(predicted_mask, truth_masks[pos]);
      const double s = Ssim(MaskToImage(predicted_mask, cfg.patch_size, cfg.patch_size),
                            MaskToImage(truth_masks[pos], cfg.patch_size, cfg.patch_size), cfg.ssim_window);
      quality[i].emplace_back(d, s);
    }
  });
  double dice_sum = 0.0, ssim_sum = 0.0;
  std::size_t n_quality = 0;
  for (const auto& q : quality) {
    for (const auto& [d, s] : q) {
      dice_sum += d;
      ssim_sum += s;
      ++n_quality;
    }
  }

  CsvWriter hcsv(cfg.OutPath("histogram.csv"), "bin_low,bin_high,count");
  for (std::size_t b = 0; b < hist.counts.size(); ++b) {
    hcsv.Row(Fmt(hist.edges[b]) + "," + Fmt(hist.edges[b + 1]) + "," + std::to_string(hist.counts[b]));
  }
  hcsv.Close();

  const auto recall = cm.Recall();
  const auto precision = cm.Precision();
  const auto opt = [](std::optional<double> v) { return v ? Fmt(*v) : std::string("undefined"); };
  const std::string mean_dice = n_quality ? Fmt(dice_sum / n_quality) : "undefined";
  const std::string mean_ssim = n_quality ? Fmt(ssim_sum / n_quality) : "undefined";
  CsvWriter ccsv(cfg.OutPath("confusion.csv"),
                 "tn,fp,fn,tp,recall,precision,mean_dice,mean_ssim,anomalous_patches");
  ccsv.Row(std::to_string(cm.tn) + "," + std::to_string(cm.fp) + "," + std::to_string(cm.fn) + "," +
           std::to_string(cm.tp) + "," + opt(recall) + "," + opt(precision) + "," + mean_dice + "," +
           mean_ssim + "," + std::to_string(n_quality));
  ccsv.Close();

  char table[1024];
  std::snprintf(table, sizeof table,
                "                  Prediction\n"
                "                  normal   anomaly\n"
                "Actual  normal  %8llu  %8llu\n"
                "        anomaly %8llu  %8llu\n"
                "Recall          %s\n"
                "Precision       %s\n"
                "Mask Dice       %s\n"
                "Mask SSIM       %s  (%zu anomalous patches)\n",
                static_cast<unsigned long long>(cm.tn), static_cast<unsigned long long>(cm.fp),
                static_cast<unsigned long long>(cm.fn), static_cast<unsigned long long>(cm.tp),
                FormatPercent(recall).c_str(), FormatPercent(precision).c_str(), mean_dice.c_str(),
                mean_ssim.c_str(), n_quality);
  {
    std::ofstream report(cfg.OutPath("report.txt"), std::ios::binary | std::ios::trunc);
    report << table;
  }
  log << table;
}

// ------------------------------------------------------------------ driver --

int RunCommand(const std::string& name, const PipelineConfig& cfg, std::ostream& log, std::ostream& err) {
  try {
    if (name == "gen-data") CmdGenData(cfg, log);
    else if (name == "train") CmdTrain(cfg, log);
    else if (name == "score") CmdScore(cfg, log);
    else if (name == "detect") CmdDetect(cfg, log);
    else if (name == "eval") CmdEval(cfg, log);
    else {
      err << "unknown command '" << name << "'\n";
      return kExitInput;
    }
    return kExitOk;
  } catch (const TrainingError& e) {
    err << name << ": " << e.what() << "\n";
    return kExitNumeric;
  } catch (const NumericError& e) {
    err << name << ": " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << name << ": " << e.what() << "\n";
    return kExitInput;
  }
}

// --------------------------------------------------------------------- csv --

std::vector<ScoreRow> ReadScoresCsv(const std::string& path) {
  std::vector<ScoreRow> rows;
  for (const auto& cells : ReadCsv(path, "frame_id,grid_index,score,flagged")) {
    ScoreRow r;
    r.frame_id = ToInt("frame_id", cells[0]);
    r.grid_index = static_cast<int>(ToInt("grid_index", cells[1]));
    r.score = ToDouble("score", cells[2]);
    r.flagged = ToInt("flagged", cells[3]) != 0;
    rows.push_back(r);
  }
  return rows;
}

void WriteScoresCsv(const std::string& path, const std::vector<ScoreRow>& rows) {
  CsvWriter csv(path, "frame_id,grid_index,score,flagged");
  for (const auto& r : rows) {
    csv.Row(std::to_string(r.frame_id) + "," + std::to_string(r.grid_index) + "," + Fmt(r.score) + "," +
            (r.flagged ? "1" : "0"));
  }
  csv.Close();
}

std::vector<LabelRow> ReadLabelsCsv(const std::string& path) {
  std::vector<LabelRow> rows;
  for (const auto& cells : ReadCsv(path, "frame_id,grid_index,label,kind")) {
    rows.push_back({ToInt("frame_id", cells[0]), static_cast<int>(ToInt("grid_index", cells[1])),
                    ToInt("label", cells[2]) != 0, cells[3]});
  }
  return rows;
}

EvalSummary ReadEvalSummary(const std::string& out_dir) {
  const auto rows = ReadCsv((fs::path(out_dir) / "confusion.csv").string(),
                            "tn,fp,fn,tp,recall,precision,mean_dice,mean_ssim,anomalous_patches");
  if (rows.size() != 1) throw ConfigError("confusion.csv must have one row");
  const auto& c = rows[0];
  const auto opt = [](const std::string& k, const std::string& v) { return v == "undefined" ? -1.0 : ToDouble(k, v); };
  EvalSummary s;
  s.tn = ToU64("tn", c[0]);
  s.fp = ToU64("fp", c[1]);
  s.fn = ToU64("fn", c[2]);
  s.tp = ToU64("tp", c[3]);
  s.recall = opt("recall", c[4]);
  s.precision = opt("precision", c[5]);
  s.mean_dice = opt("mean_dice", c[6]);
  s.mean_ssim = opt("mean_ssim", c[7]);
  s.anomalous_patches = ToU64("anomalous_patches", c[8]);
  return s;
}

}  // namespace fallscope
