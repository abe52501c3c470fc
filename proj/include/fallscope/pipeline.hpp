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

// Pipeline configuration and the five commands behind the CLI:
// gen-data, train, score, detect, eval.
//
// Configuration is a flat key=value file ('#' starts a comment) plus
// overrides. Precedence, lowest first: built-in defaults, config file,
// FALLSCOPE_OUT (out_dir only), command-line overrides.

#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "fallscope/anomaly.hpp"
#include "fallscope/iforest.hpp"
#include "fallscope/metrics.hpp"
#include "fallscope/imagegrid.hpp"
#include "fallscope/synthgen.hpp"
#include "fallscope/vae.hpp"

namespace fallscope {

// Bad configuration or missing/mismatched inputs (exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitInput = 2;
inline constexpr int kExitNumeric = 3;

struct PipelineConfig {
  // Geometry. A zero crop width/height means "whole frame".
  CropRect crop{0, 0, 0, 0};
  int resize_w = 640;
  int resize_h = 256;
  int patch_size = 64;
  RoadMask road = RoadMask::Default();

  VaeArch arch;
  TrainConfig train;

  ForestOptions forest;
  FeatureMode feature_mode = FeatureMode::kSummary;
  double fraction = 0.04;
  int hist_bins = 50;
  int ssim_window = kDefaultSsimWindow;

  // gen-data
  int n_train = 500;
  int n_test = 50;
  double contamination = 0.04;
  std::vector<ObjectKind> kinds = {ObjectKind::kStone, ObjectKind::kPlywood};
  SceneConfig scene;
  int min_overlap = kDefaultMinOverlap;

  std::string data_dir = "data";
  std::string out_dir = "out";
  std::string model_file;   // default <out_dir>/model.fsva
  std::string forest_file;  // default <out_dir>/forest.fsif

  std::uint64_t seed = 0;
  int jobs = 1;

  PatchGridSpec Grid() const;
  std::string ModelPath() const;
  std::string ForestPath() const;
  std::string OutPath(const std::string& name) const;
  // Throws ConfigError.
  void Validate() const;
};

// Applies key=value settings; unknown keys or unparsable values throw
// ConfigError. The global `seed` also seeds training, the forest and the
// generator unless those are set explicitly.
void ApplySettings(PipelineConfig& cfg, const std::map<std::string, std::string>& settings);

std::map<std::string, std::string> ParseConfigText(const std::string& text);

// Builds a config from an optional file, the environment and overrides.
PipelineConfig LoadPipelineConfig(const std::string& config_path,
                                  const std::map<std::string, std::string>& overrides);

// Crop, resize, grid and road selection for one frame.
std::vector<Patch> PrepareRoadPatches(const GrayImage& frame, const PipelineConfig& cfg,
                                      std::int64_t frame_id);

// Same geometry applied to a {0,1} object mask (bilinear, then >= 0.5).
std::vector<std::vector<std::uint8_t>> PrepareRoadMaskPatches(const GrayImage& mask,
                                                              const PipelineConfig& cfg);

// Commands. Each writes its artifacts and a one-line summary to `log`, and
// throws on failure; RunCommand maps exceptions to exit codes.
void CmdGenData(const PipelineConfig& cfg, std::ostream& log);
void CmdTrain(const PipelineConfig& cfg, std::ostream& log);
void CmdScore(const PipelineConfig& cfg, std::ostream& log);
void CmdDetect(const PipelineConfig& cfg, std::ostream& log);
void CmdEval(const PipelineConfig& cfg, std::ostream& log);

int RunCommand(const std::string& name, const PipelineConfig& cfg, std::ostream& log,
               std::ostream& err);

// --- CSV records shared by the commands and tests ---------------------------

struct ScoreRow {
  std::int64_t frame_id = 0;
  int grid_index = 0;
  double score = 0.0;
  bool flagged = false;
};

struct LabelRow {
  std::int64_t frame_id = 0;
  int grid_index = 0;
  bool label = false;
  std::string kind;
};

std::vector<ScoreRow> ReadScoresCsv(const std::string& path);
void WriteScoresCsv(const std::string& path, const std::vector<ScoreRow>& rows);
std::vector<LabelRow> ReadLabelsCsv(const std::string& path);

// Summary of evaluation, also returned for the acceptance suite.
struct EvalSummary {
  std::uint64_t tn = 0, fp = 0, fn = 0, tp = 0;
  double recall = -1.0;     // -1 when undefined
  double precision = -1.0;  // -1 when undefined
  double mean_dice = -1.0;  // over anomalous patches; -1 when there are none
  double mean_ssim = -1.0;
  std::size_t anomalous_patches = 0;
};

EvalSummary ReadEvalSummary(const std::string& out_dir);

}  // namespace fallscope
