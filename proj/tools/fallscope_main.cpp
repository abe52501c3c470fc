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

// fallscope command-line entry point.

#include <cstdlib>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fallscope/pipeline.hpp"

namespace {

// Turns leftover "--key value" / "--key=value" tokens into config overrides.
bool CollectOverrides(const std::vector<std::string>& extras, std::map<std::string, std::string>& out,
                      std::string& error) {
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& tok = extras[i];
    if (tok.rfind("--", 0) != 0 || tok.size() < 3) {
      error = "unexpected argument '" + tok + "'";
      return false;
    }
    std::string key = tok.substr(2), value;
    if (const auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key.resize(eq);
    } else if (i + 1 < extras.size()) {
      value = extras[++i];
    } else {
      error = "option '" + tok + "' needs a value";
      return false;
    }
    for (auto& ch : key) {
      if (ch == '-') ch = '_';
    }
    out[key] = value;
  }
  return true;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fallscope: fallen-object detection on road patches"};
  app.require_subcommand(1);

  std::string config_path;
  std::string seed;
  std::string jobs;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"gen-data", "generate a synthetic dataset"},
      {"train", "train the patch VAE"},
      {"score", "extract features, fit the isolation forest, score test patches"},
      {"detect", "apply the fraction threshold to scores"},
      {"eval", "confusion table, mask quality and score histogram"},
  };
  std::vector<CLI::App*> subs;
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->allow_extras();
    sub->add_option("--config", config_path, "key=value configuration file");
    sub->add_option("--seed", seed, "global seed");
    sub->add_option("--jobs", jobs, "worker threads for per-frame work");
    sub->footer("Any configuration key may be overridden with --key value.");
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : fallscope::kExitInput;
  }

  for (auto* sub : subs) {
    if (!sub->parsed()) continue;
    std::map<std::string, std::string> overrides;
    std::string error;
    if (!CollectOverrides(sub->remaining(), overrides, error)) {
      std::cerr << sub->get_name() << ": " << error << "\n";
      return fallscope::kExitInput;
    }
    if (!seed.empty()) overrides["seed"] = seed;
    if (!jobs.empty()) overrides["jobs"] = jobs;
    fallscope::PipelineConfig cfg;
    try {
      cfg = fallscope::LoadPipelineConfig(config_path, overrides);
    } catch (const std::exception& e) {
      std::cerr << sub->get_name() << ": " << e.what() << "\n";
      return fallscope::kExitInput;
    }
    return fallscope::RunCommand(sub->get_name(), cfg, std::cout, std::cerr);
  }
  return fallscope::kExitInput;
}
