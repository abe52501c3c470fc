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

#include <cstring>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "doctest.h"
#include "fallscope/errors.hpp"
#include "fallscope/persist.hpp"
#include "test_util.hpp"

namespace fallscope {
namespace {

const VaeArch kArch{16, {8, 6}, 4};

LoadError::Kind KindOf(const std::vector<std::uint8_t>& bytes, bool model) {
  try {
    if (model) LoadModel(bytes);
    else LoadForest(bytes);
  } catch (const LoadError& e) {
    return e.kind();
  }
  FAIL("expected a LoadError");
  return LoadError::Kind::kMalformed;
}

IsolationForest SmallForest(std::uint64_t seed) {
  Rng rng(seed);
  FeatureMatrix data(500, 4);
  for (auto& v : data.values) v = rng.Normal();
  return IsolationForest::Fit(data, ForestOptions{64, 20, seed});
}

TEST_SUITE("persist") {

TEST_CASE("model round trip is bit exact") {
  const auto params = InitParams<float>(kArch, 3);
  const ModelMeta meta{77, 12};
  const auto bytes = SaveModel(params, meta);
  const auto loaded = LoadModel(bytes);
  CHECK(loaded.params == params);
  CHECK(loaded.meta == meta);
  CHECK(SaveModel(loaded.params, loaded.meta) == bytes);

  // Trained parameters too, including awkward float values.
  auto odd = params;
  odd.encoder[0].weight[0] = -0.0f;
  odd.encoder[0].weight[1] = std::numeric_limits<float>::denorm_min();
  odd.decoder[0].bias[0] = std::numeric_limits<float>::max();
  const auto back = LoadModel(SaveModel(odd, meta)).params;
  CHECK(std::memcmp(back.encoder[0].weight.data(), odd.encoder[0].weight.data(), 8) == 0);
  CHECK(back.decoder[0].bias[0] == std::numeric_limits<float>::max());
}

TEST_CASE("model header layout") {
  const auto bytes = SaveModel(InitParams<float>(kArch, 1), ModelMeta{});
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "FSVA");
  CHECK(bytes[4] == kModelFormatVersion);
  // meta + 2 sections per layer (2 encoder, mu, logvar, 3 decoder).
  CHECK(bytes[8] == 1 + 2 * 7);
  CHECK(bytes[12] == 4);
  CHECK(std::string(bytes.begin() + 13, bytes.begin() + 17) == "meta");
}

TEST_CASE("model magic and version errors") {
  const auto good = SaveModel(InitParams<float>(kArch, 1), ModelMeta{});
  for (int i = 0; i < 4; ++i) {
    auto bad = good;
    bad[i] ^= 0x20;
    CHECK(KindOf(bad, true) == LoadError::Kind::kBadMagic);
  }
  auto version = good;
  version[4] = 9;
  CHECK(KindOf(version, true) == LoadError::Kind::kVersionMismatch);
  CHECK(KindOf({}, true) == LoadError::Kind::kBadMagic);
  // A forest is not a model.
  CHECK(KindOf(SaveForest(SmallForest(1)), true) == LoadError::Kind::kBadMagic);
}

TEST_CASE("model truncation at every length is a typed error") {
  const auto good = SaveModel(InitParams<float>(kArch, 1), ModelMeta{5, 6});
  for (std::size_t len = 4; len < good.size(); ++len) {
    std::vector<std::uint8_t> cut(good.begin(), good.begin() + static_cast<long>(len));
    INFO("length " << len);
    CHECK(KindOf(cut, true) == LoadError::Kind::kTruncated);
  }
}

TEST_CASE("truncating the final section names it") {
  const auto good = SaveModel(InitParams<float>(kArch, 1), ModelMeta{});
  std::vector<std::uint8_t> cut(good.begin(), good.end() - 3);
  try {
    LoadModel(cut);
    FAIL("expected truncation");
  } catch (const LoadError& e) {
    CHECK(e.kind() == LoadError::Kind::kTruncated);
    CHECK(std::string(e.what()).find("dec2.bias") != std::string::npos);
  }
}

TEST_CASE("model byte corruption never escapes as an untyped error") {
  const auto good = SaveModel(InitParams<float>(kArch, 1), ModelMeta{});
  Rng rng(4);
  for (int trial = 0; trial < 3000; ++trial) {
    auto bad = good;
    const int flips = 1 + static_cast<int>(rng.Below(4));
    for (int f = 0; f < flips; ++f) bad[rng.Below(std::min<std::size_t>(bad.size(), trial % 2 ? 400 : bad.size()))] ^= static_cast<std::uint8_t>(1 + rng.Below(255));
    try {
      LoadModel(bad);
    } catch (const LoadError&) {
    }
  }
}

TEST_CASE("forest round trip preserves scores exactly") {
  const auto forest = SmallForest(5);
  const auto bytes = SaveForest(forest);
  const auto loaded = LoadForest(bytes);
  CHECK(loaded == forest);
  CHECK(SaveForest(loaded) == bytes);
  Rng rng(6);
  FeatureMatrix probe(1000, 4);
  for (auto& v : probe.values) v = rng.Uniform(-6.0, 6.0);
  const auto a = forest.ScoreAll(probe);
  const auto b = loaded.ScoreAll(probe);
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

TEST_CASE("minimal forest payload") {
  ITree leaf;
  leaf.nodes.push_back(ITreeNode{true, 0, 0.0f, -1, -1, 1});
  const IsolationForest f(ForestOptions{256, 1, 0}, 1, 1, {leaf});
  const auto bytes = SaveForest(f);
  const std::vector<std::uint8_t> want = {
      'F', 'S', 'I', 'F', 1, 0, 0, 0,  // magic, version
      0, 1, 0, 0,                      // psi 256
      1, 0, 0, 0,                      // one tree
      0, 0, 0, 0, 0, 0, 0, 0,          // seed
      1, 0, 0, 0,                      // dim
      1, 0, 0, 0,                      // sample size
      1, 1,                            // leaf of size 1
  };
  CHECK(bytes == want);
  CHECK(LoadForest(bytes) == f);
}

TEST_CASE("forest malformed inputs") {
  const auto good = SaveForest(SmallForest(7));
  for (int i = 0; i < 4; ++i) {
    auto bad = good;
    bad[i] ^= 0x01;
    CHECK(KindOf(bad, false) == LoadError::Kind::kBadMagic);
  }
  auto version = good;
  version[4] = 2;
  CHECK(KindOf(version, false) == LoadError::Kind::kVersionMismatch);

  // Zero trees.
  auto empty = std::vector<std::uint8_t>(good.begin(), good.begin() + 32);
  std::memset(empty.data() + 12, 0, 4);
  CHECK(KindOf(empty, false) == LoadError::Kind::kMalformed);

  auto trailing = good;
  trailing.push_back(1);
  CHECK(KindOf(trailing, false) == LoadError::Kind::kMalformed);

  for (std::size_t len = 4; len < good.size(); ++len) {
    std::vector<std::uint8_t> cut(good.begin(), good.begin() + static_cast<long>(len));
    INFO("length " << len);
    CHECK(KindOf(cut, false) == LoadError::Kind::kTruncated);
  }
}

TEST_CASE("forest byte corruption never escapes as an untyped error") {
  const auto good = SaveForest(SmallForest(8));
  Rng rng(9);
  for (int trial = 0; trial < 3000; ++trial) {
    auto bad = good;
    bad[rng.Below(bad.size())] ^= static_cast<std::uint8_t>(1 + rng.Below(255));
    try {
      const auto f = LoadForest(bad);
      (void)f.Score(std::vector<double>(f.dim(), 0.0));
    } catch (const LoadError&) {
    }
  }
  // A chain deeper than any legal tree.
  std::vector<std::uint8_t> deep(good.begin(), good.begin() + 32);
  deep[12] = 1, deep[13] = deep[14] = deep[15] = 0;
  for (int i = 0; i < 100000; ++i) deep.insert(deep.end(), {0, 0, 0, 0, 0, 0});
  CHECK(KindOf(deep, false) == LoadError::Kind::kMalformed);
}

TEST_CASE("files are written atomically and read back") {
  testing::TempDir dir("persist");
  const auto bytes = SaveForest(SmallForest(10));
  WriteFileBytes(dir.str("f.fsif"), bytes);
  CHECK(ReadFileBytes(dir.str("f.fsif")) == bytes);
  CHECK_FALSE(std::filesystem::exists(dir.str("f.fsif.tmp")));
  CHECK_THROWS(ReadFileBytes(dir.str("missing")));
}

}  // TEST_SUITE

}  // namespace
}  // namespace fallscope
