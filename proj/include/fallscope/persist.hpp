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

// Versioned binary formats for trained models (.fsva) and fitted forests
// (.fsif). All integers and floats are little-endian.
//
// Model file:
//   "FSVA" | u32 version (1) | u32 section count
//   section table, per entry: u8 name length | name | u64 offset | u64 length
//   sections: "meta" then "<layer>.weight" / "<layer>.bias" for every layer in
//   canonical order (enc0.., mu, logvar, dec0..), each a packed f32 array.
//   meta: u32 input_dim | u32 hidden count | u32 hidden[..] | u32 latent_dim |
//         u64 train seed | u32 epochs
//
// Forest file:
//   "FSIF" | u32 version (1) | u32 psi | u32 t | u64 seed | u32 dim |
//   u32 sample size | t trees in pre-order, per node:
//     u8 tag 0 (internal) | varint split_attr | f32 split_value
//     u8 tag 1 (leaf)     | varint size
//   varints are unsigned LEB128.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fallscope/iforest.hpp"
#include "fallscope/vae.hpp"

namespace fallscope {

inline constexpr std::uint32_t kModelFormatVersion = 1;
inline constexpr std::uint32_t kForestFormatVersion = 1;

struct ModelMeta {
  std::uint64_t train_seed = 0;
  std::uint32_t epochs = 0;

  friend bool operator==(const ModelMeta&, const ModelMeta&) = default;
};

struct LoadedModel {
  VaeParams params;
  ModelMeta meta;
};

std::vector<std::uint8_t> SaveModel(const VaeParams& params, const ModelMeta& meta);
// Throws LoadError (kBadMagic, kVersionMismatch, kTruncated naming the
// section, kMalformed).
LoadedModel LoadModel(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> SaveForest(const IsolationForest& forest);
IsolationForest LoadForest(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> ReadFileBytes(const std::string& path);
// Writes via a temporary file and rename.
void WriteFileBytes(const std::string& path, std::span<const std::uint8_t> bytes);

}  // namespace fallscope
