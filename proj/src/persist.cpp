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

#include "fallscope/persist.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "fallscope/errors.hpp"

namespace fallscope {

namespace {

constexpr char kModelMagic[4] = {'F', 'S', 'V', 'A'};
constexpr char kForestMagic[4] = {'F', 'S', 'I', 'F'};
// Deeper trees cannot come from a 32-bit sample size; guards the decoder's
// recursion against crafted input.
constexpr int kMaxTreeDepth = 64;
constexpr std::uint32_t kMaxForestDim = 1u << 20;

class Writer {
 public:
  void Bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void U8(std::uint8_t v) { out_.push_back(v); }
  void U32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void U64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void F32(float v) { U32(std::bit_cast<std::uint32_t>(v)); }
  void Varint(std::uint64_t v) {
    while (v >= 0x80) {
      out_.push_back(static_cast<std::uint8_t>(v | 0x80));
      v >>= 7;
    }
    out_.push_back(static_cast<std::uint8_t>(v));
  }
  void PatchU64(std::size_t at, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_[at + i] = static_cast<std::uint8_t>(v >> (8 * i));
  }
  std::size_t size() const { return out_.size(); }
  std::vector<std::uint8_t> Take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, std::string context)
      : bytes_(bytes), context_(std::move(context)) {}

  void SetContext(std::string context) { context_ = std::move(context); }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void Need(std::size_t n) const {
    if (remaining() < n) {
      throw LoadError(LoadError::Kind::kTruncated,
                      "truncated payload in " + context_ + " at byte " + std::to_string(pos_));
    }
  }
  std::uint8_t U8() {
    Need(1);
    return bytes_[pos_++];
  }
  std::uint32_t U32() {
    Need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t U64() {
    Need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  float F32() { return std::bit_cast<float>(U32()); }
  std::uint64_t Varint() {
    std::uint64_t v = 0;
    for (int shift = 0; shift < 64; shift += 7) {
      const std::uint8_t b = U8();
      v |= static_cast<std::uint64_t>(b & 0x7F) << shift;
      if (!(b & 0x80)) return v;
    }
    throw LoadError(LoadError::Kind::kMalformed, "varint too long in " + context_);
  }
  std::string Str(std::size_t n) {
    Need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::string context_;
  std::size_t pos_ = 0;
};

void CheckMagic(std::span<const std::uint8_t> bytes, const char (&magic)[4], const char* what) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), magic, 4) != 0) {
    throw LoadError(LoadError::Kind::kBadMagic, std::string("bad magic: not a ") + what + " file");
  }
}

void CheckVersion(std::uint32_t got, std::uint32_t want, const char* what) {
  if (got != want) {
    throw LoadError(LoadError::Kind::kVersionMismatch,
                    std::string(what) + " format version " + std::to_string(got) +
                        " is not supported (expected " + std::to_string(want) + ")");
  }
}

struct Section {
  std::string name;
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
};

std::vector<std::uint8_t> MetaBytes(const VaeArch& arch, const ModelMeta& meta) {
  Writer w;
  w.U32(static_cast<std::uint32_t>(arch.input_dim));
  w.U32(static_cast<std::uint32_t>(arch.hidden.size()));
  for (int h : arch.hidden) w.U32(static_cast<std::uint32_t>(h));
  w.U32(static_cast<std::uint32_t>(arch.latent_dim));
  w.U64(meta.train_seed);
  w.U32(meta.epochs);
  return w.Take();
}

}  // namespace

std::vector<std::uint8_t> SaveModel(const VaeParams& params, const ModelMeta& meta) {
  std::vector<std::pair<std::string, std::vector<std::uint8_t>>> sections;
  sections.emplace_back("meta", MetaBytes(params.arch, meta));
  params.ForEachLayer([&](const std::string& name, const DenseLayer<float>& layer) {
    for (const auto* block : {&layer.weight, &layer.bias}) {
      Writer w;
      for (float v : *block) w.F32(v);
      sections.emplace_back(name + (block == &layer.weight ? ".weight" : ".bias"), w.Take());
    }
  });

  Writer w;
  w.Bytes(kModelMagic, 4);
  w.U32(kModelFormatVersion);
  w.U32(static_cast<std::uint32_t>(sections.size()));
  std::vector<std::size_t> offset_slots;
  for (const auto& [name, data] : sections) {
    w.U8(static_cast<std::uint8_t>(name.size()));
    w.Bytes(name.data(), name.size());
    offset_slots.push_back(w.size());
    w.U64(0);
    w.U64(data.size());
  }
  for (std::size_t i = 0; i < sections.size(); ++i) {
    w.PatchU64(offset_slots[i], w.size());
    w.Bytes(sections[i].second.data(), sections[i].second.size());
  }
  return w.Take();
}

LoadedModel LoadModel(std::span<const std::uint8_t> bytes) {
  CheckMagic(bytes, kModelMagic, "model");
  Reader header(bytes.subspan(4), "model header");
  CheckVersion(header.U32(), kModelFormatVersion, "model");
  const std::uint32_t count = header.U32();
  header.SetContext("section table");
  if (count < 1 || count > 4096) throw LoadError(LoadError::Kind::kMalformed, "implausible section count");
  std::vector<Section> table(count);
  for (auto& s : table) {
    s.name = header.Str(header.U8());
    s.offset = header.U64();
    s.length = header.U64();
  }
  const auto payload = [&](const Section& s) {
    if (s.offset > bytes.size() || s.length > bytes.size() - s.offset) {
      throw LoadError(LoadError::Kind::kTruncated, "truncated payload in section '" + s.name + "'");
    }
    return bytes.subspan(s.offset, s.length);
  };

  if (table[0].name != "meta") throw LoadError(LoadError::Kind::kMalformed, "first section is not 'meta'");
  Reader meta_reader(payload(table[0]), "section 'meta'");
  VaeArch arch;
  arch.input_dim = static_cast<int>(meta_reader.U32());
  const std::uint32_t hidden_count = meta_reader.U32();
  if (hidden_count < 1 || hidden_count > 64) throw LoadError(LoadError::Kind::kMalformed, "bad hidden layer count");
  arch.hidden.clear();
  for (std::uint32_t i = 0; i < hidden_count; ++i) arch.hidden.push_back(static_cast<int>(meta_reader.U32()));
  arch.latent_dim = static_cast<int>(meta_reader.U32());
  LoadedModel model;
  model.meta.train_seed = meta_reader.U64();
  model.meta.epochs = meta_reader.U32();
  const auto dim_ok = [](int d) { return d >= 1 && d <= (1 << 24); };
  bool dims_ok = dim_ok(arch.input_dim) && dim_ok(arch.latent_dim);
  for (int h : arch.hidden) dims_ok = dims_ok && dim_ok(h);
  if (!dims_ok) throw LoadError(LoadError::Kind::kMalformed, "implausible layer sizes in 'meta'");

  // Every declared layer must be physically present before allocating.
  std::size_t section = 1;
  std::uint64_t expected_bytes = 0;
  {
    auto shape = VaeArch(arch);
    int prev = shape.input_dim;
    const auto add = [&](int in, int out) { expected_bytes += 4ull * (static_cast<std::uint64_t>(in) * out + out); };
    for (int h : shape.hidden) { add(prev, h); prev = h; }
    add(prev, shape.latent_dim);
    add(prev, shape.latent_dim);
    prev = shape.latent_dim;
    for (auto it = shape.hidden.rbegin(); it != shape.hidden.rend(); ++it) { add(prev, *it); prev = *it; }
    add(prev, shape.input_dim);
  }
  if (expected_bytes > bytes.size()) {
    throw LoadError(LoadError::Kind::kTruncated, "truncated payload: file smaller than the declared layers");
  }

  model.params = VaeParams::Zeros(arch);
  model.params.ForEachLayer([&](const std::string& name, DenseLayer<float>& layer) {
    for (auto* block : {&layer.weight, &layer.bias}) {
      const std::string want = name + (block == &layer.weight ? ".weight" : ".bias");
      if (section >= table.size()) {
        throw LoadError(LoadError::Kind::kTruncated, "truncated payload: section '" + want + "' missing");
      }
      const Section& s = table[section++];
      if (s.name != want) {
        throw LoadError(LoadError::Kind::kMalformed, "expected section '" + want + "', found '" + s.name + "'");
      }
      const auto data = payload(s);
      if (data.size() != block->size() * 4) {
        throw LoadError(LoadError::Kind::kMalformed, "section '" + want + "' has the wrong length");
      }
      Reader r(data, "section '" + want + "'");
      for (auto& v : *block) v = r.F32();
    }
  });
  if (section != table.size()) throw LoadError(LoadError::Kind::kMalformed, "unexpected extra sections");
  return model;
}

namespace {

void EncodeNode(const ITree& tree, int index, Writer& w) {
  const auto& n = tree.nodes[index];
  if (n.leaf) {
    w.U8(1);
    w.Varint(n.size);
    return;
  }
  w.U8(0);
  w.Varint(n.split_attr);
  w.F32(n.split_value);
  EncodeNode(tree, n.left, w);
  EncodeNode(tree, n.right, w);
}

void DecodeNode(Reader& r, ITree& tree, int depth, std::uint32_t dim) {
  if (depth > kMaxTreeDepth) throw LoadError(LoadError::Kind::kMalformed, "tree deeper than allowed");
  const std::uint8_t tag = r.U8();
  const int self = static_cast<int>(tree.nodes.size());
  tree.nodes.emplace_back();
  if (tag == 1) {
    tree.nodes[self].size = r.Varint();
    return;
  }
  if (tag != 0) throw LoadError(LoadError::Kind::kMalformed, "unknown node tag " + std::to_string(tag));
  const std::uint64_t attr = r.Varint();
  if (attr >= dim) throw LoadError(LoadError::Kind::kMalformed, "split attribute outside feature dimension");
  const float split = r.F32();
  tree.nodes[self].leaf = false;
  tree.nodes[self].split_attr = static_cast<std::uint32_t>(attr);
  tree.nodes[self].split_value = split;
  tree.nodes[self].left = static_cast<int>(tree.nodes.size());
  DecodeNode(r, tree, depth + 1, dim);
  tree.nodes[self].right = static_cast<int>(tree.nodes.size());
  DecodeNode(r, tree, depth + 1, dim);
}

}  // namespace

std::vector<std::uint8_t> SaveForest(const IsolationForest& forest) {
  Writer w;
  w.Bytes(kForestMagic, 4);
  w.U32(kForestFormatVersion);
  w.U32(static_cast<std::uint32_t>(forest.options().psi));
  w.U32(static_cast<std::uint32_t>(forest.trees().size()));
  w.U64(forest.options().seed);
  w.U32(static_cast<std::uint32_t>(forest.dim()));
  w.U32(static_cast<std::uint32_t>(forest.sample_size()));
  for (const auto& tree : forest.trees()) EncodeNode(tree, 0, w);
  return w.Take();
}

IsolationForest LoadForest(std::span<const std::uint8_t> bytes) {
  CheckMagic(bytes, kForestMagic, "forest");
  Reader r(bytes.subspan(4), "forest header");
  CheckVersion(r.U32(), kForestFormatVersion, "forest");
  ForestOptions options;
  options.psi = static_cast<int>(r.U32());
  const std::uint32_t t = r.U32();
  options.seed = r.U64();
  const std::uint32_t dim = r.U32();
  const std::uint32_t sample_size = r.U32();
  if (t < 1) throw LoadError(LoadError::Kind::kMalformed, "forest has no trees");
  if (dim < 1 || dim > kMaxForestDim || sample_size < 1 || options.psi < 2) {
    throw LoadError(LoadError::Kind::kMalformed, "forest header fields out of range");
  }
  // Every tree needs at least two bytes.
  if (r.remaining() / 2 < t) throw LoadError(LoadError::Kind::kTruncated, "truncated payload: fewer bytes than trees");
  options.trees = static_cast<int>(t);
  std::vector<ITree> trees(t);
  for (std::uint32_t i = 0; i < t; ++i) {
    r.SetContext("tree " + std::to_string(i));
    DecodeNode(r, trees[i], 0, dim);
  }
  if (r.remaining() != 0) throw LoadError(LoadError::Kind::kMalformed, "trailing bytes after last tree");
  try {
    return IsolationForest(options, static_cast<int>(dim), static_cast<int>(sample_size), std::move(trees));
  } catch (const ContractError& e) {
    throw LoadError(LoadError::Kind::kMalformed, e.what());
  }
}

std::vector<std::uint8_t> ReadFileBytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void WriteFileBytes(const std::string& path, std::span<const std::uint8_t> bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + path);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace fallscope
