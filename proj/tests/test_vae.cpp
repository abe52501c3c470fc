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

#include <cmath>
#include <cstring>
#include <numeric>
#include <vector>

#if defined(__SSE2__)
#include <immintrin.h>
#endif

#include "doctest.h"
#include "fallscope/errors.hpp"
#include "fallscope/kernels.hpp"
#include "fallscope/synthgen.hpp"
#include "fallscope/vae.hpp"
#include "test_util.hpp"

namespace fallscope {
namespace {

const VaeArch kSmall{16, {8}, 4};

std::vector<double> RandomInput(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.Uniform(0.05, 0.95);
  return v;
}

std::vector<double> RandomNoise(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.Normal();
  return v;
}

// Forward pass assembled from the public pieces: the loss the gradient
// should differentiate.
double TotalLoss(const BasicVaeParams<double>& p, std::span<const double> x, std::span<const double> noise,
                 double kl_weight) {
  const auto enc = Encode(p, x);
  const auto z = Reparameterize(enc, noise);
  const auto xhat = Decode<double>(p, z);
  return ElboLoss<double>(x, xhat, enc, kl_weight).total;
}

struct GradCheck {
  double max_rel = 0.0;
  std::size_t checked = 0;
};

// Central differences over every parameter; relative error with a small
// floor on the denominator so exactly-zero gradients compare absolutely.
GradCheck CheckGradients(BasicVaeParams<double> p, int batch, double kl_weight, std::uint64_t seed) {
  Rng rng(seed);
  const auto x = RandomInput(static_cast<std::size_t>(batch) * p.arch.input_dim, rng);
  const auto noise = RandomNoise(static_cast<std::size_t>(batch) * p.arch.latent_dim, rng);
  auto grads = BasicVaeParams<double>::Zeros(p.arch);
  BackwardBatch<double>(p, x, noise, batch, kl_weight, grads);

  const auto mean_loss = [&](const BasicVaeParams<double>& q) {
    double s = 0.0;
    for (int b = 0; b < batch; ++b) {
      s += TotalLoss(q, std::span(x).subspan(b * p.arch.input_dim, p.arch.input_dim),
                     std::span(noise).subspan(b * p.arch.latent_dim, p.arch.latent_dim), kl_weight);
    }
    return s / batch;
  };

  std::vector<std::pair<std::vector<double>*, const std::vector<double>*>> blocks;
  std::vector<DenseLayer<double>*> layers, grad_layers;
  p.ForEachLayer([&](const std::string&, DenseLayer<double>& l) { layers.push_back(&l); });
  grads.ForEachLayer([&](const std::string&, DenseLayer<double>& l) { grad_layers.push_back(&l); });
  for (std::size_t i = 0; i < layers.size(); ++i) {
    blocks.emplace_back(&layers[i]->weight, &grad_layers[i]->weight);
    blocks.emplace_back(&layers[i]->bias, &grad_layers[i]->bias);
  }

  const double h = 1e-4;
  GradCheck out;
  for (auto& [values, analytic] : blocks) {
    for (std::size_t i = 0; i < values->size(); ++i) {
      const double saved = (*values)[i];
      (*values)[i] = saved + h;
      const double up = mean_loss(p);
      (*values)[i] = saved - h;
      const double down = mean_loss(p);
      (*values)[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double a = (*analytic)[i];
      const double rel = std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), 1e-6});
      out.max_rel = std::max(out.max_rel, rel);
      ++out.checked;
    }
  }
  return out;
}

TEST_SUITE("vae") {

TEST_CASE("init is seeded and bounded") {
  const VaeArch arch{64, {32, 16}, 8};
  const auto a = InitParams<float>(arch, 1);
  const auto b = InitParams<float>(arch, 1);
  const auto c = InitParams<float>(arch, 2);
  CHECK(a == b);
  CHECK_FALSE(a == c);
  CHECK(a.AllFinite());
  a.ForEachLayer([](const std::string& name, const DenseLayer<float>& l) {
    const double bound = std::sqrt(6.0 / (l.in + l.out));
    INFO(name);
    CHECK(l.weight.size() == static_cast<std::size_t>(l.in) * l.out);
    for (float w : l.weight) CHECK(std::fabs(w) <= bound);
    for (float bias : l.bias) CHECK(bias == 0.0f);
  });
  CHECK(a.mu_head.out == 8);
  CHECK(a.logvar_head.out == 8);
}

TEST_CASE("default architecture shapes") {
  const VaeArch arch;
  const auto p = VaeParams::Zeros(arch);
  const std::vector<float> x(4096, 0.0f);
  const auto enc = Encode<float>(p, x);
  CHECK(enc.mu.size() == 128);
  CHECK(enc.logvar.size() == 128);
  for (float v : enc.mu) CHECK(v == 0.0f);
  for (float v : enc.logvar) CHECK(v == 0.0f);
  const auto xhat = Decode<float>(p, std::vector<float>(128, 0.3f));
  CHECK(xhat.size() == 4096);
  for (float v : xhat) CHECK(v == 0.5f);
  CHECK(p.ParameterCount() ==
        (4096 * 1024 + 1024) + (1024 * 256 + 256) + 2 * (256 * 128 + 128) + (128 * 256 + 256) +
            (256 * 1024 + 1024) + (1024 * 4096 + 4096));
}

TEST_CASE("logvar stays inside the clamp") {
  auto p = InitParams<float>(kSmall, 3);
  for (auto& w : p.logvar_head.weight) w *= 1000.0f;
  Rng rng(4);
  bool hit_low = false, hit_high = false;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<float> x(16);
    for (auto& v : x) v = static_cast<float>(rng.Uniform(0.0, 1.0));
    const auto enc = Encode<float>(p, x);
    for (float lv : enc.logvar) {
      CHECK(lv >= kLogvarMin);
      CHECK(lv <= kLogvarMax);
      hit_low |= lv == kLogvarMin;
      hit_high |= lv == kLogvarMax;
    }
  }
  CHECK((hit_low || hit_high));
}

TEST_CASE("reparameterize") {
  BasicEncoderOutput<double> out{{0.5, -1.0}, {0.0, 0.0}};
  CHECK(Reparameterize<double>(out, std::vector<double>{0.0, 0.0}) == out.mu);
  BasicEncoderOutput<double> unit{{0.0, 0.0}, {0.0, 0.0}};
  const std::vector<double> n{0.3, -2.0};
  CHECK(Reparameterize<double>(unit, n) == n);
  BasicEncoderOutput<double> scaled{std::vector<double>(128, 1.0), std::vector<double>(128, 2.0 * std::log(2.0))};
  for (double z : Reparameterize<double>(scaled, std::vector<double>(128, 1.0))) {
    CHECK(z == doctest::Approx(3.0).epsilon(1e-15));
  }
  CHECK_THROWS_AS(Reparameterize<double>(unit, std::vector<double>{1.0}), ContractError);
}

TEST_CASE("decoder output is strictly inside the unit interval") {
  auto p = InitParams<float>(kSmall, 5);
  for (auto& w : p.decoder.back().weight) w *= 500.0f;
  Rng rng(6);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<float> z(4);
    for (auto& v : z) v = static_cast<float>(rng.Normal() * 10.0);
    for (float v : Decode<float>(p, z)) {
      CHECK(v > 0.0f);
      CHECK(v < 1.0f);
    }
  }
}

TEST_CASE("elbo values") {
  const std::vector<double> x(16, 0.25);
  BasicEncoderOutput<double> prior{std::vector<double>(4, 0.0), std::vector<double>(4, 0.0)};
  const auto zero = ElboLoss<double>(x, x, prior, 1.0);
  CHECK(zero.recon == 0.0);
  CHECK(zero.kl == 0.0);
  CHECK(zero.total == 0.0);

  BasicEncoderOutput<double> shifted{std::vector<double>(128, 1.0), std::vector<double>(128, 0.0)};
  CHECK(ElboLoss<double>(x, x, shifted, 1.0).kl == 64.0);

  std::vector<double> xhat(16, 0.75);
  const auto l = ElboLoss<double>(x, xhat, shifted, 0.5);
  CHECK(l.recon == doctest::Approx(16 * 0.25).epsilon(1e-15));
  CHECK(l.total == doctest::Approx(l.recon + 0.5 * 64.0).epsilon(1e-15));
}

TEST_CASE("kl is never negative") {
  Rng rng(7);
  const std::vector<double> x(1, 0.0);
  for (int trial = 0; trial < 10000; ++trial) {
    BasicEncoderOutput<double> out{{rng.Uniform(-5, 5)}, {rng.Uniform(kLogvarMin, kLogvarMax)}};
    CHECK(ElboLoss<double>(x, x, out, 1.0).kl >= 0.0);
  }
}

TEST_CASE("analytic gradients match central differences") {
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    auto p = InitParams<double>(kSmall, seed);
    // Non-zero biases exercise the bias paths too.
    Rng rng(seed + 100);
    p.ForEachLayer([&](const std::string&, DenseLayer<double>& l) {
      for (auto& b : l.bias) b = rng.Uniform(-0.1, 0.1);
    });
    for (int batch : {1, 3}) {
      for (double kl_weight : {1.0, 0.25}) {
        const auto r = CheckGradients(p, batch, kl_weight, seed * 7 + batch);
        INFO("seed " << seed << " batch " << batch << " kl_weight " << kl_weight);
        CHECK(r.checked == p.ParameterCount());
        CHECK(r.max_rel < 1e-4);
      }
    }
  }
}

TEST_CASE("gradient of a dead hidden unit's bias is zero") {
  auto p = InitParams<double>(kSmall, 21);
  p.encoder[0].bias[0] = -1e3;  // ReLU never fires for inputs in [0, 1]
  Rng rng(22);
  const auto x = RandomInput(16, rng);
  const auto noise = RandomNoise(4, rng);
  const auto g = Backward<double>(p, x, noise, 1.0);
  CHECK(g.grads.encoder[0].bias[0] == 0.0);
  for (int i = 0; i < 16; ++i) CHECK(g.grads.encoder[0].weight[i] == 0.0);
}

TEST_CASE("kl gradients scale linearly with the weight when the decoder is frozen") {
  auto p = InitParams<double>(kSmall, 31);
  for (auto& l : p.decoder) std::fill(l.weight.begin(), l.weight.end(), 0.0);
  Rng rng(32);
  const auto x = RandomInput(16, rng);
  const auto noise = RandomNoise(4, rng);
  const auto g1 = Backward<double>(p, x, noise, 1.0).grads;
  const auto g2 = Backward<double>(p, x, noise, 2.0).grads;
  for (std::size_t i = 0; i < g1.mu_head.weight.size(); ++i) {
    CHECK(g2.mu_head.weight[i] == 2.0 * g1.mu_head.weight[i]);
    CHECK(g2.logvar_head.weight[i] == 2.0 * g1.logvar_head.weight[i]);
  }
  for (std::size_t i = 0; i < g1.mu_head.bias.size(); ++i) {
    CHECK(g2.mu_head.bias[i] == 2.0 * g1.mu_head.bias[i]);
    CHECK(g2.logvar_head.bias[i] == 2.0 * g1.logvar_head.bias[i]);
  }
  // The KL part is actually present.
  double norm = 0.0;
  for (double v : g1.mu_head.weight) norm += v * v;
  for (double v : g1.logvar_head.weight) norm += v * v;
  CHECK(norm > 0.0);
}

TEST_CASE("batched gradients are the mean of single-row gradients") {
  auto p = InitParams<double>(kSmall, 41);
  Rng rng(42);
  const auto x = RandomInput(4 * 16, rng);
  const auto noise = RandomNoise(4 * 4, rng);
  auto batched = BasicVaeParams<double>::Zeros(kSmall);
  const auto loss = BackwardBatch<double>(p, x, noise, 4, 1.0, batched);
  double total = 0.0;
  auto sum = BasicVaeParams<double>::Zeros(kSmall);
  for (int b = 0; b < 4; ++b) {
    const auto g = Backward<double>(p, std::span(x).subspan(b * 16, 16), std::span(noise).subspan(b * 4, 4), 1.0);
    total += g.loss.total;
    std::vector<DenseLayer<double>*> dst;
    sum.ForEachLayer([&](const std::string&, DenseLayer<double>& l) { dst.push_back(&l); });
    std::size_t li = 0;
    g.grads.ForEachLayer([&](const std::string&, const DenseLayer<double>& l) {
      for (std::size_t i = 0; i < l.weight.size(); ++i) dst[li]->weight[i] += l.weight[i] / 4;
      for (std::size_t i = 0; i < l.bias.size(); ++i) dst[li]->bias[i] += l.bias[i] / 4;
      ++li;
    });
  }
  CHECK(loss.total == doctest::Approx(total).epsilon(1e-12));
  std::vector<const DenseLayer<double>*> want;
  sum.ForEachLayer([&](const std::string&, const DenseLayer<double>& l) { want.push_back(&l); });
  std::size_t li = 0;
  batched.ForEachLayer([&](const std::string&, const DenseLayer<double>& l) {
    for (std::size_t i = 0; i < l.weight.size(); ++i) CHECK(l.weight[i] == doctest::Approx(want[li]->weight[i]).epsilon(1e-10).scale(1e-12));
    ++li;
  });
}

TEST_CASE("train rejects bad configuration") {
  TrainConfig cfg;
  cfg.epochs = 0;
  const std::vector<float> data(16, 0.5f);
  CHECK_THROWS_AS(Train(data, kSmall, cfg), ContractError);
  cfg.epochs = 1;
  cfg.batch_size = 0;
  CHECK_THROWS_AS(Train(data, kSmall, cfg), ContractError);
  cfg.batch_size = 4;
  CHECK_THROWS_AS(Train(std::vector<float>(15, 0.5f), kSmall, cfg), ContractError);
}

TEST_CASE("divergence reports the epoch and batch") {
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 2;
  cfg.learning_rate = 1e30;
  std::vector<float> data = testing::RandomVector(16 * 6, 1, 0.0, 1.0);
  try {
    Train(data, kSmall, cfg);
    FAIL("expected divergence");
  } catch (const TrainingError& e) {
    CHECK(e.epoch() >= 1);
    CHECK(e.batch() >= 0);
  }
}

TEST_CASE("training is deterministic and makes progress") {
  const VaeArch arch{64, {32}, 8};
  // Smooth rows plus noise.
  Rng rng(51);
  std::vector<float> data(200 * 64);
  for (int r = 0; r < 200; ++r) {
    const double base = rng.Uniform(0.2, 0.8);
    for (int i = 0; i < 64; ++i) data[r * 64 + i] = static_cast<float>(base + 0.02 * rng.Normal());
  }
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.batch_size = 16;
  cfg.seed = 9;
  int calls = 0;
  const auto a = Train(data, arch, cfg, [&](const EpochLoss& e) { CHECK(e.epoch == ++calls); });
  const auto b = Train(data, arch, cfg);
  CHECK(calls == 30);
  REQUIRE(a.trace.size() == 30);
  CHECK(a.params == b.params);
  for (std::size_t i = 0; i < a.trace.size(); ++i) {
    CHECK(std::memcmp(&a.trace[i].total, &b.trace[i].total, sizeof(double)) == 0);
    CHECK(a.trace[i].total == doctest::Approx(a.trace[i].recon + a.trace[i].kl).epsilon(1e-12));
  }
  CHECK(a.trace.back().total < a.trace.front().total);
  cfg.seed = 10;
  CHECK_FALSE(Train(data, arch, cfg).params == a.params);
}

#if defined(__SSE2__)
TEST_CASE("training leaves the floating-point mode as it found it") {
  const unsigned before = _mm_getcsr();
  Rng rng(3);
  std::vector<float> data(4 * 16);
  for (auto& v : data) v = static_cast<float>(rng.Uniform());
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 2;
  Train(data, kSmall, cfg);
  CHECK(_mm_getcsr() == before);
  // Denormals still survive outside training.
  volatile float tiny = 1e-39f;
  CHECK(tiny * 1.0f != 0.0f);
}
#endif

TEST_CASE("reconstruction is deterministic and row independent") {
  const auto p = InitParams<float>(VaeArch{256, {64, 32}, 16}, 61);
  const auto x = testing::RandomVector(300 * 256, 62, 0.0, 1.0);
  const auto batch = ReconstructBatch(p, x);
  REQUIRE(batch.size() == x.size());
  for (int r : {0, 1, 127, 128, 255, 299}) {
    const auto single = Reconstruct(p, std::span(x).subspan(r * 256, 256));
    CHECK(std::memcmp(single.data(), batch.data() + r * 256, 256 * sizeof(float)) == 0);
    CHECK(Reconstruct(p, std::span(x).subspan(r * 256, 256)) == single);
  }
  for (float v : batch) {
    CHECK(v > 0.0f);
    CHECK(v < 1.0f);
  }
}

TEST_CASE("training on clean patches reconstructs them better than object patches") {
  DatasetConfig dc;
  dc.n_train = 40;
  dc.n_test = 80;
  dc.contamination = 0.1;
  dc.seed = 3;
  const auto ds = GenerateDataset(dc);
  std::vector<float> train;
  for (const auto& f : ds.train) {
    for (const auto& p : SelectRoadPatches(ExtractPatches(f, dc.grid), dc.road)) {
      train.insert(train.end(), p.data.begin(), p.data.end());
    }
  }
  TrainConfig cfg;
  cfg.epochs = 8;
  cfg.batch_size = 64;
  const auto model = Train(train, VaeArch{4096, {64}, 16}, cfg);
  double clean = 0.0, dirty = 0.0;
  int n_clean = 0, n_dirty = 0;
  for (const auto& f : ds.test) {
    const auto patches = ExtractPatches(f.image, dc.grid);
    for (int cell : dc.road.selected) {
      const auto xhat = Reconstruct(model.params, patches[cell].data);
      double mse = 0.0;
      for (std::size_t i = 0; i < xhat.size(); ++i) mse += std::pow(xhat[i] - patches[cell].data[i], 2);
      mse /= xhat.size();
      if (f.patch_labels[cell]) {
        dirty += mse;
        ++n_dirty;
      } else {
        clean += mse;
        ++n_clean;
      }
    }
  }
  REQUIRE(n_dirty > 0);
  CHECK(clean / n_clean < dirty / n_dirty);
}

}  // TEST_SUITE

}  // namespace
}  // namespace fallscope
