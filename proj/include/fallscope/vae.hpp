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

// Fully connected variational auto-encoder over flattened patches.
//
// Encoder: input -> hidden[0] -> ... -> hidden[n-1] (ReLU), then two affine
// heads producing mu and logvar (clamped to [-10, 10]). Decoder mirrors the
// hidden stack from the latent code back to the input with ReLU hidden layers
// and a sigmoid output. The objective per patch is
//
//   total = sum (x - xhat)^2 + kl_weight * KL(N(mu, exp(logvar)) || N(0, I)),
//
// optimized with Adam on single-sample pathwise gradients. All dense
// arithmetic goes through kernels::Gemm.
//
// Templated on the scalar type: float is the training/storage precision,
// double is instantiated for gradient checking.

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace fallscope {

struct VaeArch {
  int input_dim = 4096;
  std::vector<int> hidden = {1024, 256};
  int latent_dim = 128;

  friend bool operator==(const VaeArch&, const VaeArch&) = default;
};

template <typename T>
struct DenseLayer {
  int in = 0;
  int out = 0;
  std::vector<T> weight;  // out x in, row-major
  std::vector<T> bias;    // out

  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

template <typename T>
struct BasicVaeParams {
  VaeArch arch;
  std::vector<DenseLayer<T>> encoder;  // input -> ... -> hidden.back()
  DenseLayer<T> mu_head;
  DenseLayer<T> logvar_head;
  std::vector<DenseLayer<T>> decoder;  // latent -> ... -> input

  // Zero-valued parameters of the given architecture.
  static BasicVaeParams Zeros(const VaeArch& arch);

  // Layers in canonical order with stable names ("enc0", ..., "mu", "logvar",
  // "dec0", ...). Used by the optimizer, serialization and gradient checks.
  template <typename F>
  void ForEachLayer(F&& fn) {
    for (std::size_t i = 0; i < encoder.size(); ++i) fn("enc" + std::to_string(i), encoder[i]);
    fn(std::string("mu"), mu_head);
    fn(std::string("logvar"), logvar_head);
    for (std::size_t i = 0; i < decoder.size(); ++i) fn("dec" + std::to_string(i), decoder[i]);
  }
  template <typename F>
  void ForEachLayer(F&& fn) const {
    const_cast<BasicVaeParams*>(this)->ForEachLayer(
        [&](const std::string& name, DenseLayer<T>& layer) { fn(name, std::as_const(layer)); });
  }

  std::size_t ParameterCount() const;
  bool AllFinite() const;

  friend bool operator==(const BasicVaeParams&, const BasicVaeParams&) = default;
};

using VaeParams = BasicVaeParams<float>;

struct TrainConfig {
  int epochs = 400;
  int batch_size = 128;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  double kl_weight = 1.0;

  // Throws ContractError on epochs < 1, batch_size < 1 or learning_rate <= 0.
  void Validate() const;
};

template <typename T>
struct BasicEncoderOutput {
  std::vector<T> mu;
  std::vector<T> logvar;
};
using EncoderOutput = BasicEncoderOutput<float>;

struct LossBreakdown {
  double recon = 0.0;
  double kl = 0.0;
  double total = 0.0;
};

struct EpochLoss {
  int epoch = 0;  // 1-based
  double recon = 0.0;
  double kl = 0.0;
  double total = 0.0;
};

inline constexpr double kLogvarMin = -10.0;
inline constexpr double kLogvarMax = 10.0;

// Xavier-uniform weights, zero biases; deterministic per seed.
template <typename T>
BasicVaeParams<T> InitParams(const VaeArch& arch, std::uint64_t seed);

template <typename T>
BasicEncoderOutput<T> Encode(const BasicVaeParams<T>& params, std::span<const T> x);

// z = mu + exp(logvar / 2) * noise
template <typename T>
std::vector<T> Reparameterize(const BasicEncoderOutput<T>& out, std::span<const T> noise);

template <typename T>
std::vector<T> Decode(const BasicVaeParams<T>& params, std::span<const T> z);

template <typename T>
LossBreakdown ElboLoss(std::span<const T> x, std::span<const T> xhat,
                       const BasicEncoderOutput<T>& out, double kl_weight);

template <typename T>
struct GradientResult {
  BasicVaeParams<T> grads;
  LossBreakdown loss;
};

// Pathwise gradient of the per-patch total loss for a fixed noise draw.
template <typename T>
GradientResult<T> Backward(const BasicVaeParams<T>& params, std::span<const T> x,
                           std::span<const T> noise, double kl_weight);

// Batched form: `inputs` is batch x input_dim, `noise` batch x latent_dim.
// Gradients are of the batch-mean loss; the returned loss is the batch sum.
template <typename T>
LossBreakdown BackwardBatch(const BasicVaeParams<T>& params, std::span<const T> inputs,
                            std::span<const T> noise, int batch, double kl_weight,
                            BasicVaeParams<T>& grads);

struct TrainResult {
  VaeParams params;
  std::vector<EpochLoss> trace;
};

using EpochCallback = std::function<void(const EpochLoss&)>;

// `patches` holds n rows of arch.input_dim floats. Throws TrainingError on a
// non-finite batch loss.
TrainResult Train(std::span<const float> patches, const VaeArch& arch, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

// Deterministic inference: decode(mu).
std::vector<float> Reconstruct(const VaeParams& params, std::span<const float> x);

// Row-wise Reconstruct over n inputs; rows are processed in chunks so the
// result for a row does not depend on its neighbours.
std::vector<float> ReconstructBatch(const VaeParams& params, std::span<const float> inputs);

}  // namespace fallscope
