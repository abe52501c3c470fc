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

#include "fallscope/vae.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <utility>

#if defined(__SSE2__)
#include <immintrin.h>
#endif

#include "fallscope/errors.hpp"
#include "fallscope/kernels.hpp"
#include "fallscope/random.hpp"

namespace fallscope {
namespace {

using kernels::Trans;

template <typename T>
DenseLayer<T> MakeLayer(int in, int out) {
  DenseLayer<T> layer;
  layer.in = in;
  layer.out = out;
  layer.weight.assign(static_cast<std::size_t>(in) * out, T(0));
  layer.bias.assign(out, T(0));
  return layer;
}

void ValidateArch(const VaeArch& arch) {
  if (arch.input_dim < 1 || arch.latent_dim < 1 || arch.hidden.empty()) {
    throw ContractError("VAE architecture needs input, latent and at least one hidden layer");
  }
  for (int h : arch.hidden) {
    if (h < 1) throw ContractError("VAE hidden layer sizes must be positive");
  }
}

// out[batch x layer.out] = in[batch x layer.in] * W^T + b
template <typename T>
void AffineForward(const DenseLayer<T>& layer, const T* in, int batch, T* out) {
  kernels::Gemm<T>(Trans::kNo, Trans::kYes, batch, layer.out, layer.in, in, layer.in,
                   layer.weight.data(), layer.in, T(0), out, layer.out);
  for (int r = 0; r < batch; ++r) {
    T* row = out + static_cast<std::size_t>(r) * layer.out;
    for (int j = 0; j < layer.out; ++j) row[j] += layer.bias[j];
  }
}

// grad_w = d_out^T * in, grad_b = column sums of d_out.
template <typename T>
void AffineWeightGrad(const T* d_out, const T* in, int batch, DenseLayer<T>& grad) {
  kernels::Gemm<T>(Trans::kYes, Trans::kNo, grad.out, grad.in, batch, d_out, grad.out, in, grad.in,
                   T(0), grad.weight.data(), grad.in);
  std::fill(grad.bias.begin(), grad.bias.end(), T(0));
  for (int r = 0; r < batch; ++r) {
    const T* row = d_out + static_cast<std::size_t>(r) * grad.out;
    for (int j = 0; j < grad.out; ++j) grad.bias[j] += row[j];
  }
}

// d_in[batch x layer.in] (+)= d_out * W
template <typename T>
void AffineInputGrad(const DenseLayer<T>& layer, const T* d_out, int batch, T* d_in,
                     bool accumulate) {
  kernels::Gemm<T>(Trans::kNo, Trans::kNo, batch, layer.in, layer.out, d_out, layer.out,
                   layer.weight.data(), layer.in, accumulate ? T(1) : T(0), d_in, layer.in);
}

template <typename T>
void ReluInPlace(std::vector<T>& v) {
  for (auto& x : v) x = x > T(0) ? x : T(0);
}

template <typename T>
void RequireFinite(std::span<const T> v, const char* what) {
  for (T x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite ") + what);
  }
}

template <typename T>
T Sigmoid(T y) {
  // Kept strictly inside (0, 1) even where exp saturates.
  constexpr T kLo = std::numeric_limits<T>::epsilon() / 2;
  constexpr T kHi = T(1) - std::numeric_limits<T>::epsilon() / 2;
  return std::clamp(T(1) / (T(1) + std::exp(-y)), kLo, kHi);
}

template <typename T>
struct Activations {
  std::vector<std::vector<T>> enc;  // post-ReLU, one per encoder layer
  std::vector<T> mu;
  std::vector<T> logvar_raw;
  std::vector<T> logvar;
  std::vector<T> z;
  std::vector<std::vector<T>> dec;  // post-ReLU hidden decoder layers
  std::vector<T> xhat;
};

template <typename T>
void EncodeBatch(const BasicVaeParams<T>& p, const T* inputs, int batch, Activations<T>& act) {
  act.enc.resize(p.encoder.size());
  const T* in = inputs;
  for (std::size_t l = 0; l < p.encoder.size(); ++l) {
    auto& h = act.enc[l];
    h.resize(static_cast<std::size_t>(batch) * p.encoder[l].out);
    AffineForward(p.encoder[l], in, batch, h.data());
    ReluInPlace(h);
    in = h.data();
  }
  const std::size_t latent = static_cast<std::size_t>(batch) * p.arch.latent_dim;
  act.mu.resize(latent);
  act.logvar_raw.resize(latent);
  AffineForward(p.mu_head, in, batch, act.mu.data());
  AffineForward(p.logvar_head, in, batch, act.logvar_raw.data());
  act.logvar.resize(latent);
  for (std::size_t i = 0; i < latent; ++i) {
    act.logvar[i] = std::clamp(act.logvar_raw[i], T(kLogvarMin), T(kLogvarMax));
  }
  RequireFinite<T>(act.mu, "encoder mu");
  RequireFinite<T>(act.logvar_raw, "encoder logvar");
}

template <typename T>
void DecodeBatch(const BasicVaeParams<T>& p, const T* z, int batch, Activations<T>& act) {
  const std::size_t hidden_layers = p.decoder.size() - 1;
  act.dec.resize(hidden_layers);
  const T* in = z;
  for (std::size_t l = 0; l < hidden_layers; ++l) {
    auto& h = act.dec[l];
    h.resize(static_cast<std::size_t>(batch) * p.decoder[l].out);
    AffineForward(p.decoder[l], in, batch, h.data());
    ReluInPlace(h);
    in = h.data();
  }
  act.xhat.resize(static_cast<std::size_t>(batch) * p.arch.input_dim);
  AffineForward(p.decoder.back(), in, batch, act.xhat.data());
  for (auto& v : act.xhat) {
    if (!std::isfinite(v)) throw NumericError("non-finite decoder output");
    v = Sigmoid(v);
  }
}

template <typename T>
void CheckShape(const BasicVaeParams<T>& p, std::size_t n, std::size_t dim, const char* what) {
  if (dim == 0 || n % dim != 0) {
    throw ContractError(std::string(what) + " length does not match the VAE architecture");
  }
  (void)p;
}

}  // namespace

template <typename T>
BasicVaeParams<T> BasicVaeParams<T>::Zeros(const VaeArch& arch) {
  ValidateArch(arch);
  BasicVaeParams<T> p;
  p.arch = arch;
  int prev = arch.input_dim;
  for (int h : arch.hidden) {
    p.encoder.push_back(MakeLayer<T>(prev, h));
    prev = h;
  }
  p.mu_head = MakeLayer<T>(prev, arch.latent_dim);
  p.logvar_head = MakeLayer<T>(prev, arch.latent_dim);
  prev = arch.latent_dim;
  for (auto it = arch.hidden.rbegin(); it != arch.hidden.rend(); ++it) {
    p.decoder.push_back(MakeLayer<T>(prev, *it));
    prev = *it;
  }
  p.decoder.push_back(MakeLayer<T>(prev, arch.input_dim));
  return p;
}

template <typename T>
std::size_t BasicVaeParams<T>::ParameterCount() const {
  std::size_t n = 0;
  ForEachLayer([&](const std::string&, const DenseLayer<T>& l) { n += l.weight.size() + l.bias.size(); });
  return n;
}

template <typename T>
bool BasicVaeParams<T>::AllFinite() const {
  bool ok = true;
  ForEachLayer([&](const std::string&, const DenseLayer<T>& l) {
    for (T w : l.weight) ok = ok && std::isfinite(w);
    for (T b : l.bias) ok = ok && std::isfinite(b);
  });
  return ok;
}

void TrainConfig::Validate() const {
  if (epochs < 1) throw ContractError("epochs must be >= 1");
  if (batch_size < 1) throw ContractError("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ContractError("learning_rate must be > 0");
}

template <typename T>
BasicVaeParams<T> InitParams(const VaeArch& arch, std::uint64_t seed) {
  auto p = BasicVaeParams<T>::Zeros(arch);
  Rng rng(seed);
  p.ForEachLayer([&](const std::string&, DenseLayer<T>& layer) {
    const double bound = std::sqrt(6.0 / (layer.in + layer.out));
    for (auto& w : layer.weight) w = static_cast<T>(rng.Uniform(-bound, bound));
  });
  return p;
}

template <typename T>
BasicEncoderOutput<T> Encode(const BasicVaeParams<T>& params, std::span<const T> x) {
  if (static_cast<int>(x.size()) != params.arch.input_dim) {
    throw ContractError("encode: input length does not match the VAE architecture");
  }
  Activations<T> act;
  EncodeBatch(params, x.data(), 1, act);
  return {std::move(act.mu), std::move(act.logvar)};
}

template <typename T>
std::vector<T> Reparameterize(const BasicEncoderOutput<T>& out, std::span<const T> noise) {
  if (noise.size() != out.mu.size() || out.logvar.size() != out.mu.size()) {
    throw ContractError("reparameterize: noise length differs from latent size");
  }
  std::vector<T> z(out.mu.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    z[i] = out.mu[i] + std::exp(T(0.5) * out.logvar[i]) * noise[i];
  }
  return z;
}

template <typename T>
std::vector<T> Decode(const BasicVaeParams<T>& params, std::span<const T> z) {
  if (static_cast<int>(z.size()) != params.arch.latent_dim) {
    throw ContractError("decode: latent length does not match the VAE architecture");
  }
  RequireFinite<T>(z, "latent code");
  Activations<T> act;
  DecodeBatch(params, z.data(), 1, act);
  return std::move(act.xhat);
}

template <typename T>
LossBreakdown ElboLoss(std::span<const T> x, std::span<const T> xhat,
                       const BasicEncoderOutput<T>& out, double kl_weight) {
  if (x.size() != xhat.size() || out.mu.size() != out.logvar.size()) {
    throw ContractError("elbo: shape mismatch");
  }
  LossBreakdown loss;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(x[i]) - static_cast<double>(xhat[i]);
    loss.recon += d * d;
  }
  for (std::size_t i = 0; i < out.mu.size(); ++i) {
    const double mu = out.mu[i];
    const double lv = out.logvar[i];
    loss.kl += -0.5 * (1.0 + lv - mu * mu - std::exp(lv));
  }
  loss.total = loss.recon + kl_weight * loss.kl;
  return loss;
}

template <typename T>
LossBreakdown BackwardBatch(const BasicVaeParams<T>& p, std::span<const T> inputs,
                            std::span<const T> noise, int batch, double kl_weight,
                            BasicVaeParams<T>& grads) {
  const int in_dim = p.arch.input_dim;
  const int latent = p.arch.latent_dim;
  if (batch < 1 || inputs.size() != static_cast<std::size_t>(batch) * in_dim ||
      noise.size() != static_cast<std::size_t>(batch) * latent) {
    throw ContractError("backward: batch buffers do not match the VAE architecture");
  }
  if (!(grads.arch == p.arch)) grads = BasicVaeParams<T>::Zeros(p.arch);

  Activations<T> act;
  EncodeBatch(p, inputs.data(), batch, act);
  const std::size_t latent_n = static_cast<std::size_t>(batch) * latent;
  std::vector<T> sigma(latent_n);
  act.z.resize(latent_n);
  for (std::size_t i = 0; i < latent_n; ++i) {
    sigma[i] = std::exp(T(0.5) * act.logvar[i]);
    act.z[i] = act.mu[i] + sigma[i] * noise[i];
  }
  DecodeBatch(p, act.z.data(), batch, act);

  LossBreakdown loss;
  const T scale = T(1) / static_cast<T>(batch);
  const T beta = static_cast<T>(kl_weight);

  // Output layer: d(sum (x - xhat)^2)/d(pre-sigmoid).
  std::vector<T> d_cur(act.xhat.size());
  for (std::size_t i = 0; i < act.xhat.size(); ++i) {
    const T xh = act.xhat[i];
    const T diff = xh - inputs[i];
    loss.recon += static_cast<double>(diff) * static_cast<double>(diff);
    d_cur[i] = T(2) * diff * scale * xh * (T(1) - xh);
  }
  for (std::size_t i = 0; i < latent_n; ++i) {
    const double mu = act.mu[i];
    const double lv = act.logvar[i];
    loss.kl += -0.5 * (1.0 + lv - mu * mu - std::exp(lv));
  }
  loss.total = loss.recon + kl_weight * loss.kl;
  if (!std::isfinite(loss.total)) throw NumericError("non-finite loss");

  // Decoder, last layer first.
  std::vector<T> d_prev;
  for (std::size_t l = p.decoder.size(); l-- > 0;) {
    const T* layer_in = l == 0 ? act.z.data() : act.dec[l - 1].data();
    AffineWeightGrad(d_cur.data(), layer_in, batch, grads.decoder[l]);
    d_prev.resize(static_cast<std::size_t>(batch) * p.decoder[l].in);
    AffineInputGrad(p.decoder[l], d_cur.data(), batch, d_prev.data(), false);
    if (l > 0) {
      const auto& h = act.dec[l - 1];
      for (std::size_t i = 0; i < d_prev.size(); ++i) {
        if (!(h[i] > T(0))) d_prev[i] = T(0);
      }
    }
    std::swap(d_cur, d_prev);
  }
  // d_cur is now dL/dz.
  std::vector<T> d_mu(latent_n), d_logvar(latent_n);
  for (std::size_t i = 0; i < latent_n; ++i) {
    const T dz = d_cur[i];
    d_mu[i] = dz + beta * scale * act.mu[i];
    const bool inside = act.logvar_raw[i] >= T(kLogvarMin) && act.logvar_raw[i] <= T(kLogvarMax);
    const T d_lv = dz * noise[i] * T(0.5) * sigma[i] +
                   beta * scale * T(0.5) * (std::exp(act.logvar[i]) - T(1));
    d_logvar[i] = inside ? d_lv : T(0);
  }

  const std::size_t last = p.encoder.size() - 1;
  const T* head_in = act.enc[last].data();
  AffineWeightGrad(d_mu.data(), head_in, batch, grads.mu_head);
  AffineWeightGrad(d_logvar.data(), head_in, batch, grads.logvar_head);
  d_cur.resize(static_cast<std::size_t>(batch) * p.encoder[last].out);
  AffineInputGrad(p.mu_head, d_mu.data(), batch, d_cur.data(), false);
  AffineInputGrad(p.logvar_head, d_logvar.data(), batch, d_cur.data(), true);

  for (std::size_t l = p.encoder.size(); l-- > 0;) {
    const auto& h = act.enc[l];
    for (std::size_t i = 0; i < d_cur.size(); ++i) {
      if (!(h[i] > T(0))) d_cur[i] = T(0);
    }
    const T* layer_in = l == 0 ? inputs.data() : act.enc[l - 1].data();
    AffineWeightGrad(d_cur.data(), layer_in, batch, grads.encoder[l]);
    if (l > 0) {
      d_prev.resize(static_cast<std::size_t>(batch) * p.encoder[l].in);
      AffineInputGrad(p.encoder[l], d_cur.data(), batch, d_prev.data(), false);
      std::swap(d_cur, d_prev);
    }
  }
  return loss;
}

template <typename T>
GradientResult<T> Backward(const BasicVaeParams<T>& params, std::span<const T> x,
                           std::span<const T> noise, double kl_weight) {
  GradientResult<T> result;
  result.grads = BasicVaeParams<T>::Zeros(params.arch);
  result.loss = BackwardBatch(params, x, noise, 1, kl_weight, result.grads);
  if (!result.grads.AllFinite()) throw NumericError("non-finite gradient");
  return result;
}

namespace {

// Flat views of every weight and bias block in canonical order.
std::vector<std::span<float>> Blocks(VaeParams& p) {
  std::vector<std::span<float>> out;
  p.ForEachLayer([&](const std::string&, DenseLayer<float>& l) {
    out.emplace_back(l.weight);
    out.emplace_back(l.bias);
  });
  return out;
}

// Flushes denormals to zero for the lifetime of the guard. Adam moments of
// parameters with vanishing gradients decay into the denormal range after a
// few hundred steps, and denormal arithmetic is many times slower on x86.
class FlushDenormals {
 public:
#if defined(__SSE2__)
  FlushDenormals() : saved_(_mm_getcsr()) { _mm_setcsr(saved_ | 0x8040u); }  // FTZ | DAZ
  ~FlushDenormals() { _mm_setcsr(saved_); }

 private:
  unsigned saved_;
#endif
};

}  // namespace

TrainResult Train(std::span<const float> patches, const VaeArch& arch, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
  const FlushDenormals flush;
  cfg.Validate();
  ValidateArch(arch);
  const std::size_t dim = arch.input_dim;
  if (patches.empty() || patches.size() % dim != 0) {
    throw ContractError("train: need at least one patch of the configured input size");
  }
  const std::size_t n = patches.size() / dim;

  TrainResult result;
  result.params = InitParams<float>(arch, cfg.seed);
  auto grads = VaeParams::Zeros(arch);
  auto first = VaeParams::Zeros(arch);
  auto second = VaeParams::Zeros(arch);
  auto param_blocks = Blocks(result.params);
  auto grad_blocks = Blocks(grads);
  auto first_blocks = Blocks(first);
  auto second_blocks = Blocks(second);

  Rng rng(MixSeed(cfg.seed, 1));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<float> batch_x;
  std::vector<float> batch_noise;
  kernels::AdamConstants adam{cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, 0};

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.Shuffle(std::span<std::size_t>(order));
    EpochLoss sums;
    sums.epoch = epoch;
    int batch_index = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size, ++batch_index) {
      const int batch = static_cast<int>(std::min<std::size_t>(cfg.batch_size, n - start));
      batch_x.resize(static_cast<std::size_t>(batch) * dim);
      for (int r = 0; r < batch; ++r) {
        std::copy_n(patches.data() + order[start + r] * dim, dim, batch_x.data() + r * dim);
      }
      batch_noise.resize(static_cast<std::size_t>(batch) * arch.latent_dim);
      for (auto& e : batch_noise) e = static_cast<float>(rng.Normal());

      LossBreakdown loss;
      try {
        loss = BackwardBatch<float>(result.params, batch_x, batch_noise, batch, cfg.kl_weight, grads);
      } catch (const NumericError& e) {
        throw TrainingError(std::string("training diverged: ") + e.what(), epoch, batch_index);
      }
      if (!std::isfinite(loss.total) || !grads.AllFinite()) {
        throw TrainingError("training diverged: non-finite loss or gradient", epoch, batch_index);
      }
      sums.recon += loss.recon;
      sums.kl += loss.kl;
      sums.total += loss.total;

      adam.step += 1;
      for (std::size_t b = 0; b < param_blocks.size(); ++b) {
        kernels::AdamStep<float>(param_blocks[b], grad_blocks[b], first_blocks[b],
                                 second_blocks[b], adam);
      }
    }
    sums.recon /= static_cast<double>(n);
    sums.kl /= static_cast<double>(n);
    sums.total /= static_cast<double>(n);
    result.trace.push_back(sums);
    if (on_epoch) on_epoch(sums);
  }
  return result;
}

std::vector<float> Reconstruct(const VaeParams& params, std::span<const float> x) {
  const auto out = Encode<float>(params, x);
  return Decode<float>(params, out.mu);
}

std::vector<float> ReconstructBatch(const VaeParams& params, std::span<const float> inputs) {
  const std::size_t dim = params.arch.input_dim;
  CheckShape(params, inputs.size(), dim, "reconstruct");
  const std::size_t n = inputs.size() / dim;
  std::vector<float> out(inputs.size());
  constexpr std::size_t kChunk = 128;
  Activations<float> act;
  for (std::size_t start = 0; start < n; start += kChunk) {
    const int rows = static_cast<int>(std::min(kChunk, n - start));
    EncodeBatch(params, inputs.data() + start * dim, rows, act);
    DecodeBatch(params, act.mu.data(), rows, act);
    std::copy(act.xhat.begin(), act.xhat.end(), out.begin() + start * dim);
  }
  return out;
}

#define FALLSCOPE_INSTANTIATE_VAE(T)                                                             \
  template struct BasicVaeParams<T>;                                                             \
  template BasicVaeParams<T> InitParams<T>(const VaeArch&, std::uint64_t);                       \
  template BasicEncoderOutput<T> Encode<T>(const BasicVaeParams<T>&, std::span<const T>);        \
  template std::vector<T> Reparameterize<T>(const BasicEncoderOutput<T>&, std::span<const T>);   \
  template std::vector<T> Decode<T>(const BasicVaeParams<T>&, std::span<const T>);               \
  template LossBreakdown ElboLoss<T>(std::span<const T>, std::span<const T>,                     \
                                     const BasicEncoderOutput<T>&, double);                      \
  template GradientResult<T> Backward<T>(const BasicVaeParams<T>&, std::span<const T>,           \
                                         std::span<const T>, double);                            \
  template LossBreakdown BackwardBatch<T>(const BasicVaeParams<T>&, std::span<const T>,          \
                                          std::span<const T>, int, double, BasicVaeParams<T>&);

FALLSCOPE_INSTANTIATE_VAE(float)
FALLSCOPE_INSTANTIATE_VAE(double)

#undef FALLSCOPE_INSTANTIATE_VAE

}  // namespace fallscope
