#pragma once

#include <optional>
#include <vector>

#include "occflow/nn.hpp"
#include "occflow/occupancy.hpp"
#include "occflow/tensor.hpp"

namespace occflow {

// The compressor works per BEV cell: each downsample x downsample column of
// voxels is summarized into a fixed-size descriptor (class fractions on a
// sub_x * sub_y * sub_z reference block), so the same weights apply to any
// grid whose voxel dims are multiples of the descriptor block. The encoder
// maps a descriptor to (mu, log sigma); the decoder maps a latent back to
// per-block class logits which broadcast to the covered voxels.
struct VaeConfig {
  int64_t latent_channels = 8;   // c
  int64_t downsample = 4;        // f, spatial
  int64_t sub_x = 4, sub_y = 4, sub_z = 8;
  uint32_t n_classes = 2;
  std::vector<int64_t> enc_hidden = {128};
  std::vector<int64_t> dec_hidden = {128};
  Activation activation = Activation::SiLU;

  int64_t feature_dim() const { return sub_x * sub_y * sub_z * static_cast<int64_t>(n_classes); }
};

struct VaeModel {
  VaeConfig cfg;
  Mlp encoder;  // feature_dim -> ... -> 2c
  Mlp decoder;  // c -> ... -> feature_dim (class logits)

  static VaeModel init(const VaeConfig& cfg, Rng& rng);
  std::vector<ParamRef> params();
};

// Per-cell Gaussian code; tensors are (h, w, c).
struct LatentCode {
  Tensor mu;
  Tensor sigma;
  Tensor z;
  bool scaled = false;  // true once the flow-side rescale has been applied
};

enum class VaeMode { Pretrain, FinetuneAligned };

struct VaeTrainConfig {
  double beta = 1e-4;    // KL weight
  double lambda = 1.0;   // Lovasz weight
  double kappa = 1.0;    // alignment weight (finetune_aligned only)
  VaeMode mode = VaeMode::Pretrain;
};

// Descriptor rows for every latent cell: (h*w, feature_dim).
Tensor vae_features(const VaeModel& m, const OccupancyGrid& grid);

// Deterministic encoder pass; mu and sigma are (h, w, c).
std::pair<Tensor, Tensor> encode(const VaeModel& m, const OccupancyGrid& grid);

// z = mu + sigma * eps
Tensor reparameterize(const Tensor& mu, const Tensor& sigma, const Tensor& eps);

struct DecodeResult {
  Tensor probs;         // (H, W, D, n_classes), rows sum to 1
  OccupancyGrid grid;   // argmax classes, ties resolved to the lowest id
};

DecodeResult decode(const VaeModel& m, const Tensor& z, int64_t H, int64_t W, int64_t D);

// Encode with z = mu, decode, return the reconstructed grid.
OccupancyGrid vae_reconstruct(const VaeModel& m, const OccupancyGrid& grid);

// Mean over cells of 0.5 * sum_channels(mu^2 + sigma^2 - 1 - 2 ln sigma);
// the last axis is the channel axis.
double kl_divergence(const Tensor& mu, const Tensor& sigma);

// Lovasz-softmax over flattened (n, n_classes) probabilities; averages the
// Jaccard-loss extension over classes present in the labels.
double lovasz_softmax(const Tensor& probs, const std::vector<uint8_t>& labels);

struct LovaszGradResult {
  double loss = 0.0;
  Tensor d_probs;  // (n, n_classes)
};
LovaszGradResult lovasz_softmax_grad(const Tensor& probs, const std::vector<uint8_t>& labels);

struct CosineAlignResult {
  double loss = 0.0;
  int64_t skipped = 0;  // zero-norm cells
};

// Mean over cells of (1 - cos(z_cell, d_cell)); d is a constant target, no
// gradient flows into it. The last axis is the channel axis.
CosineAlignResult cosine_align_loss(const Tensor& z, const Tensor& d);
struct CosineAlignGrad {
  CosineAlignResult res;
  Tensor d_z;
};
CosineAlignGrad cosine_align_grad(const Tensor& z, const Tensor& d);

struct VaeLossResult {
  double total = 0.0;
  double ce = 0.0, kl = 0.0, lovasz = 0.0, cos = 0.0;
  int64_t cos_skipped = 0;
  std::vector<Tensor> grads;  // aligned with VaeModel::params()
  LatentCode latent;
};

// Full training loss with hand-derived gradients. target_latents (d_s,
// shaped like mu) is required in finetune_aligned mode when kappa > 0.
VaeLossResult vae_loss(VaeModel& m, const OccupancyGrid& grid,
                       const std::optional<Tensor>& target_latents,
                       const VaeTrainConfig& cfg, Rng& rng);

// Same computation with the reparameterization noise supplied by the caller;
// the entry point for finite-difference checks.
VaeLossResult vae_loss_with_eps(VaeModel& m, const OccupancyGrid& grid,
                                const std::optional<Tensor>& target_latents,
                                const VaeTrainConfig& cfg, const Tensor& eps);

// (H*W*D*C) / (h*w*c): input-to-latent size ratio.
double compression_ratio(int64_t H, int64_t W, int64_t D, int64_t C,
                         int64_t h, int64_t w, int64_t c);

}  // namespace occflow
