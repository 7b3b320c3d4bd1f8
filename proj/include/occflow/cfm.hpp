#pragma once

#include <optional>
#include <vector>

#include "occflow/nn.hpp"
#include "occflow/tensor.hpp"

namespace occflow {

struct FlowConfig {
  double sigma_scale = 10.0;    // latent rescale factor (config key latent_scale)
  double cfg_drop_prob = 0.25;  // condition dropout probability (cfg_drop)
  double cfg_scale = 2.0;       // guidance strength s (cfg_scale)
  int64_t nfe = 10;             // Euler steps at sampling time (nfe)
  int64_t history_len = 3;
  int64_t horizon_len = 3;

  void validate() const;
};

// Conditioning context for one sample. `history` and `trajectory` are
// flattened; `dropped` selects the unconditional path (history and the
// trajectory embedding are zeroed inside the model).
struct Condition {
  Tensor history;
  Tensor trajectory;
  bool dropped = false;

  static Condition null_like(const Condition& proto);
};

struct CfmSample {
  Tensor history;     // flattened history latents (scaled by sigma_scale)
  Tensor future;      // flattened future latents (raw VAE scale)
  Tensor trajectory;  // flattened per-frame pose deltas
  bool dropped = false;
};

using CfmBatch = std::vector<CfmSample>;

// Velocity field u(x_t, t, condition). The backbone consumes
// [x_t | history | trajectory embedding | sinusoidal t embedding]; the
// trajectory passes through its own small affine layer first.
struct VelocityModel {
  Mlp backbone;
  Mlp traj_embed;  // single affine layer; absent when traj_in_dim == 0
  int64_t x_dim = 0;
  int64_t hist_dim = 0;
  int64_t traj_in_dim = 0;
  int64_t traj_emb_dim = 0;
  int64_t time_dim = 16;

  static VelocityModel init(int64_t x_dim, int64_t hist_dim, int64_t traj_in_dim,
                            int64_t traj_emb_dim, int64_t time_dim,
                            const std::vector<int64_t>& hidden, Activation act, Rng& rng);

  std::vector<ParamRef> params();
  std::vector<ParamRef> lora_params();  // adapter tensors only
  void attach_lora(int64_t rank, double alpha, Rng& rng);

  Tensor forward(const Tensor& x, const Condition& cond, double t) const;

  struct Backward {
    std::vector<Tensor> param_grads;  // aligned with params()
    Tensor x_grad;
  };
  Backward backward(const Tensor& x, const Condition& cond, double t, const Tensor& upstream) const;

  // v^T du/dx for the probability-flow ODE trace.
  Tensor x_vjp(const Tensor& x, const Condition& cond, double t, const Tensor& v) const;
};

Tensor sinusoidal_time_embedding(double t, int64_t dim);

// Elementwise z * factor; inverse is rescale_latent(z, 1/factor).
Tensor rescale_latent(const Tensor& z, double factor);

// x_t = (1 - t) * eps + t * sigma_scale * z_future
Tensor interpolate_path(const Tensor& eps, const Tensor& z_future, double t, double sigma_scale);

// t = logistic(g), g ~ N(0,1); strictly inside (0,1).
double sample_timestep(Rng& rng);

// Per-sample Bernoulli(p) dropout: zero history and trajectory, set the flag.
CfmBatch drop_condition(const CfmBatch& batch, double p, Rng& rng);

// Joint assembly along the time axis: (Ta, ...) + (Tb, ...) -> (Ta+Tb, ...).
Tensor concat_time(const Tensor& history, const Tensor& future);
// Channel-stacked variant: last axis doubles, leading dims must match.
Tensor concat_channels(const Tensor& history, const Tensor& future);

struct CfmLossResult {
  double loss = 0.0;
  std::vector<Tensor> grads;  // aligned with model.params()
};

// Rectified-flow regression ||u(x_t, t, cond) - (sigma_scale * z - eps)||^2,
// mean over the batch; t ~ sigmoid-normal, eps ~ N(0, I), condition dropout
// with cfg.cfg_drop_prob.
CfmLossResult cfm_loss(VelocityModel& model, const CfmBatch& batch, const FlowConfig& cfg, Rng& rng);

// Deterministic core with the draws supplied; finite-difference entry point.
CfmLossResult cfm_loss_at(VelocityModel& model, const CfmBatch& batch, const FlowConfig& cfg,
                          const std::vector<double>& ts, const std::vector<Tensor>& epss,
                          const std::vector<uint8_t>& drop_flags);

// (1 + s) * v_cond - s * v_uncond
Tensor cfg_fuse(const Tensor& v_cond, const Tensor& v_uncond, double s);

// nfe uniform Euler steps from x0 ~ N(0, I) under the CFG-fused field; two
// model calls per step when s > 0. Returns x1 / sigma_scale (VAE scale).
Tensor euler_sample(const VelocityModel& model, const Condition& condition, const FlowConfig& cfg,
                    Rng& rng);

}  // namespace occflow
