#pragma once

#include <vector>

#include "occflow/nn.hpp"
#include "occflow/tensor.hpp"

namespace occflow {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.99;
  double weight_decay = 1e-3;
  double eps = 1e-8;
};

// Moments are kept per parameter, aligned with the ParamRef list used to
// initialize the state.
struct AdamWState {
  int64_t step = 0;
  AdamWConfig cfg;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  static AdamWState init(const std::vector<ParamRef>& params, AdamWConfig cfg);
};

// Bias-corrected AdamW with decoupled weight decay on params flagged
// `decay`. Throws on non-finite gradients without touching any state.
void adamw_step(std::vector<ParamRef>& params, const std::vector<Tensor>& grads,
                AdamWState& state, double lr);

// Linear warmup to peak, then cosine decay to floor_fraction * peak.
struct LrSchedule {
  double peak_lr = 1e-3;
  int64_t warmup_steps = 100;
  int64_t total_steps = 1000;
  double floor_fraction = 0.2;
};

double lr_at_step(const LrSchedule& s, int64_t step);

struct EmaState {
  double decay = 0.9999;
  std::vector<Tensor> shadow;

  static EmaState init(const std::vector<ParamRef>& params, double decay);
};

// shadow <- decay * shadow + (1 - decay) * params
void ema_update(EmaState& e, const std::vector<ParamRef>& params);
void ema_write_to(const EmaState& e, std::vector<ParamRef>& params);

}  // namespace occflow
