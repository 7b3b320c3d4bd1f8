#include "occflow/optim.hpp"

#include <cmath>

namespace occflow {

AdamWState AdamWState::init(const std::vector<ParamRef>& params, AdamWConfig cfg) {
  AdamWState st;
  st.cfg = cfg;
  for (const auto& p : params) {
    st.m.push_back(Tensor::zeros(p.value->shape));
    st.v.push_back(Tensor::zeros(p.value->shape));
  }
  return st;
}

void adamw_step(std::vector<ParamRef>& params, const std::vector<Tensor>& grads,
                AdamWState& state, double lr) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw std::invalid_argument("adamw_step: param/grad/state count mismatch");
  if (lr < 0.0) throw std::invalid_argument("adamw_step: negative lr");
  for (size_t i = 0; i < params.size(); ++i) {
    require_same_shape(*params[i].value, grads[i], "adamw_step " + params[i].name);
    if (!all_finite(grads[i]))
      throw std::runtime_error("adamw_step: non-finite gradient in " + params[i].name);
  }

  state.step += 1;
  const AdamWConfig& c = state.cfg;
  double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));

  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i].value;
    const Tensor& g = grads[i];
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    double wd = params[i].decay ? c.weight_decay : 0.0;
    for (int64_t j = 0; j < p.size(); ++j) {
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
      double mhat = m[j] / bc1;
      double vhat = v[j] / bc2;
      p[j] -= lr * (mhat / (std::sqrt(vhat) + c.eps) + wd * p[j]);
    }
  }
}

double lr_at_step(const LrSchedule& s, int64_t step) {
  if (step < 0) throw std::invalid_argument("lr_at_step: negative step");
  double floor = s.floor_fraction * s.peak_lr;
  if (step >= s.total_steps) return floor;
  if (s.warmup_steps > 0 && step < s.warmup_steps)
    return s.peak_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  double span = static_cast<double>(s.total_steps - s.warmup_steps);
  double u = span > 0 ? static_cast<double>(step - s.warmup_steps) / span : 1.0;
  return floor + (s.peak_lr - floor) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * u));
}

EmaState EmaState::init(const std::vector<ParamRef>& params, double decay) {
  if (!(decay >= 0.0 && decay < 1.0)) throw std::invalid_argument("ema decay must be in [0,1)");
  EmaState e;
  e.decay = decay;
  for (const auto& p : params) e.shadow.push_back(*p.value);
  return e;
}

void ema_update(EmaState& e, const std::vector<ParamRef>& params) {
  if (e.shadow.size() != params.size())
    throw std::invalid_argument("ema_update: param count mismatch");
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& s = e.shadow[i];
    const Tensor& p = *params[i].value;
    require_same_shape(s, p, "ema_update " + params[i].name);
    for (int64_t j = 0; j < s.size(); ++j) s[j] = e.decay * s[j] + (1.0 - e.decay) * p[j];
  }
}

void ema_write_to(const EmaState& e, std::vector<ParamRef>& params) {
  if (e.shadow.size() != params.size())
    throw std::invalid_argument("ema_write_to: param count mismatch");
  for (size_t i = 0; i < params.size(); ++i) *params[i].value = e.shadow[i];
}

}  // namespace occflow
