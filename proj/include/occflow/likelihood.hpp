#pragma once

#include <memory>
#include <optional>

#include "occflow/cfm.hpp"
#include "occflow/tensor.hpp"

namespace occflow {

// Fixed-step Euler solver settings. 1/step is rounded to the nearest integer
// step count; the tolerances are recorded in reports but inert for a fixed
// step size.
struct OdeConfig {
  double step = 0.02;
  double rtol = 1e-5;
  double atol = 1e-5;

  int64_t n_steps() const;
};

// Rademacher probes for the Hutchinson trace estimate. Probes are redrawn at
// every quadrature node; there is no orthogonal-completion mode, the
// estimator is plain Monte-Carlo.
struct ProbeConfig {
  int64_t n_probes = 64;
};

// Velocity field with a vector-Jacobian product, the interface the ODE
// solver integrates.
class OdeField {
 public:
  virtual ~OdeField() = default;
  virtual int64_t dim() const = 0;
  virtual Tensor eval(const Tensor& x, double t) const = 0;
  virtual Tensor vjp(const Tensor& x, double t, const Tensor& v) const = 0;
};

// Adapter over a trained velocity model with a fixed condition.
class VelocityOdeField : public OdeField {
 public:
  VelocityOdeField(const VelocityModel& model, Condition condition)
      : model_(&model), cond_(std::move(condition)) {}
  int64_t dim() const override { return model_->x_dim; }
  Tensor eval(const Tensor& x, double t) const override { return model_->forward(x, cond_, t); }
  Tensor vjp(const Tensor& x, double t, const Tensor& v) const override {
    return model_->x_vjp(x, cond_, t, v);
  }

 private:
  const VelocityModel* model_;
  Condition cond_;
};

// tr(dG/dx) from dim() unit-vector VJPs.
double divergence_exact(const OdeField& field, const Tensor& x, double t);

// Mean over probes of v^T (dG/dx) v; unbiased for the exact trace and exact
// for diagonal Jacobians.
double divergence_hutchinson(const OdeField& field, const Tensor& x, double t,
                             const ProbeConfig& probes, Rng& rng);

struct LogProbResult {
  double logp = 0.0;
  double div_integral = 0.0;
  Tensor z0;
  int64_t steps = 0;
};

// Integrate the state and the divergence backwards from t=1 (x in the flow's
// scaled space) to t=0: log p(x) = base_logprob(z0) - int_0^1 tr(dG/dz) dt.
// With `probes` unset the divergence is exact (and the solve deterministic).
LogProbResult solve_logprob(const OdeField& field, const Tensor& x, const OdeConfig& ode,
                            const std::optional<ProbeConfig>& probes = std::nullopt,
                            Rng* rng = nullptr);

// Forward Euler companion from t=0 to t=1 (round-trip checks).
Tensor solve_forward(const OdeField& field, const Tensor& z0, const OdeConfig& ode);

// Standard normal base density: -0.5 * (||z0||^2 + D log(2 pi)).
double base_logprob(const Tensor& z0);

// -logp / (D ln 2)
double bits_per_dim(double logp, int64_t D);

// Linearly spaced DDPM noise schedule embedded in a piecewise-constant
// variance-preserving SDE; beta(t) = beta_k on [k/(N-1), (k+1)/(N-1)).
struct DdpmSchedule {
  std::vector<double> betas;

  static DdpmSchedule linear(double beta_min, double beta_max, int64_t n);
  double beta_at(double t) const;      // right-continuous lookup
  double alpha_bar(double t) const;    // exp(-int_0^t beta)
  double sigma_at(double t) const;     // sqrt(1 - alpha_bar), floored at 1e-8
  void validate() const;
};

// Probability-flow drift of the VP-SDE: G = -0.5 beta(t) x - 0.5 beta(t) s,
// with the score s = -eps_hat / sigma(t) taken from a noise predictor.
Tensor ddpm_velocity(const DdpmSchedule& schedule, const OdeField& noise_predictor,
                     const Tensor& x, double t);

// The same drift wrapped as an OdeField so solve_logprob can consume DDPM
// checkpoints directly.
class DdpmField : public OdeField {
 public:
  DdpmField(DdpmSchedule schedule, const OdeField& noise_predictor)
      : schedule_(std::move(schedule)), pred_(&noise_predictor) {
    schedule_.validate();
  }
  int64_t dim() const override { return pred_->dim(); }
  Tensor eval(const Tensor& x, double t) const override {
    return ddpm_velocity(schedule_, *pred_, x, t);
  }
  Tensor vjp(const Tensor& x, double t, const Tensor& v) const override;

 private:
  DdpmSchedule schedule_;
  const OdeField* pred_;
};

}  // namespace occflow
