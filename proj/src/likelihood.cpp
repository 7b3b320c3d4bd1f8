#include "occflow/likelihood.hpp"

#include <cmath>
#include <string>

namespace occflow {

namespace {
constexpr double kTwoPi = 6.283185307179586476925286766559;
}

int64_t OdeConfig::n_steps() const {
  if (!(step > 0.0 && step <= 1.0)) throw std::invalid_argument("OdeConfig: bad step size");
  int64_t n = static_cast<int64_t>(std::llround(1.0 / step));
  return n < 1 ? 1 : n;
}

double divergence_exact(const OdeField& field, const Tensor& x, double t) {
  require_finite(x, "divergence_exact input");
  int64_t D = field.dim();
  double tr = 0.0;
  Tensor e({D});
  for (int64_t i = 0; i < D; ++i) {
    if (i > 0) e[i - 1] = 0.0;
    e[i] = 1.0;
    Tensor row = field.vjp(x, t, e);  // e_i^T J
    if (!std::isfinite(row[i])) throw std::runtime_error("divergence_exact: non-finite Jacobian");
    tr += row[i];
  }
  return tr;
}

double divergence_hutchinson(const OdeField& field, const Tensor& x, double t,
                             const ProbeConfig& probes, Rng& rng) {
  if (probes.n_probes < 1) throw std::invalid_argument("hutchinson: need at least one probe");
  int64_t D = field.dim();
  double acc = 0.0;
  for (int64_t p = 0; p < probes.n_probes; ++p) {
    Tensor v = rng.rademacher_tensor({D});
    Tensor jv = field.vjp(x, t, v);  // v^T J
    acc += dot(jv, v);
  }
  return acc / static_cast<double>(probes.n_probes);
}

LogProbResult solve_logprob(const OdeField& field, const Tensor& x, const OdeConfig& ode,
                            const std::optional<ProbeConfig>& probes, Rng* rng) {
  if (probes && !rng)
    throw std::invalid_argument("solve_logprob: Hutchinson estimation needs an rng");
  require_finite(x, "solve_logprob input");

  LogProbResult out;
  out.steps = ode.n_steps();
  double h = 1.0 / static_cast<double>(out.steps);

  Tensor z = x;
  double div_int = 0.0;
  for (int64_t k = 0; k < out.steps; ++k) {
    double t = 1.0 - static_cast<double>(k) * h;
    double div = probes ? divergence_hutchinson(field, z, t, *probes, *rng)
                        : divergence_exact(field, z, t);
    Tensor g = field.eval(z, t);
    for (int64_t i = 0; i < z.size(); ++i) z[i] -= h * g[i];
    div_int += h * div;
    if (!all_finite(z) || !std::isfinite(div_int))
      throw std::runtime_error("solve_logprob: non-finite state at step " + std::to_string(k));
  }

  out.div_integral = div_int;
  out.z0 = std::move(z);
  out.logp = base_logprob(out.z0) - div_int;
  return out;
}

Tensor solve_forward(const OdeField& field, const Tensor& z0, const OdeConfig& ode) {
  int64_t n = ode.n_steps();
  double h = 1.0 / static_cast<double>(n);
  Tensor z = z0;
  for (int64_t k = 0; k < n; ++k) {
    double t = static_cast<double>(k) * h;
    Tensor g = field.eval(z, t);
    for (int64_t i = 0; i < z.size(); ++i) z[i] += h * g[i];
  }
  return z;
}

double base_logprob(const Tensor& z0) {
  require_finite(z0, "base_logprob");
  double D = static_cast<double>(z0.size());
  return -0.5 * (sum_squares(z0) + D * std::log(kTwoPi));
}

double bits_per_dim(double logp, int64_t D) {
  if (D < 1) throw std::invalid_argument("bits_per_dim: D must be >= 1");
  return -logp / (static_cast<double>(D) * std::log(2.0));
}

DdpmSchedule DdpmSchedule::linear(double beta_min, double beta_max, int64_t n) {
  if (n < 2) throw std::invalid_argument("DdpmSchedule: need at least two steps");
  DdpmSchedule s;
  s.betas.resize(static_cast<size_t>(n));
  for (int64_t k = 0; k < n; ++k)
    s.betas[static_cast<size_t>(k)] =
        beta_min + (beta_max - beta_min) * static_cast<double>(k) / static_cast<double>(n - 1);
  s.validate();
  return s;
}

void DdpmSchedule::validate() const {
  if (betas.size() < 2) throw std::invalid_argument("DdpmSchedule: too few betas");
  for (size_t i = 0; i < betas.size(); ++i) {
    if (!(betas[i] > 0.0 && betas[i] < 1.0))
      throw std::invalid_argument("DdpmSchedule: betas must lie in (0,1)");
    if (i > 0 && betas[i] < betas[i - 1])
      throw std::invalid_argument("DdpmSchedule: betas must be nondecreasing");
  }
}

double DdpmSchedule::beta_at(double t) const {
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("DdpmSchedule: t outside [0,1]");
  int64_t n = static_cast<int64_t>(betas.size());
  int64_t k = static_cast<int64_t>(std::floor(t * static_cast<double>(n - 1)));
  if (k > n - 1) k = n - 1;
  if (k < 0) k = 0;
  return betas[static_cast<size_t>(k)];
}

double DdpmSchedule::alpha_bar(double t) const {
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("DdpmSchedule: t outside [0,1]");
  int64_t n = static_cast<int64_t>(betas.size());
  double bin = 1.0 / static_cast<double>(n - 1);
  double integral = 0.0;
  double remaining = t;
  for (int64_t k = 0; k < n - 1 && remaining > 0.0; ++k) {
    double seg = std::min(bin, remaining);
    integral += betas[static_cast<size_t>(k)] * seg;
    remaining -= seg;
  }
  if (remaining > 0.0) integral += betas.back() * remaining;
  return std::exp(-integral);
}

double DdpmSchedule::sigma_at(double t) const {
  double s2 = 1.0 - alpha_bar(t);
  return std::sqrt(std::max(s2, 1e-16));
}

Tensor ddpm_velocity(const DdpmSchedule& schedule, const OdeField& noise_predictor,
                     const Tensor& x, double t) {
  double beta = schedule.beta_at(t);
  double sigma = schedule.sigma_at(t);
  Tensor eps_hat = noise_predictor.eval(x, t);
  require_same_shape(eps_hat, x, "ddpm_velocity");
  Tensor g = x;
  for (int64_t i = 0; i < g.size(); ++i) {
    double score = -eps_hat[i] / sigma;
    g[i] = -0.5 * beta * x[i] - 0.5 * beta * score;
  }
  return g;
}

Tensor DdpmField::vjp(const Tensor& x, double t, const Tensor& v) const {
  double beta = schedule_.beta_at(t);
  double sigma = schedule_.sigma_at(t);
  // dG/dx = -0.5 beta I + (beta / (2 sigma)) d(eps_hat)/dx
  Tensor pv = pred_->vjp(x, t, v);
  Tensor out = v;
  for (int64_t i = 0; i < out.size(); ++i)
    out[i] = -0.5 * beta * v[i] + (beta / (2.0 * sigma)) * pv[i];
  return out;
}

}  // namespace occflow
