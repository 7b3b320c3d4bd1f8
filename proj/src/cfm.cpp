#include "occflow/cfm.hpp"

#include <cmath>
#include <string>

namespace occflow {

void FlowConfig::validate() const {
  if (nfe < 1) throw std::invalid_argument("FlowConfig: nfe must be >= 1");
  if (!(cfg_drop_prob >= 0.0 && cfg_drop_prob <= 1.0))
    throw std::invalid_argument("FlowConfig: cfg_drop_prob must be in [0,1]");
  if (!(sigma_scale > 0.0)) throw std::invalid_argument("FlowConfig: sigma_scale must be positive");
}

Condition Condition::null_like(const Condition& proto) {
  Condition c;
  c.history = Tensor::zeros(proto.history.shape);
  c.trajectory = Tensor::zeros(proto.trajectory.shape);
  c.dropped = true;
  return c;
}

Tensor sinusoidal_time_embedding(double t, int64_t dim) {
  if (dim <= 0 || dim % 2 != 0)
    throw std::invalid_argument("time embedding dim must be positive and even");
  Tensor e({dim});
  int64_t half = dim / 2;
  for (int64_t i = 0; i < half; ++i) {
    double freq = std::exp(std::log(1000.0) * static_cast<double>(i) /
                           std::max<int64_t>(1, half - 1));
    e[2 * i] = std::sin(freq * t);
    e[2 * i + 1] = std::cos(freq * t);
  }
  return e;
}

VelocityModel VelocityModel::init(int64_t x_dim, int64_t hist_dim, int64_t traj_in_dim,
                                  int64_t traj_emb_dim, int64_t time_dim,
                                  const std::vector<int64_t>& hidden, Activation act, Rng& rng) {
  VelocityModel m;
  m.x_dim = x_dim;
  m.hist_dim = hist_dim;
  m.traj_in_dim = traj_in_dim;
  m.traj_emb_dim = traj_in_dim > 0 ? traj_emb_dim : 0;
  m.time_dim = time_dim;
  std::vector<int64_t> dims{x_dim + hist_dim + m.traj_emb_dim + time_dim};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(x_dim);
  m.backbone = Mlp(dims, act, rng);
  if (traj_in_dim > 0) m.traj_embed = Mlp({traj_in_dim, m.traj_emb_dim}, act, rng);
  return m;
}

std::vector<ParamRef> VelocityModel::params() {
  std::vector<ParamRef> out;
  for (auto& p : mlp_params(backbone)) out.push_back({"backbone." + p.name, p.value, p.decay});
  if (traj_in_dim > 0)
    for (auto& p : mlp_params(traj_embed)) out.push_back({"traj_embed." + p.name, p.value, p.decay});
  return out;
}

std::vector<ParamRef> VelocityModel::lora_params() {
  std::vector<ParamRef> out;
  for (auto& p : mlp_params(backbone, /*base=*/false, /*adapters=*/true))
    out.push_back({"backbone." + p.name, p.value, p.decay});
  return out;
}

void VelocityModel::attach_lora(int64_t rank, double alpha, Rng& rng) {
  backbone.attach_lora(rank, alpha, rng);
}

namespace {

Tensor assemble_input(const VelocityModel& m, const Tensor& x, const Condition& cond, double t,
                      Tensor* traj_emb_out = nullptr) {
  if (x.size() != m.x_dim) throw std::invalid_argument("velocity model: x dim mismatch");
  if (cond.history.size() != m.hist_dim)
    throw std::invalid_argument("velocity model: history dim mismatch");
  if (m.traj_in_dim > 0 && cond.trajectory.size() != m.traj_in_dim)
    throw std::invalid_argument("velocity model: trajectory dim mismatch");

  Tensor in({m.x_dim + m.hist_dim + m.traj_emb_dim + m.time_dim});
  int64_t off = 0;
  for (int64_t i = 0; i < m.x_dim; ++i) in[off++] = x[i];
  for (int64_t i = 0; i < m.hist_dim; ++i) in[off++] = cond.dropped ? 0.0 : cond.history[i];
  if (m.traj_emb_dim > 0) {
    Tensor emb = cond.dropped ? Tensor::zeros({m.traj_emb_dim})
                              : mlp_forward(m.traj_embed, cond.trajectory);
    if (traj_emb_out) *traj_emb_out = emb;
    for (int64_t i = 0; i < m.traj_emb_dim; ++i) in[off++] = emb[i];
  }
  Tensor te = sinusoidal_time_embedding(t, m.time_dim);
  for (int64_t i = 0; i < m.time_dim; ++i) in[off++] = te[i];
  return in;
}

}  // namespace

Tensor VelocityModel::forward(const Tensor& x, const Condition& cond, double t) const {
  return mlp_forward(backbone, assemble_input(*this, x, cond, t));
}

VelocityModel::Backward VelocityModel::backward(const Tensor& x, const Condition& cond, double t,
                                                const Tensor& upstream) const {
  Tensor in = assemble_input(*this, x, cond, t);
  MlpBackward bb = mlp_backward(backbone, in, upstream);

  Backward out;
  out.param_grads = std::move(bb.param_grads);
  out.x_grad = Tensor({x_dim});
  for (int64_t i = 0; i < x_dim; ++i) out.x_grad[i] = bb.input_grad[i];

  if (traj_in_dim > 0) {
    Tensor demb({traj_emb_dim});
    for (int64_t i = 0; i < traj_emb_dim; ++i) demb[i] = bb.input_grad[x_dim + hist_dim + i];
    if (cond.dropped) {
      // embedding was zeroed; no gradient reaches the trajectory layer
      for (auto& p : mlp_params(const_cast<Mlp&>(traj_embed)))
        out.param_grads.push_back(Tensor::zeros(p.value->shape));
    } else {
      MlpBackward tb = mlp_backward(traj_embed, cond.trajectory, demb);
      for (auto& g : tb.param_grads) out.param_grads.push_back(std::move(g));
    }
  }
  return out;
}

Tensor VelocityModel::x_vjp(const Tensor& x, const Condition& cond, double t,
                            const Tensor& v) const {
  Tensor in = assemble_input(*this, x, cond, t);
  Tensor full = input_vjp(backbone, in, v);
  Tensor out({x_dim});
  for (int64_t i = 0; i < x_dim; ++i) out[i] = full[i];
  return out;
}

Tensor rescale_latent(const Tensor& z, double factor) {
  if (!(factor > 0.0)) throw std::invalid_argument("rescale_latent: factor must be positive");
  return scale(z, factor);
}

Tensor interpolate_path(const Tensor& eps, const Tensor& z_future, double t, double sigma_scale) {
  require_same_shape(eps, z_future, "interpolate_path");
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("interpolate_path: t outside [0,1]");
  Tensor x = eps;
  for (int64_t i = 0; i < x.size(); ++i)
    x[i] = (1.0 - t) * eps[i] + t * sigma_scale * z_future[i];
  return x;
}

double sample_timestep(Rng& rng) {
  double g = rng.normal();
  return 1.0 / (1.0 + std::exp(-g));
}

CfmBatch drop_condition(const CfmBatch& batch, double p, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("drop_condition: p must be in [0,1]");
  CfmBatch out = batch;
  for (auto& s : out) {
    if (rng.uniform() < p) {
      s.history = Tensor::zeros(s.history.shape);
      s.trajectory = Tensor::zeros(s.trajectory.shape);
      s.dropped = true;
    }
  }
  return out;
}

Tensor concat_time(const Tensor& history, const Tensor& future) {
  if (history.ndim() != future.ndim() || history.ndim() < 1)
    throw std::invalid_argument("concat_time: rank mismatch");
  for (int64_t i = 1; i < history.ndim(); ++i)
    if (history.dim(i) != future.dim(i))
      throw std::invalid_argument("concat_time: trailing dims differ");
  std::vector<int64_t> shape = history.shape;
  shape[0] = history.dim(0) + future.dim(0);
  Tensor out(shape);
  std::copy(history.data.begin(), history.data.end(), out.data.begin());
  std::copy(future.data.begin(), future.data.end(), out.data.begin() + history.size());
  return out;
}

Tensor concat_channels(const Tensor& history, const Tensor& future) {
  if (history.ndim() != future.ndim() || history.ndim() < 1)
    throw std::invalid_argument("concat_channels: rank mismatch");
  for (int64_t i = 0; i + 1 < history.ndim(); ++i)
    if (history.dim(i) != future.dim(i))
      throw std::invalid_argument("concat_channels: leading dims differ");
  int64_t ch = history.last_dim(), cf = future.last_dim();
  std::vector<int64_t> shape = history.shape;
  shape.back() = ch + cf;
  Tensor out(shape);
  int64_t cells = history.size() / ch;
  for (int64_t i = 0; i < cells; ++i) {
    for (int64_t k = 0; k < ch; ++k) out[i * (ch + cf) + k] = history[i * ch + k];
    for (int64_t k = 0; k < cf; ++k) out[i * (ch + cf) + ch + k] = future[i * cf + k];
  }
  return out;
}

CfmLossResult cfm_loss(VelocityModel& model, const CfmBatch& batch, const FlowConfig& cfg,
                       Rng& rng) {
  cfg.validate();
  std::vector<double> ts;
  std::vector<Tensor> epss;
  std::vector<uint8_t> flags;
  for (const auto& s : batch) {
    ts.push_back(sample_timestep(rng));
    epss.push_back(rng.normal_tensor(s.future.shape));
    flags.push_back(s.dropped || rng.uniform() < cfg.cfg_drop_prob ? 1 : 0);
  }
  return cfm_loss_at(model, batch, cfg, ts, epss, flags);
}

CfmLossResult cfm_loss_at(VelocityModel& model, const CfmBatch& batch, const FlowConfig& cfg,
                          const std::vector<double>& ts, const std::vector<Tensor>& epss,
                          const std::vector<uint8_t>& drop_flags) {
  if (batch.empty()) throw std::invalid_argument("cfm_loss: empty batch");
  if (ts.size() != batch.size() || epss.size() != batch.size() || drop_flags.size() != batch.size())
    throw std::invalid_argument("cfm_loss: draw count mismatch");

  CfmLossResult out;
  auto refs = model.params();
  out.grads.reserve(refs.size());
  for (auto& r : refs) out.grads.push_back(Tensor::zeros(r.value->shape));

  double inv_b = 1.0 / static_cast<double>(batch.size());
  for (size_t i = 0; i < batch.size(); ++i) {
    const CfmSample& s = batch[i];
    Condition cond{s.history, s.trajectory, drop_flags[i] != 0};
    Tensor x_t = interpolate_path(epss[i], s.future, ts[i], cfg.sigma_scale);
    Tensor v = model.forward(x_t, cond, ts[i]);

    Tensor residual = v;
    for (int64_t k = 0; k < residual.size(); ++k)
      residual[k] -= cfg.sigma_scale * s.future[k] - epss[i][k];

    double li = sum_squares(residual);
    if (!std::isfinite(li))
      throw std::runtime_error("cfm_loss: non-finite loss at sample " + std::to_string(i));
    out.loss += li * inv_b;

    VelocityModel::Backward bw = model.backward(x_t, cond, ts[i], scale(residual, 2.0 * inv_b));
    for (size_t p = 0; p < out.grads.size(); ++p) axpy(out.grads[p], bw.param_grads[p], 1.0);
  }
  return out;
}

Tensor cfg_fuse(const Tensor& v_cond, const Tensor& v_uncond, double s) {
  require_same_shape(v_cond, v_uncond, "cfg_fuse");
  Tensor out = v_cond;
  for (int64_t i = 0; i < out.size(); ++i) out[i] = (1.0 + s) * v_cond[i] - s * v_uncond[i];
  return out;
}

Tensor euler_sample(const VelocityModel& model, const Condition& condition, const FlowConfig& cfg,
                    Rng& rng) {
  cfg.validate();
  Tensor x = rng.normal_tensor({model.x_dim});
  double dt = 1.0 / static_cast<double>(cfg.nfe);
  Condition null_cond = Condition::null_like(condition);
  for (int64_t k = 0; k < cfg.nfe; ++k) {
    double t = static_cast<double>(k) * dt;
    Tensor v = model.forward(x, condition, t);
    if (cfg.cfg_scale != 0.0) {
      Tensor vu = model.forward(x, null_cond, t);
      v = cfg_fuse(v, vu, cfg.cfg_scale);
    }
    for (int64_t i = 0; i < x.size(); ++i) x[i] += dt * v[i];
    if (!all_finite(x))
      throw std::runtime_error("euler_sample: diverged at step " + std::to_string(k));
  }
  return rescale_latent(x, 1.0 / cfg.sigma_scale);
}

}  // namespace occflow
