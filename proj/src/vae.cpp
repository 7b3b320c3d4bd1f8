#include "occflow/vae.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

namespace occflow {

namespace {

struct BlockGeometry {
  int64_t h, w;          // latent grid extents
  int64_t fx, fy;        // voxels per block in x, y
  int64_t D;             // voxels per column
};

BlockGeometry block_geometry(const VaeConfig& cfg, int64_t H, int64_t W, int64_t D) {
  if (H % cfg.downsample != 0 || W % cfg.downsample != 0)
    throw std::invalid_argument("grid dims must be divisible by the downsample factor");
  return {H / cfg.downsample, W / cfg.downsample, cfg.downsample, cfg.downsample, D};
}

// Sub-cell index of a voxel inside its block.
inline int64_t sub_of(int64_t local, int64_t extent, int64_t sub_extent) {
  return std::min(sub_extent - 1, local * sub_extent / extent);
}

}  // namespace

VaeModel VaeModel::init(const VaeConfig& cfg, Rng& rng) {
  VaeModel m;
  m.cfg = cfg;
  std::vector<int64_t> enc_dims{cfg.feature_dim()};
  enc_dims.insert(enc_dims.end(), cfg.enc_hidden.begin(), cfg.enc_hidden.end());
  enc_dims.push_back(2 * cfg.latent_channels);
  m.encoder = Mlp(enc_dims, cfg.activation, rng);

  std::vector<int64_t> dec_dims{cfg.latent_channels};
  dec_dims.insert(dec_dims.end(), cfg.dec_hidden.begin(), cfg.dec_hidden.end());
  dec_dims.push_back(cfg.feature_dim());
  m.decoder = Mlp(dec_dims, cfg.activation, rng);
  return m;
}

std::vector<ParamRef> VaeModel::params() {
  std::vector<ParamRef> out;
  for (auto& p : mlp_params(encoder)) out.push_back({"encoder." + p.name, p.value, p.decay});
  for (auto& p : mlp_params(decoder)) out.push_back({"decoder." + p.name, p.value, p.decay});
  return out;
}

Tensor vae_features(const VaeModel& m, const OccupancyGrid& grid) {
  const VaeConfig& cfg = m.cfg;
  if (grid.n_classes != cfg.n_classes)
    throw std::invalid_argument("grid class count does not match the model");
  BlockGeometry geo = block_geometry(cfg, grid.H, grid.W, grid.D);
  int64_t C = cfg.n_classes;
  int64_t n_sub = cfg.sub_x * cfg.sub_y * cfg.sub_z;
  Tensor feats({geo.h * geo.w, n_sub * C});
  std::vector<int64_t> counts(static_cast<size_t>(n_sub));

  for (int64_t bx = 0; bx < geo.h; ++bx)
    for (int64_t by = 0; by < geo.w; ++by) {
      int64_t cell = bx * geo.w + by;
      double* row = &feats.data[static_cast<size_t>(cell * n_sub * C)];
      std::fill(counts.begin(), counts.end(), 0);
      for (int64_t lx = 0; lx < geo.fx; ++lx)
        for (int64_t ly = 0; ly < geo.fy; ++ly)
          for (int64_t z = 0; z < geo.D; ++z) {
            int64_t sx = sub_of(lx, geo.fx, cfg.sub_x);
            int64_t sy = sub_of(ly, geo.fy, cfg.sub_y);
            int64_t sz = sub_of(z, geo.D, cfg.sub_z);
            int64_t sub = (sx * cfg.sub_y + sy) * cfg.sub_z + sz;
            uint8_t cls = grid.at(bx * geo.fx + lx, by * geo.fy + ly, z);
            row[sub * C + cls] += 1.0;
            ++counts[static_cast<size_t>(sub)];
          }
      for (int64_t s = 0; s < n_sub; ++s) {
        int64_t n = counts[static_cast<size_t>(s)];
        if (n == 0) {
          // Block smaller than the reference grid; mark as empty space.
          row[s * C + 0] = 1.0;
          continue;
        }
        for (int64_t c = 0; c < C; ++c) row[s * C + c] /= static_cast<double>(n);
      }
    }
  return feats;
}

std::pair<Tensor, Tensor> encode(const VaeModel& m, const OccupancyGrid& grid) {
  BlockGeometry geo = block_geometry(m.cfg, grid.H, grid.W, grid.D);
  Tensor feats = vae_features(m, grid);
  Tensor out = mlp_forward(m.encoder, feats);  // (cells, 2c)
  int64_t c = m.cfg.latent_channels;
  Tensor mu({geo.h, geo.w, c}), sigma({geo.h, geo.w, c});
  for (int64_t cell = 0; cell < geo.h * geo.w; ++cell)
    for (int64_t k = 0; k < c; ++k) {
      mu[cell * c + k] = out.at2(cell, k, 2 * c);
      sigma[cell * c + k] = std::exp(out.at2(cell, c + k, 2 * c));
    }
  return {mu, sigma};
}

Tensor reparameterize(const Tensor& mu, const Tensor& sigma, const Tensor& eps) {
  require_same_shape(mu, sigma, "reparameterize");
  require_same_shape(mu, eps, "reparameterize");
  Tensor z = mu;
  for (int64_t i = 0; i < z.size(); ++i) z[i] += sigma[i] * eps[i];
  return z;
}

DecodeResult decode(const VaeModel& m, const Tensor& z, int64_t H, int64_t W, int64_t D) {
  const VaeConfig& cfg = m.cfg;
  BlockGeometry geo = block_geometry(cfg, H, W, D);
  int64_t c = cfg.latent_channels;
  if (z.size() != geo.h * geo.w * c)
    throw std::invalid_argument("decode: latent does not match grid dims");
  int64_t C = cfg.n_classes;

  Tensor logits = mlp_forward(m.decoder, z.reshaped({geo.h * geo.w, c}));

  DecodeResult r;
  r.probs = Tensor({H, W, D, C});
  r.grid = OccupancyGrid(H, W, D, 1.0, cfg.n_classes);

  for (int64_t x = 0; x < H; ++x)
    for (int64_t y = 0; y < W; ++y) {
      int64_t cell = (x / geo.fx) * geo.w + (y / geo.fy);
      for (int64_t zz = 0; zz < D; ++zz) {
        int64_t sx = sub_of(x % geo.fx, geo.fx, cfg.sub_x);
        int64_t sy = sub_of(y % geo.fy, geo.fy, cfg.sub_y);
        int64_t sz = sub_of(zz, geo.D, cfg.sub_z);
        int64_t sub = (sx * cfg.sub_y + sy) * cfg.sub_z + sz;
        const double* lrow = &logits.data[static_cast<size_t>(cell * cfg.feature_dim() + sub * C)];
        // stable softmax
        double mx = lrow[0];
        for (int64_t k = 1; k < C; ++k) mx = std::max(mx, lrow[k]);
        double denom = 0.0;
        for (int64_t k = 0; k < C; ++k) denom += std::exp(lrow[k] - mx);
        double* prow = &r.probs.data[static_cast<size_t>(((x * W + y) * D + zz) * C)];
        int64_t best = 0;
        double bestp = -1.0;
        for (int64_t k = 0; k < C; ++k) {
          prow[k] = std::exp(lrow[k] - mx) / denom;
          if (prow[k] > bestp) {
            bestp = prow[k];
            best = k;
          }
        }
        r.grid.at(x, y, zz) = static_cast<uint8_t>(best);
      }
    }
  return r;
}

OccupancyGrid vae_reconstruct(const VaeModel& m, const OccupancyGrid& grid) {
  auto [mu, sigma] = encode(m, grid);
  (void)sigma;
  DecodeResult d = decode(m, mu, grid.H, grid.W, grid.D);
  d.grid.resolution = grid.resolution;
  d.grid.origin = grid.origin;
  return d.grid;
}

double kl_divergence(const Tensor& mu, const Tensor& sigma) {
  require_same_shape(mu, sigma, "kl_divergence");
  int64_t channels = mu.last_dim();
  int64_t cells = mu.size() / channels;
  double total = 0.0;
  for (int64_t i = 0; i < mu.size(); ++i) {
    if (!(sigma[i] > 0.0)) throw std::invalid_argument("kl_divergence: sigma must be positive");
    total += 0.5 * (mu[i] * mu[i] + sigma[i] * sigma[i] - 1.0 - 2.0 * std::log(sigma[i]));
  }
  return total / static_cast<double>(cells);
}

namespace {

void check_prob_rows(const Tensor& probs, int64_t n, int64_t C) {
  for (int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (int64_t k = 0; k < C; ++k) {
      double p = probs.at2(i, k, C);
      if (p < -1e-12) throw std::invalid_argument("lovasz_softmax: negative probability");
      s += p;
    }
    if (std::fabs(s - 1.0) > 1e-6)
      throw std::invalid_argument("lovasz_softmax: probabilities must sum to 1");
  }
}

}  // namespace

LovaszGradResult lovasz_softmax_grad(const Tensor& probs, const std::vector<uint8_t>& labels) {
  if (probs.ndim() != 2) throw std::invalid_argument("lovasz_softmax: probs must be (n, classes)");
  int64_t n = probs.dim(0), C = probs.dim(1);
  if (static_cast<int64_t>(labels.size()) != n)
    throw std::invalid_argument("lovasz_softmax: label count mismatch");
  for (uint8_t l : labels)
    if (l >= C) throw std::invalid_argument("lovasz_softmax: label out of range");
  check_prob_rows(probs, n, C);

  LovaszGradResult out;
  out.d_probs = Tensor::zeros({n, C});

  std::vector<int64_t> present;
  for (int64_t c = 0; c < C; ++c) {
    bool found = false;
    for (uint8_t l : labels)
      if (l == c) {
        found = true;
        break;
      }
    if (found) present.push_back(c);
  }
  if (present.empty()) return out;

  std::vector<double> errors(static_cast<size_t>(n)), fg(static_cast<size_t>(n));
  std::vector<int64_t> order(static_cast<size_t>(n));

  for (int64_t c : present) {
    for (int64_t i = 0; i < n; ++i) {
      fg[static_cast<size_t>(i)] = (labels[static_cast<size_t>(i)] == c) ? 1.0 : 0.0;
      double p = probs.at2(i, c, C);
      errors[static_cast<size_t>(i)] = fg[static_cast<size_t>(i)] > 0.5 ? 1.0 - p : p;
    }
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
      if (errors[static_cast<size_t>(a)] != errors[static_cast<size_t>(b)])
        return errors[static_cast<size_t>(a)] > errors[static_cast<size_t>(b)];
      return a < b;
    });

    // Lovasz extension gradient of the Jaccard loss along the sorted errors.
    double gts = 0.0;
    for (double f : fg) gts += f;
    std::vector<double> grad(static_cast<size_t>(n));
    double cum_fg = 0.0, cum_bg = 0.0, prev_jac = 0.0;
    for (int64_t k = 0; k < n; ++k) {
      double f = fg[static_cast<size_t>(order[static_cast<size_t>(k)])];
      cum_fg += f;
      cum_bg += 1.0 - f;
      double inter = gts - cum_fg;
      double uni = gts + cum_bg;
      double jac = 1.0 - inter / uni;
      grad[static_cast<size_t>(k)] = jac - prev_jac;
      prev_jac = jac;
    }

    double loss_c = 0.0;
    for (int64_t k = 0; k < n; ++k) {
      int64_t i = order[static_cast<size_t>(k)];
      loss_c += errors[static_cast<size_t>(i)] * grad[static_cast<size_t>(k)];
      double de = grad[static_cast<size_t>(k)];
      // d error / d p_c = -1 on foreground, +1 elsewhere
      out.d_probs.at2(i, c, C) += (fg[static_cast<size_t>(i)] > 0.5 ? -de : de);
    }
    out.loss += loss_c;
  }

  double scale = 1.0 / static_cast<double>(present.size());
  out.loss *= scale;
  for (int64_t i = 0; i < out.d_probs.size(); ++i) out.d_probs[i] *= scale;
  return out;
}

double lovasz_softmax(const Tensor& probs, const std::vector<uint8_t>& labels) {
  return lovasz_softmax_grad(probs, labels).loss;
}

CosineAlignGrad cosine_align_grad(const Tensor& z, const Tensor& d) {
  require_same_shape(z, d, "cosine_align_loss");
  int64_t channels = z.last_dim();
  int64_t cells = z.size() / channels;
  CosineAlignGrad out;
  out.d_z = Tensor::zeros(z.shape);

  const double tiny = 1e-12;
  double total = 0.0;
  int64_t used = 0;
  for (int64_t cell = 0; cell < cells; ++cell) {
    const double* zp = &z.data[static_cast<size_t>(cell * channels)];
    const double* dp = &d.data[static_cast<size_t>(cell * channels)];
    double nz = 0.0, nd = 0.0, zd = 0.0;
    for (int64_t k = 0; k < channels; ++k) {
      nz += zp[k] * zp[k];
      nd += dp[k] * dp[k];
      zd += zp[k] * dp[k];
    }
    nz = std::sqrt(nz);
    nd = std::sqrt(nd);
    if (nz < tiny || nd < tiny) {
      ++out.res.skipped;
      continue;
    }
    double cosv = zd / (nz * nd);
    total += 1.0 - cosv;
    ++used;
    double* gp = &out.d_z.data[static_cast<size_t>(cell * channels)];
    for (int64_t k = 0; k < channels; ++k)
      gp[k] = -(dp[k] / (nz * nd) - cosv * zp[k] / (nz * nz));
  }
  if (out.res.skipped > 0)
    std::cerr << "[occflow] cosine_align_loss: skipped " << out.res.skipped
              << " zero-norm cells\n";
  if (used > 0) {
    out.res.loss = total / static_cast<double>(used);
    for (int64_t i = 0; i < out.d_z.size(); ++i) out.d_z[i] /= static_cast<double>(used);
  }
  return out;
}

CosineAlignResult cosine_align_loss(const Tensor& z, const Tensor& d) {
  return cosine_align_grad(z, d).res;
}

VaeLossResult vae_loss(VaeModel& m, const OccupancyGrid& grid,
                       const std::optional<Tensor>& target_latents,
                       const VaeTrainConfig& cfg, Rng& rng) {
  BlockGeometry geo = block_geometry(m.cfg, grid.H, grid.W, grid.D);
  Tensor eps = rng.normal_tensor({geo.h * geo.w, m.cfg.latent_channels});
  return vae_loss_with_eps(m, grid, target_latents, cfg, eps);
}

VaeLossResult vae_loss_with_eps(VaeModel& m, const OccupancyGrid& grid,
                                const std::optional<Tensor>& target_latents,
                                const VaeTrainConfig& cfg, const Tensor& eps) {
  const VaeConfig& mc = m.cfg;
  BlockGeometry geo = block_geometry(mc, grid.H, grid.W, grid.D);
  int64_t cells = geo.h * geo.w;
  int64_t c = mc.latent_channels;
  int64_t C = mc.n_classes;
  int64_t Fout = mc.feature_dim();
  bool aligned = cfg.mode == VaeMode::FinetuneAligned && cfg.kappa > 0.0;
  if (aligned && !target_latents)
    throw std::invalid_argument("vae_loss: finetune_aligned mode requires target latents");

  // ---- forward ----
  Tensor feats = vae_features(m, grid);
  Tensor enc_out = mlp_forward(m.encoder, feats);  // (cells, 2c)
  Tensor mu({cells, c}), logsig({cells, c}), sigma({cells, c});
  for (int64_t i = 0; i < cells; ++i)
    for (int64_t k = 0; k < c; ++k) {
      mu.at2(i, k, c) = enc_out.at2(i, k, 2 * c);
      logsig.at2(i, k, c) = enc_out.at2(i, c + k, 2 * c);
      sigma.at2(i, k, c) = std::exp(logsig.at2(i, k, c));
    }
  if (eps.size() != cells * c) throw std::invalid_argument("vae_loss: eps shape mismatch");
  Tensor z = reparameterize(mu, sigma, eps.reshaped({cells, c}));
  Tensor dec_out = mlp_forward(m.decoder, z);  // (cells, Fout)

  int64_t Nv = grid.numel();
  Tensor probs({Nv, C});
  std::vector<uint8_t> labels(static_cast<size_t>(Nv));
  std::vector<int64_t> voxel_cell(static_cast<size_t>(Nv)), voxel_sub(static_cast<size_t>(Nv));
  {
    int64_t vi = 0;
    for (int64_t x = 0; x < grid.H; ++x)
      for (int64_t y = 0; y < grid.W; ++y) {
        int64_t cell = (x / geo.fx) * geo.w + (y / geo.fy);
        for (int64_t zz = 0; zz < grid.D; ++zz, ++vi) {
          int64_t sx = sub_of(x % geo.fx, geo.fx, mc.sub_x);
          int64_t sy = sub_of(y % geo.fy, geo.fy, mc.sub_y);
          int64_t sz = sub_of(zz, geo.D, mc.sub_z);
          int64_t sub = (sx * mc.sub_y + sy) * mc.sub_z + sz;
          voxel_cell[static_cast<size_t>(vi)] = cell;
          voxel_sub[static_cast<size_t>(vi)] = sub;
          labels[static_cast<size_t>(vi)] = grid.at(x, y, zz);
          const double* lrow = &dec_out.data[static_cast<size_t>(cell * Fout + sub * C)];
          double mx = lrow[0];
          for (int64_t k = 1; k < C; ++k) mx = std::max(mx, lrow[k]);
          double denom = 0.0;
          for (int64_t k = 0; k < C; ++k) denom += std::exp(lrow[k] - mx);
          for (int64_t k = 0; k < C; ++k) probs.at2(vi, k, C) = std::exp(lrow[k] - mx) / denom;
        }
      }
  }

  VaeLossResult out;
  // cross entropy
  for (int64_t v = 0; v < Nv; ++v)
    out.ce -= std::log(std::max(1e-300, probs.at2(v, labels[static_cast<size_t>(v)], C)));
  out.ce /= static_cast<double>(Nv);

  out.kl = kl_divergence(mu, sigma);

  LovaszGradResult lov;
  if (cfg.lambda != 0.0) {
    lov = lovasz_softmax_grad(probs, labels);
    out.lovasz = lov.loss;
  }

  CosineAlignGrad cosg;
  if (aligned) {
    cosg = cosine_align_grad(z, target_latents->reshaped({cells, c}));
    out.cos = cosg.res.loss;
    out.cos_skipped = cosg.res.skipped;
  }

  out.total = out.ce + cfg.beta * out.kl + cfg.lambda * out.lovasz +
              (aligned ? cfg.kappa * out.cos : 0.0);
  if (!std::isfinite(out.total)) throw std::runtime_error("vae_loss: non-finite loss");

  // ---- backward ----
  // d(total)/d(logits): CE plus Lovasz routed through the softmax Jacobian.
  Tensor d_dec = Tensor::zeros({cells, Fout});
  for (int64_t v = 0; v < Nv; ++v) {
    int64_t cell = voxel_cell[static_cast<size_t>(v)];
    int64_t sub = voxel_sub[static_cast<size_t>(v)];
    double* gd = &d_dec.data[static_cast<size_t>(cell * Fout + sub * C)];
    const double* p = &probs.data[static_cast<size_t>(v * C)];
    uint8_t lab = labels[static_cast<size_t>(v)];
    for (int64_t k = 0; k < C; ++k)
      gd[k] += (p[k] - (k == lab ? 1.0 : 0.0)) / static_cast<double>(Nv);
    if (cfg.lambda != 0.0) {
      const double* dp = &lov.d_probs.data[static_cast<size_t>(v * C)];
      double pdotg = 0.0;
      for (int64_t k = 0; k < C; ++k) pdotg += p[k] * dp[k];
      for (int64_t k = 0; k < C; ++k) gd[k] += cfg.lambda * p[k] * (dp[k] - pdotg);
    }
  }

  MlpBackward dec_bw = mlp_backward(m.decoder, z, d_dec);

  Tensor d_z = dec_bw.input_grad;  // (cells, c)
  if (aligned) axpy(d_z, cosg.d_z, cfg.kappa);

  Tensor enc_up({cells, 2 * c});
  double inv_cells = 1.0 / static_cast<double>(cells);
  for (int64_t i = 0; i < cells; ++i)
    for (int64_t k = 0; k < c; ++k) {
      double dmu = d_z.at2(i, k, c) + cfg.beta * mu.at2(i, k, c) * inv_cells;
      double s = sigma.at2(i, k, c);
      double dls = d_z.at2(i, k, c) * eps[i * c + k] * s +
                   cfg.beta * (s * s - 1.0) * inv_cells;
      enc_up.at2(i, k, 2 * c) = dmu;
      enc_up.at2(i, c + k, 2 * c) = dls;
    }

  MlpBackward enc_bw = mlp_backward(m.encoder, feats, enc_up);

  out.grads = std::move(enc_bw.param_grads);
  for (auto& g : dec_bw.param_grads) out.grads.push_back(std::move(g));

  out.latent.mu = mu.reshaped({geo.h, geo.w, c});
  out.latent.sigma = sigma.reshaped({geo.h, geo.w, c});
  out.latent.z = z.reshaped({geo.h, geo.w, c});
  return out;
}

double compression_ratio(int64_t H, int64_t W, int64_t D, int64_t C,
                         int64_t h, int64_t w, int64_t c) {
  if (H <= 0 || W <= 0 || D <= 0 || C <= 0 || h <= 0 || w <= 0 || c <= 0)
    throw std::invalid_argument("compression_ratio: all dims must be positive");
  return static_cast<double>(H * W * D * C) / static_cast<double>(h * w * c);
}

}  // namespace occflow
