#include "occflow/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

#include "occflow/linalg.hpp"
#include "occflow/nn.hpp"

namespace occflow {

Tensor rbf_kernel_matrix(const Tensor& X, double sigma) {
  if (X.ndim() != 2) throw std::invalid_argument("rbf_kernel_matrix: X must be (n, c)");
  if (!(sigma > 0.0)) throw std::invalid_argument("rbf_kernel_matrix: sigma must be positive");
  int64_t n = X.dim(0), c = X.dim(1);
  Tensor K({n, n});
  double inv = 1.0 / (2.0 * sigma * sigma);
  for (int64_t i = 0; i < n; ++i) {
    K.at2(i, i, n) = 1.0;
    for (int64_t j = i + 1; j < n; ++j) {
      double d2 = 0.0;
      for (int64_t k = 0; k < c; ++k) {
        double d = X.at2(i, k, c) - X.at2(j, k, c);
        d2 += d * d;
      }
      double v = std::exp(-d2 * inv);
      K.at2(i, j, n) = v;
      K.at2(j, i, n) = v;
    }
  }
  return K;
}

double median_pairwise_distance(const Tensor& X) {
  int64_t n = X.dim(0), c = X.dim(1);
  if (n < 2) throw std::invalid_argument("median_pairwise_distance: need at least two rows");
  std::vector<double> d;
  d.reserve(static_cast<size_t>(n * (n - 1) / 2));
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = i + 1; j < n; ++j) {
      double d2 = 0.0;
      for (int64_t k = 0; k < c; ++k) {
        double t = X.at2(i, k, c) - X.at2(j, k, c);
        d2 += t * t;
      }
      d.push_back(std::sqrt(d2));
    }
  std::sort(d.begin(), d.end());
  size_t m = d.size() / 2;
  double med = d.size() % 2 ? d[m] : 0.5 * (d[m - 1] + d[m]);
  return med > 0.0 ? med : 1.0;
}

namespace {

Tensor center_kernel(const Tensor& K) {
  int64_t n = K.dim(0);
  std::vector<double> row_mean(static_cast<size_t>(n), 0.0);
  double grand = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < n; ++j) s += K.at2(i, j, n);
    row_mean[static_cast<size_t>(i)] = s / static_cast<double>(n);
    grand += s;
  }
  grand /= static_cast<double>(n * n);
  Tensor C({n, n});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j)
      C.at2(i, j, n) = K.at2(i, j, n) - row_mean[static_cast<size_t>(i)] -
                       row_mean[static_cast<size_t>(j)] + grand;
  return C;
}

// sum of A_ij * B_ij over all entries (= tr(A B) for symmetric A, B)
double frob_inner(const Tensor& A, const Tensor& B) {
  double s = 0.0;
  for (int64_t i = 0; i < A.size(); ++i) s += A[i] * B[i];
  return s;
}

void check_pair(const Tensor& X, const Tensor& Y, const char* what) {
  if (X.ndim() != 2 || Y.ndim() != 2) throw std::invalid_argument(std::string(what) + ": need (n, c) inputs");
  if (X.dim(0) != Y.dim(0)) throw std::invalid_argument(std::string(what) + ": sample counts differ");
}

// masked Frobenius inner product; the diagonal always participates so the
// full mask reduces to frob_inner exactly.
double masked_inner(const Tensor& A, const Tensor& B, const std::vector<uint8_t>& mask) {
  int64_t n = A.dim(0);
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j) {
      if (i != j && !mask[static_cast<size_t>(i * n + j)]) continue;
      s += A.at2(i, j, n) * B.at2(i, j, n);
    }
  return s;
}

// k nearest neighbors of every row of the centered kernel under cosine
// similarity; ties break to the lower index.
std::vector<uint8_t> knn_mask(const Tensor& C, int64_t k) {
  int64_t n = C.dim(0);
  std::vector<double> norms(static_cast<size_t>(n), 0.0);
  for (int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < n; ++j) s += C.at2(i, j, n) * C.at2(i, j, n);
    norms[static_cast<size_t>(i)] = std::sqrt(s);
  }
  std::vector<uint8_t> mask(static_cast<size_t>(n * n), 0);
  std::vector<std::pair<double, int64_t>> sims;
  for (int64_t i = 0; i < n; ++i) {
    sims.clear();
    for (int64_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double dotv = 0.0;
      for (int64_t t = 0; t < n; ++t) dotv += C.at2(i, t, n) * C.at2(j, t, n);
      double den = norms[static_cast<size_t>(i)] * norms[static_cast<size_t>(j)];
      sims.push_back({den > 0.0 ? dotv / den : 0.0, j});
    }
    std::stable_sort(sims.begin(), sims.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    for (int64_t t = 0; t < k && t < static_cast<int64_t>(sims.size()); ++t)
      mask[static_cast<size_t>(i * n + sims[static_cast<size_t>(t)].second)] = 1;
  }
  return mask;
}

}  // namespace

double cka(const Tensor& X, const Tensor& Y, double sigma) {
  check_pair(X, Y, "cka");
  if (X.dim(0) < 3) throw std::invalid_argument("cka: need at least 3 samples");
  Tensor Kc = center_kernel(rbf_kernel_matrix(X, sigma));
  Tensor Lc = center_kernel(rbf_kernel_matrix(Y, sigma));
  double num = frob_inner(Kc, Lc);
  double den = std::sqrt(frob_inner(Kc, Kc) * frob_inner(Lc, Lc));
  if (!(den > 0.0)) throw std::invalid_argument("cka: zero denominator (constant features)");
  return num / den;
}

double cknna(const Tensor& X, const Tensor& Y, int64_t k, double sigma) {
  check_pair(X, Y, "cknna");
  int64_t n = X.dim(0);
  if (n < 3) throw std::invalid_argument("cknna: need at least 3 samples");
  if (k < 1 || k > n - 1) throw std::invalid_argument("cknna: k out of range");

  Tensor Kc = center_kernel(rbf_kernel_matrix(X, sigma));
  Tensor Lc = center_kernel(rbf_kernel_matrix(Y, sigma));

  std::vector<uint8_t> mk = knn_mask(Kc, k);
  std::vector<uint8_t> ml = knn_mask(Lc, k);
  std::vector<uint8_t> mutual(static_cast<size_t>(n * n), 0);
  for (int64_t i = 0; i < n * n; ++i)
    mutual[static_cast<size_t>(i)] = mk[static_cast<size_t>(i)] && ml[static_cast<size_t>(i)];

  double num = masked_inner(Kc, Lc, mutual);
  double den = std::sqrt(masked_inner(Kc, Kc, mutual) * masked_inner(Lc, Lc, mutual));
  if (!(den > 0.0)) throw std::invalid_argument("cknna: zero denominator");
  return num / den;
}

MeanCosineResult mean_cosine(const Tensor& Za, const Tensor& Zb) {
  check_pair(Za, Zb, "mean_cosine");
  if (Za.dim(1) != Zb.dim(1)) throw std::invalid_argument("mean_cosine: feature dims differ");
  int64_t n = Za.dim(0), c = Za.dim(1);
  MeanCosineResult r;
  double acc = 0.0;
  int64_t used = 0;
  for (int64_t i = 0; i < n; ++i) {
    double na = 0.0, nb = 0.0, ab = 0.0;
    for (int64_t k = 0; k < c; ++k) {
      double a = Za.at2(i, k, c), b = Zb.at2(i, k, c);
      na += a * a;
      nb += b * b;
      ab += a * b;
    }
    if (na < 1e-24 || nb < 1e-24) {
      ++r.skipped;
      continue;
    }
    acc += ab / std::sqrt(na * nb);
    ++used;
  }
  if (used == 0) throw std::invalid_argument("mean_cosine: all rows have zero norm");
  r.value = acc / static_cast<double>(used);
  return r;
}

namespace {

void check_gaussians(const Tensor& mu1, const Tensor& sig1, const Tensor& mu2, const Tensor& sig2,
                     const char* what) {
  require_same_shape(mu1, sig1, what);
  require_same_shape(mu1, mu2, what);
  require_same_shape(mu1, sig2, what);
  for (int64_t i = 0; i < sig1.size(); ++i)
    if (!(sig1[i] > 0.0) || !(sig2[i] > 0.0))
      throw std::invalid_argument(std::string(what) + ": sigma must be positive");
}

}  // namespace

double gaussian_sym_kl(const Tensor& mu1, const Tensor& sig1, const Tensor& mu2,
                       const Tensor& sig2) {
  check_gaussians(mu1, sig1, mu2, sig2, "gaussian_sym_kl");
  int64_t c = mu1.last_dim();
  int64_t cells = mu1.size() / c;
  double total = 0.0;
  for (int64_t i = 0; i < mu1.size(); ++i) {
    double v1 = sig1[i] * sig1[i], v2 = sig2[i] * sig2[i];
    double dm = mu1[i] - mu2[i];
    double kl12 = 0.5 * (v1 / v2 + dm * dm / v2 - 1.0 + std::log(v2 / v1));
    double kl21 = 0.5 * (v2 / v1 + dm * dm / v1 - 1.0 + std::log(v1 / v2));
    total += kl12 + kl21;
  }
  return total / static_cast<double>(cells);
}

double gaussian_w2(const Tensor& mu1, const Tensor& sig1, const Tensor& mu2, const Tensor& sig2) {
  check_gaussians(mu1, sig1, mu2, sig2, "gaussian_w2");
  double acc = 0.0;
  for (int64_t i = 0; i < mu1.size(); ++i) {
    double dm = mu1[i] - mu2[i];
    double ds = sig1[i] - sig2[i];
    acc += dm * dm + ds * ds;
  }
  return std::sqrt(acc);
}

namespace {

void sample_moments(const FeatureSet& f, Tensor& mu, Tensor& cov) {
  int64_t n = f.n(), c = f.dim();
  if (n < 2) throw std::invalid_argument("frechet_distance: need at least 2 samples");
  mu = Tensor({c});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t k = 0; k < c; ++k) mu[k] += f.features.at2(i, k, c);
  for (int64_t k = 0; k < c; ++k) mu[k] /= static_cast<double>(n);

  cov = Tensor({c, c});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t a = 0; a < c; ++a) {
      double da = f.features.at2(i, a, c) - mu[a];
      for (int64_t b = 0; b < c; ++b)
        cov.at2(a, b, c) += da * (f.features.at2(i, b, c) - mu[b]);
    }
  for (int64_t i = 0; i < cov.size(); ++i) cov[i] /= static_cast<double>(n - 1);
}

}  // namespace

double frechet_from_moments(const Tensor& mu_g, const Tensor& cov_g, const Tensor& mu_e,
                            const Tensor& cov_e) {
  require_same_shape(mu_g, mu_e, "frechet_from_moments");
  require_same_shape(cov_g, cov_e, "frechet_from_moments");
  int64_t c = mu_g.size();

  double mean_term = 0.0;
  for (int64_t k = 0; k < c; ++k) {
    double d = mu_e[k] - mu_g[k];
    mean_term += d * d;
  }

  // symmetrize the product: tr((Se Sg)^{1/2}) = tr((Sg^{1/2} Se Sg^{1/2})^{1/2})
  Tensor sg = psd_sqrt(cov_g);
  Tensor inner = matmul_nn(matmul_nn(sg, cov_e), sg);
  // clean tiny asymmetry from the two matmuls
  for (int64_t i = 0; i < c; ++i)
    for (int64_t j = i + 1; j < c; ++j) {
      double v = 0.5 * (inner.at2(i, j, c) + inner.at2(j, i, c));
      inner.at2(i, j, c) = v;
      inner.at2(j, i, c) = v;
    }
  double cross = trace(psd_sqrt(inner));
  return mean_term + trace(cov_e) + trace(cov_g) - 2.0 * cross;
}

double frechet_distance(const FeatureSet& generated, const FeatureSet& reference) {
  if (generated.dim() != reference.dim())
    throw std::invalid_argument("frechet_distance: feature dims differ");
  if (generated.n() < generated.dim() + 1 || reference.n() < reference.dim() + 1)
    std::cerr << "[occflow] frechet_distance: fewer samples than dim+1; covariance is rank-deficient\n";
  Tensor mu_g, cov_g, mu_e, cov_e;
  sample_moments(generated, mu_g, cov_g);
  sample_moments(reference, mu_e, cov_e);
  return frechet_from_moments(mu_g, cov_g, mu_e, cov_e);
}

double kid(const FeatureSet& generated, const FeatureSet& reference, double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("kid: sigma must be positive");
  if (generated.dim() != reference.dim()) throw std::invalid_argument("kid: feature dims differ");
  int64_t n = generated.n(), m = reference.n(), c = generated.dim();
  if (n < 2 || m < 2) throw std::invalid_argument("kid: need at least 2 samples per set");

  double inv = 1.0 / (2.0 * sigma * sigma);
  auto k_of = [&](const Tensor& A, int64_t i, const Tensor& B, int64_t j) {
    double d2 = 0.0;
    for (int64_t t = 0; t < c; ++t) {
      double d = A.at2(i, t, c) - B.at2(j, t, c);
      d2 += d * d;
    }
    return std::exp(-d2 * inv);
  };

  double term_g = 0.0;
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j)
      if (i != j) term_g += k_of(generated.features, i, generated.features, j);
  term_g /= static_cast<double>(n * (n - 1));

  double term_e = 0.0;
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < m; ++j)
      if (i != j) term_e += k_of(reference.features, i, reference.features, j);
  term_e /= static_cast<double>(m * (m - 1));

  double cross = 0.0;
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < m; ++j) cross += k_of(generated.features, i, reference.features, j);
  cross *= 2.0 / static_cast<double>(n * m);

  return term_g + term_e - cross;
}

int64_t RegionBinning::bin_of(int64_t i, int64_t j, int64_t h, int64_t w) const {
  double cx = (static_cast<double>(i) + 0.5 - static_cast<double>(h) / 2.0) * cell_size;
  double cy = (static_cast<double>(j) + 0.5 - static_cast<double>(w) / 2.0) * cell_size;
  double d = std::max(std::fabs(cx), std::fabs(cy));
  for (size_t b = 0; b < edges.size(); ++b)
    if (d <= edges[b]) return static_cast<int64_t>(b);
  return static_cast<int64_t>(edges.size()) - 1;  // clamp beyond the last edge
}

RegionFeatureResult region_features(const Tensor& bev, const std::vector<uint8_t>& nonempty,
                                    const RegionBinning& binning) {
  if (bev.ndim() != 3) throw std::invalid_argument("region_features: bev must be (h, w, c)");
  int64_t h = bev.dim(0), w = bev.dim(1), c = bev.dim(2);
  if (static_cast<int64_t>(nonempty.size()) != h * w)
    throw std::invalid_argument("region_features: mask size mismatch");
  for (size_t b = 1; b < binning.edges.size(); ++b)
    if (!(binning.edges[b] > binning.edges[b - 1]))
      throw std::invalid_argument("region_features: edges must increase");

  int64_t nb = binning.n_bins();
  RegionFeatureResult r;
  r.features = Tensor({nb * c});
  r.empty_bin.assign(static_cast<size_t>(nb), 1);
  r.bin_counts.assign(static_cast<size_t>(nb), 0);

  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w; ++j) {
      if (!nonempty[static_cast<size_t>(i * w + j)]) continue;
      int64_t b = binning.bin_of(i, j, h, w);
      ++r.bin_counts[static_cast<size_t>(b)];
      for (int64_t k = 0; k < c; ++k)
        r.features[b * c + k] += bev[(i * w + j) * c + k];
    }
  for (int64_t b = 0; b < nb; ++b) {
    int64_t cnt = r.bin_counts[static_cast<size_t>(b)];
    if (cnt == 0) continue;  // zero vector, flagged empty
    r.empty_bin[static_cast<size_t>(b)] = 0;
    for (int64_t k = 0; k < c; ++k) r.features[b * c + k] /= static_cast<double>(cnt);
  }
  return r;
}

Tensor temporal_pool(const Tensor& clip, TemporalPool pool) {
  if (clip.ndim() != 2) throw std::invalid_argument("temporal_pool: clip must be (T, c)");
  int64_t T = clip.dim(0), c = clip.dim(1);
  Tensor out({c});
  if (pool == TemporalPool::Mean) {
    for (int64_t t = 0; t < T; ++t)
      for (int64_t k = 0; k < c; ++k) out[k] += clip.at2(t, k, c);
    for (int64_t k = 0; k < c; ++k) out[k] /= static_cast<double>(T);
  } else {
    // linearly increasing weights w_t = 2 (t + 1) / (T (T + 1))
    double denom = static_cast<double>(T) * static_cast<double>(T + 1) / 2.0;
    for (int64_t t = 0; t < T; ++t) {
      double wt = static_cast<double>(t + 1) / denom;
      for (int64_t k = 0; k < c; ++k) out[k] += wt * clip.at2(t, k, c);
    }
  }
  return out;
}

double sequence_frechet(const std::vector<Tensor>& clips_g, const std::vector<Tensor>& clips_e,
                        TemporalPool pool) {
  if (clips_g.size() < 2 || clips_e.size() < 2)
    throw std::invalid_argument("sequence_frechet: need at least 2 clips per set");
  int64_t c = clips_g.front().dim(1);
  Tensor fg({static_cast<int64_t>(clips_g.size()), c});
  for (size_t i = 0; i < clips_g.size(); ++i) {
    Tensor p = temporal_pool(clips_g[i], pool);
    for (int64_t k = 0; k < c; ++k) fg.at2(static_cast<int64_t>(i), k, c) = p[k];
  }
  Tensor fe({static_cast<int64_t>(clips_e.size()), c});
  for (size_t i = 0; i < clips_e.size(); ++i) {
    Tensor p = temporal_pool(clips_e[i], pool);
    for (int64_t k = 0; k < c; ++k) fe.at2(static_cast<int64_t>(i), k, c) = p[k];
  }
  return frechet_distance(FeatureSet(fg, "sequence_pool"), FeatureSet(fe, "sequence_pool"));
}

double class_variance(const std::vector<OccupancyGrid>& grids, uint32_t n_classes) {
  if (grids.empty()) throw std::invalid_argument("class_variance: empty grid set");
  size_t S = grids.size();
  for (const auto& g : grids)
    if (!g.same_layout(grids.front())) throw std::invalid_argument("class_variance: dims differ");

  std::vector<std::vector<double>> freq(S, std::vector<double>(n_classes, 0.0));
  for (size_t s = 0; s < S; ++s) {
    for (uint8_t c : grids[s].classes) {
      if (c >= n_classes) throw std::invalid_argument("class_variance: class id out of range");
      freq[s][c] += 1.0;
    }
    for (uint32_t c = 0; c < n_classes; ++c)
      freq[s][c] /= static_cast<double>(grids[s].numel());
  }

  double total = 0.0;
  int64_t used = 0;
  for (uint32_t c = 1; c < n_classes; ++c) {
    bool present = false;
    for (size_t s = 0; s < S; ++s)
      if (freq[s][c] > 0.0) present = true;
    if (!present) continue;
    double mean = 0.0;
    for (size_t s = 0; s < S; ++s) mean += freq[s][c];
    mean /= static_cast<double>(S);
    double var = 0.0;
    for (size_t s = 0; s < S; ++s) var += (freq[s][c] - mean) * (freq[s][c] - mean);
    var /= static_cast<double>(S);  // population variance
    total += var;
    ++used;
  }
  return used == 0 ? 0.0 : total / static_cast<double>(used);
}

}  // namespace occflow
