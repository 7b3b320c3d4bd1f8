#pragma once

#include <string>
#include <vector>

#include "occflow/occupancy.hpp"
#include "occflow/tensor.hpp"

namespace occflow {

// n samples x c features plus a tag recording which extractor produced them.
struct FeatureSet {
  Tensor features;  // (n, c)
  std::string provenance;

  FeatureSet() = default;
  FeatureSet(Tensor f, std::string prov) : features(std::move(f)), provenance(std::move(prov)) {
    if (features.ndim() != 2) throw std::invalid_argument("FeatureSet: features must be (n, c)");
  }
  int64_t n() const { return features.dim(0); }
  int64_t dim() const { return features.dim(1); }
};

// K_ij = exp(-||x_i - x_j||^2 / (2 sigma^2))
Tensor rbf_kernel_matrix(const Tensor& X, double sigma);

// Median pairwise Euclidean distance; the default bandwidth heuristic.
double median_pairwise_distance(const Tensor& X);

// RBF-kernel CKA with double centering: tr(Kc Lc) / sqrt(tr(Kc Kc) tr(Lc Lc)).
double cka(const Tensor& X, const Tensor& Y, double sigma);

// CKA restricted to a mutual-kNN mask. Neighborhoods come from cosine
// similarity between centered kernel rows (ties to the lower index); diagonal
// terms always count, so k = n-1 reproduces cka exactly.
double cknna(const Tensor& X, const Tensor& Y, int64_t k, double sigma);

struct MeanCosineResult {
  double value = 0.0;
  int64_t skipped = 0;  // zero-norm rows
};
MeanCosineResult mean_cosine(const Tensor& Za, const Tensor& Zb);

// Jeffreys divergence KL(p||q) + KL(q||p) between diagonal Gaussians; sum
// over channels, mean over cells (the last axis is the channel axis).
double gaussian_sym_kl(const Tensor& mu1, const Tensor& sig1, const Tensor& mu2, const Tensor& sig2);

// 2-Wasserstein between diagonal Gaussians over all coordinates jointly:
// sqrt(||mu1 - mu2||^2 + ||sig1 - sig2||^2).
double gaussian_w2(const Tensor& mu1, const Tensor& sig1, const Tensor& mu2, const Tensor& sig2);

// ||mu_e - mu_g||^2 + tr(Se + Sg - 2 (Se Sg)^{1/2}) from sample moments with
// unbiased covariances; the cross term is symmetrized as
// Sg^{1/2} Se Sg^{1/2} before the matrix square root.
double frechet_distance(const FeatureSet& generated, const FeatureSet& reference);
double frechet_from_moments(const Tensor& mu_g, const Tensor& cov_g,
                            const Tensor& mu_e, const Tensor& cov_e);

// Unbiased MMD^2 with an RBF kernel: diagonal-excluded within-set means plus
// the full cross term.
double kid(const FeatureSet& generated, const FeatureSet& reference, double sigma);

// Chebyshev-distance depth bins around the grid center. Cells beyond the last
// edge clamp into the outermost bin so the binning stays a partition.
struct RegionBinning {
  std::vector<double> edges = {8.0, 24.0, 40.0};  // meters
  double cell_size = 3.2;                          // meters per BEV cell

  int64_t n_bins() const { return static_cast<int64_t>(edges.size()); }
  int64_t bin_of(int64_t i, int64_t j, int64_t h, int64_t w) const;
};

struct RegionFeatureResult {
  Tensor features;               // concatenated per-bin means, (n_bins * c)
  std::vector<uint8_t> empty_bin;  // 1 when a bin had no non-empty cell
  std::vector<int64_t> bin_counts;
};

// Mean feature of non-empty cells per bin, concatenated in bin order.
// bev: (h, w, c); nonempty: h*w mask.
RegionFeatureResult region_features(const Tensor& bev, const std::vector<uint8_t>& nonempty,
                                    const RegionBinning& binning);

enum class TemporalPool { Mean, LinearWeighted };

// Frechet distance over clip-level features; each clip (T, c) is pooled over
// time first. LinearWeighted restores frame-order sensitivity.
double sequence_frechet(const std::vector<Tensor>& clips_g, const std::vector<Tensor>& clips_e,
                        TemporalPool pool = TemporalPool::Mean);
Tensor temporal_pool(const Tensor& clip, TemporalPool pool);

// Variance across samples of per-class occupancy frequencies, averaged over
// the classes present in at least one grid (population variance).
double class_variance(const std::vector<OccupancyGrid>& grids, uint32_t n_classes);

}  // namespace occflow
