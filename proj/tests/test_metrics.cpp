#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "occflow/linalg.hpp"
#include "occflow/metrics.hpp"
#include "occflow/nn.hpp"

using namespace occflow;

namespace {

Tensor random_features(int64_t n, int64_t c, Rng& rng, double scale = 1.0) {
  Tensor t({n, c});
  for (int64_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
  return t;
}

// independent HSIC-style computation with explicit H K H matmuls
double cka_oracle(const Tensor& X, const Tensor& Y, double sigma) {
  int64_t n = X.dim(0);
  Tensor K = rbf_kernel_matrix(X, sigma);
  Tensor L = rbf_kernel_matrix(Y, sigma);
  Tensor H({n, n});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j) H.at2(i, j, n) = (i == j ? 1.0 : 0.0) - 1.0 / n;
  Tensor Kc = matmul_nn(matmul_nn(H, K), H);
  Tensor Lc = matmul_nn(matmul_nn(H, L), H);
  double num = 0.0, kk = 0.0, ll = 0.0;
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j) {
      num += Kc.at2(i, j, n) * Lc.at2(i, j, n);
      kk += Kc.at2(i, j, n) * Kc.at2(i, j, n);
      ll += Lc.at2(i, j, n) * Lc.at2(i, j, n);
    }
  return num / std::sqrt(kk * ll);
}

}  // namespace

TEST_CASE("rbf kernel matrix basics and double-loop oracle") {
  Rng rng(81);
  Tensor X = random_features(6, 3, rng);
  Tensor K = rbf_kernel_matrix(X, 1.3);
  for (int64_t i = 0; i < 6; ++i) CHECK(K.at2(i, i, 6) == 1.0);

  // two points at distance sigma * sqrt(2) -> off-diagonal e^{-1}
  double sigma = 0.7;
  Tensor two = Tensor::from({2, 1}, {0.0, sigma * std::sqrt(2.0)});
  Tensor K2 = rbf_kernel_matrix(two, sigma);
  CHECK(K2.at2(0, 1, 2) == doctest::Approx(std::exp(-1.0)).epsilon(1e-14));

  for (int64_t i = 0; i < 6; ++i)
    for (int64_t j = 0; j < 6; ++j) {
      double d2 = 0.0;
      for (int64_t k = 0; k < 3; ++k) {
        double d = X.at2(i, k, 3) - X.at2(j, k, 3);
        d2 += d * d;
      }
      double want = std::exp(-d2 / (2.0 * 1.3 * 1.3));
      CHECK(std::fabs(K.at2(i, j, 6) - want) < 1e-14);
    }

  CHECK_THROWS(rbf_kernel_matrix(X, 0.0));
}

TEST_CASE("cka identities and HSIC oracle") {
  Rng rng(82);
  Tensor X = random_features(12, 4, rng);
  Tensor Y = random_features(12, 4, rng);
  double sigma = median_pairwise_distance(X);

  CHECK(cka(X, X, sigma) == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(cka(X, Y, sigma) == doctest::Approx(cka(Y, X, sigma)).epsilon(1e-12));
  double v = cka(X, Y, sigma);
  CHECK(v >= 0.0);
  CHECK(v <= 1.0);
  CHECK(std::fabs(v - cka_oracle(X, Y, sigma)) < 1e-10);

  // isometry invariance: orthogonal transform + translation of one argument,
  // using a block-diagonal rotation in coordinates (0,1) and (2,3)
  double th = 0.83;
  Tensor R = Tensor::zeros({4, 4});
  R.at2(0, 0, 4) = std::cos(th);
  R.at2(0, 1, 4) = -std::sin(th);
  R.at2(1, 0, 4) = std::sin(th);
  R.at2(1, 1, 4) = std::cos(th);
  R.at2(2, 2, 4) = std::cos(2 * th);
  R.at2(2, 3, 4) = -std::sin(2 * th);
  R.at2(3, 2, 4) = std::sin(2 * th);
  R.at2(3, 3, 4) = std::cos(2 * th);

  Tensor Xr = matmul_nn(X, R);
  for (int64_t i = 0; i < 12; ++i)
    for (int64_t k = 0; k < 4; ++k) Xr.at2(i, k, 4) += 0.7 * (k + 1);  // translation
  CHECK(std::fabs(cka(Xr, Y, sigma) - cka(X, Y, sigma)) < 1e-8);
  CHECK(cka(Xr, X, sigma) == doctest::Approx(1.0).epsilon(1e-10));

  Tensor constant = Tensor::full({5, 2}, 3.0);
  CHECK_THROWS(cka(constant, random_features(5, 2, rng), 1.0));
}

TEST_CASE("cknna reduces to cka at k = n-1 and matches exhaustive masks") {
  Rng rng(83);
  Tensor X = random_features(9, 3, rng);
  Tensor Y = random_features(9, 3, rng);
  double sigma = 1.1;

  CHECK(cknna(X, Y, 8, sigma) == doctest::Approx(cka(X, Y, sigma)).epsilon(1e-10));
  CHECK(cknna(X, X, 3, sigma) == doctest::Approx(1.0).epsilon(1e-10));

  // n = 5, k = 2: recompute the mutual mask by brute force
  Tensor X5 = random_features(5, 2, rng);
  Tensor Y5 = random_features(5, 2, rng);
  double got = cknna(X5, Y5, 2, sigma);

  auto centered = [&](const Tensor& A) {
    Tensor K = rbf_kernel_matrix(A, sigma);
    int64_t n = K.dim(0);
    Tensor H({n, n});
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < n; ++j) H.at2(i, j, n) = (i == j ? 1.0 : 0.0) - 1.0 / n;
    return matmul_nn(matmul_nn(H, K), H);
  };
  Tensor Kc = centered(X5), Lc = centered(Y5);

  auto knn_of = [&](const Tensor& C, int64_t i, int64_t k) {
    std::vector<std::pair<double, int64_t>> sims;
    for (int64_t j = 0; j < 5; ++j) {
      if (j == i) continue;
      double dotv = 0.0, ni = 0.0, nj = 0.0;
      for (int64_t t = 0; t < 5; ++t) {
        dotv += C.at2(i, t, 5) * C.at2(j, t, 5);
        ni += C.at2(i, t, 5) * C.at2(i, t, 5);
        nj += C.at2(j, t, 5) * C.at2(j, t, 5);
      }
      sims.push_back({dotv / std::sqrt(ni * nj), j});
    }
    std::stable_sort(sims.begin(), sims.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    std::vector<int64_t> out;
    for (int64_t t = 0; t < k; ++t) out.push_back(sims[static_cast<size_t>(t)].second);
    return out;
  };

  double num = 0.0, kk = 0.0, ll = 0.0;
  for (int64_t i = 0; i < 5; ++i) {
    auto nk = knn_of(Kc, i, 2);
    auto nl = knn_of(Lc, i, 2);
    for (int64_t j = 0; j < 5; ++j) {
      bool in_mask = (i == j);
      if (i != j) {
        bool a = std::find(nk.begin(), nk.end(), j) != nk.end();
        bool b = std::find(nl.begin(), nl.end(), j) != nl.end();
        in_mask = a && b;
      }
      if (!in_mask) continue;
      num += Kc.at2(i, j, 5) * Lc.at2(i, j, 5);
      kk += Kc.at2(i, j, 5) * Kc.at2(i, j, 5);
      ll += Lc.at2(i, j, 5) * Lc.at2(i, j, 5);
    }
  }
  CHECK(got == doctest::Approx(num / std::sqrt(kk * ll)).epsilon(1e-12));

  CHECK_THROWS(cknna(X5, Y5, 0, sigma));
  CHECK_THROWS(cknna(X5, Y5, 5, sigma));
}

TEST_CASE("mean cosine") {
  Rng rng(84);
  Tensor Z = random_features(6, 3, rng);
  CHECK(mean_cosine(Z, Z).value == doctest::Approx(1.0));
  CHECK(mean_cosine(Z, scale(Z, -1.0)).value == doctest::Approx(-1.0));

  Tensor with_zero = Z;
  for (int64_t k = 0; k < 3; ++k) with_zero.at2(0, k, 3) = 0.0;
  MeanCosineResult r = mean_cosine(with_zero, Z);
  CHECK(r.skipped == 1);
}

TEST_CASE("gaussian symmetric kl") {
  Tensor mu = Tensor::from({1, 1}, {0.0});
  Tensor sig = Tensor::from({1, 1}, {1.0});
  CHECK(gaussian_sym_kl(mu, sig, mu, sig) == doctest::Approx(0.0));

  Tensor mu2 = Tensor::from({1, 1}, {1.0});
  CHECK(gaussian_sym_kl(mu, sig, mu2, sig) == doctest::Approx(1.0));

  // Monte-Carlo oracle for KL(p||q) + KL(q||p) on a random diagonal pair
  Rng rng(85);
  Tensor m1 = Tensor::from({1, 2}, {0.4, -0.3});
  Tensor s1 = Tensor::from({1, 2}, {0.9, 1.4});
  Tensor m2 = Tensor::from({1, 2}, {-0.2, 0.5});
  Tensor s2 = Tensor::from({1, 2}, {1.2, 0.7});
  double analytic = gaussian_sym_kl(m1, s1, m2, s2);

  auto logpdf = [](double x, double mu_, double sig_) {
    double z = (x - mu_) / sig_;
    return -0.5 * z * z - std::log(sig_) - 0.5 * std::log(2.0 * 3.14159265358979323846);
  };
  const int64_t N = 1000000;
  double acc = 0.0;
  for (int64_t t = 0; t < N; ++t) {
    double term = 0.0;
    for (int64_t k = 0; k < 2; ++k) {
      double xp = m1[k] + s1[k] * rng.normal();
      term += logpdf(xp, m1[k], s1[k]) - logpdf(xp, m2[k], s2[k]);
      double xq = m2[k] + s2[k] * rng.normal();
      term += logpdf(xq, m2[k], s2[k]) - logpdf(xq, m1[k], s1[k]);
    }
    acc += term;
  }
  double mc = acc / static_cast<double>(N);
  CHECK(std::fabs(mc - analytic) < 0.02 * std::fabs(analytic));

  CHECK_THROWS(gaussian_sym_kl(mu, Tensor::zeros({1, 1}), mu, sig));
}

TEST_CASE("gaussian w2 diagonal and Bures specialization") {
  Tensor mu1 = Tensor::from({1, 2}, {0.0, 0.0});
  Tensor mu2 = Tensor::from({1, 2}, {3.0, 4.0});
  Tensor sig = Tensor::from({1, 2}, {1.0, 1.0});
  CHECK(gaussian_w2(mu1, sig, mu1, sig) == doctest::Approx(0.0));
  CHECK(gaussian_w2(mu1, sig, mu2, sig) == doctest::Approx(5.0));

  // diagonal case against the general-covariance Bures formula
  Rng rng(86);
  Tensor s1 = Tensor::from({1, 2}, {0.8, 1.7});
  Tensor s2 = Tensor::from({1, 2}, {1.3, 0.6});
  Tensor m1 = Tensor::from({1, 2}, {0.2, -0.9});
  Tensor m2 = Tensor::from({1, 2}, {-0.4, 0.3});
  double got = gaussian_w2(m1, s1, m2, s2);

  Tensor C1 = Tensor::from({2, 2}, {s1[0] * s1[0], 0, 0, s1[1] * s1[1]});
  Tensor C2 = Tensor::from({2, 2}, {s2[0] * s2[0], 0, 0, s2[1] * s2[1]});
  Tensor sq1 = psd_sqrt(C1);
  Tensor inner = matmul_nn(matmul_nn(sq1, C2), sq1);
  double bures = trace(C1) + trace(C2) - 2.0 * trace(psd_sqrt(inner));
  double dm2 = (m1[0] - m2[0]) * (m1[0] - m2[0]) + (m1[1] - m2[1]) * (m1[1] - m2[1]);
  CHECK(got == doctest::Approx(std::sqrt(dm2 + bures)).epsilon(1e-10));
}

TEST_CASE("frechet distance identities and moment oracle") {
  Rng rng(87);
  Tensor F = random_features(40, 3, rng);
  FeatureSet fs(F, "test");
  CHECK(std::fabs(frechet_distance(fs, fs)) < 1e-10);

  // true moments: N(0, I) vs N(mu, I) -> ||mu||^2 exactly
  Tensor mu0 = Tensor::zeros({3});
  Tensor mu1 = Tensor::from({3}, {0.5, -1.0, 2.0});
  Tensor eye = Tensor::zeros({3, 3});
  for (int64_t i = 0; i < 3; ++i) eye.at2(i, i, 3) = 1.0;
  CHECK(frechet_from_moments(mu0, eye, mu1, eye) == doctest::Approx(5.25).epsilon(1e-12));

  // sampled 50k-point gaussians in D = 4 land within 5% of the analytic value
  const int64_t N = 50000;
  Tensor mean_b = Tensor::from({4}, {0.8, -0.4, 0.3, 1.1});
  Tensor std_b = Tensor::from({4}, {1.0, 1.4, 0.7, 1.0});
  Tensor A({N, 4}), B({N, 4});
  for (int64_t i = 0; i < N; ++i)
    for (int64_t k = 0; k < 4; ++k) {
      A.at2(i, k, 4) = rng.normal();
      B.at2(i, k, 4) = mean_b[k] + std_b[k] * rng.normal();
    }
  double analytic = 0.0;
  for (int64_t k = 0; k < 4; ++k) {
    analytic += mean_b[k] * mean_b[k];
    double ds = 1.0 - std_b[k];
    analytic += ds * ds;
  }
  double got = frechet_distance(FeatureSet(A, "a"), FeatureSet(B, "b"));
  CHECK(std::fabs(got - analytic) < 0.05 * analytic);
}

TEST_CASE("kid closed forms and unbiasedness") {
  Tensor a = Tensor::from({2, 2}, {0.3, -0.7, 0.3, -0.7});  // {a, a}
  FeatureSet fa(a, "dup");
  CHECK(std::fabs(kid(fa, fa, 1.0)) < 1e-12);

  // double-loop oracle on random sets
  Rng rng(88);
  Tensor G = random_features(7, 2, rng);
  Tensor E = random_features(9, 2, rng);
  double sigma = 1.4;
  double got = kid(FeatureSet(G, "g"), FeatureSet(E, "e"), sigma);

  auto kf = [&](const Tensor& P, int64_t i, const Tensor& Q, int64_t j) {
    double d2 = 0.0;
    for (int64_t k = 0; k < 2; ++k) {
      double d = P.at2(i, k, 2) - Q.at2(j, k, 2);
      d2 += d * d;
    }
    return std::exp(-d2 / (2.0 * sigma * sigma));
  };
  double t1 = 0.0;
  for (int64_t i = 0; i < 7; ++i)
    for (int64_t j = 0; j < 7; ++j)
      if (i != j) t1 += kf(G, i, G, j);
  t1 /= 42.0;
  double t2 = 0.0;
  for (int64_t i = 0; i < 9; ++i)
    for (int64_t j = 0; j < 9; ++j)
      if (i != j) t2 += kf(E, i, E, j);
  t2 /= 72.0;
  double t3 = 0.0;
  for (int64_t i = 0; i < 7; ++i)
    for (int64_t j = 0; j < 9; ++j) t3 += kf(G, i, E, j);
  t3 *= 2.0 / 63.0;
  CHECK(std::fabs(got - (t1 + t2 - t3)) < 1e-12);

  // unbiasedness: mean over 200 same-distribution resamples within 3 SE of 0
  const int trials = 200;
  std::vector<double> vals;
  for (int t = 0; t < trials; ++t) {
    Tensor P = random_features(24, 2, rng);
    Tensor Q = random_features(24, 2, rng);
    vals.push_back(kid(FeatureSet(P, "p"), FeatureSet(Q, "q"), 1.0));
  }
  double mean = 0.0;
  for (double v : vals) mean += v;
  mean /= trials;
  double var = 0.0;
  for (double v : vals) var += (v - mean) * (v - mean);
  var /= (trials - 1);
  double se = std::sqrt(var / trials);
  CHECK(std::fabs(mean) < 3.0 * se);
}

TEST_CASE("region features binning") {
  RegionBinning bins;  // 8 / 24 / 40 m, 3.2 m cells
  const int64_t h = 25, w = 25, c = 2;

  // all cells equal and non-empty: every bin mean equals the shared vector
  Tensor bev({h, w, c});
  for (int64_t i = 0; i < h * w; ++i) {
    bev[i * c] = 0.5;
    bev[i * c + 1] = -1.5;
  }
  std::vector<uint8_t> all(static_cast<size_t>(h * w), 1);
  RegionFeatureResult r = region_features(bev, all, bins);
  for (int64_t b = 0; b < 3; ++b) {
    CHECK(r.features[b * c] == doctest::Approx(0.5));
    CHECK(r.features[b * c + 1] == doctest::Approx(-1.5));
    CHECK(r.empty_bin[static_cast<size_t>(b)] == 0);
  }
  // partition: bin counts cover every non-empty cell exactly once
  CHECK(r.bin_counts[0] + r.bin_counts[1] + r.bin_counts[2] == h * w);

  // one non-empty cell ~10m from center lands in the middle bin only
  std::vector<uint8_t> one(static_cast<size_t>(h * w), 0);
  int64_t ci = 15, cj = 12;  // center offset (3 + 0.5 - 0) cells? -> |cx| = 9.6 m
  one[static_cast<size_t>(ci * w + cj)] = 1;
  RegionFeatureResult r1 = region_features(bev, one, bins);
  CHECK(r1.bin_counts[0] == 0);
  CHECK(r1.bin_counts[1] == 1);
  CHECK(r1.bin_counts[2] == 0);
  CHECK(r1.empty_bin[0] == 1);
  CHECK(r1.features[1 * c] == doctest::Approx(0.5));
  CHECK(r1.features[0] == 0.0);

  // random occupancy against a brute-force per-cell loop
  Rng rng(89);
  Tensor rb({h, w, c});
  std::vector<uint8_t> mask(static_cast<size_t>(h * w), 0);
  for (int64_t i = 0; i < h * w; ++i) {
    mask[static_cast<size_t>(i)] = rng.uniform() < 0.5;
    rb[i * c] = rng.normal();
    rb[i * c + 1] = rng.normal();
  }
  RegionFeatureResult rr = region_features(rb, mask, bins);
  std::vector<double> sums(6, 0.0);
  std::vector<int64_t> cnt(3, 0);
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w; ++j) {
      if (!mask[static_cast<size_t>(i * w + j)]) continue;
      double cx = (i + 0.5 - 12.5) * 3.2, cy = (j + 0.5 - 12.5) * 3.2;
      double d = std::max(std::fabs(cx), std::fabs(cy));
      int64_t b = d <= 8.0 ? 0 : (d <= 24.0 ? 1 : 2);
      ++cnt[static_cast<size_t>(b)];
      sums[static_cast<size_t>(b * 2)] += rb[(i * w + j) * 2];
      sums[static_cast<size_t>(b * 2 + 1)] += rb[(i * w + j) * 2 + 1];
    }
  for (int64_t b = 0; b < 3; ++b) {
    CHECK(rr.bin_counts[static_cast<size_t>(b)] == cnt[static_cast<size_t>(b)]);
    if (cnt[static_cast<size_t>(b)] == 0) continue;
    CHECK(rr.features[b * 2] == doctest::Approx(sums[static_cast<size_t>(b * 2)] / cnt[static_cast<size_t>(b)]));
  }
}

TEST_CASE("sequence frechet pooling") {
  Rng rng(90);
  std::vector<Tensor> clips;
  for (int i = 0; i < 6; ++i) clips.push_back(random_features(4, 3, rng));

  CHECK(std::fabs(sequence_frechet(clips, clips)) < 1e-10);

  // equals frechet_distance on pre-pooled features, bitwise
  Tensor pooled({6, 3});
  for (int64_t i = 0; i < 6; ++i) {
    Tensor p = temporal_pool(clips[static_cast<size_t>(i)], TemporalPool::Mean);
    for (int64_t k = 0; k < 3; ++k) pooled.at2(i, k, 3) = p[k];
  }
  std::vector<Tensor> other;
  for (int i = 0; i < 6; ++i) other.push_back(random_features(4, 3, rng));
  Tensor pooled_o({6, 3});
  for (int64_t i = 0; i < 6; ++i) {
    Tensor p = temporal_pool(other[static_cast<size_t>(i)], TemporalPool::Mean);
    for (int64_t k = 0; k < 3; ++k) pooled_o.at2(i, k, 3) = p[k];
  }
  double via_seq = sequence_frechet(clips, other, TemporalPool::Mean);
  double via_fd = frechet_distance(FeatureSet(pooled, "x"), FeatureSet(pooled_o, "y"));
  CHECK(via_seq == via_fd);

  // frame reordering is visible under weighted pooling, invisible under mean
  std::vector<Tensor> reordered;
  for (const auto& c : clips) {
    Tensor r = c;
    for (int64_t k = 0; k < 3; ++k) {
      std::swap(r.at2(0, k, 3), r.at2(3, k, 3));
      std::swap(r.at2(1, k, 3), r.at2(2, k, 3));
    }
    reordered.push_back(r);
  }
  CHECK(std::fabs(sequence_frechet(clips, reordered, TemporalPool::Mean)) < 1e-10);
  CHECK(sequence_frechet(clips, reordered, TemporalPool::LinearWeighted) > 1e-4);
}

TEST_CASE("class variance") {
  Rng rng(91);
  OccupancyGrid g1(4, 4, 2, 0.5, 3);
  for (auto& c : g1.classes)
    if (rng.uniform() < 0.4) c = static_cast<uint8_t>(1 + rng.uniform_int(2));

  CHECK(class_variance({g1, g1, g1}, 3) == doctest::Approx(0.0));

  // two grids, one class present in exactly one of them
  OccupancyGrid a(4, 4, 2, 0.5, 2), b(4, 4, 2, 0.5, 2);
  a.at(0, 0, 0) = 1;
  a.at(1, 1, 1) = 1;
  double p = 2.0 / 32.0;
  double want = ((p - p / 2) * (p - p / 2) + (0.0 - p / 2) * (0.0 - p / 2)) / 2.0;
  CHECK(class_variance({a, b}, 2) == doctest::Approx(want).epsilon(1e-12));

  // random set against the direct formula
  std::vector<OccupancyGrid> grids;
  for (int s = 0; s < 5; ++s) {
    OccupancyGrid g(4, 4, 2, 0.5, 4);
    for (auto& c : g.classes)
      if (rng.uniform() < 0.5) c = static_cast<uint8_t>(1 + rng.uniform_int(3));
    grids.push_back(std::move(g));
  }
  double got = class_variance(grids, 4);
  double total = 0.0;
  int used = 0;
  for (uint32_t cls = 1; cls < 4; ++cls) {
    std::vector<double> freq;
    bool present = false;
    for (const auto& g : grids) {
      int64_t n = 0;
      for (uint8_t c : g.classes) n += (c == cls);
      double f = static_cast<double>(n) / 32.0;
      if (f > 0) present = true;
      freq.push_back(f);
    }
    if (!present) continue;
    double mean = 0.0;
    for (double f : freq) mean += f;
    mean /= 5.0;
    double var = 0.0;
    for (double f : freq) var += (f - mean) * (f - mean);
    var /= 5.0;
    total += var;
    ++used;
  }
  CHECK(got == doctest::Approx(total / used).epsilon(1e-12));
}
