#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "occflow/occupancy.hpp"
#include "occflow/vae.hpp"

using namespace occflow;

namespace {

VaeConfig tiny_cfg() {
  VaeConfig cfg;
  cfg.latent_channels = 2;
  cfg.downsample = 2;
  cfg.sub_x = 2;
  cfg.sub_y = 2;
  cfg.sub_z = 2;
  cfg.n_classes = 2;
  cfg.enc_hidden = {8};
  cfg.dec_hidden = {8};
  return cfg;
}

OccupancyGrid tiny_grid(Rng& rng, uint32_t nc = 2) {
  OccupancyGrid g(4, 4, 2, 0.5, nc);
  for (auto& c : g.classes)
    if (rng.uniform() < 0.4) c = static_cast<uint8_t>(1 + rng.uniform_int(nc - 1));
  return g;
}

double max_rel_err(const Tensor& analytic, const Tensor& fd, double floor = 1e-3) {
  double worst = 0.0;
  for (int64_t i = 0; i < fd.size(); ++i)
    worst = std::max(worst, std::fabs(analytic[i] - fd[i]) / std::max(floor, std::fabs(fd[i])));
  return worst;
}

}  // namespace

TEST_CASE("encode zero-weight encoder returns bias-derived gaussian") {
  Rng rng(31);
  VaeModel m = VaeModel::init(tiny_cfg(), rng);
  for (auto& l : m.encoder.layers) l.weight = Tensor::zeros(l.weight.shape);
  auto& last = m.encoder.layers.back();
  last.bias = Tensor::from({4}, {0.3, -0.2, 0.1, -0.5});  // mu channels, then log sigma

  OccupancyGrid g = tiny_grid(rng);
  auto [mu, sigma] = encode(m, g);
  CHECK(mu.shape == std::vector<int64_t>{2, 2, 2});
  for (int64_t cell = 0; cell < 4; ++cell) {
    CHECK(mu[cell * 2 + 0] == doctest::Approx(0.3));
    CHECK(mu[cell * 2 + 1] == doctest::Approx(-0.2));
    CHECK(sigma[cell * 2 + 0] == doctest::Approx(std::exp(0.1)));
    CHECK(sigma[cell * 2 + 1] == doctest::Approx(std::exp(-0.5)));
  }
}

TEST_CASE("encode is deterministic and shape follows downsample") {
  Rng rng(32);
  VaeModel m = VaeModel::init(tiny_cfg(), rng);
  OccupancyGrid g = tiny_grid(rng);
  auto [mu1, s1] = encode(m, g);
  auto [mu2, s2] = encode(m, g);
  CHECK(max_abs_diff(mu1, mu2) == 0.0);
  CHECK(max_abs_diff(s1, s2) == 0.0);

  OccupancyGrid odd(5, 4, 2, 0.5);
  CHECK_THROWS(encode(m, odd));
}

TEST_CASE("reparameterize arithmetic") {
  Tensor mu = Tensor::from({1, 1, 1}, {1.0});
  Tensor sig = Tensor::from({1, 1, 1}, {2.0});
  CHECK(reparameterize(mu, sig, Tensor::from({1, 1, 1}, {0.5}))[0] == doctest::Approx(2.0));
  CHECK(reparameterize(mu, sig, Tensor::zeros({1, 1, 1}))[0] == doctest::Approx(1.0));
  Tensor zero_sig = Tensor::zeros({1, 1, 1});
  CHECK(reparameterize(mu, zero_sig, Tensor::from({1, 1, 1}, {7.0}))[0] == doctest::Approx(1.0));
  CHECK_THROWS(reparameterize(mu, sig, Tensor::zeros({2, 1, 1})));
}

TEST_CASE("decode probabilities behave") {
  Rng rng(33);
  VaeConfig cfg = tiny_cfg();
  cfg.dec_hidden = {};  // single affine layer, easy to steer
  VaeModel m = VaeModel::init(cfg, rng);
  m.decoder.layers[0].weight = Tensor::zeros(m.decoder.layers[0].weight.shape);
  m.decoder.layers[0].bias = Tensor::zeros(m.decoder.layers[0].bias.shape);

  Tensor z = Tensor::zeros({2, 2, 2});
  DecodeResult r = decode(m, z, 4, 4, 2);
  // uniform logits -> uniform probabilities
  for (int64_t i = 0; i < r.probs.size(); ++i) CHECK(r.probs[i] == doctest::Approx(0.5));
  // argmax tie resolves to the lowest class id
  CHECK(r.grid.occupied_count() == 0);

  // a +50 logit dominates utterly
  for (int64_t sub = 0; sub < 8; ++sub) m.decoder.layers[0].bias[sub * 2 + 1] = 50.0;
  DecodeResult r2 = decode(m, z, 4, 4, 2);
  // 1 - 1e-20 is below double resolution at 1.0, so >= is the representable check
  for (int64_t v = 0; v < 4 * 4 * 2; ++v) CHECK(r2.probs[v * 2 + 1] >= 1.0 - 1e-20);

  // random latents still produce normalized rows
  VaeModel m3 = VaeModel::init(tiny_cfg(), rng);
  Tensor z3 = rng.normal_tensor({2, 2, 2});
  DecodeResult r3 = decode(m3, z3, 4, 4, 2);
  for (int64_t v = 0; v < 4 * 4 * 2; ++v) {
    double s = r3.probs[v * 2] + r3.probs[v * 2 + 1];
    CHECK(std::fabs(s - 1.0) < 1e-12);
    CHECK(r3.probs[v * 2] >= 0.0);
  }
}

TEST_CASE("kl divergence values and monte-carlo oracle") {
  CHECK(kl_divergence(Tensor::zeros({1, 1}), Tensor::full({1, 1}, 1.0)) == doctest::Approx(0.0));
  CHECK(kl_divergence(Tensor::from({1, 1}, {1.0}), Tensor::full({1, 1}, 1.0)) ==
        doctest::Approx(0.5));
  CHECK_THROWS(kl_divergence(Tensor::zeros({1, 1}), Tensor::zeros({1, 1})));

  // Monte-Carlo estimate of E_q[log q - log p] on a 2-cell, 2-channel code.
  Tensor mu = Tensor::from({2, 2}, {0.7, -0.4, 1.2, 0.1});
  Tensor sig = Tensor::from({2, 2}, {0.8, 1.5, 0.6, 1.1});
  double analytic = kl_divergence(mu, sig);

  Rng rng(34);
  double acc = 0.0;
  const int64_t N = 1000000;
  for (int64_t s = 0; s < N; ++s) {
    double term = 0.0;
    for (int64_t i = 0; i < 4; ++i) {
      double e = rng.normal();
      double z = mu[i] + sig[i] * e;
      double logq = -0.5 * (e * e) - std::log(sig[i]);
      double logp = -0.5 * z * z;
      term += logq - logp;
    }
    acc += term / 2.0;  // mean over the 2 cells
  }
  double mc = acc / static_cast<double>(N);
  CHECK(std::fabs(mc - analytic) < 0.01 * std::fabs(analytic));
}

TEST_CASE("lovasz softmax zero at perfect prediction, nonnegative, vertex oracle") {
  // perfect one-hot predictions
  Tensor perfect = Tensor::from({3, 2}, {1, 0, 0, 1, 1, 0});
  CHECK(lovasz_softmax(perfect, {0, 1, 0}) == doctest::Approx(0.0));

  // all 2^4 predicted masks x a few gt masks: loss equals mean over present
  // classes of (1 - per-class IoU)
  for (uint8_t gt_bits : {0b1111, 0b0011, 0b0101, 0b1000}) {
    std::vector<uint8_t> labels(4);
    for (int i = 0; i < 4; ++i) labels[static_cast<size_t>(i)] = (gt_bits >> i) & 1;
    for (int mask = 0; mask < 16; ++mask) {
      Tensor probs({4, 2});
      for (int i = 0; i < 4; ++i) {
        int bit = (mask >> i) & 1;
        probs.at2(i, 1, 2) = bit;
        probs.at2(i, 0, 2) = 1 - bit;
      }
      double got = lovasz_softmax(probs, labels);

      double sum = 0.0;
      int present = 0;
      for (int cls = 0; cls < 2; ++cls) {
        int64_t gt_count = 0, inter = 0, uni = 0;
        for (int i = 0; i < 4; ++i) {
          bool g = labels[static_cast<size_t>(i)] == cls;
          bool p = ((mask >> i) & 1) == cls;
          gt_count += g;
          inter += (g && p);
          uni += (g || p);
        }
        if (gt_count == 0) continue;
        ++present;
        sum += uni == 0 ? 0.0 : 1.0 - static_cast<double>(inter) / static_cast<double>(uni);
      }
      CHECK(got == doctest::Approx(sum / present).epsilon(1e-12));
    }
  }

  // nonnegative on random softmax inputs
  Rng rng(35);
  for (int t = 0; t < 20; ++t) {
    Tensor probs({6, 3});
    std::vector<uint8_t> labels(6);
    for (int64_t i = 0; i < 6; ++i) {
      double a = std::exp(rng.normal()), b = std::exp(rng.normal()), c = std::exp(rng.normal());
      double s = a + b + c;
      probs.at2(i, 0, 3) = a / s;
      probs.at2(i, 1, 3) = b / s;
      probs.at2(i, 2, 3) = c / s;
      labels[static_cast<size_t>(i)] = static_cast<uint8_t>(rng.uniform_int(3));
    }
    CHECK(lovasz_softmax(probs, labels) >= 0.0);
  }

  Tensor bad = Tensor::from({1, 2}, {0.9, 0.4});
  CHECK_THROWS(lovasz_softmax(bad, {0}));
}

TEST_CASE("lovasz gradient matches finite differences") {
  Rng rng(36);
  Tensor logits = rng.normal_tensor({5, 3});
  std::vector<uint8_t> labels{0, 1, 2, 1, 0};

  auto to_probs = [](const Tensor& lg) {
    Tensor p = lg;
    int64_t n = lg.dim(0), C = lg.dim(1);
    for (int64_t i = 0; i < n; ++i) {
      double mx = -1e300;
      for (int64_t k = 0; k < C; ++k) mx = std::max(mx, lg.at2(i, k, C));
      double den = 0.0;
      for (int64_t k = 0; k < C; ++k) den += std::exp(lg.at2(i, k, C) - mx);
      for (int64_t k = 0; k < C; ++k) p.at2(i, k, C) = std::exp(lg.at2(i, k, C) - mx) / den;
    }
    return p;
  };

  Tensor probs = to_probs(logits);
  LovaszGradResult lg = lovasz_softmax_grad(probs, labels);

  // chain through softmax by hand, then compare against FD on logits
  Tensor analytic({5, 3});
  for (int64_t i = 0; i < 5; ++i) {
    double pd = 0.0;
    for (int64_t k = 0; k < 3; ++k) pd += probs.at2(i, k, 3) * lg.d_probs.at2(i, k, 3);
    for (int64_t k = 0; k < 3; ++k)
      analytic.at2(i, k, 3) = probs.at2(i, k, 3) * (lg.d_probs.at2(i, k, 3) - pd);
  }
  Tensor fd = finite_diff_grad(
      [&](const Tensor& q) { return lovasz_softmax(to_probs(q), labels); }, logits, 1e-6);
  CHECK(max_rel_err(analytic, fd) < 1e-4);
}

TEST_CASE("cosine alignment loss identities") {
  Rng rng(37);
  Tensor z = rng.normal_tensor({3, 4});
  CHECK(cosine_align_loss(z, z).loss == doctest::Approx(0.0));
  CHECK(cosine_align_loss(scale(z, -1.0), z).loss == doctest::Approx(2.0));
  CHECK(cosine_align_loss(scale(z, 2.0), z).loss == doctest::Approx(0.0));  // scale invariance

  // per-cell positive rescaling keeps the loss unchanged
  Tensor d = rng.normal_tensor({3, 4});
  Tensor zs = z;
  for (int64_t cell = 0; cell < 3; ++cell) {
    double f = 0.5 + cell;
    for (int64_t k = 0; k < 4; ++k) zs[cell * 4 + k] *= f;
  }
  CHECK(cosine_align_loss(zs, d).loss == doctest::Approx(cosine_align_loss(z, d).loss));

  Tensor with_zero = z;
  for (int64_t k = 0; k < 4; ++k) with_zero[k] = 0.0;
  CosineAlignResult r = cosine_align_loss(with_zero, d);
  CHECK(r.skipped == 1);

  // gradient vs finite differences
  CosineAlignGrad g = cosine_align_grad(z, d);
  Tensor fd = finite_diff_grad([&](const Tensor& q) { return cosine_align_loss(q, d).loss; }, z, 1e-6);
  CHECK(max_rel_err(g.d_z, fd) < 1e-5);
}

TEST_CASE("vae_loss composition and kappa=0 identity") {
  Rng rng(38);
  VaeModel m = VaeModel::init(tiny_cfg(), rng);
  OccupancyGrid g = tiny_grid(rng);

  VaeTrainConfig ce_only;
  ce_only.beta = 0.0;
  ce_only.lambda = 0.0;
  Rng r1(100);
  VaeLossResult res = vae_loss(m, g, std::nullopt, ce_only, r1);
  CHECK(res.total == doctest::Approx(res.ce));

  // kappa = 0 in finetune mode reduces bitwise to the pretrain loss
  VaeTrainConfig pre;
  VaeTrainConfig ft;
  ft.mode = VaeMode::FinetuneAligned;
  ft.kappa = 0.0;
  Rng ra(200), rb(200);
  VaeLossResult a = vae_loss(m, g, std::nullopt, pre, ra);
  VaeLossResult b = vae_loss(m, g, std::nullopt, ft, rb);
  CHECK(a.total == b.total);
  for (size_t i = 0; i < a.grads.size(); ++i) CHECK(max_abs_diff(a.grads[i], b.grads[i]) == 0.0);

  VaeTrainConfig need_target;
  need_target.mode = VaeMode::FinetuneAligned;
  Rng rc(300);
  CHECK_THROWS(vae_loss(m, g, std::nullopt, need_target, rc));
}

TEST_CASE("vae_loss gradients match finite differences in both modes") {
  for (int mode = 0; mode < 2; ++mode) {
    Rng rng(40 + static_cast<uint64_t>(mode));
    VaeModel m = VaeModel::init(tiny_cfg(), rng);
    OccupancyGrid g = tiny_grid(rng);
    Tensor eps = rng.normal_tensor({4, 2});

    VaeTrainConfig cfg;
    cfg.beta = 0.05;  // large enough that the KL path is exercised
    cfg.lambda = 1.0;
    std::optional<Tensor> target;
    if (mode == 1) {
      cfg.mode = VaeMode::FinetuneAligned;
      cfg.kappa = 0.7;
      target = rng.normal_tensor({2, 2, 2});
    }

    VaeLossResult res = vae_loss_with_eps(m, g, target, cfg, eps);
    auto refs = m.params();
    REQUIRE(refs.size() == res.grads.size());

    for (size_t pi = 0; pi < refs.size(); ++pi) {
      Tensor* t = refs[pi].value;
      Tensor fd = finite_diff_grad(
          [&](const Tensor& w) {
            Tensor saved = *t;
            *t = w;
            double v = vae_loss_with_eps(m, g, target, cfg, eps).total;
            *t = saved;
            return v;
          },
          *t, 1e-5);
      CHECK(max_rel_err(res.grads[pi], fd) < 1e-4);
    }
  }
}

TEST_CASE("compression ratio arithmetic") {
  CHECK(compression_ratio(16, 16, 4, 1, 4, 4, 4) == doctest::Approx(16.0));
  CHECK(compression_ratio(8, 8, 2, 1, 8, 8, 2) == doctest::Approx(1.0));
  CHECK(compression_ratio(200, 200, 16, 1, 25, 25, 16) == doctest::Approx(64.0));
  CHECK_THROWS(compression_ratio(0, 1, 1, 1, 1, 1, 1));
}

TEST_CASE("reconstruction round trip through miou") {
  Rng rng(41);
  VaeModel m = VaeModel::init(tiny_cfg(), rng);
  OccupancyGrid g = tiny_grid(rng);
  OccupancyGrid rec = vae_reconstruct(m, g);
  CHECK(rec.same_layout(g));
  MiouResult mi = miou(rec, g, 2);
  CHECK(mi.mean >= 0.0);
  CHECK(mi.mean <= 1.0);
}
