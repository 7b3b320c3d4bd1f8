#include "occflow/linalg.hpp"

#include <cmath>

namespace occflow {

namespace {

void check_square_symmetric(const Tensor& M, double tol, int64_t& n_out) {
  if (M.ndim() != 2 || M.dim(0) != M.dim(1))
    throw std::invalid_argument("expected square matrix, got " + shape_str(M.shape));
  int64_t n = M.dim(0);
  double scale = std::max(1.0, max_abs(M));
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = i + 1; j < n; ++j)
      if (std::fabs(M.at2(i, j, n) - M.at2(j, i, n)) > tol * scale)
        throw std::invalid_argument("matrix asymmetric beyond tolerance");
  n_out = n;
}

}  // namespace

void sym_eig(const Tensor& M, Tensor& eigvals, Tensor& eigvecs, double sym_tol) {
  int64_t n = 0;
  check_square_symmetric(M, sym_tol, n);

  Tensor a = M;
  Tensor v({n, n});
  for (int64_t i = 0; i < n; ++i) v.at2(i, i, n) = 1.0;

  const int max_sweeps = 64;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = i + 1; j < n; ++j) off += a.at2(i, j, n) * a.at2(i, j, n);
    double diag = 0.0;
    for (int64_t i = 0; i < n; ++i) diag += a.at2(i, i, n) * a.at2(i, i, n);
    if (off <= 1e-30 * std::max(1.0, diag)) break;

    for (int64_t p = 0; p < n - 1; ++p) {
      for (int64_t q = p + 1; q < n; ++q) {
        double apq = a.at2(p, q, n);
        if (apq == 0.0) continue;
        double app = a.at2(p, p, n), aqq = a.at2(q, q, n);
        double tau = (aqq - app) / (2.0 * apq);
        double t = (tau >= 0.0 ? 1.0 : -1.0) / (std::fabs(tau) + std::sqrt(1.0 + tau * tau));
        double c = 1.0 / std::sqrt(1.0 + t * t);
        double s = t * c;
        for (int64_t k = 0; k < n; ++k) {
          double akp = a.at2(k, p, n), akq = a.at2(k, q, n);
          a.at2(k, p, n) = c * akp - s * akq;
          a.at2(k, q, n) = s * akp + c * akq;
        }
        for (int64_t k = 0; k < n; ++k) {
          double apk = a.at2(p, k, n), aqk = a.at2(q, k, n);
          a.at2(p, k, n) = c * apk - s * aqk;
          a.at2(q, k, n) = s * apk + c * aqk;
        }
        for (int64_t k = 0; k < n; ++k) {
          double vkp = v.at2(k, p, n), vkq = v.at2(k, q, n);
          v.at2(k, p, n) = c * vkp - s * vkq;
          v.at2(k, q, n) = s * vkp + c * vkq;
        }
      }
    }
  }

  eigvals = Tensor({n});
  for (int64_t i = 0; i < n; ++i) eigvals[i] = a.at2(i, i, n);
  eigvecs = std::move(v);
}

Tensor psd_sqrt(const Tensor& M, double sym_tol) {
  Tensor vals, vecs;
  sym_eig(M, vals, vecs, sym_tol);
  int64_t n = vals.size();
  Tensor root({n});
  for (int64_t i = 0; i < n; ++i) root[i] = vals[i] > 0.0 ? std::sqrt(vals[i]) : 0.0;
  // S = V diag(root) V^T
  Tensor s({n, n});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int64_t k = 0; k < n; ++k) acc += vecs.at2(i, k, n) * root[k] * vecs.at2(j, k, n);
      s.at2(i, j, n) = acc;
    }
  return s;
}

double trace(const Tensor& M) {
  if (M.ndim() != 2 || M.dim(0) != M.dim(1))
    throw std::invalid_argument("trace: expected square matrix");
  int64_t n = M.dim(0);
  double t = 0.0;
  for (int64_t i = 0; i < n; ++i) t += M.at2(i, i, n);
  return t;
}

}  // namespace occflow
