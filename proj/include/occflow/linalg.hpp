#pragma once

#include "occflow/tensor.hpp"

namespace occflow {

// Symmetric eigendecomposition by cyclic Jacobi rotations. M: (n, n),
// symmetric within tol. eigvecs holds eigenvectors as columns.
void sym_eig(const Tensor& M, Tensor& eigvals, Tensor& eigvecs, double sym_tol = 1e-8);

// Principal square root of a symmetric PSD matrix; negative eigenvalues are
// clamped at zero. Throws if M is asymmetric beyond sym_tol.
Tensor psd_sqrt(const Tensor& M, double sym_tol = 1e-8);

double trace(const Tensor& M);

}  // namespace occflow
