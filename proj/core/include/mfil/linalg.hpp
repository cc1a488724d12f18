#pragma once

#include <cstddef>
#include <vector>

#include "mfil/tensor.hpp"

// Small dense f64 matrix routines on rank-2 tensors. Sized for desk-scale
// operator matrices (a few hundred rows at most).
namespace mfil::linalg {

using Matrix = Tensor<double>;

Matrix identity(std::size_t n);
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
Matrix scaled(const Matrix& a, double s);
Matrix plus(const Matrix& a, const Matrix& b);
Matrix minus(const Matrix& a, const Matrix& b);
std::vector<double> matvec(const Matrix& a, const std::vector<double>& x);
double max_abs(const Matrix& a);
double max_abs_diff(const Matrix& a, const Matrix& b);

/// Matrix exponential by scaling and squaring with a degree-18 Taylor core.
Matrix expm(const Matrix& a);

/// Solves a X = b by partial-pivot LU. Throws NumericError when a is singular
/// (pivot magnitude below `singular_tol` times the largest entry).
Matrix solve(const Matrix& a, const Matrix& b, double singular_tol = 1e-14);

struct EigenResult {
  std::vector<double> values;  // ascending
  Matrix vectors;              // column k pairs with values[k]
  std::size_t sweeps = 0;
};

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix. Iterates until the
/// off-diagonal Frobenius norm is at most `off_tol` times max(1, ||a||_F).
EigenResult jacobi_eigen(const Matrix& a, double off_tol = 1e-12, std::size_t max_sweeps = 100);

}  // namespace mfil::linalg
