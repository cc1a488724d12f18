#pragma once

#include <string>
#include <vector>

#include "mfil/linalg.hpp"
#include "mfil/mfil_scan.hpp"

namespace mfil::theory {

using linalg::Matrix;

/// Largest grid side for which explicit operator matrices are built.
inline constexpr std::size_t kMaxGrid = 16;

struct LinearOperatorMatrix {
  Matrix matrix;  // [M, D]
  bool permutation = false;
};

/// Row j selects input element order[j]: (P x)_j = x_{order[j]}.
LinearOperatorMatrix permutation_matrix(const Traversal& order);

/// True iff every row and column has exactly one entry equal to 1 and the rest are 0.
bool is_permutation(const Matrix& m);

/// Single-channel convolution (cross-correlation, stride 1) written as a dense
/// [H'W', HW] matrix acting on the row-major vectorized grid.
LinearOperatorMatrix conv_as_matrix(const Tensor<double>& kernel, std::size_t h, std::size_t w, std::size_t padding);

struct EmpiricalMoments {
  std::vector<double> mean;
  Matrix covariance;  // biased (1/n)
  std::size_t sample_count = 0;
};

/// Two-pass mean and covariance. Throws NumericError for fewer than two samples
/// and ShapeError for ragged samples.
EmpiricalMoments empirical_moments(const std::vector<std::vector<double>>& samples);

/// (1/n) sum_k (a_k - mean a)(b_k - mean b)^T.
Matrix cross_covariance(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b);

struct IdentityReport {
  std::string identity;
  double max_abs_error = 0.0;
  std::size_t samples = 0;
  std::size_t dim = 0;
};

/// Measures max |Cov(P_i x, P_j x) - P_i S P_j^T| where S is the sample covariance of x.
/// Throws ShapeError if either operator is not a permutation.
IdentityReport verify_permutation_identity(const LinearOperatorMatrix& pi, const LinearOperatorMatrix& pj,
                                           const EmpiricalMoments& moments,
                                           const std::vector<std::vector<double>>& samples);

/// Same measurement for arbitrary linear operators F_i, F_j.
IdentityReport verify_filter_identity(const LinearOperatorMatrix& fi, const LinearOperatorMatrix& fj,
                                      const EmpiricalMoments& moments,
                                      const std::vector<std::vector<double>>& samples);

struct SpectrumReport {
  std::vector<double> sigma;     // ascending eigenvalues of S
  std::vector<double> permuted;  // of P S P^T
  std::vector<double> filtered;  // of F S F^T
  double permutation_distance = 0.0;  // max |sigma - permuted|
  double filter_distance = 0.0;       // max |sigma - filtered|
};

/// Throws NumericError when sigma is not symmetric to 1e-10, or when F is not square.
SpectrumReport spectrum_report(const Matrix& sigma, const LinearOperatorMatrix& p, const LinearOperatorMatrix& f);

/// Max absolute difference of two equally long sorted sequences.
double spectral_distance(const std::vector<double>& a, const std::vector<double>& b);

std::string format(const IdentityReport& r);
std::string format(const SpectrumReport& r);

}  // namespace mfil::theory
