#include "mfil/theory.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace mfil::theory {

LinearOperatorMatrix permutation_matrix(const Traversal& order) {
  const std::size_t n = order.size();
  if (n == 0) throw ShapeError("permutation_matrix: empty order");
  std::vector<bool> hit(n, false);
  Matrix p({n, n});
  for (std::size_t j = 0; j < n; ++j) {
    if (order[j] >= n || hit[order[j]]) throw ShapeError("permutation_matrix: order is not a permutation");
    hit[order[j]] = true;
    p[j * n + order[j]] = 1.0;
  }
  return {std::move(p), true};
}

bool is_permutation(const Matrix& m) {
  if (m.rank() != 2 || m.dim(0) != m.dim(1)) return false;
  const std::size_t n = m.dim(0);
  std::vector<std::size_t> col(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t ones = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const double v = m[i * n + j];
      if (v == 1.0) {
        ++ones;
        ++col[j];
      } else if (v != 0.0) {
        return false;
      }
    }
    if (ones != 1) return false;
  }
  return std::all_of(col.begin(), col.end(), [](std::size_t c) { return c == 1; });
}

LinearOperatorMatrix conv_as_matrix(const Tensor<double>& kernel, std::size_t h, std::size_t w, std::size_t padding) {
  if (kernel.rank() != 2) throw ShapeError("conv_as_matrix: kernel must be [kH,kW], got " + shape_str(kernel.shape()));
  if (h > kMaxGrid || w > kMaxGrid) {
    throw ShapeError("conv_as_matrix: grid " + std::to_string(h) + "x" + std::to_string(w) + " exceeds " +
                     std::to_string(kMaxGrid) + "x" + std::to_string(kMaxGrid));
  }
  const std::size_t kh = kernel.dim(0), kw = kernel.dim(1);
  if (kh > h + 2 * padding || kw > w + 2 * padding) throw ShapeError("conv_as_matrix: kernel larger than padded grid");
  const std::size_t ho = h + 2 * padding - kh + 1, wo = w + 2 * padding - kw + 1;
  Matrix m({ho * wo, h * w});
  for (std::size_t oy = 0; oy < ho; ++oy) {
    for (std::size_t ox = 0; ox < wo; ++ox) {
      for (std::size_t i = 0; i < kh; ++i) {
        for (std::size_t j = 0; j < kw; ++j) {
          const long y = static_cast<long>(oy + i) - static_cast<long>(padding);
          const long x = static_cast<long>(ox + j) - static_cast<long>(padding);
          if (y < 0 || x < 0 || y >= static_cast<long>(h) || x >= static_cast<long>(w)) continue;
          m[(oy * wo + ox) * h * w + static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] += kernel[i * kw + j];
        }
      }
    }
  }
  return {std::move(m), false};
}

namespace {

std::vector<double> column_mean(const std::vector<std::vector<double>>& s) {
  std::vector<double> mu(s[0].size(), 0.0);
  for (const auto& x : s) {
    if (x.size() != mu.size()) throw ShapeError("samples have inconsistent lengths");
    for (std::size_t i = 0; i < mu.size(); ++i) mu[i] += x[i];
  }
  for (double& v : mu) v /= static_cast<double>(s.size());
  return mu;
}

std::vector<std::vector<double>> apply_all(const Matrix& m, const std::vector<std::vector<double>>& samples) {
  std::vector<std::vector<double>> out;
  out.reserve(samples.size());
  for (const auto& x : samples) out.push_back(linalg::matvec(m, x));
  return out;
}

IdentityReport check_identity(const std::string& name, const Matrix& a, const Matrix& b, const EmpiricalMoments& mom,
                              const std::vector<std::vector<double>>& samples) {
  const std::size_t d = mom.covariance.dim(0);
  if (a.dim(1) != d || b.dim(1) != d) throw ShapeError(name + ": operator width does not match sample dimension");
  const Matrix empirical = cross_covariance(apply_all(a, samples), apply_all(b, samples));
  const Matrix predicted = linalg::matmul(linalg::matmul(a, mom.covariance), linalg::transpose(b));
  return {name, linalg::max_abs_diff(empirical, predicted), samples.size(), d};
}

}  // namespace

EmpiricalMoments empirical_moments(const std::vector<std::vector<double>>& samples) {
  if (samples.size() < 2) throw NumericError("empirical_moments: need at least 2 samples, got " + std::to_string(samples.size()));
  EmpiricalMoments m;
  m.mean = column_mean(samples);
  m.covariance = cross_covariance(samples, samples);
  m.sample_count = samples.size();
  return m;
}

Matrix cross_covariance(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  if (a.size() != b.size() || a.empty()) throw ShapeError("cross_covariance: sample counts differ or are zero");
  const std::vector<double> ma = column_mean(a), mb = column_mean(b);
  const std::size_t p = ma.size(), q = mb.size();
  Matrix c({p, q});
  std::vector<double> da(p), db(q);
  for (std::size_t k = 0; k < a.size(); ++k) {
    for (std::size_t i = 0; i < p; ++i) da[i] = a[k][i] - ma[i];
    for (std::size_t j = 0; j < q; ++j) db[j] = b[k][j] - mb[j];
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < q; ++j) c[i * q + j] += da[i] * db[j];
  }
  const double n = static_cast<double>(a.size());
  for (double& v : c.data()) v /= n;
  return c;
}

IdentityReport verify_permutation_identity(const LinearOperatorMatrix& pi, const LinearOperatorMatrix& pj,
                                           const EmpiricalMoments& moments,
                                           const std::vector<std::vector<double>>& samples) {
  if (!is_permutation(pi.matrix) || !is_permutation(pj.matrix)) {
    throw ShapeError("verify_permutation_identity: operators must be permutation matrices");
  }
  return check_identity("permutation", pi.matrix, pj.matrix, moments, samples);
}

IdentityReport verify_filter_identity(const LinearOperatorMatrix& fi, const LinearOperatorMatrix& fj,
                                      const EmpiricalMoments& moments,
                                      const std::vector<std::vector<double>>& samples) {
  return check_identity("filter", fi.matrix, fj.matrix, moments, samples);
}

double spectral_distance(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeError("spectral_distance: length mismatch");
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

SpectrumReport spectrum_report(const Matrix& sigma, const LinearOperatorMatrix& p, const LinearOperatorMatrix& f) {
  if (sigma.rank() != 2 || sigma.dim(0) != sigma.dim(1)) throw NumericError("spectrum_report: sigma must be square");
  if (linalg::max_abs_diff(sigma, linalg::transpose(sigma)) > 1e-10) {
    throw NumericError("spectrum_report: sigma is not symmetric");
  }
  const std::size_t n = sigma.dim(0);
  if (p.matrix.shape() != Shape{n, n} || f.matrix.shape() != Shape{n, n}) {
    throw NumericError("spectrum_report: operators must be square and match sigma");
  }
  auto sym = [](Matrix m) {
    const Matrix t = linalg::transpose(m);
    for (std::size_t i = 0; i < m.numel(); ++i) m[i] = 0.5 * (m[i] + t[i]);
    return m;
  };
  auto conj = [&](const Matrix& a) { return sym(linalg::matmul(linalg::matmul(a, sigma), linalg::transpose(a))); };
  SpectrumReport r;
  r.sigma = linalg::jacobi_eigen(sigma).values;
  r.permuted = linalg::jacobi_eigen(conj(p.matrix)).values;
  r.filtered = linalg::jacobi_eigen(conj(f.matrix)).values;
  r.permutation_distance = spectral_distance(r.sigma, r.permuted);
  r.filter_distance = spectral_distance(r.sigma, r.filtered);
  return r;
}

std::string format(const IdentityReport& r) {
  std::ostringstream o;
  o.precision(6);
  o << "identity: " << r.identity << "\n"
    << "dim: " << r.dim << "\n"
    << "samples: " << r.samples << "\n"
    << "max_abs_error: " << std::scientific << r.max_abs_error << "\n";
  return o.str();
}

std::string format(const SpectrumReport& r) {
  std::ostringstream o;
  o.precision(6);
  o << std::scientific;
  o << "dim: " << r.sigma.size() << "\n"
    << "sigma_min_eigenvalue: " << r.sigma.front() << "\n"
    << "sigma_max_eigenvalue: " << r.sigma.back() << "\n"
    << "permutation_spectral_distance: " << r.permutation_distance << "\n"
    << "filter_spectral_distance: " << r.filter_distance << "\n";
  return o.str();
}

}  // namespace mfil::theory
