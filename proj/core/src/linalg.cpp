#include "mfil/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mfil::linalg {

namespace {
void require_square(const Matrix& a, const char* op) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) {
    throw ShapeError(std::string(op) + ": square matrix required, got " + shape_str(a.shape()));
  }
}
}  // namespace

Matrix identity(std::size_t n) {
  Matrix m({n, n});
  for (std::size_t i = 0; i < n; ++i) m[i * n + i] = 1.0;
  return m;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  Matrix c({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      for (std::size_t j = 0; j < m; ++j) c[i * m + j] += av * b[p * m + j];
    }
  }
  return c;
}

Matrix transpose(const Matrix& a) {
  if (a.rank() != 2) throw ShapeError("transpose: rank-2 required");
  const std::size_t n = a.dim(0), m = a.dim(1);
  Matrix t({m, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) t[j * n + i] = a[i * m + j];
  return t;
}

Matrix scaled(const Matrix& a, double s) {
  Matrix r = a;
  for (auto& v : r.data()) v *= s;
  return r;
}

Matrix plus(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "plus");
  Matrix r = a;
  for (std::size_t i = 0; i < r.numel(); ++i) r[i] += b[i];
  return r;
}

Matrix minus(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "minus");
  Matrix r = a;
  for (std::size_t i = 0; i < r.numel(); ++i) r[i] -= b[i];
  return r;
}

std::vector<double> matvec(const Matrix& a, const std::vector<double>& x) {
  if (a.rank() != 2 || a.dim(1) != x.size()) throw ShapeError("matvec: extent mismatch");
  const std::size_t n = a.dim(0), m = a.dim(1);
  std::vector<double> y(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < m; ++j) acc += a[i * m + j] * x[j];
    y[i] = acc;
  }
  return y;
}

double max_abs(const Matrix& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Matrix expm(const Matrix& a) {
  require_square(a, "expm");
  const std::size_t n = a.dim(0);
  double norm = 0.0;  // infinity norm
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < n; ++j) row += std::abs(a[i * n + j]);
    norm = std::max(norm, row);
  }
  int squarings = 0;
  if (norm > 0.5) squarings = static_cast<int>(std::ceil(std::log2(norm / 0.5)));
  const Matrix s = scaled(a, std::ldexp(1.0, -squarings));
  Matrix result = identity(n);
  Matrix term = identity(n);
  for (int k = 1; k <= 18; ++k) {
    term = scaled(matmul(term, s), 1.0 / k);
    result = plus(result, term);
  }
  for (int i = 0; i < squarings; ++i) result = matmul(result, result);
  return result;
}

Matrix solve(const Matrix& a, const Matrix& b, double singular_tol) {
  require_square(a, "solve");
  const std::size_t n = a.dim(0);
  if (b.rank() != 2 || b.dim(0) != n) throw ShapeError("solve: rhs " + shape_str(b.shape()));
  const std::size_t m = b.dim(1);
  Matrix lu = a;
  Matrix x = b;
  const double scale = std::max(max_abs(a), 1e-300);
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r) {
      if (std::abs(lu[r * n + col]) > std::abs(lu[piv * n + col])) piv = r;
    }
    if (std::abs(lu[piv * n + col]) <= singular_tol * scale) {
      throw NumericError("solve: matrix is singular (pivot " + std::to_string(col) + ")");
    }
    if (piv != col) {
      for (std::size_t j = 0; j < n; ++j) std::swap(lu[piv * n + j], lu[col * n + j]);
      for (std::size_t j = 0; j < m; ++j) std::swap(x[piv * m + j], x[col * m + j]);
    }
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = lu[r * n + col] / lu[col * n + col];
      if (f == 0.0) continue;
      for (std::size_t j = col; j < n; ++j) lu[r * n + j] -= f * lu[col * n + j];
      for (std::size_t j = 0; j < m; ++j) x[r * m + j] -= f * x[col * m + j];
    }
  }
  for (std::size_t col = n; col-- > 0;) {
    for (std::size_t j = 0; j < m; ++j) {
      double acc = x[col * m + j];
      for (std::size_t k = col + 1; k < n; ++k) acc -= lu[col * n + k] * x[k * m + j];
      x[col * m + j] = acc / lu[col * n + col];
    }
  }
  return x;
}

EigenResult jacobi_eigen(const Matrix& a_in, double off_tol, std::size_t max_sweeps) {
  require_square(a_in, "jacobi_eigen");
  const std::size_t n = a_in.dim(0);
  Matrix a = a_in;
  Matrix v = identity(n);
  double fro = 0.0;
  for (double x : a.data()) fro += x * x;
  const double target = off_tol * std::max(1.0, std::sqrt(fro));
  auto off_norm = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) s += a[i * n + j] * a[i * n + j];
    return std::sqrt(s);
  };
  EigenResult res;
  while (off_norm() > target) {
    if (res.sweeps++ >= max_sweeps) throw NumericError("jacobi_eigen: no convergence");
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (apq == 0.0) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k * n + p], vkq = v[k * n + q];
          v[k * n + p] = c * vkp - s * vkq;
          v[k * n + q] = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return a[i * n + i] < a[j * n + j]; });
  res.values.resize(n);
  res.vectors = Matrix({n, n});
  for (std::size_t k = 0; k < n; ++k) {
    res.values[k] = a[order[k] * n + order[k]];
    for (std::size_t r = 0; r < n; ++r) res.vectors[r * n + k] = v[r * n + order[k]];
  }
  return res;
}

}  // namespace mfil::linalg
