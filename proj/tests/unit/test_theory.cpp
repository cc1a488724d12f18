#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mfil/error.hpp"
#include "mfil/random.hpp"
#include "mfil/theory.hpp"
#include "mfil/verify/oracles.hpp"

using namespace mfil;
using namespace mfil::theory;
using linalg::Matrix;

namespace {

std::vector<std::vector<double>> random_samples(Rng& rng, std::size_t n, std::size_t d) {
  std::vector<std::vector<double>> out(n, std::vector<double>(d));
  // Correlated samples: a random mixing of white noise, so Sigma is far from diagonal.
  const auto mix = rng.normal_tensor<double>({d, d});
  for (auto& s : out) {
    std::vector<double> z(d);
    for (double& v : z) v = rng.normal();
    for (std::size_t i = 0; i < d; ++i) {
      s[i] = 0.5;
      for (std::size_t j = 0; j < d; ++j) s[i] += mix[i * d + j] * z[j];
    }
  }
  return out;
}

std::vector<double> conv_reference(const Tensor<double>& kernel, const std::vector<double>& x, std::size_t h,
                                   std::size_t w, std::size_t pad) {
  Tensor<double> img({1, 1, h, w});
  std::copy(x.begin(), x.end(), img.data().begin());
  const auto k = kernel.reshape({1, 1, kernel.dim(0), kernel.dim(1)});
  const auto y = oracle::conv2d(img, k, nullptr, 1, pad);
  return {y.data().begin(), y.data().end()};
}

double rel_vec(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(a[i] - b[i]));
    den = std::max(den, std::abs(b[i]));
  }
  return den == 0 ? num : num / den;
}

Traversal random_order(Rng& rng, std::size_t n) {
  Traversal t(n);
  std::iota(t.begin(), t.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(t[i - 1], t[rng.index(i)]);
  return t;
}

Matrix random_psd(Rng& rng, std::size_t d) {
  const auto a = rng.normal_tensor<double>({d, d});
  return linalg::scaled(linalg::matmul(a, linalg::transpose(a)), 1.0 / double(d));
}

}  // namespace

TEST_CASE("empirical moments of simple distributions") {
  const std::vector<double> v{1.0, -2.0, 0.5};
  std::vector<double> nv(v.size());
  std::transform(v.begin(), v.end(), nv.begin(), [](double x) { return -x; });
  const auto m = empirical_moments({v, nv});
  CHECK(m.sample_count == 2);
  for (double mu : m.mean) CHECK(mu == 0.0);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) CHECK(m.covariance[i * 3 + j] == doctest::Approx(v[i] * v[j]).epsilon(1e-15));

  const auto same = empirical_moments({v, v, v, v});
  for (double c : same.covariance.data()) CHECK(c == 0.0);
  CHECK(same.mean == v);

  CHECK_THROWS_AS(empirical_moments({v}), NumericError);
  CHECK_THROWS_AS(empirical_moments({}), NumericError);
  CHECK_THROWS_AS(empirical_moments({v, {1.0, 2.0}}), ShapeError);
}

TEST_CASE("empirical moments agree with a streaming oracle") {
  Rng rng(1);
  const auto xs = random_samples(rng, 100, 12);
  const auto m = empirical_moments(xs);
  // Welford's update is a different summation order from the two-pass form.
  std::vector<double> mean(12, 0.0);
  std::vector<double> m2(144, 0.0);
  for (std::size_t k = 0; k < xs.size(); ++k) {
    std::vector<double> before = mean;
    for (std::size_t i = 0; i < 12; ++i) mean[i] += (xs[k][i] - mean[i]) / double(k + 1);
    for (std::size_t i = 0; i < 12; ++i)
      for (std::size_t j = 0; j < 12; ++j) m2[i * 12 + j] += (xs[k][i] - before[i]) * (xs[k][j] - mean[j]);
  }
  for (double& c : m2) c /= double(xs.size());
  CHECK(rel_vec(m.mean, mean) <= 1e-10);
  CHECK(rel_vec({m.covariance.data().begin(), m.covariance.data().end()}, m2) <= 1e-10);
  CHECK(linalg::max_abs_diff(m.covariance, linalg::transpose(m.covariance)) <= 1e-10);
  CHECK(linalg::jacobi_eigen(m.covariance).values.front() >= -1e-8);
  CHECK(linalg::max_abs_diff(cross_covariance(xs, xs), m.covariance) <= 1e-12);
}

TEST_CASE("conv_as_matrix special kernels") {
  Tensor<double> id({3, 3});
  id[4] = 1.0;
  CHECK(conv_as_matrix(id, 5, 4, 1).matrix == linalg::identity(20));
  Tensor<double> c({1, 1});
  c[0] = 2.5;
  CHECK(conv_as_matrix(c, 3, 3, 0).matrix == linalg::scaled(linalg::identity(9), 2.5));
  // Unpadded: output grid shrinks to (H-2) x (W-2).
  CHECK(conv_as_matrix(sobel_x_kernel(), 6, 5, 0).matrix.shape() == Shape{12, 30});
  CHECK_THROWS(conv_as_matrix(id, 17, 4, 1));
  CHECK_THROWS(conv_as_matrix(id, 4, 17, 1));
  CHECK_NOTHROW(conv_as_matrix(id, 16, 16, 1));
}

TEST_CASE("Sobel operator columns are impulse responses") {
  for (const auto& k : {sobel_x_kernel(), sobel_y_kernel()}) {
    const auto f = conv_as_matrix(k, 4, 4, 1).matrix;
    REQUIRE(f.shape() == Shape{16, 16});
    for (std::size_t col = 0; col < 16; ++col) {
      std::vector<double> e(16, 0.0);
      e[col] = 1.0;
      const auto resp = conv_reference(k, e, 4, 4, 1);
      for (std::size_t r = 0; r < 16; ++r) CHECK(f[r * 16 + col] == resp[r]);
    }
  }
}

TEST_CASE("conv_as_matrix agrees with conv2d on random inputs") {
  Rng rng(2);
  struct Case {
    Tensor<double> k;
    std::size_t h, w, pad;
  };
  std::vector<Case> cases{{sobel_x_kernel(), 6, 6, 1}, {sobel_y_kernel(), 5, 7, 1},
                          {rng.normal_tensor<double>({3, 3}), 8, 4, 1}, {rng.normal_tensor<double>({3, 3}), 6, 6, 0},
                          {rng.normal_tensor<double>({5, 5}), 9, 9, 2}, {rng.normal_tensor<double>({1, 1}), 4, 4, 0}};
  for (const auto& cs : cases) {
    const auto f = conv_as_matrix(cs.k, cs.h, cs.w, cs.pad).matrix;
    double worst = 0;
    for (int t = 0; t < 50; ++t) {
      std::vector<double> x(cs.h * cs.w);
      for (double& v : x) v = rng.normal();
      worst = std::max(worst, rel_vec(linalg::matvec(f, x), conv_reference(cs.k, x, cs.h, cs.w, cs.pad)));
    }
    CHECK(worst <= 1e-10);
  }
}

TEST_CASE("permutation matrices are orthogonal") {
  Rng rng(3);
  for (const auto& t : {row_major_traversal(6, 6), column_major_traversal(6, 6), reversed(column_major_traversal(6, 6)),
                        random_order(rng, 36)}) {
    const auto p = permutation_matrix(t);
    CHECK(p.permutation);
    CHECK(is_permutation(p.matrix));
    CHECK(linalg::max_abs_diff(linalg::matmul(linalg::transpose(p.matrix), p.matrix), linalg::identity(36)) <= 1e-12);
    std::vector<double> x(36);
    for (double& v : x) v = rng.normal();
    const auto px = linalg::matvec(p.matrix, x);
    for (std::size_t j = 0; j < 36; ++j) CHECK(px[j] == x[t[j]]);
  }
  CHECK_FALSE(is_permutation(linalg::scaled(linalg::identity(3), 2.0)));
  CHECK_FALSE(is_permutation(conv_as_matrix(sobel_x_kernel(), 3, 3, 1).matrix));
}

TEST_CASE("permutation identity cases") {
  Rng rng(4);
  const auto xs = random_samples(rng, 50, 9);
  const auto m = empirical_moments(xs);
  const auto id = permutation_matrix(row_major_traversal(3, 3));
  CHECK(verify_permutation_identity(id, id, m, xs).max_abs_error <= 1e-15);

  // Two-element swap: Sigma = [[a, b], [b, c]] becomes [[c, b], [b, a]].
  const auto pairs = random_samples(rng, 40, 2);
  const auto pm = empirical_moments(pairs);
  const auto swap = permutation_matrix({1, 0});
  std::vector<std::vector<double>> swapped;
  for (const auto& s : pairs) swapped.push_back({s[1], s[0]});
  const auto sw = cross_covariance(swapped, swapped);
  const double a = pm.covariance[0], b = pm.covariance[1], c = pm.covariance[3];
  CHECK(sw[0] == doctest::Approx(c).epsilon(1e-14));
  CHECK(sw[1] == doctest::Approx(b).epsilon(1e-14));
  CHECK(sw[2] == doctest::Approx(b).epsilon(1e-14));
  CHECK(sw[3] == doctest::Approx(a).epsilon(1e-14));
  const auto r = verify_permutation_identity(swap, swap, pm, pairs);
  CHECK(r.max_abs_error <= 1e-14);
  CHECK(r.samples == 40);
  CHECK(r.dim == 2);

  CHECK_THROWS_AS(verify_permutation_identity(conv_as_matrix(sobel_x_kernel(), 3, 3, 1), id, m, xs), ShapeError);
}

TEST_CASE("permutation identity on random 6x6 traversals") {
  Rng rng(5);
  const auto xs = random_samples(rng, 200, 36);
  const auto m = empirical_moments(xs);
  for (int t = 0; t < 10; ++t) {
    const auto r = verify_permutation_identity(permutation_matrix(random_order(rng, 36)),
                                               permutation_matrix(random_order(rng, 36)), m, xs);
    CHECK(r.max_abs_error <= 1e-10);
  }
}

TEST_CASE("filter identity cases") {
  Rng rng(6);
  const auto xs = random_samples(rng, 200, 36);
  const auto m = empirical_moments(xs);
  const LinearOperatorMatrix ci{linalg::scaled(linalg::identity(36), -1.75), false};
  const LinearOperatorMatrix eye{linalg::identity(36), false};
  CHECK(verify_filter_identity(ci, ci, m, xs).max_abs_error <= 1e-10);

  // c I on both sides scales the covariance by c^2.
  std::vector<std::vector<double>> scaled = xs;
  for (auto& s : scaled)
    for (double& v : s) v *= -1.75;
  CHECK(linalg::max_abs_diff(cross_covariance(scaled, scaled), linalg::scaled(m.covariance, 1.75 * 1.75)) <= 1e-10);

  const auto fx = conv_as_matrix(sobel_x_kernel(), 6, 6, 1);
  const auto fy = conv_as_matrix(sobel_y_kernel(), 6, 6, 1);
  CHECK(verify_filter_identity(fx, eye, m, xs).max_abs_error <= 1e-10);
  std::vector<std::vector<double>> filtered;
  for (const auto& s : xs) filtered.push_back(linalg::matvec(fx.matrix, s));
  CHECK(linalg::max_abs_diff(cross_covariance(filtered, xs), linalg::matmul(fx.matrix, m.covariance)) <= 1e-10);

  CHECK(verify_filter_identity(fx, fy, m, xs).max_abs_error <= 1e-10);
  CHECK(verify_filter_identity(fy, fx, m, xs).max_abs_error <= 1e-10);
  const auto rk = conv_as_matrix(rng.normal_tensor<double>({3, 3}), 6, 6, 1);
  CHECK(verify_filter_identity(rk, fx, m, xs).max_abs_error <= 1e-10);
  CHECK_FALSE(format(verify_filter_identity(fx, fy, m, xs)).empty());
}

TEST_CASE("spectrum under permutation and filtering") {
  Rng rng(7);
  const auto eye = linalg::identity(16);
  const auto p = permutation_matrix(random_order(rng, 16));
  const auto f = conv_as_matrix(sobel_x_kernel(), 4, 4, 1);

  const auto flat = spectrum_report(eye, p, f);
  for (double s : flat.sigma) CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  for (double s : flat.permuted) CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  // F F^T and F^T F share their spectrum for square F; the latter is an independent computation.
  const auto ftf = linalg::jacobi_eigen(linalg::matmul(linalg::transpose(f.matrix), f.matrix)).values;
  CHECK(spectral_distance(flat.filtered, ftf) <= 1e-8);
  double fro = 0;
  for (double v : f.matrix.data()) fro += v * v;
  CHECK(std::accumulate(flat.filtered.begin(), flat.filtered.end(), 0.0) == doctest::Approx(fro).epsilon(1e-10));
  CHECK(flat.filter_distance > 1e-3);

  for (int t = 0; t < 5; ++t) {
    const auto sigma = random_psd(rng, 16);
    const auto r = spectrum_report(sigma, permutation_matrix(random_order(rng, 16)), f);
    CHECK(r.permutation_distance <= 1e-8);
    CHECK(r.filter_distance > 1e-3);
    CHECK(std::is_sorted(r.sigma.begin(), r.sigma.end()));
    CHECK(std::is_sorted(r.filtered.begin(), r.filtered.end()));
  }
  CHECK(spectral_distance({1.0, 2.0}, {1.5, 2.0}) == 0.5);
}

TEST_CASE("spectrum_report input errors") {
  Rng rng(8);
  auto sigma = random_psd(rng, 9);
  const auto p = permutation_matrix(row_major_traversal(3, 3));
  const auto f = conv_as_matrix(sobel_y_kernel(), 3, 3, 1);
  sigma[1] += 1e-6;
  CHECK_THROWS_AS(spectrum_report(sigma, p, f), NumericError);
  CHECK_THROWS_AS(spectrum_report(random_psd(rng, 9), p, conv_as_matrix(sobel_y_kernel(), 3, 3, 0)), NumericError);
  CHECK_NOTHROW(spectrum_report(random_psd(rng, 9), p, f));
  CHECK_FALSE(format(spectrum_report(random_psd(rng, 9), p, f)).empty());
}
