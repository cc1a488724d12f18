#include "mfil/verify/oracles.hpp"

#include <algorithm>
#include <cmath>

namespace mfil::oracle {

Tensor<double> conv2d(const Tensor<double>& x, const Tensor<double>& k, const Tensor<double>* bias,
                      std::size_t stride, std::size_t pad) {
  const std::size_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t co = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const std::size_t ho = (h + 2 * pad - kh) / stride + 1, wo = (w + 2 * pad - kw) / stride + 1;
  Tensor<double> y({n, co, ho, wo});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          double acc = bias ? (*bias)[o] : 0.0;
          for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const long iy = static_cast<long>(oy * stride + i) - static_cast<long>(pad);
                const long ix = static_cast<long>(ox * stride + j) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
                acc += x.at({b, c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)}) * k.at({o, c, i, j});
              }
          y.at({b, o, oy, ox}) = acc;
        }
  return y;
}

Tensor<double> depthwise_conv2d(const Tensor<double>& x, const Tensor<double>& k, const Tensor<double>* bias,
                                std::size_t stride, std::size_t pad) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t kh = k.dim(2), kw = k.dim(3);
  const std::size_t ho = (h + 2 * pad - kh) / stride + 1, wo = (w + 2 * pad - kw) / stride + 1;
  Tensor<double> y({n, c, ho, wo});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t q = 0; q < c; ++q)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          double acc = bias ? (*bias)[q] : 0.0;
          for (std::size_t i = 0; i < kh; ++i)
            for (std::size_t j = 0; j < kw; ++j) {
              const long iy = static_cast<long>(oy * stride + i) - static_cast<long>(pad);
              const long ix = static_cast<long>(ox * stride + j) - static_cast<long>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
              acc += x.at({b, q, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)}) * k.at({q, 0, i, j});
            }
          y.at({b, q, oy, ox}) = acc;
        }
  return y;
}

Tensor<double> linear(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>* bias) {
  const std::size_t din = w.dim(1), dout = w.dim(0), rows = x.numel() / din;
  Shape s = x.shape();
  s.back() = dout;
  Tensor<double> y(s);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < dout; ++o) {
      double acc = bias ? (*bias)[o] : 0.0;
      for (std::size_t i = 0; i < din; ++i) acc += x[r * din + i] * w.at({o, i});
      y[r * dout + o] = acc;
    }
  return y;
}

Tensor<double> layer_norm(const Tensor<double>& x, const Tensor<double>& gamma, const Tensor<double>& beta,
                          double eps) {
  const std::size_t c = x.shape().back(), rows = x.numel() / c;
  Tensor<double> y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double mean = 0.0;
    for (std::size_t i = 0; i < c; ++i) mean += x[r * c + i];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t i = 0; i < c; ++i) var += (x[r * c + i] - mean) * (x[r * c + i] - mean);
    var /= static_cast<double>(c);
    for (std::size_t i = 0; i < c; ++i) y[r * c + i] = (x[r * c + i] - mean) / std::sqrt(var + eps) * gamma[i] + beta[i];
  }
  return y;
}

Tensor<double> selective_scan(const Tensor<double>& x, const Tensor<double>& delta, const Tensor<double>& a_log,
                              const Tensor<double>& b, const Tensor<double>& c, const Tensor<double>* d,
                              bool exact_zoh_b, std::size_t segment_length) {
  const std::size_t bs = x.dim(0), len = x.dim(1), ch = x.dim(2), n = a_log.dim(1);
  Tensor<double> y(x.shape());
  for (std::size_t bi = 0; bi < bs; ++bi)
    for (std::size_t q = 0; q < ch; ++q) {
      std::vector<double> h(n, 0.0);
      for (std::size_t t = 0; t < len; ++t) {
        if (segment_length && t % segment_length == 0) std::fill(h.begin(), h.end(), 0.0);
        const double dt = delta.at({bi, t, q}), u = x.at({bi, t, q});
        double out = d ? (*d)[q] * u : 0.0;
        for (std::size_t s = 0; s < n; ++s) {
          const double a = -std::exp(a_log.at({q, s}));
          const double bbar = exact_zoh_b ? (std::exp(dt * a) - 1.0) / a * b.at({bi, t, s}) : dt * b.at({bi, t, s});
          h[s] = std::exp(dt * a) * h[s] + bbar * u;
          out += c.at({bi, t, s}) * h[s];
        }
        y.at({bi, t, q}) = out;
      }
    }
  return y;
}

double rel_error(const std::vector<double>& a, const std::vector<double>& b, double floor) {
  if (a.size() != b.size()) return INFINITY;
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max(scale, std::abs(b[i]));
  }
  return diff / std::max(scale, floor);
}

double rel_error(const Tensor<double>& a, const Tensor<double>& b, double floor) {
  if (a.shape() != b.shape()) return INFINITY;
  return rel_error(a.storage(), b.storage(), floor);
}

}  // namespace mfil::oracle
