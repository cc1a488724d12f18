#include "mfil/ssm.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "mfil/ops.hpp"

namespace mfil::ssm {

ZohPair discretize_zoh(const Matrix& a, const Matrix& b, double delta) {
  if (!(delta > 0.0)) throw NumericError("discretize_zoh: delta must be positive");
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) throw ShapeError("discretize_zoh: A must be square");
  if (b.rank() != 2 || b.dim(0) != a.dim(0)) throw ShapeError("discretize_zoh: B must be [N,k]");
  const std::size_t n = a.dim(0);
  const Matrix da = linalg::scaled(a, delta);
  // (dA)^-1 (exp(dA) - I) cancels catastrophically for small delta, so it is read off the
  // top-right block of exp([[dA, I], [0, 0]]) instead. The solve only enforces invertibility.
  linalg::solve(da, linalg::identity(n));
  Matrix aug({2 * n, 2 * n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) aug[i * 2 * n + j] = da[i * n + j];
    aug[i * 2 * n + n + i] = 1.0;
  }
  const Matrix e = linalg::expm(aug);
  Matrix phi({n, n});
  ZohPair out;
  out.a_bar = Matrix({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      out.a_bar[i * n + j] = e[i * 2 * n + j];
      phi[i * n + j] = e[i * 2 * n + n + j];
    }
  }
  out.b_bar = linalg::matmul(phi, linalg::scaled(b, delta));
  return out;
}

DiagonalZoh discretize_zoh_diagonal(std::span<const double> a, std::span<const double> b, double delta) {
  if (!(delta > 0.0)) throw NumericError("discretize_zoh_diagonal: delta must be positive");
  if (a.size() != b.size()) throw ShapeError("discretize_zoh_diagonal: A and B lengths differ");
  DiagonalZoh out;
  out.a_bar.resize(a.size());
  out.b_bar.resize(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = delta * a[i];
    out.a_bar[i] = std::exp(da);
    out.b_bar[i] = std::abs(da) < kZohLimitThreshold ? delta * b[i] : std::expm1(da) / da * delta * b[i];
  }
  return out;
}

std::vector<DiagonalZoh> discretize_zoh_diagonal(std::span<const double> a, std::span<const double> b,
                                                 std::span<const double> deltas) {
  std::vector<DiagonalZoh> out;
  out.reserve(deltas.size());
  for (double d : deltas) out.push_back(discretize_zoh_diagonal(a, b, d));
  return out;
}

std::vector<double> scan_recurrent(const Matrix& a_bar, const Matrix& b_bar, const Matrix& c,
                                   std::span<const double> x, std::span<const double> h0) {
  const std::size_t n = a_bar.dim(0);
  if (b_bar.shape() != Shape{n, 1} || c.shape() != Shape{1, n}) {
    throw ShapeError("scan_recurrent: expected B [N,1] and C [1,N] for N=" + std::to_string(n));
  }
  if (x.empty()) throw ShapeError("scan_recurrent: empty input");
  std::vector<double> h(n, 0.0);
  if (!h0.empty()) {
    if (h0.size() != n) throw ShapeError("scan_recurrent: h0 length");
    h.assign(h0.begin(), h0.end());
  }
  std::vector<double> y(x.size());
  std::vector<double> next(n);
  for (std::size_t t = 0; t < x.size(); ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      double acc = b_bar[i] * x[t];
      for (std::size_t j = 0; j < n; ++j) acc += a_bar[i * n + j] * h[j];
      next[i] = acc;
    }
    h.swap(next);
    double out = 0.0;
    for (std::size_t i = 0; i < n; ++i) out += c[i] * h[i];
    y[t] = out;
  }
  return y;
}

std::vector<double> scan_recurrent_diagonal(std::span<const double> a_bar, std::span<const double> b_bar,
                                            std::span<const double> c, std::span<const double> x,
                                            std::span<const double> h0) {
  const std::size_t n = a_bar.size();
  if (b_bar.size() != n || c.size() != n) throw ShapeError("scan_recurrent_diagonal: parameter lengths differ");
  if (x.empty()) throw ShapeError("scan_recurrent_diagonal: empty input");
  std::vector<double> h(n, 0.0);
  if (!h0.empty()) {
    if (h0.size() != n) throw ShapeError("scan_recurrent_diagonal: h0 length");
    h.assign(h0.begin(), h0.end());
  }
  std::vector<double> y(x.size());
  for (std::size_t t = 0; t < x.size(); ++t) {
    double out = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      h[i] = a_bar[i] * h[i] + b_bar[i] * x[t];
      out += c[i] * h[i];
    }
    y[t] = out;
  }
  return y;
}

std::vector<double> lti_kernel(const Matrix& a_bar, const Matrix& b_bar, const Matrix& c, std::size_t length) {
  if (length == 0) throw ShapeError("lti_kernel: length must be >= 1");
  std::vector<double> k(length);
  Matrix v = b_bar;  // A_bar^t B_bar
  for (std::size_t t = 0; t < length; ++t) {
    k[t] = linalg::matmul(c, v)[0];
    v = linalg::matmul(a_bar, v);
  }
  return k;
}

std::vector<double> lti_kernel_diagonal(std::span<const double> a_bar, std::span<const double> b_bar,
                                        std::span<const double> c, std::size_t length) {
  if (length == 0) throw ShapeError("lti_kernel_diagonal: length must be >= 1");
  const std::size_t n = a_bar.size();
  std::vector<double> v(b_bar.begin(), b_bar.end());
  std::vector<double> k(length);
  for (std::size_t t = 0; t < length; ++t) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      acc += c[i] * v[i];
      v[i] *= a_bar[i];
    }
    k[t] = acc;
  }
  return k;
}

std::vector<double> causal_conv(std::span<const double> x, std::span<const double> kernel) {
  std::vector<double> y(x.size(), 0.0);
  for (std::size_t t = 0; t < x.size(); ++t) {
    double acc = 0.0;
    for (std::size_t s = 0; s <= t && t - s < kernel.size(); ++s) acc += kernel[t - s] * x[s];
    y[t] = acc;
  }
  return y;
}

std::size_t delta_rank(std::size_t channels) { return std::max<std::size_t>(channels / 16, 1); }

template <typename T>
SsmCore<T> SsmCore<T>::init(const std::string& prefix, std::size_t channels, std::size_t state, Rng& rng) {
  SsmCore core;
  core.channels = channels;
  core.state = state;
  core.dt_rank = delta_rank(channels);
  core.a_log = {prefix + ".a_log", Tensor<T>({channels, state})};
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t n = 0; n < state; ++n) core.a_log.value[c * state + n] = static_cast<T>(std::log(double(n + 1)));
  core.x_proj = {prefix + ".x_proj", trunc_normal_tensor<T>(rng, {core.dt_rank + 2 * state, channels})};
  core.dt_proj = {prefix + ".dt_proj", trunc_normal_tensor<T>(rng, {channels, core.dt_rank})};
  core.dt_bias = {prefix + ".dt_bias", Tensor<T>({channels})};
  for (std::size_t c = 0; c < channels; ++c) {
    // step size log-uniform in [1e-3, 1e-1], stored through inverse softplus
    const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
    core.dt_bias.value[c] = static_cast<T>(dt + std::log(-std::expm1(-dt)));
  }
  core.d_skip = {prefix + ".d_skip", Tensor<T>({channels}, T(1))};
  return core;
}

template <typename T>
void SsmCore<T>::collect(ParamList<T>& out, bool use_skip) {
  out.push_back(&a_log);
  out.push_back(&x_proj);
  out.push_back(&dt_proj);
  out.push_back(&dt_bias);
  if (use_skip) out.push_back(&d_skip);
}

template <typename T>
std::size_t SsmCore<T>::param_count(std::size_t channels, std::size_t state, bool use_skip) {
  const std::size_t r = delta_rank(channels);
  return channels * state + (r + 2 * state) * channels + channels * r + channels + (use_skip ? channels : 0);
}

namespace {

struct ScanGeom {
  std::size_t batch, length, channels, state;
};

template <typename T>
inline bool reset_at(std::size_t t, const ScanOptions& o) {
  return t == 0 || (o.segment_length && t % o.segment_length == 0);
}

// Discretized input coefficient for one (token, channel, state) entry.
template <typename T>
inline T input_coeff(T dt, T a, T bval, bool exact) {
  if (!exact) return dt * bval;
  const T da = dt * a;
  if (std::abs(da) < T(kZohLimitThreshold)) return dt * bval;
  return std::expm1(da) / a * bval;
}

template <typename T>
void scan_reference(const ScanGeom& g, const Tensor<T>& x, const Tensor<T>& dt, const std::vector<T>& a,
                    const Tensor<T>& bm, const Tensor<T>& cm, const ScanOptions& o, Tensor<T>& y, Tensor<T>& hs) {
  const std::size_t L = g.length, C = g.channels, N = g.state;
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t n = 0; n < N; ++n) {
        const T an = a[c * N + n];
        T h = 0;
        for (std::size_t t = 0; t < L; ++t) {
          if (reset_at<T>(t, o)) h = 0;
          const std::size_t tok = b * L + t;
          const T d = dt[tok * C + c];
          const T dA = std::exp(d * an);
          const T dB = input_coeff(d, an, bm[tok * N + n], o.exact_zoh_b);
          h = dA * h + dB * x[tok * C + c];
          hs[(tok * C + c) * N + n] = h;
          y[tok * C + c] += cm[tok * N + n] * h;
        }
      }
    }
  }
}

// Chunked fast path: discretize a block of tokens at once into contiguous
// buffers, then advance all (channel, state) lanes together per token.
template <typename T>
void scan_chunked(const ScanGeom& g, const Tensor<T>& x, const Tensor<T>& dt, const std::vector<T>& a,
                  const Tensor<T>& bm, const Tensor<T>& cm, const ScanOptions& o, Tensor<T>& y, Tensor<T>& hs) {
  const std::size_t L = g.length, C = g.channels, N = g.state, CN = C * N;
  const std::size_t chunk = std::max<std::size_t>(o.chunk, 1);
  std::vector<T> dA(chunk * CN), dBx(chunk * CN), h(CN);
  for (std::size_t b = 0; b < g.batch; ++b) {
    std::fill(h.begin(), h.end(), T(0));
    for (std::size_t t0 = 0; t0 < L; t0 += chunk) {
      const std::size_t len = std::min(chunk, L - t0);
      for (std::size_t k = 0; k < len; ++k) {
        const std::size_t tok = b * L + t0 + k;
        const T* dtr = &dt[tok * C];
        const T* xr = &x[tok * C];
        const T* br = &bm[tok * N];
        T* pa = &dA[k * CN];
        T* pb = &dBx[k * CN];
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t n = 0; n < N; ++n) {
            const T an = a[c * N + n];
            const T e = std::exp(dtr[c] * an);
            pa[c * N + n] = e;
            pb[c * N + n] = input_coeff(dtr[c], an, br[n], o.exact_zoh_b) * xr[c];
          }
        }
      }
      for (std::size_t k = 0; k < len; ++k) {
        const std::size_t t = t0 + k;
        const std::size_t tok = b * L + t;
        if (reset_at<T>(t, o)) std::fill(h.begin(), h.end(), T(0));
        const T* pa = &dA[k * CN];
        const T* pb = &dBx[k * CN];
        T* hr = &hs[tok * CN];
        for (std::size_t i = 0; i < CN; ++i) {
          h[i] = pa[i] * h[i] + pb[i];
          hr[i] = h[i];
        }
        const T* cr = &cm[tok * N];
        T* yr = &y[tok * C];
        for (std::size_t c = 0; c < C; ++c) {
          T acc = 0;
          for (std::size_t n = 0; n < N; ++n) acc += cr[n] * h[c * N + n];
          yr[c] = acc;
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Var<T> selective_scan_core(const Var<T>& x, const Var<T>& delta, const Var<T>& a_log, const Var<T>& b,
                           const Var<T>& c, const std::optional<Var<T>>& d, const ScanOptions& opts) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() != 3) throw ShapeError("selective_scan: x must be [B,L,C], got " + shape_str(xv.shape()));
  const ScanGeom g{xv.dim(0), xv.dim(1), xv.dim(2), a_log.value().rank() == 2 ? a_log.value().dim(1) : 0};
  if (a_log.value().shape() != Shape{g.channels, g.state}) {
    throw ShapeError("selective_scan: a_log " + shape_str(a_log.shape()) + " vs channels " +
                     std::to_string(g.channels));
  }
  if (delta.value().shape() != xv.shape()) throw ShapeError("selective_scan: delta shape " + shape_str(delta.shape()));
  const Shape bc_shape{g.batch, g.length, g.state};
  if (b.value().shape() != bc_shape || c.value().shape() != bc_shape) {
    throw ShapeError("selective_scan: B/C must be " + shape_str(bc_shape) + ", got " + shape_str(b.shape()) +
                     " and " + shape_str(c.shape()));
  }
  if (d && d->value().shape() != Shape{g.channels}) throw ShapeError("selective_scan: skip gain shape");
  for (T v : delta.value().data()) {
    if (!(v > T(0))) throw NumericError("selective_scan: step size must be positive");
  }

  std::vector<T> a(g.channels * g.state);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = -std::exp(a_log.value()[i]);

  Tensor<T> y(xv.shape());
  auto hs = std::make_shared<Tensor<T>>(Shape{g.batch, g.length, g.channels, g.state});
  if (opts.chunked) {
    scan_chunked(g, xv, delta.value(), a, b.value(), c.value(), opts, y, *hs);
  } else {
    scan_reference(g, xv, delta.value(), a, b.value(), c.value(), opts, y, *hs);
  }
  if (d) {
    const Tensor<T>& dv = d->value();
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] += dv[i % g.channels] * xv[i];
  }
  ensure_finite(y, "selective_scan");
  FlopCounter::add(2.0 * static_cast<double>(g.batch * g.length * g.channels * g.state));

  std::vector<std::size_t> ids{x.id(), delta.id(), a_log.id(), b.id(), c.id()};
  if (d) ids.push_back(d->id());
  return x.tape().record(std::move(y), std::move(ids), [=](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& gy = tape.grad(self);
    const Tensor<T>& xv = tape.value(x.id());
    const Tensor<T>& dt = tape.value(delta.id());
    const Tensor<T>& al = tape.value(a_log.id());
    const Tensor<T>& bm = tape.value(b.id());
    const Tensor<T>& cm = tape.value(c.id());
    Tensor<T>* gx = tape.grad_sink(x.id());
    Tensor<T>* gdt = tape.grad_sink(delta.id());
    Tensor<T>* gal = tape.grad_sink(a_log.id());
    Tensor<T>* gb = tape.grad_sink(b.id());
    Tensor<T>* gc = tape.grad_sink(c.id());
    const T corrupt = fault::active("selective_scan") ? T(1.5) : T(1);
    const std::size_t L = g.length, C = g.channels, N = g.state;
    if (d) {
      const Tensor<T>& dv = tape.value(d->id());
      Tensor<T>* gd = tape.grad_sink(d->id());
      for (std::size_t i = 0; i < gy.numel(); ++i) {
        if (gd) (*gd)[i % C] += gy[i] * xv[i];
        if (gx) (*gx)[i] += gy[i] * dv[i % C];
      }
    }
    for (std::size_t bi = 0; bi < g.batch; ++bi) {
      for (std::size_t ci = 0; ci < C; ++ci) {
        for (std::size_t n = 0; n < N; ++n) {
          const T an = -std::exp(al[ci * N + n]);
          T carry = 0;  // dL/dh_t flowing back from h_{t+1}
          T ga = 0;
          for (std::size_t t = L; t-- > 0;) {
            const std::size_t tok = bi * L + t;
            const std::size_t hi = (tok * C + ci) * N + n;
            const T gyv = gy[tok * C + ci];
            const T h = (*hs)[hi];
            const T gh = gyv * cm[tok * N + n] + carry;
            if (gc) (*gc)[tok * N + n] += gyv * h;
            const bool reset = reset_at<T>(t, opts);
            const T h_prev = reset ? T(0) : (*hs)[hi - C * N];
            const T dtv = dt[tok * C + ci];
            const T xval = xv[tok * C + ci];
            const T bval = bm[tok * N + n];
            const T dA = std::exp(dtv * an);
            const T g_dA = gh * h_prev;
            const T g_dB = gh * xval;
            const T dB = input_coeff(dtv, an, bval, opts.exact_zoh_b);
            if (gx) (*gx)[tok * C + ci] += gh * dB;
            T g_dt = g_dA * an * dA;
            ga += g_dA * dtv * dA;
            const T da = dtv * an;
            if (!opts.exact_zoh_b || std::abs(da) < T(kZohLimitThreshold)) {
              g_dt += g_dB * bval;
              if (gb) (*gb)[tok * N + n] += g_dB * dtv;
              if (opts.exact_zoh_b) ga += g_dB * bval * dtv * dtv / T(2);
            } else {
              g_dt += g_dB * dA * bval;
              if (gb) (*gb)[tok * N + n] += g_dB * std::expm1(da) / an;
              ga += g_dB * bval * (da * dA - std::expm1(da)) / (an * an);
            }
            if (gdt) (*gdt)[tok * C + ci] += corrupt * g_dt;
            carry = reset ? T(0) : gh * dA;
          }
          if (gal) (*gal)[ci * N + n] += ga * an;
        }
      }
    }
  });
}

template <typename T>
Var<T> selective_scan(Context<T>& ctx, const Var<T>& x, const SsmCore<T>& core, const ScanOptions& opts) {
  if (x.value().rank() != 3 || x.dim(2) != core.channels) {
    throw ShapeError("selective_scan: input " + shape_str(x.shape()) + " vs core channels " +
                     std::to_string(core.channels));
  }
  const std::size_t r = core.dt_rank, n = core.state;
  Var<T> proj = ops::linear<T>(x, ctx.param(core.x_proj), std::nullopt);
  Var<T> dt_low = ops::slice(proj, 2, 0, r);
  Var<T> bm = ops::slice(proj, 2, r, n);
  Var<T> cm = ops::slice(proj, 2, r + n, n);
  Var<T> dt = ops::softplus(ops::add_bias(ops::linear<T>(dt_low, ctx.param(core.dt_proj), std::nullopt),
                                          ctx.param(core.dt_bias)));
  std::optional<Var<T>> skip;
  if (opts.use_skip) skip = ctx.param(core.d_skip);
  return selective_scan_core(x, dt, ctx.param(core.a_log), bm, cm, skip, opts);
}

double selective_scan_flops(std::size_t batch, std::size_t length, std::size_t channels, std::size_t state,
                            bool) {
  const double tokens = static_cast<double>(batch * length);
  const double r = static_cast<double>(delta_rank(channels));
  const double c = static_cast<double>(channels), n = static_cast<double>(state);
  return tokens * (c * (r + 2 * n)    // x_proj
                   + r * c            // dt_proj
                   + c                // dt bias
                   + 5 * c            // softplus
                   + 2 * c * n);      // recurrence
}

template struct SsmCore<float>;
template struct SsmCore<double>;
template Var<float> selective_scan_core(const Var<float>&, const Var<float>&, const Var<float>&, const Var<float>&,
                                        const Var<float>&, const std::optional<Var<float>>&, const ScanOptions&);
template Var<double> selective_scan_core(const Var<double>&, const Var<double>&, const Var<double>&,
                                         const Var<double>&, const Var<double>&, const std::optional<Var<double>>&,
                                         const ScanOptions&);
template Var<float> selective_scan(Context<float>&, const Var<float>&, const SsmCore<float>&, const ScanOptions&);
template Var<double> selective_scan(Context<double>&, const Var<double>&, const SsmCore<double>&, const ScanOptions&);

}  // namespace mfil::ssm
