#include "mfil/ops.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <memory>
#include <mutex>
#include <numeric>
#include <string>

namespace mfil {

namespace {
thread_local double g_flops = 0.0;
std::atomic<bool> g_fault_armed{false};
std::string g_fault_op;
}  // namespace

void FlopCounter::add(double ops) { g_flops += ops; }
double FlopCounter::total() { return g_flops; }
void FlopCounter::reset() { g_flops = 0.0; }

namespace fault {
void arm(std::string op) {
  g_fault_op = std::move(op);
  g_fault_armed = !g_fault_op.empty();
}
void disarm() {
  g_fault_armed = false;
  g_fault_op.clear();
}
bool active(std::string_view op) { return g_fault_armed.load() && g_fault_op == op; }
const std::string& armed() { return g_fault_op; }
}  // namespace fault

}  // namespace mfil

namespace mfil::ops {

namespace {

template <typename T>
void same_tape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (&a.tape() != &b.tape()) throw Error(std::string(op) + ": inputs live on different tapes");
}

template <typename T>
Var<T> emit(const char* op, Tape<T>& tape, Tensor<T> out, std::vector<std::size_t> inputs,
            typename Tape<T>::BackwardFn fn, bool check = true) {
  if (check) ensure_finite(out, op);
  return tape.record(std::move(out), std::move(inputs), std::move(fn));
}

// outer x axis x inner decomposition of a shape around one axis
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};
AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t a = 0; a < axis; ++a) r.outer *= s[a];
  r.extent = s[axis];
  for (std::size_t a = axis + 1; a < s.size(); ++a) r.inner *= s[a];
  return r;
}

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got shape " + shape_str(t.shape()));
  }
}

template <typename T>
Var<T> unary(const char* op, const Var<T>& x, T (*f)(T), T (*df)(T), double cost) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = f(xv[i]);
  FlopCounter::add(cost * static_cast<double>(xv.numel()));
  std::string name = op;
  return emit(op, x.tape(), std::move(out), {x.id()}, [x, df, name](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& g = tape.grad(self);
    const Tensor<T>& xv = tape.value(x.id());
    Tensor<T>* gx = tape.grad_sink(x.id());
    T corrupt = fault::active(name) ? T(1.5) : T(1);
    for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += corrupt * g[i] * df(xv[i]);
  });
}

template <typename T> T sigmoid_fn(T x) {
  return x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}
template <typename T> T silu_fn(T x) { return x * sigmoid_fn(x); }
template <typename T> T silu_grad(T x) {
  T s = sigmoid_fn(x);
  return s * (T(1) + x * (T(1) - s));
}
template <typename T> T gelu_fn(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::sqrt(T(2))));
}
template <typename T> T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * T(M_PI));
  return cdf + x * pdf;
}
template <typename T> T softplus_fn(T x) {
  return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}
template <typename T> T sigmoid_grad(T x) {
  T s = sigmoid_fn(x);
  return s * (T(1) - s);
}

}  // namespace

template <typename T> T softplus_scalar(T x) { return softplus_fn(x); }
template <typename T> T sigmoid_scalar(T x) { return sigmoid_fn(x); }

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  same_tape(a, b, "add");
  require_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  FlopCounter::add(static_cast<double>(out.numel()));
  return emit("add", a.tape(), std::move(out), {a.id(), b.id()}, [a, b](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& g = tape.grad(self);
    for (const Var<T>& v : {a, b}) {
      if (Tensor<T>* gv = tape.grad_sink(v.id())) {
        for (std::size_t i = 0; i < g.numel(); ++i) (*gv)[i] += g[i];
      }
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  same_tape(a, b, "sub");
  require_same_shape(a.value(), b.value(), "sub");
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  FlopCounter::add(static_cast<double>(out.numel()));
  return emit("sub", a.tape(), std::move(out), {a.id(), b.id()}, [a, b](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& g = tape.grad(self);
    if (Tensor<T>* ga = tape.grad_sink(a.id())) {
      for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i];
    }
    if (Tensor<T>* gb = tape.grad_sink(b.id())) {
      for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  same_tape(a, b, "mul");
  require_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  FlopCounter::add(static_cast<double>(out.numel()));
  return emit("mul", a.tape(), std::move(out), {a.id(), b.id()}, [a, b](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& g = tape.grad(self);
    const Tensor<T>& av = tape.value(a.id());
    const Tensor<T>& bv = tape.value(b.id());
    if (Tensor<T>* ga = tape.grad_sink(a.id())) {
      for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * bv[i];
    }
    if (Tensor<T>* gb = tape.grad_sink(b.id())) {
      for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= s;
  FlopCounter::add(static_cast<double>(out.numel()));
  return emit("scale", a.tape(), std::move(out), {a.id()}, [a, s](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& g = tape.grad(self);
    Tensor<T>* ga = tape.grad_sink(a.id());
    for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += s * g[i];
  });
}

template <typename T>
Var<T> add_bias(const Var<T>& x, const Var<T>& bias) {
  same_tape(x, bias, "add_bias");
  const Tensor<T>& xv = x.value();
  const Tensor<T>& bv = bias.value();
  if (xv.rank() == 0 || bv.rank() != 1 || bv.dim(0) != xv.shape().back()) {
    throw ShapeError("add_bias: bias " + shape_str(bv.shape()) + " does not match trailing axis of " +
                     shape_str(xv.shape()));
  }
  const std::size_t d = bv.numel();
  Tensor<T> out = xv;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i % d];
  FlopCounter::add(static_cast<double>(out.numel()));
  return emit("add_bias", x.tape(), std::move(out), {x.id(), bias.id()},
              [x, bias, d](Tape<T>& tape, std::size_t self) {
                const Tensor<T>& g = tape.grad(self);
                if (Tensor<T>* gx = tape.grad_sink(x.id())) {
                  for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += g[i];
                }
                if (Tensor<T>* gb = tape.grad_sink(bias.id())) {
                  for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[i % d] += g[i];
                }
              });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  const Tensor<T>& xv = x.value();
  T acc = 0;
  for (T v : xv.data()) acc += v;
  FlopCounter::add(static_cast<double>(xv.numel()));
  return emit("sum", x.tape(), Tensor<T>::scalar(acc), {x.id()}, [x](Tape<T>& tape, std::size_t self) {
    const T g = tape.grad(self)[0];
    Tensor<T>* gx = tape.grad_sink(x.id());
    for (auto& v : gx->data()) v += g;
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.value().numel()));
}

template <typename T>
Var<T> mean_axis(const Var<T>& x, std::size_t axis) {
  const Tensor<T>& xv = x.value();
  if (axis >= xv.rank()) throw ShapeError("mean_axis: axis out of range for " + shape_str(xv.shape()));
  const AxisSplit s = split_at(xv.shape(), axis);
  Shape out_shape = xv.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor<T> out(out_shape);
  const T inv = T(1) / static_cast<T>(s.extent);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t a = 0; a < s.extent; ++a) {
      const T* src = &xv[(o * s.extent + a) * s.inner];
      T* dst = &out[o * s.inner];
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  }
  for (auto& v : out.data()) v *= inv;
  FlopCounter::add(static_cast<double>(xv.numel()));
  return emit("mean_axis", x.tape(), std::move(out), {x.id()}, [x, s, inv](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& g = tape.grad(self);
    Tensor<T>* gx = tape.grad_sink(x.id());
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t a = 0; a < s.extent; ++a) {
        T* dst = &(*gx)[(o * s.extent + a) * s.inner];
        const T* src = &g[o * s.inner];
        for (std::size_t i = 0; i < s.inner; ++i) dst[i] += inv * src[i];
      }
    }
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshape(std::move(shape));
  return emit("reshape", x.tape(), std::move(out), {x.id()}, [x](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& g = tape.grad(self);
    Tensor<T>* gx = tape.grad_sink(x.id());
    for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += g[i];
  }, false);
}

namespace {
// For each output flat index, the input flat index under a permutation of axes.
std::vector<std::size_t> permute_map(const Shape& in_shape, const std::vector<std::size_t>& perm,
                                     Shape& out_shape) {
  const std::size_t r = in_shape.size();
  const Shape in_strides = row_major_strides(in_shape);
  out_shape.assign(r, 0);
  Shape src_stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in_shape[perm[i]];
    src_stride[i] = in_strides[perm[i]];
  }
  const std::size_t n = shape_numel(in_shape);
  std::vector<std::size_t> map(n);
  Shape idx(r, 0);
  std::size_t src = 0;
  for (std::size_t k = 0; k < n; ++k) {
    map[k] = src;
    for (std::size_t a = r; a-- > 0;) {
      ++idx[a];
      src += src_stride[a];
      if (idx[a] < out_shape[a]) break;
      src -= src_stride[a] * idx[a];
      idx[a] = 0;
    }
  }
  return map;
}
}  // namespace

template <typename T>
Var<T> permute(const Var<T>& x, std::vector<std::size_t> perm) {
  const Tensor<T>& xv = x.value();
  std::vector<std::size_t> check = perm;
  std::sort(check.begin(), check.end());
  bool ok = check.size() == xv.rank();
  for (std::size_t i = 0; ok && i < check.size(); ++i) ok = check[i] == i;
  if (!ok) throw ShapeError("permute: invalid axis permutation for " + shape_str(xv.shape()));
  Shape out_shape;
  auto map = std::make_shared<std::vector<std::size_t>>(permute_map(xv.shape(), perm, out_shape));
  Tensor<T> out(out_shape);
  for (std::size_t k = 0; k < map->size(); ++k) out[k] = xv[(*map)[k]];
  return emit("permute", x.tape(), std::move(out), {x.id()}, [x, map](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& g = tape.grad(self);
    Tensor<T>* gx = tape.grad_sink(x.id());
    for (std::size_t k = 0; k < map->size(); ++k) (*gx)[(*map)[k]] += g[k];
  }, false);
}

template <typename T>
Var<T> slice(const Var<T>& x, std::size_t axis, std::size_t start, std::size_t len) {
  const Tensor<T>& xv = x.value();
  if (axis >= xv.rank() || len == 0 || start + len > xv.dim(axis)) {
    throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                     ") invalid on axis " + std::to_string(axis) + " of " + shape_str(xv.shape()));
  }
  const AxisSplit s = split_at(xv.shape(), axis);
  Shape out_shape = xv.shape();
  out_shape[axis] = len;
  Tensor<T> out(out_shape);
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(&xv[(o * s.extent + start) * s.inner], len * s.inner, &out[o * len * s.inner]);
  }
  return emit("slice", x.tape(), std::move(out), {x.id()}, [x, s, start, len](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& g = tape.grad(self);
    Tensor<T>* gx = tape.grad_sink(x.id());
    for (std::size_t o = 0; o < s.outer; ++o) {
      T* dst = &(*gx)[(o * s.extent + start) * s.inner];
      const T* src = &g[o * len * s.inner];
      for (std::size_t i = 0; i < len * s.inner; ++i) dst[i] += src[i];
    }
  }, false);
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const Shape& ref = xs[0].shape();
  if (axis >= ref.size()) throw ShapeError("concat: axis out of range for " + shape_str(ref));
  std::size_t total = 0;
  std::vector<std::size_t> ids;
  for (const auto& v : xs) {
    same_tape(xs[0], v, "concat");
    const Shape& s = v.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t a = 0; ok && a < s.size(); ++a) ok = a == axis || s[a] == ref[a];
    if (!ok) throw ShapeError("concat: " + shape_str(s) + " incompatible with " + shape_str(ref) +
                              " along axis " + std::to_string(axis));
    total += s[axis];
    ids.push_back(v.id());
  }
  Shape out_shape = ref;
  out_shape[axis] = total;
  Tensor<T> out(out_shape);
  const AxisSplit so = split_at(out_shape, axis);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& v : xs) {
    offsets.push_back(off);
    const std::size_t e = v.shape()[axis];
    const Tensor<T>& vv = v.value();
    for (std::size_t o = 0; o < so.outer; ++o) {
      std::copy_n(&vv[o * e * so.inner], e * so.inner, &out[(o * total + off) * so.inner]);
    }
    off += e;
  }
  return emit("concat", xs[0].tape(), std::move(out), std::move(ids),
              [xs, so, total, offsets](Tape<T>& tape, std::size_t self) {
                const Tensor<T>& g = tape.grad(self);
                for (std::size_t k = 0; k < xs.size(); ++k) {
                  Tensor<T>* gv = tape.grad_sink(xs[k].id());
                  if (!gv) continue;
                  const std::size_t e = gv->numel() / (so.outer * so.inner);
                  for (std::size_t o = 0; o < so.outer; ++o) {
                    const T* src = &g[(o * total + offsets[k]) * so.inner];
                    T* dst = &(*gv)[o * e * so.inner];
                    for (std::size_t i = 0; i < e * so.inner; ++i) dst[i] += src[i];
                  }
                }
              }, false);
}

template <typename T>
Var<T> gather(const Var<T>& x, std::size_t axis, std::vector<std::size_t> index) {
  const Tensor<T>& xv = x.value();
  if (axis >= xv.rank() || index.empty()) throw ShapeError("gather: invalid axis or empty index");
  const AxisSplit s = split_at(xv.shape(), axis);
  for (std::size_t i : index) {
    if (i >= s.extent) throw ShapeError("gather: index " + std::to_string(i) + " out of range on axis " +
                                        std::to_string(axis) + " of " + shape_str(xv.shape()));
  }
  Shape out_shape = xv.shape();
  out_shape[axis] = index.size();
  Tensor<T> out(out_shape);
  const std::size_t m = index.size();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t k = 0; k < m; ++k) {
      std::copy_n(&xv[(o * s.extent + index[k]) * s.inner], s.inner, &out[(o * m + k) * s.inner]);
    }
  }
  return emit("gather", x.tape(), std::move(out), {x.id()},
              [x, s, index = std::move(index)](Tape<T>& tape, std::size_t self) {
                const Tensor<T>& g = tape.grad(self);
                Tensor<T>* gx = tape.grad_sink(x.id());
                const std::size_t m = index.size();
                for (std::size_t o = 0; o < s.outer; ++o) {
                  for (std::size_t k = 0; k < m; ++k) {
                    T* dst = &(*gx)[(o * s.extent + index[k]) * s.inner];
                    const T* src = &g[(o * m + k) * s.inner];
                    for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
                  }
                }
              }, false);
}

namespace {

struct ConvGeom {
  std::size_t n, cin, h, w, cout, kh, kw, stride, pad, ho, wo;
};

template <typename T>
ConvGeom conv_geom(const char* op, const Tensor<T>& in, const Tensor<T>& k, std::size_t stride,
                   std::size_t padding, bool depthwise) {
  require_rank(in, 4, op, "input");
  require_rank(k, 4, op, "kernel");
  if (stride < 1) throw ShapeError(std::string(op) + ": stride must be >= 1");
  ConvGeom g{};
  g.n = in.dim(0);
  g.cin = in.dim(1);
  g.h = in.dim(2);
  g.w = in.dim(3);
  g.cout = k.dim(0);
  g.kh = k.dim(2);
  g.kw = k.dim(3);
  g.stride = stride;
  g.pad = padding;
  if (depthwise) {
    if (k.dim(1) != 1 || k.dim(0) != g.cin) {
      throw ShapeError(std::string(op) + ": kernel " + shape_str(k.shape()) + " must be [C,1,kH,kW] with C=" +
                       std::to_string(g.cin) + " (axes 0,1)");
    }
  } else if (k.dim(1) != g.cin) {
    throw ShapeError(std::string(op) + ": kernel C_in (axis 1) = " + std::to_string(k.dim(1)) +
                     " but input channels (axis 1) = " + std::to_string(g.cin));
  }
  if (g.kh > g.h + 2 * padding || g.kw > g.w + 2 * padding) {
    throw ShapeError(std::string(op) + ": kernel " + std::to_string(g.kh) + "x" + std::to_string(g.kw) +
                     " exceeds padded input " + std::to_string(g.h + 2 * padding) + "x" +
                     std::to_string(g.w + 2 * padding) + " (axes 2,3)");
  }
  g.ho = (g.h + 2 * padding - g.kh) / stride + 1;
  g.wo = (g.w + 2 * padding - g.kw) / stride + 1;
  return g;
}

template <typename T>
void check_bias(const char* op, const std::optional<Var<T>>& bias, std::size_t channels) {
  if (bias && (bias->value().rank() != 1 || bias->value().dim(0) != channels)) {
    throw ShapeError(std::string(op) + ": bias " + shape_str(bias->shape()) + " must be [" +
                     std::to_string(channels) + "]");
  }
}

// Valid kernel-tap range [lo, hi) for output coordinate `o` along one axis.
inline void tap_range(std::size_t o, std::size_t stride, std::size_t pad, std::size_t k, std::size_t extent,
                      std::size_t& lo, std::size_t& hi) {
  const std::ptrdiff_t base = static_cast<std::ptrdiff_t>(o * stride) - static_cast<std::ptrdiff_t>(pad);
  lo = base < 0 ? static_cast<std::size_t>(-base) : 0;
  const std::ptrdiff_t lim = static_cast<std::ptrdiff_t>(extent) - base;
  hi = lim < 0 ? 0 : std::min(k, static_cast<std::size_t>(lim));
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernel, const std::optional<Var<T>>& bias,
              std::size_t stride, std::size_t padding) {
  same_tape(input, kernel, "conv2d");
  const Tensor<T>& x = input.value();
  const Tensor<T>& k = kernel.value();
  const ConvGeom g = conv_geom("conv2d", x, k, stride, padding, false);
  check_bias("conv2d", bias, g.cout);
  Tensor<T> out({g.n, g.cout, g.ho, g.wo});
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t o = 0; o < g.cout; ++o) {
      T* dst = &out[((n * g.cout + o) * g.ho) * g.wo];
      if (bias) std::fill_n(dst, g.ho * g.wo, bias->value()[o]);
      for (std::size_t c = 0; c < g.cin; ++c) {
        const T* src = &x[((n * g.cin + c) * g.h) * g.w];
        const T* kk = &k[((o * g.cin + c) * g.kh) * g.kw];
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          std::size_t ilo, ihi;
          tap_range(oy, g.stride, g.pad, g.kh, g.h, ilo, ihi);
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            std::size_t jlo, jhi;
            tap_range(ox, g.stride, g.pad, g.kw, g.w, jlo, jhi);
            T acc = 0;
            for (std::size_t i = ilo; i < ihi; ++i) {
              const T* row = src + (oy * g.stride + i - g.pad) * g.w + (ox * g.stride - g.pad);
              for (std::size_t j = jlo; j < jhi; ++j) acc += row[j] * kk[i * g.kw + j];
            }
            dst[oy * g.wo + ox] += acc;
          }
        }
      }
    }
  }
  FlopCounter::add(static_cast<double>(g.n * g.cout * g.ho * g.wo * g.cin * g.kh * g.kw));
  std::vector<std::size_t> ids{input.id(), kernel.id()};
  if (bias) ids.push_back(bias->id());
  return emit("conv2d", input.tape(), std::move(out), std::move(ids),
              [input, kernel, bias, g](Tape<T>& tape, std::size_t self) {
                const Tensor<T>& gout = tape.grad(self);
                const Tensor<T>& x = tape.value(input.id());
                const Tensor<T>& k = tape.value(kernel.id());
                Tensor<T>* gx = tape.grad_sink(input.id());
                Tensor<T>* gk = tape.grad_sink(kernel.id());
                const T corrupt = fault::active("conv2d") ? T(1.5) : T(1);
                for (std::size_t n = 0; n < g.n; ++n) {
                  for (std::size_t o = 0; o < g.cout; ++o) {
                    const T* go = &gout[((n * g.cout + o) * g.ho) * g.wo];
                    for (std::size_t c = 0; c < g.cin; ++c) {
                      const std::size_t in_off = ((n * g.cin + c) * g.h) * g.w;
                      const std::size_t k_off = ((o * g.cin + c) * g.kh) * g.kw;
                      for (std::size_t oy = 0; oy < g.ho; ++oy) {
                        std::size_t ilo, ihi;
                        tap_range(oy, g.stride, g.pad, g.kh, g.h, ilo, ihi);
                        for (std::size_t ox = 0; ox < g.wo; ++ox) {
                          std::size_t jlo, jhi;
                          tap_range(ox, g.stride, g.pad, g.kw, g.w, jlo, jhi);
                          const T gv = go[oy * g.wo + ox];
                          if (gv == T(0)) continue;
                          for (std::size_t i = ilo; i < ihi; ++i) {
                            const std::size_t row = in_off + (oy * g.stride + i - g.pad) * g.w +
                                                    (ox * g.stride - g.pad);
                            for (std::size_t j = jlo; j < jhi; ++j) {
                              if (gx) (*gx)[row + j] += gv * k[k_off + i * g.kw + j];
                              if (gk) (*gk)[k_off + i * g.kw + j] += corrupt * gv * x[row + j];
                            }
                          }
                        }
                      }
                    }
                  }
                }
                if (bias) {
                  if (Tensor<T>* gb = tape.grad_sink(bias->id())) {
                    for (std::size_t n = 0; n < g.n; ++n) {
                      for (std::size_t o = 0; o < g.cout; ++o) {
                        const T* go = &gout[((n * g.cout + o) * g.ho) * g.wo];
                        T acc = 0;
                        for (std::size_t p = 0; p < g.ho * g.wo; ++p) acc += go[p];
                        (*gb)[o] += acc;
                      }
                    }
                  }
                }
              });
}

template <typename T>
Var<T> depthwise_conv2d(const Var<T>& input, const Var<T>& kernel, const std::optional<Var<T>>& bias,
                        std::size_t stride, std::size_t padding) {
  same_tape(input, kernel, "depthwise_conv2d");
  const Tensor<T>& x = input.value();
  const Tensor<T>& k = kernel.value();
  const ConvGeom g = conv_geom("depthwise_conv2d", x, k, stride, padding, true);
  check_bias("depthwise_conv2d", bias, g.cin);
  Tensor<T> out({g.n, g.cin, g.ho, g.wo});
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t c = 0; c < g.cin; ++c) {
      const T* src = &x[((n * g.cin + c) * g.h) * g.w];
      const T* kk = &k[c * g.kh * g.kw];
      T* dst = &out[((n * g.cin + c) * g.ho) * g.wo];
      const T b = bias ? bias->value()[c] : T(0);
      for (std::size_t oy = 0; oy < g.ho; ++oy) {
        std::size_t ilo, ihi;
        tap_range(oy, g.stride, g.pad, g.kh, g.h, ilo, ihi);
        for (std::size_t ox = 0; ox < g.wo; ++ox) {
          std::size_t jlo, jhi;
          tap_range(ox, g.stride, g.pad, g.kw, g.w, jlo, jhi);
          T acc = 0;
          for (std::size_t i = ilo; i < ihi; ++i) {
            const T* row = src + (oy * g.stride + i - g.pad) * g.w + (ox * g.stride - g.pad);
            for (std::size_t j = jlo; j < jhi; ++j) acc += row[j] * kk[i * g.kw + j];
          }
          dst[oy * g.wo + ox] = acc + b;
        }
      }
    }
  }
  FlopCounter::add(static_cast<double>(g.n * g.cin * g.ho * g.wo * g.kh * g.kw));
  std::vector<std::size_t> ids{input.id(), kernel.id()};
  if (bias) ids.push_back(bias->id());
  return emit("depthwise_conv2d", input.tape(), std::move(out), std::move(ids),
              [input, kernel, bias, g](Tape<T>& tape, std::size_t self) {
                const Tensor<T>& gout = tape.grad(self);
                const Tensor<T>& x = tape.value(input.id());
                const Tensor<T>& k = tape.value(kernel.id());
                Tensor<T>* gx = tape.grad_sink(input.id());
                Tensor<T>* gk = tape.grad_sink(kernel.id());
                Tensor<T>* gb = bias ? tape.grad_sink(bias->id()) : nullptr;
                const T corrupt = fault::active("depthwise_conv2d") ? T(1.5) : T(1);
                for (std::size_t n = 0; n < g.n; ++n) {
                  for (std::size_t c = 0; c < g.cin; ++c) {
                    const std::size_t in_off = ((n * g.cin + c) * g.h) * g.w;
                    const std::size_t k_off = c * g.kh * g.kw;
                    const T* go = &gout[((n * g.cin + c) * g.ho) * g.wo];
                    T bacc = 0;
                    for (std::size_t oy = 0; oy < g.ho; ++oy) {
                      std::size_t ilo, ihi;
                      tap_range(oy, g.stride, g.pad, g.kh, g.h, ilo, ihi);
                      for (std::size_t ox = 0; ox < g.wo; ++ox) {
                        std::size_t jlo, jhi;
                        tap_range(ox, g.stride, g.pad, g.kw, g.w, jlo, jhi);
                        const T gv = go[oy * g.wo + ox];
                        bacc += gv;
                        for (std::size_t i = ilo; i < ihi; ++i) {
                          const std::size_t row = in_off + (oy * g.stride + i - g.pad) * g.w +
                                                  (ox * g.stride - g.pad);
                          for (std::size_t j = jlo; j < jhi; ++j) {
                            if (gx) (*gx)[row + j] += gv * k[k_off + i * g.kw + j];
                            if (gk) (*gk)[k_off + i * g.kw + j] += corrupt * gv * x[row + j];
                          }
                        }
                      }
                    }
                    if (gb) (*gb)[c] += bacc;
                  }
                }
              });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const std::optional<Var<T>>& bias) {
  same_tape(x, weight, "linear");
  const Tensor<T>& xv = x.value();
  const Tensor<T>& w = weight.value();
  require_rank(w, 2, "linear", "weight");
  if (xv.rank() == 0 || xv.shape().back() != w.dim(1)) {
    throw ShapeError("linear: trailing extent of input " + shape_str(xv.shape()) + " != weight D_in " +
                     std::to_string(w.dim(1)));
  }
  const std::size_t din = w.dim(1), dout = w.dim(0), rows = xv.numel() / din;
  check_bias("linear", bias, dout);
  Shape out_shape = xv.shape();
  out_shape.back() = dout;
  Tensor<T> out(out_shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = &xv[r * din];
    T* yr = &out[r * dout];
    for (std::size_t o = 0; o < dout; ++o) {
      const T* wr = &w[o * din];
      T acc = bias ? bias->value()[o] : T(0);
      for (std::size_t i = 0; i < din; ++i) acc += xr[i] * wr[i];
      yr[o] = acc;
    }
  }
  FlopCounter::add(static_cast<double>(rows * din * dout));
  std::vector<std::size_t> ids{x.id(), weight.id()};
  if (bias) ids.push_back(bias->id());
  return emit("linear", x.tape(), std::move(out), std::move(ids),
              [x, weight, bias, din, dout, rows](Tape<T>& tape, std::size_t self) {
                const Tensor<T>& g = tape.grad(self);
                const Tensor<T>& xv = tape.value(x.id());
                const Tensor<T>& w = tape.value(weight.id());
                Tensor<T>* gx = tape.grad_sink(x.id());
                Tensor<T>* gw = tape.grad_sink(weight.id());
                Tensor<T>* gb = bias ? tape.grad_sink(bias->id()) : nullptr;
                const T corrupt = fault::active("linear") ? T(1.5) : T(1);
                for (std::size_t r = 0; r < rows; ++r) {
                  const T* gr = &g[r * dout];
                  const T* xr = &xv[r * din];
                  for (std::size_t o = 0; o < dout; ++o) {
                    const T gv = gr[o];
                    if (gv == T(0)) continue;
                    if (gx) {
                      T* gxr = &(*gx)[r * din];
                      const T* wr = &w[o * din];
                      for (std::size_t i = 0; i < din; ++i) gxr[i] += gv * wr[i];
                    }
                    if (gw) {
                      T* gwr = &(*gw)[o * din];
                      const T s = corrupt * gv;
                      for (std::size_t i = 0; i < din; ++i) gwr[i] += s * xr[i];
                    }
                    if (gb) (*gb)[o] += gv;
                  }
                }
              });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  same_tape(x, gamma, "layer_norm");
  if (!(eps > T(0))) throw NumericError("layer_norm: eps must be positive");
  const Tensor<T>& xv = x.value();
  if (xv.rank() == 0) throw ShapeError("layer_norm: scalar input");
  const std::size_t c = xv.shape().back();
  if (gamma.value().rank() != 1 || gamma.value().dim(0) != c || beta.value().shape() != gamma.value().shape()) {
    throw ShapeError("layer_norm: gamma/beta must be [" + std::to_string(c) + "], got " +
                     shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
  }
  const std::size_t rows = xv.numel() / c;
  const Tensor<T>& gm = gamma.value();
  const Tensor<T>& bt = beta.value();
  Tensor<T> out(xv.shape());
  auto xhat = std::make_shared<Tensor<T>>(xv.shape());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = &xv[r * c];
    T mu = 0;
    for (std::size_t i = 0; i < c; ++i) mu += xr[i];
    mu /= static_cast<T>(c);
    // One refinement pass removes the rounding of the first mean, so constant rows normalize to exact zeros.
    T corr = 0;
    for (std::size_t i = 0; i < c; ++i) corr += xr[i] - mu;
    mu += corr / static_cast<T>(c);
    T var = 0;
    for (std::size_t i = 0; i < c; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= static_cast<T>(c);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t i = 0; i < c; ++i) {
      const T h = (xr[i] - mu) * rs;
      (*xhat)[r * c + i] = h;
      out[r * c + i] = h * gm[i] + bt[i];
    }
  }
  FlopCounter::add(5.0 * static_cast<double>(xv.numel()));
  return emit("layer_norm", x.tape(), std::move(out), {x.id(), gamma.id(), beta.id()},
              [x, gamma, beta, xhat, rstd, c, rows](Tape<T>& tape, std::size_t self) {
                const Tensor<T>& g = tape.grad(self);
                const Tensor<T>& gm = tape.value(gamma.id());
                Tensor<T>* gx = tape.grad_sink(x.id());
                Tensor<T>* gg = tape.grad_sink(gamma.id());
                Tensor<T>* gb = tape.grad_sink(beta.id());
                const T corrupt = fault::active("layer_norm") ? T(1.5) : T(1);
                for (std::size_t r = 0; r < rows; ++r) {
                  const T* gr = &g[r * c];
                  const T* hr = &(*xhat)[r * c];
                  T m1 = 0, m2 = 0;
                  for (std::size_t i = 0; i < c; ++i) {
                    const T gh = gr[i] * gm[i];
                    m1 += gh;
                    m2 += gh * hr[i];
                    if (gg) (*gg)[i] += corrupt * gr[i] * hr[i];
                    if (gb) (*gb)[i] += gr[i];
                  }
                  if (!gx) continue;
                  m1 /= static_cast<T>(c);
                  m2 /= static_cast<T>(c);
                  const T rs = (*rstd)[r];
                  for (std::size_t i = 0; i < c; ++i) {
                    (*gx)[r * c + i] += rs * (gr[i] * gm[i] - m1 - hr[i] * m2);
                  }
                }
              });
}

template <typename T> Var<T> silu(const Var<T>& x) { return unary<T>("silu", x, silu_fn<T>, silu_grad<T>, 5.0); }
template <typename T> Var<T> gelu(const Var<T>& x) { return unary<T>("gelu", x, gelu_fn<T>, gelu_grad<T>, 5.0); }
template <typename T> Var<T> softplus(const Var<T>& x) {
  return unary<T>("softplus", x, softplus_fn<T>, sigmoid_fn<T>, 5.0);
}
template <typename T> Var<T> sigmoid(const Var<T>& x) {
  return unary<T>("sigmoid", x, sigmoid_fn<T>, sigmoid_grad<T>, 5.0);
}

template <typename T>
Var<T> softmax(const Var<T>& x, std::size_t axis) {
  const Tensor<T>& xv = x.value();
  if (axis >= xv.rank()) throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for " +
                                          shape_str(xv.shape()));
  const AxisSplit s = split_at(xv.shape(), axis);
  Tensor<T> out(xv.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      T mx = xv[base];
      for (std::size_t a = 1; a < s.extent; ++a) mx = std::max(mx, xv[base + a * s.inner]);
      T z = 0;
      for (std::size_t a = 0; a < s.extent; ++a) {
        const T e = std::exp(xv[base + a * s.inner] - mx);
        out[base + a * s.inner] = e;
        z += e;
      }
      for (std::size_t a = 0; a < s.extent; ++a) out[base + a * s.inner] /= z;
    }
  }
  FlopCounter::add(5.0 * static_cast<double>(xv.numel()));
  return emit("softmax", x.tape(), std::move(out), {x.id()}, [x, s](Tape<T>& tape, std::size_t self) {
    const Tensor<T>& g = tape.grad(self);
    const Tensor<T>& y = tape.value(self);
    Tensor<T>* gx = tape.grad_sink(x.id());
    const T corrupt = fault::active("softmax") ? T(1.5) : T(1);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.extent * s.inner + i;
        T dot = 0;
        for (std::size_t a = 0; a < s.extent; ++a) dot += g[base + a * s.inner] * y[base + a * s.inner];
        for (std::size_t a = 0; a < s.extent; ++a) {
          const std::size_t k = base + a * s.inner;
          (*gx)[k] += corrupt * y[k] * (g[k] - dot);
        }
      }
    }
  });
}

template <typename T>
Var<T> weighted_sum(const std::vector<Var<T>>& maps, const Var<T>& alpha) {
  const Tensor<T>& av = alpha.value();
  if (maps.empty() || av.rank() != 1 || av.dim(0) != maps.size()) {
    throw ShapeError("weighted_sum: alpha " + shape_str(av.shape()) + " must be [" +
                     std::to_string(maps.size()) + "]");
  }
  std::vector<std::size_t> ids;
  for (const auto& m : maps) {
    same_tape(maps[0], m, "weighted_sum");
    require_same_shape(maps[0].value(), m.value(), "weighted_sum");
    ids.push_back(m.id());
  }
  ids.push_back(alpha.id());
  Tensor<T> out(maps[0].shape());
  for (std::size_t k = 0; k < maps.size(); ++k) {
    const Tensor<T>& mv = maps[k].value();
    const T a = av[k];
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += a * mv[i];
  }
  FlopCounter::add(static_cast<double>(maps.size() * out.numel()));
  return emit("weighted_sum", maps[0].tape(), std::move(out), std::move(ids),
              [maps, alpha](Tape<T>& tape, std::size_t self) {
                const Tensor<T>& g = tape.grad(self);
                const Tensor<T>& av = tape.value(alpha.id());
                Tensor<T>* ga = tape.grad_sink(alpha.id());
                const T corrupt = fault::active("weighted_sum") ? T(1.5) : T(1);
                for (std::size_t k = 0; k < maps.size(); ++k) {
                  const Tensor<T>& mv = tape.value(maps[k].id());
                  if (Tensor<T>* gm = tape.grad_sink(maps[k].id())) {
                    for (std::size_t i = 0; i < g.numel(); ++i) (*gm)[i] += av[k] * g[i];
                  }
                  if (ga) {
                    T acc = 0;
                    for (std::size_t i = 0; i < g.numel(); ++i) acc += g[i] * mv[i];
                    (*ga)[k] += corrupt * acc;
                  }
                }
              });
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels, T smoothing) {
  const Tensor<T>& z = logits.value();
  require_rank(z, 2, "cross_entropy", "logits");
  const std::size_t b = z.dim(0), k = z.dim(1);
  if (labels.size() != b) throw ShapeError("cross_entropy: " + std::to_string(labels.size()) +
                                           " labels for batch of " + std::to_string(b));
  if (!(smoothing >= T(0) && smoothing < T(1))) throw NumericError("cross_entropy: smoothing must be in [0,1)");
  auto probs = std::make_shared<Tensor<T>>(z.shape());
  auto target = std::make_shared<Tensor<T>>(z.shape(), smoothing / static_cast<T>(k));
  T loss = 0;
  for (std::size_t r = 0; r < b; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= k) {
      throw ShapeError("cross_entropy: label " + std::to_string(labels[r]) + " out of range [0," +
                       std::to_string(k) + ")");
    }
    (*target)[r * k + static_cast<std::size_t>(labels[r])] += T(1) - smoothing;
    const T* zr = &z[r * k];
    T mx = zr[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, zr[j]);
    T sum = 0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(zr[j] - mx);
    const T lse = mx + std::log(sum);
    for (std::size_t j = 0; j < k; ++j) {
      (*probs)[r * k + j] = std::exp(zr[j] - lse);
      loss -= (*target)[r * k + j] * (zr[j] - lse);
    }
  }
  loss /= static_cast<T>(b);
  return emit("cross_entropy", logits.tape(), Tensor<T>::scalar(loss), {logits.id()},
              [logits, probs, target, b](Tape<T>& tape, std::size_t self) {
                const T g = tape.grad(self)[0] / static_cast<T>(b);
                Tensor<T>* gz = tape.grad_sink(logits.id());
                for (std::size_t i = 0; i < gz->numel(); ++i) (*gz)[i] += g * ((*probs)[i] - (*target)[i]);
              });
}

template <typename T>
Var<T> scale_samples(const Var<T>& x, std::vector<T> mask) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() == 0 || mask.size() != xv.dim(0)) throw ShapeError("scale_samples: mask/batch mismatch");
  const std::size_t per = xv.numel() / mask.size();
  Tensor<T> out = xv;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= mask[i / per];
  return emit("scale_samples", x.tape(), std::move(out), {x.id()},
              [x, mask = std::move(mask), per](Tape<T>& tape, std::size_t self) {
                const Tensor<T>& g = tape.grad(self);
                Tensor<T>* gx = tape.grad_sink(x.id());
                for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[i] += mask[i / per] * g[i];
              });
}

#define MFIL_INSTANTIATE_OPS(T)                                                                         \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                    \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                                    \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                    \
  template Var<T> scale(const Var<T>&, T);                                                              \
  template Var<T> add_bias(const Var<T>&, const Var<T>&);                                               \
  template Var<T> sum(const Var<T>&);                                                                   \
  template Var<T> mean(const Var<T>&);                                                                  \
  template Var<T> mean_axis(const Var<T>&, std::size_t);                                                \
  template Var<T> reshape(const Var<T>&, Shape);                                                        \
  template Var<T> permute(const Var<T>&, std::vector<std::size_t>);                                     \
  template Var<T> slice(const Var<T>&, std::size_t, std::size_t, std::size_t);                          \
  template Var<T> concat(const std::vector<Var<T>>&, std::size_t);                                      \
  template Var<T> gather(const Var<T>&, std::size_t, std::vector<std::size_t>);                         \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const std::optional<Var<T>>&, std::size_t,       \
                         std::size_t);                                                                  \
  template Var<T> depthwise_conv2d(const Var<T>&, const Var<T>&, const std::optional<Var<T>>&,          \
                                   std::size_t, std::size_t);                                           \
  template Var<T> linear(const Var<T>&, const Var<T>&, const std::optional<Var<T>>&);                   \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                           \
  template Var<T> silu(const Var<T>&);                                                                  \
  template Var<T> gelu(const Var<T>&);                                                                  \
  template Var<T> softplus(const Var<T>&);                                                              \
  template Var<T> sigmoid(const Var<T>&);                                                               \
  template Var<T> softmax(const Var<T>&, std::size_t);                                                  \
  template Var<T> weighted_sum(const std::vector<Var<T>>&, const Var<T>&);                              \
  template Var<T> cross_entropy(const Var<T>&, std::span<const int>, T);                                \
  template Var<T> scale_samples(const Var<T>&, std::vector<T>);                                         \
  template T softplus_scalar(T);                                                                        \
  template T sigmoid_scalar(T);

MFIL_INSTANTIATE_OPS(float)
MFIL_INSTANTIATE_OPS(double)

}  // namespace mfil::ops
