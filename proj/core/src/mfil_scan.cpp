#include "mfil/mfil_scan.hpp"

#include <numeric>

#include "mfil/ops.hpp"

namespace mfil {

std::string to_string(ScanMode mode) {
  switch (mode) {
    case ScanMode::multi_filter: return "multi_filter";
    case ScanMode::single_flatten: return "single_flatten";
    case ScanMode::cross_4dir: return "cross_4dir";
    case ScanMode::orig_plus_one: return "orig_plus_one";
  }
  return "unknown";
}

ScanMode parse_scan_mode(const std::string& name) {
  if (name == "multi_filter") return ScanMode::multi_filter;
  if (name == "single_flatten") return ScanMode::single_flatten;
  if (name == "cross_4dir") return ScanMode::cross_4dir;
  if (name == "orig_plus_one" || name == "original_plus_one_filter") return ScanMode::orig_plus_one;
  throw ConfigError("unknown scan mode '" + name + "'");
}

std::size_t segment_count(ScanMode mode) {
  switch (mode) {
    case ScanMode::multi_filter: return 4;
    case ScanMode::single_flatten: return 1;
    case ScanMode::cross_4dir: return 4;
    case ScanMode::orig_plus_one: return 2;
  }
  return 1;
}

Tensor<double> sobel_x_kernel() {
  return Tensor<double>({3, 3}, {-1, 0, 1, -2, 0, 2, -1, 0, 1});
}

Tensor<double> sobel_y_kernel() {
  return Tensor<double>({3, 3}, {-1, -2, -1, 0, 0, 0, 1, 2, 1});
}

namespace {
template <typename T>
Tensor<T> replicate_depthwise(const Tensor<double>& k, std::size_t channels) {
  Tensor<T> out({channels, 1, 3, 3});
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t i = 0; i < 9; ++i) out[c * 9 + i] = static_cast<T>(k[i]);
  return out;
}
}  // namespace

template <typename T>
FilterBank<T> FilterBank<T>::init(const std::string& prefix, std::size_t channels, ScanMode mode, Rng& rng) {
  FilterBank bank;
  bank.channels = channels;
  bank.has_orthogonal = mode == ScanMode::multi_filter;
  bank.has_dynamic = mode == ScanMode::multi_filter || mode == ScanMode::orig_plus_one;
  if (bank.has_orthogonal) {
    bank.refine_h = {prefix + ".refine_h", identity_depthwise_kernel<T>(channels)};
    bank.refine_v = {prefix + ".refine_v", identity_depthwise_kernel<T>(channels)};
  }
  if (bank.has_dynamic) {
    bank.dyn_depthwise = {prefix + ".dyn_depthwise", fan_in_uniform_tensor<T>(rng, {channels, 1, 3, 3}, 9)};
    bank.dyn_pointwise = {prefix + ".dyn_pointwise", trunc_normal_tensor<T>(rng, {channels, channels, 1, 1})};
  }
  return bank;
}

template <typename T>
void FilterBank<T>::collect(ParamList<T>& out) {
  if (has_orthogonal) {
    out.push_back(&refine_h);
    out.push_back(&refine_v);
  }
  if (has_dynamic) {
    out.push_back(&dyn_depthwise);
    out.push_back(&dyn_pointwise);
  }
}

template <typename T>
std::size_t FilterBank<T>::param_count(std::size_t channels, ScanMode mode) {
  std::size_t n = 0;
  if (mode == ScanMode::multi_filter) n += 2 * 9 * channels;
  if (mode == ScanMode::multi_filter || mode == ScanMode::orig_plus_one) n += 9 * channels + channels * channels;
  return n;
}

template <typename T>
AdaptiveWeights<T> AdaptiveWeights<T>::init(const std::string& prefix, std::size_t count) {
  return AdaptiveWeights{Param<T>{prefix + ".merge_w", Tensor<T>({count})}};
}

template <typename T>
Tensor<T> AdaptiveWeights<T>::alpha() const {
  Tape<T> tape(false);
  return ops::softmax(tape.constant(w.value), 0).value();
}

Traversal row_major_traversal(std::size_t h, std::size_t w) {
  Traversal t(h * w);
  std::iota(t.begin(), t.end(), 0);
  return t;
}

Traversal column_major_traversal(std::size_t h, std::size_t w) {
  Traversal t;
  t.reserve(h * w);
  for (std::size_t x = 0; x < w; ++x)
    for (std::size_t y = 0; y < h; ++y) t.push_back(y * w + x);
  return t;
}

Traversal reversed(const Traversal& t) { return Traversal(t.rbegin(), t.rend()); }

Traversal inverse(const Traversal& t) {
  Traversal inv(t.size());
  for (std::size_t j = 0; j < t.size(); ++j) inv[t[j]] = j;
  return inv;
}

template <typename T>
std::pair<Var<T>, Var<T>> orthogonal_maps(Context<T>& ctx, const Var<T>& input, const FilterBank<T>& bank) {
  if (!bank.has_orthogonal) throw Error("orthogonal_maps: filter bank has no orthogonal branch");
  if (input.value().rank() != 4 || input.dim(1) != bank.channels) {
    throw ShapeError("orthogonal_maps: input " + shape_str(input.shape()) + " vs bank channels " +
                     std::to_string(bank.channels));
  }
  const std::size_t c = bank.channels;
  Var<T> ky = ctx.constant(replicate_depthwise<T>(sobel_y_kernel(), c));
  Var<T> kx = ctx.constant(replicate_depthwise<T>(sobel_x_kernel(), c));
  Var<T> fh = ops::depthwise_conv2d<T>(ops::depthwise_conv2d<T>(input, ky, std::nullopt, 1, 1),
                                       ctx.param(bank.refine_h), std::nullopt, 1, 1);
  Var<T> fv = ops::depthwise_conv2d<T>(ops::depthwise_conv2d<T>(input, kx, std::nullopt, 1, 1),
                                       ctx.param(bank.refine_v), std::nullopt, 1, 1);
  return {fh, fv};
}

template <typename T>
Var<T> dynamic_map(Context<T>& ctx, const Var<T>& input, const FilterBank<T>& bank) {
  if (!bank.has_dynamic) throw Error("dynamic_map: filter bank has no dynamic branch");
  Var<T> d = ops::depthwise_conv2d<T>(input, ctx.param(bank.dyn_depthwise), std::nullopt, 1, 1);
  return ops::conv2d<T>(d, ctx.param(bank.dyn_pointwise), std::nullopt, 1, 0);
}

template <typename T>
Var<T> stack_scans(const std::vector<Var<T>>& maps, const std::vector<Traversal>& orders) {
  if (maps.empty()) throw ShapeError("stack_scans: no maps");
  if (!orders.empty() && orders.size() != maps.size()) throw ShapeError("stack_scans: one traversal per map");
  const Shape ref = maps[0].shape();
  if (ref.size() != 4) throw ShapeError("stack_scans: maps must be [B,C,H,W], got " + shape_str(ref));
  const std::size_t b = ref[0], c = ref[1], hw = ref[2] * ref[3];
  std::vector<Var<T>> streams;
  for (std::size_t k = 0; k < maps.size(); ++k) {
    if (maps[k].shape() != ref) {
      throw ShapeError("stack_scans: map " + std::to_string(k) + " " + shape_str(maps[k].shape()) + " vs " +
                       shape_str(ref));
    }
    Var<T> flat = ops::reshape(maps[k], {b, c, hw});
    if (!orders.empty()) flat = ops::gather(flat, 2, orders[k]);
    streams.push_back(ops::permute(flat, {0, 2, 1}));
  }
  return streams.size() == 1 ? streams[0] : ops::concat(streams, 1);
}

template <typename T>
std::vector<Var<T>> unstack_scans(const Var<T>& seq, std::size_t count, std::size_t h, std::size_t w,
                                  const std::vector<Traversal>& orders) {
  const Shape& s = seq.shape();
  if (s.size() != 3 || s[1] != count * h * w) {
    throw ShapeError("unstack_scans: sequence " + shape_str(s) + " is not " + std::to_string(count) + " x " +
                     std::to_string(h) + "x" + std::to_string(w) + " tokens");
  }
  const std::size_t b = s[0], c = s[2], hw = h * w;
  std::vector<Var<T>> maps;
  for (std::size_t k = 0; k < count; ++k) {
    Var<T> seg = count == 1 ? seq : ops::slice(seq, 1, k * hw, hw);
    Var<T> chw = ops::permute(seg, {0, 2, 1});
    if (!orders.empty()) chw = ops::gather(chw, 2, inverse(orders[k]));
    maps.push_back(ops::reshape(chw, {b, c, h, w}));
  }
  return maps;
}

template <typename T>
Var<T> adaptive_merge(Context<T>& ctx, const std::vector<Var<T>>& maps, const AdaptiveWeights<T>& weights) {
  if (weights.w.value.numel() != maps.size()) {
    throw ShapeError("adaptive_merge: " + std::to_string(maps.size()) + " maps but " +
                     std::to_string(weights.w.value.numel()) + " weights");
  }
  Var<T> alpha = ops::softmax(ctx.param(weights.w), 0);
  return ops::weighted_sum(maps, alpha);
}

template <typename T>
Var<T> uniform_merge(Context<T>& ctx, const std::vector<Var<T>>& maps) {
  const std::size_t k = maps.size();
  return ops::weighted_sum(maps, ctx.constant(Tensor<T>({k}, T(1) / static_cast<T>(k))));
}

template <typename T>
MfilScan<T> MfilScan<T>::init(const std::string& prefix, std::size_t channels, std::size_t state,
                              const MfilScanConfig& config, Rng& rng) {
  MfilScan s;
  s.config = config;
  s.bank = FilterBank<T>::init(prefix + ".bank", channels, config.mode, rng);
  s.core = ssm::SsmCore<T>::init(prefix + ".ssm", channels, state, rng);
  const std::size_t k = segment_count(config.mode);
  if (config.adaptive_weighting && k > 1) s.weights = AdaptiveWeights<T>::init(prefix, k);
  return s;
}

template <typename T>
void MfilScan<T>::collect(ParamList<T>& out) {
  bank.collect(out);
  core.collect(out, config.scan.use_skip);
  if (weights) out.push_back(&weights->w);
}

template <typename T>
std::size_t MfilScan<T>::param_count(std::size_t channels, std::size_t state, const MfilScanConfig& config) {
  const std::size_t k = segment_count(config.mode);
  return FilterBank<T>::param_count(channels, config.mode) +
         ssm::SsmCore<T>::param_count(channels, state, config.scan.use_skip) +
         (config.adaptive_weighting && k > 1 ? k : 0);
}

template <typename T>
Var<T> mfil_ssm(Context<T>& ctx, const Var<T>& x, const MfilScan<T>& scan) {
  if (x.value().rank() != 4) throw ShapeError("mfil_ssm: input must be [B,C,H,W], got " + shape_str(x.shape()));
  const std::size_t h = x.dim(2), w = x.dim(3);
  const MfilScanConfig& cfg = scan.config;
  std::vector<Var<T>> maps;
  std::vector<Traversal> orders;
  switch (cfg.mode) {
    case ScanMode::multi_filter: {
      auto [fh, fv] = orthogonal_maps(ctx, x, scan.bank);
      maps = {x, fh, fv, dynamic_map(ctx, x, scan.bank)};
      break;
    }
    case ScanMode::single_flatten:
      maps = {x};
      break;
    case ScanMode::cross_4dir: {
      maps = {x, x, x, x};
      const Traversal row = row_major_traversal(h, w), col = column_major_traversal(h, w);
      orders = {row, col, reversed(row), reversed(col)};
      break;
    }
    case ScanMode::orig_plus_one:
      maps = {x, dynamic_map(ctx, x, scan.bank)};
      break;
  }
  ssm::ScanOptions opts = cfg.scan;
  opts.segment_length = cfg.reset_per_segment ? h * w : 0;
  Var<T> seq = ssm::selective_scan(ctx, stack_scans(maps, orders), scan.core, opts);
  std::vector<Var<T>> outs = unstack_scans(seq, maps.size(), h, w, orders);
  if (outs.size() == 1) return outs[0];
  return scan.weights ? adaptive_merge(ctx, outs, *scan.weights) : uniform_merge(ctx, outs);
}

double mfil_ssm_flops(std::size_t channels, std::size_t state, std::size_t h, std::size_t w,
                      const MfilScanConfig& config) {
  const double p = static_cast<double>(h * w), c = static_cast<double>(channels);
  const std::size_t k = segment_count(config.mode);
  double f = 0.0;
  if (config.mode == ScanMode::multi_filter) f += 4 * 9 * p * c;                  // two Sobel + two refiners
  if (config.mode == ScanMode::multi_filter || config.mode == ScanMode::orig_plus_one) {
    f += 9 * p * c + p * c * c;                                                   // depthwise + pointwise
  }
  f += ssm::selective_scan_flops(1, k * h * w, channels, state, config.scan.use_skip);
  if (k > 1) {
    if (config.adaptive_weighting) f += 5.0 * static_cast<double>(k);              // softmax over w
    f += static_cast<double>(k) * p * c;                                          // weighted sum
  }
  return f;
}

#define MFIL_INSTANTIATE_SCAN(T)                                                                           \
  template struct FilterBank<T>;                                                                           \
  template struct AdaptiveWeights<T>;                                                                      \
  template struct MfilScan<T>;                                                                             \
  template std::pair<Var<T>, Var<T>> orthogonal_maps(Context<T>&, const Var<T>&, const FilterBank<T>&);    \
  template Var<T> dynamic_map(Context<T>&, const Var<T>&, const FilterBank<T>&);                           \
  template Var<T> stack_scans(const std::vector<Var<T>>&, const std::vector<Traversal>&);                  \
  template std::vector<Var<T>> unstack_scans(const Var<T>&, std::size_t, std::size_t, std::size_t,         \
                                             const std::vector<Traversal>&);                               \
  template Var<T> adaptive_merge(Context<T>&, const std::vector<Var<T>>&, const AdaptiveWeights<T>&);      \
  template Var<T> uniform_merge(Context<T>&, const std::vector<Var<T>>&);                                  \
  template Var<T> mfil_ssm(Context<T>&, const Var<T>&, const MfilScan<T>&);

MFIL_INSTANTIATE_SCAN(float)
MFIL_INSTANTIATE_SCAN(double)

}  // namespace mfil
