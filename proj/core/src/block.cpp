#include "mfil/block.hpp"

#include <cmath>

#include "mfil/ops.hpp"

namespace mfil {

template <typename T>
LayerNormParams<T> LayerNormParams<T>::init(const std::string& prefix, std::size_t channels) {
  return {{prefix + ".gamma", Tensor<T>({channels}, T(1))}, {prefix + ".beta", Tensor<T>({channels})}};
}

template <typename T>
void LayerNormParams<T>::collect(ParamList<T>& out) {
  out.push_back(&gamma);
  out.push_back(&beta);
}

template <typename T>
Var<T> apply_norm(Context<T>& ctx, const Var<T>& x, const LayerNormParams<T>& norm) {
  return ops::layer_norm(x, ctx.param(norm.gamma), ctx.param(norm.beta));
}

template <typename T>
ConvFfn<T> ConvFfn<T>::init(const std::string& prefix, std::size_t channels, std::size_t ratio, Rng& rng) {
  ConvFfn f;
  f.channels = channels;
  f.hidden = ratio * channels;
  f.fc1_w = {prefix + ".fc1.weight", trunc_normal_tensor<T>(rng, {f.hidden, channels})};
  f.fc1_b = {prefix + ".fc1.bias", Tensor<T>({f.hidden})};
  f.dw_w = {prefix + ".dw.weight", fan_in_uniform_tensor<T>(rng, {f.hidden, 1, 3, 3}, 9)};
  f.dw_b = {prefix + ".dw.bias", Tensor<T>({f.hidden})};
  f.fc2_w = {prefix + ".fc2.weight", trunc_normal_tensor<T>(rng, {channels, f.hidden})};
  f.fc2_b = {prefix + ".fc2.bias", Tensor<T>({channels})};
  return f;
}

template <typename T>
void ConvFfn<T>::collect(ParamList<T>& out) {
  for (Param<T>* p : {&fc1_w, &fc1_b, &dw_w, &dw_b, &fc2_w, &fc2_b}) out.push_back(p);
}

template <typename T>
std::size_t ConvFfn<T>::param_count(std::size_t channels, std::size_t ratio) {
  const std::size_t h = ratio * channels;
  return h * channels + h + 9 * h + h + channels * h + channels;
}

template <typename T>
Var<T> conv_ffn(Context<T>& ctx, const Var<T>& x, const ConvFfn<T>& ffn) {
  if (x.value().rank() != 4 || x.dim(3) != ffn.channels) {
    throw ShapeError("conv_ffn: expected [B,H,W," + std::to_string(ffn.channels) + "], got " + shape_str(x.shape()));
  }
  Var<T> h = ops::linear<T>(x, ctx.param(ffn.fc1_w), ctx.param(ffn.fc1_b));
  h = ops::permute(h, {0, 3, 1, 2});
  h = ops::depthwise_conv2d<T>(h, ctx.param(ffn.dw_w), ctx.param(ffn.dw_b), 1, 1);
  h = ops::permute(ops::gelu(h), {0, 2, 3, 1});
  return ops::linear<T>(h, ctx.param(ffn.fc2_w), ctx.param(ffn.fc2_b));
}

std::size_t inner_width(std::size_t channels, double ssm_ratio) {
  if (!(ssm_ratio > 0.0)) throw ConfigError("ssm_ratio must be positive");
  const auto ci = static_cast<std::size_t>(std::llround(ssm_ratio * static_cast<double>(channels)));
  return ci == 0 ? 1 : ci;
}

template <typename T>
MfilBlock<T> MfilBlock<T>::init(const std::string& prefix, std::size_t channels, const BlockConfig& config,
                                Rng& rng) {
  MfilBlock b;
  b.channels = channels;
  b.inner = inner_width(channels, config.ssm_ratio);
  b.config = config;
  b.norm1 = LayerNormParams<T>::init(prefix + ".norm1", channels);
  b.in_proj = {prefix + ".in_proj", trunc_normal_tensor<T>(rng, {2 * b.inner, channels})};
  b.branch_conv_w = {prefix + ".branch_conv.weight", fan_in_uniform_tensor<T>(rng, {b.inner, 1, 3, 3}, 9)};
  b.branch_conv_b = {prefix + ".branch_conv.bias", Tensor<T>({b.inner})};
  b.scan = MfilScan<T>::init(prefix + ".scan", b.inner, config.d_state, config.scan, rng);
  b.out_proj = {prefix + ".out_proj", trunc_normal_tensor<T>(rng, {channels, b.inner})};
  b.ffn = ConvFfn<T>::init(prefix + ".ffn", channels, config.ffn_ratio, rng);
  b.norm2 = LayerNormParams<T>::init(prefix + ".norm2", channels);
  return b;
}

template <typename T>
void MfilBlock<T>::collect(ParamList<T>& out) {
  norm1.collect(out);
  out.push_back(&in_proj);
  out.push_back(&branch_conv_w);
  out.push_back(&branch_conv_b);
  scan.collect(out);
  out.push_back(&out_proj);
  ffn.collect(out);
  norm2.collect(out);
}

template <typename T>
std::size_t MfilBlock<T>::param_count(std::size_t channels, const BlockConfig& config) {
  const std::size_t c = channels, ci = inner_width(channels, config.ssm_ratio);
  return 4 * c + 2 * ci * c + 10 * ci + MfilScan<T>::param_count(ci, config.d_state, config.scan) + ci * c +
         ConvFfn<T>::param_count(c, config.ffn_ratio);
}

namespace {
// Per-sample stochastic depth mask, rescaled so the expectation is unchanged.
template <typename T>
Var<T> drop_path(Context<T>& ctx, const Var<T>& delta, double rate) {
  if (!ctx.training() || rate <= 0.0 || ctx.rng() == nullptr) return delta;
  std::vector<T> mask(delta.dim(0));
  for (T& m : mask) m = ctx.rng()->uniform() < rate ? T(0) : static_cast<T>(1.0 / (1.0 - rate));
  return ops::scale_samples(delta, std::move(mask));
}
}  // namespace

template <typename T>
Var<T> block_forward(Context<T>& ctx, const Var<T>& x, const MfilBlock<T>& blk) {
  if (x.value().rank() != 4 || x.dim(1) != blk.channels) {
    throw ShapeError("block_forward: expected [B," + std::to_string(blk.channels) + ",H,W], got " +
                     shape_str(x.shape()));
  }
  const std::size_t ci = blk.inner;
  Var<T> xt = ops::permute(x, {0, 2, 3, 1});
  Var<T> u = ops::linear<T>(apply_norm(ctx, xt, blk.norm1), ctx.param(blk.in_proj), std::nullopt);
  Var<T> u1 = ops::permute(ops::slice(u, 3, 0, ci), {0, 3, 1, 2});
  u1 = ops::silu(ops::depthwise_conv2d<T>(u1, ctx.param(blk.branch_conv_w), ctx.param(blk.branch_conv_b), 1, 1));
  Var<T> z = ops::permute(mfil_ssm(ctx, u1, blk.scan), {0, 2, 3, 1});
  if (!blk.config.bypass_gate) z = ops::mul(z, ops::silu(ops::slice(u, 3, ci, ci)));
  Var<T> delta = ops::linear<T>(z, ctx.param(blk.out_proj), std::nullopt);
  Var<T> y = ops::add(xt, drop_path(ctx, delta, blk.config.drop_path));
  Var<T> f = apply_norm(ctx, conv_ffn(ctx, y, blk.ffn), blk.norm2);
  y = ops::add(y, drop_path(ctx, f, blk.config.drop_path));
  return ops::permute(y, {0, 3, 1, 2});
}

double block_flops(std::size_t channels, std::size_t h, std::size_t w, const BlockConfig& config) {
  const double p = static_cast<double>(h * w), c = static_cast<double>(channels);
  const std::size_t ci_n = inner_width(channels, config.ssm_ratio);
  const double ci = static_cast<double>(ci_n), hid = static_cast<double>(config.ffn_ratio * channels);
  double f = 0.0;
  f += 5 * p * c;                 // norm1
  f += p * c * 2 * ci;            // in_proj
  f += 9 * p * ci + 5 * p * ci;   // branch conv + SiLU
  f += mfil_ssm_flops(ci_n, config.d_state, h, w, config.scan);
  if (!config.bypass_gate) f += 5 * p * ci + p * ci;  // gate SiLU + product
  f += p * ci * c + p * c;        // out_proj + residual
  f += p * c * hid + 9 * p * hid + 5 * p * hid + p * hid * c;  // ConvFFN
  f += 5 * p * c + p * c;         // norm2 + residual
  return f;
}

template <typename T>
ConvBlock<T> ConvBlock<T>::init(const std::string& prefix, std::size_t channels, Rng& rng) {
  ConvBlock b;
  b.channels = channels;
  b.weight = {prefix + ".conv.weight", fan_in_uniform_tensor<T>(rng, {channels, channels, 3, 3}, 9 * channels)};
  b.bias = {prefix + ".conv.bias", Tensor<T>({channels})};
  return b;
}

template <typename T>
void ConvBlock<T>::collect(ParamList<T>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

template <typename T>
std::size_t ConvBlock<T>::param_count(std::size_t channels) {
  return 9 * channels * channels + channels;
}

template <typename T>
Var<T> conv_block_forward(Context<T>& ctx, const Var<T>& x, const ConvBlock<T>& blk) {
  Var<T> h = ops::conv2d<T>(x, ctx.param(blk.weight), ctx.param(blk.bias), 1, 1);
  return ops::add(x, ops::gelu(h));
}

double conv_block_flops(std::size_t channels, std::size_t h, std::size_t w) {
  const double p = static_cast<double>(h * w), c = static_cast<double>(channels);
  return 9 * p * c * c + 5 * p * c + p * c;
}

#define MFIL_INSTANTIATE_BLOCK(T)                                                    \
  template struct LayerNormParams<T>;                                                \
  template struct ConvFfn<T>;                                                        \
  template struct MfilBlock<T>;                                                      \
  template struct ConvBlock<T>;                                                      \
  template Var<T> apply_norm(Context<T>&, const Var<T>&, const LayerNormParams<T>&); \
  template Var<T> conv_ffn(Context<T>&, const Var<T>&, const ConvFfn<T>&);           \
  template Var<T> block_forward(Context<T>&, const Var<T>&, const MfilBlock<T>&);    \
  template Var<T> conv_block_forward(Context<T>&, const Var<T>&, const ConvBlock<T>&);

MFIL_INSTANTIATE_BLOCK(float)
MFIL_INSTANTIATE_BLOCK(double)

}  // namespace mfil
