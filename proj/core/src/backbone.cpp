#include "mfil/backbone.hpp"

#include "mfil/ops.hpp"

namespace mfil {

VariantConfig VariantConfig::tiny() {
  VariantConfig c;
  c.name = "tiny";
  c.dims = {94, 188, 376, 752};
  c.depths = {1, 3, 8, 2};
  c.num_classes = 1000;
  return c;
}

VariantConfig VariantConfig::small() {
  VariantConfig c = tiny();
  c.name = "small";
  c.depths = {2, 2, 18, 2};
  return c;
}

VariantConfig VariantConfig::base() {
  VariantConfig c = small();
  c.name = "base";
  c.dims = {128, 256, 512, 1024};
  return c;
}

VariantConfig VariantConfig::desk() {
  VariantConfig c;
  c.name = "desk";
  return c;
}

VariantConfig VariantConfig::named(const std::string& name) {
  if (name == "tiny") return tiny();
  if (name == "small") return small();
  if (name == "base") return base();
  if (name == "desk") return desk();
  throw ConfigError("unknown variant '" + name + "' (expected tiny, small, base or desk)");
}

void VariantConfig::validate() const {
  for (std::size_t s = 0; s < 4; ++s) {
    if (dims[s] == 0) throw ConfigError("dims[" + std::to_string(s) + "] must be positive");
    if (depths[s] == 0) throw ConfigError("depths[" + std::to_string(s) + "] must be at least 1");
    if (s > 0 && dims[s] <= dims[s - 1]) {
      throw ConfigError("dims must increase across stages: dims[" + std::to_string(s - 1) + "]=" +
                        std::to_string(dims[s - 1]) + ", dims[" + std::to_string(s) + "]=" + std::to_string(dims[s]));
    }
  }
  if (in_channels == 0) throw ConfigError("in_channels must be positive");
  if (d_state == 0) throw ConfigError("d_state must be at least 1");
  if (!(ssm_ratio > 0.0)) throw ConfigError("ssm_ratio must be positive");
  if (ffn_ratio == 0) throw ConfigError("ffn_ratio must be at least 1");
  if (num_classes == 0) throw ConfigError("num_classes must be positive");
  if (!(drop_path >= 0.0 && drop_path < 1.0)) throw ConfigError("drop_path must be in [0,1)");
}

BlockConfig VariantConfig::block_config() const {
  BlockConfig b;
  b.d_state = d_state;
  b.ssm_ratio = ssm_ratio;
  b.ffn_ratio = ffn_ratio;
  b.drop_path = drop_path;
  b.scan.mode = scan_mode;
  b.scan.adaptive_weighting = adaptive_weighting;
  b.scan.reset_per_segment = reset_per_segment;
  b.scan.scan.exact_zoh_b = exact_zoh_b;
  return b;
}

std::vector<std::size_t> spatial_trace(std::size_t side) {
  if (side == 0 || side % 32 != 0) throw ShapeError("input side " + std::to_string(side) + " is not a multiple of 32");
  std::vector<std::size_t> t{side / 4};
  for (int s = 0; s < 3; ++s) t.push_back(t.back() / 2);
  t.push_back(t.back());
  return t;
}

namespace {

template <typename T>
Downsampler<T> make_down(const std::string& prefix, std::size_t cin, std::size_t cout, std::size_t k, Rng& rng) {
  return {{prefix + ".weight", fan_in_uniform_tensor<T>(rng, {cout, cin, k, k}, cin * k * k)},
          {prefix + ".bias", Tensor<T>({cout})},
          LayerNormParams<T>::init(prefix + ".norm", cout)};
}

template <typename T>
Var<T> apply_down(Context<T>& ctx, const Var<T>& x, const Downsampler<T>& d, std::size_t stride) {
  Var<T> y = ops::conv2d<T>(x, ctx.param(d.weight), ctx.param(d.bias), stride, 0);
  y = apply_norm(ctx, ops::permute(y, {0, 2, 3, 1}), d.norm);
  return ops::permute(y, {0, 3, 1, 2});
}

}  // namespace

template <typename T>
Backbone<T> Backbone<T>::build(const VariantConfig& config, std::uint64_t seed) {
  config.validate();
  Backbone bb;
  bb.config = config;
  Rng rng(seed);
  const BlockConfig bc = config.block_config();
  bb.stem = make_down<T>("stem", config.in_channels, config.dims[0], 4, rng);
  for (std::size_t s = 0; s < 4; ++s) {
    if (s > 0) {
      bb.downsamplers.push_back(
          make_down<T>("down" + std::to_string(s), config.dims[s - 1], config.dims[s], 2, rng));
    }
    for (std::size_t b = 0; b < config.depths[s]; ++b) {
      const std::string prefix = "stage" + std::to_string(s) + ".block" + std::to_string(b);
      if (config.block_kind == BlockKind::mfil) {
        bb.stages[s].push_back(MfilBlock<T>::init(prefix, config.dims[s], bc, rng));
      } else {
        bb.conv_stages[s].push_back(ConvBlock<T>::init(prefix, config.dims[s], rng));
      }
    }
  }
  bb.head_norm = LayerNormParams<T>::init("head.norm", config.dims[3]);
  bb.head_w = {"head.weight", trunc_normal_tensor<T>(rng, {config.num_classes, config.dims[3]})};
  bb.head_b = {"head.bias", Tensor<T>({config.num_classes})};
  return bb;
}

template <typename T>
ParamList<T> Backbone<T>::parameters() {
  ParamList<T> out;
  auto down = [&out](Downsampler<T>& d) {
    out.push_back(&d.weight);
    out.push_back(&d.bias);
    d.norm.collect(out);
  };
  down(stem);
  for (std::size_t s = 0; s < 4; ++s) {
    if (s > 0) down(downsamplers[s - 1]);
    for (auto& b : stages[s]) b.collect(out);
    for (auto& b : conv_stages[s]) b.collect(out);
  }
  head_norm.collect(out);
  out.push_back(&head_w);
  out.push_back(&head_b);
  return out;
}

template <typename T>
std::size_t Backbone<T>::parameter_count() const {
  return count_values(const_cast<Backbone*>(this)->parameters());
}

template <typename T>
Var<T> forward(Context<T>& ctx, const Var<T>& images, const Backbone<T>& bb, const ForwardOptions& opts) {
  const VariantConfig& cfg = bb.config;
  const Shape& s = images.shape();
  if (s.size() != 4 || s[1] != cfg.in_channels) {
    throw ShapeError("forward: images must be [B," + std::to_string(cfg.in_channels) + ",H,W], got " + shape_str(s));
  }
  if (s[2] % 32 != 0 || s[3] % 32 != 0) {
    throw ShapeError("forward: spatial size " + std::to_string(s[2]) + "x" + std::to_string(s[3]) +
                     " is not divisible by 32");
  }
  if (opts.stop_stage < -1 || opts.stop_stage > 3) {
    throw ShapeError("forward: stage " + std::to_string(opts.stop_stage) + " out of range [0,3]");
  }
  if (opts.trace) opts.trace->clear();
  Var<T> x = apply_down(ctx, images, bb.stem, 4);
  for (std::size_t st = 0; st < 4; ++st) {
    if (st > 0) x = apply_down(ctx, x, bb.downsamplers[st - 1], 2);
    if (opts.trace) opts.trace->push_back(x.dim(2));
    if (!opts.skip_blocks) {
      for (const auto& b : bb.stages[st]) x = block_forward(ctx, x, b);
      for (const auto& b : bb.conv_stages[st]) x = conv_block_forward(ctx, x, b);
    }
    if (static_cast<int>(st) == opts.stop_stage) return x;
  }
  if (opts.trace) opts.trace->push_back(x.dim(2));
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Var<T> t = apply_norm(ctx, ops::permute(x, {0, 2, 3, 1}), bb.head_norm);
  Var<T> pooled = ops::mean_axis(ops::reshape(t, {b, hw, c}), 1);
  return ops::linear<T>(pooled, ctx.param(bb.head_w), ctx.param(bb.head_b));
}

std::size_t count_params(const VariantConfig& config) {
  config.validate();
  const auto& d = config.dims;
  std::size_t n = d[0] * config.in_channels * 16 + d[0] + 2 * d[0];
  const BlockConfig bc = config.block_config();
  for (std::size_t s = 0; s < 4; ++s) {
    if (s > 0) n += d[s] * d[s - 1] * 4 + d[s] + 2 * d[s];
    const std::size_t per = config.block_kind == BlockKind::mfil ? MfilBlock<float>::param_count(d[s], bc)
                                                                 : ConvBlock<float>::param_count(d[s]);
    n += config.depths[s] * per;
  }
  return n + 2 * d[3] + config.num_classes * d[3] + config.num_classes;
}

double count_flops(const VariantConfig& config, std::size_t h, std::size_t w) {
  config.validate();
  if (h % 32 != 0 || w % 32 != 0) throw ShapeError("count_flops: spatial size must be divisible by 32");
  const BlockConfig bc = config.block_config();
  std::size_t sh = h / 4, sw = w / 4;
  double f = 0.0;
  auto down = [&f](std::size_t cin, std::size_t cout, std::size_t k, std::size_t oh, std::size_t ow) {
    const double p = static_cast<double>(oh * ow);
    f += p * static_cast<double>(cout * cin * k * k) + 5.0 * p * static_cast<double>(cout);
  };
  down(config.in_channels, config.dims[0], 4, sh, sw);
  for (std::size_t s = 0; s < 4; ++s) {
    if (s > 0) {
      sh /= 2;
      sw /= 2;
      down(config.dims[s - 1], config.dims[s], 2, sh, sw);
    }
    const double per = config.block_kind == BlockKind::mfil ? block_flops(config.dims[s], sh, sw, bc)
                                                            : conv_block_flops(config.dims[s], sh, sw);
    f += static_cast<double>(config.depths[s]) * per;
  }
  const double p = static_cast<double>(sh * sw), c = static_cast<double>(config.dims[3]);
  f += 5.0 * p * c + p * c + c * static_cast<double>(config.num_classes);
  return f;
}

template struct Backbone<float>;
template struct Backbone<double>;
template Var<float> forward(Context<float>&, const Var<float>&, const Backbone<float>&, const ForwardOptions&);
template Var<double> forward(Context<double>&, const Var<double>&, const Backbone<double>&, const ForwardOptions&);

}  // namespace mfil
