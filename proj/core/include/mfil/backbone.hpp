#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mfil/block.hpp"

namespace mfil {

enum class BlockKind { mfil, conv3x3 };

struct VariantConfig {
  std::string name = "custom";
  std::array<std::size_t, 4> dims{8, 16, 32, 64};
  std::array<std::size_t, 4> depths{1, 1, 2, 1};
  std::size_t in_channels = 3;
  std::size_t d_state = 1;
  double ssm_ratio = 1.0;
  std::size_t ffn_ratio = 4;
  std::size_t num_classes = 4;
  double drop_path = 0.0;
  ScanMode scan_mode = ScanMode::multi_filter;
  bool adaptive_weighting = true;
  bool reset_per_segment = false;
  bool exact_zoh_b = false;
  BlockKind block_kind = BlockKind::mfil;

  static VariantConfig tiny();
  static VariantConfig small();
  static VariantConfig base();
  static VariantConfig desk();
  static VariantConfig named(const std::string& name);

  /// Throws ConfigError on inconsistent dims/depths or out-of-range knobs.
  void validate() const;
  BlockConfig block_config() const;
};

/// Spatial side after the stem and after each downsampler, then the final stage output.
std::vector<std::size_t> spatial_trace(std::size_t side);

struct ForwardOptions {
  /// Return the feature map [B,C,H,W] at the end of this stage instead of logits; -1 for logits.
  int stop_stage = -1;
  /// Run only stem, downsamplers and head (blocks treated as identity).
  bool skip_blocks = false;
  /// Filled with the spatial side seen at the stem output, after each downsampler and at the end.
  std::vector<std::size_t>* trace = nullptr;
};

template <typename T>
struct Downsampler {
  Param<T> weight;  // [C_out, C_in, k, k]
  Param<T> bias;
  LayerNormParams<T> norm;
};

template <typename T>
struct Backbone {
  VariantConfig config;
  Downsampler<T> stem;                       // conv 4x4 stride 4
  std::array<std::vector<MfilBlock<T>>, 4> stages;
  std::array<std::vector<ConvBlock<T>>, 4> conv_stages;
  std::vector<Downsampler<T>> downsamplers;  // conv 2x2 stride 2, three of them
  LayerNormParams<T> head_norm;
  Param<T> head_w;  // [K, C3]
  Param<T> head_b;  // [K]

  static Backbone build(const VariantConfig& config, std::uint64_t seed);
  /// Every learnable tensor in a fixed registration order.
  ParamList<T> parameters();
  std::size_t parameter_count() const;

  /// Same architecture and values in another precision.
  template <typename U>
  Backbone<U> cast() const {
    Backbone<U> out = Backbone<U>::build(config, 0);
    ParamList<U> dst = out.parameters();
    ParamList<T> src = const_cast<Backbone*>(this)->parameters();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value.template cast<U>();
    return out;
  }
};

/// Logits [B, num_classes] for images [B, in_channels, H, W]; H and W must be multiples of 32.
template <typename T>
Var<T> forward(Context<T>& ctx, const Var<T>& images, const Backbone<T>& bb, const ForwardOptions& opts = {});

/// Closed-form count; equals Backbone::build(config).parameter_count().
std::size_t count_params(const VariantConfig& config);

/// Closed-form FLOPs for one image of size h x w under the operator counter's conventions.
double count_flops(const VariantConfig& config, std::size_t h, std::size_t w);

}  // namespace mfil
