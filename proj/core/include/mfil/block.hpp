#pragma once

#include <cstddef>
#include <string>

#include "mfil/mfil_scan.hpp"

namespace mfil {

template <typename T>
struct LayerNormParams {
  Param<T> gamma;
  Param<T> beta;
  static LayerNormParams init(const std::string& prefix, std::size_t channels);
  void collect(ParamList<T>& out);
};

/// Channel-last layer norm of an [..., C] variable.
template <typename T>
Var<T> apply_norm(Context<T>& ctx, const Var<T>& x, const LayerNormParams<T>& norm);

/// fc1 (C -> rC) -> depthwise 3x3 -> GELU -> fc2 (rC -> C).
template <typename T>
struct ConvFfn {
  std::size_t channels = 0;
  std::size_t hidden = 0;
  Param<T> fc1_w, fc1_b;  // [rC, C], [rC]
  Param<T> dw_w, dw_b;    // [rC,1,3,3], [rC]
  Param<T> fc2_w, fc2_b;  // [C, rC], [C]

  static ConvFfn init(const std::string& prefix, std::size_t channels, std::size_t ratio, Rng& rng);
  void collect(ParamList<T>& out);
  static std::size_t param_count(std::size_t channels, std::size_t ratio);
};

/// x: [B,H,W,C] channel-last in and out.
template <typename T>
Var<T> conv_ffn(Context<T>& ctx, const Var<T>& x, const ConvFfn<T>& ffn);

struct BlockConfig {
  std::size_t d_state = 1;
  double ssm_ratio = 1.0;
  std::size_t ffn_ratio = 4;
  double drop_path = 0.0;
  MfilScanConfig scan;
  /// Test hook: replace the SiLU gate with ones so only the scan branch reaches out_proj.
  bool bypass_gate = false;
};

/// round(ssm_ratio * C), at least 1.
std::size_t inner_width(std::size_t channels, double ssm_ratio);

template <typename T>
struct MfilBlock {
  std::size_t channels = 0;
  std::size_t inner = 0;
  BlockConfig config;
  LayerNormParams<T> norm1, norm2;
  Param<T> in_proj;                  // [2*Ci, C]
  Param<T> branch_conv_w, branch_conv_b;  // [Ci,1,3,3], [Ci]
  MfilScan<T> scan;
  Param<T> out_proj;                 // [C, Ci]
  ConvFfn<T> ffn;

  static MfilBlock init(const std::string& prefix, std::size_t channels, const BlockConfig& config, Rng& rng);
  void collect(ParamList<T>& out);
  static std::size_t param_count(std::size_t channels, const BlockConfig& config);
};

/// [B,C,H,W] -> [B,C,H,W].
template <typename T>
Var<T> block_forward(Context<T>& ctx, const Var<T>& x, const MfilBlock<T>& blk);

double block_flops(std::size_t channels, std::size_t h, std::size_t w, const BlockConfig& config);

/// Pure-convolution stand-in with the same residual layout: y = x + GELU(conv3x3(x) + b).
template <typename T>
struct ConvBlock {
  std::size_t channels = 0;
  Param<T> weight;  // [C,C,3,3]
  Param<T> bias;    // [C]
  static ConvBlock init(const std::string& prefix, std::size_t channels, Rng& rng);
  void collect(ParamList<T>& out);
  static std::size_t param_count(std::size_t channels);
};

template <typename T>
Var<T> conv_block_forward(Context<T>& ctx, const Var<T>& x, const ConvBlock<T>& blk);

double conv_block_flops(std::size_t channels, std::size_t h, std::size_t w);

}  // namespace mfil
