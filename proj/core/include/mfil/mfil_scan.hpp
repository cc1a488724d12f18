#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mfil/ssm.hpp"

namespace mfil {

/// How a feature map is serialized for the selective scan.
enum class ScanMode {
  multi_filter,    // [identity, horizontal Sobel, vertical Sobel, dynamic] stacked
  single_flatten,  // one row-major flatten
  cross_4dir,      // row-major, column-major and both reversals stacked
  orig_plus_one,   // [identity, dynamic]
};

std::string to_string(ScanMode mode);
/// Accepts the names above plus "original_plus_one_filter".
ScanMode parse_scan_mode(const std::string& name);
/// Number of stacked token streams the mode produces.
std::size_t segment_count(ScanMode mode);

/// Fixed 3x3 Sobel kernel responding to horizontal change (vertical edges).
Tensor<double> sobel_x_kernel();
/// Transpose of sobel_x_kernel: responds to vertical change (horizontal edges).
Tensor<double> sobel_y_kernel();

/// Scan generators. The Sobel pair is fixed and never enters the gradient map;
/// the refiners and the depthwise-separable dynamic filter are learnable.
template <typename T>
struct FilterBank {
  std::size_t channels = 0;
  bool has_orthogonal = false;
  bool has_dynamic = false;
  Param<T> refine_h;       // [C,1,3,3], identity init
  Param<T> refine_v;       // [C,1,3,3], identity init
  Param<T> dyn_depthwise;  // [C,1,3,3]
  Param<T> dyn_pointwise;  // [C,C,1,1]

  static FilterBank init(const std::string& prefix, std::size_t channels, ScanMode mode, Rng& rng);
  void collect(ParamList<T>& out);
  static std::size_t param_count(std::size_t channels, ScanMode mode);
};

/// Learnable logits w; the merge uses alpha = softmax(w).
template <typename T>
struct AdaptiveWeights {
  Param<T> w;
  static AdaptiveWeights init(const std::string& prefix, std::size_t count);
  Tensor<T> alpha() const;
};

/// Token traversal of an H x W grid: order[j] is the row-major cell visited j-th.
using Traversal = std::vector<std::size_t>;
Traversal row_major_traversal(std::size_t h, std::size_t w);
Traversal column_major_traversal(std::size_t h, std::size_t w);
Traversal reversed(const Traversal& t);
Traversal inverse(const Traversal& t);

/// (F_h, F_v) = (DWConv_h(I * K_y), DWConv_v(I * K_x)), Sobel applied per channel, padding 1.
template <typename T>
std::pair<Var<T>, Var<T>> orthogonal_maps(Context<T>& ctx, const Var<T>& input, const FilterBank<T>& bank);

/// Depthwise 3x3 (padding 1) followed by a pointwise 1x1 channel mix.
template <typename T>
Var<T> dynamic_map(Context<T>& ctx, const Var<T>& input, const FilterBank<T>& bank);

/// Flattens each [B,C,H,W] map (row-major, or along its traversal when given) and
/// concatenates the token streams in argument order into [B, K*H*W, C].
template <typename T>
Var<T> stack_scans(const std::vector<Var<T>>& maps, const std::vector<Traversal>& orders = {});

/// Inverse of stack_scans: K contiguous length-HW segments back to [B,C,H,W] maps.
template <typename T>
std::vector<Var<T>> unstack_scans(const Var<T>& seq, std::size_t count, std::size_t h, std::size_t w,
                                  const std::vector<Traversal>& orders = {});

/// sum_i softmax(w)_i * maps[i].
template <typename T>
Var<T> adaptive_merge(Context<T>& ctx, const std::vector<Var<T>>& maps, const AdaptiveWeights<T>& weights);

/// Equal-weight merge used when adaptive weighting is switched off.
template <typename T>
Var<T> uniform_merge(Context<T>& ctx, const std::vector<Var<T>>& maps);

struct MfilScanConfig {
  ScanMode mode = ScanMode::multi_filter;
  bool adaptive_weighting = true;
  /// Reset the hidden state at every stacked segment boundary instead of carrying it.
  bool reset_per_segment = false;
  ssm::ScanOptions scan;
};

/// Filter bank, shared selective scan and merge weights of one block.
template <typename T>
struct MfilScan {
  MfilScanConfig config;
  FilterBank<T> bank;
  ssm::SsmCore<T> core;
  std::optional<AdaptiveWeights<T>> weights;

  static MfilScan init(const std::string& prefix, std::size_t channels, std::size_t state,
                       const MfilScanConfig& config, Rng& rng);
  void collect(ParamList<T>& out);
  static std::size_t param_count(std::size_t channels, std::size_t state, const MfilScanConfig& config);
};

/// stack(x, F_h, F_v, F_dyn) -> selective scan -> unstack -> merge; other modes per ScanMode.
template <typename T>
Var<T> mfil_ssm(Context<T>& ctx, const Var<T>& x, const MfilScan<T>& scan);

double mfil_ssm_flops(std::size_t channels, std::size_t state, std::size_t h, std::size_t w,
                      const MfilScanConfig& config);

}  // namespace mfil
