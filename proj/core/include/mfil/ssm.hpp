#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "mfil/linalg.hpp"
#include "mfil/params.hpp"

namespace mfil::ssm {

using linalg::Matrix;

// ---------------------------------------------------------------------------
// Linear time-invariant state-space machinery (f64, explicit matrices).
// ---------------------------------------------------------------------------

/// Continuous triple (A, B, C) with a step size. A is [N,N], B is [N,1], C is [1,N].
struct LtiSsm {
  Matrix a;
  Matrix b;
  Matrix c;
  double delta = 1.0;
};

struct ZohPair {
  Matrix a_bar;  // exp(delta A)
  Matrix b_bar;  // (delta A)^-1 (exp(delta A) - I) delta B
};

/// Zero-order-hold discretization of a general (N x N) evolution matrix.
/// Throws NumericError when delta <= 0 or delta*A is singular.
ZohPair discretize_zoh(const Matrix& a, const Matrix& b, double delta);

/// Below this |delta*a| the diagonal path switches to the first-order limit b_bar = delta*b.
inline constexpr double kZohLimitThreshold = 1e-8;

struct DiagonalZoh {
  std::vector<double> a_bar;
  std::vector<double> b_bar;
};

/// Elementwise ZOH for a diagonal A given as its diagonal.
DiagonalZoh discretize_zoh_diagonal(std::span<const double> a, std::span<const double> b, double delta);

/// Per-token step sizes: one DiagonalZoh per entry of `deltas`.
std::vector<DiagonalZoh> discretize_zoh_diagonal(std::span<const double> a, std::span<const double> b,
                                                 std::span<const double> deltas);

/// h_t = A_bar h_{t-1} + B_bar x_t, y_t = C h_t. `h0` defaults to zeros.
std::vector<double> scan_recurrent(const Matrix& a_bar, const Matrix& b_bar, const Matrix& c,
                                   std::span<const double> x, std::span<const double> h0 = {});
std::vector<double> scan_recurrent_diagonal(std::span<const double> a_bar, std::span<const double> b_bar,
                                            std::span<const double> c, std::span<const double> x,
                                            std::span<const double> h0 = {});

/// K = (C B_bar, C A_bar B_bar, ..., C A_bar^{L-1} B_bar).
std::vector<double> lti_kernel(const Matrix& a_bar, const Matrix& b_bar, const Matrix& c, std::size_t length);
std::vector<double> lti_kernel_diagonal(std::span<const double> a_bar, std::span<const double> b_bar,
                                        std::span<const double> c, std::size_t length);

/// Causal convolution y_t = sum_{s<=t} K_{t-s} x_s.
std::vector<double> causal_conv(std::span<const double> x, std::span<const double> kernel);

// ---------------------------------------------------------------------------
// Selective (input-dependent) scan.
// ---------------------------------------------------------------------------

struct ScanOptions {
  /// Exact ZOH input matrix (expm1(delta a)/a * B) instead of the first-order delta*B.
  bool exact_zoh_b = false;
  bool use_skip = true;
  /// When nonzero the hidden state resets to zero every `segment_length` tokens.
  std::size_t segment_length = 0;
  /// Chunked fast path; false selects the sequential reference.
  bool chunked = true;
  std::size_t chunk = 64;
};

/// Parameters of one selective SSM over `channels` lanes with `state` states per lane.
template <typename T>
struct SsmCore {
  std::size_t channels = 0;
  std::size_t state = 1;
  std::size_t dt_rank = 1;
  Param<T> a_log;     // [C,N], A = -exp(a_log)
  Param<T> x_proj;    // [R+2N, C] -> (dt_low, B, C) per token
  Param<T> dt_proj;   // [C, R]
  Param<T> dt_bias;   // [C]
  Param<T> d_skip;    // [C]

  static SsmCore init(const std::string& prefix, std::size_t channels, std::size_t state, Rng& rng);
  void collect(ParamList<T>& out, bool use_skip);
  static std::size_t param_count(std::size_t channels, std::size_t state, bool use_skip);
};

/// max(C/16, 1).
std::size_t delta_rank(std::size_t channels);

/// The fused recurrence. x, delta: [B,L,C]; a_log: [C,N]; b, c: [B,L,N]; d: [C] or absent.
/// y_t = C_t . h_t + d * x_t with h_t = exp(delta_t a) h_{t-1} + Bbar_t x_t.
template <typename T>
Var<T> selective_scan_core(const Var<T>& x, const Var<T>& delta, const Var<T>& a_log, const Var<T>& b,
                           const Var<T>& c, const std::optional<Var<T>>& d, const ScanOptions& opts);

/// Full selective scan on x [B,L,C]: projections, softplus step size, fused recurrence.
template <typename T>
Var<T> selective_scan(Context<T>& ctx, const Var<T>& x, const SsmCore<T>& core, const ScanOptions& opts);

/// FLOPs of selective_scan for a [B,L,C] input under the counter conventions.
double selective_scan_flops(std::size_t batch, std::size_t length, std::size_t channels, std::size_t state,
                            bool use_skip);

}  // namespace mfil::ssm
