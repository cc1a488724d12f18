#pragma once

#include <string>
#include <vector>

#include "mfil/backbone.hpp"

namespace mfil::analysis {

struct ErfMap {
  Tensor<double> grid;  // [H,W], non-negative
  bool normalized = false;
};

struct ErfOptions {
  std::size_t input_size = 256;
  int stage = 3;
  std::size_t samples = 16;
  std::uint64_t seed = 0;
  bool skip_blocks = false;
  /// Mirror every sampled input left-right; pairs with an unmirrored run to test flip equivariance.
  bool mirror_inputs = false;
};

/// Mean over standard-normal inputs of |d(sum over channels of the stage's center feature)/d input|,
/// summed over input channels and scaled so the largest cell is 1.
template <typename T>
ErfMap erf(const Backbone<T>& model, const ErfOptions& options);

/// Fraction of cells above threshold * max.
double coverage(const ErfMap& map, double threshold = 1e-6);

/// Smallest axis-aligned box (height, width) containing every nonzero cell.
std::pair<std::size_t, std::size_t> support_box(const ErfMap& map);

/// |d logit_class / d image| summed over input channels; image is [C,H,W].
template <typename T>
Tensor<T> saliency(const Backbone<T>& model, const Tensor<T>& image, std::size_t class_index);

/// Plain gradient d logit_class / d image, [C,H,W].
template <typename T>
Tensor<T> input_gradient(const Backbone<T>& model, const Tensor<T>& image, std::size_t class_index);

struct GroupCheck {
  std::string name;
  std::size_t numel = 0;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  double grad_norm = 0.0;
  bool pass = false;
};

struct GradcheckReport {
  std::uint64_t seed = 0;
  std::vector<GroupCheck> groups;
  double tolerance = 1e-4;
  /// Every registered parameter appears exactly once.
  bool coverage_ok = false;
  bool pass = false;
  std::vector<std::string> failing() const;
};

struct GradcheckOptions {
  double step = 1e-4;
  double tolerance = 1e-4;
  std::size_t coords_per_group = 3;
  std::size_t image_size = 32;
  std::size_t batch = 2;
  /// Every parameter is offset by N(0, perturb^2) before checking. At initialization the
  /// scan projections are so small that scan gradients sit below finite-difference roundoff.
  double perturb = 0.2;
};

/// Central differences on a double-precision model against the analytic tape gradient, at a
/// seeded generic point near initialization.
GradcheckReport gradcheck_suite(const VariantConfig& config, std::uint64_t seed, const GradcheckOptions& options = {});

std::string format(const GradcheckReport& report);

/// Text matrix, one row per line, space separated.
std::string matrix_text(const Tensor<double>& grid);

/// Binary PGM (P5) scaled so the maximum maps to 255.
std::vector<unsigned char> to_pgm(const Tensor<double>& grid);

}  // namespace mfil::analysis
