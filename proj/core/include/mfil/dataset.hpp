#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mfil/tensor.hpp"

namespace mfil {

/// Procedural oriented-pattern images. Class k of sample i is i mod num_classes:
/// 0 horizontal stripes, 1 vertical stripes, 2 checkerboard, 3 Gaussian blob,
/// further classes cycle through diagonal stripes of alternating orientation.
struct SyntheticSpec {
  std::size_t image_size = 32;
  std::size_t num_classes = 4;
  std::size_t channels = 3;
  std::size_t size = 2048;
  double noise = 0.35;
  std::uint64_t seed = 0;
};

std::string class_name(std::size_t label);

class SyntheticDataset {
 public:
  explicit SyntheticDataset(SyntheticSpec spec);

  const SyntheticSpec& spec() const { return spec_; }
  std::size_t size() const { return spec_.size; }
  int label(std::size_t index) const { return static_cast<int>(index % spec_.num_classes); }

  /// Image [channels, S, S]; deterministic in (seed, index).
  Tensor<float> image(std::size_t index) const;

  /// Stacks images into [B, channels, S, S]; `flip[i]` mirrors sample i horizontally.
  Tensor<float> batch(const std::vector<std::size_t>& indices, const std::vector<bool>& flip = {}) const;
  std::vector<int> labels(const std::vector<std::size_t>& indices) const;

  /// Seeded permutation of [0, size) for one epoch.
  std::vector<std::size_t> epoch_order(std::uint64_t epoch) const;

 private:
  SyntheticSpec spec_;
};

}  // namespace mfil
