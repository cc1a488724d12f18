#include "mfil/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "mfil/random.hpp"

namespace mfil {

std::string class_name(std::size_t label) {
  static const char* names[] = {"horizontal_stripes", "vertical_stripes", "checkerboard", "blob"};
  if (label < 4) return names[label];
  return "diagonal_" + std::to_string(label - 4);
}

SyntheticDataset::SyntheticDataset(SyntheticSpec spec) : spec_(spec) {
  if (spec_.image_size == 0 || spec_.num_classes < 2 || spec_.channels == 0 || spec_.size == 0) {
    throw ConfigError("synthetic dataset needs image_size > 0, num_classes >= 2, channels > 0, size > 0");
  }
  if (!(spec_.noise >= 0.0)) throw ConfigError("synthetic dataset noise must be non-negative");
}

Tensor<float> SyntheticDataset::image(std::size_t index) const {
  if (index >= spec_.size) throw ShapeError("sample index " + std::to_string(index) + " out of range");
  const std::size_t s = spec_.image_size, k = index % spec_.num_classes;
  Rng rng(mix_seed(spec_.seed, index));
  const double two_pi = 2.0 * std::numbers::pi;
  const double period = rng.uniform(4.0, 8.0);
  const double phase = rng.uniform(0.0, two_pi);
  const double cx = rng.uniform(0.3, 0.7) * static_cast<double>(s);
  const double cy = rng.uniform(0.3, 0.7) * static_cast<double>(s);
  const double radius = rng.uniform(0.12, 0.25) * static_cast<double>(s);
  const double contrast = rng.uniform(0.7, 1.3);
  std::vector<double> gain(spec_.channels);
  for (double& g : gain) g = rng.uniform(0.6, 1.4);

  Tensor<float> img({spec_.channels, s, s});
  for (std::size_t y = 0; y < s; ++y) {
    for (std::size_t x = 0; x < s; ++x) {
      const double fy = static_cast<double>(y), fx = static_cast<double>(x);
      double v = 0.0;
      switch (k) {
        case 0: v = std::sin(two_pi * fy / period + phase); break;
        case 1: v = std::sin(two_pi * fx / period + phase); break;
        case 2: v = std::sin(two_pi * fx / period + phase) * std::sin(two_pi * fy / period + phase) >= 0 ? 1 : -1; break;
        case 3: {
          const double r2 = (fx - cx) * (fx - cx) + (fy - cy) * (fy - cy);
          v = 2.0 * std::exp(-r2 / (2.0 * radius * radius)) - 0.5;
          break;
        }
        default: {
          const double sign = (k - 4) % 2 == 0 ? 1.0 : -1.0;
          v = std::sin(two_pi * (fx + sign * fy) / (period * std::numbers::sqrt2) + phase);
          break;
        }
      }
      for (std::size_t c = 0; c < spec_.channels; ++c) {
        img[(c * s + y) * s + x] = static_cast<float>(contrast * gain[c] * v + rng.normal(0.0, spec_.noise));
      }
    }
  }
  return img;
}

Tensor<float> SyntheticDataset::batch(const std::vector<std::size_t>& indices, const std::vector<bool>& flip) const {
  if (indices.empty()) throw ShapeError("empty batch");
  if (!flip.empty() && flip.size() != indices.size()) throw ShapeError("flip mask length mismatch");
  const std::size_t c = spec_.channels, s = spec_.image_size, per = c * s * s;
  Tensor<float> out({indices.size(), c, s, s});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const Tensor<float> img = image(indices[b]);
    const bool f = !flip.empty() && flip[b];
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x)
          out[b * per + (ch * s + y) * s + x] = img[(ch * s + y) * s + (f ? s - 1 - x : x)];
  }
  return out;
}

std::vector<int> SyntheticDataset::labels(const std::vector<std::size_t>& indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(label(i));
  return out;
}

std::vector<std::size_t> SyntheticDataset::epoch_order(std::uint64_t epoch) const {
  std::vector<std::size_t> order(spec_.size);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix_seed(spec_.seed ^ 0x5eedULL, epoch));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  return order;
}

}  // namespace mfil
