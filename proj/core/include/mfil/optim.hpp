#pragma once

#include <cstddef>
#include <vector>

#include "mfil/params.hpp"

namespace mfil {

struct AdamWConfig {
  double lr = 1e-3;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Decoupled weight decay Adam. Decay applies to tensors of rank >= 2 only;
/// biases, norm affines, per-channel SSM vectors and merge logits are not decayed.
class AdamW {
 public:
  AdamW(ParamList<float> params, AdamWConfig config);

  /// grads[i] pairs with the i-th registered parameter.
  void step(const std::vector<Tensor<float>>& grads, double lr);
  std::size_t steps_taken() const { return t_; }

 private:
  ParamList<float> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

/// Linear warmup from 0 over `warmup` steps, then cosine from peak down to floor_ratio * peak.
/// `step` is 0-based; the value returned is the rate used for that update.
double cosine_lr(std::size_t step, std::size_t total, std::size_t warmup, double peak, double floor_ratio = 1e-6);

}  // namespace mfil
