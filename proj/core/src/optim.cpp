#include "mfil/optim.hpp"

#include <cmath>
#include <numbers>

namespace mfil {

AdamW::AdamW(ParamList<float> params, AdamWConfig config) : params_(std::move(params)), cfg_(config) {
  if (!(cfg_.lr > 0.0)) throw ConfigError("AdamW: learning rate must be positive");
  for (const Param<float>* p : params_) {
    m_.emplace_back(p->value.numel(), 0.0);
    v_.emplace_back(p->value.numel(), 0.0);
  }
}

void AdamW::step(const std::vector<Tensor<float>>& grads, double lr) {
  if (grads.size() != params_.size()) throw ShapeError("AdamW: gradient count mismatch");
  ++t_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor<float>& w = params_[i]->value;
    const Tensor<float>& g = grads[i];
    if (g.shape() != w.shape()) throw ShapeError("AdamW: gradient shape mismatch for " + params_[i]->name);
    const double decay = w.rank() >= 2 ? cfg_.weight_decay : 0.0;
    for (std::size_t j = 0; j < w.numel(); ++j) {
      const double gj = g[j];
      m_[i][j] = b1 * m_[i][j] + (1.0 - b1) * gj;
      v_[i][j] = b2 * v_[i][j] + (1.0 - b2) * gj * gj;
      const double mh = m_[i][j] / c1, vh = v_[i][j] / c2;
      double wj = w[j];
      wj -= lr * decay * wj;
      wj -= lr * mh / (std::sqrt(vh) + cfg_.eps);
      w[j] = static_cast<float>(wj);
    }
  }
}

double cosine_lr(std::size_t step, std::size_t total, std::size_t warmup, double peak, double floor_ratio) {
  if (total == 0) throw ConfigError("cosine_lr: total steps must be positive");
  if (step < warmup) return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const double span = static_cast<double>(total > warmup + 1 ? total - warmup - 1 : 1);
  const double progress = std::min(1.0, static_cast<double>(step - warmup) / span);
  const double floor = floor_ratio * peak;
  return floor + 0.5 * (peak - floor) * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace mfil
