#pragma once

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "mfil/autograd.hpp"
#include "mfil/random.hpp"

namespace mfil {

/// A named learnable tensor owned by a model component.
template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
};

template <typename T>
using ParamList = std::vector<Param<T>*>;

template <typename T>
using GradientMap = std::map<std::string, Tensor<T>>;

/// Per-forward state: the tape, the parameter-to-leaf binding, and the
/// training-mode switches that only matter for stochastic layers.
template <typename T>
class Context {
 public:
  explicit Context(Tape<T>& tape, bool training = false, Rng* rng = nullptr)
      : tape_(tape), training_(training), rng_(rng) {}

  Tape<T>& tape() { return tape_; }
  bool training() const { return training_; }
  Rng* rng() { return rng_; }

  /// Leaf for a parameter, created once per context.
  Var<T> param(const Param<T>& p) {
    auto it = bound_.find(&p);
    if (it != bound_.end()) return it->second;
    Var<T> v = tape_.leaf(p.value, true);
    bound_.emplace(&p, v);
    return v;
  }

  Var<T> constant(Tensor<T> t) { return tape_.constant(std::move(t)); }

  /// Gradients for every listed parameter; parameters the loss never reached map to zeros.
  GradientMap<T> gradients(const ParamList<T>& params) const {
    GradientMap<T> out;
    for (const Param<T>* p : params) {
      auto it = bound_.find(p);
      if (it != bound_.end() && !tape_.grad(it->second.id()).empty()) {
        out.emplace(p->name, tape_.grad(it->second.id()));
      } else {
        out.emplace(p->name, Tensor<T>(p->value.shape(), T(0)));
      }
    }
    return out;
  }

 private:
  Tape<T>& tape_;
  bool training_;
  Rng* rng_;
  std::unordered_map<const Param<T>*, Var<T>> bound_;
};

template <typename T>
std::size_t count_values(const ParamList<T>& params) {
  std::size_t n = 0;
  for (const Param<T>* p : params) n += p->value.numel();
  return n;
}

/// Truncated-normal (std 0.02, cut at 2 std) initialization.
template <typename T>
Tensor<T> trunc_normal_tensor(Rng& rng, Shape shape, double stddev = 0.02) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.trunc_normal(stddev));
  return t;
}

/// Uniform(+-1/sqrt(fan_in)) initialization for convolution kernels.
template <typename T>
Tensor<T> fan_in_uniform_tensor(Rng& rng, Shape shape, std::size_t fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return rng.uniform_tensor<T>(std::move(shape), -bound, bound);
}

/// Identity 3x3 depthwise kernel [C,1,3,3] (center tap 1).
template <typename T>
Tensor<T> identity_depthwise_kernel(std::size_t channels, std::size_t k = 3) {
  Tensor<T> t({channels, 1, k, k});
  for (std::size_t c = 0; c < channels; ++c) t[c * k * k + (k / 2) * k + k / 2] = T(1);
  return t;
}

}  // namespace mfil
