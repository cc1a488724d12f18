#pragma once

#include <vector>

#include "mfil/tensor.hpp"

// Straight-line reference implementations used as oracles. They share no code
// with the library kernels: plain index arithmetic, double accumulation.
namespace mfil::oracle {

Tensor<double> conv2d(const Tensor<double>& x, const Tensor<double>& k, const Tensor<double>* bias,
                      std::size_t stride, std::size_t pad);
Tensor<double> depthwise_conv2d(const Tensor<double>& x, const Tensor<double>& k, const Tensor<double>* bias,
                                std::size_t stride, std::size_t pad);
Tensor<double> linear(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>* bias);
Tensor<double> layer_norm(const Tensor<double>& x, const Tensor<double>& gamma, const Tensor<double>& beta,
                          double eps);

/// Scalar-loop selective scan: x, delta [B,L,C]; a_log [C,N]; b, c [B,L,N]; d [C] or null.
Tensor<double> selective_scan(const Tensor<double>& x, const Tensor<double>& delta, const Tensor<double>& a_log,
                              const Tensor<double>& b, const Tensor<double>& c, const Tensor<double>* d,
                              bool exact_zoh_b, std::size_t segment_length);

/// max |a - b| / max(max |b|, floor).
double rel_error(const Tensor<double>& a, const Tensor<double>& b, double floor = 1e-300);
double rel_error(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-300);

}  // namespace mfil::oracle
