#pragma once

// Sequence kernels used by the recurrent backbones, each a single tape node
// with a hand-written backward pass.

#include <cstddef>
#include <span>
#include <vector>

#include "ndbench/tensor.hpp"

namespace ndbench {

// x[.., S, C] W[C, N] + b[N]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

// Channel-wise exponentially decayed average over k, v of shape [.., S, E]:
//
//   wkv_t = (sum_{i<t} e^{-(t-1-i) w + k_i} v_i + e^{u + k_t} v_t)
//         / (sum_{i<t} e^{-(t-1-i) w + k_i}     + e^{u + k_t})
//
// evaluated with a running maximum exponent per channel. w is the positive
// decay [E], u the current-token bonus [E].
template <typename T>
Tensor<T> wkv_scan(const Tensor<T>& k, const Tensor<T>& v, const Tensor<T>& w, const Tensor<T>& u);

// Selective state-space scan over u, delta [.., S, D], A [D, N], B, C [.., S, N]:
//   s_t = exp(delta_t A) s_{t-1} + delta_t B_t u_t,   y_t = sum_n C_t s_t
template <typename T>
Tensor<T> selective_scan(const Tensor<T>& u, const Tensor<T>& delta, const Tensor<T>& A, const Tensor<T>& B,
                         const Tensor<T>& C);

// Depthwise causal convolution along time. x [.., S, D], weight [D, K], bias [D];
// y_t = bias + sum_j weight[j] x_{t-K+1+j}, with zeros before the window start.
template <typename T>
Tensor<T> causal_conv1d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

// Scaled dot-product attention over `heads` slices of the last axis. q [B, Sq, E],
// k and v [B, Sk, E]. With `causal`, query t attends to keys <= t (Sq == Sk).
template <typename T>
Tensor<T> multihead_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads, bool causal);

// Diagonal linear recurrence s_t = a_t * s_{t-1} + b_t, y_t = sum_d c_t s_t, all
// operands S x d row-major.
std::vector<double> ssm_scan_sequential(std::span<const double> a, std::span<const double> b, std::span<const double> c,
                                        std::size_t d);
// Same recurrence composed blockwise with the associative operator
// (a1, b1) . (a2, b2) = (a1 a2, a2 b1 + b2).
std::vector<double> ssm_scan_blocked(std::span<const double> a, std::span<const double> b, std::span<const double> c,
                                     std::size_t d, std::size_t block = 8);

}  // namespace ndbench
