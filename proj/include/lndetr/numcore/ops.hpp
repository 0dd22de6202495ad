#pragma once

#include <cstdint>
#include <limits>
#include <vector>

#include "lndetr/numcore/tensor.hpp"

// Differentiable op suite. Every op records itself on Graph<T>::current()
// when one is active and an input requires grad; otherwise it is a plain
// forward computation.
namespace lndetr::numcore {

// Additive attention-mask value for blocked pairs. Large enough that
// exp(sentinel - rowmax) underflows to exactly 0 in float and double.
template <typename T>
inline constexpr T kBlocked = T(-1e9);

// Elementwise a + b. `b` may match a's shape or a trailing suffix of it
// (broadcast over the leading axes).
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> add(const Tensor<T>& a, T constant);

// Elementwise a * b with the same broadcasting rule as add.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, T constant);

// 2-D matrix product with optional transposition of either operand.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_a = false,
                 bool transpose_b = false);

// input [N,C,H,W], weight [O,C,kh,kw], bias [O] or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride = 1, int padding = 0);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T>
Tensor<T> softmax(const Tensor<T>& x);  // over the last axis

// Normalizes over the last axis, then scales by gamma and shifts by beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5));

// x [n,in] * weight [in,out] + bias [out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

// Rows of table [V,d] picked by index; repeated indices accumulate gradient.
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<std::int64_t>& indices);

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);
template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::int64_t start, std::int64_t length);
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

// sum/mean reduce to a scalar; the *_last variants reduce the last axis only.
template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> sum_last(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);
template <typename T>
Tensor<T> mean_last(const Tensor<T>& x);

template <typename T>
Tensor<T> log(const Tensor<T>& x);
template <typename T>
Tensor<T> exp(const Tensor<T>& x);
template <typename T>
Tensor<T> sqrt(const Tensor<T>& x);

// Pairwise cosine similarity between the rows of a [n,d] and b [m,d] -> [n,m].
template <typename T>
Tensor<T> cosine_similarity(const Tensor<T>& a, const Tensor<T>& b, T eps = T(1e-8));

// Dense scaled dot-product attention over already-projected q [Lq,d],
// k [Lk,d], v [Lk,d] split into `heads` heads. `mask`, when defined, is an
// additive [Lq,Lk] term (0 allowed, kBlocked blocked). If `weights_out` is
// given it receives the post-softmax weights, [heads,Lq,Lk].
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               int heads, const Tensor<T>& mask = {},
                               std::vector<T>* weights_out = nullptr);

// Non-differentiable selections; the results carry no gradient.
template <typename T>
std::vector<std::int64_t> topk_indices(const Tensor<T>& x, std::int64_t k);
template <typename T>
T max_value(const Tensor<T>& x);

}  // namespace lndetr::numcore
