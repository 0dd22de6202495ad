#pragma once

#include "lndetr/numcore/ops.hpp"

// Helpers composed purely from the op suite, so they need no backward of
// their own.
namespace lndetr::numcore {

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
  return mul(x, T(-1));
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, neg(b));
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return mul(x, x);
}

template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
  return add(relu(x), relu(neg(x)));
}

template <typename T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) {
  return add(b, relu(sub(a, b)));
}

template <typename T>
Tensor<T> minimum(const Tensor<T>& a, const Tensor<T>& b) {
  return sub(a, relu(sub(a, b)));
}

// a / b for strictly positive b.
template <typename T>
Tensor<T> div_positive(const Tensor<T>& a, const Tensor<T>& b) {
  return mul(a, exp(neg(log(b))));
}

// log(1 + e^x) without overflow.
template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return add(relu(x), log(add(exp(neg(abs(x))), T(1))));
}

template <typename T>
Tensor<T> log_sigmoid(const Tensor<T>& x) {
  return neg(softplus(neg(x)));
}

}  // namespace lndetr::numcore
