#include "lndetr/numcore/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>

namespace lndetr::numcore {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
using ImplPtr = std::shared_ptr<TensorImpl<T>>;

// Fixed-order reductions. Eigen's vectorized reductions on maps peel a
// prefix that depends on the data address, which makes results vary with
// heap alignment.
template <typename T>
T sum_of(const T* x, std::int64_t n) {
  T total = 0;
  for (std::int64_t i = 0; i < n; ++i) total += x[i];
  return total;
}

template <typename T>
T dot_of(const T* a, const T* b, std::int64_t n) {
  T total = 0;
  for (std::int64_t i = 0; i < n; ++i) total += a[i] * b[i];
  return total;
}

template <typename T>
Graph<T>* recorder(std::initializer_list<const Tensor<T>*> inputs) {
  auto* graph = Graph<T>::current();
  if (!graph) return nullptr;
  for (const auto* t : inputs)
    if (t && t->defined() && t->requires_grad()) return graph;
  return nullptr;
}

template <typename T>
ImplPtr<T> new_impl(Shape shape) {
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->data.assign(static_cast<std::size_t>(numel(shape)), T(0));
  impl->shape = std::move(shape);
  return impl;
}

template <typename T>
Tensor<T> finish(Graph<T>* graph, const char* op, std::vector<ImplPtr<T>> inputs, ImplPtr<T> out,
                 std::function<void()> backward) {
  if (graph) {
    out->requires_grad = true;
    out->is_leaf = false;
    graph->record(op, std::move(inputs), out, std::move(backward));
  }
  return Tensor<T>(std::move(out));
}

bool is_suffix(const Shape& full, const Shape& suffix) {
  if (suffix.size() > full.size()) return false;
  return std::equal(suffix.rbegin(), suffix.rend(), full.rbegin());
}

template <typename T>
void require_defined(const char* op, const Tensor<T>& t) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": undefined operand");
}

// Elementwise unary op; `deriv(x, y)` returns dy/dx.
template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const char* op, const Tensor<T>& x, Fwd fwd, Deriv deriv) {
  require_defined(op, x);
  auto* graph = recorder<T>({&x});
  auto out = new_impl<T>(x.shape());
  const auto& xs = x.impl()->data;
  for (std::size_t i = 0; i < xs.size(); ++i) out->data[i] = fwd(xs[i]);
  auto xi = x.impl_ptr();
  TensorImpl<T>* o = out.get();
  return finish<T>(graph, op, {xi}, out, [xi, o, deriv] {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    for (std::size_t i = 0; i < xi->data.size(); ++i)
      xi->grad[i] += o->grad[i] * deriv(xi->data[i], o->data[i]);
  });
}

void axis_split(const Shape& shape, int axis, std::int64_t& outer, std::int64_t& inner) {
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) inner *= shape[i];
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_defined("add", a);
  require_defined("add", b);
  if (!is_suffix(a.shape(), b.shape())) throw_shape_error("add", a.shape(), b.shape());
  auto* graph = recorder<T>({&a, &b});
  auto out = new_impl<T>(a.shape());
  const auto inner = static_cast<std::size_t>(b.numel());
  const auto& ad = a.impl()->data;
  const auto& bd = b.impl()->data;
  if (inner > 0)
    for (std::size_t i = 0; i < ad.size(); ++i) out->data[i] = ad[i] + bd[i % inner];
  auto ai = a.impl_ptr(), bi = b.impl_ptr();
  TensorImpl<T>* o = out.get();
  return finish<T>(graph, "add", {ai, bi}, out, [ai, bi, o, inner] {
    if (ai->requires_grad) {
      ai->ensure_grad();
      for (std::size_t i = 0; i < o->grad.size(); ++i) ai->grad[i] += o->grad[i];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (std::size_t i = 0; i < o->grad.size(); ++i) bi->grad[i % inner] += o->grad[i];
    }
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, T constant) {
  return unary<T>("add", a, [constant](T x) { return x + constant; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_defined("mul", a);
  require_defined("mul", b);
  if (!is_suffix(a.shape(), b.shape())) throw_shape_error("mul", a.shape(), b.shape());
  auto* graph = recorder<T>({&a, &b});
  auto out = new_impl<T>(a.shape());
  const auto inner = static_cast<std::size_t>(b.numel());
  const auto& ad = a.impl()->data;
  const auto& bd = b.impl()->data;
  if (inner > 0)
    for (std::size_t i = 0; i < ad.size(); ++i) out->data[i] = ad[i] * bd[i % inner];
  auto ai = a.impl_ptr(), bi = b.impl_ptr();
  TensorImpl<T>* o = out.get();
  return finish<T>(graph, "mul", {ai, bi}, out, [ai, bi, o, inner] {
    if (ai->requires_grad) {
      ai->ensure_grad();
      for (std::size_t i = 0; i < o->grad.size(); ++i) ai->grad[i] += o->grad[i] * bi->data[i % inner];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (std::size_t i = 0; i < o->grad.size(); ++i) bi->grad[i % inner] += o->grad[i] * ai->data[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, T constant) {
  return unary<T>("mul", a, [constant](T x) { return x * constant; },
                  [constant](T, T) { return constant; });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_a, bool transpose_b) {
  require_defined("matmul", a);
  require_defined("matmul", b);
  if (a.rank() != 2 || b.rank() != 2) throw_shape_error("matmul", a.shape(), b.shape());
  const auto ar = a.dim(0), ac = a.dim(1), br = b.dim(0), bc = b.dim(1);
  const auto m = transpose_a ? ac : ar;
  const auto k = transpose_a ? ar : ac;
  const auto kb = transpose_b ? bc : br;
  const auto n = transpose_b ? br : bc;
  if (k != kb) throw_shape_error("matmul", a.shape(), b.shape());
  auto* graph = recorder<T>({&a, &b});
  auto out = new_impl<T>({m, n});
  ConstMatMap<T> A(a.impl()->data.data(), ar, ac);
  ConstMatMap<T> B(b.impl()->data.data(), br, bc);
  MatMap<T> C(out->data.data(), m, n);
  if (!transpose_a && !transpose_b)
    C.noalias() = A * B;
  else if (transpose_a && !transpose_b)
    C.noalias() = A.transpose() * B;
  else if (!transpose_a && transpose_b)
    C.noalias() = A * B.transpose();
  else
    C.noalias() = A.transpose() * B.transpose();
  auto ai = a.impl_ptr(), bi = b.impl_ptr();
  TensorImpl<T>* o = out.get();
  return finish<T>(graph, "matmul", {ai, bi}, out,
                   [ai, bi, o, ar, ac, br, bc, m, n, transpose_a, transpose_b] {
                     ConstMatMap<T> A(ai->data.data(), ar, ac);
                     ConstMatMap<T> B(bi->data.data(), br, bc);
                     ConstMatMap<T> dC(o->grad.data(), m, n);
                     if (ai->requires_grad) {
                       ai->ensure_grad();
                       MatMap<T> dA(ai->grad.data(), ar, ac);
                       // d op(A) = dC * op(B)^T
                       if (!transpose_a) {
                         if (!transpose_b) dA.noalias() += dC * B.transpose();
                         else dA.noalias() += dC * B;
                       } else {
                         if (!transpose_b) dA.noalias() += B * dC.transpose();
                         else dA.noalias() += B.transpose() * dC.transpose();
                       }
                     }
                     if (bi->requires_grad) {
                       bi->ensure_grad();
                       MatMap<T> dB(bi->grad.data(), br, bc);
                       // d op(B) = op(A)^T * dC
                       if (!transpose_b) {
                         if (!transpose_a) dB.noalias() += A.transpose() * dC;
                         else dB.noalias() += A * dC;
                       } else {
                         if (!transpose_a) dB.noalias() += dC.transpose() * A;
                         else dB.noalias() += dC.transpose() * A.transpose();
                       }
                     }
                   });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, int stride,
                 int padding) {
  require_defined("conv2d", input);
  require_defined("conv2d", weight);
  if (input.rank() != 4 || weight.rank() != 4 || input.dim(1) != weight.dim(1))
    throw_shape_error("conv2d", input.shape(), weight.shape());
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != weight.dim(0)))
    throw_shape_error("conv2d", weight.shape(), bias.shape());
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: stride must be >= 1 and padding >= 0");
  const auto N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const auto O = weight.dim(0), KH = weight.dim(2), KW = weight.dim(3);
  const auto Ho = (H + 2 * padding - KH) / stride + 1;
  const auto Wo = (W + 2 * padding - KW) / stride + 1;
  if (Ho <= 0 || Wo <= 0) throw_shape_error("conv2d", input.shape(), weight.shape());
  const auto CK = C * KH * KW;
  const auto P = Ho * Wo;
  const bool pointwise = KH == 1 && KW == 1 && stride == 1 && padding == 0;

  auto* graph = recorder<T>({&input, &weight, &bias});
  auto out = new_impl<T>({N, O, Ho, Wo});

  // im2col buffer, kept for the backward pass.
  auto cols = std::make_shared<std::vector<T>>();
  const auto& in = input.impl()->data;
  if (!pointwise) {
    cols->assign(static_cast<std::size_t>(N * CK * P), T(0));
    for (std::int64_t n = 0; n < N; ++n) {
      T* col = cols->data() + n * CK * P;
      const T* img = in.data() + n * C * H * W;
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t ky = 0; ky < KH; ++ky)
          for (std::int64_t kx = 0; kx < KW; ++kx) {
            T* row = col + ((c * KH + ky) * KW + kx) * P;
            for (std::int64_t oy = 0; oy < Ho; ++oy) {
              const auto iy = oy * stride - padding + ky;
              if (iy < 0 || iy >= H) continue;
              const T* src = img + (c * H + iy) * W;
              for (std::int64_t ox = 0; ox < Wo; ++ox) {
                const auto ix = ox * stride - padding + kx;
                if (ix >= 0 && ix < W) row[oy * Wo + ox] = src[ix];
              }
            }
          }
    }
  }
  ConstMatMap<T> Wm(weight.impl()->data.data(), O, CK);
  for (std::int64_t n = 0; n < N; ++n) {
    const T* colp = pointwise ? in.data() + n * CK * P : cols->data() + n * CK * P;
    ConstMatMap<T> X(colp, CK, P);
    MatMap<T> Y(out->data.data() + n * O * P, O, P);
    Y.noalias() = Wm * X;
    if (bias.defined()) {
      const auto& bd = bias.impl()->data;
      for (std::int64_t o = 0; o < O; ++o) Y.row(o).array() += bd[static_cast<std::size_t>(o)];
    }
  }

  auto ii = input.impl_ptr(), wi = weight.impl_ptr();
  auto bi = bias.defined() ? bias.impl_ptr() : ImplPtr<T>{};
  TensorImpl<T>* o = out.get();
  std::vector<ImplPtr<T>> inputs{ii, wi};
  if (bi) inputs.push_back(bi);
  return finish<T>(graph, "conv2d", inputs, out,
                   [=] {
                     ConstMatMap<T> Wm(wi->data.data(), O, CK);
                     std::vector<T> dcol;
                     if (ii->requires_grad) {
                       ii->ensure_grad();
                       if (!pointwise) dcol.assign(static_cast<std::size_t>(CK * P), T(0));
                     }
                     if (wi->requires_grad) wi->ensure_grad();
                     if (bi && bi->requires_grad) bi->ensure_grad();
                     for (std::int64_t n = 0; n < N; ++n) {
                       ConstMatMap<T> dY(o->grad.data() + n * O * P, O, P);
                       const T* colp =
                           pointwise ? ii->data.data() + n * CK * P : cols->data() + n * CK * P;
                       if (wi->requires_grad) {
                         ConstMatMap<T> X(colp, CK, P);
                         MatMap<T> dW(wi->grad.data(), O, CK);
                         dW.noalias() += dY * X.transpose();
                       }
                       if (bi && bi->requires_grad)
                         for (std::int64_t oc = 0; oc < O; ++oc)
                           bi->grad[static_cast<std::size_t>(oc)] += sum_of(dY.data() + oc * P, P);
                       if (!ii->requires_grad) continue;
                       if (pointwise) {
                         MatMap<T> dX(ii->grad.data() + n * CK * P, CK, P);
                         dX.noalias() += Wm.transpose() * dY;
                         continue;
                       }
                       MatMap<T> dC(dcol.data(), CK, P);
                       dC.noalias() = Wm.transpose() * dY;
                       T* dimg = ii->grad.data() + n * C * H * W;
                       for (std::int64_t c = 0; c < C; ++c)
                         for (std::int64_t ky = 0; ky < KH; ++ky)
                           for (std::int64_t kx = 0; kx < KW; ++kx) {
                             const T* row = dcol.data() + ((c * KH + ky) * KW + kx) * P;
                             for (std::int64_t oy = 0; oy < Ho; ++oy) {
                               const auto iy = oy * stride - padding + ky;
                               if (iy < 0 || iy >= H) continue;
                               T* dst = dimg + (c * H + iy) * W;
                               for (std::int64_t ox = 0; ox < Wo; ++ox) {
                                 const auto ix = ox * stride - padding + kx;
                                 if (ix >= 0 && ix < W) dst[ix] += row[oy * Wo + ox];
                               }
                             }
                           }
                     }
                   });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary<T>("relu", x, [](T v) { return v > T(0) ? v : T(0); },
                  [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt2pi = T(0.39894228040143267794);
  return unary<T>("gelu", x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
                  [](T v, T) {
                    const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
                    return cdf + v * inv_sqrt2pi * std::exp(T(-0.5) * v * v);
                  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary<T>("sigmoid", x,
                  [](T v) {
                    if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
                    const T e = std::exp(v);
                    return e / (T(1) + e);
                  },
                  [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  return unary<T>("log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary<T>("exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
  return unary<T>("sqrt", x, [](T v) { return std::sqrt(v); },
                  [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  require_defined("softmax", x);
  if (x.rank() < 1) throw ShapeError("softmax: needs at least one axis");
  auto* graph = recorder<T>({&x});
  auto out = new_impl<T>(x.shape());
  const auto cols = x.dim(-1);
  const auto rows = cols ? x.numel() / cols : 0;
  const auto& xs = x.impl()->data;
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* src = xs.data() + r * cols;
    T* dst = out->data.data() + r * cols;
    const T mx = *std::max_element(src, src + cols);
    T total = 0;
    for (std::int64_t c = 0; c < cols; ++c) total += dst[c] = std::exp(src[c] - mx);
    for (std::int64_t c = 0; c < cols; ++c) dst[c] /= total;
  }
  auto xi = x.impl_ptr();
  TensorImpl<T>* o = out.get();
  return finish<T>(graph, "softmax", {xi}, out, [xi, o, rows, cols] {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* y = o->data.data() + r * cols;
      const T* dy = o->grad.data() + r * cols;
      T dot = 0;
      for (std::int64_t c = 0; c < cols; ++c) dot += dy[c] * y[c];
      T* dx = xi->grad.data() + r * cols;
      for (std::int64_t c = 0; c < cols; ++c) dx[c] += y[c] * (dy[c] - dot);
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  require_defined("layer_norm", x);
  const auto d = x.dim(-1);
  if (gamma.rank() != 1 || gamma.dim(0) != d) throw_shape_error("layer_norm", x.shape(), gamma.shape());
  if (beta.rank() != 1 || beta.dim(0) != d) throw_shape_error("layer_norm", x.shape(), beta.shape());
  auto* graph = recorder<T>({&x, &gamma, &beta});
  auto out = new_impl<T>(x.shape());
  const auto rows = d ? x.numel() / d : 0;
  auto xhat = std::make_shared<std::vector<T>>(x.impl()->data.size());
  auto rstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
  const auto& xs = x.impl()->data;
  const auto& g = gamma.impl()->data;
  const auto& b = beta.impl()->data;
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* src = xs.data() + r * d;
    T mu = 0;
    for (std::int64_t c = 0; c < d; ++c) mu += src[c];
    mu /= T(d);
    T var = 0;
    for (std::int64_t c = 0; c < d; ++c) var += (src[c] - mu) * (src[c] - mu);
    var /= T(d);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[static_cast<std::size_t>(r)] = rs;
    T* xh = xhat->data() + r * d;
    T* dst = out->data.data() + r * d;
    for (std::int64_t c = 0; c < d; ++c) {
      xh[c] = (src[c] - mu) * rs;
      dst[c] = xh[c] * g[static_cast<std::size_t>(c)] + b[static_cast<std::size_t>(c)];
    }
  }
  auto xi = x.impl_ptr(), gi = gamma.impl_ptr(), bi = beta.impl_ptr();
  TensorImpl<T>* o = out.get();
  return finish<T>(graph, "layer_norm", {xi, gi, bi}, out, [=] {
    if (gi->requires_grad) gi->ensure_grad();
    if (bi->requires_grad) bi->ensure_grad();
    if (xi->requires_grad) xi->ensure_grad();
    std::vector<T> dxh(static_cast<std::size_t>(d));
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* dy = o->grad.data() + r * d;
      const T* xh = xhat->data() + r * d;
      T m1 = 0, m2 = 0;
      for (std::int64_t c = 0; c < d; ++c) {
        const auto cu = static_cast<std::size_t>(c);
        if (gi->requires_grad) gi->grad[cu] += dy[c] * xh[c];
        if (bi->requires_grad) bi->grad[cu] += dy[c];
        dxh[cu] = dy[c] * gi->data[cu];
        m1 += dxh[cu];
        m2 += dxh[cu] * xh[c];
      }
      if (!xi->requires_grad) continue;
      m1 /= T(d);
      m2 /= T(d);
      const T rs = (*rstd)[static_cast<std::size_t>(r)];
      T* dx = xi->grad.data() + r * d;
      for (std::int64_t c = 0; c < d; ++c)
        dx[c] += rs * (dxh[static_cast<std::size_t>(c)] - m1 - xh[c] * m2);
    }
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_defined("linear", x);
  require_defined("linear", weight);
  if (weight.rank() != 2 || x.rank() < 1 || x.dim(-1) != weight.dim(0))
    throw_shape_error("linear", x.shape(), weight.shape());
  const auto in = weight.dim(0), outd = weight.dim(1);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != outd))
    throw_shape_error("linear", weight.shape(), bias.shape());
  const auto rows = in ? x.numel() / in : 0;
  Shape out_shape = x.shape();
  out_shape.back() = outd;
  auto* graph = recorder<T>({&x, &weight, &bias});
  auto out = new_impl<T>(out_shape);
  ConstMatMap<T> X(x.impl()->data.data(), rows, in);
  ConstMatMap<T> Wm(weight.impl()->data.data(), in, outd);
  MatMap<T> Y(out->data.data(), rows, outd);
  Y.noalias() = X * Wm;
  if (bias.defined()) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(bias.impl()->data.data(), outd);
    Y.rowwise() += bv;
  }
  auto xi = x.impl_ptr(), wi = weight.impl_ptr();
  auto bi = bias.defined() ? bias.impl_ptr() : ImplPtr<T>{};
  TensorImpl<T>* o = out.get();
  std::vector<ImplPtr<T>> inputs{xi, wi};
  if (bi) inputs.push_back(bi);
  return finish<T>(graph, "linear", inputs, out, [=] {
    ConstMatMap<T> dY(o->grad.data(), rows, outd);
    if (xi->requires_grad) {
      xi->ensure_grad();
      ConstMatMap<T> Wm(wi->data.data(), in, outd);
      MatMap<T> dX(xi->grad.data(), rows, in);
      dX.noalias() += dY * Wm.transpose();
    }
    if (wi->requires_grad) {
      wi->ensure_grad();
      ConstMatMap<T> X(xi->data.data(), rows, in);
      MatMap<T> dW(wi->grad.data(), in, outd);
      dW.noalias() += X.transpose() * dY;
    }
    if (bi && bi->requires_grad) {
      bi->ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t c = 0; c < outd; ++c) bi->grad[static_cast<std::size_t>(c)] += dY(r, c);
    }
  });
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<std::int64_t>& indices) {
  require_defined("embedding", table);
  if (table.rank() != 2) throw ShapeError("embedding: table must be 2-D, got " + to_string(table.shape()));
  const auto V = table.dim(0), d = table.dim(1);
  for (auto idx : indices)
    if (idx < 0 || idx >= V)
      throw ShapeError("embedding: index " + std::to_string(idx) + " out of range for table " +
                       to_string(table.shape()));
  auto* graph = recorder<T>({&table});
  const auto n = static_cast<std::int64_t>(indices.size());
  auto out = new_impl<T>({n, d});
  const auto& td = table.impl()->data;
  for (std::int64_t r = 0; r < n; ++r)
    std::copy_n(td.data() + indices[static_cast<std::size_t>(r)] * d, d, out->data.data() + r * d);
  auto ti = table.impl_ptr();
  TensorImpl<T>* o = out.get();
  return finish<T>(graph, "embedding", {ti}, out, [ti, o, indices, d] {
    if (!ti->requires_grad) return;
    ti->ensure_grad();
    for (std::size_t r = 0; r < indices.size(); ++r) {
      T* dst = ti->grad.data() + indices[r] * d;
      const T* src = o->grad.data() + static_cast<std::int64_t>(r) * d;
      for (std::int64_t c = 0; c < d; ++c) dst[c] += src[c];
    }
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  for (const auto& p : parts) require_defined("concat", p);
  const int r = parts.front().rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("concat: axis out of range for " + to_string(parts.front().shape()));
  Shape out_shape = parts.front().shape();
  out_shape[static_cast<std::size_t>(axis)] = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (static_cast<int>(probe.size()) != r) throw_shape_error("concat", parts.front().shape(), p.shape());
    for (int i = 0; i < r; ++i)
      if (i != axis && probe[static_cast<std::size_t>(i)] != parts.front().shape()[static_cast<std::size_t>(i)])
        throw_shape_error("concat", parts.front().shape(), p.shape());
    out_shape[static_cast<std::size_t>(axis)] += probe[static_cast<std::size_t>(axis)];
  }
  std::int64_t outer = 0, inner = 0;
  axis_split(out_shape, axis, outer, inner);
  Graph<T>* graph = nullptr;
  for (const auto& p : parts)
    if (!graph) graph = recorder<T>({&p});
  auto out = new_impl<T>(out_shape);
  const auto total_chunk = out_shape[static_cast<std::size_t>(axis)] * inner;
  std::vector<ImplPtr<T>> inputs;
  std::vector<std::int64_t> chunks, offsets;
  std::int64_t offset = 0;
  for (const auto& p : parts) {
    const auto chunk = p.dim(axis) * inner;
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy_n(p.impl()->data.data() + o * chunk, chunk, out->data.data() + o * total_chunk + offset);
    inputs.push_back(p.impl_ptr());
    chunks.push_back(chunk);
    offsets.push_back(offset);
    offset += chunk;
  }
  TensorImpl<T>* o = out.get();
  return finish<T>(graph, "concat", inputs, out, [inputs, chunks, offsets, o, outer, total_chunk] {
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      auto& p = inputs[i];
      if (!p->requires_grad) continue;
      p->ensure_grad();
      for (std::int64_t oo = 0; oo < outer; ++oo) {
        const T* src = o->grad.data() + oo * total_chunk + offsets[i];
        T* dst = p->grad.data() + oo * chunks[i];
        for (std::int64_t c = 0; c < chunks[i]; ++c) dst[c] += src[c];
      }
    }
  });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::int64_t start, std::int64_t length) {
  require_defined("slice", x);
  const int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("slice: axis out of range for " + to_string(x.shape()));
  const auto extent = x.dim(axis);
  if (start < 0 || length < 0 || start + length > extent)
    throw_shape_error("slice", x.shape(), Shape{start, length});
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = length;
  std::int64_t outer = 0, inner = 0;
  axis_split(x.shape(), axis, outer, inner);
  auto* graph = recorder<T>({&x});
  auto out = new_impl<T>(out_shape);
  const auto in_chunk = extent * inner, out_chunk = length * inner, off = start * inner;
  for (std::int64_t o = 0; o < outer; ++o)
    std::copy_n(x.impl()->data.data() + o * in_chunk + off, out_chunk, out->data.data() + o * out_chunk);
  auto xi = x.impl_ptr();
  TensorImpl<T>* o = out.get();
  return finish<T>(graph, "slice", {xi}, out, [xi, o, outer, in_chunk, out_chunk, off] {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    for (std::int64_t oo = 0; oo < outer; ++oo) {
      T* dst = xi->grad.data() + oo * in_chunk + off;
      const T* src = o->grad.data() + oo * out_chunk;
      for (std::int64_t c = 0; c < out_chunk; ++c) dst[c] += src[c];
    }
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  require_defined("reshape", x);
  if (numel(shape) != x.numel()) throw_shape_error("reshape", x.shape(), shape);
  auto* graph = recorder<T>({&x});
  auto out = new_impl<T>(std::move(shape));
  out->data = x.impl()->data;
  auto xi = x.impl_ptr();
  TensorImpl<T>* o = out.get();
  return finish<T>(graph, "reshape", {xi}, out, [xi, o] {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    for (std::size_t i = 0; i < o->grad.size(); ++i) xi->grad[i] += o->grad[i];
  });
}

namespace {

template <typename T>
Tensor<T> reduce_all(const char* op, const Tensor<T>& x, T scale) {
  require_defined(op, x);
  auto* graph = recorder<T>({&x});
  auto out = new_impl<T>({});
  T total = 0;
  for (T v : x.impl()->data) total += v;
  out->data[0] = total * scale;
  auto xi = x.impl_ptr();
  TensorImpl<T>* o = out.get();
  return finish<T>(graph, op, {xi}, out, [xi, o, scale] {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    const T g = o->grad[0] * scale;
    for (auto& v : xi->grad) v += g;
  });
}

template <typename T>
Tensor<T> reduce_last(const char* op, const Tensor<T>& x, bool average) {
  require_defined(op, x);
  if (x.rank() < 1) throw ShapeError(std::string(op) + ": needs at least one axis");
  const auto cols = x.dim(-1);
  const auto rows = cols ? x.numel() / cols : 0;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  auto* graph = recorder<T>({&x});
  auto out = new_impl<T>(out_shape);
  const T scale = average && cols ? T(1) / T(cols) : T(1);
  for (std::int64_t r = 0; r < rows; ++r) {
    T total = 0;
    for (std::int64_t c = 0; c < cols; ++c) total += x.impl()->data[static_cast<std::size_t>(r * cols + c)];
    out->data[static_cast<std::size_t>(r)] = total * scale;
  }
  auto xi = x.impl_ptr();
  TensorImpl<T>* o = out.get();
  return finish<T>(graph, op, {xi}, out, [xi, o, rows, cols, scale] {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    for (std::int64_t r = 0; r < rows; ++r) {
      const T g = o->grad[static_cast<std::size_t>(r)] * scale;
      for (std::int64_t c = 0; c < cols; ++c) xi->grad[static_cast<std::size_t>(r * cols + c)] += g;
    }
  });
}

}  // namespace

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  return reduce_all<T>("sum", x, T(1));
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.defined() && x.numel() == 0) throw ShapeError("mean: empty tensor");
  return reduce_all<T>("mean", x, x.defined() ? T(1) / T(x.numel()) : T(1));
}

template <typename T>
Tensor<T> sum_last(const Tensor<T>& x) {
  return reduce_last<T>("sum", x, false);
}

template <typename T>
Tensor<T> mean_last(const Tensor<T>& x) {
  return reduce_last<T>("mean", x, true);
}

template <typename T>
Tensor<T> cosine_similarity(const Tensor<T>& a, const Tensor<T>& b, T eps) {
  require_defined("cosine_similarity", a);
  require_defined("cosine_similarity", b);
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
    throw_shape_error("cosine_similarity", a.shape(), b.shape());
  const auto n = a.dim(0), m = b.dim(0), d = a.dim(1);
  auto* graph = recorder<T>({&a, &b});
  auto an = std::make_shared<RowMat<T>>(ConstMatMap<T>(a.impl()->data.data(), n, d));
  auto bn = std::make_shared<RowMat<T>>(ConstMatMap<T>(b.impl()->data.data(), m, d));
  auto anorm = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n));
  auto bnorm = std::make_shared<std::vector<T>>(static_cast<std::size_t>(m));
  for (std::int64_t i = 0; i < n; ++i) {
    const T norm = std::max(std::sqrt(dot_of(&(*an)(i, 0), &(*an)(i, 0), d)), eps);
    (*anorm)[static_cast<std::size_t>(i)] = norm;
    an->row(i) /= norm;
  }
  for (std::int64_t j = 0; j < m; ++j) {
    const T norm = std::max(std::sqrt(dot_of(&(*bn)(j, 0), &(*bn)(j, 0), d)), eps);
    (*bnorm)[static_cast<std::size_t>(j)] = norm;
    bn->row(j) /= norm;
  }
  auto out = new_impl<T>({n, m});
  MatMap<T> C(out->data.data(), n, m);
  C.noalias() = (*an) * bn->transpose();
  auto ai = a.impl_ptr(), bi = b.impl_ptr();
  TensorImpl<T>* o = out.get();
  return finish<T>(graph, "cosine_similarity", {ai, bi}, out, [=] {
    ConstMatMap<T> dC(o->grad.data(), n, m);
    if (ai->requires_grad) {
      ai->ensure_grad();
      RowMat<T> dhat = dC * (*bn);
      MatMap<T> dA(ai->grad.data(), n, d);
      for (std::int64_t i = 0; i < n; ++i) {
        const T proj = dot_of(&dhat(i, 0), &(*an)(i, 0), d);
        dA.row(i) += (dhat.row(i) - proj * an->row(i)) / (*anorm)[static_cast<std::size_t>(i)];
      }
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      RowMat<T> dhat = dC.transpose() * (*an);
      MatMap<T> dB(bi->grad.data(), m, d);
      for (std::int64_t j = 0; j < m; ++j) {
        const T proj = dot_of(&dhat(j, 0), &(*bn)(j, 0), d);
        dB.row(j) += (dhat.row(j) - proj * bn->row(j)) / (*bnorm)[static_cast<std::size_t>(j)];
      }
    }
  });
}

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, int heads,
                               const Tensor<T>& mask, std::vector<T>* weights_out) {
  require_defined("multi_head_attention", q);
  require_defined("multi_head_attention", k);
  require_defined("multi_head_attention", v);
  if (q.rank() != 2 || k.rank() != 2 || q.dim(1) != k.dim(1)) throw_shape_error("multi_head_attention", q.shape(), k.shape());
  if (v.rank() != 2 || v.dim(0) != k.dim(0) || v.dim(1) != q.dim(1))
    throw_shape_error("multi_head_attention", k.shape(), v.shape());
  const auto Lq = q.dim(0), Lk = k.dim(0), d = q.dim(1);
  if (heads <= 0 || d % heads != 0)
    throw ShapeError("multi_head_attention: width " + std::to_string(d) + " not divisible by " +
                     std::to_string(heads) + " heads");
  if (mask.defined() && mask.shape() != Shape{Lq, Lk})
    throw_shape_error("multi_head_attention", Shape{Lq, Lk}, mask.shape());
  const auto dh = d / heads;
  const T scale = T(1) / std::sqrt(T(dh));
  auto* graph = recorder<T>({&q, &k, &v});
  auto out = new_impl<T>({Lq, d});
  auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(heads * Lq * Lk));
  const auto* qd = q.impl()->data.data();
  const auto* kd = k.impl()->data.data();
  const auto* vd = v.impl()->data.data();
  for (int h = 0; h < heads; ++h) {
    ConstStridedMap<T> Qh(qd + h * dh, Lq, dh, Eigen::OuterStride<>(d));
    ConstStridedMap<T> Kh(kd + h * dh, Lk, dh, Eigen::OuterStride<>(d));
    ConstStridedMap<T> Vh(vd + h * dh, Lk, dh, Eigen::OuterStride<>(d));
    MatMap<T> Ph(probs->data() + h * Lq * Lk, Lq, Lk);
    Ph.noalias() = (Qh * Kh.transpose()) * scale;
    if (mask.defined()) Ph += ConstMatMap<T>(mask.impl()->data.data(), Lq, Lk);
    for (std::int64_t r = 0; r < Lq; ++r) {
      const T mx = Ph.row(r).maxCoeff();
      T* row = &Ph(r, 0);
      for (std::int64_t c = 0; c < Lk; ++c) row[c] = std::exp(row[c] - mx);
      const T total = sum_of(row, Lk);
      for (std::int64_t c = 0; c < Lk; ++c) row[c] /= total;
    }
    StridedMap<T> Oh(out->data.data() + h * dh, Lq, dh, Eigen::OuterStride<>(d));
    Oh.noalias() = Ph * Vh;
  }
  if (weights_out) *weights_out = *probs;
  auto qi = q.impl_ptr(), ki = k.impl_ptr(), vi = v.impl_ptr();
  TensorImpl<T>* o = out.get();
  return finish<T>(graph, "multi_head_attention", {qi, ki, vi}, out, [=] {
    if (qi->requires_grad) qi->ensure_grad();
    if (ki->requires_grad) ki->ensure_grad();
    if (vi->requires_grad) vi->ensure_grad();
    RowMat<T> dP(Lq, Lk);
    for (int h = 0; h < heads; ++h) {
      ConstStridedMap<T> Qh(qi->data.data() + h * dh, Lq, dh, Eigen::OuterStride<>(d));
      ConstStridedMap<T> Kh(ki->data.data() + h * dh, Lk, dh, Eigen::OuterStride<>(d));
      ConstStridedMap<T> Vh(vi->data.data() + h * dh, Lk, dh, Eigen::OuterStride<>(d));
      ConstStridedMap<T> dOh(o->grad.data() + h * dh, Lq, dh, Eigen::OuterStride<>(d));
      ConstMatMap<T> Ph(probs->data() + h * Lq * Lk, Lq, Lk);
      if (vi->requires_grad) {
        StridedMap<T> dVh(vi->grad.data() + h * dh, Lk, dh, Eigen::OuterStride<>(d));
        dVh.noalias() += Ph.transpose() * dOh;
      }
      if (!qi->requires_grad && !ki->requires_grad) continue;
      dP.noalias() = dOh * Vh.transpose();
      for (std::int64_t r = 0; r < Lq; ++r) {
        const T dot = dot_of(dP.data() + r * Lk, Ph.data() + r * Lk, Lk);
        dP.row(r) = Ph.row(r).array() * (dP.row(r).array() - dot);
      }
      if (qi->requires_grad) {
        StridedMap<T> dQh(qi->grad.data() + h * dh, Lq, dh, Eigen::OuterStride<>(d));
        dQh.noalias() += (dP * Kh) * scale;
      }
      if (ki->requires_grad) {
        StridedMap<T> dKh(ki->grad.data() + h * dh, Lk, dh, Eigen::OuterStride<>(d));
        dKh.noalias() += (dP.transpose() * Qh) * scale;
      }
    }
  });
}

template <typename T>
std::vector<std::int64_t> topk_indices(const Tensor<T>& x, std::int64_t k) {
  require_defined("topk", x);
  const auto n = x.numel();
  if (k < 0 || k > n) throw ShapeError("topk: k=" + std::to_string(k) + " for " + std::to_string(n) + " values");
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), std::int64_t{0});
  const auto& xs = x.impl()->data;
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](std::int64_t a, std::int64_t b) {
    const T va = xs[static_cast<std::size_t>(a)], vb = xs[static_cast<std::size_t>(b)];
    if (va != vb) return va > vb;
    return a < b;
  });
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

template <typename T>
T max_value(const Tensor<T>& x) {
  require_defined("max", x);
  if (x.numel() == 0) throw ShapeError("max: empty tensor");
  return *std::max_element(x.impl()->data.begin(), x.impl()->data.end());
}

#define LNDETR_INSTANTIATE_OPS(T)                                                                  \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> add(const Tensor<T>&, T);                                                     \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> mul(const Tensor<T>&, T);                                                     \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&, bool, bool);                       \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);       \
  template Tensor<T> relu(const Tensor<T>&);                                                       \
  template Tensor<T> gelu(const Tensor<T>&);                                                       \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                    \
  template Tensor<T> softmax(const Tensor<T>&);                                                    \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);          \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> embedding(const Tensor<T>&, const std::vector<std::int64_t>&);                \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                                   \
  template Tensor<T> slice(const Tensor<T>&, int, std::int64_t, std::int64_t);                     \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                             \
  template Tensor<T> sum(const Tensor<T>&);                                                        \
  template Tensor<T> sum_last(const Tensor<T>&);                                                   \
  template Tensor<T> mean(const Tensor<T>&);                                                       \
  template Tensor<T> mean_last(const Tensor<T>&);                                                  \
  template Tensor<T> log(const Tensor<T>&);                                                        \
  template Tensor<T> exp(const Tensor<T>&);                                                        \
  template Tensor<T> sqrt(const Tensor<T>&);                                                       \
  template Tensor<T> cosine_similarity(const Tensor<T>&, const Tensor<T>&, T);                     \
  template Tensor<T> multi_head_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                          int, const Tensor<T>&, std::vector<T>*);                 \
  template std::vector<std::int64_t> topk_indices(const Tensor<T>&, std::int64_t);                 \
  template T max_value(const Tensor<T>&);

LNDETR_INSTANTIATE_OPS(float)
LNDETR_INSTANTIATE_OPS(double)

}  // namespace lndetr::numcore
