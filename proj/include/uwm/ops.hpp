#pragma once

#include <algorithm>
#include <cmath>

#include "uwm/tensor.hpp"

namespace uwm {

// ---------------------------------------------------------------------------
// broadcasting helpers (same rank, extent 1 stretches)

namespace detail {

inline Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  if (a.size() != b.size())
    shape_fail(op, "rank mismatch " + shape_str(a) + " vs " + shape_str(b));
  Shape out(a.size());
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i])
      out[i] = a[i];
    else if (a[i] == 1)
      out[i] = b[i];
    else if (b[i] == 1)
      out[i] = a[i];
    else
      shape_fail(op, "incompatible shapes " + shape_str(a) + " vs " + shape_str(b));
  }
  return out;
}

// row-major strides, zeroed on axes the operand broadcasts over
inline std::vector<int64_t> bcast_strides(const Shape& s, const Shape& out) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[i] = (s[i] == 1 && out[i] != 1) ? 0 : acc;
    acc *= s[i];
  }
  return st;
}

struct Odometer {
  explicit Odometer(const Shape& shape) : shape(shape), idx(shape.size(), 0) {}
  const Shape& shape;
  std::vector<int64_t> idx;
  bool step() {  // returns false after the last index
    for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
      if (++idx[i] < shape[i]) return true;
      idx[i] = 0;
    }
    return false;
  }
  int64_t offset(const std::vector<int64_t>& strides) const {
    int64_t o = 0;
    for (size_t i = 0; i < idx.size(); ++i) o += idx[i] * strides[i];
    return o;
  }
};

enum class BinKind { Add, Sub, Mul };

template <class T>
Tensor<T> binary(const char* name, BinKind kind, const Tensor<T>& a, const Tensor<T>& b) {
  const auto& an = a.node();
  const auto& bn = b.node();
  Shape os = broadcast_shape(name, an->shape, bn->shape);
  auto out = make_node<T>(name, os, {an, bn});
  const int64_t n = out->size();

  if (an->shape == bn->shape) {
    const T* pa = an->val.data();
    const T* pb = bn->val.data();
    T* po = out->val.data();
    switch (kind) {
      case BinKind::Add:
        for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
        break;
      case BinKind::Sub:
        for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
        break;
      case BinKind::Mul:
        for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
        break;
    }
  } else {
    auto sa = bcast_strides(an->shape, os);
    auto sb = bcast_strides(bn->shape, os);
    Odometer od(os);
    int64_t i = 0;
    do {
      const T va = an->val[od.offset(sa)];
      const T vb = bn->val[od.offset(sb)];
      out->val[i++] =
          kind == BinKind::Add ? va + vb : (kind == BinKind::Sub ? va - vb : va * vb);
    } while (od.step());
  }

  if (out->requires_grad) {
    Shape os_copy = os;
    out->back = [kind, os_copy](Node<T>& self) {
      auto& A = *self.parents[0];
      auto& B = *self.parents[1];
      const bool ga = A.requires_grad;
      const bool gb = B.requires_grad;
      if (!ga && !gb) return;
      if (A.shape == B.shape) {
        const int64_t n = self.size();
        const T* g = self.grad.data();
        if (ga) {
          T* pa = grad_buf(A).data();
          const T* vb = B.val.data();
          if (kind == BinKind::Mul)
            for (int64_t i = 0; i < n; ++i) pa[i] += g[i] * vb[i];
          else
            for (int64_t i = 0; i < n; ++i) pa[i] += g[i];
        }
        if (gb) {
          T* pb = grad_buf(B).data();
          const T* va = A.val.data();
          switch (kind) {
            case BinKind::Add:
              for (int64_t i = 0; i < n; ++i) pb[i] += g[i];
              break;
            case BinKind::Sub:
              for (int64_t i = 0; i < n; ++i) pb[i] -= g[i];
              break;
            case BinKind::Mul:
              for (int64_t i = 0; i < n; ++i) pb[i] += g[i] * va[i];
              break;
          }
        }
        return;
      }
      auto sa = bcast_strides(A.shape, os_copy);
      auto sb = bcast_strides(B.shape, os_copy);
      if (ga) grad_buf(A);
      if (gb) grad_buf(B);
      Odometer od(os_copy);
      int64_t i = 0;
      do {
        const T g = self.grad[i++];
        const int64_t oa = od.offset(sa);
        const int64_t ob = od.offset(sb);
        switch (kind) {
          case BinKind::Add:
            if (ga) A.grad[oa] += g;
            if (gb) B.grad[ob] += g;
            break;
          case BinKind::Sub:
            if (ga) A.grad[oa] += g;
            if (gb) B.grad[ob] -= g;
            break;
          case BinKind::Mul:
            if (ga) A.grad[oa] += g * B.val[ob];
            if (gb) B.grad[ob] += g * A.val[oa];
            break;
        }
      } while (od.step());
    };
  }
  return Tensor<T>(out);
}

template <class T, class F, class DF>
Tensor<T> unary(const char* name, const Tensor<T>& x, F f, DF df) {
  const auto& xn = x.node();
  auto out = make_node<T>(name, xn->shape, {xn});
  const int64_t n = out->size();
  for (int64_t i = 0; i < n; ++i) out->val[i] = f(xn->val[i]);
  if (out->requires_grad) {
    out->back = [df](Node<T>& self) {
      auto& X = *self.parents[0];
      if (!X.requires_grad) return;
      T* gx = grad_buf(X).data();
      const T* g = self.grad.data();
      const T* xv = X.val.data();
      const T* yv = self.val.data();
      for (int64_t i = 0; i < self.size(); ++i) gx[i] += g[i] * df(xv[i], yv[i]);
    };
  }
  return Tensor<T>(out);
}

template <class T>
T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>("add", detail::BinKind::Add, a, b);
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>("sub", detail::BinKind::Sub, a, b);
}
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>("mul", detail::BinKind::Mul, a, b);
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  return detail::unary<T>(
      "scale", x, [c](T v) { return c * v; }, [c](T, T) { return c; });
}

template <class T>
Tensor<T> neg(const Tensor<T>& x) {
  return scale(x, T(-1));
}

template <class T>
Tensor<T> exp_t(const Tensor<T>& x) {
  return detail::unary<T>(
      "exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> silu(const Tensor<T>& x) {
  return detail::unary<T>(
      "silu", x, [](T v) { return v * detail::stable_sigmoid(v); },
      [](T v, T) {
        const T s = detail::stable_sigmoid(v);
        return s * (T(1) + v * (T(1) - s));
      });
}

template <class T>
Tensor<T> sigmoid_t(const Tensor<T>& x) {
  return detail::unary<T>(
      "sigmoid", x, [](T v) { return detail::stable_sigmoid(v); },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> softplus_t(const Tensor<T>& x) {
  return detail::unary<T>(
      "softplus", x,
      [](T v) {
        if (v > T(30)) return v;
        if (v < T(-30)) return std::exp(v);
        return std::log1p(std::exp(v));
      },
      [](T v, T) { return detail::stable_sigmoid(v); });
}

// phi(z) = (exp(z) - 1) / z, the zero-order-hold input factor. Below 1e-8 the
// exact limit value 1 is used so the discretization contract B_bar == delta*B
// holds bit-for-bit in that regime; below 1e-4 a Taylor series avoids
// cancellation.
template <class T>
Tensor<T> phi_expm1(const Tensor<T>& x) {
  return detail::unary<T>(
      "phi_expm1", x,
      [](T z) {
        const T az = std::abs(z);
        if (az < T(1e-8)) return T(1);
        if (az < T(1e-4)) return T(1) + z / T(2) + z * z / T(6);
        return std::expm1(z) / z;
      },
      [](T z, T) {
        const T az = std::abs(z);
        if (az < T(1e-4)) return T(0.5) + z / T(3) + z * z / T(8);
        return (std::exp(z) * (z - T(1)) + T(1)) / (z * z);
      });
}

// ---------------------------------------------------------------------------
// reductions

// mean over `axes`, keeping reduced axes as extent 1
template <class T>
Tensor<T> reduce_mean_keep(const Tensor<T>& x, const std::vector<int>& axes) {
  const auto& xn = x.node();
  Shape os = xn->shape;
  int64_t count = 1;
  for (int a : axes) {
    if (a < 0 || a >= static_cast<int>(os.size()))
      shape_fail("reduce_mean", "axis out of range for " + shape_str(xn->shape));
    count *= os[a];
    os[a] = 1;
  }
  auto out = detail::make_node<T>("reduce_mean", os, {xn});
  auto sx = detail::bcast_strides(os, xn->shape);  // out strides walked over x index space
  detail::Odometer od(xn->shape);
  int64_t i = 0;
  do {
    out->val[od.offset(sx)] += xn->val[i++];
  } while (od.step());
  const T inv = T(1) / static_cast<T>(count);
  for (auto& v : out->val) v *= inv;
  if (out->requires_grad) {
    out->back = [inv](Node<T>& self) {
      auto& X = *self.parents[0];
      if (!X.requires_grad) return;
      grad_buf(X);
      auto sx = detail::bcast_strides(self.shape, X.shape);
      detail::Odometer od(X.shape);
      int64_t i = 0;
      do {
        X.grad[i++] += self.grad[od.offset(sx)] * inv;
      } while (od.step());
    };
  }
  return Tensor<T>(out);
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
  const auto& xn = x.node();
  auto out = detail::make_node<T>("sum_all", Shape{1}, {xn});
  T acc = T(0);
  for (const T v : xn->val) acc += v;
  out->val[0] = acc;
  if (out->requires_grad) {
    out->back = [](Node<T>& self) {
      auto& X = *self.parents[0];
      if (!X.requires_grad) return;
      T* gx = grad_buf(X).data();
      const T g = self.grad[0];
      for (int64_t i = 0; i < X.size(); ++i) gx[i] += g;
    };
  }
  return Tensor<T>(out);
}

template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.shape().size() != 4) shape_fail("global_avg_pool", "expects NCHW, got " + shape_str(x.shape()));
  return reduce_mean_keep(x, {2, 3});
}

// ---------------------------------------------------------------------------
// shape movement

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  const auto& xn = x.node();
  if (numel(shape) != xn->size())
    shape_fail("reshape", shape_str(xn->shape) + " -> " + shape_str(shape) + " changes element count");
  auto out = detail::make_node<T>("reshape", std::move(shape), {xn});
  out->val = xn->val;
  if (out->requires_grad) {
    out->back = [](Node<T>& self) {
      auto& X = *self.parents[0];
      if (!X.requires_grad) return;
      T* gx = grad_buf(X).data();
      const T* g = self.grad.data();
      for (int64_t i = 0; i < self.size(); ++i) gx[i] += g[i];
    };
  }
  return Tensor<T>(out);
}

template <class T>
Tensor<T> slice_axis(const Tensor<T>& x, int axis, int64_t start, int64_t len) {
  const auto& xn = x.node();
  const Shape& s = xn->shape;
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    shape_fail("slice_axis", "axis out of range for " + shape_str(s));
  if (start < 0 || len < 1 || start + len > s[axis])
    shape_fail("slice_axis", "window [" + std::to_string(start) + ", " + std::to_string(start + len) +
                                 ") exceeds " + shape_str(s));
  Shape os = s;
  os[axis] = len;
  // collapse to (outer, axis, inner)
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const int64_t ax = s[axis];
  auto out = detail::make_node<T>("slice_axis", os, {xn});
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t a = 0; a < len; ++a)
      std::copy_n(xn->val.data() + (o * ax + start + a) * inner, inner,
                  out->val.data() + (o * len + a) * inner);
  if (out->requires_grad) {
    out->back = [outer, inner, ax, start, len](Node<T>& self) {
      auto& X = *self.parents[0];
      if (!X.requires_grad) return;
      T* gx = grad_buf(X).data();
      const T* g = self.grad.data();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t a = 0; a < len; ++a) {
          const T* src = g + (o * len + a) * inner;
          T* dst = gx + (o * ax + start + a) * inner;
          for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    };
  }
  return Tensor<T>(out);
}

// concatenate NCHW tensors along the channel axis
template <class T>
Tensor<T> concat_ch(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_ch: no inputs");
  const Shape& s0 = parts[0].shape();
  if (s0.size() != 4) shape_fail("concat_ch", "expects NCHW, got " + shape_str(s0));
  int64_t ctot = 0;
  std::vector<std::shared_ptr<Node<T>>> ps;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3])
      shape_fail("concat_ch", shape_str(s) + " does not align with " + shape_str(s0));
    ctot += s[1];
    ps.push_back(p.node());
  }
  const int64_t b = s0[0], hw = s0[2] * s0[3];
  auto out = detail::make_node<T>("concat_ch", Shape{b, ctot, s0[2], s0[3]}, std::move(ps));
  int64_t coff = 0;
  for (const auto& pn : out->parents) {
    const int64_t c = pn->shape[1];
    for (int64_t bi = 0; bi < b; ++bi)
      std::copy_n(pn->val.data() + bi * c * hw, c * hw,
                  out->val.data() + (bi * ctot + coff) * hw);
    coff += c;
  }
  if (out->requires_grad) {
    out->back = [b, ctot, hw](Node<T>& self) {
      int64_t coff = 0;
      for (auto& pp : self.parents) {
        auto& P = *pp;
        const int64_t c = P.shape[1];
        if (P.requires_grad) {
          T* gp = grad_buf(P).data();
          for (int64_t bi = 0; bi < b; ++bi) {
            const T* src = self.grad.data() + (bi * ctot + coff) * hw;
            T* dst = gp + bi * c * hw;
            for (int64_t i = 0; i < c * hw; ++i) dst[i] += src[i];
          }
        }
        coff += c;
      }
    };
  }
  return Tensor<T>(out);
}

// reverse along axis 1 of (B, L, D)
template <class T>
Tensor<T> reverse_seq(const Tensor<T>& x) {
  const Shape& s = x.shape();
  if (s.size() != 3) shape_fail("reverse_seq", "expects (B, L, D), got " + shape_str(s));
  const int64_t b = s[0], l = s[1], d = s[2];
  auto out = detail::make_node<T>("reverse_seq", s, {x.node()});
  const auto& xv = x.node()->val;
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t t = 0; t < l; ++t)
      std::copy_n(xv.data() + (bi * l + t) * d, d,
                  out->val.data() + (bi * l + (l - 1 - t)) * d);
  if (out->requires_grad) {
    out->back = [b, l, d](Node<T>& self) {
      auto& X = *self.parents[0];
      if (!X.requires_grad) return;
      T* gx = grad_buf(X).data();
      const T* g = self.grad.data();
      for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t t = 0; t < l; ++t) {
          const T* src = g + (bi * l + (l - 1 - t)) * d;
          T* dst = gx + (bi * l + t) * d;
          for (int64_t i = 0; i < d; ++i) dst[i] += src[i];
        }
    };
  }
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// linear / conv / norms

// x: (..., d_in), w: (d_in, d_out), b: (d_out) or undefined
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = Tensor<T>{}) {
  const auto& xn = x.node();
  const auto& wn = w.node();
  if (xn->shape.empty() || wn->shape.size() != 2)
    shape_fail("linear", "x " + shape_str(xn->shape) + ", w " + shape_str(wn->shape));
  const int64_t din = xn->shape.back();
  if (din != wn->shape[0])
    shape_fail("linear", "input features " + std::to_string(din) + " do not match weight rows " +
                             std::to_string(wn->shape[0]) + "; x=" + shape_str(xn->shape) +
                             ", w=" + shape_str(wn->shape));
  const int64_t dout = wn->shape[1];
  if (b.defined() && (b.shape().size() != 1 || b.shape()[0] != dout))
    shape_fail("linear", "bias " + shape_str(b.shape()) + " does not match d_out " + std::to_string(dout));
  Shape os = xn->shape;
  os.back() = dout;
  const int64_t m = xn->size() / din;

  std::vector<std::shared_ptr<Node<T>>> ps{xn, wn};
  if (b.defined()) ps.push_back(b.node());
  auto out = detail::make_node<T>("linear", os, std::move(ps));
  const T* xp = xn->val.data();
  const T* wp = wn->val.data();
  T* op = out->val.data();
  for (int64_t r = 0; r < m; ++r) {
    T* orow = op + r * dout;
    if (b.defined())
      std::copy_n(b.node()->val.data(), dout, orow);
    const T* xrow = xp + r * din;
    for (int64_t i = 0; i < din; ++i) {
      const T xv = xrow[i];
      if (xv == T(0)) continue;
      const T* wrow = wp + i * dout;
      for (int64_t o = 0; o < dout; ++o) orow[o] += xv * wrow[o];
    }
  }
  if (out->requires_grad) {
    const bool has_bias = b.defined();
    out->back = [m, din, dout, has_bias](Node<T>& self) {
      auto& X = *self.parents[0];
      auto& W = *self.parents[1];
      const T* g = self.grad.data();
      if (X.requires_grad) {
        T* gx = grad_buf(X).data();
        const T* wp = W.val.data();
        for (int64_t r = 0; r < m; ++r) {
          const T* grow = g + r * dout;
          T* gxrow = gx + r * din;
          for (int64_t i = 0; i < din; ++i) {
            const T* wrow = wp + i * dout;
            T acc = T(0);
            for (int64_t o = 0; o < dout; ++o) acc += grow[o] * wrow[o];
            gxrow[i] += acc;
          }
        }
      }
      if (W.requires_grad) {
        T* gw = grad_buf(W).data();
        const T* xp = X.val.data();
        for (int64_t r = 0; r < m; ++r) {
          const T* grow = g + r * dout;
          const T* xrow = xp + r * din;
          for (int64_t i = 0; i < din; ++i) {
            const T xv = xrow[i];
            if (xv == T(0)) continue;
            T* gwrow = gw + i * dout;
            for (int64_t o = 0; o < dout; ++o) gwrow[o] += xv * grow[o];
          }
        }
      }
      if (has_bias && self.parents[2]->requires_grad) {
        auto& B = *self.parents[2];
        T* gb = grad_buf(B).data();
        for (int64_t r = 0; r < m; ++r) {
          const T* grow = g + r * dout;
          for (int64_t o = 0; o < dout; ++o) gb[o] += grow[o];
        }
      }
    };
  }
  return Tensor<T>(out);
}

// x: (B, Cin, H, W), w: (Cout, Cin/groups, k, k), b: (Cout) or undefined.
// groups must divide both channel counts; k in {1, 3}.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int64_t stride,
                 int64_t pad, int64_t groups = 1) {
  const auto& xn = x.node();
  const auto& wn = w.node();
  if (xn->shape.size() != 4 || wn->shape.size() != 4)
    shape_fail("conv2d", "x " + shape_str(xn->shape) + ", w " + shape_str(wn->shape));
  const int64_t bsz = xn->shape[0], cin = xn->shape[1], h = xn->shape[2], wd = xn->shape[3];
  const int64_t cout = wn->shape[0], cink = wn->shape[1], k = wn->shape[2];
  if (wn->shape[3] != k) shape_fail("conv2d", "kernel must be square, got " + shape_str(wn->shape));
  if (k != 1 && k != 3)
    throw ConfigError("conv2d: kernel size " + std::to_string(k) + " unsupported (1 or 3)");
  if (stride < 1 || pad < 0) throw ConfigError("conv2d: bad stride/pad");
  if (groups < 1 || cin % groups || cout % groups)
    throw ConfigError("conv2d: groups " + std::to_string(groups) + " does not divide channels " +
                      std::to_string(cin) + "/" + std::to_string(cout));
  if (cink != cin / groups)
    shape_fail("conv2d", "weight " + shape_str(wn->shape) + " expects input channels " +
                             std::to_string(cink * groups) + ", got " + std::to_string(cin));
  const int64_t hn = h + 2 * pad - k;
  const int64_t wn2 = wd + 2 * pad - k;
  if (hn < 0 || wn2 < 0 || hn % stride || wn2 % stride)
    throw ConfigError("conv2d: output extent not integral for input " + shape_str(xn->shape) +
                      ", k=" + std::to_string(k) + ", stride=" + std::to_string(stride) +
                      ", pad=" + std::to_string(pad));
  const int64_t ho = hn / stride + 1, wo = wn2 / stride + 1;
  if (b.defined() && (b.shape().size() != 1 || b.shape()[0] != cout))
    shape_fail("conv2d", "bias " + shape_str(b.shape()) + " does not match out channels");

  std::vector<std::shared_ptr<Node<T>>> ps{xn, wn};
  if (b.defined()) ps.push_back(b.node());
  auto out = detail::make_node<T>("conv2d", Shape{bsz, cout, ho, wo}, std::move(ps));

  const int64_t cpg_o = cout / groups;
  const T* xp = xn->val.data();
  const T* wp = wn->val.data();
  T* op = out->val.data();
  for (int64_t bi = 0; bi < bsz; ++bi)
    for (int64_t co = 0; co < cout; ++co) {
      const int64_t g = co / cpg_o;
      const T bias = b.defined() ? b.node()->val[co] : T(0);
      T* oplane = op + (bi * cout + co) * ho * wo;
      for (int64_t oy = 0; oy < ho; ++oy)
        for (int64_t ox = 0; ox < wo; ++ox) {
          T acc = bias;
          for (int64_t ci = 0; ci < cink; ++ci) {
            const T* xplane = xp + (bi * cin + g * cink + ci) * h * wd;
            const T* wk = wp + ((co * cink + ci) * k) * k;
            for (int64_t ky = 0; ky < k; ++ky) {
              const int64_t iy = oy * stride + ky - pad;
              if (iy < 0 || iy >= h) continue;
              for (int64_t kx = 0; kx < k; ++kx) {
                const int64_t ix = ox * stride + kx - pad;
                if (ix < 0 || ix >= wd) continue;
                acc += xplane[iy * wd + ix] * wk[ky * k + kx];
              }
            }
          }
          oplane[oy * wo + ox] = acc;
        }
    }

  if (out->requires_grad) {
    const bool has_bias = b.defined();
    out->back = [bsz, cin, h, wd, cout, cink, k, stride, pad, ho, wo, cpg_o,
                 has_bias](Node<T>& self) {
      auto& X = *self.parents[0];
      auto& W = *self.parents[1];
      const T* g = self.grad.data();
      const bool gx = X.requires_grad;
      const bool gw = W.requires_grad;
      if (gx) grad_buf(X);
      if (gw) grad_buf(W);
      T* gb = nullptr;
      if (has_bias && self.parents[2]->requires_grad) gb = grad_buf(*self.parents[2]).data();
      for (int64_t bi = 0; bi < bsz; ++bi)
        for (int64_t co = 0; co < cout; ++co) {
          const int64_t grp = co / cpg_o;
          const T* gplane = g + (bi * cout + co) * ho * wo;
          for (int64_t oy = 0; oy < ho; ++oy)
            for (int64_t ox = 0; ox < wo; ++ox) {
              const T gv = gplane[oy * wo + ox];
              if (gv == T(0)) continue;
              if (gb) gb[co] += gv;
              for (int64_t ci = 0; ci < cink; ++ci) {
                const int64_t xidx = (bi * cin + grp * cink + ci) * h * wd;
                const int64_t widx = (co * cink + ci) * k * k;
                for (int64_t ky = 0; ky < k; ++ky) {
                  const int64_t iy = oy * stride + ky - pad;
                  if (iy < 0 || iy >= h) continue;
                  for (int64_t kx = 0; kx < k; ++kx) {
                    const int64_t ix = ox * stride + kx - pad;
                    if (ix < 0 || ix >= wd) continue;
                    if (gw) W.grad[widx + ky * k + kx] += gv * X.val[xidx + iy * wd + ix];
                    if (gx) X.grad[xidx + iy * wd + ix] += gv * W.val[widx + ky * k + kx];
                  }
                }
              }
            }
        }
    };
  }
  return Tensor<T>(out);
}

// normalization over the last axis with per-feature affine, population variance
template <class T>
Tensor<T> layer_norm_last(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                          T eps) {
  const auto& xn = x.node();
  if (xn->shape.empty()) shape_fail("layer_norm", "rank-0 input");
  const int64_t d = xn->shape.back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d})
    shape_fail("layer_norm", "affine params " + shape_str(gamma.shape()) + "/" +
                                 shape_str(beta.shape()) + " do not match feature dim " +
                                 std::to_string(d));
  if (!(eps > T(0))) throw PreconditionError("layer_norm: eps must be positive");
  const int64_t rows = xn->size() / d;
  auto out = detail::make_node<T>("layer_norm", xn->shape, {xn, gamma.node(), beta.node()});

  auto xhat = std::make_shared<std::vector<T>>(static_cast<size_t>(xn->size()));
  auto rstd = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
  const T* xp = xn->val.data();
  const T* gp = gamma.node()->val.data();
  const T* bp = beta.node()->val.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xrow = xp + r * d;
    T mu = T(0);
    for (int64_t i = 0; i < d; ++i) mu += xrow[i];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (int64_t i = 0; i < d; ++i) {
      const T c = xrow[i] - mu;
      var += c * c;
    }
    var /= static_cast<T>(d);
    const T r1 = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = r1;
    T* xh = xhat->data() + r * d;
    T* orow = out->val.data() + r * d;
    for (int64_t i = 0; i < d; ++i) {
      xh[i] = (xrow[i] - mu) * r1;
      orow[i] = xh[i] * gp[i] + bp[i];
    }
  }

  if (out->requires_grad) {
    out->back = [rows, d, xhat, rstd](Node<T>& self) {
      auto& X = *self.parents[0];
      auto& G = *self.parents[1];
      auto& B = *self.parents[2];
      const T* g = self.grad.data();
      const T* gp = G.val.data();
      if (G.requires_grad) {
        T* gg = grad_buf(G).data();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t i = 0; i < d; ++i) gg[i] += g[r * d + i] * (*xhat)[r * d + i];
      }
      if (B.requires_grad) {
        T* gb = grad_buf(B).data();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t i = 0; i < d; ++i) gb[i] += g[r * d + i];
      }
      if (X.requires_grad) {
        T* gx = grad_buf(X).data();
        for (int64_t r = 0; r < rows; ++r) {
          const T* grow = g + r * d;
          const T* xh = xhat->data() + r * d;
          T mean_dxh = T(0), mean_dxh_xh = T(0);
          for (int64_t i = 0; i < d; ++i) {
            const T dxh = grow[i] * gp[i];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[i];
          }
          mean_dxh /= static_cast<T>(d);
          mean_dxh_xh /= static_cast<T>(d);
          const T r1 = (*rstd)[r];
          for (int64_t i = 0; i < d; ++i) {
            const T dxh = grow[i] * gp[i];
            gx[r * d + i] += r1 * (dxh - mean_dxh - xh[i] * mean_dxh_xh);
          }
        }
      }
    };
  }
  return Tensor<T>(out);
}

// softmax over the last axis; k > 0 keeps only the k largest logits per row
// and renormalizes over them
template <class T>
Tensor<T> softmax_last(const Tensor<T>& x, int64_t top_k = 0) {
  const auto& xn = x.node();
  if (xn->shape.empty()) shape_fail("softmax", "rank-0 input");
  const int64_t d = xn->shape.back();
  const int64_t rows = xn->size() / d;
  auto out = detail::make_node<T>("softmax", xn->shape, {xn});
  const T* xp = xn->val.data();
  std::vector<T> scratch;
  for (int64_t r = 0; r < rows; ++r) {
    const T* xrow = xp + r * d;
    T* orow = out->val.data() + r * d;
    T thresh = -std::numeric_limits<T>::infinity();
    if (top_k > 0 && top_k < d) {
      scratch.assign(xrow, xrow + d);
      std::nth_element(scratch.begin(), scratch.begin() + (top_k - 1), scratch.end(),
                       std::greater<T>());
      thresh = scratch[top_k - 1];
    }
    T mx = -std::numeric_limits<T>::infinity();
    for (int64_t i = 0; i < d; ++i)
      if (xrow[i] >= thresh && xrow[i] > mx) mx = xrow[i];
    T denom = T(0);
    int64_t kept = 0;
    for (int64_t i = 0; i < d; ++i) {
      if (xrow[i] >= thresh && (top_k <= 0 || top_k >= d || kept < top_k)) {
        orow[i] = std::exp(xrow[i] - mx);
        denom += orow[i];
        ++kept;
      } else {
        orow[i] = T(0);
      }
    }
    for (int64_t i = 0; i < d; ++i) orow[i] /= denom;
  }
  if (out->requires_grad) {
    out->back = [rows, d](Node<T>& self) {
      auto& X = *self.parents[0];
      if (!X.requires_grad) return;
      T* gx = grad_buf(X).data();
      const T* g = self.grad.data();
      const T* y = self.val.data();
      for (int64_t r = 0; r < rows; ++r) {
        T dot = T(0);
        for (int64_t i = 0; i < d; ++i) dot += g[r * d + i] * y[r * d + i];
        for (int64_t i = 0; i < d; ++i)
          gx[r * d + i] += y[r * d + i] * (g[r * d + i] - dot);
      }
    };
  }
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// resampling

template <class T>
Tensor<T> down2_mean(const Tensor<T>& x) {
  const Shape& s = x.shape();
  if (s.size() != 4) shape_fail("down2_mean", "expects NCHW, got " + shape_str(s));
  if (s[2] % 2 || s[3] % 2)
    throw ConfigError("down2_mean: extents must be even, got " + shape_str(s));
  const int64_t b = s[0], c = s[1], h = s[2], w = s[3], ho = h / 2, wo = w / 2;
  auto out = detail::make_node<T>("down2_mean", Shape{b, c, ho, wo}, {x.node()});
  const T* xp = x.node()->val.data();
  T* op = out->val.data();
  for (int64_t p = 0; p < b * c; ++p) {
    const T* xpl = xp + p * h * w;
    T* opl = op + p * ho * wo;
    for (int64_t y = 0; y < ho; ++y)
      for (int64_t xx = 0; xx < wo; ++xx)
        opl[y * wo + xx] = (xpl[(2 * y) * w + 2 * xx] + xpl[(2 * y) * w + 2 * xx + 1] +
                            xpl[(2 * y + 1) * w + 2 * xx] + xpl[(2 * y + 1) * w + 2 * xx + 1]) /
                           T(4);
  }
  if (out->requires_grad) {
    out->back = [b, c, h, w, ho, wo](Node<T>& self) {
      auto& X = *self.parents[0];
      if (!X.requires_grad) return;
      T* gx = grad_buf(X).data();
      const T* g = self.grad.data();
      for (int64_t p = 0; p < b * c; ++p) {
        const T* gpl = g + p * ho * wo;
        T* gxpl = gx + p * h * w;
        for (int64_t y = 0; y < ho; ++y)
          for (int64_t xx = 0; xx < wo; ++xx) {
            const T q = gpl[y * wo + xx] / T(4);
            gxpl[(2 * y) * w + 2 * xx] += q;
            gxpl[(2 * y) * w + 2 * xx + 1] += q;
            gxpl[(2 * y + 1) * w + 2 * xx] += q;
            gxpl[(2 * y + 1) * w + 2 * xx + 1] += q;
          }
      }
    };
  }
  return Tensor<T>(out);
}

template <class T>
Tensor<T> up2_nearest(const Tensor<T>& x) {
  const Shape& s = x.shape();
  if (s.size() != 4) shape_fail("up2_nearest", "expects NCHW, got " + shape_str(s));
  const int64_t b = s[0], c = s[1], h = s[2], w = s[3], ho = h * 2, wo = w * 2;
  auto out = detail::make_node<T>("up2_nearest", Shape{b, c, ho, wo}, {x.node()});
  const T* xp = x.node()->val.data();
  T* op = out->val.data();
  for (int64_t p = 0; p < b * c; ++p) {
    const T* xpl = xp + p * h * w;
    T* opl = op + p * ho * wo;
    for (int64_t y = 0; y < h; ++y)
      for (int64_t xx = 0; xx < w; ++xx) {
        const T v = xpl[y * w + xx];
        opl[(2 * y) * wo + 2 * xx] = v;
        opl[(2 * y) * wo + 2 * xx + 1] = v;
        opl[(2 * y + 1) * wo + 2 * xx] = v;
        opl[(2 * y + 1) * wo + 2 * xx + 1] = v;
      }
  }
  if (out->requires_grad) {
    out->back = [b, c, h, w, ho, wo](Node<T>& self) {
      auto& X = *self.parents[0];
      if (!X.requires_grad) return;
      T* gx = grad_buf(X).data();
      const T* g = self.grad.data();
      for (int64_t p = 0; p < b * c; ++p) {
        const T* gpl = g + p * ho * wo;
        T* gxpl = gx + p * h * w;
        for (int64_t y = 0; y < h; ++y)
          for (int64_t xx = 0; xx < w; ++xx)
            gxpl[y * w + xx] += gpl[(2 * y) * wo + 2 * xx] + gpl[(2 * y) * wo + 2 * xx + 1] +
                                gpl[(2 * y + 1) * wo + 2 * xx] +
                                gpl[(2 * y + 1) * wo + 2 * xx + 1];
      }
    };
  }
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// 2d <-> sequence

enum class ScanOrder { RowForward, RowBackward, ColForward, ColBackward };

inline const char* scan_order_name(ScanOrder o) {
  switch (o) {
    case ScanOrder::RowForward: return "row_forward";
    case ScanOrder::RowBackward: return "row_backward";
    case ScanOrder::ColForward: return "col_forward";
    default: return "col_backward";
  }
}

namespace detail {
inline int64_t scan_pos(ScanOrder o, int64_t h, int64_t w, int64_t H, int64_t W) {
  const int64_t L = H * W;
  switch (o) {
    case ScanOrder::RowForward: return h * W + w;
    case ScanOrder::RowBackward: return L - 1 - (h * W + w);
    case ScanOrder::ColForward: return w * H + h;
    default: return L - 1 - (w * H + h);
  }
}
}  // namespace detail

// (B, C, H, W) -> (B, H*W, C) in the given traversal order
template <class T>
Tensor<T> flatten_2d(const Tensor<T>& x, ScanOrder order) {
  const Shape& s = x.shape();
  if (s.size() != 4) shape_fail("flatten_2d", "expects NCHW, got " + shape_str(s));
  const int64_t b = s[0], c = s[1], h = s[2], w = s[3], l = h * w;
  auto out = detail::make_node<T>("flatten_2d", Shape{b, l, c}, {x.node()});
  const T* xp = x.node()->val.data();
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t ci = 0; ci < c; ++ci) {
      const T* xpl = xp + (bi * c + ci) * l;
      T* op = out->val.data() + bi * l * c + ci;
      for (int64_t y = 0; y < h; ++y)
        for (int64_t xx = 0; xx < w; ++xx)
          op[detail::scan_pos(order, y, xx, h, w) * c] = xpl[y * w + xx];
    }
  if (out->requires_grad) {
    out->back = [b, c, h, w, l, order](Node<T>& self) {
      auto& X = *self.parents[0];
      if (!X.requires_grad) return;
      T* gx = grad_buf(X).data();
      const T* g = self.grad.data();
      for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t ci = 0; ci < c; ++ci) {
          T* gxpl = gx + (bi * c + ci) * l;
          const T* gp = g + bi * l * c + ci;
          for (int64_t y = 0; y < h; ++y)
            for (int64_t xx = 0; xx < w; ++xx)
              gxpl[y * w + xx] += gp[detail::scan_pos(order, y, xx, h, w) * c];
        }
    };
  }
  return Tensor<T>(out);
}

// (B, H*W, C) -> (B, C, H, W), exact inverse of flatten_2d with the same order
template <class T>
Tensor<T> unflatten_2d(const Tensor<T>& x, ScanOrder order, int64_t h, int64_t w) {
  const Shape& s = x.shape();
  if (s.size() != 3 || s[1] != h * w)
    shape_fail("unflatten_2d", shape_str(s) + " does not match H*W = " + std::to_string(h * w));
  const int64_t b = s[0], l = s[1], c = s[2];
  auto out = detail::make_node<T>("unflatten_2d", Shape{b, c, h, w}, {x.node()});
  const T* xp = x.node()->val.data();
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t ci = 0; ci < c; ++ci) {
      T* opl = out->val.data() + (bi * c + ci) * l;
      const T* ip = xp + bi * l * c + ci;
      for (int64_t y = 0; y < h; ++y)
        for (int64_t xx = 0; xx < w; ++xx)
          opl[y * w + xx] = ip[detail::scan_pos(order, y, xx, h, w) * c];
    }
  if (out->requires_grad) {
    out->back = [b, c, h, w, l, order](Node<T>& self) {
      auto& X = *self.parents[0];
      if (!X.requires_grad) return;
      T* gx = grad_buf(X).data();
      const T* g = self.grad.data();
      for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t ci = 0; ci < c; ++ci) {
          const T* gpl = g + (bi * c + ci) * l;
          T* gxp = gx + bi * l * c + ci;
          for (int64_t y = 0; y < h; ++y)
            for (int64_t xx = 0; xx < w; ++xx)
              gxp[detail::scan_pos(order, y, xx, h, w) * c] += gpl[y * w + xx];
        }
    };
  }
  return Tensor<T>(out);
}

// ---------------------------------------------------------------------------
// losses

// mean absolute error; the subgradient at zero residual is zero
template <class T>
Tensor<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  const auto& pn = pred.node();
  const auto& tn = target.node();
  if (pn->shape != tn->shape)
    shape_fail("l1_loss", shape_str(pn->shape) + " vs " + shape_str(tn->shape));
  auto out = detail::make_node<T>("l1_loss", Shape{1}, {pn, tn});
  const int64_t n = pn->size();
  T acc = T(0);
  for (int64_t i = 0; i < n; ++i) acc += std::abs(pn->val[i] - tn->val[i]);
  out->val[0] = acc / static_cast<T>(n);
  if (out->requires_grad) {
    out->back = [n](Node<T>& self) {
      auto& P = *self.parents[0];
      auto& Q = *self.parents[1];
      const T g = self.grad[0] / static_cast<T>(n);
      for (int64_t i = 0; i < n; ++i) {
        const T r = P.val[i] - Q.val[i];
        const T s = r > T(0) ? g : (r < T(0) ? -g : T(0));
        if (P.requires_grad) grad_buf(P)[i] += s;
        if (Q.requires_grad) grad_buf(Q)[i] -= s;
      }
    };
  }
  return Tensor<T>(out);
}

}  // namespace uwm
