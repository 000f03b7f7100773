#pragma once

#include "uwm/layers.hpp"
#include "uwm/ops.hpp"

namespace uwm {

enum class ScanEvaluator { Sequential, Parallel };

inline const char* evaluator_name(ScanEvaluator e) {
  return e == ScanEvaluator::Sequential ? "sequential" : "parallel";
}

// ---------------------------------------------------------------------------
// zero-order-hold discretization
//
// a_bar = exp(delta * a), b_bar = phi(delta * a) * delta * b with
// phi(z) = (exp(z) - 1)/z and phi == 1 exactly once |delta * a| < 1e-8.

template <class T>
struct DiscretizedParams {
  Tensor<T> a_bar;  // (B, L, D, N)
  Tensor<T> b_bar;  // (B, L, D, N)
};

// a_diag: (N) strictly negative diagonal, b_in: (B, L, N), delta: (B, L, D) > 0
template <class T>
DiscretizedParams<T> discretize(const Tensor<T>& a_diag, const Tensor<T>& b_in,
                                const Tensor<T>& delta) {
  if (a_diag.shape().size() != 1) shape_fail("discretize", "a_diag must be (N), got " + shape_str(a_diag.shape()));
  if (b_in.shape().size() != 3) shape_fail("discretize", "b_in must be (B, L, N), got " + shape_str(b_in.shape()));
  if (delta.shape().size() != 3) shape_fail("discretize", "delta must be (B, L, D), got " + shape_str(delta.shape()));
  const int64_t n = a_diag.shape()[0];
  const int64_t b = delta.shape()[0], l = delta.shape()[1], d = delta.shape()[2];
  if (b_in.shape()[0] != b || b_in.shape()[1] != l || b_in.shape()[2] != n)
    shape_fail("discretize", "b_in " + shape_str(b_in.shape()) + " does not match delta " +
                                 shape_str(delta.shape()) + " and a_diag " + shape_str(a_diag.shape()));
  for (const T v : delta.data())
    if (!(v > T(0))) throw PreconditionError("discretize: delta must be strictly positive");

  auto d4 = reshape(delta, {b, l, d, 1});
  auto a4 = reshape(a_diag, {1, 1, 1, n});
  auto z = mul(d4, a4);
  DiscretizedParams<T> out;
  out.a_bar = exp_t(z);
  out.b_bar = mul(phi_expm1(z), mul(d4, reshape(b_in, {b, l, 1, n})));
  return out;
}

// ---------------------------------------------------------------------------
// the recurrence h_t = a_t (.) h_{t-1} + b_t * x_t,  y_t = <c_t, h_t> + d * x_t
// as one fused graph node. Both evaluators fill the same hidden-state buffer;
// the adjoint below is shared.

namespace detail {

// sequential left fold
template <class T>
void scan_fill_h_sequential(const T* a, const T* bb, const T* x, T* h, int64_t bsz, int64_t l,
                            int64_t d, int64_t n) {
  const int64_t dn = d * n;
  for (int64_t bi = 0; bi < bsz; ++bi) {
    const int64_t base = bi * l * dn;
    for (int64_t t = 0; t < l; ++t) {
      const T* hp = t ? h + base + (t - 1) * dn : nullptr;
      const int64_t off = base + t * dn;
      for (int64_t di = 0; di < d; ++di) {
        const T xv = x[(bi * l + t) * d + di];
        const int64_t o = off + di * n;
        for (int64_t ni = 0; ni < n; ++ni) {
          const T prev = hp ? hp[di * n + ni] : T(0);
          h[o + ni] = a[o + ni] * prev + bb[o + ni] * xv;
        }
      }
    }
  }
}

// Work-efficient Blelloch scan over the affine maps h -> a*h + v. Pairs
// compose as (first then second) = (a2*a1, a2*v1 + v2); identity is (1, 0).
template <class T>
void scan_fill_h_parallel(const T* a, const T* bb, const T* x, T* h, int64_t bsz, int64_t l,
                          int64_t d, int64_t n) {
  const int64_t dn = d * n;
  int64_t lp = 1;
  while (lp < l) lp <<= 1;
  std::vector<T> wa(static_cast<size_t>(lp * dn)), wv(static_cast<size_t>(lp * dn));
  for (int64_t bi = 0; bi < bsz; ++bi) {
    const int64_t base = bi * l * dn;
    for (int64_t t = 0; t < lp; ++t) {
      T* war = wa.data() + t * dn;
      T* wvr = wv.data() + t * dn;
      if (t < l) {
        const T* ar = a + base + t * dn;
        const T* br = bb + base + t * dn;
        const T* xr = x + (bi * l + t) * d;
        for (int64_t di = 0; di < d; ++di)
          for (int64_t ni = 0; ni < n; ++ni) {
            war[di * n + ni] = ar[di * n + ni];
            wvr[di * n + ni] = br[di * n + ni] * xr[di];
          }
      } else {
        for (int64_t i = 0; i < dn; ++i) {
          war[i] = T(1);
          wvr[i] = T(0);
        }
      }
    }
    // up-sweep: right node becomes (left segment, then right segment)
    for (int64_t s = 1; s < lp; s <<= 1)
      for (int64_t i = 2 * s - 1; i < lp; i += 2 * s) {
        const T* la = wa.data() + (i - s) * dn;
        const T* lv = wv.data() + (i - s) * dn;
        T* ra = wa.data() + i * dn;
        T* rv = wv.data() + i * dn;
        for (int64_t j = 0; j < dn; ++j) {
          rv[j] = ra[j] * lv[j] + rv[j];
          ra[j] = ra[j] * la[j];
        }
      }
    // down-sweep to exclusive prefixes
    for (int64_t i = 0; i < dn; ++i) {
      wa[(lp - 1) * dn + i] = T(1);
      wv[(lp - 1) * dn + i] = T(0);
    }
    for (int64_t s = lp >> 1; s >= 1; s >>= 1)
      for (int64_t i = 2 * s - 1; i < lp; i += 2 * s) {
        T* la = wa.data() + (i - s) * dn;
        T* lv = wv.data() + (i - s) * dn;
        T* pa = wa.data() + i * dn;
        T* pv = wv.data() + i * dn;
        for (int64_t j = 0; j < dn; ++j) {
          const T ta = la[j];
          const T tv = lv[j];
          la[j] = pa[j];
          lv[j] = pv[j];
          // parent prefix, then old left segment
          pv[j] = ta * pv[j] + tv;
          pa[j] = ta * pa[j];
        }
      }
    // inclusive value: leaf applied after the exclusive prefix
    for (int64_t t = 0; t < l; ++t) {
      const T* ar = a + base + t * dn;
      const T* br = bb + base + t * dn;
      const T* xr = x + (bi * l + t) * d;
      const T* ev = wv.data() + t * dn;
      T* hr = h + base + t * dn;
      for (int64_t di = 0; di < d; ++di)
        for (int64_t ni = 0; ni < n; ++ni) {
          const int64_t j = di * n + ni;
          hr[j] = ar[j] * ev[j] + br[j] * xr[di];
        }
    }
  }
}

}  // namespace detail

// a_bar, b_bar: (B, L, D, N); c_out: (B, L, N); d_skip: (D); x: (B, L, D)
template <class T>
Tensor<T> scan_run(const Tensor<T>& a_bar, const Tensor<T>& b_bar, const Tensor<T>& c_out,
                   const Tensor<T>& d_skip, const Tensor<T>& x, ScanEvaluator ev) {
  const Shape& sa = a_bar.shape();
  if (sa.size() != 4) shape_fail("scan", "a_bar must be (B, L, D, N), got " + shape_str(sa));
  const int64_t bsz = sa[0], l = sa[1], d = sa[2], n = sa[3];
  if (b_bar.shape() != sa)
    shape_fail("scan", "b_bar " + shape_str(b_bar.shape()) + " vs a_bar " + shape_str(sa));
  if (c_out.shape() != Shape{bsz, l, n})
    shape_fail("scan", "c_out " + shape_str(c_out.shape()) + " does not match " + shape_str(sa));
  if (d_skip.shape() != Shape{d})
    shape_fail("scan", "d_skip " + shape_str(d_skip.shape()) + " does not match D = " + std::to_string(d));
  if (x.shape() != Shape{bsz, l, d})
    shape_fail("scan", "x " + shape_str(x.shape()) + " does not match " + shape_str(sa));

  auto out = detail::make_node<T>("selective_scan", Shape{bsz, l, d},
                                  {a_bar.node(), b_bar.node(), c_out.node(), d_skip.node(),
                                   x.node()});
  auto h = std::make_shared<std::vector<T>>(static_cast<size_t>(bsz * l * d * n));
  const T* ap = a_bar.node()->val.data();
  const T* bp = b_bar.node()->val.data();
  const T* cp = c_out.node()->val.data();
  const T* dp = d_skip.node()->val.data();
  const T* xp = x.node()->val.data();
  if (ev == ScanEvaluator::Sequential)
    detail::scan_fill_h_sequential(ap, bp, xp, h->data(), bsz, l, d, n);
  else
    detail::scan_fill_h_parallel(ap, bp, xp, h->data(), bsz, l, d, n);
  const int64_t dn = d * n;
  for (int64_t bi = 0; bi < bsz; ++bi)
    for (int64_t t = 0; t < l; ++t) {
      const T* hr = h->data() + (bi * l + t) * dn;
      const T* cr = cp + (bi * l + t) * n;
      const T* xr = xp + (bi * l + t) * d;
      T* yr = out->val.data() + (bi * l + t) * d;
      for (int64_t di = 0; di < d; ++di) {
        T acc = dp[di] * xr[di];
        const T* hd = hr + di * n;
        for (int64_t ni = 0; ni < n; ++ni) acc += cr[ni] * hd[ni];
        yr[di] = acc;
      }
    }

  if (out->requires_grad) {
    out->back = [bsz, l, d, n, h](Node<T>& self) {
      auto& A = *self.parents[0];
      auto& Bb = *self.parents[1];
      auto& C = *self.parents[2];
      auto& Dk = *self.parents[3];
      auto& X = *self.parents[4];
      const bool ga = A.requires_grad, gb = Bb.requires_grad, gc = C.requires_grad,
                 gd = Dk.requires_grad, gx = X.requires_grad;
      if (ga) grad_buf(A);
      if (gb) grad_buf(Bb);
      if (gc) grad_buf(C);
      if (gd) grad_buf(Dk);
      if (gx) grad_buf(X);
      const T* g = self.grad.data();
      const int64_t dn = d * n;
      std::vector<T> gh(static_cast<size_t>(dn));
      for (int64_t bi = 0; bi < bsz; ++bi) {
        std::fill(gh.begin(), gh.end(), T(0));
        const int64_t base = bi * l * dn;
        for (int64_t t = l - 1; t >= 0; --t) {
          const int64_t off = base + t * dn;
          const T* gr = g + (bi * l + t) * d;
          const T* cr = C.val.data() + (bi * l + t) * n;
          const T* hr = h->data() + off;
          const T* hprev = t ? h->data() + off - dn : nullptr;
          const T* xr = X.val.data() + (bi * l + t) * d;
          for (int64_t di = 0; di < d; ++di) {
            const T gy = gr[di];
            const T xv = xr[di];
            T* ghd = gh.data() + di * n;
            if (gy != T(0)) {
              if (gd) Dk.grad[di] += gy * xv;
              if (gx) X.grad[(bi * l + t) * d + di] += gy * Dk.val[di];
              for (int64_t ni = 0; ni < n; ++ni) {
                ghd[ni] += cr[ni] * gy;
                if (gc) C.grad[(bi * l + t) * n + ni] += hr[di * n + ni] * gy;
              }
            }
            const int64_t o = off + di * n;
            T gxacc = T(0);
            for (int64_t ni = 0; ni < n; ++ni) {
              const T ghv = ghd[ni];
              if (ga) A.grad[o + ni] += ghv * (hprev ? hprev[di * n + ni] : T(0));
              if (gb) Bb.grad[o + ni] += ghv * xv;
              gxacc += ghv * Bb.val[o + ni];
              ghd[ni] = ghv * A.val[o + ni];
            }
            if (gx) X.grad[(bi * l + t) * d + di] += gxacc;
          }
        }
      }
    };
  }
  return Tensor<T>(out);
}

template <class T>
Tensor<T> scan_sequential(const DiscretizedParams<T>& disc, const Tensor<T>& c_out,
                          const Tensor<T>& d_skip, const Tensor<T>& x) {
  return scan_run(disc.a_bar, disc.b_bar, c_out, d_skip, x, ScanEvaluator::Sequential);
}

template <class T>
Tensor<T> scan_parallel(const DiscretizedParams<T>& disc, const Tensor<T>& c_out,
                        const Tensor<T>& d_skip, const Tensor<T>& x) {
  return scan_run(disc.a_bar, disc.b_bar, c_out, d_skip, x, ScanEvaluator::Parallel);
}

// ---------------------------------------------------------------------------
// input-dependent projections and the full layer

// Per-direction parameter bundle. delta uses a rank-1 projection with a
// learned per-channel bias; softplus keeps the step strictly positive.
template <class T>
struct SsmParams {
  std::shared_ptr<Parameter<T>> log_a;       // (N); a_diag = -exp(log_a)
  std::shared_ptr<Parameter<T>> b_proj;      // (D, N)
  std::shared_ptr<Parameter<T>> c_proj;      // (D, N)
  std::shared_ptr<Parameter<T>> delta_down;  // (D, 1)
  std::shared_ptr<Parameter<T>> delta_up;    // (D)
  std::shared_ptr<Parameter<T>> delta_bias;  // (D)
  std::shared_ptr<Parameter<T>> d_skip;      // (D)
  int64_t d_state = 0;

  void init(ParamRegistry<T>& reg, const std::string& prefix, int64_t d, int64_t n, Rng& rng) {
    d_state = n;
    // a_diag spans [-1, -N] log-spaced; softplus(delta_bias) lands in
    // [1e-3, 1e-1] so initial steps are small but nonzero
    std::vector<T> la(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
      const double t = n == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n - 1);
      la[i] = static_cast<T>(t * std::log(static_cast<double>(n)));
    }
    log_a = reg.add(prefix + ".log_a", {n}, std::move(la));
    b_proj = reg.add(prefix + ".b_proj", {d, n}, uniform_init<T>(rng, d * n, d));
    c_proj = reg.add(prefix + ".c_proj", {d, n}, uniform_init<T>(rng, d * n, d));
    delta_down = reg.add(prefix + ".delta_down", {d, 1}, uniform_init<T>(rng, d, d));
    delta_up = reg.add(prefix + ".delta_up", {d}, uniform_init<T>(rng, d, d));
    std::vector<T> db(static_cast<size_t>(d));
    for (auto& v : db) {
      const double u = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
      v = static_cast<T>(std::log(std::expm1(u)));
    }
    delta_bias = reg.add(prefix + ".delta_bias", {d}, std::move(db));
    d_skip = reg.add(prefix + ".d_skip", {d}, std::vector<T>(static_cast<size_t>(d), T(1)));
  }
};

template <class T>
struct SelectiveTensors {
  Tensor<T> delta;  // (B, L, D)
  Tensor<T> b_in;   // (B, L, N)
  Tensor<T> c_out;  // (B, L, N)
};

template <class T>
SelectiveTensors<T> selective_params(const Tensor<T>& x, const SsmParams<T>& p) {
  const Shape& s = x.shape();
  if (s.size() != 3) shape_fail("selective_params", "expects (B, L, D), got " + shape_str(s));
  const int64_t d = s[2];
  if (p.b_proj->value.shape()[0] != d)
    shape_fail("selective_params", "x features " + std::to_string(d) + " do not match params " +
                                       shape_str(p.b_proj->value.shape()));
  SelectiveTensors<T> out;
  auto sdown = linear(x, p.delta_down->value);  // (B, L, 1)
  auto pre = add(mul(sdown, reshape(p.delta_up->value, {1, 1, d})),
                 reshape(p.delta_bias->value, {1, 1, d}));
  out.delta = softplus_t(pre);
  out.b_in = linear(x, p.b_proj->value);
  out.c_out = linear(x, p.c_proj->value);
  return out;
}

template <class T>
Tensor<T> ssm_layer(const Tensor<T>& x, const SsmParams<T>& p, ScanEvaluator ev) {
  auto sel = selective_params(x, p);
  auto a_diag = neg(exp_t(p.log_a->value));
  auto disc = discretize(a_diag, sel.b_in, sel.delta);
  return scan_run(disc.a_bar, disc.b_bar, sel.c_out, p.d_skip->value, x, ev);
}

}  // namespace uwm
