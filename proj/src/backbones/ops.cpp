#include "ndbench/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace ndbench {

namespace {

// Exponent of an empty accumulator.
template <typename T>
constexpr T kNegInf = T(-1e38);

void require(bool ok, const std::string& op, const Shape& a, const Shape& b) {
  if (!ok) throw ShapeError(op, a, b);
}

}  // namespace

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// wkv

template <typename T>
Tensor<T> wkv_scan(const Tensor<T>& k, const Tensor<T>& v, const Tensor<T>& w, const Tensor<T>& u) {
  require(k.rank() >= 2 && k.shape() == v.shape(), "wkv_scan", k.shape(), v.shape());
  const std::size_t S = k.dim(-2), E = k.dim(-1);
  require(w.shape() == Shape{E} && u.shape() == Shape{E}, "wkv_scan", w.shape(), u.shape());
  const std::size_t batch = k.size() / (S * E);

  std::vector<T> out(k.size());
  {
    const T* pk = k.data().data();
    const T* pv = v.data().data();
    const T* pw = w.data().data();
    const T* pu = u.data().data();
    std::vector<T> p(E), q(E), o(E);
    for (std::size_t b = 0; b < batch; ++b) {
      std::fill(p.begin(), p.end(), T(0));
      std::fill(q.begin(), q.end(), T(0));
      std::fill(o.begin(), o.end(), kNegInf<T>);
      for (std::size_t t = 0; t < S; ++t) {
        const std::size_t row = (b * S + t) * E;
        for (std::size_t e = 0; e < E; ++e) {
          const T kk = pk[row + e], vv = pv[row + e];
          const T uk = pu[e] + kk;
          const T no = std::max(o[e], uk);
          const T A = std::exp(o[e] - no), B = std::exp(uk - no);
          out[row + e] = (A * p[e] + B * vv) / (A * q[e] + B);
          const T ow = o[e] - pw[e];
          const T no2 = std::max(ow, kk);
          const T A2 = std::exp(ow - no2), B2 = std::exp(kk - no2);
          p[e] = A2 * p[e] + B2 * vv;
          q[e] = A2 * q[e] + B2;
          o[e] = no2;
        }
      }
    }
  }

  auto ki = k.shared(), vi = v.shared(), wi = w.shared(), ui = u.shared();
  return make_result<T>(k.shape(), std::move(out), {k, v, w, u}, [ki, vi, wi, ui, batch, S, E](std::span<const T> g) {
    const T* pk = ki->data.data();
    const T* pv = vi->data.data();
    const T* pw = wi->data.data();
    const T* pu = ui->data.data();
    T* gk = ki->requires_grad ? ki->ensure_grad().data() : nullptr;
    T* gv = vi->requires_grad ? vi->ensure_grad().data() : nullptr;
    T* gw = wi->requires_grad ? wi->ensure_grad().data() : nullptr;
    T* gu = ui->requires_grad ? ui->ensure_grad().data() : nullptr;

    // Per-step quantities of one batch row, recomputed from the inputs.
    std::vector<T> P(S * E), Q(S * E), A(S * E), B(S * E), inv(S * E), A2(S * E), B2(S * E), Y(S * E);
    std::vector<T> p(E), q(E), o(E), alpha(E), beta(E);
    for (std::size_t b = 0; b < batch; ++b) {
      std::fill(p.begin(), p.end(), T(0));
      std::fill(q.begin(), q.end(), T(0));
      std::fill(o.begin(), o.end(), kNegInf<T>);
      for (std::size_t t = 0; t < S; ++t) {
        const std::size_t row = (b * S + t) * E;
        for (std::size_t e = 0; e < E; ++e) {
          const std::size_t i = t * E + e;
          const T kk = pk[row + e], vv = pv[row + e];
          const T uk = pu[e] + kk;
          const T no = std::max(o[e], uk);
          A[i] = std::exp(o[e] - no);
          B[i] = std::exp(uk - no);
          inv[i] = T(1) / (A[i] * q[e] + B[i]);
          Y[i] = (A[i] * p[e] + B[i] * vv) * inv[i];
          P[i] = p[e];
          Q[i] = q[e];
          const T ow = o[e] - pw[e];
          const T no2 = std::max(ow, kk);
          A2[i] = std::exp(ow - no2);
          B2[i] = std::exp(kk - no2);
          p[e] = A2[i] * p[e] + B2[i] * vv;
          q[e] = A2[i] * q[e] + B2[i];
          o[e] = no2;
        }
      }
      // alpha/beta: adjoints of the accumulator after step t, scaled by e^{o_t}.
      std::fill(alpha.begin(), alpha.end(), T(0));
      std::fill(beta.begin(), beta.end(), T(0));
      for (std::size_t t = S; t-- > 0;) {
        const std::size_t row = (b * S + t) * E;
        for (std::size_t e = 0; e < E; ++e) {
          const std::size_t i = t * E + e;
          if (t + 1 < S) {
            const std::size_t n = i + E;
            const T gn = g[row + E + e] * A[n] * inv[n];
            alpha[e] = gn + A2[n] * alpha[e];
            beta[e] = -gn * Y[n] + A2[n] * beta[e];
          }
          const T vv = pv[row + e];
          const T gt = g[row + e] * B[i] * inv[i];
          const T dE = gt * (vv - Y[i]);
          if (gv) gv[row + e] += gt + alpha[e] * B2[i];
          if (gk) gk[row + e] += dE + B2[i] * (alpha[e] * vv + beta[e]);
          if (gu) gu[e] += dE;
          if (gw) gw[e] -= A2[i] * (alpha[e] * P[i] + beta[e] * Q[i]);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Selective scan

template <typename T>
Tensor<T> selective_scan(const Tensor<T>& u, const Tensor<T>& delta, const Tensor<T>& A, const Tensor<T>& B,
                         const Tensor<T>& C) {
  require(u.rank() >= 2 && u.shape() == delta.shape(), "selective_scan", u.shape(), delta.shape());
  const std::size_t S = u.dim(-2), D = u.dim(-1);
  require(A.rank() == 2 && A.dim(0) == D, "selective_scan", u.shape(), A.shape());
  const std::size_t N = A.dim(1);
  const std::size_t batch = u.size() / (S * D);
  require(B.rank() == u.rank() && B.dim(-1) == N && B.size() == batch * S * N, "selective_scan", u.shape(), B.shape());
  require(C.shape() == B.shape(), "selective_scan", B.shape(), C.shape());

  std::vector<T> out(u.size(), T(0));
  {
    const T* pu = u.data().data();
    const T* pd = delta.data().data();
    const T* pa = A.data().data();
    const T* pb = B.data().data();
    const T* pc = C.data().data();
    std::vector<T> s(D * N);
    for (std::size_t b = 0; b < batch; ++b) {
      std::fill(s.begin(), s.end(), T(0));
      for (std::size_t t = 0; t < S; ++t) {
        const std::size_t xr = (b * S + t) * D, nr = (b * S + t) * N;
        for (std::size_t d = 0; d < D; ++d) {
          const T dt = pd[xr + d], du = dt * pu[xr + d];
          T acc = 0;
          T* sd = s.data() + d * N;
          for (std::size_t n = 0; n < N; ++n) {
            sd[n] = std::exp(dt * pa[d * N + n]) * sd[n] + du * pb[nr + n];
            acc += pc[nr + n] * sd[n];
          }
          out[xr + d] = acc;
        }
      }
    }
  }

  auto ui = u.shared(), di = delta.shared(), ai = A.shared(), bi = B.shared(), ci = C.shared();
  return make_result<T>(u.shape(), std::move(out), {u, delta, A, B, C}, [ui, di, ai, bi, ci, batch, S, D, N](std::span<const T> g) {
    const T* pu = ui->data.data();
    const T* pd = di->data.data();
    const T* pa = ai->data.data();
    const T* pb = bi->data.data();
    const T* pc = ci->data.data();
    T* gu = ui->requires_grad ? ui->ensure_grad().data() : nullptr;
    T* gd = di->requires_grad ? di->ensure_grad().data() : nullptr;
    T* ga = ai->requires_grad ? ai->ensure_grad().data() : nullptr;
    T* gb = bi->requires_grad ? bi->ensure_grad().data() : nullptr;
    T* gc = ci->requires_grad ? ci->ensure_grad().data() : nullptr;

    // states[t] holds s_t for t = 0..S-1; s_{-1} = 0.
    std::vector<T> states(S * D * N), abar(S * D * N), lambda(D * N);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t t = 0; t < S; ++t) {
        const std::size_t xr = (b * S + t) * D, nr = (b * S + t) * N;
        T* st = states.data() + t * D * N;
        const T* sp = t > 0 ? st - D * N : nullptr;
        T* ab = abar.data() + t * D * N;
        for (std::size_t d = 0; d < D; ++d) {
          const T dt = pd[xr + d], du = dt * pu[xr + d];
          for (std::size_t n = 0; n < N; ++n) {
            const std::size_t j = d * N + n;
            ab[j] = std::exp(dt * pa[j]);
            st[j] = (sp ? ab[j] * sp[j] : T(0)) + du * pb[nr + n];
          }
        }
      }
      std::fill(lambda.begin(), lambda.end(), T(0));
      for (std::size_t t = S; t-- > 0;) {
        const std::size_t xr = (b * S + t) * D, nr = (b * S + t) * N;
        const T* st = states.data() + t * D * N;
        const T* sp = t > 0 ? st - D * N : nullptr;
        const T* ab = abar.data() + t * D * N;
        const T* abn = t + 1 < S ? ab + D * N : nullptr;
        for (std::size_t d = 0; d < D; ++d) {
          const T gy = g[xr + d];
          const T dt = pd[xr + d], uu = pu[xr + d];
          T ddelta = 0, duu = 0;
          for (std::size_t n = 0; n < N; ++n) {
            const std::size_t j = d * N + n;
            T lam = gy * pc[nr + n] + (abn ? abn[j] * lambda[j] : T(0));
            lambda[j] = lam;
            if (gc) gc[nr + n] += gy * st[j];
            const T prev = sp ? sp[j] : T(0);
            const T da = lam * ab[j] * prev;  // d/d(delta*A)
            ddelta += da * pa[j] + lam * pb[nr + n] * uu;
            if (ga) ga[j] += da * dt;
            if (gb) gb[nr + n] += lam * dt * uu;
            duu += lam * dt * pb[nr + n];
          }
          if (gd) gd[xr + d] += ddelta;
          if (gu) gu[xr + d] += duu;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Causal depthwise convolution

template <typename T>
Tensor<T> causal_conv1d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require(x.rank() >= 2, "causal_conv1d", x.shape(), weight.shape());
  const std::size_t S = x.dim(-2), D = x.dim(-1);
  require(weight.rank() == 2 && weight.dim(0) == D, "causal_conv1d", x.shape(), weight.shape());
  require(bias.shape() == Shape{D}, "causal_conv1d", x.shape(), bias.shape());
  const std::size_t K = weight.dim(1);
  const std::size_t batch = x.size() / (S * D);
  std::vector<T> out(x.size());
  const T* px = x.data().data();
  const T* pw = weight.data().data();
  const T* pb = bias.data().data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < S; ++t)
      for (std::size_t d = 0; d < D; ++d) {
        T acc = pb[d];
        for (std::size_t j = 0; j < K; ++j) {
          const std::size_t back = K - 1 - j;
          if (back <= t) acc += pw[d * K + j] * px[(b * S + t - back) * D + d];
        }
        out[(b * S + t) * D + d] = acc;
      }
  auto xi = x.shared(), wi = weight.shared(), bi = bias.shared();
  return make_result<T>(x.shape(), std::move(out), {x, weight, bias}, [xi, wi, bi, batch, S, D, K](std::span<const T> g) {
    const T* px = xi->data.data();
    const T* pw = wi->data.data();
    T* gx = xi->requires_grad ? xi->ensure_grad().data() : nullptr;
    T* gw = wi->requires_grad ? wi->ensure_grad().data() : nullptr;
    T* gb = bi->requires_grad ? bi->ensure_grad().data() : nullptr;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < S; ++t)
        for (std::size_t d = 0; d < D; ++d) {
          const T gy = g[(b * S + t) * D + d];
          if (gb) gb[d] += gy;
          for (std::size_t j = 0; j < K; ++j) {
            const std::size_t back = K - 1 - j;
            if (back > t) continue;
            const std::size_t xi_ = (b * S + t - back) * D + d;
            if (gw) gw[d * K + j] += gy * px[xi_];
            if (gx) gx[xi_] += gy * pw[d * K + j];
          }
        }
  });
}

// ---------------------------------------------------------------------------
// Attention

template <typename T>
Tensor<T> multihead_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads, bool causal) {
  require(q.rank() == 3 && k.rank() == 3 && k.shape() == v.shape() && q.dim(0) == k.dim(0) && q.dim(2) == k.dim(2),
          "multihead_attention", q.shape(), k.shape());
  const std::size_t E = q.dim(-1);
  if (heads == 0 || E % heads != 0)
    throw ShapeError("multihead_attention: width " + std::to_string(E) + " not divisible by " + std::to_string(heads) + " heads");
  const std::size_t dh = E / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<Tensor<T>> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const auto qh = slice(q, -1, h * dh, (h + 1) * dh);
    const auto kh = slice(k, -1, h * dh, (h + 1) * dh);
    const auto vh = slice(v, -1, h * dh, (h + 1) * dh);
    const auto p = softmax(affine(batched_matmul(qh, kh, true), scale, T(0)), causal);
    outs.push_back(batched_matmul(p, vh));
  }
  return heads == 1 ? outs.front() : concat(outs, -1);
}

// ---------------------------------------------------------------------------
// Plain scans

std::vector<double> ssm_scan_sequential(std::span<const double> a, std::span<const double> b, std::span<const double> c,
                                        std::size_t d) {
  if (d == 0 || a.size() % d != 0 || b.size() != a.size() || c.size() != a.size())
    throw ShapeError("ssm_scan: operands must all be S x " + std::to_string(d));
  const std::size_t S = a.size() / d;
  std::vector<double> s(d, 0.0), y(S, 0.0);
  for (std::size_t t = 0; t < S; ++t)
    for (std::size_t j = 0; j < d; ++j) {
      s[j] = a[t * d + j] * s[j] + b[t * d + j];
      y[t] += c[t * d + j] * s[j];
    }
  return y;
}

std::vector<double> ssm_scan_blocked(std::span<const double> a, std::span<const double> b, std::span<const double> c,
                                     std::size_t d, std::size_t block) {
  if (d == 0 || a.size() % d != 0 || b.size() != a.size() || c.size() != a.size())
    throw ShapeError("ssm_scan: operands must all be S x " + std::to_string(d));
  block = std::max<std::size_t>(block, 1);
  const std::size_t S = a.size() / d;
  const std::size_t nblocks = (S + block - 1) / block;
  // Reduce each block to one (a, b) pair, then prefix-combine the blocks.
  std::vector<double> ba(nblocks * d, 1.0), bb(nblocks * d, 0.0);
  for (std::size_t k = 0; k < nblocks; ++k)
    for (std::size_t t = k * block; t < std::min(S, (k + 1) * block); ++t)
      for (std::size_t j = 0; j < d; ++j) {
        const double a2 = a[t * d + j];
        ba[k * d + j] *= a2;
        bb[k * d + j] = a2 * bb[k * d + j] + b[t * d + j];
      }
  std::vector<double> carry(nblocks * d, 0.0);  // state entering block k
  for (std::size_t k = 1; k < nblocks; ++k)
    for (std::size_t j = 0; j < d; ++j) carry[k * d + j] = ba[(k - 1) * d + j] * carry[(k - 1) * d + j] + bb[(k - 1) * d + j];
  std::vector<double> y(S, 0.0);
  for (std::size_t k = 0; k < nblocks; ++k) {
    std::vector<double> s(carry.begin() + static_cast<std::ptrdiff_t>(k * d), carry.begin() + static_cast<std::ptrdiff_t>((k + 1) * d));
    for (std::size_t t = k * block; t < std::min(S, (k + 1) * block); ++t)
      for (std::size_t j = 0; j < d; ++j) {
        s[j] = a[t * d + j] * s[j] + b[t * d + j];
        y[t] += c[t * d + j] * s[j];
      }
  }
  return y;
}

#define NDBENCH_INSTANTIATE_OPS(T)                                                                                   \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> wkv_scan<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> selective_scan<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,       \
                                       const Tensor<T>&);                                                            \
  template Tensor<T> causal_conv1d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> multihead_attention<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, bool);

NDBENCH_INSTANTIATE_OPS(float)
NDBENCH_INSTANTIATE_OPS(double)

}  // namespace ndbench
