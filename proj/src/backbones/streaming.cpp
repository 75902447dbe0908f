#include <algorithm>
#include <cmath>
#include <type_traits>

#include "families.hpp"

namespace ndbench {

namespace {

template <typename T>
std::vector<T> values(const ModelParams<T>& p, const std::string& name) {
  const auto d = p.get(name).data();
  return {d.begin(), d.end()};
}

// y = x W (+ b), W stored [in, out]
template <typename T>
void affine_vec(const std::vector<T>& x, const std::vector<T>& w, const std::type_identity_t<std::vector<T>>* b, std::vector<T>& y) {
  const std::size_t in = x.size(), out = w.size() / in;
  y.assign(out, T(0));
  if (b) y = *b;
  for (std::size_t i = 0; i < in; ++i) {
    const T xi = x[i];
    const T* row = w.data() + i * out;
    for (std::size_t j = 0; j < out; ++j) y[j] += xi * row[j];
  }
}

template <typename T>
std::vector<T> layer_norm_vec(const std::vector<T>& x, const std::vector<T>& g, const std::vector<T>& b) {
  const std::size_t n = x.size();
  T mean = 0, var = 0;
  for (T v : x) mean += v;
  mean /= static_cast<T>(n);
  for (T v : x) var += (v - mean) * (v - mean);
  var /= static_cast<T>(n);
  const T inv = T(1) / std::sqrt(var + T(1e-5));
  std::vector<T> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = (x[i] - mean) * inv * g[i] + b[i];
  return y;
}

template <typename T>
T sigm(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
T softplus_s(T x) {
  return x > T(20) ? x : std::log1p(std::exp(x));
}

}  // namespace

template <typename T>
struct StreamingDecoder<T>::Impl {
  const ModelConfig cfg;
  const ModelParams<T>& p;

  struct GruLayer {
    std::vector<T> Wz, Uz, bz, cz, Wr, Ur, br, cr, Wh, Uh, bh, ch;
    std::vector<T> h;
  };
  struct RwkvLayer {
    std::vector<T> ln1g, ln1b, mk, mv, mr, Wk, Wv, Wr, Wo, w, u;
    std::vector<T> ln2g, ln2b, fmk, fmr, fWk, fWv, fWr;
    std::vector<T> prev_att, prev_ffn, num, den, mx;
  };
  struct MambaLayer {
    std::vector<T> lng, lnb, in_proj, conv_w, conv_b, x_proj, dt_w, dt_b, A, D, out_proj;
    std::vector<T> conv_cache;  // (K - 1) x Di, oldest first
    std::vector<T> state;       // Di x N
  };

  std::vector<GruLayer> gru;
  std::vector<RwkvLayer> rwkv;
  std::vector<MambaLayer> mamba;
  std::vector<T> in_w, in_b, head_lng, head_lnb, head_w, head_b;

  Impl(const Model<T>& model) : cfg(model.config()), p(model.params()) {
    using detail::pname;
    const bool projected = cfg.kind != ModelKind::GRU || cfg.gru_input_projection;
    if (projected) {
      in_w = values(p, "input.W");
      in_b = values(p, "input.b");
    }
    if (cfg.kind != ModelKind::GRU) {
      head_lng = values(p, "head.ln.g");
      head_lnb = values(p, "head.ln.b");
    }
    head_w = values(p, "head.W");
    head_b = values(p, "head.b");
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      auto v = [&](const std::string& prefix, const std::string& leaf) { return values(p, pname(prefix, l, leaf)); };
      switch (cfg.kind) {
        case ModelKind::GRU:
          gru.push_back({v("gru", "W_z"), v("gru", "U_z"), v("gru", "b_z"), v("gru", "c_z"), v("gru", "W_r"), v("gru", "U_r"),
                         v("gru", "b_r"), v("gru", "c_r"), v("gru", "W_h"), v("gru", "U_h"), v("gru", "b_h"), v("gru", "c_h"), {}});
          break;
        case ModelKind::RWKV: {
          RwkvLayer r{v("rwkv", "ln1.g"), v("rwkv", "ln1.b"), v("rwkv", "att.mu_k"), v("rwkv", "att.mu_v"), v("rwkv", "att.mu_r"),
                      v("rwkv", "att.W_k"), v("rwkv", "att.W_v"), v("rwkv", "att.W_r"), v("rwkv", "att.W_o"), v("rwkv", "att.decay"),
                      v("rwkv", "att.bonus"), v("rwkv", "ln2.g"), v("rwkv", "ln2.b"), v("rwkv", "ffn.mu_k"), v("rwkv", "ffn.mu_r"),
                      v("rwkv", "ffn.W_k"), v("rwkv", "ffn.W_v"), v("rwkv", "ffn.W_r"), {}, {}, {}, {}, {}};
          for (auto& w : r.w) w = std::exp(w);
          rwkv.push_back(std::move(r));
          break;
        }
        case ModelKind::Mamba: {
          MambaLayer m{v("mamba", "ln.g"), v("mamba", "ln.b"), v("mamba", "in_proj.W"), v("mamba", "conv.W"), v("mamba", "conv.b"),
                       v("mamba", "x_proj.W"), v("mamba", "dt_proj.W"), v("mamba", "dt_proj.b"), v("mamba", "A_log"), v("mamba", "D"),
                       v("mamba", "out_proj.W"), {}, {}};
          for (auto& a : m.A) a = -std::exp(a);
          mamba.push_back(std::move(m));
          break;
        }
        case ModelKind::Transformer: break;
      }
    }
    reset();
  }

  void reset() {
    const std::size_t E = cfg.embed;
    for (auto& g : gru) g.h.assign(E, T(0));
    for (auto& r : rwkv) {
      r.prev_att.assign(E, T(0));
      r.prev_ffn.assign(E, T(0));
      r.num.assign(E, T(0));
      r.den.assign(E, T(0));
      r.mx.assign(E, T(-1e38));
    }
    const std::size_t Di = cfg.expand * E;
    for (auto& m : mamba) {
      m.conv_cache.assign((cfg.conv_width - 1) * Di, T(0));
      m.state.assign(Di * cfg.d_state, T(0));
    }
  }

  std::vector<T> gru_step(GruLayer& g, const std::vector<T>& x) {
    const std::size_t H = cfg.embed;
    std::vector<T> az, ar, ah, hz, hr, hh;
    affine_vec(x, g.Wz, &g.bz, az);
    affine_vec(x, g.Wr, &g.br, ar);
    affine_vec(x, g.Wh, &g.bh, ah);
    affine_vec(g.h, g.Uz, &g.cz, hz);
    affine_vec(g.h, g.Ur, &g.cr, hr);
    std::vector<T> r(H), rh(H);
    for (std::size_t j = 0; j < H; ++j) {
      r[j] = sigm(ar[j] + hr[j]);
      rh[j] = r[j] * g.h[j];
    }
    affine_vec(rh, g.Uh, &g.ch, hh);
    for (std::size_t j = 0; j < H; ++j) {
      const T z = sigm(az[j] + hz[j]);
      const T cand = std::tanh(ah[j] + hh[j]);
      g.h[j] = (T(1) - z) * g.h[j] + z * cand;
    }
    return g.h;
  }

  std::vector<T> rwkv_step(RwkvLayer& r, const std::vector<T>& x) {
    const std::size_t E = cfg.embed;
    std::vector<T> h = x;
    auto n = layer_norm_vec(h, r.ln1g, r.ln1b);
    std::vector<T> xk(E), xv(E), xr(E);
    for (std::size_t j = 0; j < E; ++j) {
      xk[j] = n[j] * r.mk[j] + r.prev_att[j] * (T(1) - r.mk[j]);
      xv[j] = n[j] * r.mv[j] + r.prev_att[j] * (T(1) - r.mv[j]);
      xr[j] = n[j] * r.mr[j] + r.prev_att[j] * (T(1) - r.mr[j]);
    }
    r.prev_att = n;
    std::vector<T> k, v, rr, o;
    affine_vec(xk, r.Wk, nullptr, k);
    affine_vec(xv, r.Wv, nullptr, v);
    affine_vec(xr, r.Wr, nullptr, rr);
    std::vector<T> gated(E);
    for (std::size_t j = 0; j < E; ++j) {
      // Output uses the accumulators before this token plus the bonus term.
      const T uk = r.u[j] + k[j];
      const T m = std::max(r.mx[j], uk);
      const T ea = std::exp(r.mx[j] - m), eb = std::exp(uk - m);
      const T wkv = (ea * r.num[j] + eb * v[j]) / (ea * r.den[j] + eb);
      gated[j] = sigm(rr[j]) * wkv;
      const T decayed = r.mx[j] - r.w[j];
      const T m2 = std::max(decayed, k[j]);
      const T fa = std::exp(decayed - m2), fb = std::exp(k[j] - m2);
      r.num[j] = fa * r.num[j] + fb * v[j];
      r.den[j] = fa * r.den[j] + fb;
      r.mx[j] = m2;
    }
    affine_vec(gated, r.Wo, nullptr, o);
    for (std::size_t j = 0; j < E; ++j) h[j] += o[j];

    n = layer_norm_vec(h, r.ln2g, r.ln2b);
    std::vector<T> fk(E), fr(E);
    for (std::size_t j = 0; j < E; ++j) {
      fk[j] = n[j] * r.fmk[j] + r.prev_ffn[j] * (T(1) - r.fmk[j]);
      fr[j] = n[j] * r.fmr[j] + r.prev_ffn[j] * (T(1) - r.fmr[j]);
    }
    r.prev_ffn = n;
    std::vector<T> kk, vv, rg;
    affine_vec(fk, r.fWk, nullptr, kk);
    for (auto& a : kk) a = a > T(0) ? a * a : T(0);
    affine_vec(kk, r.fWv, nullptr, vv);
    affine_vec(fr, r.fWr, nullptr, rg);
    for (std::size_t j = 0; j < E; ++j) h[j] += sigm(rg[j]) * vv[j];
    return h;
  }

  std::vector<T> mamba_step(MambaLayer& m, const std::vector<T>& x) {
    const std::size_t E = cfg.embed, Di = cfg.expand * E, N = cfg.d_state, R = cfg.dt_rank(), K = cfg.conv_width;
    const auto n = layer_norm_vec(x, m.lng, m.lnb);
    std::vector<T> xz;
    affine_vec(n, m.in_proj, nullptr, xz);
    std::vector<T> xc(Di);
    for (std::size_t d = 0; d < Di; ++d) {
      T acc = m.conv_b[d] + m.conv_w[d * K + K - 1] * xz[d];
      for (std::size_t j = 0; j + 1 < K; ++j) acc += m.conv_w[d * K + j] * m.conv_cache[j * Di + d];
      xc[d] = acc * sigm(acc);
    }
    if (K > 1) {
      std::copy(m.conv_cache.begin() + static_cast<std::ptrdiff_t>(Di), m.conv_cache.end(), m.conv_cache.begin());
      std::copy(xz.begin(), xz.begin() + static_cast<std::ptrdiff_t>(Di), m.conv_cache.end() - static_cast<std::ptrdiff_t>(Di));
    }
    std::vector<T> dbc;
    affine_vec(xc, m.x_proj, nullptr, dbc);
    std::vector<T> low(dbc.begin(), dbc.begin() + static_cast<std::ptrdiff_t>(R)), dt;
    affine_vec(low, m.dt_w, &m.dt_b, dt);
    std::vector<T> y(Di);
    for (std::size_t d = 0; d < Di; ++d) {
      const T delta = softplus_s(dt[d]);
      T acc = 0;
      for (std::size_t s = 0; s < N; ++s) {
        T& st = m.state[d * N + s];
        st = std::exp(delta * m.A[d * N + s]) * st + delta * dbc[R + s] * xc[d];
        acc += dbc[R + N + s] * st;
      }
      const T z = xz[Di + d];
      y[d] = (acc + m.D[d] * xc[d]) * z * sigm(z);
    }
    std::vector<T> out;
    affine_vec(y, m.out_proj, nullptr, out);
    std::vector<T> h = x;
    for (std::size_t j = 0; j < E; ++j) h[j] += out[j];
    return h;
  }

  std::array<T, 2> step(std::span<const T> x_t) {
    if (x_t.size() != cfg.input_channels)
      throw ShapeError("streaming step expects " + std::to_string(cfg.input_channels) + " channels, got " + std::to_string(x_t.size()));
    std::vector<T> h(x_t.begin(), x_t.end());
    if (!in_w.empty()) {
      std::vector<T> a;
      affine_vec(h, in_w, &in_b, a);
      h = std::move(a);
    }
    for (auto& g : gru) h = gru_step(g, h);
    for (auto& r : rwkv) h = rwkv_step(r, h);
    for (auto& m : mamba) h = mamba_step(m, h);
    if (!head_lng.empty()) h = layer_norm_vec(h, head_lng, head_lnb);
    std::vector<T> y;
    affine_vec(h, head_w, &head_b, y);
    return {y[0], y[1]};
  }
};

template <typename T>
StreamingDecoder<T>::StreamingDecoder(const Model<T>& model) {
  if (model.config().kind == ModelKind::Transformer)
    throw UnsupportedOperation("streaming inference is not supported for the Transformer (attention needs the full window)");
  impl_ = std::make_unique<Impl>(model);
}

template <typename T>
StreamingDecoder<T>::~StreamingDecoder() = default;
template <typename T>
StreamingDecoder<T>::StreamingDecoder(StreamingDecoder&&) noexcept = default;
template <typename T>
StreamingDecoder<T>& StreamingDecoder<T>::operator=(StreamingDecoder&&) noexcept = default;

template <typename T>
void StreamingDecoder<T>::reset() {
  impl_->reset();
}

template <typename T>
std::array<T, 2> StreamingDecoder<T>::step(std::span<const T> x_t) {
  return impl_->step(x_t);
}

template class StreamingDecoder<float>;
template class StreamingDecoder<double>;

}  // namespace ndbench
