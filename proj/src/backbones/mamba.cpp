#include "families.hpp"

namespace ndbench::detail {

template <typename T>
void build_mamba(ModelParams<T>& p, const ModelConfig& cfg, std::mt19937_64& rng) {
  const std::size_t E = cfg.embed, Di = cfg.expand * E, N = cfg.d_state, R = cfg.dt_rank(), K = cfg.conv_width;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    add_layer_norm(p, pname("mamba", l, "ln"), E);
    add_linear(p, pname("mamba", l, "in_proj"), E, 2 * Di, rng, false);
    auto cw = p.add(pname("mamba", l, "conv.W"), {Di, K});
    const T cb = T(1) / std::sqrt(static_cast<T>(K));
    uniform_fill(cw, -cb, cb, rng);
    p.add(pname("mamba", l, "conv.b"), {Di});
    add_linear(p, pname("mamba", l, "x_proj"), Di, R + 2 * N, rng, false);
    auto dw = p.add(pname("mamba", l, "dt_proj.W"), {R, Di});
    const T db = T(1) / std::sqrt(static_cast<T>(R));
    uniform_fill(dw, -db, db, rng);
    // softplus(bias) starts log-uniform in [1e-3, 0.1]
    auto dbias = p.add(pname("mamba", l, "dt_proj.b"), {Di});
    std::uniform_real_distribution<double> logdt(std::log(1e-3), std::log(0.1));
    for (auto& v : dbias.mutable_data()) {
      const double dt = std::exp(logdt(rng));
      v = static_cast<T>(dt + std::log(-std::expm1(-dt)));
    }
    auto alog = p.add(pname("mamba", l, "A_log"), {Di, N});
    for (std::size_t d = 0; d < Di; ++d)
      for (std::size_t n = 0; n < N; ++n) alog.mutable_data()[d * N + n] = static_cast<T>(std::log(static_cast<double>(n + 1)));
    auto dskip = p.add(pname("mamba", l, "D"), {Di});
    constant_fill(dskip, T(1));
    add_linear(p, pname("mamba", l, "out_proj"), Di, E, rng, false);
  }
}

template <typename T>
Tensor<T> forward_mamba(const ModelParams<T>& p, const ModelConfig& cfg, const Tensor<T>& x) {
  const std::size_t Di = cfg.expand * cfg.embed, N = cfg.d_state, R = cfg.dt_rank();
  auto h = x;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    auto get = [&](const std::string& leaf) { return p.get(pname("mamba", l, leaf)); };
    const auto n = apply_layer_norm(p, pname("mamba", l, "ln"), h);
    const auto xz = matmul(n, get("in_proj.W"));
    const auto xs = slice(xz, -1, 0, Di);
    const auto z = slice(xz, -1, Di, 2 * Di);
    const auto xc = silu(causal_conv1d(xs, get("conv.W"), get("conv.b")));
    const auto dbc = matmul(xc, get("x_proj.W"));
    const auto delta = softplus(linear(slice(dbc, -1, 0, R), get("dt_proj.W"), get("dt_proj.b")));
    const auto Bm = slice(dbc, -1, R, R + N);
    const auto Cm = slice(dbc, -1, R + N, R + 2 * N);
    const auto A = affine(exp(get("A_log")), T(-1), T(0));
    auto y = add(selective_scan(xc, delta, A, Bm, Cm), mul(xc, get("D")));
    y = mul(y, silu(z));
    h = add(h, matmul(y, get("out_proj.W")));
  }
  return h;
}

template void build_mamba<float>(ModelParams<float>&, const ModelConfig&, std::mt19937_64&);
template void build_mamba<double>(ModelParams<double>&, const ModelConfig&, std::mt19937_64&);
template Tensor<float> forward_mamba<float>(const ModelParams<float>&, const ModelConfig&, const Tensor<float>&);
template Tensor<double> forward_mamba<double>(const ModelParams<double>&, const ModelConfig&, const Tensor<double>&);

}  // namespace ndbench::detail
