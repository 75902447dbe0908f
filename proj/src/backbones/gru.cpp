#include "families.hpp"

namespace ndbench::detail {

namespace {

std::size_t gru_input_width(const ModelConfig& cfg, std::size_t layer) {
  if (layer > 0 || cfg.gru_input_projection) return cfg.embed;
  return cfg.input_channels;
}

}  // namespace

template <typename T>
void build_gru(ModelParams<T>& p, const ModelConfig& cfg, std::mt19937_64& rng) {
  const std::size_t H = cfg.embed;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::size_t in = gru_input_width(cfg, l);
    for (const char* gate : {"z", "r", "h"}) {
      auto w = p.add(pname("gru", l, std::string("W_") + gate), {in, H});
      xavier_uniform(w, in, H, rng);
      auto u = p.add(pname("gru", l, std::string("U_") + gate), {H, H});
      xavier_uniform(u, H, H, rng);
      p.add(pname("gru", l, std::string("b_") + gate), {H});
      p.add(pname("gru", l, std::string("c_") + gate), {H});
    }
  }
}

// h_t = (1 - z_t) h_{t-1} + z_t tanh(W x_t + b_h + U (r_t * h_{t-1}) + c_h)
template <typename T>
Tensor<T> forward_gru(const ModelParams<T>& p, const ModelConfig& cfg, const Tensor<T>& x) {
  const std::size_t B = x.dim(0), S = x.dim(1), H = cfg.embed;
  Tensor<T> seq = x;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    auto get = [&](const std::string& leaf) { return p.get(pname("gru", l, leaf)); };
    const auto xz = linear(seq, get("W_z"), get("b_z"));
    const auto xr = linear(seq, get("W_r"), get("b_r"));
    const auto xh = linear(seq, get("W_h"), get("b_h"));
    const auto U_z = get("U_z"), U_r = get("U_r"), U_h = get("U_h");
    const auto c_z = get("c_z"), c_r = get("c_r"), c_h = get("c_h");
    auto step_of = [&](const Tensor<T>& g, std::size_t t) { return reshape(slice(g, 1, t, t + 1), {B, H}); };

    auto h = Tensor<T>::zeros({B, H});
    std::vector<Tensor<T>> outs;
    outs.reserve(S);
    for (std::size_t t = 0; t < S; ++t) {
      const auto z = sigmoid(add(step_of(xz, t), add(matmul(h, U_z), c_z)));
      const auto r = sigmoid(add(step_of(xr, t), add(matmul(h, U_r), c_r)));
      const auto cand = tanh(add(step_of(xh, t), add(matmul(mul(r, h), U_h), c_h)));
      h = add(h, mul(z, sub(cand, h)));
      outs.push_back(reshape(h, {B, 1, H}));
    }
    seq = concat(outs, 1);
  }
  return seq;
}

template void build_gru<float>(ModelParams<float>&, const ModelConfig&, std::mt19937_64&);
template void build_gru<double>(ModelParams<double>&, const ModelConfig&, std::mt19937_64&);
template Tensor<float> forward_gru<float>(const ModelParams<float>&, const ModelConfig&, const Tensor<float>&);
template Tensor<double> forward_gru<double>(const ModelParams<double>&, const ModelConfig&, const Tensor<double>&);

}  // namespace ndbench::detail
