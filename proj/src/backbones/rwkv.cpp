#include "families.hpp"

namespace ndbench::detail {

template <typename T>
void build_rwkv(ModelParams<T>& p, const ModelConfig& cfg, std::mt19937_64& rng) {
  const std::size_t E = cfg.embed, F = cfg.ffn_hidden(), L = cfg.layers;
  for (std::size_t l = 0; l < L; ++l) {
    const double ratio_0_to_1 = L > 1 ? static_cast<double>(l) / static_cast<double>(L - 1) : 0.0;
    const double ratio_1_to_0 = 1.0 - static_cast<double>(l) / static_cast<double>(L);
    auto pos = [&](std::size_t h) { return static_cast<double>(h) / static_cast<double>(E); };

    add_layer_norm(p, pname("rwkv", l, "ln1"), E);
    auto mu_k = p.add(pname("rwkv", l, "att.mu_k"), {E});
    auto mu_v = p.add(pname("rwkv", l, "att.mu_v"), {E});
    auto mu_r = p.add(pname("rwkv", l, "att.mu_r"), {E});
    for (std::size_t h = 0; h < E; ++h) {
      mu_k.mutable_data()[h] = static_cast<T>(std::pow(pos(h), ratio_1_to_0));
      mu_v.mutable_data()[h] = static_cast<T>(std::pow(pos(h), ratio_1_to_0) + 0.3 * ratio_0_to_1);
      mu_r.mutable_data()[h] = static_cast<T>(std::pow(pos(h), 0.5 * ratio_1_to_0));
    }
    for (const char* m : {"att.W_k", "att.W_v", "att.W_r", "att.W_o"}) {
      auto w = p.add(pname("rwkv", l, m), {E, E});
      xavier_uniform(w, E, E, rng);
    }
    // w = exp(decay), spread from slow to fast across channels
    auto decay = p.add(pname("rwkv", l, "att.decay"), {E});
    auto bonus = p.add(pname("rwkv", l, "att.bonus"), {E});
    for (std::size_t h = 0; h < E; ++h) {
      const double x = E > 1 ? static_cast<double>(h) / static_cast<double>(E - 1) : 0.0;
      decay.mutable_data()[h] = static_cast<T>(-5.0 + 8.0 * std::pow(x, 0.7 + 1.3 * ratio_0_to_1));
      bonus.mutable_data()[h] = static_cast<T>(std::log(0.3) + 0.5 * (static_cast<double>((h + 1) % 3) - 1.0));
    }

    add_layer_norm(p, pname("rwkv", l, "ln2"), E);
    auto fk = p.add(pname("rwkv", l, "ffn.mu_k"), {E});
    auto fr = p.add(pname("rwkv", l, "ffn.mu_r"), {E});
    for (std::size_t h = 0; h < E; ++h) {
      fk.mutable_data()[h] = static_cast<T>(std::pow(pos(h), ratio_1_to_0));
      fr.mutable_data()[h] = static_cast<T>(std::pow(pos(h), ratio_1_to_0));
    }
    auto wk = p.add(pname("rwkv", l, "ffn.W_k"), {E, F});
    xavier_uniform(wk, E, F, rng);
    auto wv = p.add(pname("rwkv", l, "ffn.W_v"), {F, E});
    xavier_uniform(wv, F, E, rng);
    auto wr = p.add(pname("rwkv", l, "ffn.W_r"), {E, E});
    xavier_uniform(wr, E, E, rng);
  }
}

template <typename T>
Tensor<T> forward_rwkv(const ModelParams<T>& p, const ModelConfig& cfg, const Tensor<T>& x) {
  auto h = x;
  // mu * cur + (1 - mu) * prev
  auto mix = [](const Tensor<T>& cur, const Tensor<T>& prev, const Tensor<T>& mu) { return add(prev, mul(sub(cur, prev), mu)); };
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    auto get = [&](const std::string& leaf) { return p.get(pname("rwkv", l, leaf)); };

    auto n = apply_layer_norm(p, pname("rwkv", l, "ln1"), h);
    auto prev = time_shift(n);
    const auto k = matmul(mix(n, prev, get("att.mu_k")), get("att.W_k"));
    const auto v = matmul(mix(n, prev, get("att.mu_v")), get("att.W_v"));
    const auto r = sigmoid(matmul(mix(n, prev, get("att.mu_r")), get("att.W_r")));
    const auto wkv = wkv_scan(k, v, exp(get("att.decay")), get("att.bonus"));
    h = add(h, matmul(mul(r, wkv), get("att.W_o")));

    n = apply_layer_norm(p, pname("rwkv", l, "ln2"), h);
    prev = time_shift(n);
    const auto kk = square(relu(matmul(mix(n, prev, get("ffn.mu_k")), get("ffn.W_k"))));
    const auto rr = sigmoid(matmul(mix(n, prev, get("ffn.mu_r")), get("ffn.W_r")));
    h = add(h, mul(rr, matmul(kk, get("ffn.W_v"))));
  }
  return h;
}

template void build_rwkv<float>(ModelParams<float>&, const ModelConfig&, std::mt19937_64&);
template void build_rwkv<double>(ModelParams<double>&, const ModelConfig&, std::mt19937_64&);
template Tensor<float> forward_rwkv<float>(const ModelParams<float>&, const ModelConfig&, const Tensor<float>&);
template Tensor<double> forward_rwkv<double>(const ModelParams<double>&, const ModelConfig&, const Tensor<double>&);

}  // namespace ndbench::detail
