#include <stdexcept>

#include "families.hpp"

namespace ndbench::detail {

namespace {

template <typename T>
void add_attention(ModelParams<T>& p, const std::string& name, std::size_t E, std::mt19937_64& rng) {
  for (const char* m : {"Wq", "Wk", "Wv"}) {
    auto w = p.add(name + "." + m, {E, E});
    xavier_uniform(w, E, E, rng);
  }
  add_linear(p, name + ".out", E, E, rng);
}

template <typename T>
void add_ffn(ModelParams<T>& p, const std::string& name, std::size_t E, std::size_t F, std::mt19937_64& rng) {
  add_linear(p, name + ".fc1", E, F, rng);
  add_linear(p, name + ".fc2", F, E, rng);
}

template <typename T>
Tensor<T> attention_block(const ModelParams<T>& p, const std::string& name, const Tensor<T>& q_src, const Tensor<T>& kv_src,
                          std::size_t heads, bool causal) {
  const auto q = matmul(q_src, p.get(name + ".Wq"));
  const auto k = matmul(kv_src, p.get(name + ".Wk"));
  const auto v = matmul(kv_src, p.get(name + ".Wv"));
  return apply_linear(p, name + ".out", multihead_attention(q, k, v, heads, causal));
}

template <typename T>
Tensor<T> ffn_block(const ModelParams<T>& p, const std::string& name, const Tensor<T>& x) {
  return apply_linear(p, name + ".fc2", relu(apply_linear(p, name + ".fc1", x)));
}

}  // namespace

template <typename T>
void build_transformer(ModelParams<T>& p, const ModelConfig& cfg, std::mt19937_64& rng) {
  const std::size_t E = cfg.embed, F = cfg.ffn_hidden();
  auto pos = p.add("pos.E", {cfg.max_timesteps, E});
  uniform_fill(pos, T(-0.1), T(0.1), rng);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    add_layer_norm(p, pname("enc", l, "ln1"), E);
    add_attention(p, pname("enc", l, "attn"), E, rng);
    add_layer_norm(p, pname("enc", l, "ln2"), E);
    add_ffn(p, pname("enc", l, "ffn"), E, F, rng);
  }
  add_layer_norm(p, std::string("enc.ln"), E);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    add_layer_norm(p, pname("dec", l, "ln1"), E);
    add_attention(p, pname("dec", l, "self"), E, rng);
    add_layer_norm(p, pname("dec", l, "ln2"), E);
    add_attention(p, pname("dec", l, "cross"), E, rng);
    add_layer_norm(p, pname("dec", l, "ln3"), E);
    add_ffn(p, pname("dec", l, "ffn"), E, F, rng);
  }
}

// Pre-norm encoder-decoder; both stacks read the same embedded input.
template <typename T>
Tensor<T> forward_transformer(const ModelParams<T>& p, const ModelConfig& cfg, const Tensor<T>& a, bool training, std::mt19937_64* rng) {
  const std::size_t S = a.dim(1);
  if (S > cfg.max_timesteps)
    throw std::invalid_argument("window of " + std::to_string(S) + " timesteps exceeds the positional table (" +
                                std::to_string(cfg.max_timesteps) + ")");
  if (training && cfg.dropout_rate > 0.0 && rng == nullptr) throw std::invalid_argument("training forward needs an rng for dropout");
  const T rate = static_cast<T>(cfg.dropout_rate);
  auto drop = [&](const Tensor<T>& t) { return training && rate > T(0) ? dropout(t, rate, *rng, true) : t; };

  const auto input = drop(add(a, slice(p.get("pos.E"), 0, 0, S)));
  auto h = input;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    auto n = apply_layer_norm(p, pname("enc", l, "ln1"), h);
    h = add(h, drop(attention_block(p, pname("enc", l, "attn"), n, n, cfg.heads, false)));
    n = apply_layer_norm(p, pname("enc", l, "ln2"), h);
    h = add(h, drop(ffn_block(p, pname("enc", l, "ffn"), n)));
  }
  const auto memory = apply_layer_norm(p, std::string("enc.ln"), h);

  auto d = input;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    auto n = apply_layer_norm(p, pname("dec", l, "ln1"), d);
    d = add(d, drop(attention_block(p, pname("dec", l, "self"), n, n, cfg.heads, true)));
    n = apply_layer_norm(p, pname("dec", l, "ln2"), d);
    d = add(d, drop(attention_block(p, pname("dec", l, "cross"), n, memory, cfg.heads, false)));
    n = apply_layer_norm(p, pname("dec", l, "ln3"), d);
    d = add(d, drop(ffn_block(p, pname("dec", l, "ffn"), n)));
  }
  return d;
}

template void build_transformer<float>(ModelParams<float>&, const ModelConfig&, std::mt19937_64&);
template void build_transformer<double>(ModelParams<double>&, const ModelConfig&, std::mt19937_64&);
template Tensor<float> forward_transformer<float>(const ModelParams<float>&, const ModelConfig&, const Tensor<float>&, bool,
                                                  std::mt19937_64*);
template Tensor<double> forward_transformer<double>(const ModelParams<double>&, const ModelConfig&, const Tensor<double>&, bool,
                                                    std::mt19937_64*);

}  // namespace ndbench::detail
