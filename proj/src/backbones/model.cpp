#include <algorithm>
#include <cctype>
#include <cmath>

#include "families.hpp"

namespace ndbench {

std::string kind_name(ModelKind kind) {
  switch (kind) {
    case ModelKind::GRU: return "GRU";
    case ModelKind::Transformer: return "Transformer";
    case ModelKind::RWKV: return "RWKV";
    case ModelKind::Mamba: return "Mamba";
  }
  return "?";
}

ModelKind parse_kind(const std::string& name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  for (auto k : kAllKinds) {
    std::string n = kind_name(k);
    std::transform(n.begin(), n.end(), n.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (n == lower) return k;
  }
  throw ConfigError("unknown model kind '" + name + "' (expected GRU, Transformer, RWKV or Mamba)");
}

ModelConfig ModelConfig::defaults(ModelKind kind, std::size_t input_channels) {
  ModelConfig c;
  c.kind = kind;
  c.input_channels = input_channels;
  switch (kind) {
    case ModelKind::GRU:
      c.layers = 1;
      c.embed = 256;
      break;
    case ModelKind::Transformer:
      c.layers = 3;
      c.embed = 128;
      c.heads = 2;
      c.ffn_ratio = 1.0;
      break;
    case ModelKind::RWKV:
      c.layers = 2;
      c.embed = 88;
      c.ffn_ratio = 6.5;
      break;
    case ModelKind::Mamba:
      c.layers = 2;
      c.embed = 144;
      c.d_state = 8;
      c.conv_width = 4;
      c.expand = 2;
      break;
  }
  return c;
}

void ModelConfig::validate() const {
  auto fail = [&](const std::string& m) { throw ConfigError(kind_name(kind) + " config: " + m); };
  if (input_channels == 0) fail("input_channels must be >= 1");
  if (layers == 0) fail("layers must be >= 1");
  if (embed == 0) fail("embed must be >= 1");
  if (max_timesteps == 0) fail("max_timesteps must be >= 1");
  if (kind == ModelKind::Transformer) {
    if (heads == 0 || embed % heads != 0)
      fail("embed " + std::to_string(embed) + " is not divisible by heads " + std::to_string(heads));
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail("dropout_rate must be in [0, 1)");
  }
  if ((kind == ModelKind::Transformer || kind == ModelKind::RWKV) && !(ffn_ratio > 0.0 && ffn_hidden() >= 1))
    fail("ffn_ratio must give a feed-forward width >= 1");
  if (kind == ModelKind::Mamba && (d_state == 0 || conv_width == 0 || expand == 0)) fail("d_state, conv_width and expand must be >= 1");
}

std::size_t ModelConfig::ffn_hidden() const {
  return static_cast<std::size_t>(std::llround(ffn_ratio * static_cast<double>(embed)));
}

std::size_t ModelConfig::dt_rank() const { return (embed + 15) / 16; }

nlohmann::json ModelConfig::to_json() const {
  return {{"kind", kind_name(kind)},     {"input_channels", input_channels},
          {"layers", layers},            {"embed", embed},
          {"heads", heads},              {"ffn_ratio", ffn_ratio},
          {"d_state", d_state},          {"conv_width", conv_width},
          {"expand", expand},            {"dropout_rate", dropout_rate},
          {"max_timesteps", max_timesteps}, {"gru_input_projection", gru_input_projection}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c = defaults(parse_kind(j.at("kind").get<std::string>()), j.value("input_channels", std::size_t{96}));
  try {
    c.layers = j.value("layers", c.layers);
    c.embed = j.value("embed", c.embed);
    c.heads = j.value("heads", c.heads);
    c.ffn_ratio = j.value("ffn_ratio", c.ffn_ratio);
    c.d_state = j.value("d_state", c.d_state);
    c.conv_width = j.value("conv_width", c.conv_width);
    c.expand = j.value("expand", c.expand);
    c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
    c.max_timesteps = j.value("max_timesteps", c.max_timesteps);
    c.gru_input_projection = j.value("gru_input_projection", c.gru_input_projection);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

std::size_t param_count(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t C = cfg.input_channels, E = cfg.embed, L = cfg.layers;
  const std::size_t ln = 2 * E;
  const std::size_t projection = C * E + E;
  const std::size_t head = 2 * E + 2;
  switch (cfg.kind) {
    case ModelKind::GRU: {
      std::size_t n = cfg.gru_input_projection ? projection : 0;
      for (std::size_t l = 0; l < L; ++l) {
        const std::size_t in = (l == 0 && !cfg.gru_input_projection) ? C : E;
        n += 3 * (in * E + E * E + 2 * E);
      }
      return n + head;
    }
    case ModelKind::Transformer: {
      const std::size_t F = cfg.ffn_hidden();
      const std::size_t attn = 4 * E * E + E;
      const std::size_t ffn = E * F + F + F * E + E;
      const std::size_t enc = 2 * ln + attn + ffn;
      const std::size_t dec = 3 * ln + 2 * attn + ffn;
      return projection + cfg.max_timesteps * E + L * (enc + dec) + ln + ln + head;
    }
    case ModelKind::RWKV: {
      const std::size_t F = cfg.ffn_hidden();
      const std::size_t att = 3 * E + 4 * E * E + 2 * E;
      const std::size_t ffn = 2 * E + E * F + F * E + E * E;
      return projection + L * (2 * ln + att + ffn) + ln + head;
    }
    case ModelKind::Mamba: {
      const std::size_t Di = cfg.expand * E, N = cfg.d_state, R = cfg.dt_rank(), K = cfg.conv_width;
      const std::size_t layer = ln + E * 2 * Di + Di * K + Di + Di * (R + 2 * N) + R * Di + Di + Di * N + Di + Di * E;
      return projection + L * layer + ln + head;
    }
  }
  return 0;
}

template <typename T>
Model<T>::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const bool projected = cfg_.kind != ModelKind::GRU || cfg_.gru_input_projection;
  if (projected) detail::add_linear(params_, "input", cfg_.input_channels, cfg_.embed, rng);
  switch (cfg_.kind) {
    case ModelKind::GRU: detail::build_gru(params_, cfg_, rng); break;
    case ModelKind::Transformer: detail::build_transformer(params_, cfg_, rng); break;
    case ModelKind::RWKV: detail::build_rwkv(params_, cfg_, rng); break;
    case ModelKind::Mamba: detail::build_mamba(params_, cfg_, rng); break;
  }
  if (cfg_.kind != ModelKind::GRU) detail::add_layer_norm(params_, std::string("head.ln"), cfg_.embed);
  detail::add_linear(params_, "head", cfg_.embed, 2, rng);
}

template <typename T>
Tensor<T> Model<T>::forward(const Tensor<T>& input, bool training, std::mt19937_64* rng) const {
  const bool unbatched = input.rank() == 2;
  if (!unbatched && input.rank() != 3) throw ShapeError("model input must be [S, C] or [B, S, C], got " + shape_str(input.shape()));
  if (input.dim(-1) != cfg_.input_channels)
    throw ShapeError("model expects " + std::to_string(cfg_.input_channels) + " input channels, got " + shape_str(input.shape()));
  const auto x = unbatched ? reshape(input, {1, input.dim(0), input.dim(1)}) : input;

  Tensor<T> h;
  const bool projected = cfg_.kind != ModelKind::GRU || cfg_.gru_input_projection;
  const auto a = projected ? detail::apply_linear(params_, std::string("input"), x) : x;
  switch (cfg_.kind) {
    case ModelKind::GRU: h = detail::forward_gru(params_, cfg_, a); break;
    case ModelKind::Transformer: h = detail::forward_transformer(params_, cfg_, a, training, rng); break;
    case ModelKind::RWKV: h = detail::forward_rwkv(params_, cfg_, a); break;
    case ModelKind::Mamba: h = detail::forward_mamba(params_, cfg_, a); break;
  }
  if (cfg_.kind != ModelKind::GRU) h = detail::apply_layer_norm(params_, std::string("head.ln"), h);
  auto y = detail::apply_linear(params_, std::string("head"), h);

  const std::size_t S = y.dim(1);
  const auto out = y.data();
  std::size_t first_bad = S;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (!std::isfinite(out[i])) first_bad = std::min(first_bad, (i / 2) % S);
  if (first_bad < S)
    throw NonFiniteError(kind_name(cfg_.kind) + " forward produced a non-finite output at timestep " + std::to_string(first_bad),
                         first_bad);
  return unbatched ? reshape(y, {S, 2}) : y;
}

template class Model<float>;
template class Model<double>;

}  // namespace ndbench
