#include "ndbench/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>

namespace ndbench {

namespace {

constexpr char kMagic[8] = {'N', 'D', 'B', 'E', 'N', 'C', 'H', '1'};

void put_u64(std::vector<char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

void put_f32(std::vector<char>& out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

float get_f32(const char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<float>(bits);
}

}  // namespace

const ArrayGroup& Container::group(const std::string& name) const {
  for (const auto& g : groups)
    if (g.name == name) return g;
  throw CheckpointError("checkpoint has no group '" + name + "'");
}

std::vector<char> encode_container(const Container& c) {
  nlohmann::json header;
  header["format"] = kCheckpointFormat;
  header["meta"] = c.meta;
  header["groups"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& g : c.groups) {
    if (shape_size(g.shape) != g.values.size()) throw CheckpointError("group '" + g.name + "' shape does not match its values");
    header["groups"].push_back({{"name", g.name}, {"shape", g.shape}, {"offset", offset}, {"count", g.values.size()}});
    offset += 4 * g.values.size();
  }
  const std::string text = header.dump();
  std::vector<char> out(std::begin(kMagic), std::end(kMagic));
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + offset);
  for (const auto& g : c.groups)
    for (float v : g.values) put_f32(out, v);
  return out;
}

Container decode_container(const std::vector<char>& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0) throw CheckpointError("not an ndbench checkpoint (bad magic)");
  const std::uint64_t hlen = get_u64(bytes.data() + 8);
  if (16 + hlen > bytes.size()) throw CheckpointError("truncated checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint header: ") + e.what());
  }
  if (header.value("format", "") != kCheckpointFormat)
    throw CheckpointError("unsupported checkpoint format '" + header.value("format", "") + "'");
  const std::size_t base = 16 + hlen;
  Container c;
  c.meta = header.value("meta", nlohmann::json::object());
  for (const auto& g : header.at("groups")) {
    ArrayGroup ag;
    ag.name = g.at("name").get<std::string>();
    ag.shape = g.at("shape").get<Shape>();
    const auto off = g.at("offset").get<std::uint64_t>();
    const auto count = g.at("count").get<std::uint64_t>();
    if (shape_size(ag.shape) != count) throw CheckpointError("group '" + ag.name + "' count does not match shape");
    if (base + off + 4 * count > bytes.size()) throw CheckpointError("group '" + ag.name + "' runs past end of file");
    ag.values.resize(count);
    for (std::size_t i = 0; i < count; ++i) ag.values[i] = get_f32(bytes.data() + base + off + 4 * i);
    c.groups.push_back(std::move(ag));
  }
  return c;
}

void write_container(const std::filesystem::path& path, const Container& c) {
  const auto bytes = encode_container(c);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot open '" + path.string() + "' for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw CheckpointError("failed writing '" + path.string() + "'");
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_container(bytes);
}

template <typename T>
std::vector<ArrayGroup> export_groups(const ModelParams<T>& params) {
  std::vector<ArrayGroup> out;
  for (const auto& p : params) {
    ArrayGroup g{p.name, p.tensor.shape(), {}};
    g.values.reserve(p.tensor.size());
    for (T v : p.tensor.data()) g.values.push_back(static_cast<float>(v));
    out.push_back(std::move(g));
  }
  return out;
}

template <typename T>
void import_groups(ModelParams<T>& params, const std::vector<ArrayGroup>& groups) {
  if (groups.size() != params.groups())
    throw CheckpointError("checkpoint has " + std::to_string(groups.size()) + " groups, model expects " +
                          std::to_string(params.groups()));
  std::size_t i = 0;
  for (auto& p : params) {
    const auto& g = groups[i++];
    if (g.name != p.name || g.shape != p.tensor.shape())
      throw CheckpointError("checkpoint group '" + g.name + "' " + shape_str(g.shape) + " does not match model group '" + p.name +
                            "' " + shape_str(p.tensor.shape()));
    auto dst = p.tensor.mutable_data();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(g.values[k]);
  }
}

template std::vector<ArrayGroup> export_groups<float>(const ModelParams<float>&);
template std::vector<ArrayGroup> export_groups<double>(const ModelParams<double>&);
template void import_groups<float>(ModelParams<float>&, const std::vector<ArrayGroup>&);
template void import_groups<double>(ModelParams<double>&, const std::vector<ArrayGroup>&);

}  // namespace ndbench
