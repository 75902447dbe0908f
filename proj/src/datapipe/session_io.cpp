#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ndbench/datapipe.hpp"

namespace ndbench {

namespace fs = std::filesystem;
using Kind = DataError::Kind;

namespace {

// Shortest representation that parses back to the same double.
void put_double(std::string& out, double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, res.ptr);
}

double parse_double(std::string_view s, const std::string& where) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw DataError(Kind::Parse, where + ": cannot parse number '" + std::string(s) + "'");
  return v;
}

std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string read_file(const fs::path& p) {
  if (!fs::exists(p)) throw DataError(Kind::MissingFile, "missing file '" + p.string() + "'");
  std::ifstream is(p, std::ios::binary);
  if (!is) throw DataError(Kind::Io, "cannot open '" + p.string() + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError(Kind::Io, "cannot open '" + p.string() + "' for writing");
  os << text;
  if (!os) throw DataError(Kind::Io, "failed writing '" + p.string() + "'");
}

template <typename Fn>
void for_each_line(const std::string& text, Fn&& fn) {
  std::size_t start = 0, lineno = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    std::string_view line(text.data() + start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    ++lineno;
    if (!line.empty()) fn(line, lineno);
    start = end + 1;
  }
}

const char* kKinHeader = "t_s,finger_x,finger_y,cursor_x,cursor_y,target_x,target_y";

}  // namespace

void save_session(const RawSession& raw, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError(Kind::Io, "cannot create '" + dir.string() + "': " + ec.message());

  nlohmann::ordered_json m;
  m["format"] = kSessionFormat;
  m["session_id"] = raw.session_id;
  m["date_index"] = raw.date_index;
  m["num_channels"] = raw.num_channels();
  m["duration_s"] = raw.duration_s;
  m["kin_rate_hz"] = static_cast<int>(kKinematicRateHz);
  write_file(dir / "manifest.json", m.dump(2) + "\n");

  std::string spikes = "channel,time_s\n";
  for (std::size_t c = 0; c < raw.spike_events.size(); ++c)
    for (double t : raw.spike_events[c]) {
      spikes += std::to_string(c);
      spikes += ',';
      put_double(spikes, t);
      spikes += '\n';
    }
  write_file(dir / "spikes.csv", spikes);

  const auto& k = raw.kinematics;
  std::string kin = std::string(kKinHeader) + "\n";
  for (std::size_t i = 0; i < k.size(); ++i) {
    for (const auto* col : {&k.t_s, &k.finger_x, &k.finger_y, &k.cursor_x, &k.cursor_y, &k.target_x, &k.target_y}) {
      if (col != &k.t_s) kin += ',';
      put_double(kin, (*col)[i]);
    }
    kin += '\n';
  }
  write_file(dir / "kinematics.csv", kin);
}

RawSession load_session(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError(Kind::MissingFile, "session bundle '" + dir.string() + "' is not a directory");
  RawSession raw;
  std::size_t channels = 0;
  {
    const auto text = read_file(dir / "manifest.json");
    try {
      const auto m = nlohmann::json::parse(text);
      if (m.value("format", "") != kSessionFormat)
        throw DataError(Kind::Manifest, "manifest format '" + m.value("format", "") + "' is not " + kSessionFormat);
      raw.session_id = m.at("session_id").get<std::string>();
      raw.date_index = m.at("date_index").get<int>();
      channels = m.at("num_channels").get<std::size_t>();
      raw.duration_s = m.at("duration_s").get<double>();
      if (m.contains("kin_rate_hz") && m.at("kin_rate_hz").get<double>() != kKinematicRateHz)
        throw DataError(Kind::Manifest, "kin_rate_hz must be 250");
    } catch (const nlohmann::json::exception& e) {
      throw DataError(Kind::Manifest, "malformed manifest '" + (dir / "manifest.json").string() + "': " + e.what());
    }
  }
  raw.spike_events.assign(channels, {});
  {
    const auto path = dir / "spikes.csv";
    const auto text = read_file(path);
    bool header = true;
    for_each_line(text, [&](std::string_view line, std::size_t lineno) {
      const std::string where = path.filename().string() + ":" + std::to_string(lineno);
      if (header) {
        if (line != "channel,time_s") throw DataError(Kind::Parse, where + ": expected header 'channel,time_s'");
        header = false;
        return;
      }
      const auto f = split_csv(line);
      if (f.size() != 2) throw DataError(Kind::Parse, where + ": expected 2 fields");
      std::size_t c = 0;
      const auto res = std::from_chars(f[0].data(), f[0].data() + f[0].size(), c);
      if (res.ec != std::errc{} || res.ptr != f[0].data() + f[0].size())
        throw DataError(Kind::Parse, where + ": bad channel '" + std::string(f[0]) + "'");
      if (c >= channels)
        throw DataError(Kind::ChannelMismatch, where + ": channel " + std::to_string(c) + " but manifest declares " +
                                                   std::to_string(channels) + " channels");
      const double t = parse_double(f[1], where);
      auto& ev = raw.spike_events[c];
      if (!ev.empty() && !(t > ev.back()))
        throw DataError(Kind::SpikeOrder, where + ": channel " + std::to_string(c) + " times not strictly ascending");
      ev.push_back(t);
    });
    if (header) throw DataError(Kind::Parse, path.string() + ": empty file");
  }
  {
    const auto path = dir / "kinematics.csv";
    const auto text = read_file(path);
    auto& k = raw.kinematics;
    std::vector<double>* cols[] = {&k.t_s, &k.finger_x, &k.finger_y, &k.cursor_x, &k.cursor_y, &k.target_x, &k.target_y};
    bool header = true;
    for_each_line(text, [&](std::string_view line, std::size_t lineno) {
      const std::string where = path.filename().string() + ":" + std::to_string(lineno);
      if (header) {
        if (line != kKinHeader) throw DataError(Kind::Parse, where + ": expected header '" + std::string(kKinHeader) + "'");
        header = false;
        return;
      }
      const auto f = split_csv(line);
      if (f.size() != 7) throw DataError(Kind::Parse, where + ": expected 7 fields");
      for (std::size_t i = 0; i < 7; ++i) cols[i]->push_back(parse_double(f[i], where));
    });
    if (header) throw DataError(Kind::Parse, path.string() + ": empty file");
  }
  validate(raw);
  return raw;
}

}  // namespace ndbench
