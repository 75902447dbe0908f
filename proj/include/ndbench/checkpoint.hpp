#pragma once

// Single-file parameter container:
//
//   bytes 0..7   ASCII magic "NDBENCH1"
//   bytes 8..15  header length N, little-endian uint64
//   N bytes      JSON header {"format":"ndbench-ckpt-v1", "meta":{...},
//                 "groups":[{"name","shape","offset","count"}...]}
//   payload      little-endian float32 values; offsets are bytes from the
//                start of the payload

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ndbench/params.hpp"

namespace ndbench {

inline constexpr const char* kCheckpointFormat = "ndbench-ckpt-v1";

struct ArrayGroup {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Container {
  nlohmann::json meta;
  std::vector<ArrayGroup> groups;

  const ArrayGroup& group(const std::string& name) const;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<char> encode_container(const Container& c);
Container decode_container(const std::vector<char>& bytes);

void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

template <typename T>
std::vector<ArrayGroup> export_groups(const ModelParams<T>& params);
// Group names, order and shapes must match.
template <typename T>
void import_groups(ModelParams<T>& params, const std::vector<ArrayGroup>& groups);

}  // namespace ndbench
