#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "ndbench/tensor.hpp"

namespace ndbench {

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

// Ordered collection of trainable parameter groups. Insertion order is the
// serialization and optimizer order.
template <typename T>
class ModelParams {
 public:
  Tensor<T> add(std::string name, Shape shape);
  Tensor<T> get(std::string_view name) const;
  bool contains(std::string_view name) const;

  std::size_t groups() const { return items_.size(); }
  std::size_t scalar_count() const;
  void zero_grad();

  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }
  const NamedParam<T>& operator[](std::size_t i) const { return items_[i]; }

  // Copies values from `other`; group names and shapes must match exactly.
  template <typename U>
  void assign_from(const ModelParams<U>& other);

 private:
  std::vector<NamedParam<T>> items_;
};

// Glorot/Xavier uniform over [-a, a], a = sqrt(6 / (fan_in + fan_out)).
template <typename T>
void xavier_uniform(Tensor<T>& t, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng);
template <typename T>
void uniform_fill(Tensor<T>& t, T lo, T hi, std::mt19937_64& rng);
template <typename T>
void constant_fill(Tensor<T>& t, T value);

template <typename T>
template <typename U>
void ModelParams<T>::assign_from(const ModelParams<U>& other) {
  if (other.groups() != items_.size()) throw ShapeError("assign_from: parameter group count differs");
  for (std::size_t i = 0; i < items_.size(); ++i) {
    const auto& src = other[i];
    auto& dst = items_[i];
    if (src.name != dst.name || src.tensor.shape() != dst.tensor.shape())
      throw ShapeError("assign_from: group '" + dst.name + "' does not match '" + src.name + "'");
    auto out = dst.tensor.mutable_data();
    auto in = src.tensor.data();
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = static_cast<T>(in[k]);
  }
}

}  // namespace ndbench
