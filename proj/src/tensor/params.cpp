#include "ndbench/params.hpp"

#include <cmath>
#include <stdexcept>

namespace ndbench {

template <typename T>
Tensor<T> ModelParams<T>::add(std::string name, Shape shape) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter group '" + name + "'");
  auto t = Tensor<T>::zeros(std::move(shape), true);
  items_.push_back({std::move(name), t});
  return t;
}

template <typename T>
Tensor<T> ModelParams<T>::get(std::string_view name) const {
  for (const auto& p : items_)
    if (p.name == name) return p.tensor;
  throw std::out_of_range("no parameter group '" + std::string(name) + "'");
}

template <typename T>
bool ModelParams<T>::contains(std::string_view name) const {
  for (const auto& p : items_)
    if (p.name == name) return true;
  return false;
}

template <typename T>
std::size_t ModelParams<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : items_) n += p.tensor.size();
  return n;
}

template <typename T>
void ModelParams<T>::zero_grad() {
  for (auto& p : items_) p.tensor.zero_grad();
}

template <typename T>
void xavier_uniform(Tensor<T>& t, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  uniform_fill(t, static_cast<T>(-a), static_cast<T>(a), rng);
}

template <typename T>
void uniform_fill(Tensor<T>& t, T lo, T hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
  for (auto& v : t.mutable_data()) v = static_cast<T>(dist(rng));
}

template <typename T>
void constant_fill(Tensor<T>& t, T value) {
  for (auto& v : t.mutable_data()) v = value;
}

template class ModelParams<float>;
template class ModelParams<double>;
template void xavier_uniform<float>(Tensor<float>&, std::size_t, std::size_t, std::mt19937_64&);
template void xavier_uniform<double>(Tensor<double>&, std::size_t, std::size_t, std::mt19937_64&);
template void uniform_fill<float>(Tensor<float>&, float, float, std::mt19937_64&);
template void uniform_fill<double>(Tensor<double>&, double, double, std::mt19937_64&);
template void constant_fill<float>(Tensor<float>&, float);
template void constant_fill<double>(Tensor<double>&, double);

}  // namespace ndbench
