#include "ndbench/optim.hpp"

#include <cmath>

namespace ndbench {

template <typename T>
AdamState<T> AdamState<T>::init(const ModelParams<T>& params, AdamOptions options) {
  AdamState s;
  s.options = options;
  for (const auto& p : params) {
    s.m.emplace_back(p.tensor.size(), T(0));
    s.v.emplace_back(p.tensor.size(), T(0));
  }
  return s;
}

template <typename T>
void adam_step(ModelParams<T>& params, AdamState<T>& state) {
  if (state.m.size() != params.groups()) throw std::invalid_argument("adam_step: optimizer state does not match parameters");
  for (const auto& p : params)
    if (!p.tensor.has_grad()) throw MissingGradError(p.name);

  const auto& o = state.options;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const T c1 = static_cast<T>(1.0 / (1.0 - std::pow(o.beta1, t)));
  const T c2 = static_cast<T>(1.0 / (1.0 - std::pow(o.beta2, t)));
  const T b1 = static_cast<T>(o.beta1), b2 = static_cast<T>(o.beta2);
  const T lr = static_cast<T>(o.learning_rate), eps = static_cast<T>(o.epsilon);

  std::size_t gi = 0;
  for (auto& p : params) {
    auto w = p.tensor.mutable_data();
    auto g = p.tensor.grad();
    auto& m = state.m[gi];
    auto& v = state.v[gi];
    if (m.size() != w.size()) throw std::invalid_argument("adam_step: moment buffer shape differs for '" + p.name + "'");
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (T(1) - b1) * g[i];
      v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
      const T mh = m[i] * c1;
      const T vh = v[i] * c2;
      w[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
    p.tensor.zero_grad();
    ++gi;
  }
}

template struct AdamState<float>;
template struct AdamState<double>;
template void adam_step<float>(ModelParams<float>&, AdamState<float>&);
template void adam_step<double>(ModelParams<double>&, AdamState<double>&);

GradCheckResult finite_diff_check(const std::function<Tensor<double>()>& loss, ModelParams<double>& params, double step, double floor) {
  params.zero_grad();
  auto root = loss();
  if (!std::isfinite(root.item())) throw std::domain_error("finite_diff_check: loss is not finite");
  backward(root);

  std::vector<std::vector<double>> analytic;
  for (const auto& p : params) {
    if (p.tensor.has_grad())
      analytic.emplace_back(p.tensor.grad().begin(), p.tensor.grad().end());
    else
      analytic.emplace_back(p.tensor.size(), 0.0);
  }
  params.zero_grad();

  auto eval = [&]() {
    NoGradGuard guard;
    const double v = loss().item();
    if (!std::isfinite(v)) throw std::domain_error("finite_diff_check: perturbed loss is not finite");
    return v;
  };

  GradCheckResult res;
  std::size_t gi = 0;
  for (auto& p : params) {
    auto w = p.tensor.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double orig = w[i];
      w[i] = orig + step;
      const double fp = eval();
      w[i] = orig - step;
      const double fm = eval();
      w[i] = orig;
      const double num = (fp - fm) / (2.0 * step);
      const double ana = analytic[gi][i];
      const double rel = std::abs(ana - num) / std::max(floor, std::abs(ana) + std::abs(num));
      if (rel > res.max_relative_error || res.worst_group.empty()) {
        res = {rel, p.name, i, ana, num};
      }
    }
    ++gi;
  }
  return res;
}

}  // namespace ndbench
