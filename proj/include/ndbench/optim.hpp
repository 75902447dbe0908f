#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ndbench/params.hpp"

namespace ndbench {

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
struct AdamState {
  AdamOptions options;
  std::int64_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;

  static AdamState init(const ModelParams<T>& params, AdamOptions options = {});
};

class MissingGradError : public std::runtime_error {
 public:
  explicit MissingGradError(const std::string& group)
      : std::runtime_error("adam_step: parameter group '" + group + "' has no gradient"), group_(group) {}
  const std::string& group() const { return group_; }

 private:
  std::string group_;
};

// Bias-corrected Adam update in place; clears gradients afterwards.
template <typename T>
void adam_step(ModelParams<T>& params, AdamState<T>& state);

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_group;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Compares backward() against central differences of `loss` for every scalar
// of every group: max |a - n| / max(floor, |a| + |n|).
GradCheckResult finite_diff_check(const std::function<Tensor<double>()>& loss, ModelParams<double>& params,
                                  double step = 1e-5, double floor = 1e-12);

}  // namespace ndbench
