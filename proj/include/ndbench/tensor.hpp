#pragma once

// Dense tensors with a reverse-mode tape.
//
// A Tensor is a shared handle onto row-major storage. Every primitive that
// consumes a tensor with requires_grad records a backward closure on the
// calling thread's Tape; Tape::backward walks those closures in reverse
// creation order, which is a valid topological order by construction.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ndbench {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& primitive, const Shape& a, const Shape& b);
  explicit ShapeError(const std::string& message) : std::invalid_argument(message) {}
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::int64_t node = -1;
  std::uint64_t generation = 0;

  std::span<T> ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl<T>> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false);
  static Tensor scalar(T value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  // Negative indices count from the back.
  std::size_t dim(int axis) const;
  std::size_t size() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  // Writable view; only for leaves between forward passes (optimizer, init).
  std::span<T> mutable_data() { return impl_->data; }
  std::span<const T> grad() const { return impl_->grad; }
  bool has_grad() const { return !impl_->grad.empty(); }
  void zero_grad() { impl_->grad.clear(); }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool flag) { impl_->requires_grad = flag; }
  std::int64_t node() const { return impl_->node; }

  T item() const;
  T at(std::initializer_list<std::size_t> index) const;
  Tensor detach() const;

  TensorImpl<T>* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl<T>>& shared() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

// Per-thread recording of backward closures.
template <typename T>
class Tape {
 public:
  static Tape& current();

  std::int64_t record(std::shared_ptr<TensorImpl<T>> out, std::function<void()> backward);
  void backward(const Tensor<T>& root);
  void clear();
  std::size_t size() const { return entries_.size(); }
  std::uint64_t generation() const { return generation_; }

 private:
  struct Entry {
    std::shared_ptr<TensorImpl<T>> out;
    std::function<void()> backward;
  };
  std::vector<Entry> entries_;
  std::uint64_t generation_ = 1;
};

template <typename T>
void backward(const Tensor<T>& root) {
  Tape<T>::current().backward(root);
}

// Disables recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Builds the result of a custom primitive. `backward` receives the output
// gradient and is only invoked when the result was recorded.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data,
                      std::initializer_list<Tensor<T>> inputs,
                      std::function<void(std::span<const T> grad_out)> backward);

// ---------------------------------------------------------------------------
// Primitives. Binary elementwise ops accept b with the same shape as a, or
// with a shape equal to a trailing suffix of a's shape (broadcast over the
// leading dimensions of a).

template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& w);
template <typename T> Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false);
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b);
// scale * a + shift
template <typename T> Tensor<T> affine(const Tensor<T>& a, T scale, T shift);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);
template <typename T> Tensor<T> tanh(const Tensor<T>& a);
template <typename T> Tensor<T> exp(const Tensor<T>& a);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> square(const Tensor<T>& a);
template <typename T> Tensor<T> softplus(const Tensor<T>& a);
template <typename T> Tensor<T> silu(const Tensor<T>& a);
// Softmax over the last axis. With `causal`, the last two axes must be square
// and entries above the diagonal are excluded (output 0).
template <typename T> Tensor<T> softmax(const Tensor<T>& a, bool causal = false);
template <typename T> Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5));
template <typename T> Tensor<T> dropout(const Tensor<T>& x, T rate, std::mt19937_64& rng, bool training);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);
template <typename T> Tensor<T> slice(const Tensor<T>& x, int axis, std::size_t begin, std::size_t end);
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
// Swaps the last two axes.
template <typename T> Tensor<T> transpose(const Tensor<T>& x);
template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);

// Shifts a [.., S, E] sequence one step later along axis -2; row 0 becomes zero.
template <typename T> Tensor<T> time_shift(const Tensor<T>& x);

}  // namespace ndbench
