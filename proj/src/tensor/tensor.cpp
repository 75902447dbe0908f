#include "ndbench/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace ndbench {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

ShapeError::ShapeError(const std::string& primitive, const Shape& a, const Shape& b)
    : std::invalid_argument(primitive + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b)) {}

namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

std::size_t norm_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(a);
}

template <typename T>
bool any_requires_grad(std::initializer_list<Tensor<T>> inputs) {
  if (!g_grad_enabled) return false;
  for (const auto& t : inputs)
    if (t.requires_grad()) return true;
  return false;
}

// b must equal a, or be a trailing suffix of a.
bool broadcastable(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

template <typename T, typename Fwd, typename Da, typename Db>
Tensor<T> binary(const char* name, const Tensor<T>& a, const Tensor<T>& b, Fwd f, Da dfa, Db dfb) {
  if (!broadcastable(a.shape(), b.shape())) throw ShapeError(name, a.shape(), b.shape());
  const std::size_t n = a.size();
  const std::size_t nb = b.size();
  std::vector<T> out(n);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t i = 0; i < n; i += nb)
    for (std::size_t j = 0; j < nb; ++j) out[i + j] = f(pa[i + j], pb[j]);
  auto ai = a.shared();
  auto bi = b.shared();
  return make_result<T>(a.shape(), std::move(out), {a, b}, [ai, bi, n, nb, dfa, dfb](std::span<const T> g) {
    const T* pa = ai->data.data();
    const T* pb = bi->data.data();
    if (ai->requires_grad) {
      T* ga = ai->ensure_grad().data();
      for (std::size_t i = 0; i < n; i += nb)
        for (std::size_t j = 0; j < nb; ++j) ga[i + j] += g[i + j] * dfa(pa[i + j], pb[j]);
    }
    if (bi->requires_grad) {
      T* gb = bi->ensure_grad().data();
      for (std::size_t i = 0; i < n; i += nb)
        for (std::size_t j = 0; j < nb; ++j) gb[j] += g[i + j] * dfb(pa[i + j], pb[j]);
    }
  });
}

// Elementwise unary op whose derivative is expressed through (x, y).
template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const Tensor<T>& a, Fwd f, Deriv df) {
  const std::size_t n = a.size();
  std::vector<T> out(n);
  const T* pa = a.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(pa[i]);
  auto ai = a.shared();
  auto result = make_result<T>(a.shape(), std::move(out), {a}, nullptr);
  if (result.requires_grad()) {
    auto oi = result.shared();
    std::weak_ptr<TensorImpl<T>> weak_out = oi;
    // The closure reads the output values; the tape keeps the output alive.
    Tape<T>::current().record(oi, [ai, weak_out, n, df]() {
      auto o = weak_out.lock();
      const T* g = o->grad.data();
      const T* x = ai->data.data();
      const T* y = o->data.data();
      T* ga = ai->ensure_grad().data();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * df(x[i], y[i]);
    });
  }
  return result;
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---------------------------------------------------------------------------
// Tensor

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->data.assign(shape_size(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> data, bool requires_grad) {
  if (shape_size(shape) != data.size())
    throw ShapeError("tensor of shape " + shape_str(shape) + " cannot hold " + std::to_string(data.size()) + " elements");
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return from({}, {value});
}

template <typename T>
std::size_t Tensor<T>::dim(int axis) const {
  return impl_->shape[norm_axis(axis, impl_->shape.size())];
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  const auto& s = impl_->shape;
  if (index.size() != s.size()) throw ShapeError("at(): index rank does not match " + shape_str(s));
  std::size_t off = 0;
  std::size_t k = 0;
  for (std::size_t i : index) {
    if (i >= s[k]) throw ShapeError("at(): index out of range for " + shape_str(s));
    off = off * s[k++] + i;
  }
  return impl_->data[off];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from(shape(), impl_->data, false);
}

// ---------------------------------------------------------------------------
// Tape

template <typename T>
Tape<T>& Tape<T>::current() {
  thread_local Tape<T> tape;
  return tape;
}

template <typename T>
std::int64_t Tape<T>::record(std::shared_ptr<TensorImpl<T>> out, std::function<void()> fn) {
  const auto id = static_cast<std::int64_t>(entries_.size());
  out->node = id;
  out->generation = generation_;
  entries_.push_back({std::move(out), std::move(fn)});
  return id;
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& root) {
  if (!root.defined() || root.size() != 1)
    throw TapeError("backward: root must be a scalar, got shape " + (root.defined() ? shape_str(root.shape()) : "undefined"));
  auto* r = root.impl();
  if (r->node < 0 || r->generation != generation_ || static_cast<std::size_t>(r->node) >= entries_.size())
    throw TapeError("backward: root has no recorded graph (already consumed or produced without a forward pass)");
  r->ensure_grad()[0] += T(1);
  for (auto i = r->node; i >= 0; --i) {
    auto& e = entries_[static_cast<std::size_t>(i)];
    if (!e.out->grad.empty() && e.backward) e.backward();
  }
  clear();
}

template <typename T>
void Tape<T>::clear() {
  // Release in reverse so long chains unwind without deep recursion.
  while (!entries_.empty()) entries_.pop_back();
  ++generation_;
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::initializer_list<Tensor<T>> inputs,
                      std::function<void(std::span<const T>)> backward_fn) {
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  if (shape_size(impl->shape) != impl->data.size()) throw ShapeError("make_result: data size does not match " + shape_str(impl->shape));
  impl->requires_grad = any_requires_grad(inputs);
  if (impl->requires_grad && backward_fn) {
    std::weak_ptr<TensorImpl<T>> weak = impl;
    Tape<T>::current().record(impl, [weak, fn = std::move(backward_fn)]() {
      auto o = weak.lock();
      fn(std::span<const T>(o->grad));
    });
  }
  return Tensor<T>(std::move(impl));
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& w) {
  if (a.rank() < 1 || w.rank() != 2 || a.dim(-1) != w.dim(0)) throw ShapeError("matmul", a.shape(), w.shape());
  const auto k = static_cast<Eigen::Index>(w.dim(0));
  const auto n = static_cast<Eigen::Index>(w.dim(1));
  const auto m = static_cast<Eigen::Index>(a.size() / w.dim(0));
  Shape out_shape = a.shape();
  out_shape.back() = w.dim(1);
  std::vector<T> out(static_cast<std::size_t>(m * n));
  MapMat<T>(out.data(), m, n).noalias() = CMapMat<T>(a.data().data(), m, k) * CMapMat<T>(w.data().data(), k, n);
  auto ai = a.shared();
  auto wi = w.shared();
  return make_result<T>(std::move(out_shape), std::move(out), {a, w}, [ai, wi, m, k, n](std::span<const T> g) {
    CMapMat<T> G(g.data(), m, n);
    if (ai->requires_grad) MapMat<T>(ai->ensure_grad().data(), m, k).noalias() += G * CMapMat<T>(wi->data.data(), k, n).transpose();
    if (wi->requires_grad) MapMat<T>(wi->ensure_grad().data(), k, n).noalias() += CMapMat<T>(ai->data.data(), m, k).transpose() * G;
  });
}

template <typename T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  if (a.rank() < 2 || b.rank() != a.rank()) throw ShapeError("batched_matmul", a.shape(), b.shape());
  for (std::size_t i = 0; i + 2 < a.rank(); ++i)
    if (a.shape()[i] != b.shape()[i]) throw ShapeError("batched_matmul", a.shape(), b.shape());
  const auto m = static_cast<Eigen::Index>(a.dim(-2));
  const auto k = static_cast<Eigen::Index>(a.dim(-1));
  const auto bk = static_cast<Eigen::Index>(transpose_b ? b.dim(-1) : b.dim(-2));
  const auto n = static_cast<Eigen::Index>(transpose_b ? b.dim(-2) : b.dim(-1));
  if (bk != k) throw ShapeError("batched_matmul", a.shape(), b.shape());
  const std::size_t batch = a.size() / static_cast<std::size_t>(m * k);
  Shape out_shape = a.shape();
  out_shape.back() = static_cast<std::size_t>(n);
  std::vector<T> out(batch * static_cast<std::size_t>(m * n));
  const std::size_t sa = static_cast<std::size_t>(m * k), sb = static_cast<std::size_t>(k * n), so = static_cast<std::size_t>(m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    CMapMat<T> A(a.data().data() + i * sa, m, k);
    MapMat<T> O(out.data() + i * so, m, n);
    if (transpose_b)
      O.noalias() = A * CMapMat<T>(b.data().data() + i * sb, n, k).transpose();
    else
      O.noalias() = A * CMapMat<T>(b.data().data() + i * sb, k, n);
  }
  auto ai = a.shared();
  auto bi = b.shared();
  return make_result<T>(std::move(out_shape), std::move(out), {a, b},
                        [ai, bi, batch, m, k, n, sa, sb, so, transpose_b](std::span<const T> g) {
                          for (std::size_t i = 0; i < batch; ++i) {
                            CMapMat<T> G(g.data() + i * so, m, n);
                            CMapMat<T> A(ai->data.data() + i * sa, m, k);
                            if (ai->requires_grad) {
                              MapMat<T> GA(ai->ensure_grad().data() + i * sa, m, k);
                              if (transpose_b)
                                GA.noalias() += G * CMapMat<T>(bi->data.data() + i * sb, n, k);
                              else
                                GA.noalias() += G * CMapMat<T>(bi->data.data() + i * sb, k, n).transpose();
                            }
                            if (bi->requires_grad) {
                              if (transpose_b)
                                MapMat<T>(bi->ensure_grad().data() + i * sb, n, k).noalias() += G.transpose() * A;
                              else
                                MapMat<T>(bi->ensure_grad().data() + i * sb, k, n).noalias() += A.transpose() * G;
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>("add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>("sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>("mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <typename T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("maximum", a.shape(), b.shape());
  return binary<T>(
      "maximum", a, b, [](T x, T y) { return x >= y ? x : y; }, [](T x, T y) { return x >= y ? T(1) : T(0); },
      [](T x, T y) { return x >= y ? T(0) : T(1); });
}

template <typename T>
Tensor<T> affine(const Tensor<T>& a, T scale, T shift) {
  return unary<T>(a, [scale, shift](T x) { return scale * x + shift; }, [scale](T, T) { return scale; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary<T>(a, [](T x) { return T(1) / (T(1) + std::exp(-x)); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
  return unary<T>(a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary<T>(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary<T>(a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  return unary<T>(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& a) {
  return unary<T>(
      a, [](T x) { return x > T(20) ? x : std::log1p(std::exp(x)); },
      [](T x, T) { return T(1) / (T(1) + std::exp(-x)); });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
  return unary<T>(
      a, [](T x) { return x / (T(1) + std::exp(-x)); },
      [](T x, T) {
        const T s = T(1) / (T(1) + std::exp(-x));
        return s * (T(1) + x * (T(1) - s));
      });
}

// ---------------------------------------------------------------------------
// Normalisation

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, bool causal) {
  if (a.rank() < 1) throw ShapeError("softmax on a scalar");
  const std::size_t n = a.dim(-1);
  if (causal && (a.rank() < 2 || a.dim(-2) != n)) throw ShapeError("causal softmax needs square trailing axes, got " + shape_str(a.shape()));
  const std::size_t rows = a.size() / n;
  std::vector<T> out(a.size(), T(0));
  const T* x = a.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t len = causal ? (r % n) + 1 : n;
    const T* xr = x + r * n;
    T* yr = out.data() + r * n;
    T mx = xr[0];
    for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, xr[j]);
    T s = 0;
    for (std::size_t j = 0; j < len; ++j) s += (yr[j] = std::exp(xr[j] - mx));
    const T inv = T(1) / s;
    for (std::size_t j = 0; j < len; ++j) yr[j] *= inv;
  }
  auto ai = a.shared();
  auto result = make_result<T>(a.shape(), std::move(out), {a}, nullptr);
  if (result.requires_grad()) {
    std::weak_ptr<TensorImpl<T>> weak = result.shared();
    Tape<T>::current().record(result.shared(), [ai, weak, rows, n]() {
      auto o = weak.lock();
      const T* g = o->grad.data();
      const T* y = o->data.data();
      T* ga = ai->ensure_grad().data();
      for (std::size_t r = 0; r < rows; ++r) {
        T dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
        for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::size_t n = x.dim(-1);
  if (gamma.shape() != Shape{n}) throw ShapeError("layer_norm", x.shape(), gamma.shape());
  if (beta.shape() != Shape{n}) throw ShapeError("layer_norm", x.shape(), beta.shape());
  const std::size_t rows = x.size() / n;
  std::vector<T> out(x.size());
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(rows);
  const T* px = x.data().data();
  const T* pg = gamma.data().data();
  const T* pb = beta.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = px + r * n;
    T mu = 0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= T(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= T(n);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const T h = (xr[j] - mu) * is;
      xhat[r * n + j] = h;
      out[r * n + j] = h * pg[j] + pb[j];
    }
  }
  auto xi = x.shared();
  auto gi = gamma.shared();
  auto bi = beta.shared();
  return make_result<T>(x.shape(), std::move(out), {x, gamma, beta},
                        [xi, gi, bi, rows, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](std::span<const T> g) {
                          const T* pg = gi->data.data();
                          T* gx = xi->requires_grad ? xi->ensure_grad().data() : nullptr;
                          T* gg = gi->requires_grad ? gi->ensure_grad().data() : nullptr;
                          T* gb = bi->requires_grad ? bi->ensure_grad().data() : nullptr;
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* gr = g.data() + r * n;
                            const T* hr = xhat.data() + r * n;
                            T m1 = 0, m2 = 0;
                            for (std::size_t j = 0; j < n; ++j) {
                              const T d = gr[j] * pg[j];
                              m1 += d;
                              m2 += d * hr[j];
                              if (gg) gg[j] += gr[j] * hr[j];
                              if (gb) gb[j] += gr[j];
                            }
                            if (!gx) continue;
                            m1 /= T(n);
                            m2 /= T(n);
                            for (std::size_t j = 0; j < n; ++j)
                              gx[r * n + j] += inv_std[r] * (gr[j] * pg[j] - m1 - hr[j] * m2);
                          }
                        });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, T rate, std::mt19937_64& rng, bool training) {
  if (!training || rate <= T(0)) return x;
  if (rate >= T(1)) throw std::invalid_argument("dropout rate must be < 1");
  const std::size_t n = x.size();
  std::vector<T> mask(n);
  std::bernoulli_distribution keep(1.0 - static_cast<double>(rate));
  const T scale = T(1) / (T(1) - rate);
  for (auto& m : mask) m = keep(rng) ? scale : T(0);
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = x.data()[i] * mask[i];
  auto xi = x.shared();
  return make_result<T>(x.shape(), std::move(out), {x}, [xi, mask = std::move(mask)](std::span<const T> g) {
    T* gx = xi->ensure_grad().data();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
  });
}

// ---------------------------------------------------------------------------
// Structural

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& s0 = parts[0].shape();
  const std::size_t ax = norm_axis(axis, s0.size());
  Shape out_shape = s0;
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    if (p.rank() != s0.size()) throw ShapeError("concat", s0, p.shape());
    for (std::size_t i = 0; i < s0.size(); ++i)
      if (i != ax && p.shape()[i] != s0[i]) throw ShapeError("concat", s0, p.shape());
    out_shape[ax] += p.shape()[ax];
  }
  const std::size_t outer = shape_size(Shape(s0.begin(), s0.begin() + static_cast<std::ptrdiff_t>(ax)));
  const std::size_t inner = shape_size(Shape(s0.begin() + static_cast<std::ptrdiff_t>(ax) + 1, s0.end()));
  const std::size_t row = out_shape[ax] * inner;
  std::vector<T> out(shape_size(out_shape));
  std::vector<std::size_t> widths;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[ax] * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.data().data() + o * w, w, out.data() + o * row + off);
    widths.push_back(w);
    off += w;
  }
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = std::move(out_shape);
  impl->data = std::move(out);
  bool rg = false;
  if (grad_enabled())
    for (const auto& p : parts) rg = rg || p.requires_grad();
  impl->requires_grad = rg;
  if (rg) {
    std::vector<std::shared_ptr<TensorImpl<T>>> ins;
    for (const auto& p : parts) ins.push_back(p.shared());
    std::weak_ptr<TensorImpl<T>> weak = impl;
    Tape<T>::current().record(impl, [weak, ins = std::move(ins), widths = std::move(widths), outer, row]() {
      auto o = weak.lock();
      std::size_t off = 0;
      for (std::size_t k = 0; k < ins.size(); ++k) {
        const std::size_t w = widths[k];
        if (ins[k]->requires_grad) {
          T* gp = ins[k]->ensure_grad().data();
          for (std::size_t r = 0; r < outer; ++r)
            for (std::size_t j = 0; j < w; ++j) gp[r * w + j] += o->grad[r * row + off + j];
        }
        off += w;
      }
    });
  }
  return Tensor<T>(std::move(impl));
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  const std::size_t ax = norm_axis(axis, s.size());
  if (begin > end || end > s[ax])
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range for axis " +
                     std::to_string(ax) + " of " + shape_str(s));
  const std::size_t outer = shape_size(Shape(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(ax)));
  const std::size_t inner = shape_size(Shape(s.begin() + static_cast<std::ptrdiff_t>(ax) + 1, s.end()));
  const std::size_t row = s[ax] * inner;
  const std::size_t w = (end - begin) * inner;
  const std::size_t off = begin * inner;
  Shape out_shape = s;
  out_shape[ax] = end - begin;
  std::vector<T> out(outer * w);
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(x.data().data() + o * row + off, w, out.data() + o * w);
  auto xi = x.shared();
  return make_result<T>(std::move(out_shape), std::move(out), {x}, [xi, outer, row, w, off](std::span<const T> g) {
    T* gx = xi->ensure_grad().data();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < w; ++j) gx[o * row + off + j] += g[o * w + j];
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_size(shape) != x.size()) throw ShapeError("reshape", x.shape(), shape);
  auto xi = x.shared();
  return make_result<T>(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()), {x}, [xi](std::span<const T> g) {
    T* gx = xi->ensure_grad().data();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("transpose needs rank >= 2, got " + shape_str(x.shape()));
  const std::size_t m = x.dim(-2), n = x.dim(-1);
  const std::size_t batch = x.size() / (m * n);
  Shape out_shape = x.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  std::vector<T> out(x.size());
  const T* px = x.data().data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[b * m * n + j * m + i] = px[b * m * n + i * n + j];
  auto xi = x.shared();
  return make_result<T>(std::move(out_shape), std::move(out), {x}, [xi, batch, m, n](std::span<const T> g) {
    T* gx = xi->ensure_grad().data();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[b * m * n + i * n + j] += g[b * m * n + j * m + i];
  });
}

template <typename T>
Tensor<T> time_shift(const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("time_shift needs rank >= 2, got " + shape_str(x.shape()));
  const std::size_t s = x.dim(-2), e = x.dim(-1);
  const std::size_t batch = x.size() / (s * e);
  std::vector<T> out(x.size(), T(0));
  const T* px = x.data().data();
  for (std::size_t b = 0; b < batch; ++b)
    std::copy_n(px + b * s * e, (s - 1) * e, out.data() + b * s * e + e);
  auto xi = x.shared();
  return make_result<T>(x.shape(), std::move(out), {x}, [xi, batch, s, e](std::span<const T> g) {
    T* gx = xi->ensure_grad().data();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t j = 0; j < (s - 1) * e; ++j) gx[b * s * e + j] += g[b * s * e + e + j];
  });
}

// Sequential summation keeps reductions bitwise reproducible.
template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  auto xi = x.shared();
  return make_result<T>({}, {acc}, {x}, [xi](std::span<const T> g) {
    T* gx = xi->ensure_grad().data();
    for (std::size_t i = 0; i < xi->data.size(); ++i) gx[i] += g[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  const T inv = T(1) / T(x.size());
  auto xi = x.shared();
  return make_result<T>({}, {acc * inv}, {x}, [xi, inv](std::span<const T> g) {
    T* gx = xi->ensure_grad().data();
    for (std::size_t i = 0; i < xi->data.size(); ++i) gx[i] += g[0] * inv;
  });
}

#define NDBENCH_INSTANTIATE(T)                                                                                   \
  template class Tensor<T>;                                                                                      \
  template class Tape<T>;                                                                                        \
  template Tensor<T> make_result<T>(Shape, std::vector<T>, std::initializer_list<Tensor<T>>,                     \
                                    std::function<void(std::span<const T>)>);                                   \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> batched_matmul<T>(const Tensor<T>&, const Tensor<T>&, bool);                                \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                                 \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                                 \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                                 \
  template Tensor<T> maximum<T>(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> affine<T>(const Tensor<T>&, T, T);                                                          \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                                                               \
  template Tensor<T> tanh<T>(const Tensor<T>&);                                                                  \
  template Tensor<T> exp<T>(const Tensor<T>&);                                                                   \
  template Tensor<T> relu<T>(const Tensor<T>&);                                                                  \
  template Tensor<T> square<T>(const Tensor<T>&);                                                                \
  template Tensor<T> softplus<T>(const Tensor<T>&);                                                              \
  template Tensor<T> silu<T>(const Tensor<T>&);                                                                  \
  template Tensor<T> softmax<T>(const Tensor<T>&, bool);                                                         \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                     \
  template Tensor<T> dropout<T>(const Tensor<T>&, T, std::mt19937_64&, bool);                                    \
  template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, int);                                              \
  template Tensor<T> slice<T>(const Tensor<T>&, int, std::size_t, std::size_t);                                  \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                                        \
  template Tensor<T> transpose<T>(const Tensor<T>&);                                                             \
  template Tensor<T> time_shift<T>(const Tensor<T>&);                                                            \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                                   \
  template Tensor<T> mean<T>(const Tensor<T>&);

NDBENCH_INSTANTIATE(float)
NDBENCH_INSTANTIATE(double)

}  // namespace ndbench
