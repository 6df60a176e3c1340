#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "waunet/tensor/errors.hpp"

namespace waunet {

using Shape = std::vector<std::size_t>;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

std::string_view dtype_name(DType t);
std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Primitive identifiers recorded in the autodiff graph.
enum class OpKind : std::uint8_t {
  conv2d,
  deconv2d,
  maxpool2d,
  relu,
  softmax,
  cross_entropy,
  matmul,
  concat,
  add,
  mul,
  scale,
  permute,
  reshape,
  sum,
  mean,
  axial_attention,
};
inline constexpr std::size_t kNumOpKinds = 16;

std::string_view op_name(OpKind kind);
std::vector<OpKind> all_op_kinds();

namespace detail {

using Buffer = std::variant<std::vector<float>, std::vector<double>>;

struct TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

struct OpRecord {
  OpKind kind;
  std::vector<ImplPtr> inputs;
  // Accumulates into the grads of `inputs` given the output node, whose grad
  // is populated when this runs.
  std::function<void(const TensorImpl& out, std::span<const ImplPtr> inputs)> backward;
};

struct TensorImpl {
  Shape shape;
  DType dtype = DType::f32;
  Buffer data;
  std::optional<Buffer> grad;
  bool requires_grad = false;
  std::shared_ptr<OpRecord> producer;
};

Buffer make_buffer(DType t, std::size_t n);

template <class T>
std::vector<T>& vec(Buffer& b) {
  return std::get<std::vector<T>>(b);
}
template <class T>
const std::vector<T>& vec(const Buffer& b) {
  return std::get<std::vector<T>>(b);
}

// Grad buffer of `t` as T*, allocated on first use; nullptr when `t` does not
// take gradients.
template <class T>
T* grad_ptr(TensorImpl& t) {
  if (!t.requires_grad) return nullptr;
  if (!t.grad) t.grad = make_buffer(t.dtype, numel(t.shape));
  return vec<T>(*t.grad).data();
}

template <class T>
const T* data_ptr(const TensorImpl& t) {
  return vec<T>(t.data).data();
}

template <class T>
const T* out_grad(const TensorImpl& out) {
  return vec<T>(*out.grad).data();
}

}  // namespace detail

// Reference-semantics handle to a node of the autodiff graph. Copies share
// storage, like the tensors of most deep-learning frameworks.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(detail::ImplPtr impl) : impl_(std::move(impl)) {}

  static Tensor zeros(const Shape& shape, DType dtype = DType::f32, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value, DType dtype = DType::f32,
                     bool requires_grad = false);
  static Tensor from_values(const Shape& shape, std::span<const double> values,
                            DType dtype = DType::f32, bool requires_grad = false);
  static Tensor scalar(double value, DType dtype = DType::f32, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl().shape; }
  std::size_t dim(std::size_t i) const;
  std::size_t rank() const { return impl().shape.size(); }
  std::size_t numel() const { return waunet::numel(impl().shape); }
  DType dtype() const { return impl().dtype; }

  template <class T>
  std::span<T> data() {
    return detail::vec<T>(impl().data);
  }
  template <class T>
  std::span<const T> data() const {
    return detail::vec<T>(impl().data);
  }

  double at(std::size_t flat) const;
  void set(std::size_t flat, double value);
  // Row-major multi-index access; throws DimensionError on a bad index.
  double at(std::initializer_list<std::size_t> index) const;
  void set(std::initializer_list<std::size_t> index, double value);
  std::size_t flat_index(std::initializer_list<std::size_t> index) const;
  double item() const;
  std::vector<double> to_vector() const;

  bool requires_grad() const { return impl().requires_grad; }
  void set_requires_grad(bool on);
  bool is_leaf() const { return impl().producer == nullptr; }
  std::optional<OpKind> producer_kind() const;

  bool has_grad() const { return impl().grad.has_value(); }
  // Gradient as a detached tensor (zeros when nothing accumulated yet).
  Tensor grad() const;
  double grad_at(std::size_t flat) const;
  template <class T>
  std::span<T> grad_data() {
    return detail::vec<T>(*impl().grad);
  }
  void zero_grad();

  Tensor detach() const;
  Tensor clone() const;
  Tensor to(DType dtype) const;

  // Reverse-mode sweep from a scalar root; every record on the path runs once
  // and the graph is released afterwards.
  void backward() const;

  detail::TensorImpl& impl() const;
  const detail::ImplPtr& impl_ptr() const { return impl_; }

 private:
  detail::ImplPtr impl_;
};

bool grad_enabled();

// Disables graph recording in the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Calls f(float{}) or f(double{}) according to the tag.
template <class F>
decltype(auto) dispatch(DType t, F&& f) {
  if (t == DType::f64) return f(double{});
  return f(float{});
}

namespace testing {
// Test fixture hook: when set, the backward pass of every record of `kind`
// contributes the negated gradient to its inputs.
void inject_backward_fault(std::optional<OpKind> kind);
std::optional<OpKind> injected_backward_fault();
}  // namespace testing

}  // namespace waunet
