#include "waunet/tensor/tensor.hpp"

#include <algorithm>
#include <array>
#include <sstream>
#include <unordered_set>

namespace waunet {

namespace {

thread_local bool t_grad_enabled = true;
std::optional<OpKind> g_fault;

constexpr std::array<std::string_view, kNumOpKinds> kOpNames = {
    "conv2d", "deconv2d", "maxpool2d", "relu",    "softmax", "cross_entropy",
    "matmul", "concat",   "add",       "mul",     "scale",   "permute",
    "reshape", "sum",     "mean",      "axial_attention"};

}  // namespace

std::string_view dtype_name(DType t) { return t == DType::f64 ? "f64" : "f32"; }

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::string_view op_name(OpKind kind) { return kOpNames[static_cast<std::size_t>(kind)]; }

std::vector<OpKind> all_op_kinds() {
  std::vector<OpKind> out;
  for (std::size_t i = 0; i < kNumOpKinds; ++i) out.push_back(static_cast<OpKind>(i));
  return out;
}

namespace detail {

Buffer make_buffer(DType t, std::size_t n) {
  if (t == DType::f64) return std::vector<double>(n, 0.0);
  return std::vector<float>(n, 0.0f);
}

}  // namespace detail

namespace {

detail::ImplPtr new_impl(const Shape& shape, DType dtype, bool requires_grad) {
  for (auto e : shape)
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = shape;
  impl->dtype = dtype;
  impl->data = detail::make_buffer(dtype, numel(shape));
  impl->requires_grad = requires_grad;
  return impl;
}

}  // namespace

Tensor Tensor::zeros(const Shape& shape, DType dtype, bool requires_grad) {
  return Tensor(new_impl(shape, dtype, requires_grad));
}

Tensor Tensor::full(const Shape& shape, double value, DType dtype, bool requires_grad) {
  Tensor t = zeros(shape, dtype, requires_grad);
  dispatch(dtype, [&](auto tag) {
    using T = decltype(tag);
    auto d = t.data<T>();
    std::fill(d.begin(), d.end(), static_cast<T>(value));
  });
  return t;
}

Tensor Tensor::from_values(const Shape& shape, std::span<const double> values, DType dtype,
                           bool requires_grad) {
  if (values.size() != waunet::numel(shape))
    throw DimensionError("from_values: " + std::to_string(values.size()) +
                         " values for shape " + shape_str(shape));
  Tensor t = zeros(shape, dtype, requires_grad);
  dispatch(dtype, [&](auto tag) {
    using T = decltype(tag);
    auto d = t.data<T>();
    for (std::size_t i = 0; i < values.size(); ++i) d[i] = static_cast<T>(values[i]);
  });
  return t;
}

Tensor Tensor::scalar(double value, DType dtype, bool requires_grad) {
  return full({1}, value, dtype, requires_grad);
}

detail::TensorImpl& Tensor::impl() const {
  if (!impl_) throw UsageError("use of an undefined tensor");
  return *impl_;
}

std::size_t Tensor::dim(std::size_t i) const {
  const auto& s = impl().shape;
  if (i >= s.size()) throw DimensionError("dim index out of range for shape " + shape_str(s));
  return s[i];
}

double Tensor::at(std::size_t flat) const {
  return dispatch(dtype(), [&](auto tag) -> double {
    using T = decltype(tag);
    return static_cast<double>(detail::vec<T>(impl().data).at(flat));
  });
}

void Tensor::set(std::size_t flat, double value) {
  dispatch(dtype(), [&](auto tag) {
    using T = decltype(tag);
    detail::vec<T>(impl().data).at(flat) = static_cast<T>(value);
  });
}

std::size_t Tensor::flat_index(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank())
    throw DimensionError("index of rank " + std::to_string(index.size()) + " into tensor " +
                         shape_str(shape()));
  std::size_t flat = 0, axis = 0;
  for (std::size_t i : index) {
    if (i >= shape()[axis]) throw DimensionError("index out of range for " + shape_str(shape()));
    flat = flat * shape()[axis++] + i;
  }
  return flat;
}

double Tensor::at(std::initializer_list<std::size_t> index) const { return at(flat_index(index)); }

void Tensor::set(std::initializer_list<std::size_t> index, double value) {
  set(flat_index(index), value);
}

double Tensor::item() const {
  if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
  return at(0);
}

std::vector<double> Tensor::to_vector() const {
  return dispatch(dtype(), [&](auto tag) {
    using T = decltype(tag);
    const auto& v = detail::vec<T>(impl().data);
    return std::vector<double>(v.begin(), v.end());
  });
}

void Tensor::set_requires_grad(bool on) {
  if (!is_leaf()) throw UsageError("requires_grad can only be changed on leaf tensors");
  impl().requires_grad = on;
}

std::optional<OpKind> Tensor::producer_kind() const {
  if (!impl().producer) return std::nullopt;
  return impl().producer->kind;
}

Tensor Tensor::grad() const {
  auto out = new_impl(shape(), dtype(), false);
  if (impl().grad) out->data = *impl().grad;
  return Tensor(out);
}

double Tensor::grad_at(std::size_t flat) const {
  if (!impl().grad) return 0.0;
  return dispatch(dtype(), [&](auto tag) -> double {
    using T = decltype(tag);
    return static_cast<double>(detail::vec<T>(*impl().grad).at(flat));
  });
}

void Tensor::zero_grad() { impl().grad.reset(); }

Tensor Tensor::detach() const {
  auto out = std::make_shared<detail::TensorImpl>();
  out->shape = shape();
  out->dtype = dtype();
  out->data = impl().data;
  return Tensor(out);
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.impl().requires_grad = requires_grad();
  return t;
}

Tensor Tensor::to(DType target) const {
  if (target == dtype()) return detach();
  Tensor out = zeros(shape(), target);
  dispatch(dtype(), [&](auto src_tag) {
    using S = decltype(src_tag);
    dispatch(target, [&](auto dst_tag) {
      using D = decltype(dst_tag);
      const auto& s = detail::vec<S>(impl().data);
      auto d = out.data<D>();
      for (std::size_t i = 0; i < s.size(); ++i) d[i] = static_cast<D>(s[i]);
    });
  });
  return out;
}

void Tensor::backward() const {
  if (numel() != 1)
    throw UsageError("backward() needs a scalar root, got shape " + shape_str(shape()));
  if (!requires_grad()) throw UsageError("backward() on a tensor that does not require grad");

  // Iterative post-order DFS gives a topological order of the recorded nodes.
  // Owning pointers: releasing a record may drop the last other reference
  // to an intermediate node that is still pending.
  std::vector<detail::ImplPtr> order;
  std::unordered_set<detail::TensorImpl*> seen;
  std::vector<std::pair<detail::ImplPtr, std::size_t>> stack;
  stack.emplace_back(impl_, 0);
  seen.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->producer && next < node->producer->inputs.size()) {
      detail::ImplPtr child = node->producer->inputs[next++];
      if (child->producer && seen.insert(child.get()).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  dispatch(dtype(), [&](auto tag) {
    using T = decltype(tag);
    impl().grad = detail::make_buffer(dtype(), 1);
    detail::vec<T>(*impl().grad)[0] = T(1);
  });

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorImpl* node = it->get();
    auto record = node->producer;
    if (!record) continue;
    if (!node->grad) node->grad = detail::make_buffer(node->dtype, waunet::numel(node->shape));
    const bool faulty = g_fault && *g_fault == record->kind;
    std::vector<std::optional<detail::Buffer>> before;
    if (faulty) {
      for (const auto& in : record->inputs) before.push_back(in->grad);
    }
    record->backward(*node, record->inputs);
    if (faulty) {
      for (std::size_t i = 0; i < record->inputs.size(); ++i) {
        auto& in = record->inputs[i];
        if (!in->grad) continue;
        dispatch(in->dtype, [&](auto tag) {
          using T = decltype(tag);
          auto& g = detail::vec<T>(*in->grad);
          for (std::size_t k = 0; k < g.size(); ++k) {
            T prev = before[i] ? detail::vec<T>(*before[i])[k] : T(0);
            g[k] = prev - (g[k] - prev);
          }
        });
      }
    }
    node->producer.reset();
    if (node != impl_.get()) node->grad.reset();
  }
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = prev_; }

namespace testing {
void inject_backward_fault(std::optional<OpKind> kind) { g_fault = kind; }
std::optional<OpKind> injected_backward_fault() { return g_fault; }
}  // namespace testing

}  // namespace waunet
