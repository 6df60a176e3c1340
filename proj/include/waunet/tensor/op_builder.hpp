#pragma once

#include <string>
#include <vector>

#include "waunet/tensor/ops.hpp"
#include "waunet/tensor/tensor.hpp"

namespace waunet::ops::internal {

using detail::ImplPtr;
using detail::TensorImpl;
using BackwardFn = std::function<void(const TensorImpl&, std::span<const ImplPtr>)>;

inline void require_same_dtype(const char* op, const Tensor& a, const Tensor& b) {
  if (a.dtype() != b.dtype())
    throw UsageError(std::string(op) + ": dtype mismatch (" + std::string(dtype_name(a.dtype())) +
                     " vs " + std::string(dtype_name(b.dtype())) + ")");
}

inline void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_str(t.shape()));
}

// Attaches a record to `out` when any input needs a gradient.
inline Tensor finish(Tensor out, OpKind kind, std::initializer_list<Tensor> inputs,
                     BackwardFn backward) {
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& t : inputs)
    if (t.defined() && t.requires_grad()) any = true;
  if (!any) return out;
  auto record = std::make_shared<detail::OpRecord>();
  record->kind = kind;
  for (const auto& t : inputs)
    if (t.defined()) record->inputs.push_back(t.impl_ptr());
  record->backward = std::move(backward);
  out.impl().requires_grad = true;
  out.impl().producer = std::move(record);
  return out;
}

inline Tensor finish(Tensor out, OpKind kind, const std::vector<Tensor>& inputs,
                     BackwardFn backward) {
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& t : inputs)
    if (t.requires_grad()) any = true;
  if (!any) return out;
  auto record = std::make_shared<detail::OpRecord>();
  record->kind = kind;
  for (const auto& t : inputs) record->inputs.push_back(t.impl_ptr());
  record->backward = std::move(backward);
  out.impl().requires_grad = true;
  out.impl().producer = std::move(record);
  return out;
}

}  // namespace waunet::ops::internal
