#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "waunet/tensor/label_map.hpp"
#include "waunet/tensor/tensor.hpp"

// Forward primitives. Every function records itself in the autodiff graph
// when grad mode is on and some input requires a gradient.
namespace waunet::ops {

// Cross-correlation of [N,Cin,H,W] with [Cout,Cin,k,k]; optional [Cout] bias.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias = {},
              std::size_t stride = 1, std::size_t zero_pad = 0);

// Transposed convolution, kernel 2 stride 2: [N,Cin,H,W] x [Cin,Cout,2,2] -> [N,Cout,2H,2W].
Tensor deconv2d(const Tensor& input, const Tensor& weight, const Tensor& bias = {});

// 2x2 stride-2 max pooling. Ties go to the first row-major position.
Tensor maxpool2d(const Tensor& input);

Tensor relu(const Tensor& x);
Tensor softmax(const Tensor& x, std::size_t axis);

// Mean over all N*H*W pixels of -log softmax(logits)[target] along axis 1.
Tensor cross_entropy_loss(const Tensor& logits, const LabelMap& target);

// [M,K]x[K,N] or batched [B,M,K]x[B,K,N].
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor permute(const Tensor& x, std::span<const std::size_t> order);
Tensor reshape(const Tensor& x, const Shape& shape);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

inline Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis) {
  std::vector<Tensor> v(parts);
  return concat(std::span<const Tensor>(v), axis);
}
inline Tensor permute(const Tensor& x, std::initializer_list<std::size_t> order) {
  std::vector<std::size_t> v(order);
  return permute(x, std::span<const std::size_t>(v));
}

}  // namespace waunet::ops

namespace waunet {

// Records or replays the on/off pattern of the piecewise-linear primitives
// (relu masks, max-pool argmax) in call order on the current thread. The
// gradient checker uses it to evaluate finite differences inside a single
// linear region when a perturbation would cross a kink.
class ActivationPattern {
 public:
  enum class Mode { off, fingerprint, record, replay };

  // Scoped mode switch; replay rewinds to the first recorded call.
  class Scope {
   public:
    Scope(ActivationPattern& pattern, Mode mode);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    ActivationPattern* prev_;
  };

  std::uint64_t fingerprint() const { return fingerprint_; }

  // Hooks used by the kernels; `active` returns the pattern for the current
  // call (recording or replaying it).
  static ActivationPattern* current();
  void relu_pattern(std::vector<std::uint8_t>& mask);
  void pool_pattern(std::vector<std::uint32_t>& argmax);

 private:
  Mode mode_ = Mode::off;
  std::uint64_t fingerprint_ = 0xcbf29ce484222325ull;
  std::vector<std::vector<std::uint8_t>> relu_masks_;
  std::vector<std::vector<std::uint32_t>> pool_argmax_;
  std::size_t relu_cursor_ = 0;
  std::size_t pool_cursor_ = 0;
};

}  // namespace waunet
