#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "waunet/tensor/rng.hpp"
#include "waunet/tensor/tensor.hpp"

namespace waunet::attn {

enum class Axis { height, width };
enum class AttentionMode { axial, full };

// Projections and relative positional tables of one single-axis attention
// pass. Projections are stored as 1x1 convolution kernels; head h owns
// channels [h*d_k, (h+1)*d_k) of Q, K and V.
struct AttentionLayerParams {
  std::size_t heads = 0;
  std::size_t d_model = 0;
  std::size_t d_k = 0;
  Tensor wq, wk, wv;  // [heads*d_k, d_model, 1, 1]
  Tensor w_out;       // [d_model, heads*d_k, 1, 1]
  Tensor rq, rk, rv;  // [heads, 2*axis_len-1, d_k], indexed by key - query offset

  // Projections ~ N(0, 1/d_model), tables ~ U(-1/sqrt(d_k), 1/sqrt(d_k)), and
  // a zero output projection so the residual pass starts as the identity.
  static AttentionLayerParams init(std::size_t d_model, std::size_t heads, std::size_t axis_len,
                                   DType dtype, Rng& rng);

  // Longest axis the positional tables cover.
  std::size_t max_axis_len() const;
  std::vector<std::pair<std::string, Tensor>> named_tensors(const std::string& prefix) const;
};

struct Qkv {
  Tensor q, k, v;  // [N, heads*d_k, H, W]
};

Qkv qkv_project(const Tensor& x, const AttentionLayerParams& params);

// Differentiable core of one axial pass (OpKind::axial_attention). For each
// query o along `axis`:
//   y_o = sum_p softmax_p(q_o.k_p / sqrt(d_k) + q_o.rq[p-o] + k_p.rk[p-o]) (v_p + rv[p-o])
// with the softmax over key positions p on the same row (width) or column
// (height).
Tensor axial_attention_core(const Qkv& qkv, const Tensor& rq, const Tensor& rk, const Tensor& rv,
                            std::size_t heads, Axis axis);

// Post-softmax weights of the core, [N, heads, lines, L, L], where lines is
// the extent of the non-attended axis. Not differentiable.
Tensor axial_attention_weights(const Qkv& qkv, const Tensor& rq, const Tensor& rk,
                               std::size_t heads, Axis axis);

// Projection, core and output projection of one axis pass (no residual).
Tensor axial_attend(const Tensor& x, const AttentionLayerParams& params, Axis axis);

// Dense softmax(QK^T/sqrt(d_k))V over all H*W tokens, built from generic
// primitives; positional tables are ignored. Quadratic cost.
Tensor full_attention_reference(const Tensor& x, const AttentionLayerParams& params);

struct AttentionBlockSpec {
  std::size_t depth = 1;
  std::size_t heads = 8;
};

struct AxialLayer {
  AttentionLayerParams height;
  AttentionLayerParams width;
};

struct AttentionBlockParams {
  std::vector<AxialLayer> layers;

  static AttentionBlockParams init(const AttentionBlockSpec& spec, std::size_t channels,
                                   std::size_t height, std::size_t width, DType dtype, Rng& rng);
  std::vector<std::pair<std::string, Tensor>> named_tensors(const std::string& prefix) const;
};

// Each layer: x += attend_height(x), then x += attend_width(x).
Tensor attention_block(const Tensor& x, const AttentionBlockParams& params);

// Multiply-accumulates of the content score (q.k) and value aggregation
// stages for one image and one axial layer (both passes), or for full
// attention: 2*C*HW*(H+W) and 2*C*(HW)^2.
std::uint64_t count_attention_flops(std::size_t height, std::size_t width, std::size_t channels,
                                    AttentionMode mode);

}  // namespace waunet::attn
