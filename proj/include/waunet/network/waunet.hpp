#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "waunet/attention/axial_attention.hpp"
#include "waunet/tensor/label_map.hpp"
#include "waunet/tensor/tensor.hpp"

namespace waunet::net {

struct NetConfig {
  std::size_t levels = 3;
  std::vector<std::size_t> filters{8, 16, 32};
  std::vector<std::size_t> attention_depths{1, 2, 3};
  std::size_t heads = 2;
  std::size_t num_classes = 5;
  std::size_t input_size = 32;
  std::size_t input_channels = 1;
  // false builds the same grid with the attention blocks left out.
  bool attention = true;
  DType dtype = DType::f32;

  // Throws ConfigError naming the first violated invariant.
  void validate() const;
  // Spatial extent at pyramid level i.
  std::size_t level_size(std::size_t level) const { return input_size >> level; }
};

struct Conv {
  Tensor weight;
  Tensor bias;
};

struct CnnBlock {
  Conv convs[3];  // 3x3, padding 1, each followed by relu
};

// Node X^{i,j} of the nested grid for j >= 1, and the decoder node D^i:
// concat + 1x1 fusion, optional up-sampling of the node below, CNN block.
struct FusionNode {
  Conv fuse;
  Conv up;  // 2x2 stride-2 transposed conv from level i+1; absent on the bottom decoder
  CnnBlock cnn;
};

struct Edge {
  enum class Kind { down, up, skip, attention, head };
  std::string from, to;
  Kind kind;
};

class NetworkGraph {
 public:
  NetConfig config;
  std::vector<CnnBlock> encoder;                  // X^{i,0}
  std::vector<std::vector<FusionNode>> nested;    // nested[i][j-1] is X^{i,j}
  std::vector<attn::AttentionBlockParams> attention;  // empty when ablated
  std::vector<FusionNode> decoder;                // D^i for i < levels-1
  Conv head;                                      // 1x1 to num_classes

  // Every trainable tensor with a stable name, in a fixed order.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;
  // Handle to the named parameter; throws UsageError if absent.
  Tensor parameter(const std::string& name) const;
  std::vector<Edge> topology() const;
};

// Deterministic in (config, seed). Each tensor is drawn from its own stream
// keyed by the seed and the tensor's name, so graphs that differ only in the
// presence of attention share every convolution weight.
NetworkGraph build_waunet(const NetConfig& config, std::uint64_t seed);

// Channel concatenation followed by a 1x1 convolution.
Tensor fuse(std::span<const Tensor> maps, const Conv& conv);

Tensor forward(const NetworkGraph& graph, const Tensor& images);

// Per-pixel argmax over classes; ties go to the smaller class id.
LabelMap predict_labels(const Tensor& logits, Spacing spacing = {});

}  // namespace waunet::net
