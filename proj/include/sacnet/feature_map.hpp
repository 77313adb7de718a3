#pragma once

#include "sacnet/errors.hpp"
#include "sacnet/tensor.hpp"

namespace sacnet {

enum class ChannelSemantics { generic, orientation, scale_group };

// A [batch, channel, height, width] tensor with declared channel meaning.
struct FeatureMap {
  TensorPtr tensor;
  ChannelSemantics channel_semantics = ChannelSemantics::generic;

  FeatureMap() = default;
  explicit FeatureMap(TensorPtr t, ChannelSemantics s = ChannelSemantics::generic)
      : tensor(std::move(t)), channel_semantics(s) {
    if (tensor->shape.size() != 4)
      throw ShapeMismatch("FeatureMap expects 4 axes [b,c,h,w], got " +
                          shape_str(tensor->shape));
  }

  int64_t batch() const { return tensor->shape[0]; }
  int64_t channels() const { return tensor->shape[1]; }
  int64_t height() const { return tensor->shape[2]; }
  int64_t width() const { return tensor->shape[3]; }
};

}  // namespace sacnet
