#pragma once

#include <cstddef>
#include <vector>

#include "gpsa/attention.hpp"

namespace gpsa {

enum class LayerKind { gpsa, sa };

struct LayerAttention {
  LayerKind kind = LayerKind::gpsa;
  // Row/column 0 is the class token when set.
  bool has_class_token = false;
  std::vector<Tensor> heads;
};

/// Attention matrices captured on one forward pass, in layer order.
struct AttentionRecord {
  PatchGrid grid;
  std::vector<LayerAttention> layers;
};

}  // namespace gpsa
