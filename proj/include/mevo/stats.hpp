#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mevo/tensor_store.hpp"

namespace mevo {

/// Diagonal Fisher information of one model, aligned with its weights.
struct FisherState {
  FlatVector diag;
  std::size_t samples = 0;
};

/// Input Gram matrix X^T X of one linear layer. The layer's weight tensor is
/// stored [out, in]; gram is in x in.
struct LayerGram {
  std::string weight_name;
  Eigen::MatrixXd gram;
};

struct GramState {
  std::vector<LayerGram> layers;
  std::size_t samples = 0;

  const LayerGram* find(const std::string& weight_name) const {
    for (const auto& l : layers) {
      if (l.weight_name == weight_name) return &l;
    }
    return nullptr;
  }
};

}  // namespace mevo
