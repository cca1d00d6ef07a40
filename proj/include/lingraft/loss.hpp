#pragma once

#include <span>

#include "lingraft/network.hpp"

namespace lingraft {

struct LossAndGrad {
  double loss = 0.0;  // mean over the batch
  Matrix grad;        // d(mean loss) / d logits
};

// Softmax cross-entropy, one example per column.
LossAndGrad cross_entropy(const Matrix& logits, std::span<const int> labels);

// Column-wise argmax, lowest index on ties.
std::vector<int> argmax_columns(const Matrix& logits);

}  // namespace lingraft
