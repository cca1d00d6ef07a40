#include "lingraft/loss.hpp"

#include <cmath>

#include "lingraft/errors.hpp"

namespace lingraft {

LossAndGrad cross_entropy(const Matrix& logits, std::span<const int> labels) {
  if (static_cast<Eigen::Index>(labels.size()) != logits.cols()) {
    throw StructuralError("label count does not match batch size");
  }
  LossAndGrad out{0.0, Matrix(logits.rows(), logits.cols())};
  const double scale = 1.0 / static_cast<double>(logits.cols());
  for (Eigen::Index c = 0; c < logits.cols(); ++c) {
    const int y = labels[c];
    if (y < 0 || y >= logits.rows()) throw UsageError("label out of range");
    const double m = logits.col(c).maxCoeff();
    double total = 0.0;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) total += std::exp(logits(r, c) - m);
    const double log_z = m + std::log(total);
    out.loss += (log_z - logits(y, c)) * scale;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
      out.grad(r, c) = (std::exp(logits(r, c) - log_z) - (r == y ? 1.0 : 0.0)) * scale;
    }
  }
  return out;
}

std::vector<int> argmax_columns(const Matrix& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.cols()));
  for (Eigen::Index c = 0; c < logits.cols(); ++c) {
    Eigen::Index best = 0;
    for (Eigen::Index r = 1; r < logits.rows(); ++r)
      if (logits(r, c) > logits(best, c)) best = r;
    out[c] = static_cast<int>(best);
  }
  return out;
}

}  // namespace lingraft
