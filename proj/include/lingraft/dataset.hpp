#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lingraft/network.hpp"

namespace lingraft {

// Labelled examples, one per column of `inputs`.
struct Dataset {
  Matrix inputs;
  std::vector<int> labels;
  int num_classes = 0;

  Eigen::Index size() const { return inputs.cols(); }
  Eigen::Index dim() const { return inputs.rows(); }

  Dataset slice(Eigen::Index start, Eigen::Index count) const;
  Dataset head(Eigen::Index count) const { return slice(0, std::min(count, size())); }
};

// MNIST IDX pair: images (magic 0x00000803, N x rows x cols, bytes scaled to
// [0, 1]) and labels (magic 0x00000801). Throws FormatError with the offending
// byte offset.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

// Rows of "label,feature,feature,...". Blank lines are skipped.
Dataset load_csv(const std::filesystem::path& path);
Dataset parse_csv(const std::string& text);

enum class SyntheticKind { TwoMoons, Blobs };

// Two-dimensional data scaled into [0, 1]^2.
Dataset make_synthetic(SyntheticKind kind, std::size_t count, std::uint64_t seed, double noise = 0.1,
                       int classes = 2);

}  // namespace lingraft
