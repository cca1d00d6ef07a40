#include "lingraft/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "lingraft/errors.hpp"

namespace lingraft {

namespace {

std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset, const std::string& what) {
  if (offset + 4 > bytes.size()) throw FormatError("truncated IDX header while reading " + what, offset);
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

int infer_classes(const std::vector<int>& labels) {
  int top = -1;
  for (int y : labels) top = std::max(top, y);
  return top + 1;
}

}  // namespace

Dataset Dataset::slice(Eigen::Index start, Eigen::Index count) const {
  if (start < 0 || count < 0 || start + count > size()) throw UsageError("dataset slice out of range");
  Dataset out;
  out.inputs = inputs.middleCols(start, count);
  out.labels.assign(labels.begin() + start, labels.begin() + start + count);
  out.num_classes = num_classes;
  return out;
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const auto img = read_bytes(images);
  const auto lab = read_bytes(labels);

  const std::uint32_t img_magic = read_be32(img, 0, "image magic");
  if (img_magic != 0x00000803u) throw FormatError("bad IDX image magic", 0);
  const std::uint32_t count = read_be32(img, 4, "image count");
  const std::uint32_t rows = read_be32(img, 8, "row count");
  const std::uint32_t cols = read_be32(img, 12, "column count");
  const std::size_t pixels = static_cast<std::size_t>(rows) * cols;
  if (pixels == 0) throw FormatError("IDX images have zero size", 8);
  const std::size_t expected = 16 + static_cast<std::size_t>(count) * pixels;
  if (img.size() != expected) {
    throw FormatError("IDX image payload has " + std::to_string(img.size()) + " bytes, header implies " +
                          std::to_string(expected),
                      std::min(img.size(), expected));
  }

  const std::uint32_t lab_magic = read_be32(lab, 0, "label magic");
  if (lab_magic != 0x00000801u) throw FormatError("bad IDX label magic", 0);
  const std::uint32_t lab_count = read_be32(lab, 4, "label count");
  if (lab_count != count) throw FormatError("label count does not match image count", 4);
  if (lab.size() != 8 + static_cast<std::size_t>(count)) {
    throw FormatError("IDX label payload size does not match header", std::min<std::size_t>(lab.size(), 8 + count));
  }

  Dataset out;
  out.inputs.resize(static_cast<Eigen::Index>(pixels), count);
  out.labels.resize(count);
  for (std::size_t n = 0; n < count; ++n) {
    const std::size_t base = 16 + n * pixels;
    for (std::size_t p = 0; p < pixels; ++p) out.inputs(p, n) = img[base + p] / 255.0;
    out.labels[n] = lab[8 + n];
  }
  out.num_classes = std::max(10, infer_classes(out.labels));
  return out;
}

Dataset parse_csv(const std::string& text) {
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  std::size_t offset = 0;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const std::size_t line_start = offset;
    offset += line.size() + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::vector<double> values;
    std::size_t pos = 0;
    while (pos <= line.size()) {
      const std::size_t comma = std::min(line.find(',', pos), line.size());
      const std::string field = line.substr(pos, comma - pos);
      try {
        std::size_t used = 0;
        values.push_back(std::stod(field, &used));
        if (field.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(field);
      } catch (const std::exception&) {
        throw FormatError("CSV field '" + field + "' is not a number", line_start + pos);
      }
      pos = comma + 1;
    }
    if (values.size() < 2) throw FormatError("CSV row needs a label and at least one feature", line_start);
    const double label = values.front();
    if (label < 0 || label != std::floor(label)) throw FormatError("CSV label must be a non-negative integer", line_start);
    if (!rows.empty() && values.size() - 1 != rows.front().size()) {
      throw FormatError("CSV row has a different feature count", line_start);
    }
    labels.push_back(static_cast<int>(label));
    rows.emplace_back(values.begin() + 1, values.end());
  }
  if (rows.empty()) throw FormatError("CSV contains no rows", 0);
  Dataset out;
  out.inputs.resize(static_cast<Eigen::Index>(rows.front().size()), static_cast<Eigen::Index>(rows.size()));
  for (std::size_t c = 0; c < rows.size(); ++c)
    for (std::size_t r = 0; r < rows[c].size(); ++r) out.inputs(r, c) = rows[c][r];
  out.labels = std::move(labels);
  out.num_classes = std::max(2, infer_classes(out.labels));
  return out;
}

Dataset load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_csv(buffer.str());
}

Dataset make_synthetic(SyntheticKind kind, std::size_t count, std::uint64_t seed, double noise, int classes) {
  if (count == 0) throw UsageError("synthetic dataset needs at least one example");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Dataset out;
  out.inputs.resize(2, static_cast<Eigen::Index>(count));
  out.labels.resize(count);

  if (kind == SyntheticKind::TwoMoons) {
    out.num_classes = 2;
    for (std::size_t i = 0; i < count; ++i) {
      const int label = static_cast<int>(i % 2);
      const double t = std::numbers::pi * unit(rng);
      double x = label == 0 ? std::cos(t) : 1.0 - std::cos(t);
      double y = label == 0 ? std::sin(t) : 0.5 - std::sin(t);
      x += noise * gauss(rng);
      y += noise * gauss(rng);
      // Moons span roughly [-1, 2] x [-0.5, 1]; map into the unit square.
      out.inputs(0, i) = std::clamp((x + 1.25) / 3.5, 0.0, 1.0);
      out.inputs(1, i) = std::clamp((y + 0.75) / 2.0, 0.0, 1.0);
      out.labels[i] = label;
    }
    return out;
  }

  if (classes < 2) throw UsageError("blobs need at least two classes");
  out.num_classes = classes;
  std::vector<std::pair<double, double>> centres;
  for (int k = 0; k < classes; ++k) centres.emplace_back(0.2 + 0.6 * unit(rng), 0.2 + 0.6 * unit(rng));
  for (std::size_t i = 0; i < count; ++i) {
    const int label = static_cast<int>(i % static_cast<std::size_t>(classes));
    out.inputs(0, i) = std::clamp(centres[label].first + noise * gauss(rng), 0.0, 1.0);
    out.inputs(1, i) = std::clamp(centres[label].second + noise * gauss(rng), 0.0, 1.0);
    out.labels[i] = label;
  }
  return out;
}

}  // namespace lingraft
