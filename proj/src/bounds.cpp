#include "lingraft/bounds.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "lingraft/errors.hpp"

namespace lingraft {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_box(const Network& net, const Box& box) {
  if (box.lower.size() != net.input_dim() || box.upper.size() != net.input_dim()) {
    throw StructuralError("box dimension does not match network input");
  }
}

void check_split(const Network& net, const SplitAssignment& split) {
  if (split.size() != net.num_hidden_neurons()) {
    throw StructuralError("split assignment must cover every hidden neuron");
  }
  for (NeuronId id = 0; id < split.size(); ++id) {
    if (split[id] != Split::Free && net.activation(id).is_grafted()) {
      throw UsageError("grafted neuron " + std::to_string(id) + " cannot be split");
    }
  }
}

// Post-activation interval of hidden layer h from its (already split-intersected) pre-activation bounds.
void post_interval(const Network& net, std::size_t h, const Vector& l, const Vector& u, Vector& lo, Vector& hi) {
  const auto& acts = net.activations(h);
  lo.resize(l.size());
  hi.resize(l.size());
  for (Eigen::Index j = 0; j < l.size(); ++j) {
    const auto& a = acts[j];
    if (a.is_grafted()) {
      const double p = a.slope * l[j] + a.intercept;
      const double q = a.slope * u[j] + a.intercept;
      lo[j] = a.slope >= 0.0 ? p : q;
      hi[j] = a.slope >= 0.0 ? q : p;
    } else {
      lo[j] = std::max(l[j], 0.0);
      hi[j] = std::max(u[j], 0.0);
    }
  }
}

// Sound bounds cross only on an empty region or through rounding when the
// neuron is constant there. Rounding-size crossings are widened back.
bool settle_crossings(Vector& l, Vector& u) {
  for (Eigen::Index j = 0; j < l.size(); ++j) {
    if (l[j] <= u[j]) continue;
    if (l[j] - u[j] > 1e-9 * (1.0 + std::max(std::abs(l[j]), std::abs(u[j])))) return false;
    std::swap(l[j], u[j]);
  }
  return true;
}

// Intersects layer h's pre-activation bounds with its forced half-lines.
bool apply_split(const Network& net, std::size_t h, const SplitAssignment& split, Vector& l, Vector& u) {
  const std::size_t base = net.layer_offset(h);
  for (Eigen::Index j = 0; j < l.size(); ++j) {
    switch (split[base + j]) {
      case Split::Free:
        break;
      case Split::ForcedActive:
        if (u[j] < 0.0) return false;
        l[j] = std::max(l[j], 0.0);
        break;
      case Split::ForcedInactive:
        if (l[j] > 0.0) return false;
        u[j] = std::min(u[j], 0.0);
        break;
    }
  }
  return true;
}

// Lower bounds of each row of coeffs . z_k + constant over the region, where
// z_k is the pre-activation of layer k. Relaxations for hidden layers below k
// come from `bounds`.
Vector backward_lower(const Network& net, const Box& box, const SplitAssignment& split, const LayerBounds& bounds,
                      std::size_t k, Matrix coeffs, Vector constant) {
  for (std::size_t i = k + 1; i-- > 0;) {
    const auto& layer = net.layer(i);
    constant.noalias() += coeffs * layer.bias;
    Matrix next = coeffs * layer.weight;
    coeffs = std::move(next);
    if (i == 0) break;
    const std::size_t h = i - 1;
    const auto& acts = net.activations(h);
    const std::size_t base = net.layer_offset(h);
    for (Eigen::Index j = 0; j < coeffs.cols(); ++j) {
      const Relaxation r = relax(acts[j], split[base + j], bounds.lower[h][j], bounds.upper[h][j]);
      for (Eigen::Index row = 0; row < coeffs.rows(); ++row) {
        const double v = coeffs(row, j);
        if (v >= 0.0) {
          constant[row] += v * r.lower_intercept;
          coeffs(row, j) = v * r.lower_slope;
        } else {
          constant[row] += v * r.upper_intercept;
          coeffs(row, j) = v * r.upper_slope;
        }
      }
    }
  }
  return coeffs.cwiseMax(0.0) * box.lower + coeffs.cwiseMin(0.0) * box.upper + constant;
}

bool split_consistent(const Network& net, const SplitAssignment& split, const LayerBounds& inter) {
  for (std::size_t h = 0; h < net.num_hidden_layers(); ++h) {
    const std::size_t base = net.layer_offset(h);
    for (Eigen::Index j = 0; j < inter.lower[h].size(); ++j) {
      const double l = inter.lower[h][j];
      const double u = inter.upper[h][j];
      if (l > u) return false;
      const Split s = split[base + j];
      if (s == Split::ForcedActive && u < 0.0) return false;
      if (s == Split::ForcedInactive && l > 0.0) return false;
    }
  }
  return true;
}

}  // namespace

bool Box::contains(const Vector& x, double tol) const {
  if (x.size() != lower.size()) return false;
  for (Eigen::Index j = 0; j < x.size(); ++j)
    if (x[j] < lower[j] - tol || x[j] > upper[j] + tol) return false;
  return true;
}

Box input_region(const Vector& x0, double eps, std::optional<ClipRange> clip) {
  if (!x0.allFinite()) throw DomainError("input centre is not finite");
  if (!(eps >= 0.0) || !std::isfinite(eps)) throw DomainError("eps must be finite and non-negative");
  Box box{x0.array() - eps, x0.array() + eps};
  if (clip) {
    if (clip->low > clip->high) throw DomainError("clip range has low > high");
    box.lower = box.lower.cwiseMax(clip->low);
    box.upper = box.upper.cwiseMin(clip->high);
    // A centre outside the clip range would leave an empty box.
    box.lower = box.lower.cwiseMin(box.upper);
  }
  return box;
}

SplitAssignment free_split(const Network& net) { return SplitAssignment(net.num_hidden_neurons(), Split::Free); }

std::size_t split_depth(const SplitAssignment& split) {
  return static_cast<std::size_t>(std::count_if(split.begin(), split.end(), [](Split s) { return s != Split::Free; }));
}

NeuronStatus classify(const Activation& act, Split split, double l, double u) {
  if (act.is_grafted()) return NeuronStatus::Grafted;
  if (split == Split::ForcedActive) return NeuronStatus::StableActive;
  if (split == Split::ForcedInactive) return NeuronStatus::StableInactive;
  // u == l == 0 lands here on purpose: it relaxes to the zero line.
  if (u <= 0.0) return NeuronStatus::StableInactive;
  if (l >= 0.0) return NeuronStatus::StableActive;
  return NeuronStatus::Unstable;
}

Relaxation relax(const Activation& act, Split split, double l, double u) {
  switch (classify(act, split, l, u)) {
    case NeuronStatus::Grafted:
      return {act.slope, act.intercept, act.slope, act.intercept};
    case NeuronStatus::StableActive:
      return {1.0, 0.0, 1.0, 0.0};
    case NeuronStatus::StableInactive:
      return {0.0, 0.0, 0.0, 0.0};
    case NeuronStatus::Unstable:
      break;
  }
  const double s = u / (u - l);
  return {s, 0.0, s, -s * l};
}

std::optional<LayerBounds> compute_bounds(const Network& net, const Box& box, const SplitAssignment& split,
                                          const BoundOptions& options, const LayerBounds* parent,
                                          std::size_t first_changed_layer) {
  check_box(net, box);
  check_split(net, split);
  const std::size_t depth = net.num_layers();
  LayerBounds out;
  out.lower.reserve(depth);
  out.upper.reserve(depth);

  Vector in_lo = box.lower;
  Vector in_hi = box.upper;
  for (std::size_t k = 0; k < depth; ++k) {
    const auto& layer = net.layer(k);
    if (parent != nullptr && k < first_changed_layer) {
      out.lower.push_back(parent->lower[k]);
      out.upper.push_back(parent->upper[k]);
    } else {
      const Matrix wp = layer.weight.cwiseMax(0.0);
      const Matrix wn = layer.weight.cwiseMin(0.0);
      Vector l = wp * in_lo + wn * in_hi + layer.bias;
      Vector u = wp * in_hi + wn * in_lo + layer.bias;
      if (options.refine_intermediate && k > 0) {
        const auto n = layer.out_dim();
        const Vector zero = Vector::Zero(n);
        const Vector cl = backward_lower(net, box, split, out, k, Matrix::Identity(n, n), zero);
        const Vector cu = -backward_lower(net, box, split, out, k, -Matrix::Identity(n, n), zero);
        l = l.cwiseMax(cl);
        u = u.cwiseMin(cu);
      }
      if (parent != nullptr) {
        l = l.cwiseMax(parent->lower[k]);
        u = u.cwiseMin(parent->upper[k]);
      }
      if (!settle_crossings(l, u)) return std::nullopt;
      if (k + 1 < depth && !apply_split(net, k, split, l, u)) return std::nullopt;
      out.lower.push_back(std::move(l));
      out.upper.push_back(std::move(u));
    }
    if (k + 1 < depth) post_interval(net, k, out.lower[k], out.upper[k], in_lo, in_hi);
  }
  return out;
}

std::optional<LayerBounds> ibp(const Network& net, const Box& box, const SplitAssignment& split) {
  return compute_bounds(net, box, split, BoundOptions{});
}

double interval_spec_bound(const LayerBounds& inter, const LinearFunctional& spec) {
  const Vector& l = inter.lower.back();
  const Vector& u = inter.upper.back();
  if (spec.coeffs.size() != l.size()) throw StructuralError("specification length does not match logits");
  return spec.coeffs.cwiseMax(0.0).dot(l) + spec.coeffs.cwiseMin(0.0).dot(u) + spec.constant;
}

double crown_backward_bound(const Network& net, const Box& box, const SplitAssignment& split,
                            const LayerBounds& inter, const LinearFunctional& spec) {
  check_box(net, box);
  check_split(net, split);
  if (spec.coeffs.size() != net.output_dim()) throw StructuralError("specification length does not match logits");
  if (!split_consistent(net, split, inter)) return kInf;
  const Vector r = backward_lower(net, box, split, inter, net.num_layers() - 1, Matrix(spec.coeffs.transpose()),
                                  Vector::Constant(1, spec.constant));
  return r[0];
}

double crown_lower_bound(const Network& net, const Box& box, const SplitAssignment& split,
                         const LayerBounds& inter, const LinearFunctional& spec) {
  const double backward = crown_backward_bound(net, box, split, inter, spec);
  if (backward == kInf) return kInf;
  return std::max(backward, interval_spec_bound(inter, spec));
}

double subdomain_lower_bound(const Network& net, const Box& box, const SplitAssignment& split,
                             const LayerBounds& inter, const LinearFunctional& spec, double parent_bound) {
  return std::max(crown_lower_bound(net, box, split, inter, spec), parent_bound);
}

std::vector<NeuronStatus> classify_neurons(const Network& net, const LayerBounds& inter,
                                           const SplitAssignment& split) {
  check_split(net, split);
  if (inter.lower.size() < net.num_hidden_layers()) throw StructuralError("bounds do not cover all hidden layers");
  std::vector<NeuronStatus> out(net.num_hidden_neurons());
  for (std::size_t h = 0; h < net.num_hidden_layers(); ++h) {
    const auto& acts = net.activations(h);
    const std::size_t base = net.layer_offset(h);
    for (std::size_t j = 0; j < acts.size(); ++j) {
      out[base + j] = classify(acts[j], split[base + j], inter.lower[h][j], inter.upper[h][j]);
    }
  }
  return out;
}

std::size_t count_unstable(const std::vector<NeuronStatus>& status) {
  return static_cast<std::size_t>(
      std::count(status.begin(), status.end(), NeuronStatus::Unstable));
}

StabilityTally tally_stability(const Network& net, const Matrix& inputs, double eps, std::optional<ClipRange> clip,
                               const BoundOptions& options) {
  if (inputs.cols() == 0) throw UsageError("stability tally needs a non-empty dataset");
  const std::size_t n = net.num_hidden_neurons();
  StabilityTally tally{std::vector<std::int64_t>(n, 0), std::vector<std::int64_t>(n, 0),
                       std::vector<std::int64_t>(n, 0), inputs.cols()};
  const SplitAssignment split = free_split(net);
  for (Eigen::Index c = 0; c < inputs.cols(); ++c) {
    const Box box = input_region(inputs.col(c), eps, clip);
    const auto bounds = compute_bounds(net, box, split, options);
    const auto status = classify_neurons(net, *bounds, split);
    for (std::size_t id = 0; id < n; ++id) {
      switch (status[id]) {
        case NeuronStatus::Unstable: ++tally.unstable[id]; break;
        case NeuronStatus::StableActive: ++tally.active[id]; break;
        case NeuronStatus::StableInactive: ++tally.inactive[id]; break;
        case NeuronStatus::Grafted: break;
      }
    }
  }
  return tally;
}

std::vector<std::int64_t> unstable_histogram(const StabilityTally& tally) {
  std::vector<std::int64_t> hist(static_cast<std::size_t>(tally.examples) + 1, 0);
  for (auto count : tally.unstable) ++hist[static_cast<std::size_t>(count)];
  return hist;
}

}  // namespace lingraft
