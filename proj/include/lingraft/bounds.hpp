#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "lingraft/network.hpp"

namespace lingraft {

// Axis-aligned input region.
struct Box {
  Vector lower;
  Vector upper;

  Eigen::Index dim() const { return lower.size(); }
  Vector center() const { return 0.5 * (lower + upper); }
  bool contains(const Vector& x, double tol = 0.0) const;
  Vector project(const Vector& x) const { return x.cwiseMax(lower).cwiseMin(upper); }
};

struct ClipRange {
  double low = 0.0;
  double high = 1.0;
};

// l-inf ball of radius eps around x0, optionally intersected with [low, high].
Box input_region(const Vector& x0, double eps, std::optional<ClipRange> clip = std::nullopt);

// Pre-activation bounds for every layer; the last entry bounds the logits.
struct LayerBounds {
  std::vector<Vector> lower;
  std::vector<Vector> upper;
};

enum class Split : std::uint8_t { Free, ForcedActive, ForcedInactive };

// One entry per hidden neuron (flat NeuronId order).
using SplitAssignment = std::vector<Split>;

SplitAssignment free_split(const Network& net);
std::size_t split_depth(const SplitAssignment& split);

// Linear functional c . logits + d.
struct LinearFunctional {
  Vector coeffs;
  double constant = 0.0;

  double operator()(const Vector& logits) const { return coeffs.dot(logits) + constant; }
};

// Interval bound propagation. Returns nullopt when a forced split contradicts
// the propagated interval (the subdomain is empty).
std::optional<LayerBounds> ibp(const Network& net, const Box& box, const SplitAssignment& split);

struct BoundOptions {
  // Tighten every intermediate layer with a backward linear pass and keep the
  // intersection with the interval bound.
  bool refine_intermediate = false;
};

// Intermediate bounds for a subdomain. `parent` must hold bounds of an
// enclosing subdomain: layers before `first_changed_layer` are copied from it
// and later layers are intersected with it.
std::optional<LayerBounds> compute_bounds(const Network& net, const Box& box, const SplitAssignment& split,
                                          const BoundOptions& options,
                                          const LayerBounds* parent = nullptr,
                                          std::size_t first_changed_layer = 0);

// Lower bound of spec(f(x)) over the split-restricted box, via backward
// linear relaxation. Returns +inf for an infeasible split. Never looser than
// the interval bound implied by the last layer of `inter`.
double crown_lower_bound(const Network& net, const Box& box, const SplitAssignment& split,
                         const LayerBounds& inter, const LinearFunctional& spec);

// Bound of a child subdomain: the child's own bound, or the enclosing
// parent's bound when that is tighter.
double subdomain_lower_bound(const Network& net, const Box& box, const SplitAssignment& split,
                             const LayerBounds& inter, const LinearFunctional& spec, double parent_bound);

// Backward relaxation only (no interval fallback); exposed for tests.
double crown_backward_bound(const Network& net, const Box& box, const SplitAssignment& split,
                            const LayerBounds& inter, const LinearFunctional& spec);

// Interval lower bound of spec over the last layer of `inter`.
double interval_spec_bound(const LayerBounds& inter, const LinearFunctional& spec);

// Slopes/intercepts of the two relaxation lines of one neuron.
struct Relaxation {
  double lower_slope = 0.0;
  double lower_intercept = 0.0;
  double upper_slope = 0.0;
  double upper_intercept = 0.0;
};

enum class NeuronStatus : std::uint8_t { StableActive, StableInactive, Unstable, Grafted };

NeuronStatus classify(const Activation& act, Split split, double l, double u);
Relaxation relax(const Activation& act, Split split, double l, double u);

std::vector<NeuronStatus> classify_neurons(const Network& net, const LayerBounds& inter,
                                           const SplitAssignment& split);
std::size_t count_unstable(const std::vector<NeuronStatus>& status);

struct StabilityTally {
  std::vector<std::int64_t> unstable;
  std::vector<std::int64_t> active;
  std::vector<std::int64_t> inactive;
  std::int64_t examples = 0;
};

// Per-neuron stability counts over a dataset (one example per column).
StabilityTally tally_stability(const Network& net, const Matrix& inputs, double eps,
                               std::optional<ClipRange> clip = std::nullopt,
                               const BoundOptions& options = {});

// histogram[m] = number of neurons unstable on exactly m examples.
std::vector<std::int64_t> unstable_histogram(const StabilityTally& tally);

}  // namespace lingraft
