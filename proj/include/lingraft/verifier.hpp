#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lingraft/attack.hpp"
#include "lingraft/bounds.hpp"
#include "lingraft/network.hpp"

namespace lingraft {

// Margin property logit[label] - logit[target] > 0, as a linear functional.
struct Specification {
  LinearFunctional fn;
  int label = -1;
  int target = -1;
};

std::vector<Specification> build_specs(int num_classes, int label);

enum class VerdictStatus { Verified, Falsified, Timeout };

std::string to_string(VerdictStatus s);

struct VerdictRecord {
  VerdictStatus status = VerdictStatus::Timeout;
  double final_bound = 0.0;
  std::optional<Vector> counterexample;
  double elapsed = 0.0;
  std::size_t domains_explored = 0;
  std::size_t max_depth = 0;
};

// A branch-and-bound subproblem.
struct Domain {
  SplitAssignment split;
  LayerBounds inter;
  double bound = 0.0;
  std::size_t depth = 0;
};

struct VerifyBudget {
  double time_limit = 30.0;
  std::size_t max_domains = 200000;
  // Replace wall-clock time with domains_explored * seconds_per_domain so
  // verdicts and reported times are reproducible.
  bool deterministic = false;
  double seconds_per_domain = 0.005;
};

struct BabConfig {
  BoundOptions bounds{.refine_intermediate = true};
  VerifyBudget budget;
  int root_attack_steps = 20;
  int root_attack_restarts = 2;
  int domain_attack_steps = 10;
  int domain_attack_restarts = 1;
  // PGD step size as a fraction of the box's largest half-width.
  double attack_step_fraction = 0.25;
  std::uint64_t seed = 0;
};

// Complete verification of spec over box by splitting unstable ReLUs.
// `root_bounds` may carry precomputed free-split bounds for `box`.
VerdictRecord bab_verify(const Network& net, const Specification& spec, const Box& box, const BabConfig& cfg,
                         const LayerBounds* root_bounds = nullptr);

// Unstable neuron with the largest |l*u|/(u-l); lowest id on ties.
// Throws UsageError when the domain has no unstable neuron.
NeuronId branch_select(const Network& net, const SplitAssignment& split, const LayerBounds& inter);

// Exact minimum of spec over a subdomain in which no ReLU is unstable.
struct LinearLeafResult {
  bool feasible = false;
  double minimum = 0.0;
  Vector argmin;
};

LinearLeafResult solve_linear_leaf(const Network& net, const Box& box, const SplitAssignment& split,
                                   const LayerBounds& inter, const LinearFunctional& spec);

enum class OracleVerdict { Verified, Falsified, Undecided };

// Input-domain bisection with interval bounds; for input_dim <= 3 only.
// Undecided means some cell narrower than `tol` could be neither verified
// nor falsified.
OracleVerdict oracle_input_split(const Network& net, const LinearFunctional& spec, const Box& box, double tol);

// Per-example robustness: every margin spec against the true label must verify.
struct ExampleVerdict {
  VerdictStatus status = VerdictStatus::Timeout;
  double bound = 0.0;  // worst final bound over the specs examined
  double elapsed = 0.0;
  std::size_t domains_explored = 0;
  std::optional<Vector> counterexample;
};

ExampleVerdict verify_example(const Network& net, const Vector& x0, int label, double eps,
                              std::optional<ClipRange> clip, const BabConfig& cfg);

}  // namespace lingraft
