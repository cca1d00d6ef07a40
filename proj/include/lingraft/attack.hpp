#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>

#include "lingraft/bounds.hpp"
#include "lingraft/network.hpp"

namespace lingraft {

struct AttackConfig {
  double eps = 0.1;
  int steps = 20;
  double step_size = 0.025;
  int restarts = 2;
  std::optional<ClipRange> clip = ClipRange{};
  std::uint64_t seed = 0;
};

// Throws DomainError on eps < 0, steps < 1 or restarts < 1.
void validate(const AttackConfig& cfg);

// Signed-gradient PGD on the worst logit margin. Returns the first input in
// the eps-ball (and clip range) that is misclassified, if one is found.
std::optional<Vector> pgd_attack(const Network& net, const Vector& x0, int label, const AttackConfig& cfg);

// Signed-gradient descent on spec(f(x)) inside `box`; returns the first
// point with spec(f(x)) < 0.
std::optional<Vector> pgd_falsify(const Network& net, const LinearFunctional& spec, const Box& box, int steps,
                                  int restarts, double step_size, std::mt19937_64& rng);

// Batched PGD that ascends the cross-entropy loss; one example per column.
Matrix pgd_perturb_batch(const Network& net, const Matrix& x, std::span<const int> labels, const AttackConfig& cfg,
                         std::mt19937_64& rng);

}  // namespace lingraft
