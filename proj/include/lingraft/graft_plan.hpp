#pragma once

#include <vector>

#include "lingraft/network.hpp"

namespace lingraft {

struct GammaStep {
  double fraction = 0.0;  // share of all hidden neurons picked in this batch
  double gamma = 0.0;

  bool operator==(const GammaStep&) const = default;
};

using GammaSchedule = std::vector<GammaStep>;

// Which neurons get a trainable linear activation and how it starts out.
struct GraftPlan {
  std::vector<NeuronId> neurons;  // selection order
  GammaSchedule schedule;
  double init_slope = 0.25;
  double init_intercept = 0.0;

  bool operator==(const GraftPlan&) const = default;
};

// Returns a copy of `net` whose planned neurons carry
// GraftedLinear(init_slope, init_intercept). Throws UsageError for invalid,
// duplicated or already-grafted ids.
Network apply_graft(const Network& net, const GraftPlan& plan);

}  // namespace lingraft
