#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lingraft/bounds.hpp"
#include "lingraft/graft_plan.hpp"
#include "lingraft/network.hpp"

namespace lingraft {

// Per hidden neuron raw statistics and their rank-normalised scores.
struct NeuronScore {
  std::vector<std::int64_t> unstable_count;
  std::vector<double> significance;
  std::vector<double> r_u;  // 1 = most often unstable
  std::vector<double> r_s;  // 1 = most significant
};

// Ascending ranks mapped to [0, 1]; tied values share their mean rank.
std::vector<double> rank_normalize(std::span<const double> raw);

struct InstabilityScores {
  std::vector<std::int64_t> counts;
  std::vector<double> r_u;
};

InstabilityScores instability_scores(const Network& net, const Matrix& inputs, double eps,
                                     std::optional<ClipRange> clip = std::nullopt,
                                     const BoundOptions& options = {});

struct SignificanceScores {
  std::vector<double> raw;  // mean |d loss / d post-activation|
  std::vector<double> r_s;
};

SignificanceScores significance_scores(const Network& net, const Matrix& inputs, std::span<const int> labels);

// Mean |post-activation| per hidden neuron (the SAP ranking statistic).
std::vector<double> mean_activation_magnitude(const Network& net, const Matrix& inputs);

NeuronScore combine_scores(const InstabilityScores& instability, const SignificanceScores& significance);

// Splits `fraction` into ceil(fraction / 0.05) equal batches with gamma
// decaying linearly from 2 to 0 (a single batch keeps gamma = 2).
GammaSchedule default_gamma_schedule(double fraction);

// Number of neurons covered by `fraction` of n, rounded up.
std::size_t fraction_count(double fraction, std::size_t n);

// Picks ceil(fraction * N) ReLU neurons batch by batch, each batch ranked by
// gamma * r_u - r_s (ties: higher r_u, then lower id).
GraftPlan select_neurons(const Network& net, const NeuronScore& scores, double fraction,
                         const GammaSchedule& schedule, double init_slope = 0.25, double init_intercept = 0.0);

enum class BaselineMethod { SAP, GAP, Random };

BaselineMethod parse_baseline(const std::string& name);

struct BaselineInputs {
  const Matrix& inputs;
  std::span<const int> labels;
};

// Activation-pruning style selections; the returned plan has an empty schedule.
GraftPlan baseline_select(BaselineMethod method, const Network& net, const BaselineInputs& data, double fraction,
                          std::uint64_t seed, double init_slope = 0.0, double init_intercept = 0.0);

nlohmann::json plan_to_json(const GraftPlan& plan);
GraftPlan plan_from_json(const nlohmann::json& doc);

nlohmann::json scores_to_json(const NeuronScore& scores);

}  // namespace lingraft
