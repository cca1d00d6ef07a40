#include "lingraft/grafting.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "lingraft/errors.hpp"
#include "lingraft/loss.hpp"

namespace lingraft {

namespace {

constexpr double kBatchFraction = 0.05;
constexpr double kGammaStart = 2.0;
constexpr double kGammaEnd = 0.0;
constexpr Eigen::Index kChunk = 256;

std::vector<NeuronId> relu_neurons(const Network& net) {
  std::vector<NeuronId> ids;
  for (NeuronId id = 0; id < net.num_hidden_neurons(); ++id)
    if (!net.activation(id).is_grafted()) ids.push_back(id);
  return ids;
}

void require_scorable(const Network& net, Eigen::Index examples) {
  if (net.num_hidden_neurons() < 2) throw UsageError("scoring needs at least two hidden neurons");
  if (examples == 0) throw UsageError("scoring needs a non-empty dataset");
}

// Lowest statistic first, lowest id on ties.
std::vector<NeuronId> ascending_by(std::vector<NeuronId> ids, const std::vector<double>& stat) {
  std::stable_sort(ids.begin(), ids.end(), [&](NeuronId a, NeuronId b) { return stat[a] < stat[b]; });
  return ids;
}

}  // namespace

std::vector<double> rank_normalize(std::span<const double> raw) {
  const std::size_t n = raw.size();
  if (n < 2) throw UsageError("rank normalisation needs at least two values");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return raw[a] < raw[b]; });
  std::vector<double> out(n);
  const double denom = static_cast<double>(n - 1);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && raw[order[j + 1]] == raw[order[i]]) ++j;
    const double mean_rank = 0.5 * static_cast<double>(i + j);
    for (std::size_t k = i; k <= j; ++k) out[order[k]] = mean_rank / denom;
    i = j + 1;
  }
  return out;
}

InstabilityScores instability_scores(const Network& net, const Matrix& inputs, double eps,
                                     std::optional<ClipRange> clip, const BoundOptions& options) {
  require_scorable(net, inputs.cols());
  const StabilityTally tally = tally_stability(net, inputs, eps, clip, options);
  std::vector<double> raw(tally.unstable.begin(), tally.unstable.end());
  return {tally.unstable, rank_normalize(raw)};
}

SignificanceScores significance_scores(const Network& net, const Matrix& inputs, std::span<const int> labels) {
  require_scorable(net, inputs.cols());
  if (static_cast<Eigen::Index>(labels.size()) != inputs.cols()) throw StructuralError("label count mismatch");
  std::vector<double> sum(net.num_hidden_neurons(), 0.0);
  for (Eigen::Index start = 0; start < inputs.cols(); start += kChunk) {
    const Eigen::Index count = std::min(kChunk, inputs.cols() - start);
    const BatchTrace trace = forward_batch(net, inputs.middleCols(start, count));
    LossAndGrad lg = cross_entropy(trace.logits(), labels.subspan(start, count));
    lg.grad *= static_cast<double>(count);  // per-example loss, not the batch mean
    const GradientBundle g = backward_batch(net, trace, lg.grad);
    for (std::size_t h = 0; h < net.num_hidden_layers(); ++h) {
      const Vector col_sum = g.postact[h].cwiseAbs().rowwise().sum();
      const std::size_t base = net.layer_offset(h);
      for (Eigen::Index j = 0; j < col_sum.size(); ++j) sum[base + j] += col_sum[j];
    }
  }
  for (double& s : sum) s /= static_cast<double>(inputs.cols());
  auto r_s = rank_normalize(sum);
  return {std::move(sum), std::move(r_s)};
}

std::vector<double> mean_activation_magnitude(const Network& net, const Matrix& inputs) {
  require_scorable(net, inputs.cols());
  std::vector<double> sum(net.num_hidden_neurons(), 0.0);
  for (Eigen::Index start = 0; start < inputs.cols(); start += kChunk) {
    const Eigen::Index count = std::min(kChunk, inputs.cols() - start);
    const BatchTrace trace = forward_batch(net, inputs.middleCols(start, count));
    for (std::size_t h = 0; h < net.num_hidden_layers(); ++h) {
      const Vector col_sum = trace.inputs[h + 1].cwiseAbs().rowwise().sum();
      const std::size_t base = net.layer_offset(h);
      for (Eigen::Index j = 0; j < col_sum.size(); ++j) sum[base + j] += col_sum[j];
    }
  }
  for (double& s : sum) s /= static_cast<double>(inputs.cols());
  return sum;
}

NeuronScore combine_scores(const InstabilityScores& instability, const SignificanceScores& significance) {
  if (instability.counts.size() != significance.raw.size()) throw StructuralError("score vectors differ in length");
  return {instability.counts, significance.raw, instability.r_u, significance.r_s};
}

std::size_t fraction_count(double fraction, std::size_t n) {
  // The small slack keeps e.g. 0.05 * 100 from rounding up to 6.
  return static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
}

GammaSchedule default_gamma_schedule(double fraction) {
  if (!(fraction > 0.0) || fraction > 1.0) throw DomainError("graft fraction must lie in (0, 1]");
  const auto batches = static_cast<std::size_t>(std::ceil(fraction / kBatchFraction - 1e-9));
  GammaSchedule schedule;
  for (std::size_t b = 0; b < batches; ++b) {
    const double t = batches == 1 ? 0.0 : static_cast<double>(b) / static_cast<double>(batches - 1);
    schedule.push_back({fraction / static_cast<double>(batches), kGammaStart + t * (kGammaEnd - kGammaStart)});
  }
  return schedule;
}

GraftPlan select_neurons(const Network& net, const NeuronScore& scores, double fraction,
                         const GammaSchedule& schedule, double init_slope, double init_intercept) {
  const std::size_t n = net.num_hidden_neurons();
  if (scores.r_u.size() != n || scores.r_s.size() != n) throw StructuralError("scores do not match the network");
  if (!(fraction > 0.0) || fraction > 1.0) throw UsageError("graft fraction must lie in (0, 1]");
  double total = 0.0;
  for (const auto& step : schedule) total += step.fraction;
  if (std::abs(total - fraction) > 1e-9) throw UsageError("schedule increments must sum to the graft fraction");

  const std::vector<NeuronId> candidates = relu_neurons(net);
  const std::size_t target = fraction_count(fraction, n);
  if (target > candidates.size()) throw UsageError("graft fraction exceeds the remaining ReLU neurons");

  GraftPlan plan;
  plan.schedule = schedule;
  plan.init_slope = init_slope;
  plan.init_intercept = init_intercept;
  std::vector<bool> taken(n, false);
  for (const auto& step : schedule) {
    const std::size_t want = std::min(fraction_count(step.fraction, n), target - plan.neurons.size());
    std::vector<NeuronId> pool;
    for (NeuronId id : candidates)
      if (!taken[id]) pool.push_back(id);
    auto priority = [&](NeuronId id) { return step.gamma * scores.r_u[id] - scores.r_s[id]; };
    std::sort(pool.begin(), pool.end(), [&](NeuronId a, NeuronId b) {
      const double pa = priority(a);
      const double pb = priority(b);
      if (pa != pb) return pa > pb;
      if (scores.r_u[a] != scores.r_u[b]) return scores.r_u[a] > scores.r_u[b];
      return a < b;
    });
    for (std::size_t k = 0; k < want && k < pool.size(); ++k) {
      taken[pool[k]] = true;
      plan.neurons.push_back(pool[k]);
    }
  }
  if (plan.neurons.size() != target) throw UsageError("schedule does not cover the requested fraction");
  return plan;
}

BaselineMethod parse_baseline(const std::string& name) {
  if (name == "sap") return BaselineMethod::SAP;
  if (name == "gap") return BaselineMethod::GAP;
  if (name == "random") return BaselineMethod::Random;
  throw UsageError("unknown baseline method '" + name + "'");
}

GraftPlan baseline_select(BaselineMethod method, const Network& net, const BaselineInputs& data, double fraction,
                          std::uint64_t seed, double init_slope, double init_intercept) {
  if (!(fraction > 0.0) || fraction > 1.0) throw UsageError("graft fraction must lie in (0, 1]");
  const std::vector<NeuronId> candidates = relu_neurons(net);
  const std::size_t target = fraction_count(fraction, net.num_hidden_neurons());
  if (target > candidates.size()) throw UsageError("graft fraction exceeds the remaining ReLU neurons");

  std::vector<NeuronId> ranked;
  switch (method) {
    case BaselineMethod::SAP:
      ranked = ascending_by(candidates, mean_activation_magnitude(net, data.inputs));
      break;
    case BaselineMethod::GAP:
      ranked = ascending_by(candidates, significance_scores(net, data.inputs, data.labels).raw);
      break;
    case BaselineMethod::Random: {
      ranked = candidates;
      std::mt19937_64 rng(seed);
      std::shuffle(ranked.begin(), ranked.end(), rng);
      break;
    }
  }
  ranked.resize(target);
  return GraftPlan{std::move(ranked), {}, init_slope, init_intercept};
}

nlohmann::json plan_to_json(const GraftPlan& plan) {
  nlohmann::json schedule = nlohmann::json::array();
  for (const auto& s : plan.schedule) schedule.push_back({{"fraction", s.fraction}, {"gamma", s.gamma}});
  return {{"format", "lingraft-graft-plan"},
          {"neurons", plan.neurons},
          {"schedule", schedule},
          {"init_slope", plan.init_slope},
          {"init_intercept", plan.init_intercept}};
}

GraftPlan plan_from_json(const nlohmann::json& doc) {
  try {
    if (doc.at("format") != "lingraft-graft-plan") throw StructuralError("not a graft plan document");
    GraftPlan plan;
    plan.neurons = doc.at("neurons").get<std::vector<NeuronId>>();
    for (const auto& s : doc.at("schedule")) {
      plan.schedule.push_back({s.at("fraction").get<double>(), s.at("gamma").get<double>()});
    }
    plan.init_slope = doc.at("init_slope").get<double>();
    plan.init_intercept = doc.at("init_intercept").get<double>();
    return plan;
  } catch (const nlohmann::json::exception& e) {
    throw StructuralError(std::string("malformed graft plan: ") + e.what());
  }
}

nlohmann::json scores_to_json(const NeuronScore& scores) {
  return {{"unstable_count", scores.unstable_count},
          {"significance", scores.significance},
          {"r_u", scores.r_u},
          {"r_s", scores.r_s}};
}

}  // namespace lingraft
