#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "lingraft/attack.hpp"
#include "lingraft/bounds.hpp"
#include "lingraft/dataset.hpp"
#include "lingraft/network.hpp"

namespace lingraft {

struct RegularizerWeights {
  double rs = 0.0;  // ReLU-stability surrogate
  double l1 = 0.0;  // l1 on weights
};

enum class LrSchedule { StepDecay, Cosine };

struct TrainConfig {
  int epochs = 20;
  int batch_size = 128;
  double learning_rate = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  LrSchedule schedule = LrSchedule::StepDecay;
  std::vector<int> milestones{100, 150};
  double decay_factor = 0.1;
  std::uint64_t seed = 0;
  RegularizerWeights regularizer;
  // Radius of the boxes whose interval bounds feed the stability term.
  double regularizer_eps = 0.0;
};

struct FinetuneConfig {
  double graft_learning_rate = 0.01;
  double weight_learning_rate = 0.001;
  int epochs = 10;
  bool tune_weights = true;
  int batch_size = 128;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 0;
};

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;
  double standard_accuracy = 0.0;  // percent on the holdout
  double robust_accuracy = 0.0;    // percent on the holdout under `probe`
};

// Optional per-epoch evaluation on a holdout set.
struct TrainMonitor {
  const Dataset* holdout = nullptr;
  std::optional<AttackConfig> probe;
  std::vector<EpochRecord>* log = nullptr;
};

// SGD with momentum and weight decay on cross-entropy; with `adversarial`,
// every batch is replaced by its PGD perturbation first.
Network train(Network net, const Dataset& data, const TrainConfig& cfg,
              const std::optional<AttackConfig>& adversarial = std::nullopt, const TrainMonitor& monitor = {});

// Two learning-rate groups (graft slopes/intercepts vs weights/biases) under
// cosine annealing. Weights stay bit-identical when tune_weights is false.
Network finetune_grafted(Network net, const Dataset& data, const FinetuneConfig& cfg,
                         const std::optional<AttackConfig>& adversarial = std::nullopt,
                         const TrainMonitor& monitor = {});

struct GradualGraftConfig {
  FinetuneConfig finetune;
  double eps = 0.1;
  std::optional<ClipRange> clip = ClipRange{};
  BoundOptions bounds;
  Eigen::Index scoring_examples = 512;
  double init_slope = 0.25;
  double init_intercept = 0.0;
};

// Grafts a cubically front-loaded share of `fraction` at each of the first
// epochs/2 epochs (rescoring before every increment), fine-tuning throughout.
Network gradual_graft(Network net, const Dataset& data, double fraction, const GradualGraftConfig& cfg,
                      const std::optional<AttackConfig>& adversarial = std::nullopt);

// Interval bounds for a batch of l-inf boxes, kept per layer for the
// regulariser. in_lower/in_upper[k] bound the input of layer k.
struct BatchIntervals {
  std::vector<Matrix> in_lower;
  std::vector<Matrix> in_upper;
  std::vector<Matrix> pre_lower;
  std::vector<Matrix> pre_upper;
};

BatchIntervals batch_intervals(const Network& net, const Matrix& x, double eps, std::optional<ClipRange> clip);

// base + rs * mean_examples( sum_unstable(-l*u) / N ) + l1 * sum |W|.
double regularized_loss(double base_loss, const Network& net, const BatchIntervals& bounds,
                        const RegularizerWeights& weights);

// Adds the regulariser's parameter gradient. Bounds entering a layer are
// treated as constants; only that layer's own weights and bias receive the
// stability gradient.
void add_regularizer_gradient(const Network& net, const BatchIntervals& bounds, const RegularizerWeights& weights,
                              GradientBundle& grads);

// Zeroes every weight with |w| < threshold; biases untouched.
Network small_weight_prune(Network net, double threshold);

// Accuracy in percent.
double standard_accuracy(const Network& net, const Dataset& data);
double robust_accuracy(const Network& net, const Dataset& data, const AttackConfig& attack);

void write_training_log(const std::vector<EpochRecord>& log, const std::filesystem::path& path);

}  // namespace lingraft
