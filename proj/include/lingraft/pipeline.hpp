#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lingraft/attack.hpp"
#include "lingraft/dataset.hpp"
#include "lingraft/grafting.hpp"
#include "lingraft/training.hpp"
#include "lingraft/verifier.hpp"

namespace lingraft {

// Invalid or inconsistent experiment configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A pipeline stage failed; `stage()` names it.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct DatasetSpec {
  std::string kind = "idx";  // idx | csv | synthetic
  std::string train_images = "data/mnist5k/train-images-idx3-ubyte";
  std::string train_labels = "data/mnist5k/train-labels-idx1-ubyte";
  std::string test_images = "data/mnist5k/t10k-images-idx3-ubyte";
  std::string test_labels = "data/mnist5k/t10k-labels-idx1-ubyte";
  std::string train_csv;
  std::string test_csv;
  std::string generator = "moons";  // moons | blobs
  std::size_t train_size = 1000;
  std::size_t test_size = 200;
  double noise = 0.1;
  int classes = 2;
  // Dataset seed for the synthetic generator; the test split uses seed + 1.
  std::uint64_t seed = 7;
  // Use only the first n training examples (0 = all).
  std::size_t train_limit = 0;
};

enum class GraftMethod { Graft, GraftZero, SAP, GAP, Random, None };

GraftMethod parse_method(const std::string& name);
std::string to_string(GraftMethod m);

// How grafting ranks neurons: the decaying gamma schedule, significance
// alone (gamma = 0), or instability first (very large gamma).
enum class SelectionCriterion { GammaDecay, Significance, Instability };

SelectionCriterion parse_criterion(const std::string& name);
std::string to_string(SelectionCriterion c);

struct VerifyConfig {
  std::size_t examples = 100;
  BabConfig bab;
  int workers = 1;
};

struct ExperimentConfig {
  DatasetSpec data;
  std::vector<int> widths{784, 128, 128, 128, 10};
  double eps_train = 0.1;
  double eps_verify = 0.1;
  // Input domain shared by attacks and verification; nullopt = unbounded.
  std::optional<ClipRange> clip = ClipRange{};
  double fraction = 0.5;
  GraftMethod method = GraftMethod::Graft;
  SelectionCriterion criterion = SelectionCriterion::GammaDecay;
  bool gradual = false;
  double init_slope = 0.25;
  double init_intercept = 0.0;
  std::size_t scoring_examples = 512;
  BoundOptions scoring_bounds{.refine_intermediate = true};

  TrainConfig train;
  bool adversarial_train = true;
  AttackConfig train_attack{.eps = 0.1, .steps = 10, .step_size = 0.025, .restarts = 1};
  FinetuneConfig finetune;
  bool adversarial_finetune = true;
  AttackConfig attack{.eps = 0.1, .steps = 20, .step_size = 0.025, .restarts = 2};

  VerifyConfig verify;
  // Skip training and start from this checkpoint.
  std::string checkpoint;
  std::string output_dir = "out";
  std::uint64_t seed = 0;
  bool deterministic = false;
};

// Throws ConfigError on unknown keys, wrong types or violated invariants.
ExperimentConfig config_from_json(const nlohmann::json& doc);
nlohmann::json config_to_json(const ExperimentConfig& cfg);
void validate(const ExperimentConfig& cfg);

struct DataSplit {
  Dataset train;
  Dataset test;
};

DataSplit load_dataset(const DatasetSpec& spec);

// Per-example outcome on the evaluation set.
struct ExampleResult {
  std::size_t index = 0;
  int label = 0;
  bool correct = false;
  bool robust = false;  // correct and the PGD attack failed
  VerdictStatus status = VerdictStatus::Timeout;
  double bound = 0.0;
  double time = 0.0;
  std::size_t branches = 0;
  std::size_t unstable = 0;  // unstable ReLUs under the root bounds
  bool verified_run = false;  // false when the clean input was misclassified
};

struct CurvePoint {
  double threshold = 0.0;
  std::size_t verified = 0;
};

struct MetricsReport {
  std::string method;
  double unr = 0.0;
  double va = 0.0;
  double sa = 0.0;
  double ra = 0.0;
  double mean_time = 0.0;
  std::optional<double> test_sa;  // full test split, when computed
  std::size_t hidden_neurons = 0;
  std::size_t grafted = 0;
  std::vector<ExampleResult> examples;
  std::vector<CurvePoint> curve;
};

// Stages, reusable on their own by the command-line tool.
Network train_stage(const ExperimentConfig& cfg, const Dataset& train, std::vector<EpochRecord>* log = nullptr);
NeuronScore score_stage(const ExperimentConfig& cfg, const Network& net, const Dataset& train);
// Selection for every method but None. `scores` is required for graft and graft-zero.
GraftPlan select_stage(const ExperimentConfig& cfg, const Network& net, const Dataset& train,
                       const NeuronScore* scores);
Network finetune_stage(const ExperimentConfig& cfg, const Network& grafted, const Dataset& train,
                       std::vector<EpochRecord>* log = nullptr);
std::vector<ExampleResult> evaluate_stage(const ExperimentConfig& cfg, const Network& net, const Dataset& test);

// 1, 2, 5, 10, 30, 60, 120, 300, 600, ... below the budget, then the budget.
std::vector<double> curve_thresholds(double budget);
MetricsReport summarize(const std::vector<ExampleResult>& results, const Network& net, double budget);

nlohmann::json report_to_json(const MetricsReport& report);
MetricsReport report_from_json(const nlohmann::json& doc);
nlohmann::json results_to_json(const std::vector<ExampleResult>& results);
std::vector<ExampleResult> results_from_json(const nlohmann::json& doc);

// metrics.json, metrics.csv and curve.csv in `dir`.
void report(const MetricsReport& report, const std::filesystem::path& dir);

// Full run; artefacts land in cfg.output_dir as each stage finishes.
MetricsReport run_pipeline(const ExperimentConfig& cfg);

}  // namespace lingraft
