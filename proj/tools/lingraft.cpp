#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "lingraft/checkpoint.hpp"
#include "lingraft/errors.hpp"
#include "lingraft/graft_plan.hpp"
#include "lingraft/pipeline.hpp"

namespace {

using namespace lingraft;
namespace fs = std::filesystem;

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> method;
  std::optional<std::string> criterion;
  std::optional<double> fraction;
  std::optional<double> eps_train;
  std::optional<double> eps_verify;
  std::optional<std::size_t> examples;
  std::optional<double> timeout;
  std::optional<int> workers;
  std::optional<int> epochs;
  std::optional<int> finetune_epochs;
  bool deterministic = false;
  bool clean_finetune = false;
};

void add_common(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config, "JSON experiment config");
  app->add_option("--seed", o.seed, "Experiment seed");
  app->add_option("--out", o.out, "Output directory");
  app->add_option("--method", o.method, "graft | graft-zero | sap | gap | random | none");
  app->add_option("--criterion", o.criterion, "gamma-decay | significance | instability");
  app->add_option("--fraction", o.fraction, "Share of hidden neurons to graft");
  app->add_option("--eps-train", o.eps_train, "Training perturbation radius");
  app->add_option("--eps-verify", o.eps_verify, "Verification perturbation radius");
  app->add_option("--examples", o.examples, "Number of test examples to evaluate");
  app->add_option("--timeout", o.timeout, "Per-example verification budget in seconds");
  app->add_option("--workers", o.workers, "Verification worker threads");
  app->add_option("--epochs", o.epochs, "Training epochs");
  app->add_option("--finetune-epochs", o.finetune_epochs, "Fine-tuning epochs");
  app->add_flag("--deterministic", o.deterministic, "Sequential run with a domain-count clock");
  app->add_flag("--clean-finetune", o.clean_finetune, "Fine-tune on clean inputs");
}

ExperimentConfig load_config(const Overrides& o) {
  ExperimentConfig cfg;
  if (!o.config.empty()) {
    nlohmann::json doc;
    try {
      doc = read_json_file(o.config);
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
    cfg = config_from_json(doc);
  }
  try {
    if (o.seed) cfg.seed = *o.seed;
    if (o.out) cfg.output_dir = *o.out;
    if (o.method) cfg.method = parse_method(*o.method);
    if (o.criterion) cfg.criterion = parse_criterion(*o.criterion);
  } catch (const UsageError& e) {
    throw ConfigError(e.what());
  }
  if (o.fraction) cfg.fraction = *o.fraction;
  if (o.eps_train) cfg.eps_train = *o.eps_train;
  if (o.eps_verify) cfg.eps_verify = *o.eps_verify;
  if (o.examples) cfg.verify.examples = *o.examples;
  if (o.timeout) cfg.verify.bab.budget.time_limit = *o.timeout;
  if (o.workers) cfg.verify.workers = *o.workers;
  if (o.epochs) cfg.train.epochs = *o.epochs;
  if (o.finetune_epochs) cfg.finetune.epochs = *o.finetune_epochs;
  if (o.deterministic) cfg.deterministic = true;
  if (o.clean_finetune) cfg.adversarial_finetune = false;
  validate(cfg);
  return cfg;
}

fs::path prepare_output(const ExperimentConfig& cfg) {
  const fs::path dir = cfg.output_dir;
  fs::create_directories(dir);
  return dir;
}

void print_report(const MetricsReport& rep) {
  std::cout << "method " << rep.method << "  UNR " << rep.unr << "%  VA " << rep.va << "%  SA " << rep.sa
            << "%  RA " << rep.ra << "%  time " << rep.mean_time << "s\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Linearity grafting and robustness verification for ReLU classifiers"};
  app.require_subcommand(1);
  Overrides o;
  std::string net_path;
  std::string scores_path;
  std::string verdicts_path;

  auto* train_cmd = app.add_subcommand("train", "Train the base network");
  auto* attack_cmd = app.add_subcommand("attack", "PGD attack on the evaluation examples");
  auto* score_cmd = app.add_subcommand("score", "Instability and significance scores");
  auto* graft_cmd = app.add_subcommand("graft", "Select neurons and graft linear activations");
  auto* finetune_cmd = app.add_subcommand("finetune", "Fine-tune a grafted network");
  auto* verify_cmd = app.add_subcommand("verify", "Complete verification of the evaluation examples");
  auto* report_cmd = app.add_subcommand("report", "Write metrics from a verdict file");
  auto* pipeline_cmd = app.add_subcommand("pipeline", "train, score, graft, finetune, verify, report");
  for (auto* cmd : {train_cmd, attack_cmd, score_cmd, graft_cmd, finetune_cmd, verify_cmd, report_cmd, pipeline_cmd}) {
    add_common(cmd, o);
  }
  for (auto* cmd : {attack_cmd, score_cmd, graft_cmd, finetune_cmd, verify_cmd}) {
    cmd->add_option("--net", net_path, "Network checkpoint")->required()->check(CLI::ExistingFile);
  }
  report_cmd->add_option("--net", net_path, "Network checkpoint the verdicts belong to")
      ->required()
      ->check(CLI::ExistingFile);
  graft_cmd->add_option("--scores", scores_path, "Scores from the score command")->check(CLI::ExistingFile);
  report_cmd->add_option("--verdicts", verdicts_path, "verdicts.json from the verify command")
      ->required()
      ->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  ExperimentConfig cfg;
  try {
    cfg = load_config(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  }

  try {
    if (pipeline_cmd->parsed()) {
      print_report(run_pipeline(cfg));
      return 0;
    }
    const fs::path dir = prepare_output(cfg);
    write_json_file(config_to_json(cfg), dir / "config.json");

    if (report_cmd->parsed()) {
      const auto results = results_from_json(read_json_file(verdicts_path));
      const Network net = load_network(net_path);
      MetricsReport rep = summarize(results, net, cfg.verify.bab.budget.time_limit);
      rep.method = to_string(cfg.method);
      report(rep, dir);
      print_report(rep);
      return 0;
    }

    const DataSplit data = load_dataset(cfg.data);

    if (train_cmd->parsed()) {
      std::vector<EpochRecord> log;
      const Network net = train_stage(cfg, data.train, &log);
      save_network(net, dir / "base.json");
      write_training_log(log, dir / "train_log.csv");
      std::cout << "train accuracy " << standard_accuracy(net, data.train) << "%  test accuracy "
                << standard_accuracy(net, data.test) << "%\n";
      return 0;
    }

    const Network net = load_network(net_path);

    if (attack_cmd->parsed()) {
      const std::size_t k = std::min(cfg.verify.examples, static_cast<std::size_t>(data.test.size()));
      const Dataset eval = data.test.head(static_cast<Eigen::Index>(k));
      AttackConfig a = cfg.attack;
      a.eps = cfg.eps_verify;
      a.clip = cfg.clip;
      a.seed = cfg.seed;
      nlohmann::json doc = {{"examples", k},
                            {"sa", standard_accuracy(net, eval)},
                            {"ra", robust_accuracy(net, eval, a)}};
      write_json_file(doc, dir / "attack.json");
      std::cout << "SA " << doc["sa"] << "%  RA " << doc["ra"] << "%\n";
      return 0;
    }
    if (score_cmd->parsed()) {
      write_json_file(scores_to_json(score_stage(cfg, net, data.train)), dir / "scores.json");
      return 0;
    }
    if (graft_cmd->parsed()) {
      std::optional<NeuronScore> scores;
      if (cfg.method == GraftMethod::Graft || cfg.method == GraftMethod::GraftZero) {
        if (scores_path.empty()) {
          scores = score_stage(cfg, net, data.train);
        } else {
          const auto doc = read_json_file(scores_path);
          scores = NeuronScore{doc.at("unstable_count").get<std::vector<std::int64_t>>(),
                               doc.at("significance").get<std::vector<double>>(),
                               doc.at("r_u").get<std::vector<double>>(), doc.at("r_s").get<std::vector<double>>()};
        }
      }
      const GraftPlan plan = select_stage(cfg, net, data.train, scores ? &*scores : nullptr);
      write_json_file(plan_to_json(plan), dir / "plan.json");
      save_network(apply_graft(net, plan), dir / "grafted.json");
      std::cout << "grafted " << plan.neurons.size() << " of " << net.num_hidden_neurons() << " neurons\n";
      return 0;
    }
    if (finetune_cmd->parsed()) {
      std::vector<EpochRecord> log;
      const Network tuned = finetune_stage(cfg, net, data.train, &log);
      save_network(tuned, dir / "final.json");
      write_training_log(log, dir / "finetune_log.csv");
      return 0;
    }
    if (verify_cmd->parsed()) {
      const auto results = evaluate_stage(cfg, net, data.test);
      write_json_file(results_to_json(results), dir / "verdicts.json");
      MetricsReport rep = summarize(results, net, cfg.verify.bab.budget.time_limit);
      rep.method = to_string(cfg.method);
      print_report(rep);
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const StageError& e) {
    std::cerr << "stage failed: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
