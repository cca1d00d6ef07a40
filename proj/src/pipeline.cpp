#include "lingraft/pipeline.hpp"

#include <atomic>
#include <cmath>
#include <fstream>
#include <limits>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "lingraft/checkpoint.hpp"
#include "lingraft/errors.hpp"
#include "lingraft/graft_plan.hpp"
#include "lingraft/loss.hpp"

namespace lingraft {

using nlohmann::json;

namespace {

constexpr double kInstabilityGamma = 1e6;

// Seeds derived from the experiment seed, one stream per stage.
enum SeedStream : std::uint64_t { kInit = 0, kTrain = 1, kFinetune = 2, kAttack = 3, kVerify = 4, kBaseline = 5 };

std::uint64_t stream(const ExperimentConfig& cfg, SeedStream s) { return cfg.seed * 1000003ULL + s; }

// Reads one JSON object, remembering which keys were consumed so leftovers
// (usually typos) can be rejected.
class Section {
 public:
  Section(const json& doc, std::string path) : doc_(doc), path_(std::move(path)) {
    if (!doc_.is_object()) throw ConfigError(label() + " must be a JSON object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!doc_.contains(key)) return;
    try {
      out = doc_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("bad value for " + path_ + key + ": " + e.what());
    }
  }

  template <class T, class Parse>
  void get_enum(const char* key, T& out, Parse parse) {
    std::string name;
    seen_.insert(key);
    if (!doc_.contains(key)) return;
    get(key, name);
    try {
      out = parse(name);
    } catch (const UsageError& e) {
      throw ConfigError(path_ + key + ": " + e.what());
    }
  }

  std::optional<Section> child(const char* key) {
    seen_.insert(key);
    if (!doc_.contains(key)) return std::nullopt;
    return Section(doc_.at(key), path_ + key + ".");
  }

  void finish() const {
    for (const auto& [key, value] : doc_.items()) {
      if (!seen_.contains(key)) throw ConfigError("unknown config key " + path_ + key);
    }
  }

 private:
  std::string label() const { return path_.empty() ? "config" : path_.substr(0, path_.size() - 1); }

  const json& doc_;
  std::string path_;
  std::set<std::string> seen_;
};

LrSchedule parse_schedule(const std::string& s) {
  if (s == "step") return LrSchedule::StepDecay;
  if (s == "cosine") return LrSchedule::Cosine;
  throw UsageError("unknown schedule '" + s + "'");
}

std::string schedule_name(LrSchedule s) { return s == LrSchedule::Cosine ? "cosine" : "step"; }

void read_attack(Section s, AttackConfig& a) {
  s.get("steps", a.steps);
  s.get("step_size", a.step_size);
  s.get("restarts", a.restarts);
  s.finish();
}

json attack_json(const AttackConfig& a) {
  return {{"steps", a.steps}, {"step_size", a.step_size}, {"restarts", a.restarts}};
}

template <class F>
auto run_stage(const std::string& name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

AttackConfig attack_for(const ExperimentConfig& cfg, const AttackConfig& base, double eps, std::uint64_t seed) {
  AttackConfig a = base;
  a.eps = eps;
  a.clip = cfg.clip;
  a.seed = seed;
  return a;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

double finite_or_inf(const json& v) {
  return v.is_null() ? std::numeric_limits<double>::infinity() : v.get<double>();
}

VerdictStatus parse_status(const std::string& s) {
  if (s == "verified") return VerdictStatus::Verified;
  if (s == "falsified") return VerdictStatus::Falsified;
  if (s == "timeout") return VerdictStatus::Timeout;
  throw FormatError("unknown verdict '" + s + "'", 0);
}

}  // namespace

GraftMethod parse_method(const std::string& name) {
  if (name == "graft") return GraftMethod::Graft;
  if (name == "graft-zero") return GraftMethod::GraftZero;
  if (name == "sap") return GraftMethod::SAP;
  if (name == "gap") return GraftMethod::GAP;
  if (name == "random") return GraftMethod::Random;
  if (name == "none") return GraftMethod::None;
  throw UsageError("unknown method '" + name + "'");
}

std::string to_string(GraftMethod m) {
  switch (m) {
    case GraftMethod::Graft: return "graft";
    case GraftMethod::GraftZero: return "graft-zero";
    case GraftMethod::SAP: return "sap";
    case GraftMethod::GAP: return "gap";
    case GraftMethod::Random: return "random";
    case GraftMethod::None: return "none";
  }
  return "?";
}

SelectionCriterion parse_criterion(const std::string& name) {
  if (name == "gamma-decay") return SelectionCriterion::GammaDecay;
  if (name == "significance") return SelectionCriterion::Significance;
  if (name == "instability") return SelectionCriterion::Instability;
  throw UsageError("unknown selection criterion '" + name + "'");
}

std::string to_string(SelectionCriterion c) {
  switch (c) {
    case SelectionCriterion::GammaDecay: return "gamma-decay";
    case SelectionCriterion::Significance: return "significance";
    case SelectionCriterion::Instability: return "instability";
  }
  return "?";
}

ExperimentConfig config_from_json(const json& doc) {
  ExperimentConfig cfg;
  Section top(doc, "");
  if (auto d = top.child("data")) {
    auto& s = cfg.data;
    d->get("kind", s.kind);
    d->get("train_images", s.train_images);
    d->get("train_labels", s.train_labels);
    d->get("test_images", s.test_images);
    d->get("test_labels", s.test_labels);
    d->get("train_csv", s.train_csv);
    d->get("test_csv", s.test_csv);
    d->get("generator", s.generator);
    d->get("train_size", s.train_size);
    d->get("test_size", s.test_size);
    d->get("noise", s.noise);
    d->get("classes", s.classes);
    d->get("seed", s.seed);
    d->get("train_limit", s.train_limit);
    d->finish();
  }
  top.get("widths", cfg.widths);
  top.get("eps_train", cfg.eps_train);
  top.get("eps_verify", cfg.eps_verify);
  {
    json clip;
    top.get("clip", clip);
    if (clip.is_null() && doc.contains("clip")) {
      cfg.clip.reset();
    } else if (!clip.is_null()) {
      if (!clip.is_array() || clip.size() != 2) throw ConfigError("clip must be [low, high] or null");
      cfg.clip = ClipRange{clip[0].get<double>(), clip[1].get<double>()};
    }
  }
  top.get("fraction", cfg.fraction);
  top.get_enum("method", cfg.method, parse_method);
  top.get_enum("criterion", cfg.criterion, parse_criterion);
  top.get("gradual", cfg.gradual);
  top.get("init_slope", cfg.init_slope);
  top.get("init_intercept", cfg.init_intercept);
  top.get("scoring_examples", cfg.scoring_examples);
  top.get("scoring_refine", cfg.scoring_bounds.refine_intermediate);
  if (auto t = top.child("train")) {
    auto& c = cfg.train;
    t->get("epochs", c.epochs);
    t->get("batch_size", c.batch_size);
    t->get("learning_rate", c.learning_rate);
    t->get("momentum", c.momentum);
    t->get("weight_decay", c.weight_decay);
    t->get_enum("schedule", c.schedule, parse_schedule);
    t->get("milestones", c.milestones);
    t->get("decay_factor", c.decay_factor);
    t->get("rs", c.regularizer.rs);
    t->get("l1", c.regularizer.l1);
    t->get("adversarial", cfg.adversarial_train);
    if (auto a = t->child("attack")) read_attack(*a, cfg.train_attack);
    t->finish();
  }
  if (auto f = top.child("finetune")) {
    auto& c = cfg.finetune;
    f->get("graft_learning_rate", c.graft_learning_rate);
    f->get("weight_learning_rate", c.weight_learning_rate);
    f->get("epochs", c.epochs);
    f->get("tune_weights", c.tune_weights);
    f->get("batch_size", c.batch_size);
    f->get("momentum", c.momentum);
    f->get("weight_decay", c.weight_decay);
    f->get("adversarial", cfg.adversarial_finetune);
    f->finish();
  }
  if (auto a = top.child("attack")) read_attack(*a, cfg.attack);
  if (auto v = top.child("verify")) {
    auto& c = cfg.verify;
    v->get("examples", c.examples);
    v->get("workers", c.workers);
    v->get("timeout", c.bab.budget.time_limit);
    v->get("max_domains", c.bab.budget.max_domains);
    v->get("seconds_per_domain", c.bab.budget.seconds_per_domain);
    v->get("refine_intermediate", c.bab.bounds.refine_intermediate);
    v->get("root_attack_steps", c.bab.root_attack_steps);
    v->get("root_attack_restarts", c.bab.root_attack_restarts);
    v->get("domain_attack_steps", c.bab.domain_attack_steps);
    v->get("domain_attack_restarts", c.bab.domain_attack_restarts);
    v->finish();
  }
  top.get("checkpoint", cfg.checkpoint);
  top.get("output_dir", cfg.output_dir);
  top.get("seed", cfg.seed);
  top.get("deterministic", cfg.deterministic);
  top.finish();
  validate(cfg);
  return cfg;
}

json config_to_json(const ExperimentConfig& cfg) {
  const auto& d = cfg.data;
  const auto& t = cfg.train;
  const auto& f = cfg.finetune;
  const auto& v = cfg.verify;
  json train_attack = attack_json(cfg.train_attack);
  return {
      {"data",
       {{"kind", d.kind},
        {"train_images", d.train_images},
        {"train_labels", d.train_labels},
        {"test_images", d.test_images},
        {"test_labels", d.test_labels},
        {"train_csv", d.train_csv},
        {"test_csv", d.test_csv},
        {"generator", d.generator},
        {"train_size", d.train_size},
        {"test_size", d.test_size},
        {"noise", d.noise},
        {"classes", d.classes},
        {"seed", d.seed},
        {"train_limit", d.train_limit}}},
      {"widths", cfg.widths},
      {"eps_train", cfg.eps_train},
      {"eps_verify", cfg.eps_verify},
      {"clip", cfg.clip ? json::array({cfg.clip->low, cfg.clip->high}) : json(nullptr)},
      {"fraction", cfg.fraction},
      {"method", to_string(cfg.method)},
      {"criterion", to_string(cfg.criterion)},
      {"gradual", cfg.gradual},
      {"init_slope", cfg.init_slope},
      {"init_intercept", cfg.init_intercept},
      {"scoring_examples", cfg.scoring_examples},
      {"scoring_refine", cfg.scoring_bounds.refine_intermediate},
      {"train",
       {{"epochs", t.epochs},
        {"batch_size", t.batch_size},
        {"learning_rate", t.learning_rate},
        {"momentum", t.momentum},
        {"weight_decay", t.weight_decay},
        {"schedule", schedule_name(t.schedule)},
        {"milestones", t.milestones},
        {"decay_factor", t.decay_factor},
        {"rs", t.regularizer.rs},
        {"l1", t.regularizer.l1},
        {"adversarial", cfg.adversarial_train},
        {"attack", train_attack}}},
      {"finetune",
       {{"graft_learning_rate", f.graft_learning_rate},
        {"weight_learning_rate", f.weight_learning_rate},
        {"epochs", f.epochs},
        {"tune_weights", f.tune_weights},
        {"batch_size", f.batch_size},
        {"momentum", f.momentum},
        {"weight_decay", f.weight_decay},
        {"adversarial", cfg.adversarial_finetune}}},
      {"attack", attack_json(cfg.attack)},
      {"verify",
       {{"examples", v.examples},
        {"workers", v.workers},
        {"timeout", v.bab.budget.time_limit},
        {"max_domains", v.bab.budget.max_domains},
        {"seconds_per_domain", v.bab.budget.seconds_per_domain},
        {"refine_intermediate", v.bab.bounds.refine_intermediate},
        {"root_attack_steps", v.bab.root_attack_steps},
        {"root_attack_restarts", v.bab.root_attack_restarts},
        {"domain_attack_steps", v.bab.domain_attack_steps},
        {"domain_attack_restarts", v.bab.domain_attack_restarts}}},
      {"checkpoint", cfg.checkpoint},
      {"output_dir", cfg.output_dir},
      {"seed", cfg.seed},
      {"deterministic", cfg.deterministic},
  };
}

void validate(const ExperimentConfig& cfg) {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  const auto& d = cfg.data;
  require(d.kind == "idx" || d.kind == "csv" || d.kind == "synthetic", "data.kind must be idx, csv or synthetic");
  if (d.kind == "csv") require(!d.train_csv.empty() && !d.test_csv.empty(), "csv data needs train_csv and test_csv");
  if (d.kind == "synthetic") {
    require(d.generator == "moons" || d.generator == "blobs", "data.generator must be moons or blobs");
    require(d.train_size > 0 && d.test_size > 0, "synthetic sizes must be positive");
    require(d.noise >= 0.0, "data.noise must be non-negative");
  }
  require(cfg.widths.size() >= 3, "widths need input, at least one hidden layer and output");
  for (int w : cfg.widths) require(w > 0, "widths must be positive");
  require(cfg.eps_train >= 0.0 && cfg.eps_verify >= 0.0, "eps values must be non-negative");
  if (cfg.clip) require(cfg.clip->low <= cfg.clip->high, "clip low must not exceed high");
  if (cfg.method != GraftMethod::None) require(cfg.fraction > 0.0 && cfg.fraction <= 1.0, "fraction must lie in (0, 1]");
  require(!cfg.gradual || cfg.method == GraftMethod::Graft, "gradual grafting needs method graft");
  require(cfg.scoring_examples >= 1, "scoring_examples must be positive");

  const auto& t = cfg.train;
  require(t.epochs >= 1, "train.epochs must be at least 1");
  require(t.learning_rate > 0.0, "train.learning_rate must be positive");
  require(t.batch_size >= 1, "train.batch_size must be positive");
  require(t.regularizer.rs >= 0.0 && t.regularizer.l1 >= 0.0, "regulariser weights must be non-negative");
  const auto& f = cfg.finetune;
  require(f.epochs >= 1, "finetune.epochs must be at least 1");
  require(f.batch_size >= 1, "finetune.batch_size must be positive");
  require(f.graft_learning_rate >= 0.0 && f.weight_learning_rate >= 0.0,
          "finetune learning rates must be non-negative");
  for (const AttackConfig* a : {&cfg.train_attack, &cfg.attack}) {
    require(a->steps >= 1 && a->restarts >= 1, "attack steps and restarts must be at least 1");
    require(a->step_size > 0.0, "attack step_size must be positive");
  }
  const auto& v = cfg.verify;
  require(v.examples >= 1, "verify.examples must be positive");
  require(v.workers >= 1, "verify.workers must be positive");
  require(v.bab.budget.time_limit > 0.0, "verify.timeout must be positive");
  require(v.bab.budget.max_domains >= 1, "verify.max_domains must be positive");
  require(v.bab.budget.seconds_per_domain > 0.0, "verify.seconds_per_domain must be positive");
}

DataSplit load_dataset(const DatasetSpec& spec) {
  DataSplit out;
  if (spec.kind == "idx") {
    out.train = load_idx(spec.train_images, spec.train_labels);
    out.test = load_idx(spec.test_images, spec.test_labels);
  } else if (spec.kind == "csv") {
    out.train = load_csv(spec.train_csv);
    out.test = load_csv(spec.test_csv);
  } else if (spec.kind == "synthetic") {
    if (spec.generator == "blobs") {
      // Blob centres are drawn from the seed, so both splits come from one draw.
      const Dataset both = make_synthetic(SyntheticKind::Blobs, spec.train_size + spec.test_size, spec.seed,
                                          spec.noise, spec.classes);
      out.train = both.slice(0, static_cast<Eigen::Index>(spec.train_size));
      out.test = both.slice(static_cast<Eigen::Index>(spec.train_size), static_cast<Eigen::Index>(spec.test_size));
    } else {
      out.train = make_synthetic(SyntheticKind::TwoMoons, spec.train_size, spec.seed, spec.noise);
      out.test = make_synthetic(SyntheticKind::TwoMoons, spec.test_size, spec.seed + 1, spec.noise);
    }
  } else {
    throw ConfigError("unknown data.kind '" + spec.kind + "'");
  }
  if (spec.train_limit > 0) out.train = out.train.head(static_cast<Eigen::Index>(spec.train_limit));
  const int classes = std::max(out.train.num_classes, out.test.num_classes);
  out.train.num_classes = out.test.num_classes = classes;
  return out;
}

Network train_stage(const ExperimentConfig& cfg, const Dataset& train, std::vector<EpochRecord>* log) {
  std::mt19937_64 rng(stream(cfg, kInit));
  Network net = Network::random(cfg.widths, rng);
  TrainConfig tc = cfg.train;
  tc.seed = stream(cfg, kTrain);
  tc.regularizer_eps = cfg.eps_train;
  std::optional<AttackConfig> adv;
  if (cfg.adversarial_train && cfg.eps_train > 0.0) adv = attack_for(cfg, cfg.train_attack, cfg.eps_train, 0);
  TrainMonitor monitor;
  monitor.log = log;
  return lingraft::train(std::move(net), train, tc, adv, monitor);
}

NeuronScore score_stage(const ExperimentConfig& cfg, const Network& net, const Dataset& train) {
  const Dataset subset = train.head(static_cast<Eigen::Index>(cfg.scoring_examples));
  return combine_scores(instability_scores(net, subset.inputs, cfg.eps_verify, cfg.clip, cfg.scoring_bounds),
                        significance_scores(net, subset.inputs, subset.labels));
}

GraftPlan select_stage(const ExperimentConfig& cfg, const Network& net, const Dataset& train,
                       const NeuronScore* scores) {
  const Dataset subset = train.head(static_cast<Eigen::Index>(cfg.scoring_examples));
  const BaselineInputs inputs{subset.inputs, subset.labels};
  switch (cfg.method) {
    case GraftMethod::Graft:
    case GraftMethod::GraftZero: {
      if (scores == nullptr) throw UsageError("grafting selection needs neuron scores");
      GammaSchedule schedule;
      switch (cfg.criterion) {
        case SelectionCriterion::GammaDecay: schedule = default_gamma_schedule(cfg.fraction); break;
        case SelectionCriterion::Significance: schedule = {{cfg.fraction, 0.0}}; break;
        case SelectionCriterion::Instability: schedule = {{cfg.fraction, kInstabilityGamma}}; break;
      }
      const bool zero = cfg.method == GraftMethod::GraftZero;
      return select_neurons(net, *scores, cfg.fraction, schedule, zero ? 0.0 : cfg.init_slope,
                            zero ? 0.0 : cfg.init_intercept);
    }
    case GraftMethod::SAP:
      return baseline_select(BaselineMethod::SAP, net, inputs, cfg.fraction, stream(cfg, kBaseline), 0.0, 0.0);
    case GraftMethod::GAP:
      return baseline_select(BaselineMethod::GAP, net, inputs, cfg.fraction, stream(cfg, kBaseline), 0.0, 0.0);
    case GraftMethod::Random:
      return baseline_select(BaselineMethod::Random, net, inputs, cfg.fraction, stream(cfg, kBaseline),
                             cfg.init_slope, cfg.init_intercept);
    case GraftMethod::None: break;
  }
  throw UsageError("method none selects no neurons");
}

namespace {

FinetuneConfig finetune_config(const ExperimentConfig& cfg) {
  FinetuneConfig fc = cfg.finetune;
  fc.seed = stream(cfg, kFinetune);
  // Pruning methods keep their zeroed activations fixed.
  if (cfg.method == GraftMethod::GraftZero || cfg.method == GraftMethod::SAP || cfg.method == GraftMethod::GAP) {
    fc.graft_learning_rate = 0.0;
  }
  return fc;
}

std::optional<AttackConfig> finetune_attack(const ExperimentConfig& cfg) {
  if (!cfg.adversarial_finetune || cfg.eps_train <= 0.0) return std::nullopt;
  return attack_for(cfg, cfg.train_attack, cfg.eps_train, 0);
}

}  // namespace

Network finetune_stage(const ExperimentConfig& cfg, const Network& grafted, const Dataset& train,
                       std::vector<EpochRecord>* log) {
  TrainMonitor monitor;
  monitor.log = log;
  return finetune_grafted(grafted, train, finetune_config(cfg), finetune_attack(cfg), monitor);
}

std::vector<ExampleResult> evaluate_stage(const ExperimentConfig& cfg, const Network& net, const Dataset& test) {
  const std::size_t k = std::min(cfg.verify.examples, static_cast<std::size_t>(test.size()));
  if (k == 0) throw UsageError("evaluation set is empty");
  BabConfig bab = cfg.verify.bab;
  if (cfg.deterministic) bab.budget.deterministic = true;
  const int workers = cfg.deterministic ? 1 : cfg.verify.workers;
  const SplitAssignment free = free_split(net);

  std::vector<ExampleResult> results(k);
  auto evaluate = [&](std::size_t i) {
    const Vector x = test.inputs.col(static_cast<Eigen::Index>(i));
    const int y = test.labels[i];
    ExampleResult& r = results[i];
    r.index = i;
    r.label = y;
    const Box box = input_region(x, cfg.eps_verify, cfg.clip);
    r.unstable = count_unstable(classify_neurons(net, *compute_bounds(net, box, free, bab.bounds), free));

    const Vector logits = forward(net, x).logits;
    Eigen::Index pred = 0;
    logits.maxCoeff(&pred);
    r.correct = pred == y;
    if (!r.correct) {
      // The clean input is its own counterexample.
      r.status = VerdictStatus::Falsified;
      double worst = std::numeric_limits<double>::infinity();
      for (const auto& s : build_specs(static_cast<int>(net.output_dim()), y)) worst = std::min(worst, s.fn(logits));
      r.bound = worst;
      return;
    }
    const AttackConfig attack = attack_for(cfg, cfg.attack, cfg.eps_verify, stream(cfg, kAttack) + i * 7919);
    r.robust = !pgd_attack(net, x, y, attack).has_value();
    BabConfig sub = bab;
    sub.seed = stream(cfg, kVerify) + i * 7919;
    const ExampleVerdict v = verify_example(net, x, y, cfg.eps_verify, cfg.clip, sub);
    r.verified_run = true;
    r.status = v.status;
    r.bound = v.bound;
    r.time = v.elapsed;
    r.branches = v.domains_explored;
  };

  if (workers <= 1) {
    for (std::size_t i = 0; i < k; ++i) evaluate(i);
    return results;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (int w = 0; w < std::min<int>(workers, static_cast<int>(k)); ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < k; i = next++) {
        try {
          evaluate(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return results;
}

std::vector<double> curve_thresholds(double budget) {
  if (!(budget > 0.0)) throw DomainError("curve budget must be positive");
  std::vector<double> out;
  const double ladder[] = {1, 2, 5, 10, 30, 60, 120, 300, 600, 1200, 1800, 3600};
  for (double t : ladder)
    if (t < budget) out.push_back(t);
  if (budget > 3600.0)
    for (double t = 7200.0; t < budget; t += 3600.0) out.push_back(t);
  out.push_back(budget);
  return out;
}

MetricsReport summarize(const std::vector<ExampleResult>& results, const Network& net, double budget) {
  if (results.empty()) throw UsageError("report needs at least one verdict");
  MetricsReport rep;
  rep.examples = results;
  rep.hidden_neurons = net.num_hidden_neurons();
  rep.grafted = net.num_grafted();
  const double k = static_cast<double>(results.size());
  std::size_t correct = 0, robust = 0, verified = 0, runs = 0, unstable = 0;
  double time = 0.0;
  for (const auto& r : results) {
    correct += r.correct;
    robust += r.robust;
    verified += r.status == VerdictStatus::Verified;
    unstable += r.unstable;
    if (r.verified_run) {
      ++runs;
      time += r.time;
    }
  }
  rep.sa = 100.0 * static_cast<double>(correct) / k;
  rep.ra = 100.0 * static_cast<double>(robust) / k;
  rep.va = 100.0 * static_cast<double>(verified) / k;
  rep.unr = rep.hidden_neurons == 0
                ? 0.0
                : 100.0 * static_cast<double>(unstable) / (k * static_cast<double>(rep.hidden_neurons));
  rep.mean_time = runs == 0 ? 0.0 : time / static_cast<double>(runs);
  for (double t : curve_thresholds(budget)) {
    // A run may overshoot the wall-clock budget while finishing its last domain.
    const bool last = t == budget;
    std::size_t n = 0;
    for (const auto& r : results) n += r.status == VerdictStatus::Verified && (last || r.time <= t);
    rep.curve.push_back({t, n});
  }
  return rep;
}

json results_to_json(const std::vector<ExampleResult>& results) {
  json arr = json::array();
  for (const auto& r : results) {
    arr.push_back({{"index", r.index},
                   {"label", r.label},
                   {"correct", r.correct},
                   {"robust", r.robust},
                   {"verdict", to_string(r.status)},
                   {"bound", finite_or_null(r.bound)},
                   {"time", r.time},
                   {"branches", r.branches},
                   {"unstable", r.unstable},
                   {"verified_run", r.verified_run}});
  }
  return arr;
}

std::vector<ExampleResult> results_from_json(const json& doc) {
  std::vector<ExampleResult> out;
  try {
    for (const auto& e : doc) {
      ExampleResult r;
      r.index = e.at("index").get<std::size_t>();
      r.label = e.at("label").get<int>();
      r.correct = e.at("correct").get<bool>();
      r.robust = e.at("robust").get<bool>();
      r.status = parse_status(e.at("verdict").get<std::string>());
      r.bound = finite_or_inf(e.at("bound"));
      r.time = e.at("time").get<double>();
      r.branches = e.at("branches").get<std::size_t>();
      r.unstable = e.at("unstable").get<std::size_t>();
      r.verified_run = e.at("verified_run").get<bool>();
      out.push_back(r);
    }
  } catch (const json::exception& e) {
    throw StructuralError(std::string("malformed verdict list: ") + e.what());
  }
  return out;
}

json report_to_json(const MetricsReport& rep) {
  json curve = json::array();
  for (const auto& p : rep.curve) curve.push_back({{"threshold", p.threshold}, {"verified", p.verified}});
  return {{"method", rep.method},
          {"unr", rep.unr},
          {"va", rep.va},
          {"sa", rep.sa},
          {"ra", rep.ra},
          {"mean_time", rep.mean_time},
          {"test_sa", rep.test_sa ? json(*rep.test_sa) : json(nullptr)},
          {"hidden_neurons", rep.hidden_neurons},
          {"grafted", rep.grafted},
          {"examples", results_to_json(rep.examples)},
          {"curve", curve}};
}

MetricsReport report_from_json(const json& doc) {
  MetricsReport rep;
  try {
    rep.method = doc.at("method").get<std::string>();
    rep.unr = doc.at("unr").get<double>();
    rep.va = doc.at("va").get<double>();
    rep.sa = doc.at("sa").get<double>();
    rep.ra = doc.at("ra").get<double>();
    rep.mean_time = doc.at("mean_time").get<double>();
    if (!doc.at("test_sa").is_null()) rep.test_sa = doc.at("test_sa").get<double>();
    rep.hidden_neurons = doc.at("hidden_neurons").get<std::size_t>();
    rep.grafted = doc.at("grafted").get<std::size_t>();
    rep.examples = results_from_json(doc.at("examples"));
    for (const auto& p : doc.at("curve")) {
      rep.curve.push_back({p.at("threshold").get<double>(), p.at("verified").get<std::size_t>()});
    }
  } catch (const json::exception& e) {
    throw StructuralError(std::string("malformed metrics report: ") + e.what());
  }
  return rep;
}

void report(const MetricsReport& rep, const std::filesystem::path& dir) {
  if (rep.examples.empty()) throw UsageError("report needs at least one verdict");
  std::filesystem::create_directories(dir);
  write_json_file(report_to_json(rep), dir / "metrics.json");

  std::ostringstream csv;
  csv.precision(10);
  csv << "index,sa_correct,ra_robust,verdict,bound,time,branches\n";
  for (const auto& r : rep.examples) {
    csv << r.index << ',' << int{r.correct} << ',' << int{r.robust} << ',' << to_string(r.status) << ',';
    if (std::isfinite(r.bound)) {
      csv << r.bound;
    } else {
      csv << (r.bound > 0 ? "inf" : "-inf");
    }
    csv << ',' << r.time << ',' << r.branches << '\n';
  }
  write_text(dir / "metrics.csv", csv.str());

  std::ostringstream curve;
  curve.precision(10);
  curve << "threshold,verified\n";
  for (const auto& p : rep.curve) curve << p.threshold << ',' << p.verified << '\n';
  write_text(dir / "curve.csv", curve.str());
}

MetricsReport run_pipeline(const ExperimentConfig& cfg) {
  validate(cfg);
  const std::filesystem::path dir = cfg.output_dir;
  run_stage("setup", [&] {
    std::filesystem::create_directories(dir);
    write_json_file(config_to_json(cfg), dir / "config.json");
    return 0;
  });

  const DataSplit data = run_stage("data", [&] { return load_dataset(cfg.data); });
  if (data.train.dim() != cfg.widths.front()) throw ConfigError("widths[0] does not match the data dimension");
  if (data.train.num_classes > cfg.widths.back()) throw ConfigError("output width is smaller than the class count");

  const Network base = run_stage("train", [&] {
    if (!cfg.checkpoint.empty()) return load_network(cfg.checkpoint);
    std::vector<EpochRecord> log;
    Network net = train_stage(cfg, data.train, &log);
    save_network(net, dir / "base.json");
    write_training_log(log, dir / "train_log.csv");
    return net;
  });

  Network final_net = base;
  if (cfg.method != GraftMethod::None) {
    final_net = run_stage("graft", [&] {
      if (cfg.gradual) {
        GradualGraftConfig gc;
        gc.finetune = finetune_config(cfg);
        gc.eps = cfg.eps_verify;
        gc.clip = cfg.clip;
        gc.bounds = cfg.scoring_bounds;
        gc.scoring_examples = static_cast<Eigen::Index>(cfg.scoring_examples);
        gc.init_slope = cfg.init_slope;
        gc.init_intercept = cfg.init_intercept;
        Network net = gradual_graft(base, data.train, cfg.fraction, gc, finetune_attack(cfg));
        GraftPlan plan{{}, {}, cfg.init_slope, cfg.init_intercept};
        for (NeuronId id = 0; id < net.num_hidden_neurons(); ++id)
          if (net.activation(id).is_grafted()) plan.neurons.push_back(id);
        write_json_file(plan_to_json(plan), dir / "plan.json");
        return net;
      }
      std::optional<NeuronScore> scores;
      if (cfg.method == GraftMethod::Graft || cfg.method == GraftMethod::GraftZero) {
        scores = score_stage(cfg, base, data.train);
        write_json_file(scores_to_json(*scores), dir / "scores.json");
      }
      const GraftPlan plan = select_stage(cfg, base, data.train, scores ? &*scores : nullptr);
      write_json_file(plan_to_json(plan), dir / "plan.json");
      return apply_graft(base, plan);
    });
    if (!cfg.gradual) {
      final_net = run_stage("finetune", [&] {
        std::vector<EpochRecord> log;
        Network net = finetune_stage(cfg, final_net, data.train, &log);
        write_training_log(log, dir / "finetune_log.csv");
        return net;
      });
    }
    run_stage("graft", [&] {
      save_network(final_net, dir / "final.json");
      return 0;
    });
  }

  const auto results = run_stage("verify", [&] {
    auto r = evaluate_stage(cfg, final_net, data.test);
    write_json_file(results_to_json(r), dir / "verdicts.json");
    return r;
  });

  return run_stage("report", [&] {
    MetricsReport rep = summarize(results, final_net, cfg.verify.bab.budget.time_limit);
    rep.method = to_string(cfg.method);
    rep.test_sa = standard_accuracy(final_net, data.test);
    report(rep, dir);
    return rep;
  });
}

}  // namespace lingraft
