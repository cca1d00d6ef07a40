#include "lingraft/training.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "lingraft/errors.hpp"
#include "lingraft/graft_plan.hpp"
#include "lingraft/grafting.hpp"
#include "lingraft/loss.hpp"

namespace lingraft {

namespace {

struct LoopSpec {
  int batch_size = 128;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double weight_lr = 0.0;
  double graft_lr = 0.0;
  bool update_weights = true;
  bool update_graft = true;
  RegularizerWeights regularizer;
  double regularizer_eps = 0.0;
  std::optional<ClipRange> clip = ClipRange{};
  std::function<double(std::size_t iteration, int epoch)> lr_scale = [](std::size_t, int) { return 1.0; };
};

// Heavy-ball SGD with decoupled learning rates for affine and graft parameters.
class Sgd {
 public:
  explicit Sgd(const Network& net) : velocity_(GradientBundle::zeros_like(net, 0)) {}

  void step(Network& net, const GradientBundle& g, const LoopSpec& spec, double scale) {
    if (spec.update_weights) {
      const double lr = spec.weight_lr * scale;
      for (std::size_t i = 0; i < net.num_layers(); ++i) {
        auto& layer = net.layer(i);
        velocity_.weight[i] = spec.momentum * velocity_.weight[i] + g.weight[i] + spec.weight_decay * layer.weight;
        velocity_.bias[i] = spec.momentum * velocity_.bias[i] + g.bias[i] + spec.weight_decay * layer.bias;
        layer.weight -= lr * velocity_.weight[i];
        layer.bias -= lr * velocity_.bias[i];
      }
    }
    if (spec.update_graft) {
      const double lr = spec.graft_lr * scale;
      for (std::size_t h = 0; h < net.num_hidden_layers(); ++h) {
        auto& acts = net.activations(h);
        for (std::size_t j = 0; j < acts.size(); ++j) {
          if (!acts[j].is_grafted()) continue;
          auto& vs = velocity_.slope[h][j];
          auto& vi = velocity_.intercept[h][j];
          vs = spec.momentum * vs + g.slope[h][j];
          vi = spec.momentum * vi + g.intercept[h][j];
          acts[j].slope -= lr * vs;
          acts[j].intercept -= lr * vi;
        }
      }
    }
  }

 private:
  GradientBundle velocity_;
};

std::size_t batches_per_epoch(const Dataset& data, int batch_size) {
  return static_cast<std::size_t>((data.size() + batch_size - 1) / batch_size);
}

Matrix gather_columns(const Matrix& m, std::span<const Eigen::Index> idx) {
  Matrix out(m.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t c = 0; c < idx.size(); ++c) out.col(static_cast<Eigen::Index>(c)) = m.col(idx[c]);
  return out;
}

double run_epoch(Network& net, const Dataset& data, const LoopSpec& spec, Sgd& sgd, std::mt19937_64& rng,
                 std::size_t& iteration, int epoch, const std::optional<AttackConfig>& adversarial) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(data.size()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::shuffle(order.begin(), order.end(), rng);

  double loss_sum = 0.0;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(spec.batch_size)) {
    const std::size_t count = std::min(order.size() - start, static_cast<std::size_t>(spec.batch_size));
    const std::span<const Eigen::Index> idx(order.data() + start, count);
    Matrix x = gather_columns(data.inputs, idx);
    std::vector<int> y(count);
    for (std::size_t k = 0; k < count; ++k) y[k] = data.labels[idx[k]];

    if (adversarial) x = pgd_perturb_batch(net, x, y, *adversarial, rng);
    const BatchTrace trace = forward_batch(net, x);
    const LossAndGrad lg = cross_entropy(trace.logits(), y);
    GradientBundle g = backward_batch(net, trace, lg.grad);
    double loss = lg.loss;
    if (spec.regularizer.rs > 0.0 || spec.regularizer.l1 > 0.0) {
      const BatchIntervals bounds = batch_intervals(net, x, spec.regularizer_eps, spec.clip);
      loss = regularized_loss(loss, net, bounds, spec.regularizer);
      add_regularizer_gradient(net, bounds, spec.regularizer, g);
    }
    if (!std::isfinite(loss)) {
      std::ostringstream msg;
      msg << "training diverged: loss " << loss << " at epoch " << epoch << ", batch " << batches;
      throw DivergenceError(msg.str());
    }
    sgd.step(net, g, spec, spec.lr_scale(iteration, epoch));
    ++iteration;
    loss_sum += loss;
    ++batches;
  }
  return batches == 0 ? 0.0 : loss_sum / static_cast<double>(batches);
}

void record_epoch(const Network& net, int epoch, double loss, const TrainMonitor& monitor) {
  if (monitor.log == nullptr) return;
  EpochRecord rec{epoch, loss, 0.0, 0.0};
  if (monitor.holdout != nullptr && monitor.holdout->size() > 0) {
    rec.standard_accuracy = standard_accuracy(net, *monitor.holdout);
    if (monitor.probe) rec.robust_accuracy = robust_accuracy(net, *monitor.holdout, *monitor.probe);
  }
  monitor.log->push_back(rec);
}

void check_data(const Network& net, const Dataset& data, int batch_size) {
  if (data.size() == 0) throw UsageError("training needs a non-empty dataset");
  if (data.dim() != net.input_dim()) throw StructuralError("dataset dimension does not match network input");
  if (static_cast<Eigen::Index>(data.labels.size()) != data.size()) throw StructuralError("label count mismatch");
  if (batch_size < 1) throw UsageError("batch size must be positive");
}

double cosine(std::size_t iteration, std::size_t total) {
  if (total == 0) return 1.0;
  return 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(iteration) / static_cast<double>(total)));
}

LoopSpec finetune_spec(const FinetuneConfig& cfg, std::size_t total_iterations) {
  if (cfg.graft_learning_rate < 0.0 || cfg.weight_learning_rate < 0.0) {
    throw UsageError("fine-tuning learning rates must be non-negative");
  }
  LoopSpec spec;
  spec.batch_size = cfg.batch_size;
  spec.momentum = cfg.momentum;
  spec.weight_decay = cfg.weight_decay;
  spec.weight_lr = cfg.weight_learning_rate;
  spec.graft_lr = cfg.graft_learning_rate;
  spec.update_weights = cfg.tune_weights;
  spec.update_graft = true;
  spec.lr_scale = [total_iterations](std::size_t it, int) { return cosine(it, total_iterations); };
  return spec;
}

}  // namespace

Network train(Network net, const Dataset& data, const TrainConfig& cfg, const std::optional<AttackConfig>& adversarial,
              const TrainMonitor& monitor) {
  if (cfg.epochs < 1) throw UsageError("epochs must be at least 1");
  if (!(cfg.learning_rate > 0.0)) throw UsageError("learning rate must be positive");
  check_data(net, data, cfg.batch_size);
  if (adversarial) validate(*adversarial);

  const std::size_t total = static_cast<std::size_t>(cfg.epochs) * batches_per_epoch(data, cfg.batch_size);
  LoopSpec spec;
  spec.batch_size = cfg.batch_size;
  spec.momentum = cfg.momentum;
  spec.weight_decay = cfg.weight_decay;
  spec.weight_lr = cfg.learning_rate;
  spec.graft_lr = cfg.learning_rate;
  spec.regularizer = cfg.regularizer;
  spec.regularizer_eps = cfg.regularizer_eps;
  if (adversarial) spec.clip = adversarial->clip;
  if (cfg.schedule == LrSchedule::Cosine) {
    spec.lr_scale = [total](std::size_t it, int) { return cosine(it, total); };
  } else {
    spec.lr_scale = [&cfg](std::size_t, int epoch) {
      double s = 1.0;
      for (int m : cfg.milestones)
        if (epoch >= m) s *= cfg.decay_factor;
      return s;
    };
  }

  std::mt19937_64 rng(cfg.seed);
  Sgd sgd(net);
  std::size_t iteration = 0;
  for (int e = 0; e < cfg.epochs; ++e) {
    const double loss = run_epoch(net, data, spec, sgd, rng, iteration, e, adversarial);
    record_epoch(net, e, loss, monitor);
  }
  return net;
}

Network finetune_grafted(Network net, const Dataset& data, const FinetuneConfig& cfg,
                         const std::optional<AttackConfig>& adversarial, const TrainMonitor& monitor) {
  if (net.num_grafted() == 0) throw UsageError("fine-tuning expects at least one grafted neuron");
  if (cfg.epochs < 1) throw UsageError("epochs must be at least 1");
  check_data(net, data, cfg.batch_size);
  if (adversarial) validate(*adversarial);

  const std::size_t total = static_cast<std::size_t>(cfg.epochs) * batches_per_epoch(data, cfg.batch_size);
  LoopSpec spec = finetune_spec(cfg, total);
  if (adversarial) spec.clip = adversarial->clip;
  std::mt19937_64 rng(cfg.seed);
  Sgd sgd(net);
  std::size_t iteration = 0;
  for (int e = 0; e < cfg.epochs; ++e) {
    const double loss = run_epoch(net, data, spec, sgd, rng, iteration, e, adversarial);
    record_epoch(net, e, loss, monitor);
  }
  return net;
}

Network gradual_graft(Network net, const Dataset& data, double fraction, const GradualGraftConfig& cfg,
                      const std::optional<AttackConfig>& adversarial) {
  if (!(fraction > 0.0) || fraction > 1.0) throw UsageError("graft fraction must lie in (0, 1]");
  const FinetuneConfig& ft = cfg.finetune;
  if (ft.epochs < 1) throw UsageError("epochs must be at least 1");
  check_data(net, data, ft.batch_size);
  if (adversarial) validate(*adversarial);

  const std::size_t n = net.num_hidden_neurons();
  const std::size_t target = fraction_count(fraction, n);
  const int graft_epochs = std::max(1, ft.epochs / 2);
  const std::size_t total = static_cast<std::size_t>(ft.epochs) * batches_per_epoch(data, ft.batch_size);
  LoopSpec spec = finetune_spec(ft, total);
  if (adversarial) spec.clip = adversarial->clip;
  const Dataset scoring = data.head(cfg.scoring_examples);

  std::mt19937_64 rng(ft.seed);
  Sgd sgd(net);
  std::size_t iteration = 0;
  std::size_t grafted = 0;
  for (int e = 0; e < ft.epochs; ++e) {
    if (e < graft_epochs) {
      // Cubic schedule: most of the grafting happens early.
      const double progress = static_cast<double>(e + 1) / graft_epochs;
      const double share = 1.0 - std::pow(1.0 - progress, 3.0);
      const std::size_t want = e + 1 == graft_epochs ? target : fraction_count(share * fraction, n);
      if (want > grafted) {
        const std::size_t k = want - grafted;
        const double gamma = graft_epochs == 1 ? 2.0 : 2.0 * (1.0 - static_cast<double>(e) / (graft_epochs - 1));
        const NeuronScore scores =
            combine_scores(instability_scores(net, scoring.inputs, cfg.eps, cfg.clip, cfg.bounds),
                           significance_scores(net, scoring.inputs, scoring.labels));
        const double step_fraction = static_cast<double>(k) / static_cast<double>(n);
        const GraftPlan plan =
            select_neurons(net, scores, step_fraction, {{step_fraction, gamma}}, cfg.init_slope, cfg.init_intercept);
        net = apply_graft(net, plan);
        grafted += plan.neurons.size();
      }
    }
    run_epoch(net, data, spec, sgd, rng, iteration, e, adversarial);
  }
  return net;
}

BatchIntervals batch_intervals(const Network& net, const Matrix& x, double eps, std::optional<ClipRange> clip) {
  BatchIntervals b;
  Matrix lo = x.array() - eps;
  Matrix hi = x.array() + eps;
  if (clip) {
    lo = lo.cwiseMax(clip->low).cwiseMin(hi);
    hi = hi.cwiseMin(clip->high).cwiseMax(lo);
  }
  for (std::size_t k = 0; k < net.num_layers(); ++k) {
    const auto& layer = net.layer(k);
    const Matrix wp = layer.weight.cwiseMax(0.0);
    const Matrix wn = layer.weight.cwiseMin(0.0);
    Matrix l = wp * lo + wn * hi;
    Matrix u = wp * hi + wn * lo;
    l.colwise() += layer.bias;
    u.colwise() += layer.bias;
    b.in_lower.push_back(lo);
    b.in_upper.push_back(hi);
    if (k + 1 < net.num_layers()) {
      const auto& acts = net.activations(k);
      lo.resize(l.rows(), l.cols());
      hi.resize(l.rows(), l.cols());
      for (Eigen::Index c = 0; c < l.cols(); ++c) {
        for (Eigen::Index r = 0; r < l.rows(); ++r) {
          const double p = acts[r].apply(l(r, c));
          const double q = acts[r].apply(u(r, c));
          lo(r, c) = std::min(p, q);
          hi(r, c) = std::max(p, q);
        }
      }
    }
    b.pre_lower.push_back(std::move(l));
    b.pre_upper.push_back(std::move(u));
  }
  return b;
}

double regularized_loss(double base_loss, const Network& net, const BatchIntervals& bounds,
                        const RegularizerWeights& weights) {
  double total = base_loss;
  if (weights.rs != 0.0) {
    const Eigen::Index batch = bounds.pre_lower.front().cols();
    double surrogate = 0.0;
    for (std::size_t h = 0; h < net.num_hidden_layers(); ++h) {
      const auto& acts = net.activations(h);
      const Matrix& l = bounds.pre_lower[h];
      const Matrix& u = bounds.pre_upper[h];
      for (Eigen::Index c = 0; c < batch; ++c)
        for (Eigen::Index r = 0; r < l.rows(); ++r)
          if (!acts[r].is_grafted() && l(r, c) < 0.0 && u(r, c) > 0.0) surrogate += -l(r, c) * u(r, c);
    }
    total += weights.rs * surrogate /
             (static_cast<double>(batch) * static_cast<double>(net.num_hidden_neurons()));
  }
  if (weights.l1 != 0.0) {
    double l1 = 0.0;
    for (const auto& layer : net.layers()) l1 += layer.weight.cwiseAbs().sum();
    total += weights.l1 * l1;
  }
  return total;
}

void add_regularizer_gradient(const Network& net, const BatchIntervals& bounds, const RegularizerWeights& weights,
                              GradientBundle& grads) {
  if (weights.rs != 0.0) {
    const Eigen::Index batch = bounds.pre_lower.front().cols();
    const double scale =
        weights.rs / (static_cast<double>(batch) * static_cast<double>(net.num_hidden_neurons()));
    for (std::size_t h = 0; h < net.num_hidden_layers(); ++h) {
      const auto& acts = net.activations(h);
      const Matrix& l = bounds.pre_lower[h];
      const Matrix& u = bounds.pre_upper[h];
      // d(-l*u) = -u dl - l du, restricted to unstable ReLUs.
      Matrix dl = Matrix::Zero(l.rows(), l.cols());
      Matrix du = Matrix::Zero(l.rows(), l.cols());
      for (Eigen::Index c = 0; c < batch; ++c) {
        for (Eigen::Index r = 0; r < l.rows(); ++r) {
          if (acts[r].is_grafted() || !(l(r, c) < 0.0 && u(r, c) > 0.0)) continue;
          dl(r, c) = -u(r, c) * scale;
          du(r, c) = -l(r, c) * scale;
        }
      }
      const Matrix& in_lo = bounds.in_lower[h];
      const Matrix& in_hi = bounds.in_upper[h];
      // l = W+ in_lo + W- in_hi + b,  u = W+ in_hi + W- in_lo + b.
      const Matrix via_pos = dl * in_lo.transpose() + du * in_hi.transpose();
      const Matrix via_neg = dl * in_hi.transpose() + du * in_lo.transpose();
      const Matrix& w = net.layer(h).weight;
      for (Eigen::Index c = 0; c < w.cols(); ++c)
        for (Eigen::Index r = 0; r < w.rows(); ++r) grads.weight[h](r, c) += w(r, c) >= 0.0 ? via_pos(r, c) : via_neg(r, c);
      grads.bias[h] += (dl + du).rowwise().sum();
    }
  }
  if (weights.l1 != 0.0) {
    for (std::size_t i = 0; i < net.num_layers(); ++i) {
      grads.weight[i] += weights.l1 * net.layer(i).weight.unaryExpr(
                                          [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
    }
  }
}

Network small_weight_prune(Network net, double threshold) {
  if (!(threshold >= 0.0)) throw DomainError("prune threshold must be non-negative");
  for (std::size_t i = 0; i < net.num_layers(); ++i) {
    auto& w = net.layer(i).weight;
    w = w.unaryExpr([threshold](double v) { return std::abs(v) < threshold ? 0.0 : v; });
  }
  return net;
}

double standard_accuracy(const Network& net, const Dataset& data) {
  if (data.size() == 0) return 0.0;
  const auto pred = argmax_columns(predict(net, data.inputs));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == data.labels[i] ? 1 : 0;
  return 100.0 * static_cast<double>(correct) / static_cast<double>(data.size());
}

double robust_accuracy(const Network& net, const Dataset& data, const AttackConfig& attack) {
  if (data.size() == 0) return 0.0;
  const auto pred = argmax_columns(predict(net, data.inputs));
  std::size_t robust = 0;
  for (Eigen::Index i = 0; i < data.size(); ++i) {
    if (pred[i] != data.labels[i]) continue;
    AttackConfig cfg = attack;
    cfg.seed = attack.seed + static_cast<std::uint64_t>(i);
    if (!pgd_attack(net, data.inputs.col(i), data.labels[i], cfg)) ++robust;
  }
  return 100.0 * static_cast<double>(robust) / static_cast<double>(data.size());
}

void write_training_log(const std::vector<EpochRecord>& log, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "epoch,loss,sa,ra\n";
  out.precision(17);
  for (const auto& r : log) {
    out << r.epoch << ',' << r.loss << ',' << r.standard_accuracy << ',' << r.robust_accuracy << '\n';
  }
}

}  // namespace lingraft
