#include "lingraft/attack.hpp"

#include "lingraft/errors.hpp"
#include "lingraft/loss.hpp"

namespace lingraft {

namespace {

Vector uniform_in(const Box& box, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Vector x(box.dim());
  for (Eigen::Index j = 0; j < x.size(); ++j) x[j] = box.lower[j] + unit(rng) * (box.upper[j] - box.lower[j]);
  return x;
}

Vector sign(const Vector& g) {
  return g.unaryExpr([](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

// Worst competing class, or -1 if the label wins every comparison strictly.
int misclassified_as(const Vector& logits, int label) {
  for (Eigen::Index t = 0; t < logits.size(); ++t)
    if (t != label && logits[t] > logits[label]) return static_cast<int>(t);
  return -1;
}

int runner_up(const Vector& logits, int label) {
  int best = -1;
  for (Eigen::Index t = 0; t < logits.size(); ++t) {
    if (t == label) continue;
    if (best < 0 || logits[t] > logits[best]) best = static_cast<int>(t);
  }
  return best;
}

}  // namespace

void validate(const AttackConfig& cfg) {
  if (!(cfg.eps >= 0.0)) throw DomainError("attack eps must be non-negative");
  if (cfg.steps < 1) throw DomainError("attack needs at least one step");
  if (cfg.restarts < 1) throw DomainError("attack needs at least one restart");
}

std::optional<Vector> pgd_attack(const Network& net, const Vector& x0, int label, const AttackConfig& cfg) {
  validate(cfg);
  if (label < 0 || label >= net.output_dim()) throw UsageError("label out of range");
  const Box box = input_region(x0, cfg.eps, cfg.clip);
  std::mt19937_64 rng(cfg.seed);
  for (int r = 0; r < cfg.restarts; ++r) {
    Vector x = uniform_in(box, rng);
    for (int s = 0;; ++s) {
      const Vector logits = forward(net, x).logits;
      if (misclassified_as(logits, label) >= 0) return x;
      if (s == cfg.steps) break;
      const int t = runner_up(logits, label);
      Vector seed = Vector::Zero(net.output_dim());
      seed[label] = 1.0;
      seed[t] = -1.0;
      const Vector g = backward(net, x, seed).input.col(0);
      x = box.project(x - cfg.step_size * sign(g));
    }
  }
  return std::nullopt;
}

std::optional<Vector> pgd_falsify(const Network& net, const LinearFunctional& spec, const Box& box, int steps,
                                  int restarts, double step_size, std::mt19937_64& rng) {
  for (int r = 0; r < restarts; ++r) {
    Vector x = uniform_in(box, rng);
    for (int s = 0;; ++s) {
      if (spec(forward(net, x).logits) < 0.0) return x;
      if (s == steps) break;
      const Vector g = backward(net, x, spec.coeffs).input.col(0);
      x = box.project(x - step_size * sign(g));
    }
  }
  return std::nullopt;
}

Matrix pgd_perturb_batch(const Network& net, const Matrix& x, std::span<const int> labels, const AttackConfig& cfg,
                         std::mt19937_64& rng) {
  validate(cfg);
  if (cfg.eps == 0.0) return x;
  Matrix lo = x.array() - cfg.eps;
  Matrix hi = x.array() + cfg.eps;
  if (cfg.clip) {
    lo = lo.cwiseMax(cfg.clip->low);
    hi = hi.cwiseMin(cfg.clip->high);
  }
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Matrix adv(x.rows(), x.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c)
    for (Eigen::Index r = 0; r < x.rows(); ++r) adv(r, c) = lo(r, c) + unit(rng) * (hi(r, c) - lo(r, c));
  for (int s = 0; s < cfg.steps; ++s) {
    const BatchTrace trace = forward_batch(net, adv);
    const LossAndGrad lg = cross_entropy(trace.logits(), labels);
    const Matrix g = backward_batch(net, trace, lg.grad).input;
    adv += cfg.step_size * g.unaryExpr([](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
    adv = adv.cwiseMax(lo).cwiseMin(hi);
  }
  return adv;
}

}  // namespace lingraft
