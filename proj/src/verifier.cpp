#include "lingraft/verifier.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <queue>

#include "lingraft/errors.hpp"
#include "lingraft/linear_program.hpp"

namespace lingraft {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

class BudgetClock {
 public:
  explicit BudgetClock(const VerifyBudget& budget)
      : budget_(budget), start_(std::chrono::steady_clock::now()) {}

  double elapsed(std::size_t domains) const {
    if (budget_.deterministic) return static_cast<double>(domains) * budget_.seconds_per_domain;
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

  bool exhausted(std::size_t domains) const { return elapsed(domains) >= budget_.time_limit; }

 private:
  VerifyBudget budget_;
  std::chrono::steady_clock::time_point start_;
};

struct QueueEntry {
  double bound;
  std::size_t seq;
  Domain domain;
};

struct WorstFirst {
  bool operator()(const QueueEntry& a, const QueueEntry& b) const {
    if (a.bound != b.bound) return a.bound > b.bound;
    return a.seq > b.seq;
  }
};

double attack_step(const Box& box, double fraction) {
  const double half = 0.5 * (box.upper - box.lower).maxCoeff();
  return fraction * half;
}

bool has_unstable(const Network& net, const SplitAssignment& split, const LayerBounds& inter) {
  return count_unstable(classify_neurons(net, inter, split)) > 0;
}

}  // namespace

std::vector<Specification> build_specs(int num_classes, int label) {
  if (num_classes < 2) throw UsageError("need at least two classes");
  if (label < 0 || label >= num_classes) throw UsageError("label out of range");
  std::vector<Specification> specs;
  for (int t = 0; t < num_classes; ++t) {
    if (t == label) continue;
    Specification s;
    s.fn.coeffs = Vector::Zero(num_classes);
    s.fn.coeffs[label] = 1.0;
    s.fn.coeffs[t] = -1.0;
    s.label = label;
    s.target = t;
    specs.push_back(std::move(s));
  }
  return specs;
}

std::string to_string(VerdictStatus s) {
  switch (s) {
    case VerdictStatus::Verified: return "verified";
    case VerdictStatus::Falsified: return "falsified";
    case VerdictStatus::Timeout: return "timeout";
  }
  return "unknown";
}

NeuronId branch_select(const Network& net, const SplitAssignment& split, const LayerBounds& inter) {
  const auto status = classify_neurons(net, inter, split);
  std::optional<NeuronId> best;
  double best_score = -1.0;
  for (NeuronId id = 0; id < status.size(); ++id) {
    if (status[id] != NeuronStatus::Unstable) continue;
    const auto ref = net.locate(id);
    const double l = inter.lower[ref.layer][ref.offset];
    const double u = inter.upper[ref.layer][ref.offset];
    const double score = std::abs(l * u) / (u - l);
    if (!best || score > best_score) {
      best = id;
      best_score = score;
    }
  }
  if (!best) throw UsageError("branch_select called on a domain without unstable neurons");
  return *best;
}

LinearLeafResult solve_linear_leaf(const Network& net, const Box& box, const SplitAssignment& split,
                                   const LayerBounds& inter, const LinearFunctional& spec) {
  const Eigen::Index n = net.input_dim();
  const auto status = classify_neurons(net, inter, split);
  if (count_unstable(status) > 0) throw UsageError("linear leaf still has unstable neurons");

  // Track each layer's input as an affine map of x: h = map * x + offset.
  Matrix map = Matrix::Identity(n, n);
  Vector offset = Vector::Zero(n);
  std::vector<Vector> rows;
  std::vector<double> rhs;
  for (std::size_t i = 0; i < net.num_layers(); ++i) {
    const auto& layer = net.layer(i);
    Matrix z_map = layer.weight * map;
    Vector z_off = layer.weight * offset + layer.bias;
    if (i + 1 == net.num_layers()) {
      map = std::move(z_map);
      offset = std::move(z_off);
      break;
    }
    const auto& acts = net.activations(i);
    const std::size_t base = net.layer_offset(i);
    for (Eigen::Index j = 0; j < z_map.rows(); ++j) {
      const Split s = split[base + j];
      if (s == Split::ForcedActive) {
        rows.emplace_back(-z_map.row(j).transpose());  // z >= 0
        rhs.push_back(z_off[j]);
      } else if (s == Split::ForcedInactive) {
        rows.emplace_back(z_map.row(j).transpose());  // z <= 0
        rhs.push_back(-z_off[j]);
      }
      switch (status[base + j]) {
        case NeuronStatus::Grafted:
          z_map.row(j) *= acts[j].slope;
          z_off[j] = acts[j].slope * z_off[j] + acts[j].intercept;
          break;
        case NeuronStatus::StableInactive:
          z_map.row(j).setZero();
          z_off[j] = 0.0;
          break;
        case NeuronStatus::StableActive:
        case NeuronStatus::Unstable:
          break;
      }
    }
    map = std::move(z_map);
    offset = std::move(z_off);
  }
  const Vector c = map.transpose() * spec.coeffs;
  const double d = spec.coeffs.dot(offset) + spec.constant;

  // Shift to y = x - lower so that y >= 0, and add y <= upper - lower.
  const auto m = static_cast<Eigen::Index>(rows.size());
  Matrix a = Matrix::Zero(m + n, n);
  Vector b(m + n);
  for (Eigen::Index r = 0; r < m; ++r) {
    a.row(r) = rows[r].transpose();
    b[r] = rhs[r] - rows[r].dot(box.lower);
  }
  a.bottomRows(n).setIdentity();
  b.tail(n) = box.upper - box.lower;

  LinearLeafResult out;
  const LpResult lp = solve_lp(c, a, b);
  if (lp.status != LpResult::Status::Optimal) return out;
  out.feasible = true;
  out.argmin = box.project(box.lower + lp.x);
  out.minimum = lp.value + c.dot(box.lower) + d;
  return out;
}

VerdictRecord bab_verify(const Network& net, const Specification& spec, const Box& box, const BabConfig& cfg,
                         const LayerBounds* root_bounds) {
  const BudgetClock clock(cfg.budget);
  VerdictRecord rec;
  auto finish = [&](VerdictStatus status, double bound) {
    rec.status = status;
    rec.final_bound = bound;
    rec.elapsed = clock.elapsed(rec.domains_explored);
    return rec;
  };

  Domain root;
  root.split = free_split(net);
  if (root_bounds != nullptr) {
    root.inter = *root_bounds;
  } else {
    root.inter = *compute_bounds(net, box, root.split, cfg.bounds);
  }
  root.bound = crown_lower_bound(net, box, root.split, root.inter, spec.fn);
  rec.domains_explored = 1;
  if (root.bound > 0.0) return finish(VerdictStatus::Verified, root.bound);

  std::mt19937_64 rng(cfg.seed);
  const double step = attack_step(box, cfg.attack_step_fraction);
  if (auto x = pgd_falsify(net, spec.fn, box, cfg.root_attack_steps, cfg.root_attack_restarts, step, rng)) {
    rec.counterexample = std::move(*x);
    return finish(VerdictStatus::Falsified, root.bound);
  }

  std::priority_queue<QueueEntry, std::vector<QueueEntry>, WorstFirst> work;
  std::size_t seq = 0;
  const double root_bound = root.bound;
  work.push({root_bound, seq++, std::move(root)});
  double verified_min = kInf;
  std::optional<double> unresolved;

  while (!work.empty()) {
    if (clock.exhausted(rec.domains_explored)) return finish(VerdictStatus::Timeout, work.top().bound);
    Domain d = std::move(const_cast<QueueEntry&>(work.top()).domain);
    work.pop();

    if (!has_unstable(net, d.split, d.inter)) {
      const LinearLeafResult leaf = solve_linear_leaf(net, box, d.split, d.inter, spec.fn);
      if (!leaf.feasible) continue;
      if (leaf.minimum > 0.0) {
        verified_min = std::min(verified_min, leaf.minimum);
        continue;
      }
      if (spec.fn(forward(net, leaf.argmin).logits) < 0.0) {
        rec.counterexample = leaf.argmin;
        return finish(VerdictStatus::Falsified, leaf.minimum);
      }
      // Minimum within rounding of zero: neither provable nor refutable.
      unresolved = std::min(unresolved.value_or(kInf), leaf.minimum);
      continue;
    }

    if (d.depth > 0) {
      if (auto x = pgd_falsify(net, spec.fn, box, cfg.domain_attack_steps, cfg.domain_attack_restarts, step, rng)) {
        rec.counterexample = std::move(*x);
        return finish(VerdictStatus::Falsified, d.bound);
      }
    }
    if (rec.domains_explored + 2 > cfg.budget.max_domains) return finish(VerdictStatus::Timeout, d.bound);

    const NeuronId neuron = branch_select(net, d.split, d.inter);
    const std::size_t layer = net.locate(neuron).layer;
    for (Split s : {Split::ForcedActive, Split::ForcedInactive}) {
      Domain child;
      child.split = d.split;
      child.split[neuron] = s;
      child.depth = d.depth + 1;
      ++rec.domains_explored;
      auto inter = compute_bounds(net, box, child.split, cfg.bounds, &d.inter, layer);
      if (!inter) continue;
      child.inter = std::move(*inter);
      child.bound = subdomain_lower_bound(net, box, child.split, child.inter, spec.fn, d.bound);
      if (child.bound > 0.0) {
        verified_min = std::min(verified_min, child.bound);
        continue;
      }
      rec.max_depth = std::max(rec.max_depth, child.depth);
      const double b = child.bound;
      work.push({b, seq++, std::move(child)});
    }
  }
  if (unresolved) return finish(VerdictStatus::Timeout, *unresolved);
  return finish(VerdictStatus::Verified, verified_min);
}

OracleVerdict oracle_input_split(const Network& net, const LinearFunctional& spec, const Box& box, double tol) {
  if (net.input_dim() > 3) throw UsageError("input splitting oracle supports at most 3 input dimensions");
  if (!(tol > 0.0)) throw DomainError("oracle tolerance must be positive");
  const SplitAssignment split = free_split(net);
  std::vector<Box> stack{box};
  bool undecided = false;
  while (!stack.empty()) {
    Box cell = std::move(stack.back());
    stack.pop_back();
    const auto inter = ibp(net, cell, split);
    if (interval_spec_bound(*inter, spec) > 0.0) continue;
    if (spec(forward(net, cell.center()).logits) < 0.0) return OracleVerdict::Falsified;
    Eigen::Index axis = 0;
    const double width = (cell.upper - cell.lower).maxCoeff(&axis);
    if (width < tol) {
      undecided = true;
      continue;
    }
    const double mid = 0.5 * (cell.lower[axis] + cell.upper[axis]);
    Box left = cell;
    Box right = std::move(cell);
    left.upper[axis] = mid;
    right.lower[axis] = mid;
    stack.push_back(std::move(right));
    stack.push_back(std::move(left));
  }
  return undecided ? OracleVerdict::Undecided : OracleVerdict::Verified;
}

ExampleVerdict verify_example(const Network& net, const Vector& x0, int label, double eps,
                              std::optional<ClipRange> clip, const BabConfig& cfg) {
  const BudgetClock clock(cfg.budget);
  const Box box = input_region(x0, eps, clip);
  const auto specs = build_specs(static_cast<int>(net.output_dim()), label);
  const SplitAssignment split = free_split(net);
  const LayerBounds root = *compute_bounds(net, box, split, cfg.bounds);

  // Hardest margin first so a failing example stops early.
  std::vector<std::pair<double, std::size_t>> order;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    order.emplace_back(crown_lower_bound(net, box, split, root, specs[i].fn), i);
  }
  std::sort(order.begin(), order.end());

  ExampleVerdict out;
  out.status = VerdictStatus::Verified;
  out.bound = kInf;
  for (const auto& [root_bound, i] : order) {
    BabConfig sub = cfg;
    sub.seed = cfg.seed + i;
    if (cfg.budget.deterministic) {
      sub.budget.time_limit = cfg.budget.time_limit - out.elapsed;
    } else {
      sub.budget.time_limit = cfg.budget.time_limit - clock.elapsed(0);
    }
    sub.budget.max_domains = cfg.budget.max_domains > out.domains_explored
                                 ? cfg.budget.max_domains - out.domains_explored
                                 : 0;
    VerdictRecord rec;
    if (sub.budget.time_limit <= 0.0 || sub.budget.max_domains == 0) {
      rec.status = VerdictStatus::Timeout;
      rec.final_bound = root_bound;
    } else {
      rec = bab_verify(net, specs[i], box, sub, &root);
    }
    out.domains_explored += rec.domains_explored;
    out.elapsed = cfg.budget.deterministic ? out.elapsed + rec.elapsed : clock.elapsed(0);
    out.bound = std::min(out.bound, rec.final_bound);
    if (rec.status != VerdictStatus::Verified) {
      out.status = rec.status;
      out.counterexample = std::move(rec.counterexample);
      break;
    }
  }
  return out;
}

}  // namespace lingraft
