#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <set>
#include <vector>

#include "lingraft/bounds.hpp"
#include "lingraft/network.hpp"
#include "lingraft/verifier.hpp"

namespace testing {

using lingraft::Matrix;
using lingraft::Network;
using lingraft::Vector;

inline Matrix uniform_matrix(Eigen::Index r, Eigen::Index c, double scale, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Matrix m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = u(rng);
  return m;
}

inline Vector uniform_vector(Eigen::Index n, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(lo, hi);
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = u(rng);
  return v;
}

// Dense net with uniform weights and biases. Each hidden neuron is grafted
// with probability `graft_prob` using a random slope/intercept.
inline Network random_net(const std::vector<int>& widths, std::mt19937_64& rng, double graft_prob = 0.0) {
  std::vector<lingraft::AffineLayer> layers;
  std::vector<std::vector<lingraft::Activation>> acts;
  std::bernoulli_distribution graft(graft_prob);
  std::uniform_real_distribution<double> param(-1.0, 1.0);
  for (std::size_t i = 1; i < widths.size(); ++i) {
    const double scale = 1.5 / std::sqrt(static_cast<double>(widths[i - 1]));
    layers.push_back({uniform_matrix(widths[i], widths[i - 1], scale, rng), uniform_vector(widths[i], -0.3, 0.3, rng)});
    if (i + 1 < widths.size()) {
      std::vector<lingraft::Activation> layer_acts;
      for (int j = 0; j < widths[i]; ++j) {
        layer_acts.push_back(graft(rng) ? lingraft::Activation::grafted(param(rng), 0.5 * param(rng))
                                        : lingraft::Activation::relu());
      }
      acts.push_back(layer_acts);
    }
  }
  return Network(std::move(layers), std::move(acts));
}

inline std::vector<int> random_widths(std::mt19937_64& rng, int in_dim, int out_dim, int min_hidden, int max_hidden,
                                      int min_width, int max_width) {
  std::uniform_int_distribution<int> depth(min_hidden, max_hidden);
  std::uniform_int_distribution<int> width(min_width, max_width);
  std::vector<int> w{in_dim};
  const int h = depth(rng);
  for (int i = 0; i < h; ++i) w.push_back(width(rng));
  w.push_back(out_dim);
  return w;
}

// Plain loop evaluation, independent of the library's Eigen code path.
// `mask` lists flat hidden-neuron ids whose post-activation is forced to 0.
inline std::vector<double> naive_forward(const Network& net, const std::vector<double>& x,
                                         const std::set<std::size_t>& mask = {}) {
  std::vector<double> cur = x;
  std::size_t id = 0;
  for (std::size_t k = 0; k < net.num_layers(); ++k) {
    const auto& w = net.layer(k).weight;
    const auto& b = net.layer(k).bias;
    std::vector<double> next(static_cast<std::size_t>(w.rows()));
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      double s = 0.0;
      for (Eigen::Index c = 0; c < w.cols(); ++c) s += w(r, c) * cur[c];
      next[r] = s + b[r];
    }
    if (k + 1 < net.num_layers()) {
      for (Eigen::Index r = 0; r < w.rows(); ++r, ++id) {
        const auto& a = net.activations(k)[r];
        double z = next[r];
        z = a.is_grafted() ? a.slope * z + a.intercept : (z > 0.0 ? z : 0.0);
        if (mask.contains(id)) z = 0.0;
        next[r] = z;
      }
    }
    cur = std::move(next);
  }
  return cur;
}

inline std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

inline Vector sample_in(const lingraft::Box& box, std::mt19937_64& rng) {
  Vector x(box.dim());
  for (Eigen::Index i = 0; i < box.dim(); ++i) {
    std::uniform_real_distribution<double> u(box.lower[i], box.upper[i]);
    x[i] = box.lower[i] == box.upper[i] ? box.lower[i] : u(rng);
  }
  return x;
}

inline lingraft::Box random_box(Eigen::Index dim, std::mt19937_64& rng, double max_radius = 0.5) {
  const Vector c = uniform_vector(dim, -1.0, 1.0, rng);
  const Vector r = uniform_vector(dim, 0.0, max_radius, rng);
  return {c - r, c + r};
}

// Two-input margin problems with at most `max_unstable` unstable ReLUs at the
// root and a sampled minimum away from zero.
struct SmallInstance {
  Network net;
  lingraft::Box box;
  lingraft::Specification spec;
};

inline double sampled_min(const SmallInstance& inst, std::mt19937_64& rng, int samples) {
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < samples; ++i) {
    best = std::min(best, inst.spec.fn(lingraft::forward(inst.net, sample_in(inst.box, rng)).logits));
  }
  return best;
}

inline std::vector<SmallInstance> small_instance_suite(std::size_t count, std::uint64_t seed,
                                                       std::size_t max_unstable = 10) {
  std::mt19937_64 rng(seed);
  std::vector<SmallInstance> out;
  const lingraft::BoundOptions opts{.refine_intermediate = true};
  while (out.size() < count) {
    SmallInstance inst{random_net(random_widths(rng, 2, 2, 1, 3, 4, 10), rng), random_box(2, rng, 0.6),
                       lingraft::build_specs(2, 0)[0]};
    const auto root = lingraft::compute_bounds(inst.net, inst.box, lingraft::free_split(inst.net), opts);
    const std::size_t unstable =
        lingraft::count_unstable(lingraft::classify_neurons(inst.net, *root, lingraft::free_split(inst.net)));
    if (unstable == 0 || unstable > max_unstable) continue;
    if (std::abs(sampled_min(inst, rng, 2000)) < 1e-6) continue;
    out.push_back(std::move(inst));
  }
  return out;
}

}  // namespace testing
