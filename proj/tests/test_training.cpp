#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include "lingraft/errors.hpp"
#include "lingraft/grafting.hpp"
#include "lingraft/loss.hpp"
#include "lingraft/training.hpp"
#include "support.hpp"

using namespace lingraft;
using testing::random_net;

namespace {

// Points in [0,1]^2 labelled by x + y > 1, with a gap of `gap` around the line.
Dataset separable(std::size_t n, std::uint64_t seed, double gap = 0.2) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Dataset d;
  d.num_classes = 2;
  d.inputs.resize(2, static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n;) {
    const double x = u(rng);
    const double y = u(rng);
    if (std::abs(x + y - 1.0) < gap) continue;
    d.inputs(0, static_cast<Eigen::Index>(i)) = x;
    d.inputs(1, static_cast<Eigen::Index>(i)) = y;
    d.labels.push_back(x + y > 1.0 ? 1 : 0);
    ++i;
  }
  return d;
}

// One robust feature (the sign of the label, flipped for 10% of points) plus
// `d` weakly correlated Gaussian features that a small l-inf budget can flip.
Dataset mixed_features(std::size_t n, std::uint64_t seed, int d = 20, double eta = 0.25) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution flip(0.1);
  std::bernoulli_distribution coin(0.5);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Dataset out;
  out.num_classes = 2;
  out.inputs.resize(d + 1, static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const int y = coin(rng) ? 1 : 0;
    const double s = y == 1 ? 1.0 : -1.0;
    out.labels.push_back(y);
    const auto c = static_cast<Eigen::Index>(i);
    out.inputs(0, c) = flip(rng) ? -s : s;
    for (int k = 1; k <= d; ++k) out.inputs(k, c) = eta * s + gauss(rng);
  }
  return out;
}

TrainConfig toy_train(int epochs = 50, std::uint64_t seed = 1) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 32;
  cfg.learning_rate = 0.05;
  cfg.weight_decay = 0.0;
  cfg.schedule = LrSchedule::Cosine;
  cfg.seed = seed;
  return cfg;
}

AttackConfig toy_attack(double eps) {
  AttackConfig a;
  a.eps = eps;
  a.steps = 10;
  a.step_size = eps / 4.0;
  a.restarts = 1;
  return a;
}

bool same_params(const Network& a, const Network& b) {
  for (std::size_t k = 0; k < a.num_layers(); ++k) {
    if (a.layer(k).weight != b.layer(k).weight || a.layer(k).bias != b.layer(k).bias) return false;
  }
  for (std::size_t h = 0; h < a.num_hidden_layers(); ++h)
    for (std::size_t j = 0; j < a.activations(h).size(); ++j) {
      const auto& x = a.activations(h)[j];
      const auto& y = b.activations(h)[j];
      if (x.is_grafted() != y.is_grafted() || x.slope != y.slope || x.intercept != y.intercept) return false;
    }
  return true;
}

double mean_unstable(const Network& net, const Dataset& data, double eps) {
  const auto tally = tally_stability(net, data.inputs, eps, ClipRange{}, {});
  double total = 0.0;
  for (auto c : tally.unstable) total += static_cast<double>(c);
  return total / static_cast<double>(data.size());
}

Network graft_some(const Network& net, std::mt19937_64& rng, double share) {
  GraftPlan plan;
  for (NeuronId id = 0; id < net.num_hidden_neurons(); ++id)
    if (std::bernoulli_distribution(share)(rng)) plan.neurons.push_back(id);
  if (plan.neurons.empty()) plan.neurons.push_back(0);
  return apply_graft(net, plan);
}

}  // namespace

TEST_CASE("training reaches full accuracy on a separable toy set") {
  const Dataset data = separable(400, 3);
  std::mt19937_64 rng(3);
  const Network trained = train(random_net({2, 8, 2}, rng), data, toy_train());
  CHECK(standard_accuracy(trained, data) == 100.0);
}

TEST_CASE("zero-radius adversarial training matches plain training") {
  const Dataset data = separable(400, 5);
  std::mt19937_64 rng(5);
  const Network init = random_net({2, 8, 2}, rng);
  const Network plain = train(init, data, toy_train());
  const Network zero = train(init, data, toy_train(), toy_attack(0.0));
  CHECK(std::abs(standard_accuracy(plain, data) - standard_accuracy(zero, data)) <= 2.0);
}

TEST_CASE("training is reproducible") {
  const Dataset data = make_synthetic(SyntheticKind::TwoMoons, 300, 7);
  std::mt19937_64 rng(7);
  const Network init = random_net({2, 16, 16, 2}, rng);
  TrainConfig cfg = toy_train(5, 9);
  cfg.regularizer.rs = 0.5;
  cfg.regularizer.l1 = 1e-4;
  cfg.regularizer_eps = 0.05;
  const Network a = train(init, data, cfg, toy_attack(0.05));
  const Network b = train(init, data, cfg, toy_attack(0.05));
  CHECK(same_params(a, b));
  cfg.seed = 10;
  CHECK_FALSE(same_params(a, train(init, data, cfg, toy_attack(0.05))));
}

TEST_CASE("step decay and monitor log") {
  const Dataset data = separable(200, 11);
  std::mt19937_64 rng(11);
  TrainConfig cfg = toy_train(4);
  cfg.schedule = LrSchedule::StepDecay;
  cfg.milestones = {2};
  std::vector<EpochRecord> log;
  TrainMonitor monitor{&data, toy_attack(0.05), &log};
  const Network net = train(random_net({2, 8, 2}, rng), data, cfg, std::nullopt, monitor);
  REQUIRE(log.size() == 4);
  for (int e = 0; e < 4; ++e) {
    CHECK(log[e].epoch == e);
    CHECK(std::isfinite(log[e].loss));
    CHECK(log[e].robust_accuracy <= log[e].standard_accuracy);
  }
  CHECK(log.back().standard_accuracy == standard_accuracy(net, data));

  const auto path = std::filesystem::temp_directory_path() / "lingraft_train_log.csv";
  write_training_log(log, path);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "epoch,loss,sa,ra");
  int rows = 0;
  for (std::string line; std::getline(in, line);) ++rows;
  CHECK(rows == 4);
  std::filesystem::remove(path);
}

TEST_CASE("training errors") {
  const Dataset data = separable(50, 13);
  std::mt19937_64 rng(13);
  const Network net = random_net({2, 8, 2}, rng);
  TrainConfig cfg = toy_train(1);
  cfg.epochs = 0;
  CHECK_THROWS_AS(train(net, data, cfg), UsageError);
  cfg = toy_train(1);
  cfg.learning_rate = 0.0;
  CHECK_THROWS_AS(train(net, data, cfg), UsageError);
  cfg = toy_train(1);
  CHECK_THROWS_AS(train(random_net({3, 8, 2}, rng), data, cfg), StructuralError);
  CHECK_THROWS_AS(train(net, data, cfg, toy_attack(-1.0)), DomainError);

  SUBCASE("divergence is reported") {
    cfg.learning_rate = 1e200;
    cfg.momentum = 0.0;
    cfg.epochs = 5;
    CHECK_THROWS_AS(train(net, data, cfg), DivergenceError);
  }
}

TEST_CASE("fine-tuning grafted networks") {
  const Dataset data = make_synthetic(SyntheticKind::TwoMoons, 300, 17);
  std::mt19937_64 rng(17);
  const Network base = train(random_net({2, 16, 16, 2}, rng), data, toy_train(10));
  const Network grafted = graft_some(base, rng, 0.4);
  FinetuneConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 32;

  SUBCASE("frozen weights stay bit-identical") {
    cfg.tune_weights = false;
    const Network tuned = finetune_grafted(grafted, data, cfg, toy_attack(0.05));
    for (std::size_t k = 0; k < tuned.num_layers(); ++k) {
      CHECK(tuned.layer(k).weight == grafted.layer(k).weight);
      CHECK(tuned.layer(k).bias == grafted.layer(k).bias);
    }
    bool moved = false;
    for (NeuronId id = 0; id < tuned.num_hidden_neurons(); ++id)
      if (tuned.activation(id).is_grafted() && tuned.activation(id).slope != grafted.activation(id).slope) moved = true;
    CHECK(moved);
  }
  SUBCASE("zero learning rates return the same network") {
    cfg.epochs = 1;
    cfg.graft_learning_rate = 0.0;
    cfg.weight_learning_rate = 0.0;
    CHECK(same_params(finetune_grafted(grafted, data, cfg), grafted));
  }
  SUBCASE("activation kinds never change") {
    const Network tuned = finetune_grafted(grafted, data, cfg);
    for (NeuronId id = 0; id < tuned.num_hidden_neurons(); ++id)
      CHECK(tuned.activation(id).is_grafted() == grafted.activation(id).is_grafted());
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(finetune_grafted(base, data, cfg), UsageError);
    cfg.graft_learning_rate = -0.1;
    CHECK_THROWS_AS(finetune_grafted(grafted, data, cfg), UsageError);
  }
}

TEST_CASE("gradual grafting") {
  const Dataset data = make_synthetic(SyntheticKind::TwoMoons, 200, 19);
  std::mt19937_64 rng(19);
  const Network base = train(random_net({2, 12, 12, 2}, rng), data, toy_train(5));
  GradualGraftConfig cfg;
  cfg.finetune.epochs = 6;
  cfg.finetune.batch_size = 32;
  cfg.eps = 0.05;
  cfg.scoring_examples = 100;
  for (double fraction : {0.05, 0.3, 0.5, 1.0}) {
    const Network out = gradual_graft(base, data, fraction, cfg);
    CHECK(out.num_grafted() ==
          static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(base.num_hidden_neurons()) - 1e-9)));
  }
  SUBCASE("one increment equals one-shot grafting then fine-tuning") {
    cfg.finetune.epochs = 1;
    const double f = 0.05;
    const Network gradual = gradual_graft(base, data, f, cfg);
    const Dataset scoring = data.head(cfg.scoring_examples);
    const NeuronScore scores = combine_scores(instability_scores(base, scoring.inputs, cfg.eps, cfg.clip),
                                              significance_scores(base, scoring.inputs, scoring.labels));
    const std::size_t k = fraction_count(f, base.num_hidden_neurons());
    const double step = static_cast<double>(k) / static_cast<double>(base.num_hidden_neurons());
    const GraftPlan plan = select_neurons(base, scores, step, {{step, 2.0}});
    const Network oneshot = finetune_grafted(apply_graft(base, plan), data, cfg.finetune);
    CHECK(same_params(gradual, oneshot));
  }
  CHECK_THROWS_AS(gradual_graft(base, data, 0.0, cfg), UsageError);
}

TEST_CASE("regulariser terms") {
  std::mt19937_64 rng(23);
  const Network net = random_net({2, 10, 10, 2}, rng);
  const Matrix x = testing::uniform_matrix(2, 16, 1.0, rng);
  const BatchIntervals b = batch_intervals(net, x, 0.1, std::nullopt);
  CHECK(regularized_loss(1.25, net, b, {}) == 1.25);

  std::vector<AffineLayer> zero_layers;
  std::vector<std::vector<Activation>> acts;
  for (std::size_t k = 0; k < net.num_layers(); ++k) {
    AffineLayer l = net.layer(k);
    l.weight.setZero();
    zero_layers.push_back(l);
  }
  for (std::size_t h = 0; h < net.num_hidden_layers(); ++h) acts.push_back(net.activations(h));
  const Network zero(zero_layers, acts);
  CHECK(regularized_loss(0.5, zero, batch_intervals(zero, x, 0.1, std::nullopt), {0.0, 3.0}) == 0.5);

  double l1 = 0.0;
  for (std::size_t k = 0; k < net.num_layers(); ++k) l1 += net.layer(k).weight.cwiseAbs().sum();
  CHECK(regularized_loss(0.0, net, b, {0.0, 2.0}) == doctest::Approx(2.0 * l1));

  // Independent count of -l*u over unstable ReLUs from per-example interval propagation.
  double surrogate = 0.0;
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    const Box box = input_region(x.col(c), 0.1);
    const auto inter = ibp(net, box, free_split(net));
    for (std::size_t h = 0; h < net.num_hidden_layers(); ++h)
      for (Eigen::Index j = 0; j < inter->lower[h].size(); ++j) {
        const double lo = inter->lower[h][j];
        const double hi = inter->upper[h][j];
        if (lo < 0.0 && hi > 0.0) surrogate -= lo * hi;
      }
  }
  surrogate /= static_cast<double>(x.cols() * net.num_hidden_neurons());
  CHECK(regularized_loss(0.0, net, b, {1.5, 0.0}) == doctest::Approx(1.5 * surrogate).epsilon(1e-12));
}

TEST_CASE("stability gradient matches finite differences on the first layer") {
  // With one hidden layer the interval entering it is the input box itself,
  // so the straight-through gradient is the exact gradient.
  std::mt19937_64 rng(29);
  for (int trial = 0; trial < 10; ++trial) {
    const Network net = random_net({3, 8, 2}, rng);
    const Matrix x = testing::uniform_matrix(3, 6, 1.0, rng);
    const RegularizerWeights w{0.7, 0.0};
    GradientBundle g = GradientBundle::zeros_like(net, x.cols());
    add_regularizer_gradient(net, batch_intervals(net, x, 0.2, std::nullopt), w, g);
    const double h = 1e-6;
    for (Eigen::Index r = 0; r < 8; ++r)
      for (Eigen::Index c = 0; c < 3; ++c) {
        Network plus = net;
        Network minus = net;
        plus.layer(0).weight(r, c) += h;
        minus.layer(0).weight(r, c) -= h;
        const double fd = (regularized_loss(0.0, plus, batch_intervals(plus, x, 0.2, std::nullopt), w) -
                           regularized_loss(0.0, minus, batch_intervals(minus, x, 0.2, std::nullopt), w)) /
                          (2.0 * h);
        CHECK(g.weight[0](r, c) == doctest::Approx(fd).epsilon(1e-4).scale(1e-6));
      }
  }
}

TEST_CASE("stability regularisation does not add unstable neurons") {
  double with_rs = 0.0;
  double without = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Dataset data = make_synthetic(SyntheticKind::TwoMoons, 300, 100 + seed);
    std::mt19937_64 rng(seed);
    const Network init = random_net({2, 16, 16, 2}, rng);
    TrainConfig cfg = toy_train(20, seed);
    cfg.regularizer_eps = 0.05;
    without += mean_unstable(train(init, data, cfg), data, 0.05);
    cfg.regularizer.rs = 5.0;
    with_rs += mean_unstable(train(init, data, cfg), data, 0.05);
  }
  MESSAGE("mean unstable per example: rs ", with_rs / 5.0, ", none ", without / 5.0);
  CHECK(with_rs <= without);
}

TEST_CASE("adversarial training raises robust accuracy") {
  const Dataset data = mixed_features(400, 31);
  std::mt19937_64 rng(31);
  const Network init = random_net({21, 16, 2}, rng);
  AttackConfig attack = toy_attack(0.5);
  attack.clip = std::nullopt;
  const Network standard = train(init, data, toy_train(30));
  const Network robust = train(init, data, toy_train(30), attack);
  const double ra_standard = robust_accuracy(standard, data, attack);
  const double ra_robust = robust_accuracy(robust, data, attack);
  MESSAGE("RA standard ", ra_standard, ", adversarial ", ra_robust);
  CHECK(ra_robust >= ra_standard + 10.0);
  CHECK(ra_robust <= standard_accuracy(robust, data));
}

TEST_CASE("small weight pruning") {
  std::mt19937_64 rng(37);
  const Network net = random_net({3, 10, 10, 2}, rng);
  CHECK(same_params(small_weight_prune(net, 0.0), net));
  const Network all = small_weight_prune(net, 100.0);
  for (std::size_t k = 0; k < all.num_layers(); ++k) {
    CHECK(all.layer(k).weight.isZero(0.0));
    CHECK(all.layer(k).bias == net.layer(k).bias);
  }
  const double t = 0.3;
  const Network pruned = small_weight_prune(net, t);
  std::vector<AffineLayer> manual;
  std::vector<std::vector<Activation>> acts;
  for (std::size_t k = 0; k < net.num_layers(); ++k) {
    AffineLayer l = net.layer(k);
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c)
        if (std::abs(l.weight(r, c)) < t) l.weight(r, c) = 0.0;
    manual.push_back(l);
  }
  for (std::size_t h = 0; h < net.num_hidden_layers(); ++h) acts.push_back(net.activations(h));
  const Network expect(manual, acts);
  for (int i = 0; i < 20; ++i) {
    const Vector x = testing::uniform_vector(3, -1.0, 1.0, rng);
    CHECK(forward(pruned, x).logits == forward(expect, x).logits);
  }
  CHECK_THROWS_AS(small_weight_prune(net, -1.0), DomainError);
}

TEST_CASE("accuracy helpers") {
  const Dataset data = separable(100, 41);
  std::mt19937_64 rng(41);
  const Network net = train(random_net({2, 8, 2}, rng), data, toy_train(30));
  AttackConfig a = toy_attack(0.0);
  CHECK(robust_accuracy(net, data, a) == standard_accuracy(net, data));
  a = toy_attack(0.3);
  CHECK(robust_accuracy(net, data, a) <= standard_accuracy(net, data));
}
