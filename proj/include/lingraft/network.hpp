#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace lingraft {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

// Hidden neurons share one flat id space: layer-major, offset-minor.
using NeuronId = std::size_t;

struct NeuronRef {
  std::size_t layer = 0;   // hidden layer index (0 = first hidden layer)
  std::size_t offset = 0;  // position inside that layer
};

struct AffineLayer {
  Matrix weight;  // out × in
  Vector bias;    // out

  Eigen::Index in_dim() const { return weight.cols(); }
  Eigen::Index out_dim() const { return weight.rows(); }
};

struct Activation {
  enum class Kind { ReLU, GraftedLinear };

  Kind kind = Kind::ReLU;
  double slope = 0.0;
  double intercept = 0.0;

  static Activation relu() { return {}; }
  static Activation grafted(double slope, double intercept) {
    return {Kind::GraftedLinear, slope, intercept};
  }

  bool is_grafted() const { return kind == Kind::GraftedLinear; }

  double apply(double z) const {
    if (is_grafted()) return slope * z + intercept;
    return z > 0.0 ? z : 0.0;
  }

  bool operator==(const Activation&) const = default;
};

// Fully-connected feed-forward classifier. The last layer produces logits and
// carries no activation; every hidden neuron owns its own Activation.
class Network {
 public:
  Network() = default;
  explicit Network(std::vector<AffineLayer> layers);
  Network(std::vector<AffineLayer> layers, std::vector<std::vector<Activation>> activations);

  // He-initialised all-ReLU network; widths = {input, hidden..., output}.
  static Network random(std::span<const int> widths, std::mt19937_64& rng);

  Eigen::Index input_dim() const { return layers_.front().in_dim(); }
  Eigen::Index output_dim() const { return layers_.back().out_dim(); }
  std::size_t num_layers() const { return layers_.size(); }
  std::size_t num_hidden_layers() const { return layers_.size() - 1; }
  std::size_t num_hidden_neurons() const { return offsets_.back(); }
  std::size_t num_grafted() const;
  std::vector<int> widths() const;

  const std::vector<AffineLayer>& layers() const { return layers_; }
  const AffineLayer& layer(std::size_t i) const { return layers_[i]; }
  AffineLayer& layer(std::size_t i) { return layers_[i]; }

  const std::vector<Activation>& activations(std::size_t hidden_layer) const {
    return activations_[hidden_layer];
  }
  std::vector<Activation>& activations(std::size_t hidden_layer) { return activations_[hidden_layer]; }
  const Activation& activation(NeuronId id) const;
  Activation& activation(NeuronId id);

  // First flat id of a hidden layer.
  std::size_t layer_offset(std::size_t hidden_layer) const { return offsets_[hidden_layer]; }
  NeuronRef locate(NeuronId id) const;
  NeuronId id_of(NeuronRef ref) const { return offsets_[ref.layer] + ref.offset; }

  // Throws StructuralError / DomainError when shapes or values are invalid.
  void validate() const;

  bool operator==(const Network& other) const;

 private:
  void index_neurons();

  std::vector<AffineLayer> layers_;
  std::vector<std::vector<Activation>> activations_;
  std::vector<std::size_t> offsets_{0};
};

// Single-example evaluation with every intermediate value.
struct ForwardPass {
  Vector logits;
  std::vector<Vector> preacts;   // one per layer, preacts.back() == logits
  std::vector<Vector> postacts;  // one per hidden layer
};

ForwardPass forward(const Network& net, const Vector& x);

// Batched evaluation, one example per column.
struct BatchTrace {
  std::vector<Matrix> inputs;   // inputs[i] feeds layer i; inputs[0] is the batch
  std::vector<Matrix> preacts;  // preacts[i] = W_i inputs[i] + b_i
  const Matrix& logits() const { return preacts.back(); }
};

BatchTrace forward_batch(const Network& net, const Matrix& x);
Matrix predict(const Network& net, const Matrix& x);

// Reverse-mode derivatives. Parameter gradients are summed over the batch;
// input and post-activation gradients are kept per example (one column each).
struct GradientBundle {
  std::vector<Matrix> weight;
  std::vector<Vector> bias;
  std::vector<Vector> slope;      // per hidden layer; zero for ReLU neurons
  std::vector<Vector> intercept;  // per hidden layer; zero for ReLU neurons
  Matrix input;
  std::vector<Matrix> postact;    // d loss / d post-activation, per hidden layer

  static GradientBundle zeros_like(const Network& net, Eigen::Index batch);
};

GradientBundle backward(const Network& net, const Vector& x, const Vector& loss_grad);
GradientBundle backward_batch(const Network& net, const BatchTrace& trace, const Matrix& loss_grad);

}  // namespace lingraft
