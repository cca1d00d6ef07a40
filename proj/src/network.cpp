#include "lingraft/network.hpp"

#include <cmath>
#include <string>
#include <unordered_set>

#include "lingraft/errors.hpp"
#include "lingraft/graft_plan.hpp"

namespace lingraft {

namespace {

bool all_finite(const Matrix& m) { return m.allFinite(); }

}  // namespace

Network::Network(std::vector<AffineLayer> layers) : layers_(std::move(layers)) {
  if (layers_.empty()) throw StructuralError("network needs at least one layer");
  for (std::size_t i = 0; i + 1 < layers_.size(); ++i) {
    activations_.emplace_back(static_cast<std::size_t>(layers_[i].out_dim()), Activation::relu());
  }
  index_neurons();
  validate();
}

Network::Network(std::vector<AffineLayer> layers, std::vector<std::vector<Activation>> activations)
    : layers_(std::move(layers)), activations_(std::move(activations)) {
  if (layers_.empty()) throw StructuralError("network needs at least one layer");
  index_neurons();
  validate();
}

Network Network::random(std::span<const int> widths, std::mt19937_64& rng) {
  if (widths.size() < 2) throw StructuralError("need at least input and output widths");
  std::vector<AffineLayer> layers;
  for (std::size_t i = 1; i < widths.size(); ++i) {
    if (widths[i - 1] <= 0 || widths[i] <= 0) throw StructuralError("widths must be positive");
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / widths[i - 1]));
    AffineLayer layer{Matrix(widths[i], widths[i - 1]), Vector::Zero(widths[i])};
    // Column-major fill keeps the draw order independent of Eigen internals.
    for (Eigen::Index c = 0; c < layer.weight.cols(); ++c)
      for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) layer.weight(r, c) = normal(rng);
    layers.push_back(std::move(layer));
  }
  return Network(std::move(layers));
}

void Network::index_neurons() {
  offsets_.assign(1, 0);
  for (const auto& acts : activations_) offsets_.push_back(offsets_.back() + acts.size());
}

std::size_t Network::num_grafted() const {
  std::size_t n = 0;
  for (const auto& acts : activations_)
    for (const auto& a : acts) n += a.is_grafted() ? 1 : 0;
  return n;
}

std::vector<int> Network::widths() const {
  std::vector<int> w{static_cast<int>(input_dim())};
  for (const auto& l : layers_) w.push_back(static_cast<int>(l.out_dim()));
  return w;
}

const Activation& Network::activation(NeuronId id) const {
  const auto ref = locate(id);
  return activations_[ref.layer][ref.offset];
}

Activation& Network::activation(NeuronId id) {
  const auto ref = locate(id);
  return activations_[ref.layer][ref.offset];
}

NeuronRef Network::locate(NeuronId id) const {
  if (id >= num_hidden_neurons()) {
    throw UsageError("neuron id " + std::to_string(id) + " out of range");
  }
  std::size_t layer = 0;
  while (offsets_[layer + 1] <= id) ++layer;
  return {layer, id - offsets_[layer]};
}

void Network::validate() const {
  if (activations_.size() + 1 != layers_.size()) {
    throw StructuralError("activation table must cover exactly the hidden layers");
  }
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    if (l.weight.rows() != l.bias.size()) {
      throw StructuralError("layer " + std::to_string(i) + ": bias length does not match weight rows");
    }
    if (l.weight.rows() == 0 || l.weight.cols() == 0) {
      throw StructuralError("layer " + std::to_string(i) + " is empty");
    }
    if (i > 0 && layers_[i - 1].out_dim() != l.in_dim()) {
      throw StructuralError("layer " + std::to_string(i) + ": input width does not chain");
    }
    if (!all_finite(l.weight) || !l.bias.allFinite()) {
      throw DomainError("layer " + std::to_string(i) + " has non-finite parameters");
    }
    if (i + 1 < layers_.size()) {
      if (static_cast<Eigen::Index>(activations_[i].size()) != l.out_dim()) {
        throw StructuralError("layer " + std::to_string(i) + ": activation count mismatch");
      }
      for (const auto& a : activations_[i]) {
        if (!std::isfinite(a.slope) || !std::isfinite(a.intercept)) {
          throw DomainError("non-finite grafted activation parameters");
        }
      }
    }
  }
}

bool Network::operator==(const Network& other) const {
  if (layers_.size() != other.layers_.size() || activations_ != other.activations_) return false;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& a = layers_[i];
    const auto& b = other.layers_[i];
    if (a.weight.rows() != b.weight.rows() || a.weight.cols() != b.weight.cols()) return false;
    if (a.weight != b.weight || a.bias != b.bias) return false;
  }
  return true;
}

ForwardPass forward(const Network& net, const Vector& x) {
  if (x.size() != net.input_dim()) {
    throw StructuralError("input has length " + std::to_string(x.size()) + ", network expects " +
                          std::to_string(net.input_dim()));
  }
  if (!x.allFinite()) throw DomainError("non-finite input");

  ForwardPass out;
  Vector h = x;
  for (std::size_t i = 0; i < net.num_layers(); ++i) {
    const auto& layer = net.layer(i);
    Vector z = layer.weight * h + layer.bias;
    out.preacts.push_back(z);
    if (i + 1 == net.num_layers()) break;
    const auto& acts = net.activations(i);
    for (Eigen::Index j = 0; j < z.size(); ++j) z[j] = acts[j].apply(z[j]);
    out.postacts.push_back(z);
    h = std::move(z);
  }
  out.logits = out.preacts.back();
  return out;
}

BatchTrace forward_batch(const Network& net, const Matrix& x) {
  if (x.rows() != net.input_dim()) throw StructuralError("batch rows do not match input_dim");
  if (!x.allFinite()) throw DomainError("non-finite input");

  BatchTrace trace;
  trace.inputs.push_back(x);
  for (std::size_t i = 0; i < net.num_layers(); ++i) {
    const auto& layer = net.layer(i);
    Matrix z = layer.weight * trace.inputs.back();
    z.colwise() += layer.bias;
    if (i + 1 < net.num_layers()) {
      const auto& acts = net.activations(i);
      Matrix h(z.rows(), z.cols());
      for (Eigen::Index c = 0; c < z.cols(); ++c)
        for (Eigen::Index r = 0; r < z.rows(); ++r) h(r, c) = acts[r].apply(z(r, c));
      trace.inputs.push_back(std::move(h));
    }
    trace.preacts.push_back(std::move(z));
  }
  return trace;
}

Matrix predict(const Network& net, const Matrix& x) { return forward_batch(net, x).logits(); }

GradientBundle GradientBundle::zeros_like(const Network& net, Eigen::Index batch) {
  GradientBundle g;
  for (std::size_t i = 0; i < net.num_layers(); ++i) {
    const auto& l = net.layer(i);
    g.weight.push_back(Matrix::Zero(l.out_dim(), l.in_dim()));
    g.bias.push_back(Vector::Zero(l.out_dim()));
    if (i + 1 < net.num_layers()) {
      g.slope.push_back(Vector::Zero(l.out_dim()));
      g.intercept.push_back(Vector::Zero(l.out_dim()));
      g.postact.push_back(Matrix::Zero(l.out_dim(), batch));
    }
  }
  g.input = Matrix::Zero(net.input_dim(), batch);
  return g;
}

GradientBundle backward_batch(const Network& net, const BatchTrace& trace, const Matrix& loss_grad) {
  const Eigen::Index batch = trace.inputs.front().cols();
  if (loss_grad.rows() != net.output_dim() || loss_grad.cols() != batch) {
    throw StructuralError("loss gradient shape does not match logits");
  }
  if (trace.preacts.size() != net.num_layers()) throw StructuralError("trace does not match network");

  GradientBundle g = GradientBundle::zeros_like(net, batch);
  Matrix delta = loss_grad;  // d loss / d preacts of the current layer
  for (std::size_t i = net.num_layers(); i-- > 0;) {
    const auto& layer = net.layer(i);
    g.weight[i].noalias() = delta * trace.inputs[i].transpose();
    g.bias[i] = delta.rowwise().sum();
    Matrix upstream = layer.weight.transpose() * delta;
    if (i == 0) {
      g.input = std::move(upstream);
      break;
    }
    const std::size_t h = i - 1;
    const auto& acts = net.activations(h);
    const Matrix& z = trace.preacts[h];
    g.postact[h] = upstream;
    Matrix next(upstream.rows(), batch);
    for (Eigen::Index r = 0; r < upstream.rows(); ++r) {
      const auto& a = acts[r];
      if (a.is_grafted()) {
        double ds = 0.0;
        double di = 0.0;
        for (Eigen::Index c = 0; c < batch; ++c) {
          ds += upstream(r, c) * z(r, c);
          di += upstream(r, c);
          next(r, c) = upstream(r, c) * a.slope;
        }
        g.slope[h][r] = ds;
        g.intercept[h][r] = di;
      } else {
        for (Eigen::Index c = 0; c < batch; ++c) next(r, c) = z(r, c) > 0.0 ? upstream(r, c) : 0.0;
      }
    }
    delta = std::move(next);
  }
  return g;
}

GradientBundle backward(const Network& net, const Vector& x, const Vector& loss_grad) {
  if (loss_grad.size() != net.output_dim()) throw StructuralError("loss gradient length mismatch");
  const BatchTrace trace = forward_batch(net, Matrix(x));
  return backward_batch(net, trace, Matrix(loss_grad));
}

Network apply_graft(const Network& net, const GraftPlan& plan) {
  Network out = net;
  std::unordered_set<NeuronId> seen;
  for (NeuronId id : plan.neurons) {
    if (id >= net.num_hidden_neurons()) {
      throw UsageError("graft plan references invalid neuron " + std::to_string(id));
    }
    if (!seen.insert(id).second) throw UsageError("graft plan lists neuron " + std::to_string(id) + " twice");
    Activation& a = out.activation(id);
    if (a.is_grafted()) throw UsageError("neuron " + std::to_string(id) + " is already grafted");
    a = Activation::grafted(plan.init_slope, plan.init_intercept);
  }
  out.validate();
  return out;
}

}  // namespace lingraft
