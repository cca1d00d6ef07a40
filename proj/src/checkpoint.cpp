#include "lingraft/checkpoint.hpp"

#include <fstream>

#include "lingraft/errors.hpp"

namespace lingraft {

using nlohmann::json;

json network_to_json(const Network& net) {
  json layers = json::array();
  for (const auto& l : net.layers()) {
    json weight = json::array();
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) weight.push_back(l.weight(r, c));
    json bias = json::array();
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) bias.push_back(l.bias[r]);
    layers.push_back({{"shape", {l.weight.rows(), l.weight.cols()}}, {"weight", weight}, {"bias", bias}});
  }
  json acts = json::array();
  for (std::size_t h = 0; h < net.num_hidden_layers(); ++h) {
    json row = json::array();
    for (const auto& a : net.activations(h)) {
      row.push_back({{"tag", a.is_grafted() ? "linear" : "relu"}, {"slope", a.slope}, {"intercept", a.intercept}});
    }
    acts.push_back(std::move(row));
  }
  return {{"format", "lingraft-network"},
          {"version", 1},
          {"input_dim", net.input_dim()},
          {"layers", layers},
          {"activations", acts}};
}

Network network_from_json(const json& doc) {
  try {
    if (doc.at("format") != "lingraft-network") throw StructuralError("not a lingraft network document");
    std::vector<AffineLayer> layers;
    for (const auto& jl : doc.at("layers")) {
      const auto rows = jl.at("shape").at(0).get<Eigen::Index>();
      const auto cols = jl.at("shape").at(1).get<Eigen::Index>();
      const auto& jw = jl.at("weight");
      const auto& jb = jl.at("bias");
      if (static_cast<Eigen::Index>(jw.size()) != rows * cols || static_cast<Eigen::Index>(jb.size()) != rows) {
        throw StructuralError("layer arrays do not match declared shape");
      }
      AffineLayer l{Matrix(rows, cols), Vector(rows)};
      for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) l.weight(r, c) = jw[r * cols + c].get<double>();
        l.bias[r] = jb[r].get<double>();
      }
      layers.push_back(std::move(l));
    }
    if (layers.empty()) throw StructuralError("checkpoint has no layers");
    if (doc.at("input_dim").get<Eigen::Index>() != layers.front().in_dim()) {
      throw StructuralError("input_dim does not match first layer");
    }
    std::vector<std::vector<Activation>> acts;
    for (const auto& jrow : doc.at("activations")) {
      std::vector<Activation> row;
      for (const auto& ja : jrow) {
        const auto tag = ja.at("tag").get<std::string>();
        if (tag == "relu") {
          row.push_back(Activation::relu());
        } else if (tag == "linear") {
          row.push_back(Activation::grafted(ja.at("slope").get<double>(), ja.at("intercept").get<double>()));
        } else {
          throw StructuralError("unknown activation tag '" + tag + "'");
        }
      }
      acts.push_back(std::move(row));
    }
    return Network(std::move(layers), std::move(acts));
  } catch (const json::exception& e) {
    throw StructuralError(std::string("malformed network checkpoint: ") + e.what());
  }
}

void write_json_file(const json& doc, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << doc.dump(2) << '\n';
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError("invalid JSON in " + path.string() + ": " + e.what(), e.byte);
  }
}

void save_network(const Network& net, const std::filesystem::path& path) {
  write_json_file(network_to_json(net), path);
}

Network load_network(const std::filesystem::path& path) { return network_from_json(read_json_file(path)); }

}  // namespace lingraft
