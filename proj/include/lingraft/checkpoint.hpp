#pragma once

#include <filesystem>

#include <nlohmann/json.hpp>

#include "lingraft/network.hpp"

namespace lingraft {

// Self-describing JSON checkpoint:
//   { "format": "lingraft-network", "version": 1, "input_dim": n,
//     "layers": [ { "shape": [rows, cols], "weight": [row-major], "bias": [...] } ],
//     "activations": [ [ { "tag": "relu"|"linear", "slope": a, "intercept": b } ] ] }
// Doubles are written in shortest round-trip form, so load(save(net)) == net.
nlohmann::json network_to_json(const Network& net);
Network network_from_json(const nlohmann::json& doc);

void save_network(const Network& net, const std::filesystem::path& path);
Network load_network(const std::filesystem::path& path);

// Shared by every JSON artefact writer.
void write_json_file(const nlohmann::json& doc, const std::filesystem::path& path);
nlohmann::json read_json_file(const std::filesystem::path& path);

}  // namespace lingraft
