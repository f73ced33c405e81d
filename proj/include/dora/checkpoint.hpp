// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "dora/adapters.hpp"
#include "dora/matrix.hpp"

namespace dora {

inline constexpr int kCheckpointFormatVersion = 1;
inline constexpr const char* kCheckpointExtension = ".dckpt.json";

// Tensor roles inside a checkpoint. A layer's role set determines its
// variant on load:
//   {W0} frozen, {full} FT, {W0,m} MagnitudeOnly, {W0,B,A} LoRA,
//   {W0,m,B,A} DoRA (DoRADetached when the method tag says so),
//   {W0,B,A,lambda_b,lambda_d} VeRA, {W0,m,B,A,lambda_b,lambda_d} DVoRA.
enum class Role { W0, m, B, A, lambda_b, lambda_d, full };

const char* role_name(Role r);

struct TensorEntry {
  std::string name;  // layer name
  Role role = Role::W0;
  Matrix data;
};

struct Checkpoint {
  int format_version = kCheckpointFormatVersion;
  std::string method_tag;  // a variant_name() string
  std::int64_t step = 0;
  std::uint64_t seed = 0;
  std::vector<TensorEntry> layers;
  nlohmann::json config_echo = nlohmann::json::object();
};

// Serialization is JSON with every f64 as a hex-float literal ("%a"), so a
// save/load round trip is bit-exact. Save validates the checkpoint, refuses
// to overwrite an existing file, and requires the .dckpt.json extension.
void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);

// Load re-validates everything: format version, field types, data lengths,
// finiteness, role sets, and cross-tensor shape coherence. Malformed input
// throws IoError naming the offending field.
Checkpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json checkpoint_to_json(const Checkpoint& c);
Checkpoint checkpoint_from_json(const nlohmann::json& j, const std::string& context);

// Rebuilds an AdapterLayer per layer name from the role sets plus the config
// echo (rank/alpha for low-rank merges, eps for directional ones). Frozen
// and FT entries come back as FT layers so every layer can forward().
std::map<std::string, AdapterLayer> reconstruct_layers(const Checkpoint& c);

// Merged (deployment) weights for every layer.
std::map<std::string, Matrix> to_effective(const Checkpoint& c);

// Role sets per layer name, e.g. for deciding which layers are adapted.
std::map<std::string, std::vector<Role>> role_sets(const Checkpoint& c);

// Hex-float helpers (exact f64 round trip).
std::string double_to_hex(double v);
double hex_to_double(const std::string& s, const std::string& context);

}  // namespace dora
