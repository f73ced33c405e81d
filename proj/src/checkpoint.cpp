// SPDX-License-Identifier: Apache-2.0
#include "dora/checkpoint.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>

#include "dora/fsio.hpp"

namespace dora {

namespace fs = std::filesystem;
using nlohmann::json;

const char* role_name(Role r) {
  switch (r) {
    case Role::W0: return "W0";
    case Role::m: return "m";
    case Role::B: return "B";
    case Role::A: return "A";
    case Role::lambda_b: return "lambda_b";
    case Role::lambda_d: return "lambda_d";
    case Role::full: return "full";
  }
  return "?";
}

namespace {

std::optional<Role> role_from_name(const std::string& s) {
  for (Role r : {Role::W0, Role::m, Role::B, Role::A, Role::lambda_b, Role::lambda_d, Role::full}) {
    if (s == role_name(r)) return r;
  }
  return std::nullopt;
}

[[noreturn]] void fail(const std::string& context, const std::string& msg) {
  throw IoError("checkpoint: " + context + ": " + msg);
}

const json& require_field(const json& j, const char* key, const std::string& context) {
  const auto it = j.find(key);
  if (it == j.end()) fail(context, std::string("missing field '") + key + "'");
  return *it;
}

}  // namespace

std::string double_to_hex(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

double hex_to_double(const std::string& s, const std::string& context) {
  if (s.empty()) fail(context, "empty float literal");
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size()) fail(context, "bad float literal '" + s + "'");
  if (!std::isfinite(v)) fail(context, "non-finite value '" + s + "'");
  return v;
}

json checkpoint_to_json(const Checkpoint& c) {
  json j;
  j["format_version"] = c.format_version;
  j["method_tag"] = c.method_tag;
  j["step"] = c.step;
  j["seed"] = c.seed;
  j["config"] = c.config_echo;
  json layers = json::array();
  for (const TensorEntry& e : c.layers) {
    json entry;
    entry["name"] = e.name;
    entry["role"] = role_name(e.role);
    entry["rows"] = e.data.rows();
    entry["cols"] = e.data.cols();
    json data = json::array();
    for (double v : e.data.data()) data.push_back(double_to_hex(v));
    entry["data"] = std::move(data);
    layers.push_back(std::move(entry));
  }
  j["layers"] = std::move(layers);
  return j;
}

namespace {

// Shape and role-set coherence across the tensors of one layer.
void validate_layer_group(const std::string& name,
                          const std::map<Role, const Matrix*>& group,
                          const std::string& context) {
  std::set<Role> roles;
  for (const auto& [r, _] : group) roles.insert(r);

  const auto has = [&](Role r) { return roles.count(r) > 0; };
  const std::string where = context + ": layer '" + name + "'";

  static const std::vector<std::set<Role>> valid_sets = {
      {Role::W0},
      {Role::full},
      {Role::W0, Role::m},
      {Role::W0, Role::B, Role::A},
      {Role::W0, Role::m, Role::B, Role::A},
      {Role::W0, Role::B, Role::A, Role::lambda_b, Role::lambda_d},
      {Role::W0, Role::m, Role::B, Role::A, Role::lambda_b, Role::lambda_d},
  };
  if (std::find(valid_sets.begin(), valid_sets.end(), roles) == valid_sets.end()) {
    std::string list;
    for (Role r : roles) list += std::string(list.empty() ? "" : ",") + role_name(r);
    throw IoError("checkpoint: " + where + ": role set {" + list +
                  "} matches no adaptation variant");
  }

  if (has(Role::W0)) {
    const Matrix& w0 = *group.at(Role::W0);
    const std::size_t d = w0.rows();
    const std::size_t k = w0.cols();
    if (has(Role::m)) {
      const Matrix& m = *group.at(Role::m);
      if (m.rows() != 1 || m.cols() != k) {
        throw IoError("checkpoint: " + where + ": m is " + m.shape_str() + ", expected 1x" +
                      std::to_string(k));
      }
    }
    if (has(Role::B)) {
      const Matrix& b = *group.at(Role::B);
      const Matrix& a = *group.at(Role::A);
      if (b.rows() != d) {
        throw IoError("checkpoint: " + where + ": B is " + b.shape_str() + ", expected " +
                      std::to_string(d) + " rows");
      }
      if (a.cols() != k || a.rows() != b.cols()) {
        throw IoError("checkpoint: " + where + ": A is " + a.shape_str() + ", expected " +
                      std::to_string(b.cols()) + "x" + std::to_string(k));
      }
      if (has(Role::lambda_b)) {
        const Matrix& lb = *group.at(Role::lambda_b);
        const Matrix& ld = *group.at(Role::lambda_d);
        if (lb.rows() != d || lb.cols() != 1) {
          throw IoError("checkpoint: " + where + ": lambda_b is " + lb.shape_str() +
                        ", expected " + std::to_string(d) + "x1");
        }
        if (ld.rows() != 1 || ld.cols() != b.cols()) {
          throw IoError("checkpoint: " + where + ": lambda_d is " + ld.shape_str() +
                        ", expected 1x" + std::to_string(b.cols()));
        }
      }
    }
  }
}

void validate_checkpoint_struct(const Checkpoint& c, const std::string& context) {
  if (c.format_version != kCheckpointFormatVersion) {
    fail(context, "unsupported format_version " + std::to_string(c.format_version) +
                      "; supported: " + std::to_string(kCheckpointFormatVersion));
  }
  if (!variant_from_name(c.method_tag)) {
    fail(context, "unknown method_tag '" + c.method_tag + "'");
  }
  if (c.step < 0) fail(context, "negative step");
  if (c.layers.empty()) fail(context, "no layers");
  if (!c.config_echo.is_object()) fail(context, "config echo must be an object");

  std::set<std::pair<std::string, Role>> seen;
  std::map<std::string, std::map<Role, const Matrix*>> groups;
  for (const TensorEntry& e : c.layers) {
    if (e.name.empty()) fail(context, "empty layer name");
    if (e.data.rows() == 0 || e.data.cols() == 0) {
      fail(context, "layer '" + e.name + "' (" + role_name(e.role) + ") is empty");
    }
    if (!e.data.all_finite()) {
      fail(context, "layer '" + e.name + "' (" + role_name(e.role) + ") has non-finite entries");
    }
    if (!seen.insert({e.name, e.role}).second) {
      fail(context, "duplicate entry for layer '" + e.name + "' role " + role_name(e.role));
    }
    groups[e.name][e.role] = &e.data;
  }
  for (const auto& [name, group] : groups) validate_layer_group(name, group, context);
}

}  // namespace

Checkpoint checkpoint_from_json(const json& j, const std::string& context) {
  if (!j.is_object()) fail(context, "document root must be an object");
  Checkpoint c;

  const json& ver = require_field(j, "format_version", context);
  if (!ver.is_number_integer()) fail(context, "format_version must be an integer");
  c.format_version = ver.get<int>();
  if (c.format_version != kCheckpointFormatVersion) {
    fail(context, "unsupported format_version " + std::to_string(c.format_version) +
                      "; supported: " + std::to_string(kCheckpointFormatVersion));
  }

  const json& tag = require_field(j, "method_tag", context);
  if (!tag.is_string()) fail(context, "method_tag must be a string");
  c.method_tag = tag.get<std::string>();

  const json& step = require_field(j, "step", context);
  if (!step.is_number_integer()) fail(context, "step must be an integer");
  c.step = step.get<std::int64_t>();

  const json& seed = require_field(j, "seed", context);
  if (!seed.is_number_unsigned() && !seed.is_number_integer()) {
    fail(context, "seed must be an integer");
  }
  if (seed.is_number_integer() && !seed.is_number_unsigned() && seed.get<std::int64_t>() < 0) {
    fail(context, "seed must be nonnegative");
  }
  c.seed = seed.get<std::uint64_t>();

  const json& cfg = require_field(j, "config", context);
  if (!cfg.is_object()) fail(context, "config echo must be an object");
  c.config_echo = cfg;

  const json& layers = require_field(j, "layers", context);
  if (!layers.is_array()) fail(context, "layers must be an array");
  std::size_t idx = 0;
  for (const json& entry : layers) {
    const std::string where = context + ": layers[" + std::to_string(idx) + "]";
    if (!entry.is_object()) fail(where, "must be an object");
    TensorEntry e;
    const json& name = require_field(entry, "name", where);
    if (!name.is_string()) fail(where, "name must be a string");
    e.name = name.get<std::string>();
    const json& role = require_field(entry, "role", where);
    if (!role.is_string()) fail(where, "role must be a string");
    const auto r = role_from_name(role.get<std::string>());
    if (!r) fail(where, "unknown role '" + role.get<std::string>() + "'");
    e.role = *r;
    const json& rows = require_field(entry, "rows", where);
    const json& cols = require_field(entry, "cols", where);
    if (!rows.is_number_integer() || !cols.is_number_integer()) {
      fail(where, "rows/cols must be integers");
    }
    const std::int64_t nr = rows.get<std::int64_t>();
    const std::int64_t nc = cols.get<std::int64_t>();
    if (nr < 1 || nc < 1) fail(where, "rows/cols must be >= 1");
    const json& data = require_field(entry, "data", where);
    if (!data.is_array()) fail(where, "data must be an array");
    if (data.size() != static_cast<std::size_t>(nr * nc)) {
      fail(where, "data length " + std::to_string(data.size()) + " does not fill " +
                      std::to_string(nr) + "x" + std::to_string(nc));
    }
    std::vector<double> values;
    values.reserve(data.size());
    std::size_t di = 0;
    for (const json& v : data) {
      if (!v.is_string()) fail(where, "data[" + std::to_string(di) + "] must be a string");
      values.push_back(hex_to_double(v.get<std::string>(), where + ".data[" + std::to_string(di) + "]"));
      ++di;
    }
    e.data = Matrix(static_cast<std::size_t>(nr), static_cast<std::size_t>(nc), std::move(values));
    c.layers.push_back(std::move(e));
    ++idx;
  }

  validate_checkpoint_struct(c, context);
  return c;
}

void save_checkpoint(const Checkpoint& c, const fs::path& path) {
  const std::string name = path.filename().string();
  const std::string ext = kCheckpointExtension;
  if (name.size() <= ext.size() || name.substr(name.size() - ext.size()) != ext) {
    throw ConfigError("save_checkpoint: path must end with " + ext + ": " + path.string());
  }
  validate_checkpoint_struct(c, path.string());
  if (fs::exists(path)) {
    throw IoError("save_checkpoint: refusing to overwrite existing file " + path.string());
  }
  const json j = checkpoint_to_json(c);
  write_text_atomic(path, j.dump(1) + "\n", "save_checkpoint");
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_checkpoint: cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw IoError("load_checkpoint: " + path.string() + ": malformed JSON: " + e.what());
  }
  return checkpoint_from_json(j, path.string());
}

std::map<std::string, std::vector<Role>> role_sets(const Checkpoint& c) {
  std::map<std::string, std::vector<Role>> out;
  for (const TensorEntry& e : c.layers) out[e.name].push_back(e.role);
  for (auto& [_, v] : out) std::sort(v.begin(), v.end());
  return out;
}

namespace {

struct EchoAdapter {
  bool present = false;
  int rank = 0;
  double alpha = 0.0;
  double eps = kDefaultEps;
};

EchoAdapter read_echo_adapter(const json& echo, const std::string& context) {
  EchoAdapter out;
  const auto it = echo.find("adapter");
  if (it == echo.end() || !it->is_object()) return out;
  out.present = true;
  if (it->contains("rank") && (*it)["rank"].is_number_integer()) {
    out.rank = (*it)["rank"].get<int>();
  }
  if (it->contains("alpha") && (*it)["alpha"].is_number()) {
    out.alpha = (*it)["alpha"].get<double>();
  }
  if (it->contains("eps") && (*it)["eps"].is_number()) {
    const double e = (*it)["eps"].get<double>();
    if (e <= 0.0) fail(context, "config echo adapter.eps must be positive");
    out.eps = e;
  }
  return out;
}

}  // namespace

std::map<std::string, AdapterLayer> reconstruct_layers(const Checkpoint& c) {
  const std::string context = "reconstruct_layers (method " + c.method_tag + ")";
  validate_checkpoint_struct(c, context);
  const EchoAdapter echo = read_echo_adapter(c.config_echo, context);

  std::map<std::string, std::map<Role, const Matrix*>> groups;
  for (const TensorEntry& e : c.layers) groups[e.name][e.role] = &e.data;

  std::map<std::string, AdapterLayer> out;
  for (const auto& [name, group] : groups) {
    const auto has = [&](Role r) { return group.count(r) > 0; };
    AdapterLayer l;
    l.config.seed = c.seed;
    l.config.eps = echo.present ? echo.eps : kDefaultEps;

    if (has(Role::full)) {
      l.config.variant = Variant::FT;
      l.W0 = *group.at(Role::full);
      l.W_full = *group.at(Role::full);
    } else if (!has(Role::m) && !has(Role::B)) {
      // Frozen plain layer; an FT layer whose weight never moved fits it.
      l.config.variant = Variant::FT;
      l.W0 = *group.at(Role::W0);
      l.W_full = *group.at(Role::W0);
    } else {
      l.W0 = *group.at(Role::W0);
      if (has(Role::B)) {
        const Matrix& b = *group.at(Role::B);
        l.config.rank = static_cast<int>(b.cols());
        if (has(Role::lambda_b)) {
          l.config.variant = has(Role::m) ? Variant::DVoRA : Variant::VeRA;
          l.B_shared = b;
          l.A_shared = *group.at(Role::A);
          l.lambda_b = *group.at(Role::lambda_b);
          l.lambda_d = *group.at(Role::lambda_d);
        } else {
          if (has(Role::m)) {
            l.config.variant =
                c.method_tag == "DoRADetached" ? Variant::DoRADetached : Variant::DoRA;
          } else {
            l.config.variant = Variant::LoRA;
          }
          l.B = b;
          l.A = *group.at(Role::A);
          if (!echo.present) {
            fail(context, "layer '" + name +
                              "': low-rank roles need config echo adapter {rank, alpha}");
          }
          if (echo.rank != l.config.rank) {
            fail(context, "layer '" + name + "': config echo rank " + std::to_string(echo.rank) +
                              " vs stored factor rank " + std::to_string(l.config.rank));
          }
          l.config.alpha = echo.alpha;
        }
      } else {
        l.config.variant = Variant::MagnitudeOnly;
      }
      if (has(Role::m)) l.m = RowVector::from_matrix(*group.at(Role::m));
    }
    out.emplace(name, std::move(l));
  }
  return out;
}

std::map<std::string, Matrix> to_effective(const Checkpoint& c) {
  std::map<std::string, Matrix> out;
  for (const auto& [name, layer] : reconstruct_layers(c)) out[name] = merge(layer);
  return out;
}

}  // namespace dora
