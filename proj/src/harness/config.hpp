#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "nn/common.hpp"

namespace gencdr {

// The complete configuration tree with every pipeline hyperparameter filled
// in.  Architecture and regularization values follow the reference settings
// (expert count, VIB weights, quantization loss weights, commitment
// coefficient); data sizes and training schedules are sized so the default
// synthetic run finishes on a single desktop core.
nlohmann::json default_config();

// Recursive merge: objects merge key-by-key, scalars and arrays replace.
// Keys in `over` that the base lacks are added.
nlohmann::json deep_merge(nlohmann::json base, const nlohmann::json& over);

// Parses a JSON config file and merges it over default_config().  Unknown
// keys are rejected so typos cannot silently fall back to defaults.
nlohmann::json load_config(const std::filesystem::path& path);

// Same validation for an already-parsed override fragment.
nlohmann::json apply_overrides(nlohmann::json base, const nlohmann::json& over);

// Order-independent 16-hex-digit digest of the canonical serialization.
std::string config_hash(const nlohmann::json& cfg);

// Typed accessors for dotted paths ("rec.experts.rank"); missing paths or
// wrong types raise config errors naming the path.
double cfg_num(const nlohmann::json& cfg, const std::string& path);
int cfg_int(const nlohmann::json& cfg, const std::string& path);
bool cfg_bool(const nlohmann::json& cfg, const std::string& path);
std::string cfg_str(const nlohmann::json& cfg, const std::string& path);
const nlohmann::json& cfg_node(const nlohmann::json& cfg, const std::string& path);

}  // namespace gencdr
