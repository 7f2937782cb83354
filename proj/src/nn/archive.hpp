#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "nn/param.hpp"

namespace gencdr {

// Checkpoint container: magic, JSON manifest (array names, shapes, freeze
// flags, plus free-form model metadata), then raw row-major f64 payloads in
// manifest order.  Everything little-endian.
inline constexpr char kArchiveMagic[8] = {'G', 'C', 'D', 'R', 'P', 'A', 'R', '1'};

struct ArchiveEntry {
  Mat value;
  bool frozen = false;
};

struct Archive {
  nlohmann::json meta;
  std::vector<std::string> order;
  std::map<std::string, ArchiveEntry> arrays;

  const ArchiveEntry& at(const std::string& name) const;
  bool has(const std::string& name) const { return arrays.count(name) != 0; }
};

void save_params(const std::filesystem::path& path, std::span<const Param* const> params,
                 const nlohmann::json& meta);
Archive load_params(const std::filesystem::path& path);

// Copies archive values into matching params by name.  Every param must be
// present with the right shape; freeze flags are restored as stored.
void restore_params(const Archive& archive, const ParamList& params);

}  // namespace gencdr
