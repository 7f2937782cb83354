#include "nn/archive.hpp"

#include <cstring>
#include <fstream>

namespace gencdr {

using nlohmann::json;

const ArchiveEntry& Archive::at(const std::string& name) const {
  auto it = arrays.find(name);
  if (it == arrays.end())
    throw Error(ErrorCode::kIntegrity, "archive is missing array " + name);
  return it->second;
}

void save_params(const std::filesystem::path& path, std::span<const Param* const> params,
                 const json& meta) {
  json manifest;
  manifest["version"] = 1;
  manifest["meta"] = meta;
  json arrays = json::array();
  for (const Param* p : params) {
    arrays.push_back({{"name", p->name},
                      {"rows", p->value.rows()},
                      {"cols", p->value.cols()},
                      {"frozen", p->frozen}});
  }
  manifest["arrays"] = std::move(arrays);
  std::string mbytes = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  out.write(kArchiveMagic, sizeof kArchiveMagic);
  uint64_t mlen = mbytes.size();
  out.write(reinterpret_cast<const char*>(&mlen), sizeof mlen);
  out.write(mbytes.data(), static_cast<std::streamsize>(mbytes.size()));
  for (const Param* p : params) {
    out.write(reinterpret_cast<const char*>(p->value.data()),
              static_cast<std::streamsize>(sizeof(double) * p->value.size()));
  }
  if (!out) throw Error(ErrorCode::kIo, "failed writing " + path.string());
}

Archive load_params(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  char magic[sizeof kArchiveMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kArchiveMagic, sizeof magic) != 0)
    throw Error(ErrorCode::kIntegrity, path.string() + " is not a parameter archive");
  uint64_t mlen = 0;
  in.read(reinterpret_cast<char*>(&mlen), sizeof mlen);
  if (!in || mlen > (1ull << 32))
    throw Error(ErrorCode::kIntegrity, "corrupt manifest length in " + path.string());
  std::string mbytes(mlen, '\0');
  in.read(mbytes.data(), static_cast<std::streamsize>(mlen));
  if (!in) throw Error(ErrorCode::kIntegrity, "truncated manifest in " + path.string());
  json manifest;
  try {
    manifest = json::parse(mbytes);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kIntegrity, std::string("bad archive manifest: ") + e.what());
  }
  if (manifest.value("version", 0) != 1)
    throw Error(ErrorCode::kIntegrity, "unsupported archive version in " + path.string());

  Archive archive;
  archive.meta = manifest.value("meta", json::object());
  for (const auto& a : manifest.at("arrays")) {
    std::string name = a.at("name").get<std::string>();
    long rows = a.at("rows").get<long>();
    long cols = a.at("cols").get<long>();
    if (rows < 0 || cols < 0)
      throw Error(ErrorCode::kIntegrity, "negative shape for array " + name);
    ArchiveEntry entry;
    entry.value.resize(rows, cols);
    entry.frozen = a.value("frozen", false);
    in.read(reinterpret_cast<char*>(entry.value.data()),
            static_cast<std::streamsize>(sizeof(double) * entry.value.size()));
    if (!in)
      throw Error(ErrorCode::kIntegrity, "truncated payload for array " + name + " in " +
                                             path.string());
    if (archive.arrays.count(name))
      throw Error(ErrorCode::kIntegrity, "duplicate array " + name + " in archive");
    archive.order.push_back(name);
    archive.arrays.emplace(std::move(name), std::move(entry));
  }
  return archive;
}

void restore_params(const Archive& archive, const ParamList& params) {
  for (Param* p : params) {
    const ArchiveEntry& e = archive.at(p->name);
    if (e.value.rows() != p->value.rows() || e.value.cols() != p->value.cols())
      throw Error(ErrorCode::kShape,
                  strf("archive array %s has shape %ldx%ld, expected %ldx%ld", p->name.c_str(),
                       long(e.value.rows()), long(e.value.cols()), long(p->value.rows()),
                       long(p->value.cols())));
    p->value = e.value;
    p->frozen = e.frozen;
    p->grad.setZero();
  }
}

}  // namespace gencdr
