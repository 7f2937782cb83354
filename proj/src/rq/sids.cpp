#include "rq/sids.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace gencdr {

SidTable assign_sids(const std::vector<std::string>& item_ids, const Mat& latents,
                     const CodebookSet& codebooks) {
  if (static_cast<long>(item_ids.size()) != latents.rows())
    throw Error(ErrorCode::kShape, "item id list and latent rows disagree");
  {
    std::set<std::string> uniq(item_ids.begin(), item_ids.end());
    if (uniq.size() != item_ids.size())
      throw Error(ErrorCode::kIntegrity, "duplicate item ids in catalog");
  }
  // Group by code tuple; ids sorted within a group get ascending suffixes.
  std::map<std::vector<int>, std::vector<std::string>> by_codes;
  for (size_t i = 0; i < item_ids.size(); ++i) {
    QuantizeResult q = residual_quantize(latents.row(static_cast<long>(i)).transpose(), codebooks);
    by_codes[q.codes].push_back(item_ids[i]);
  }
  SidTable out;
  for (auto& [codes, ids] : by_codes) {
    std::sort(ids.begin(), ids.end());
    for (size_t j = 0; j < ids.size(); ++j)
      out.emplace_back(ids[j], SemanticId{codes, static_cast<int>(j)});
  }
  std::sort(out.begin(), out.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  return out;
}

SidTable assign_sids(const std::vector<std::string>& item_ids, const Mat& embeddings,
                     const RqVae& tokenizer) {
  if (!tokenizer.frozen())
    throw Error(ErrorCode::kState, "semantic ids must come from a frozen tokenizer");
  Mat latents = tokenizer.encode_batch(embeddings);
  return assign_sids(item_ids, latents, tokenizer.codebooks);
}

void write_sids_tsv(const std::filesystem::path& path, const SidTable& sids) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  for (const auto& [id, sid] : sids) {
    out << id;
    for (int c : sid.codes) out << '\t' << c;
    out << '\t' << sid.dedup << '\n';
  }
  if (!out) throw Error(ErrorCode::kIo, "failed writing " + path.string());
}

SidTable read_sids_tsv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  SidTable out;
  std::set<std::string> seen_ids;
  std::set<std::vector<int>> seen_sids;  // codes + dedup flattened
  std::string line;
  size_t expected_cols = 0;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, '\t')) fields.push_back(field);
    if (fields.size() < 3)
      throw Error(ErrorCode::kParse,
                  strf("%s:%d: expected item, codes and dedup", path.string().c_str(), lineno));
    if (expected_cols == 0) expected_cols = fields.size();
    if (fields.size() != expected_cols)
      throw Error(ErrorCode::kParse,
                  strf("%s:%d: inconsistent column count", path.string().c_str(), lineno));
    SemanticId sid;
    std::vector<int> key;
    try {
      for (size_t i = 1; i + 1 < fields.size(); ++i) {
        sid.codes.push_back(std::stoi(fields[i]));
        key.push_back(sid.codes.back());
      }
      sid.dedup = std::stoi(fields.back());
      key.push_back(sid.dedup);
    } catch (const std::exception&) {
      throw Error(ErrorCode::kParse, strf("%s:%d: non-numeric code", path.string().c_str(), lineno));
    }
    if (!seen_ids.insert(fields[0]).second)
      throw Error(ErrorCode::kIntegrity, "duplicate item id " + fields[0] + " in " + path.string());
    if (!seen_sids.insert(key).second)
      throw Error(ErrorCode::kIntegrity,
                  "duplicate semantic id on line " + std::to_string(lineno) + " of " + path.string());
    out.emplace_back(fields[0], std::move(sid));
  }
  return out;
}

}  // namespace gencdr
