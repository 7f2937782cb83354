#include "rec/vocab.hpp"

#include <algorithm>

namespace gencdr {

SidVocabulary::SidVocabulary(std::vector<int> level_sizes, int dedup_count,
                             std::vector<std::string> domains)
    : level_sizes_(std::move(level_sizes)),
      dedup_count_(dedup_count),
      domains_(std::move(domains)) {
  if (level_sizes_.empty())
    throw Error(ErrorCode::kConfig, "vocabulary needs at least one codebook level");
  int offset = 0;
  for (int k : level_sizes_) {
    if (k < 1) throw Error(ErrorCode::kConfig, "empty codebook level in vocabulary");
    level_offsets_.push_back(offset);
    offset += k;
  }
  if (dedup_count_ < 1) throw Error(ErrorCode::kConfig, "dedup block must hold at least suffix 0");
  dedup_offset_ = offset;
  bos_ = dedup_offset_ + dedup_count_;
  size_ = bos_ + 3 + static_cast<int>(domains_.size());
  for (size_t i = 0; i < domains_.size(); ++i)
    for (size_t j = i + 1; j < domains_.size(); ++j)
      if (domains_[i] == domains_[j])
        throw Error(ErrorCode::kConfig, "duplicate domain '" + domains_[i] + "' in vocabulary");
}

SidVocabulary SidVocabulary::from_sids(const std::vector<int>& level_sizes, const SidTable& sids,
                                       std::vector<std::string> domains) {
  int max_dedup = 0;
  for (const auto& [id, sid] : sids) max_dedup = std::max(max_dedup, sid.dedup);
  return SidVocabulary(level_sizes, max_dedup + 1, std::move(domains));
}

int SidVocabulary::code_token(int level, int code) const {
  if (level < 0 || level >= levels())
    throw Error(ErrorCode::kLookup, strf("level %d outside [0, %d)", level, levels()));
  if (code < 0 || code >= level_sizes_[static_cast<size_t>(level)])
    throw Error(ErrorCode::kLookup, strf("code %d outside level %d of size %d", code, level,
                                         level_sizes_[static_cast<size_t>(level)]));
  return level_offsets_[static_cast<size_t>(level)] + code;
}

int SidVocabulary::dedup_token(int suffix) const {
  if (suffix < 0 || suffix >= dedup_count_)
    throw Error(ErrorCode::kLookup,
                strf("dedup suffix %d outside block of size %d", suffix, dedup_count_));
  return dedup_offset_ + suffix;
}

int SidVocabulary::domain_tag(const std::string& domain) const {
  for (size_t i = 0; i < domains_.size(); ++i)
    if (domains_[i] == domain) return bos_ + 3 + static_cast<int>(i);
  throw Error(ErrorCode::kLookup, "unknown domain '" + domain + "' in vocabulary");
}

std::vector<int> SidVocabulary::sid_tokens(const SemanticId& sid) const {
  if (static_cast<int>(sid.codes.size()) != levels())
    throw Error(ErrorCode::kShape, strf("semantic id has %zu codes, vocabulary expects %d",
                                        sid.codes.size(), levels()));
  std::vector<int> out;
  out.reserve(static_cast<size_t>(levels()) + 1);
  for (int d = 0; d < levels(); ++d) out.push_back(code_token(d, sid.codes[static_cast<size_t>(d)]));
  out.push_back(dedup_token(sid.dedup));
  return out;
}

int SidVocabulary::level_size(int level) const {
  if (level < 0 || level >= levels())
    throw Error(ErrorCode::kLookup, strf("level %d outside [0, %d)", level, levels()));
  return level_sizes_[static_cast<size_t>(level)];
}

std::string SidVocabulary::describe(int token) const {
  if (token < 0 || token >= size_)
    throw Error(ErrorCode::kLookup, strf("token %d outside vocabulary of size %d", token, size_));
  for (int d = 0; d < levels(); ++d) {
    int off = level_offsets_[static_cast<size_t>(d)];
    if (token < off + level_sizes_[static_cast<size_t>(d)])
      return strf("L%d:%d", d, token - off);
  }
  if (token < bos_) return strf("DEDUP:%d", token - dedup_offset_);
  if (token == bos()) return "BOS";
  if (token == eos()) return "EOS";
  if (token == sep()) return "SEP";
  return "DOM:" + domains_[static_cast<size_t>(token - bos_ - 3)];
}

nlohmann::json SidVocabulary::to_json() const {
  return nlohmann::json{{"level_sizes", level_sizes_},
                        {"dedup_count", dedup_count_},
                        {"domains", domains_}};
}

SidVocabulary SidVocabulary::from_json(const nlohmann::json& j) {
  try {
    return SidVocabulary(j.at("level_sizes").get<std::vector<int>>(),
                         j.at("dedup_count").get<int>(),
                         j.at("domains").get<std::vector<std::string>>());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("bad vocabulary json: ") + e.what());
  }
}

namespace {

const SemanticId& lookup_sid(const SidTable& sids, const std::string& item_id) {
  auto it = std::lower_bound(sids.begin(), sids.end(), item_id,
                             [](const auto& entry, const std::string& id) {
                               return entry.first < id;
                             });
  if (it == sids.end() || it->first != item_id)
    throw Error(ErrorCode::kLookup, "no semantic id for item '" + item_id + "'");
  return it->second;
}

// Events in global chronological order (stable on timestamp ties), most
// recent `keep` of them.
std::vector<Event> recent_events(std::span<const Event> events, size_t keep) {
  std::vector<Event> ordered(events.begin(), events.end());
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const Event& a, const Event& b) { return a.timestamp < b.timestamp; });
  if (ordered.size() > keep) ordered.erase(ordered.begin(), ordered.end() - static_cast<long>(keep));
  return ordered;
}

void append_item(std::vector<int>& out, const Event& ev, const SidTable& sids,
                 const SidVocabulary& vocab) {
  out.push_back(vocab.domain_tag(ev.domain));
  for (int tok : vocab.sid_tokens(lookup_sid(sids, ev.item_id))) out.push_back(tok);
  out.push_back(vocab.sep());
}

}  // namespace

std::vector<int> encode_history(std::span<const Event> events, const SidTable& sids,
                                const SidVocabulary& vocab, const std::string& target_domain,
                                int max_len) {
  const int per_item = vocab.tokens_per_item();
  if (max_len < vocab.levels() + 3)
    throw Error(ErrorCode::kConfig,
                strf("max_len %d below the minimum %d", max_len, vocab.levels() + 3));
  // BOS and the trailing target tag always fit; whole items fill the rest.
  size_t keep = static_cast<size_t>(std::max(0, (max_len - 2) / per_item));
  std::vector<int> out{vocab.bos()};
  for (const Event& ev : recent_events(events, keep)) append_item(out, ev, sids, vocab);
  out.push_back(vocab.domain_tag(target_domain));
  return out;
}

std::vector<int> encode_training_sequence(std::span<const Event> events, const SidTable& sids,
                                          const SidVocabulary& vocab, int max_len) {
  const int per_item = vocab.tokens_per_item();
  if (max_len < per_item + 1)
    throw Error(ErrorCode::kConfig, strf("max_len %d cannot hold BOS and one item", max_len));
  size_t keep = static_cast<size_t>((max_len - 1) / per_item);
  std::vector<int> out{vocab.bos()};
  for (const Event& ev : recent_events(events, keep)) append_item(out, ev, sids, vocab);
  return out;
}

std::vector<SidPath> sid_token_paths(const SidTable& sids, const SidVocabulary& vocab) {
  std::vector<SidPath> out;
  out.reserve(sids.size());
  for (const auto& [id, sid] : sids) out.push_back(SidPath{id, vocab.sid_tokens(sid)});
  return out;
}

}  // namespace gencdr
