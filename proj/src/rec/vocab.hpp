#pragma once

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "rq/sids.hpp"
#include "trie/prefix_tree.hpp"

namespace gencdr {

// Token vocabulary for serializing semantic ids into model input streams.
// Index layout (all blocks disjoint, in this order): one block per codebook
// level, the dedup-suffix block, then the specials BOS, EOS, ITEM-SEP, and
// one DOMAIN-TAG per domain.
class SidVocabulary {
 public:
  SidVocabulary() = default;
  SidVocabulary(std::vector<int> level_sizes, int dedup_count, std::vector<std::string> domains);

  // Sizes the dedup block from the largest suffix present in `sids`.
  static SidVocabulary from_sids(const std::vector<int>& level_sizes, const SidTable& sids,
                                 std::vector<std::string> domains);

  int code_token(int level, int code) const;
  int dedup_token(int suffix) const;
  int bos() const { return bos_; }
  int eos() const { return bos_ + 1; }
  int sep() const { return bos_ + 2; }
  int domain_tag(const std::string& domain) const;

  // The M code tokens followed by the dedup token.
  std::vector<int> sid_tokens(const SemanticId& sid) const;

  int size() const { return size_; }
  int levels() const { return static_cast<int>(level_sizes_.size()); }
  int level_size(int level) const;
  int dedup_count() const { return dedup_count_; }
  const std::vector<std::string>& domains() const { return domains_; }
  // Stream cost of one item: DOMAIN-TAG + M codes + dedup + ITEM-SEP.
  int tokens_per_item() const { return levels() + 3; }

  // Human-readable token name for reports: "L0:5", "DEDUP:1", "BOS", "DOM:books".
  std::string describe(int token) const;

  nlohmann::json to_json() const;
  static SidVocabulary from_json(const nlohmann::json& j);

 private:
  std::vector<int> level_sizes_;
  std::vector<int> level_offsets_;
  int dedup_count_ = 0;
  int dedup_offset_ = 0;
  int bos_ = 0;
  int size_ = 0;
  std::vector<std::string> domains_;
};

// One interaction event; sequences are ordered by (timestamp, then input
// order for ties).
struct Event {
  std::string item_id;
  std::string domain;
  int64_t timestamp = 0;
};

// Serializes a user profile for generation: BOS, then the most recent events
// (all domains interleaved chronologically, oldest dropped first to fit
// max_len) each rendered as DOMAIN-TAG + codes + dedup + ITEM-SEP, then the
// target domain's tag as the generation cue.
std::vector<int> encode_history(std::span<const Event> events, const SidTable& sids,
                                const SidVocabulary& vocab, const std::string& target_domain,
                                int max_len);

// Serializes a full profile for training: same item rendering, BOS prefix, no
// trailing target tag.
std::vector<int> encode_training_sequence(std::span<const Event> events, const SidTable& sids,
                                          const SidVocabulary& vocab, int max_len);

// Token path (codes then dedup) per item, the prefix-tree input.
std::vector<SidPath> sid_token_paths(const SidTable& sids, const SidVocabulary& vocab);

}  // namespace gencdr
