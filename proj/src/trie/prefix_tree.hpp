#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nn/common.hpp"

namespace gencdr {

// One item's token path: the M codebook tokens followed by the disambiguation
// token (depth M+1 overall), already translated into whatever token alphabet
// the caller decodes with.
struct SidPath {
  std::string item_id;
  std::vector<int> tokens;
};

// Immutable per-domain trie over valid semantic-ID sequences.  Stored as a
// flat node array with per-node sorted child slices so lookup is a binary
// search and traversal touches contiguous memory.
class PrefixTree {
 public:
  struct ChildEdge {
    int32_t token;
    uint32_t node;
  };

  static constexpr uint32_t kRoot = 0;

  // `paths` need not be sorted; all must share one length (the tree depth).
  // A repeated full path or item id violates sid-map injectivity.
  static PrefixTree build(std::string domain, std::vector<SidPath> paths);

  const std::string& domain() const { return domain_; }
  int depth() const { return depth_; }
  size_t node_count() const { return nodes_.size(); }
  size_t item_count() const { return items_.size(); }

  std::span<const ChildEdge> children(uint32_t node) const;
  // -1 when `token` is not a child of `node`.
  int64_t child(uint32_t node, int token) const;
  bool is_leaf(uint32_t node) const;
  const std::string& leaf_item(uint32_t node) const;

  // Follows `prefix` from the root; throws invalid-prefix if it leaves the tree.
  uint32_t walk(std::span<const int> prefix) const;
  // Exact child-token set of the prefix node (sorted ascending).
  std::vector<int> valid_next(std::span<const int> prefix) const;

  // All (token path, item_id) pairs in lexicographic path order.
  std::vector<SidPath> enumerate() const;

  void save(const std::filesystem::path& path) const;
  static PrefixTree load(const std::filesystem::path& path);

 private:
  struct Node {
    uint32_t child_begin = 0;
    uint32_t child_count = 0;
    int32_t item = -1;  // leaf binding, index into items_
  };

  std::string domain_;
  int depth_ = 0;
  std::vector<Node> nodes_;
  std::vector<ChildEdge> edges_;
  std::vector<std::string> items_;
};

// Masked softmax: the logits restricted to the prefix's valid next tokens;
// probability mass off the valid set is exactly zero.
Vec constrained_step(const Vec& logits, const PrefixTree& tree, std::span<const int> prefix);

}  // namespace gencdr
