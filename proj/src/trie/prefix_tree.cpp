#include "trie/prefix_tree.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include "nn/ops.hpp"

namespace gencdr {

namespace {
constexpr char kTrieMagic[8] = {'G', 'C', 'D', 'R', 'T', 'R', 'I', 'E'};
constexpr uint32_t kTrieVersion = 1;

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T read_pod(std::ifstream& in, const std::string& what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw Error(ErrorCode::kIntegrity, "truncated trie file while reading " + what);
  return v;
}

void write_string(std::ofstream& out, const std::string& s) {
  write_pod<uint32_t>(out, static_cast<uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::ifstream& in, const std::string& what) {
  auto len = read_pod<uint32_t>(in, what);
  if (len > (1u << 24)) throw Error(ErrorCode::kIntegrity, "implausible string length in trie");
  std::string s(len, '\0');
  in.read(s.data(), len);
  if (!in) throw Error(ErrorCode::kIntegrity, "truncated trie file while reading " + what);
  return s;
}
}  // namespace

PrefixTree PrefixTree::build(std::string domain, std::vector<SidPath> paths) {
  if (paths.empty())
    throw Error(ErrorCode::kConstraint, "cannot build an empty prefix tree for " + domain);
  const size_t depth = paths.front().tokens.size();
  if (depth == 0) throw Error(ErrorCode::kShape, "zero-length token paths");
  for (const SidPath& p : paths)
    if (p.tokens.size() != depth)
      throw Error(ErrorCode::kShape,
                  strf("token path for %s has length %zu, expected %zu", p.item_id.c_str(),
                       p.tokens.size(), depth));

  std::sort(paths.begin(), paths.end(), [](const SidPath& a, const SidPath& b) {
    if (a.tokens != b.tokens) return a.tokens < b.tokens;
    return a.item_id < b.item_id;
  });
  for (size_t i = 1; i < paths.size(); ++i) {
    if (paths[i].tokens == paths[i - 1].tokens)
      throw Error(ErrorCode::kIntegrity,
                  "duplicate semantic id shared by " + paths[i - 1].item_id + " and " +
                      paths[i].item_id);
    if (paths[i].item_id == paths[i - 1].item_id)
      throw Error(ErrorCode::kIntegrity, "item " + paths[i].item_id + " has two semantic ids");
  }

  PrefixTree tree;
  tree.domain_ = std::move(domain);
  tree.depth_ = static_cast<int>(depth);
  tree.nodes_.push_back(Node{});

  // Recursive construction over sorted path ranges: children appear in token
  // order, so each node's edge slice is naturally sorted.
  struct Frame {
    size_t lo, hi, level;
    uint32_t node;
  };
  // Depth-first with an explicit stack; edges for a node are assigned in one
  // contiguous block before descending.
  std::vector<Frame> stack{{0, paths.size(), 0, kRoot}};
  while (!stack.empty()) {
    Frame f = stack.back();
    stack.pop_back();
    if (f.level == depth) {
      tree.nodes_[f.node].item = static_cast<int32_t>(tree.items_.size());
      tree.items_.push_back(paths[f.lo].item_id);
      continue;
    }
    uint32_t begin = static_cast<uint32_t>(tree.edges_.size());
    tree.nodes_[f.node].child_begin = begin;
    // First pass: carve the child ranges.
    std::vector<Frame> kids;
    size_t i = f.lo;
    while (i < f.hi) {
      int tok = paths[i].tokens[f.level];
      size_t j = i;
      while (j < f.hi && paths[j].tokens[f.level] == tok) ++j;
      uint32_t child_node = static_cast<uint32_t>(tree.nodes_.size() + kids.size());
      tree.edges_.push_back(ChildEdge{tok, child_node});
      kids.push_back(Frame{i, j, f.level + 1, child_node});
      i = j;
    }
    tree.nodes_[f.node].child_count = static_cast<uint32_t>(tree.edges_.size()) - begin;
    tree.nodes_.resize(tree.nodes_.size() + kids.size());
    // Push in reverse so the leftmost child is processed first (cosmetic; any
    // order yields the same tree since node ids were fixed above).
    for (auto it = kids.rbegin(); it != kids.rend(); ++it) stack.push_back(*it);
  }
  return tree;
}

std::span<const PrefixTree::ChildEdge> PrefixTree::children(uint32_t node) const {
  if (node >= nodes_.size()) throw Error(ErrorCode::kLookup, "trie node out of range");
  const Node& n = nodes_[node];
  return {edges_.data() + n.child_begin, n.child_count};
}

int64_t PrefixTree::child(uint32_t node, int token) const {
  auto kids = children(node);
  auto it = std::lower_bound(kids.begin(), kids.end(), token,
                             [](const ChildEdge& e, int t) { return e.token < t; });
  if (it == kids.end() || it->token != token) return -1;
  return static_cast<int64_t>(it->node);
}

bool PrefixTree::is_leaf(uint32_t node) const {
  if (node >= nodes_.size()) throw Error(ErrorCode::kLookup, "trie node out of range");
  return nodes_[node].item >= 0;
}

const std::string& PrefixTree::leaf_item(uint32_t node) const {
  if (!is_leaf(node)) throw Error(ErrorCode::kState, "trie node is not a leaf");
  return items_[static_cast<size_t>(nodes_[node].item)];
}

uint32_t PrefixTree::walk(std::span<const int> prefix) const {
  uint32_t node = kRoot;
  for (size_t i = 0; i < prefix.size(); ++i) {
    int64_t next = child(node, prefix[i]);
    if (next < 0)
      throw Error(ErrorCode::kInvalidPrefix,
                  strf("token %d at position %zu is not a valid continuation in domain %s",
                       prefix[i], i, domain_.c_str()));
    node = static_cast<uint32_t>(next);
  }
  return node;
}

std::vector<int> PrefixTree::valid_next(std::span<const int> prefix) const {
  uint32_t node = walk(prefix);
  std::vector<int> out;
  for (const ChildEdge& e : children(node)) out.push_back(e.token);
  return out;
}

std::vector<SidPath> PrefixTree::enumerate() const {
  std::vector<SidPath> out;
  std::vector<int> prefix;
  // Iterative DFS in child (token) order.
  struct Frame {
    uint32_t node;
    size_t next_child = 0;
  };
  std::vector<Frame> stack{{kRoot}};
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (is_leaf(f.node)) {
      out.push_back(SidPath{leaf_item(f.node), prefix});
      stack.pop_back();
      if (!prefix.empty()) prefix.pop_back();
      continue;
    }
    auto kids = children(f.node);
    if (f.next_child >= kids.size()) {
      stack.pop_back();
      if (!prefix.empty()) prefix.pop_back();
      continue;
    }
    const ChildEdge& e = kids[f.next_child++];
    prefix.push_back(e.token);
    stack.push_back(Frame{e.node});
  }
  return out;
}

void PrefixTree::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  out.write(kTrieMagic, sizeof kTrieMagic);
  write_pod(out, kTrieVersion);
  write_string(out, domain_);
  write_pod<uint32_t>(out, static_cast<uint32_t>(depth_ - 1));  // M codebook levels
  write_pod<uint32_t>(out, static_cast<uint32_t>(nodes_.size()));
  write_pod<uint32_t>(out, static_cast<uint32_t>(edges_.size()));
  write_pod<uint32_t>(out, static_cast<uint32_t>(items_.size()));
  for (const Node& n : nodes_) {
    write_pod(out, n.child_begin);
    write_pod(out, n.child_count);
    write_pod(out, n.item);
  }
  for (const ChildEdge& e : edges_) {
    write_pod(out, e.token);
    write_pod(out, e.node);
  }
  for (const std::string& s : items_) write_string(out, s);
  if (!out) throw Error(ErrorCode::kIo, "failed writing " + path.string());
}

PrefixTree PrefixTree::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  char magic[sizeof kTrieMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kTrieMagic, sizeof magic) != 0)
    throw Error(ErrorCode::kIntegrity, path.string() + " is not a trie file");
  if (read_pod<uint32_t>(in, "version") != kTrieVersion)
    throw Error(ErrorCode::kIntegrity, "unsupported trie version in " + path.string());
  PrefixTree tree;
  tree.domain_ = read_string(in, "domain");
  tree.depth_ = static_cast<int>(read_pod<uint32_t>(in, "levels")) + 1;
  auto node_count = read_pod<uint32_t>(in, "node count");
  auto edge_count = read_pod<uint32_t>(in, "edge count");
  auto item_count = read_pod<uint32_t>(in, "item count");
  tree.nodes_.resize(node_count);
  for (Node& n : tree.nodes_) {
    n.child_begin = read_pod<uint32_t>(in, "node");
    n.child_count = read_pod<uint32_t>(in, "node");
    n.item = read_pod<int32_t>(in, "node");
    if (n.child_begin + n.child_count > edge_count)
      throw Error(ErrorCode::kIntegrity, "trie node references edges out of range");
    if (n.item >= 0 && static_cast<uint32_t>(n.item) >= item_count)
      throw Error(ErrorCode::kIntegrity, "trie leaf references item out of range");
  }
  tree.edges_.resize(edge_count);
  for (ChildEdge& e : tree.edges_) {
    e.token = read_pod<int32_t>(in, "edge");
    e.node = read_pod<uint32_t>(in, "edge");
    if (e.node >= node_count)
      throw Error(ErrorCode::kIntegrity, "trie edge references node out of range");
  }
  tree.items_.reserve(item_count);
  for (uint32_t i = 0; i < item_count; ++i) tree.items_.push_back(read_string(in, "item"));
  return tree;
}

Vec constrained_step(const Vec& logits, const PrefixTree& tree, std::span<const int> prefix) {
  std::vector<int> valid = tree.valid_next(prefix);
  return masked_softmax(logits, valid);
}

}  // namespace gencdr
