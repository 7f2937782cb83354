#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "rq/rq_vae.hpp"

namespace gencdr {

// An item's generative identity: M codebook indices plus a disambiguation
// suffix (0 unless several items share the same codes).
struct SemanticId {
  std::vector<int> codes;
  int dedup = 0;

  bool operator==(const SemanticId& o) const { return codes == o.codes && dedup == o.dedup; }
};

using SidTable = std::vector<std::pair<std::string, SemanticId>>;

// Quantizes one latent per item and resolves collisions: items sharing codes
// get dedup suffixes 0, 1, 2, ... in ascending item_id order.  The result is
// sorted by item_id and injective over the catalog.
SidTable assign_sids(const std::vector<std::string>& item_ids, const Mat& latents,
                     const CodebookSet& codebooks);

// Same, but encoding raw item embeddings through a frozen tokenizer first.
SidTable assign_sids(const std::vector<std::string>& item_ids, const Mat& embeddings,
                     const RqVae& tokenizer);

void write_sids_tsv(const std::filesystem::path& path, const SidTable& sids);
SidTable read_sids_tsv(const std::filesystem::path& path);

}  // namespace gencdr
