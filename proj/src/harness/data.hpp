#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "rec/vocab.hpp"

namespace gencdr {

// ---------------------------------------------------------------------------
// Catalog and interaction log
// ---------------------------------------------------------------------------

struct ItemRecord {
  std::string item_id;
  std::string domain;
  Vec embedding;
};

// Immutable item catalog: items sorted by id, domains sorted and unique,
// one shared embedding dimensionality.
class Catalog {
 public:
  Catalog() = default;
  static Catalog build(std::vector<ItemRecord> items);

  const std::vector<ItemRecord>& items() const { return items_; }
  const std::vector<std::string>& domains() const { return domains_; }
  int dim() const { return dim_; }
  bool has(const std::string& item_id) const;
  const ItemRecord& at(const std::string& item_id) const;

  // Row-per-item matrix and the parallel id/domain columns, in catalog order.
  Mat embedding_matrix() const;
  std::vector<std::string> ids() const;
  std::vector<std::string> item_domains() const;
  // Indices (into items()) of one domain's items.
  std::vector<long> domain_indices(const std::string& domain) const;

 private:
  std::vector<ItemRecord> items_;
  std::map<std::string, size_t> index_;
  std::vector<std::string> domains_;
  int dim_ = 0;
};

// One user's full cross-domain history in canonical order.  Canonicalization
// stable-sorts a user's events by raw timestamp (file order breaks ties) and
// then replaces every timestamp with the event's position, so timestamps are
// strictly increasing within each user afterwards.
struct UserHistory {
  std::string user_id;
  std::vector<Event> events;
};

struct InteractionLog {
  std::vector<UserHistory> users;  // sorted by user_id
  long total_events = 0;

  const UserHistory* find(const std::string& user_id) const;
};

struct Dataset {
  Catalog catalog;
  InteractionLog log;
};

// Reads `items.jsonl` ({"item_id","domain","embedding"} per line) and
// `interactions.jsonl` ({"user_id","item_id","domain","ts"} per line) and
// builds canonical per-user histories.  Malformed lines raise parse errors
// and unknown items referential errors, both naming the file and line.
Dataset ingest(const std::filesystem::path& items_file,
               const std::filesystem::path& interactions_file);

// ---------------------------------------------------------------------------
// Leave-last-out split
// ---------------------------------------------------------------------------

struct EvalQuery {
  std::string user_id;
  std::string domain;
  std::string target_item;
  std::vector<Event> context;  // the user's mixed history before the target
};

// Per user and domain with at least three events in that domain, the last
// event is the test target and the second-to-last the validation target;
// everything else is training data.  Eval contexts carry the user's full
// cross-domain history before the target, so a test context includes the
// validation item but training sequences contain no eval target at all.
struct SplitSpec {
  std::vector<std::vector<Event>> train_sequences;  // per user, mixed history
  std::map<std::string, std::vector<std::vector<Event>>> train_by_domain;
  std::vector<EvalQuery> validation;
  std::vector<EvalQuery> test;
  std::map<std::string, int> eval_users;      // users contributing targets
  std::map<std::string, int> excluded_users;  // too short in that domain
};

SplitSpec split_leave_last_out(const InteractionLog& log);

// ---------------------------------------------------------------------------
// Ranking metrics (single relevant item)
// ---------------------------------------------------------------------------

// 1 when the target sits in the top k of the ranked list, else 0.
int recall_at_k(const std::vector<std::string>& ranked, const std::string& target, int k);

// 1/log2(rank + 1) for the target's 1-indexed rank when rank <= k, else 0.
double ndcg_at_k(const std::vector<std::string>& ranked, const std::string& target, int k);

// ---------------------------------------------------------------------------
// Synthetic cross-domain dataset
// ---------------------------------------------------------------------------

// Planted-structure generator.  Concepts are latent cluster centers; a
// configurable fraction is shared across domains and the rest are private to
// one domain.  Item embeddings are their concept vector plus a per-domain
// shift of the configured magnitude plus isotropic noise.  Specialist users
// walk a domain-local concept chain inside their home domain; cross-domain
// users alternate domains while walking a chain over the shared concepts.
// The two chains order the shared concepts differently, so domain-specific
// behavior is genuinely different from cross-domain behavior.
struct SynthConfig {
  int domains = 2;
  int users = 800;
  int items_per_domain = 1000;
  int concepts = 20;              // per domain
  double shared_fraction = 0.4;   // fraction of each domain's concepts shared
  double domain_shift = 1.0;      // magnitude of the per-domain mean shift
  int embedding_dim = 24;
  double noise = 0.15;            // sigma of the per-item embedding noise
  int seq_min = 6;                // events per domain per user, inclusive
  int seq_max = 12;
  double specialist_fraction = 0.5;
  double explore = 0.1;           // chance of a uniform concept jump per step
  uint64_t seed = 7;
};

struct SynthPaths {
  std::filesystem::path items;
  std::filesystem::path interactions;
  std::filesystem::path labels;
};

// Writes items.jsonl, interactions.jsonl and labels.jsonl (ground-truth
// concept and user-type labels) into out_dir.  Byte-identical output for
// identical configs.
SynthPaths synth_generate(const SynthConfig& cfg, const std::filesystem::path& out_dir);

}  // namespace gencdr
