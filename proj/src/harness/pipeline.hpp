#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "harness/config.hpp"
#include "harness/data.hpp"

namespace gencdr {

// ---------------------------------------------------------------------------
// Metrics report
// ---------------------------------------------------------------------------

struct DomainMetrics {
  std::string split;   // "validation" or "test"
  std::string domain;
  int users = 0;       // evaluated queries
  int excluded = 0;    // users with fewer than three events in this domain
  double recall5 = 0.0;
  double recall10 = 0.0;
  double ndcg5 = 0.0;
  double ndcg10 = 0.0;
  long invalid_sequences = 0;  // nonzero only without prefix-tree masking
};

struct MetricsReport {
  uint64_t seed = 0;
  std::string config_hash;
  std::vector<DomainMetrics> rows;  // validation rows then test rows, domains sorted

  std::string to_tsv() const;  // byte-stable: fixed columns, %.6f metrics
  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);

  const DomainMetrics& row(const std::string& split, const std::string& domain) const;
};

// ---------------------------------------------------------------------------
// Pipeline stages
// ---------------------------------------------------------------------------

// Stage names, in dependency order.
extern const std::vector<std::string> kAllStages;

// A workspace binds one configuration to one artifact directory.  Every
// stage writes its artifacts plus a meta.json recording the stage name and
// the config hash; a stage whose meta matches the current hash is skipped,
// a mismatching meta raises a stale-artifact error, and a missing upstream
// artifact raises a dependency error naming the stage to run.
class Workspace {
 public:
  Workspace(std::filesystem::path root, nlohmann::json config);

  const nlohmann::json& config() const { return config_; }
  const std::string& hash() const { return hash_; }
  const std::filesystem::path& root() const { return root_; }
  uint64_t seed() const { return seed_; }

  // The stages the configured ablation variant actually runs.
  std::vector<std::string> stage_plan() const;
  bool stage_done(const std::string& stage) const;
  void run_stage(const std::string& stage);
  MetricsReport run_pipeline();

  // Reads the evaluation report written by the evaluate stage.
  MetricsReport read_report() const;
  // Ranked recommendations for one user in one domain, as TSV
  // (rank, item_id, log_prob) with a header line.
  std::string recommend_tsv(const std::string& user_id, const std::string& domain, int k,
                            int beam) const;

 private:
  std::filesystem::path stage_dir(const std::string& stage) const;
  void write_meta(const std::string& stage) const;
  void require(const std::string& stage) const;  // kDependency when not done

  Dataset load_dataset() const;

  void run_synth_gen();
  void run_tokenizer_pretrain();
  void run_adapters_train();
  void run_router_train();
  void run_sids_assign();
  void run_trie_build();
  void run_rec_train_universal();
  void run_rec_train_specific();
  void run_user_router_train();
  void run_evaluate();

  std::filesystem::path root_;
  nlohmann::json config_;
  std::string hash_;
  uint64_t seed_ = 0;
  std::string ablation_;
};

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

// (config value, display name) for the six ablation variants, in report
// order.
const std::vector<std::pair<std::string, std::string>>& ablation_variants();

// Base config with one variant applied (both the `ablation` field and the
// hyperparameters the variant changes).
nlohmann::json make_variant_config(const nlohmann::json& base, const std::string& variant);

// Runs the full pipeline and the requested variants (every variant when
// `only_variant` is empty), each in its own sub-workspace, and returns a
// TSV table of test metrics per variant.
std::string run_ablation_table(const std::filesystem::path& root,
                               const nlohmann::json& base_config,
                               const std::string& only_variant = "");

}  // namespace gencdr
