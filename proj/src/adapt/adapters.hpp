#pragma once

#include <filesystem>

#include "rq/rq_vae.hpp"

namespace gencdr {

// One low-rank pair per linear layer of the frozen universal encoder, per
// domain.  Rank/alpha/dropout are shared across domains; base weights never
// move.
struct AdapterConfig {
  int rank = 64;
  double alpha = 32.0;
  double dropout = 0.05;
  int epochs = 50;
  double lr = 5e-5;
  int batch = 256;
};

struct AdapterEpochLog {
  double l_adapter = 0.0;  // mean reconstruction loss through quantization
};

class DomainAdapterSet {
 public:
  DomainAdapterSet() = default;
  DomainAdapterSet(RqVae* tokenizer, AdapterConfig cfg = {});

  const AdapterConfig& config() const { return cfg_; }
  RqVae& tokenizer() const;

  bool has(const std::string& domain) const;
  const std::vector<std::string>& domains() const { return domains_; }
  void add_domain(const std::string& domain, Rng& rng);

  // Forward through the adapted encoder E_theta_d.  Distinct domains are never
  // co-active: exactly one adapter participates.  `dropout_rng` non-null
  // enables adapter dropout (training only).
  Mat encode_specific(const Mat& x, const std::string& domain, Rng* dropout_rng = nullptr,
                      MlpCoder::Cache* cache = nullptr) const;

  void collect_domain(const std::string& domain, ParamList& out);
  void freeze_domain(const std::string& domain);
  void freeze_all();
  bool all_frozen() const;
  uint64_t domain_hash(const std::string& domain) const;

  void save(const std::filesystem::path& path) const;
  // Attaches the stored domains to `tokenizer`'s encoder and restores weights.
  static DomainAdapterSet load(const std::filesystem::path& path, RqVae& tokenizer);

 private:
  RqVae* tok_ = nullptr;
  AdapterConfig cfg_;
  std::vector<std::string> domains_;  // insertion order
};

// Self-supervised reconstruction training of one domain's adapter on the
// frozen tokenizer: minimizes mean ||x - D(Q(E_theta_d(x)))||^2 over the
// domain's items, with gradients passed straight through the quantizer.
// Creates the adapter if the domain is not attached yet.  Only theta_d moves.
std::vector<AdapterEpochLog> train_adapter(DomainAdapterSet& adapters, const std::string& domain,
                                           const Mat& items, uint64_t seed);

}  // namespace gencdr
