#include "harness/config.hpp"

#include <fstream>

namespace gencdr {

nlohmann::json default_config() {
  return nlohmann::json{
      {"seed", 7},
      {"data",
       {{"items", ""},  // empty paths mean "generate the synthetic dataset"
        {"interactions", ""},
        {"synth",
         {{"domains", 2},
          {"users", 800},
          {"items_per_domain", 1000},
          {"concepts", 20},
          {"shared_fraction", 0.4},
          {"domain_shift", 1.0},
          {"embedding_dim", 24},
          {"noise", 0.15},
          {"seq_min", 4},
          {"seq_max", 7},
          {"specialist_fraction", 0.5},
          {"explore", 0.1}}}}},
      {"tokenizer",
       {{"latent_dim", 16},
        {"hidden", 64},
        {"levels", 3},
        {"codebook_size", 32},
        {"ctx_dim", 32},
        {"ctx_heads", 2},
        {"ctx_ff", 64},
        {"ctx_blocks", 2},
        {"pretrain",
         {{"mu", 1.0},
          {"lambda", 0.1},
          {"beta", 0.25},
          {"mask_rate", 0.0},  // non-positive selects the 1/levels default
          {"epochs", 40},
          {"lr", 1e-3},
          {"batch", 256}}}}},
      {"adapter",
       {{"rank", 16},
        {"alpha", 32.0},
        {"dropout", 0.05},
        {"epochs", 30},
        {"lr", 5e-5},
        {"batch", 256}}},
      {"item_router",
       {{"hidden", 64},
        {"d_r", 8},
        {"vib_weight", 1e-3},
        {"epochs", 20},
        {"lr", 1e-3},
        {"batch", 256}}},
      {"rec",
       {{"d_model", 64},
        {"num_heads", 4},
        {"d_ff", 256},
        {"num_blocks", 2},
        {"max_pos", 256},
        {"experts",
         {{"num_experts", 4}, {"rank", 8}, {"alpha", 16.0}, {"dropout", 0.05}}},
        {"specific", {{"rank", 8}, {"alpha", 16.0}, {"dropout", 0.05}}},
        {"universal_train", {{"epochs", 5}, {"lr", 1e-3}, {"batch", 8}}},
        {"specific_train", {{"epochs", 5}, {"lr", 3e-3}, {"batch", 8}}},
        {"moe_average", false}}},
      {"user_router",
       {{"hidden", 64},
        {"d_r", 8},
        {"vib_weight", 1e-3},
        {"epochs", 15},
        {"lr", 3e-3},
        {"batch", 16}}},
      {"decode",
       {{"k", 10}, {"beam", 20}, {"prefix_tree", true}, {"fuse_then_mask", false}}},
      {"evaluate", {{"splits", {"validation", "test"}}}},
      // One of: "", "no_mtm", "no_adapter", "no_specific",
      // "no_universal_experts", "no_moe_gate", "no_prefix_tree".
      {"ablation", ""}};
}

nlohmann::json deep_merge(nlohmann::json base, const nlohmann::json& over) {
  if (!base.is_object() || !over.is_object()) return over;
  for (auto it = over.begin(); it != over.end(); ++it) {
    if (base.contains(it.key()))
      base[it.key()] = deep_merge(base[it.key()], it.value());
    else
      base[it.key()] = it.value();
  }
  return base;
}

namespace {

void check_known_keys(const nlohmann::json& base, const nlohmann::json& over,
                      const std::string& prefix) {
  if (!over.is_object() || !base.is_object()) return;
  for (auto it = over.begin(); it != over.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key()))
      throw Error(ErrorCode::kConfig, "unknown configuration key '" + path + "'");
    check_known_keys(base[it.key()], it.value(), path);
  }
}

}  // namespace

nlohmann::json apply_overrides(nlohmann::json base, const nlohmann::json& over) {
  if (!over.is_object())
    throw Error(ErrorCode::kConfig, "configuration overrides must be a JSON object");
  check_known_keys(base, over, "");
  return deep_merge(std::move(base), over);
}

nlohmann::json load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open config " + path.string());
  nlohmann::json over;
  try {
    over = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, strf("config %s: %s", path.string().c_str(), e.what()));
  }
  return apply_overrides(default_config(), over);
}

std::string config_hash(const nlohmann::json& cfg) {
  // dump() serializes object keys in sorted order, so the digest is
  // independent of insertion order.
  return strf("%016llx",
              static_cast<unsigned long long>(fnv1a64(cfg.dump())));
}

const nlohmann::json& cfg_node(const nlohmann::json& cfg, const std::string& path) {
  const nlohmann::json* node = &cfg;
  size_t start = 0;
  while (start <= path.size()) {
    const size_t dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
    if (!node->is_object() || !node->contains(key))
      throw Error(ErrorCode::kConfig, "missing configuration key '" + path + "'");
    node = &(*node)[key];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  return *node;
}

double cfg_num(const nlohmann::json& cfg, const std::string& path) {
  const nlohmann::json& n = cfg_node(cfg, path);
  if (!n.is_number())
    throw Error(ErrorCode::kConfig, "configuration key '" + path + "' is not a number");
  return n.get<double>();
}

int cfg_int(const nlohmann::json& cfg, const std::string& path) {
  const nlohmann::json& n = cfg_node(cfg, path);
  if (!n.is_number_integer())
    throw Error(ErrorCode::kConfig, "configuration key '" + path + "' is not an integer");
  return n.get<int>();
}

bool cfg_bool(const nlohmann::json& cfg, const std::string& path) {
  const nlohmann::json& n = cfg_node(cfg, path);
  if (!n.is_boolean())
    throw Error(ErrorCode::kConfig, "configuration key '" + path + "' is not a boolean");
  return n.get<bool>();
}

std::string cfg_str(const nlohmann::json& cfg, const std::string& path) {
  const nlohmann::json& n = cfg_node(cfg, path);
  if (!n.is_string())
    throw Error(ErrorCode::kConfig, "configuration key '" + path + "' is not a string");
  return n.get<std::string>();
}

}  // namespace gencdr
