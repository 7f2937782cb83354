#include "harness/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

namespace gencdr {

// ---------------------------------------------------------------------------
// Catalog
// ---------------------------------------------------------------------------

Catalog Catalog::build(std::vector<ItemRecord> items) {
  Catalog c;
  std::sort(items.begin(), items.end(),
            [](const ItemRecord& a, const ItemRecord& b) { return a.item_id < b.item_id; });
  c.items_ = std::move(items);
  for (size_t i = 0; i < c.items_.size(); ++i) {
    const ItemRecord& it = c.items_[i];
    if (it.item_id.empty()) throw Error(ErrorCode::kInvalidArgument, "empty item id");
    if (it.domain.empty())
      throw Error(ErrorCode::kInvalidArgument, "item '" + it.item_id + "' has no domain");
    if (!c.index_.emplace(it.item_id, i).second)
      throw Error(ErrorCode::kIntegrity, "duplicate item id '" + it.item_id + "'");
    if (c.dim_ == 0) c.dim_ = static_cast<int>(it.embedding.size());
    if (it.embedding.size() != c.dim_ || c.dim_ == 0)
      throw Error(ErrorCode::kShape,
                  strf("item '%s' has a %ld-dimensional embedding, expected %d",
                       it.item_id.c_str(), long(it.embedding.size()), c.dim_));
    if (std::find(c.domains_.begin(), c.domains_.end(), it.domain) == c.domains_.end())
      c.domains_.push_back(it.domain);
  }
  std::sort(c.domains_.begin(), c.domains_.end());
  return c;
}

bool Catalog::has(const std::string& item_id) const { return index_.count(item_id) > 0; }

const ItemRecord& Catalog::at(const std::string& item_id) const {
  auto it = index_.find(item_id);
  if (it == index_.end())
    throw Error(ErrorCode::kLookup, "no item '" + item_id + "' in the catalog");
  return items_[it->second];
}

Mat Catalog::embedding_matrix() const {
  Mat m(static_cast<long>(items_.size()), dim_);
  for (size_t i = 0; i < items_.size(); ++i) m.row(static_cast<long>(i)) = items_[i].embedding;
  return m;
}

std::vector<std::string> Catalog::ids() const {
  std::vector<std::string> out;
  out.reserve(items_.size());
  for (const ItemRecord& it : items_) out.push_back(it.item_id);
  return out;
}

std::vector<std::string> Catalog::item_domains() const {
  std::vector<std::string> out;
  out.reserve(items_.size());
  for (const ItemRecord& it : items_) out.push_back(it.domain);
  return out;
}

std::vector<long> Catalog::domain_indices(const std::string& domain) const {
  if (std::find(domains_.begin(), domains_.end(), domain) == domains_.end())
    throw Error(ErrorCode::kLookup, "no domain '" + domain + "' in the catalog");
  std::vector<long> out;
  for (size_t i = 0; i < items_.size(); ++i)
    if (items_[i].domain == domain) out.push_back(static_cast<long>(i));
  return out;
}

const UserHistory* InteractionLog::find(const std::string& user_id) const {
  auto it = std::lower_bound(users.begin(), users.end(), user_id,
                             [](const UserHistory& u, const std::string& id) {
                               return u.user_id < id;
                             });
  if (it == users.end() || it->user_id != user_id) return nullptr;
  return &*it;
}

// ---------------------------------------------------------------------------
// Ingest
// ---------------------------------------------------------------------------

namespace {

// Reads one JSONL file, calling fn(line_no, parsed) per non-empty line.
template <typename Fn>
void for_each_json_line(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kParse,
                  strf("%s line %d: %s", path.filename().string().c_str(), line_no, e.what()));
    }
    fn(line_no, j);
  }
}

std::string field_str(const std::filesystem::path& path, int line_no, const nlohmann::json& j,
                      const char* key) {
  if (!j.contains(key) || !j[key].is_string())
    throw Error(ErrorCode::kParse, strf("%s line %d: missing string field \"%s\"",
                                        path.filename().string().c_str(), line_no, key));
  return j[key].get<std::string>();
}

}  // namespace

Dataset ingest(const std::filesystem::path& items_file,
               const std::filesystem::path& interactions_file) {
  std::vector<ItemRecord> items;
  for_each_json_line(items_file, [&](int line_no, const nlohmann::json& j) {
    ItemRecord rec;
    rec.item_id = field_str(items_file, line_no, j, "item_id");
    rec.domain = field_str(items_file, line_no, j, "domain");
    if (!j.contains("embedding") || !j["embedding"].is_array() || j["embedding"].empty())
      throw Error(ErrorCode::kParse,
                  strf("%s line %d: missing array field \"embedding\"",
                       items_file.filename().string().c_str(), line_no));
    const auto& arr = j["embedding"];
    rec.embedding = Vec(arr.size());
    for (size_t k = 0; k < arr.size(); ++k) {
      if (!arr[k].is_number())
        throw Error(ErrorCode::kParse, strf("%s line %d: embedding entry %zu is not a number",
                                            items_file.filename().string().c_str(), line_no, k));
      rec.embedding[static_cast<long>(k)] = arr[k].get<double>();
    }
    items.push_back(std::move(rec));
  });
  Dataset out;
  out.catalog = Catalog::build(std::move(items));

  struct RawEvent {
    std::string item_id;
    std::string domain;
    int64_t ts;
  };
  std::map<std::string, std::vector<RawEvent>> by_user;  // file order within user
  for_each_json_line(interactions_file, [&](int line_no, const nlohmann::json& j) {
    std::string user = field_str(interactions_file, line_no, j, "user_id");
    std::string item = field_str(interactions_file, line_no, j, "item_id");
    std::string domain = field_str(interactions_file, line_no, j, "domain");
    if (!j.contains("ts") || !j["ts"].is_number_integer())
      throw Error(ErrorCode::kParse,
                  strf("%s line %d: missing integer field \"ts\"",
                       interactions_file.filename().string().c_str(), line_no));
    if (!out.catalog.has(item))
      throw Error(ErrorCode::kReferential,
                  strf("%s line %d: unknown item '%s'",
                       interactions_file.filename().string().c_str(), line_no, item.c_str()));
    if (out.catalog.at(item).domain != domain)
      throw Error(ErrorCode::kReferential,
                  strf("%s line %d: item '%s' belongs to domain '%s', not '%s'",
                       interactions_file.filename().string().c_str(), line_no, item.c_str(),
                       out.catalog.at(item).domain.c_str(), domain.c_str()));
    by_user[user].push_back({std::move(item), std::move(domain), j["ts"].get<int64_t>()});
  });

  for (auto& [user, raw] : by_user) {
    std::stable_sort(raw.begin(), raw.end(),
                     [](const RawEvent& a, const RawEvent& b) { return a.ts < b.ts; });
    UserHistory h;
    h.user_id = user;
    h.events.reserve(raw.size());
    for (size_t i = 0; i < raw.size(); ++i)
      h.events.push_back({raw[i].item_id, raw[i].domain, static_cast<int64_t>(i)});
    out.log.total_events += static_cast<long>(h.events.size());
    out.log.users.push_back(std::move(h));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Split
// ---------------------------------------------------------------------------

SplitSpec split_leave_last_out(const InteractionLog& log) {
  SplitSpec spec;
  for (const UserHistory& user : log.users) {
    std::map<std::string, std::vector<size_t>> positions;  // domain -> event positions
    for (size_t i = 0; i < user.events.size(); ++i)
      positions[user.events[i].domain].push_back(i);

    std::vector<bool> held_out(user.events.size(), false);
    for (const auto& [domain, pos] : positions) {
      if (pos.size() < 3) {
        ++spec.excluded_users[domain];
        continue;
      }
      ++spec.eval_users[domain];
      const size_t val_pos = pos[pos.size() - 2];
      const size_t test_pos = pos[pos.size() - 1];
      held_out[val_pos] = held_out[test_pos] = true;

      EvalQuery val{user.user_id, domain, user.events[val_pos].item_id, {}};
      val.context.assign(user.events.begin(),
                         user.events.begin() + static_cast<long>(val_pos));
      spec.validation.push_back(std::move(val));

      EvalQuery test{user.user_id, domain, user.events[test_pos].item_id, {}};
      test.context.assign(user.events.begin(),
                          user.events.begin() + static_cast<long>(test_pos));
      spec.test.push_back(std::move(test));
    }

    std::vector<Event> train;
    for (size_t i = 0; i < user.events.size(); ++i)
      if (!held_out[i]) train.push_back(user.events[i]);
    if (train.size() >= 2) {
      for (const auto& [domain, pos] : positions) {
        std::vector<Event> local;
        for (const Event& e : train)
          if (e.domain == domain) local.push_back(e);
        if (local.size() >= 2) spec.train_by_domain[domain].push_back(std::move(local));
      }
      spec.train_sequences.push_back(std::move(train));
    }
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

int recall_at_k(const std::vector<std::string>& ranked, const std::string& target, int k) {
  if (k < 1) throw Error(ErrorCode::kInvalidArgument, strf("k must be positive, got %d", k));
  const size_t top = std::min(ranked.size(), static_cast<size_t>(k));
  for (size_t i = 0; i < top; ++i)
    if (ranked[i] == target) return 1;
  return 0;
}

double ndcg_at_k(const std::vector<std::string>& ranked, const std::string& target, int k) {
  if (k < 1) throw Error(ErrorCode::kInvalidArgument, strf("k must be positive, got %d", k));
  const size_t top = std::min(ranked.size(), static_cast<size_t>(k));
  for (size_t i = 0; i < top; ++i)
    if (ranked[i] == target) return 1.0 / std::log2(static_cast<double>(i) + 2.0);
  return 0.0;
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

namespace {

Vec gaussian_vec(Rng& rng, int dim, double scale) {
  Vec v(dim);
  for (int i = 0; i < dim; ++i) v[i] = scale * rng.gaussian();
  return v;
}

void check_synth(const SynthConfig& c) {
  if (c.domains < 1 || c.users < 1 || c.items_per_domain < 1 || c.concepts < 1 ||
      c.embedding_dim < 1)
    throw Error(ErrorCode::kConfig, "synthetic counts must be positive");
  if (!(c.shared_fraction >= 0.0 && c.shared_fraction <= 1.0))
    throw Error(ErrorCode::kConfig, strf("shared fraction %g outside [0, 1]", c.shared_fraction));
  if (!(c.specialist_fraction >= 0.0 && c.specialist_fraction <= 1.0))
    throw Error(ErrorCode::kConfig,
                strf("specialist fraction %g outside [0, 1]", c.specialist_fraction));
  if (!(c.explore >= 0.0 && c.explore <= 1.0))
    throw Error(ErrorCode::kConfig, strf("explore rate %g outside [0, 1]", c.explore));
  if (c.noise < 0.0 || c.domain_shift < 0.0)
    throw Error(ErrorCode::kConfig, "noise and shift magnitudes cannot be negative");
  if (c.seq_min < 1 || c.seq_max < c.seq_min)
    throw Error(ErrorCode::kConfig,
                strf("bad sequence length range [%d, %d]", c.seq_min, c.seq_max));
}

}  // namespace

SynthPaths synth_generate(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
  check_synth(cfg);
  std::filesystem::create_directories(out_dir);
  Rng rng(cfg.seed, "synth");

  const int shared = static_cast<int>(std::llround(cfg.shared_fraction * cfg.concepts));
  const int privates = cfg.concepts - shared;  // per domain
  const int total_concepts = shared + privates * cfg.domains;

  Rng crng = rng.fork("concepts");
  std::vector<Vec> concept_vecs;
  concept_vecs.reserve(static_cast<size_t>(total_concepts));
  for (int g = 0; g < total_concepts; ++g)
    concept_vecs.push_back(gaussian_vec(crng, cfg.embedding_dim, 1.0));

  // Global concept ids per domain: the shared block then this domain's
  // private block.
  std::vector<std::vector<int>> domain_concepts(static_cast<size_t>(cfg.domains));
  for (int d = 0; d < cfg.domains; ++d) {
    for (int s = 0; s < shared; ++s) domain_concepts[d].push_back(s);
    for (int p = 0; p < privates; ++p) domain_concepts[d].push_back(shared + d * privates + p);
  }

  // Per-domain mean shift of the requested magnitude.
  Rng srng = rng.fork("shift");
  std::vector<Vec> shifts;
  for (int d = 0; d < cfg.domains; ++d) {
    Vec dir = gaussian_vec(srng, cfg.embedding_dim, 1.0);
    const double norm = dir.norm();
    shifts.push_back(cfg.domain_shift == 0.0 || norm == 0.0 ? Vec::Zero(cfg.embedding_dim).eval()
                                                            : (cfg.domain_shift / norm) * dir);
  }

  // Items: per domain, balanced over its concepts.
  Rng irng = rng.fork("items");
  std::vector<std::string> domain_names;
  for (int d = 0; d < cfg.domains; ++d) domain_names.push_back(strf("d%d", d));
  struct SynthItem {
    std::string id;
    int domain;
    int concept_id;  // global
    Vec embedding;
  };
  std::vector<SynthItem> items;
  std::vector<std::vector<std::vector<size_t>>> by_concept(  // [domain][concept slot] -> items
      static_cast<size_t>(cfg.domains),
      std::vector<std::vector<size_t>>(static_cast<size_t>(cfg.concepts)));
  for (int d = 0; d < cfg.domains; ++d) {
    for (int i = 0; i < cfg.items_per_domain; ++i) {
      const int slot = i % cfg.concepts;
      SynthItem it;
      it.id = strf("%s_i%04d", domain_names[d].c_str(), i);
      it.domain = d;
      it.concept_id = domain_concepts[d][slot];
      it.embedding = concept_vecs[static_cast<size_t>(it.concept_id)] + shifts[d] +
                     gaussian_vec(irng, cfg.embedding_dim, cfg.noise);
      by_concept[d][static_cast<size_t>(slot)].push_back(items.size());
      items.push_back(std::move(it));
    }
  }

  // Planted transition structure: cross-domain users cycle the shared
  // concepts in order; specialists walk a per-domain shuffled cycle over all
  // of that domain's concept slots, so the two successor maps disagree.
  std::vector<std::vector<int>> local_order(static_cast<size_t>(cfg.domains));
  Rng orng = rng.fork("orders");
  for (int d = 0; d < cfg.domains; ++d) {
    std::vector<int>& order = local_order[d];
    order.resize(static_cast<size_t>(cfg.concepts));
    for (int s = 0; s < cfg.concepts; ++s) order[s] = s;
    Rng one = orng.fork(domain_names[d]);
    one.shuffle(order);
  }
  std::vector<std::vector<int>> local_next(static_cast<size_t>(cfg.domains));
  for (int d = 0; d < cfg.domains; ++d) {
    local_next[d].resize(static_cast<size_t>(cfg.concepts));
    for (int s = 0; s < cfg.concepts; ++s)
      local_next[d][static_cast<size_t>(local_order[d][s])] =
          local_order[d][static_cast<size_t>((s + 1) % cfg.concepts)];
  }

  // Users.  Cross-domain trajectories need shared concepts; with none,
  // every user is a specialist.
  const int specialists = shared == 0 ? cfg.users
                                      : static_cast<int>(std::llround(
                                            cfg.specialist_fraction * cfg.users));
  Rng urng = rng.fork("users");
  struct SynthUser {
    std::string id;
    bool specialist;
    int home;  // specialist home domain; -1 for cross users
    std::vector<std::pair<int, size_t>> events;  // (domain, item index)
  };
  std::vector<SynthUser> users;
  for (int u = 0; u < cfg.users; ++u) {
    SynthUser su;
    su.id = strf("u%05d", u);
    su.specialist = u < specialists;
    su.home = su.specialist ? u % cfg.domains : -1;
    const int len = cfg.seq_min + urng.uniform_int(cfg.seq_max - cfg.seq_min + 1);
    if (su.specialist) {
      const int d = su.home;
      int slot = urng.uniform_int(cfg.concepts);
      for (int t = 0; t < len; ++t) {
        const auto& pool = by_concept[d][static_cast<size_t>(slot)];
        su.events.emplace_back(d, pool[static_cast<size_t>(urng.uniform_int(
                                      static_cast<int>(pool.size())))]);
        slot = urng.uniform() < cfg.explore ? urng.uniform_int(cfg.concepts)
                                            : local_next[d][static_cast<size_t>(slot)];
      }
    } else {
      int slot = urng.uniform_int(shared);  // shared slots coincide across domains
      for (int t = 0; t < len * cfg.domains; ++t) {
        const int d = t % cfg.domains;
        const auto& pool = by_concept[d][static_cast<size_t>(slot)];
        su.events.emplace_back(d, pool[static_cast<size_t>(urng.uniform_int(
                                      static_cast<int>(pool.size())))]);
        slot = urng.uniform() < cfg.explore ? urng.uniform_int(shared) : (slot + 1) % shared;
      }
    }
    users.push_back(std::move(su));
  }

  // Serialization.  nlohmann orders keys alphabetically and prints doubles
  // with shortest round-trip formatting, so output is byte-stable.
  SynthPaths paths{out_dir / "items.jsonl", out_dir / "interactions.jsonl",
                   out_dir / "labels.jsonl"};
  {
    std::ofstream out(paths.items, std::ios::trunc);
    if (!out) throw Error(ErrorCode::kIo, "cannot write " + paths.items.string());
    for (const SynthItem& it : items) {
      std::vector<double> emb(it.embedding.data(), it.embedding.data() + it.embedding.size());
      nlohmann::json j{{"item_id", it.id},
                       {"domain", domain_names[static_cast<size_t>(it.domain)]},
                       {"embedding", emb}};
      out << j.dump() << '\n';
    }
  }
  {
    std::ofstream out(paths.interactions, std::ios::trunc);
    if (!out) throw Error(ErrorCode::kIo, "cannot write " + paths.interactions.string());
    for (const SynthUser& su : users) {
      for (size_t t = 0; t < su.events.size(); ++t) {
        const SynthItem& it = items[su.events[t].second];
        nlohmann::json j{{"user_id", su.id},
                         {"item_id", it.id},
                         {"domain", domain_names[static_cast<size_t>(su.events[t].first)]},
                         {"ts", static_cast<int64_t>(t)}};
        out << j.dump() << '\n';
      }
    }
  }
  {
    std::ofstream out(paths.labels, std::ios::trunc);
    if (!out) throw Error(ErrorCode::kIo, "cannot write " + paths.labels.string());
    for (const SynthItem& it : items) {
      nlohmann::json j{{"kind", "item"}, {"item_id", it.id}, {"concept", it.concept_id}};
      out << j.dump() << '\n';
    }
    for (const SynthUser& su : users) {
      nlohmann::json j{{"kind", "user"},
                       {"user_id", su.id},
                       {"type", su.specialist ? "specialist" : "cross"},
                       {"home_domain", su.home < 0
                                           ? std::string()
                                           : domain_names[static_cast<size_t>(su.home)]}};
      out << j.dump() << '\n';
    }
  }
  return paths;
}

}  // namespace gencdr
