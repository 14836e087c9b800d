#include "exitrec/synthetic.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "exitrec/errors.hpp"
#include "exitrec/rng.hpp"

namespace exitrec {

namespace {

std::string user_name(std::size_t u) { return "u" + std::to_string(u); }
std::string item_name(std::size_t i) { return "i" + std::to_string(i); }

double sign(Rng& rng) { return rng.bernoulli(0.5) ? 1.0 : -1.0; }

struct Tastes {
  std::vector<double> group;              // +-1 per group
  std::vector<std::vector<double>> item;  // +-1 per (group, item)
};

Tastes draw_tastes(Rng& rng, std::size_t groups, std::size_t items) {
  Tastes t;
  t.group.resize(groups);
  t.item.assign(groups, std::vector<double>(items));
  for (std::size_t g = 0; g < groups; ++g) {
    t.group[g] = sign(rng);
    for (std::size_t i = 0; i < items; ++i) t.item[g][i] = sign(rng);
  }
  return t;
}

void emit(SyntheticDataset& out, Rng& rng, const SyntheticConfig& c, const Tastes& tastes,
          std::size_t user, std::size_t group, const std::vector<std::size_t>& items) {
  std::int64_t ts = static_cast<std::int64_t>(user) * 1000;
  for (std::size_t i : items) {
    const double p = std::clamp(0.5 + c.group_bias * tastes.group[group] +
                                    c.item_bias * tastes.item[group][i], 0.0, 1.0);
    const bool like = rng.bernoulli(p);
    InteractionRecord r;
    r.user_id = user_name(user);
    r.item_id = item_name(i);
    r.rating = like ? 4.0 + static_cast<double>(rng.index(2)) : 1.0 + static_cast<double>(rng.index(3));
    r.timestamp = ++ts;
    r.item_title = fallback_title(r.item_id);
    out.records.push_back(std::move(r));
  }
}

// Draws `count` distinct items: from `pool` with probability pool_prob, else
// from `fallback`. A pool that runs dry hands over to the fallback.
std::vector<std::size_t> draw_items(Rng& rng, std::size_t count, double pool_prob,
                                    const std::vector<std::size_t>& pool,
                                    const std::vector<std::size_t>& fallback,
                                    std::set<std::size_t>& taken) {
  std::vector<std::size_t> out;
  std::size_t pool_left = std::count_if(pool.begin(), pool.end(),
                                        [&](std::size_t i) { return !taken.contains(i); });
  while (out.size() < count) {
    const bool from_pool = pool_left > 0 && rng.bernoulli(pool_prob);
    const auto& src = from_pool ? pool : fallback;
    const std::size_t i = src[rng.index(src.size())];
    if (!taken.insert(i).second) continue;
    if (std::find(pool.begin(), pool.end(), i) != pool.end()) --pool_left;
    out.push_back(i);
  }
  return out;
}

void validate(const SyntheticConfig& c) {
  if (c.users < 2 || c.items < 2) throw ConfigError("synthetic: need at least 2 users and 2 items");
  if (c.clusters < 1) throw ConfigError("synthetic: need at least one cluster");
  if (c.per_user < 1) throw ConfigError("synthetic: per_user must be positive");
  if (!(c.pool_prob >= 0 && c.pool_prob <= 1)) throw ConfigError("synthetic: pool_prob outside [0, 1]");
  if (c.kind == SyntheticKind::multihop) {
    if (c.group_size < 2) throw ConfigError("synthetic: group_size must be at least 2");
    const std::size_t groups = (c.users + c.group_size - 1) / c.group_size;
    if (groups * c.niche_items + c.clusters > c.items) {
      throw ConfigError("synthetic: not enough items for niche and community pools");
    }
    if (c.per_user < c.niche_items || c.per_user - c.niche_items > c.items - groups * c.niche_items) {
      throw ConfigError("synthetic: per_user does not fit the item pools");
    }
  } else if (c.per_user > c.items) {
    throw ConfigError("synthetic: per_user exceeds the item count");
  }
}

}  // namespace

SyntheticKind parse_synthetic_kind(const std::string& s) {
  if (s == "clustered") return SyntheticKind::clustered;
  if (s == "multihop") return SyntheticKind::multihop;
  throw ConfigError("unknown synthetic kind '" + s + "' (clustered|multihop)");
}

std::string to_string(SyntheticKind kind) {
  return kind == SyntheticKind::clustered ? "clustered" : "multihop";
}

SyntheticConfig default_synthetic_config(SyntheticKind kind) {
  SyntheticConfig c;
  c.kind = kind;
  if (kind == SyntheticKind::multihop) c.pool_prob = 0.6;
  return c;
}

SyntheticDataset generate_synthetic(const SyntheticConfig& c) {
  validate(c);
  Rng rng(c.seed);
  SyntheticDataset out;
  out.name = to_string(c.kind);

  std::vector<std::size_t> all(c.items);
  std::iota(all.begin(), all.end(), 0);

  if (c.kind == SyntheticKind::clustered) {
    std::vector<std::size_t> cluster(c.users);
    for (std::size_t u = 0; u < c.users; ++u) cluster[u] = u % c.clusters;
    rng.shuffle(cluster);
    std::vector<std::vector<std::size_t>> pools(c.clusters);
    for (std::size_t i = 0; i < c.items; ++i) pools[i % c.clusters].push_back(i);
    const Tastes tastes = draw_tastes(rng, c.clusters, c.items);
    for (std::size_t u = 0; u < c.users; ++u) {
      std::set<std::size_t> taken;
      const auto items = draw_items(rng, c.per_user, c.pool_prob, pools[cluster[u]], all, taken);
      emit(out, rng, c, tastes, u, cluster[u], items);
      out.groups[user_name(u)] = static_cast<int>(cluster[u]);
    }
    return out;
  }

  // multihop: niche items [0, groups * niche_items), community pools after.
  const std::size_t groups = (c.users + c.group_size - 1) / c.group_size;
  const std::size_t first_pool_item = groups * c.niche_items;
  std::vector<std::size_t> group(c.users);
  for (std::size_t u = 0; u < c.users; ++u) group[u] = u / c.group_size;
  rng.shuffle(group);
  std::vector<std::size_t> community(c.users);
  for (auto& x : community) x = rng.index(c.clusters);
  std::vector<std::vector<std::size_t>> pools(c.clusters);
  std::vector<std::size_t> pool_items;
  for (std::size_t i = first_pool_item; i < c.items; ++i) {
    pools[(i - first_pool_item) % c.clusters].push_back(i);
    pool_items.push_back(i);
  }
  const Tastes tastes = draw_tastes(rng, groups, c.items);
  for (std::size_t u = 0; u < c.users; ++u) {
    std::set<std::size_t> taken;
    std::vector<std::size_t> items;
    for (std::size_t n = 0; n < c.niche_items; ++n) {
      items.push_back(group[u] * c.niche_items + n);
      taken.insert(items.back());
    }
    const auto rest = draw_items(rng, c.per_user - c.niche_items, c.pool_prob,
                                 pools[community[u]], pool_items, taken);
    items.insert(items.end(), rest.begin(), rest.end());
    // Interleave the niche items with the rest so they are not all history.
    for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[rng.index(i)]);
    emit(out, rng, c, tastes, u, group[u], items);
    out.groups[user_name(u)] = static_cast<int>(group[u]);
  }
  return out;
}

void write_synthetic(const SyntheticDataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / kSyntheticInteractions);
    if (!out) throw DataError("cannot write " + (dir / kSyntheticInteractions).string());
    write_csv(out, data.records);
  }
  std::vector<std::pair<std::string, int>> sorted(data.groups.begin(), data.groups.end());
  std::sort(sorted.begin(), sorted.end());
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [u, g] : sorted) j[u] = g;
  std::ofstream out(dir / kSyntheticGroups);
  if (!out) throw DataError("cannot write " + (dir / kSyntheticGroups).string());
  out << j.dump() << '\n';
}

std::unordered_map<std::string, int> load_groups(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open groups file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return nlohmann::json::parse(ss.str()).get<std::unordered_map<std::string, int>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed groups file " + path.string() + ": " + e.what());
  }
}

}  // namespace exitrec
