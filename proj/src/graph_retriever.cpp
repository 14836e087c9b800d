#include "exitrec/graph_retriever.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "exitrec/binary_io.hpp"
#include "exitrec/errors.hpp"
#include "exitrec/rng.hpp"

namespace exitrec {

std::optional<std::uint32_t> InteractionGraph::user_index(std::string_view user_id) const {
  const auto it = user_lookup_.find(std::string(user_id));
  if (it == user_lookup_.end()) return std::nullopt;
  return it->second;
}

std::optional<std::uint32_t> InteractionGraph::item_index(std::string_view item_id) const {
  const auto it = item_lookup_.find(std::string(item_id));
  if (it == item_lookup_.end()) return std::nullopt;
  return it->second;
}

InteractionGraph build_graph(std::span<const GraphEdge> edges,
                             std::span<const std::string> extra_users) {
  if (edges.empty()) throw DataError("cannot build an interaction graph from an empty edge list");

  InteractionGraph g;
  auto intern = [](std::unordered_map<std::string, std::uint32_t>& lookup,
                   std::vector<std::string>& ids, const std::string& id) {
    auto [it, inserted] = lookup.try_emplace(id, static_cast<std::uint32_t>(ids.size()));
    if (inserted) ids.push_back(id);
    return it->second;
  };

  std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs;
  pairs.reserve(edges.size());
  for (const auto& e : edges) {
    const auto u = intern(g.user_lookup_, g.user_ids_, e.user_id);
    const auto i = intern(g.item_lookup_, g.item_ids_, e.item_id);
    pairs.emplace_back(u, i);
  }
  for (const auto& u : extra_users) intern(g.user_lookup_, g.user_ids_, u);

  std::sort(pairs.begin(), pairs.end());
  pairs.erase(std::unique(pairs.begin(), pairs.end()), pairs.end());

  const std::size_t n = g.num_nodes();
  const auto users = static_cast<std::uint32_t>(g.num_users());
  std::vector<std::size_t> degree(n, 0);
  for (const auto& [u, i] : pairs) {
    ++degree[u];
    ++degree[users + i];
  }
  g.offsets_.assign(n + 1, 0);
  for (std::size_t v = 0; v < n; ++v) g.offsets_[v + 1] = g.offsets_[v] + degree[v];
  g.neighbors_.resize(g.offsets_[n]);
  std::vector<std::size_t> cursor(g.offsets_.begin(), g.offsets_.end() - 1);
  for (const auto& [u, i] : pairs) {
    g.neighbors_[cursor[u]++] = users + i;
    g.neighbors_[cursor[users + i]++] = u;
  }
  for (std::size_t v = 0; v < n; ++v) {
    std::sort(g.neighbors_.begin() + static_cast<std::ptrdiff_t>(g.offsets_[v]),
              g.neighbors_.begin() + static_cast<std::ptrdiff_t>(g.offsets_[v + 1]));
  }
  return g;
}

EmbeddingMode parse_embedding_mode(const std::string& s) {
  if (s == "average") return EmbeddingMode::average;
  if (s == "last") return EmbeddingMode::last;
  throw ConfigError("embedding mode must be average or last, got " + s);
}

std::string to_string(EmbeddingMode mode) {
  return mode == EmbeddingMode::average ? "average" : "last";
}

std::optional<std::uint32_t> EmbeddingTable::user_index(std::string_view user_id) const {
  const auto it = user_lookup.find(std::string(user_id));
  if (it == user_lookup.end()) return std::nullopt;
  return it->second;
}

EmbeddingTable propagate(const InteractionGraph& graph, std::size_t dim, std::size_t layers,
                         std::uint64_t seed) {
  if (dim < 1) throw ConfigError("embedding dimension must be at least 1");
  if (layers < 1) throw ConfigError("layer count K must be at least 1");

  EmbeddingTable t;
  t.num_users = graph.num_users();
  t.num_items = graph.num_items();
  t.dim = dim;
  t.layers = layers;
  t.user_ids = graph.user_ids();
  t.item_ids = graph.item_ids();
  for (std::uint32_t u = 0; u < t.user_ids.size(); ++u) t.user_lookup.emplace(t.user_ids[u], u);

  const std::size_t n = graph.num_nodes();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  Rng rng(seed);
  RowMatrix e0(n, dim);
  for (std::size_t v = 0; v < n; ++v) {
    for (std::size_t c = 0; c < dim; ++c) e0(v, c) = rng.normal() * scale;
  }
  t.layer_embeddings.push_back(std::move(e0));

  std::vector<double> inv_sqrt_deg(n, 0.0);
  for (std::uint32_t v = 0; v < n; ++v) {
    const auto d = graph.degree(v);
    if (d > 0) inv_sqrt_deg[v] = 1.0 / std::sqrt(static_cast<double>(d));
  }

  for (std::size_t k = 0; k < layers; ++k) {
    const RowMatrix& prev = t.layer_embeddings.back();
    RowMatrix next(n, dim);
    for (std::uint32_t v = 0; v < n; ++v) {
      if (graph.degree(v) == 0) {
        next.row(v) = prev.row(v);
        continue;
      }
      double* out = next.row(v).data();
      std::fill(out, out + dim, 0.0);
      for (const auto m : graph.neighbors(v)) {
        const double w = inv_sqrt_deg[v] * inv_sqrt_deg[m];
        const double* in = prev.row(m).data();
        for (std::size_t c = 0; c < dim; ++c) out[c] += w * in[c];
      }
    }
    t.layer_embeddings.push_back(std::move(next));
  }
  average_layers(t);
  return t;
}

void average_layers(EmbeddingTable& table, EmbeddingMode mode, bool include_layer0) {
  if (table.layer_embeddings.size() != table.layers + 1) {
    throw ConfigError("embedding table must hold layers 0..K before averaging");
  }
  table.mode = mode;
  table.include_layer0 = include_layer0;
  const auto users = static_cast<Eigen::Index>(table.num_users);
  const auto d = static_cast<Eigen::Index>(table.dim);
  if (mode == EmbeddingMode::last) {
    table.averaged_user_embeddings = table.layer_embeddings.back().topRows(users);
    return;
  }
  const std::size_t first = include_layer0 ? 0 : 1;
  RowMatrix sum = RowMatrix::Zero(users, d);
  for (std::size_t k = first; k <= table.layers; ++k) {
    sum += table.layer_embeddings[k].topRows(users);
  }
  table.averaged_user_embeddings = sum / static_cast<double>(table.layers + 1 - first);
}

double cosine(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw ConfigError("cosine requires vectors of equal length");
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  if (nu == 0.0 || nv == 0.0) return 0.0;
  return dot / (std::sqrt(nu) * std::sqrt(nv));
}

RetrievalResult retrieve_topk(const EmbeddingTable& table, std::string_view query_user,
                              std::size_t k) {
  if (k < 1) throw ConfigError("k must be at least 1");
  const auto q = table.user_index(query_user);
  if (!q) throw UnknownUser(std::string(query_user));

  const auto& emb = table.averaged_user_embeddings;
  const auto d = table.dim;
  const std::span<const double> qrow(emb.row(*q).data(), d);

  std::vector<Neighbor> candidates;
  candidates.reserve(table.num_users);
  for (std::uint32_t u = 0; u < table.num_users; ++u) {
    if (u == *q) continue;
    candidates.push_back({{}, u, cosine(qrow, std::span<const double>(emb.row(u).data(), d))});
  }
  const std::size_t take = std::min(k, candidates.size());
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(take),
                    candidates.end(), [](const Neighbor& a, const Neighbor& b) {
                      if (a.similarity != b.similarity) return a.similarity > b.similarity;
                      return a.index < b.index;
                    });
  candidates.resize(take);
  for (auto& c : candidates) c.user_id = table.user_ids[c.index];
  return {std::string(query_user), std::move(candidates)};
}

double speedup_vs_baseline(double baseline_latency, double measured_latency) {
  if (!(measured_latency > 0)) throw ConfigError("measured latency must be positive");
  return baseline_latency / measured_latency;
}

RetrievalBench retrieval_speed_bench(const EmbeddingTable& table,
                                     std::span<const std::string> queries, std::size_t k,
                                     std::size_t repetitions,
                                     std::optional<double> baseline_latency) {
  if (queries.empty()) throw ConfigError("retrieval benchmark needs at least one query");
  repetitions = std::max<std::size_t>(repetitions, 1);
  volatile std::size_t sink = 0;
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t r = 0; r < repetitions; ++r) {
    for (const auto& q : queries) sink = sink + retrieve_topk(table, q, k).neighbors.size();
  }
  const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start;
  RetrievalBench out;
  out.mean_latency_seconds =
      elapsed.count() / static_cast<double>(repetitions * queries.size());
  if (out.mean_latency_seconds <= 0) out.mean_latency_seconds = 1e-12;
  if (baseline_latency) out.speedup = speedup_vs_baseline(*baseline_latency, out.mean_latency_seconds);
  return out;
}

double load_baseline_latency(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open baseline latency file " + path.string());
  try {
    const auto j = nlohmann::json::parse(in);
    const double v = j.at("baseline_latency_seconds").get<double>();
    if (!(v > 0)) throw DataError("baseline latency must be positive");
    return v;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed baseline latency file: " + std::string(e.what()));
  }
}

void save_table(const EmbeddingTable& table, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write("EXRC", 4);
  binio::write_pod<std::uint32_t>(out, kTableVersion);
  binio::write_pod<std::uint64_t>(out, table.num_users);
  binio::write_pod<std::uint64_t>(out, table.num_items);
  binio::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(table.dim));
  binio::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(table.layers));
  for (const auto& layer : table.layer_embeddings) {
    binio::write_doubles(out, std::span<const double>(layer.data(), static_cast<std::size_t>(layer.size())));
  }
  // Trailer: averaging mode and node ids.
  binio::write_pod<std::uint8_t>(out, table.mode == EmbeddingMode::last ? 1 : 0);
  binio::write_pod<std::uint8_t>(out, table.include_layer0 ? 1 : 0);
  for (const auto& id : table.user_ids) binio::write_string(out, id);
  for (const auto& id : table.item_ids) binio::write_string(out, id);
  if (!out) throw DataError("failed writing " + path.string());
}

EmbeddingTable load_table(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  binio::expect_magic(in, "EXRC", "embedding table");
  const auto version = binio::read_pod<std::uint32_t>(in, "table version");
  if (version != kTableVersion) {
    throw DataError("embedding table version " + std::to_string(version) +
                    " is not supported (expected " + std::to_string(kTableVersion) + ")");
  }
  EmbeddingTable t;
  t.num_users = binio::read_pod<std::uint64_t>(in, "user count");
  t.num_items = binio::read_pod<std::uint64_t>(in, "item count");
  t.dim = binio::read_pod<std::uint32_t>(in, "dimension");
  t.layers = binio::read_pod<std::uint32_t>(in, "layer count");
  const std::size_t n = t.num_users + t.num_items;
  if (t.dim == 0 || t.layers == 0 || n == 0 || n > (1ULL << 32)) {
    throw DataError("implausible embedding table header in " + path.string());
  }
  for (std::size_t k = 0; k <= t.layers; ++k) {
    RowMatrix m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(t.dim));
    binio::read_doubles(in, std::span<double>(m.data(), static_cast<std::size_t>(m.size())),
                        "embedding layer");
    t.layer_embeddings.push_back(std::move(m));
  }
  const auto mode = binio::read_pod<std::uint8_t>(in, "embedding mode");
  const auto include0 = binio::read_pod<std::uint8_t>(in, "layer-0 flag");
  t.user_ids.reserve(t.num_users);
  for (std::size_t u = 0; u < t.num_users; ++u) {
    t.user_ids.push_back(binio::read_string(in, "user id"));
    t.user_lookup.emplace(t.user_ids.back(), static_cast<std::uint32_t>(u));
  }
  for (std::size_t i = 0; i < t.num_items; ++i) t.item_ids.push_back(binio::read_string(in, "item id"));
  average_layers(t, mode == 1 ? EmbeddingMode::last : EmbeddingMode::average, include0 == 1);
  return t;
}

EmbeddingTable build_table(const DatasetSplit& split, std::size_t dim, std::size_t layers,
                           std::uint64_t seed, EmbeddingMode mode, bool include_layer0) {
  std::vector<std::string> users;
  for (const auto* part : {&split.train, &split.validation, &split.test}) {
    for (const auto& s : *part) users.push_back(s.user_id);
  }
  std::sort(users.begin(), users.end());
  users.erase(std::unique(users.begin(), users.end()), users.end());
  const auto graph = build_graph(split.graph_edges, users);
  auto table = propagate(graph, dim, layers, seed);
  average_layers(table, mode, include_layer0);
  return table;
}

}  // namespace exitrec
