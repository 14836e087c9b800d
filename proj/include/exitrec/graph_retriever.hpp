#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "exitrec/dataset.hpp"

namespace exitrec {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Bipartite user-item graph. Node ids: users occupy [0, num_users), items
// occupy [num_users, num_users + num_items).
class InteractionGraph {
 public:
  std::size_t num_users() const { return user_ids_.size(); }
  std::size_t num_items() const { return item_ids_.size(); }
  std::size_t num_nodes() const { return num_users() + num_items(); }
  std::size_t num_edges() const { return neighbors_.size() / 2; }

  std::optional<std::uint32_t> user_index(std::string_view user_id) const;
  std::optional<std::uint32_t> item_index(std::string_view item_id) const;
  const std::vector<std::string>& user_ids() const { return user_ids_; }
  const std::vector<std::string>& item_ids() const { return item_ids_; }

  std::uint32_t item_node(std::uint32_t item_index) const {
    return static_cast<std::uint32_t>(num_users()) + item_index;
  }
  std::span<const std::uint32_t> neighbors(std::uint32_t node) const {
    return {neighbors_.data() + offsets_[node], neighbors_.data() + offsets_[node + 1]};
  }
  std::uint32_t degree(std::uint32_t node) const {
    return static_cast<std::uint32_t>(offsets_[node + 1] - offsets_[node]);
  }

 private:
  friend InteractionGraph build_graph(std::span<const GraphEdge>, std::span<const std::string>);

  std::vector<std::string> user_ids_;
  std::vector<std::string> item_ids_;
  std::unordered_map<std::string, std::uint32_t> user_lookup_;
  std::unordered_map<std::string, std::uint32_t> item_lookup_;
  std::vector<std::size_t> offsets_;  // CSR, num_nodes + 1 entries
  std::vector<std::uint32_t> neighbors_;
};

// Duplicate (user, item) edges collapse to one. Users listed in extra_users
// but absent from the edges are kept as degree-0 nodes.
InteractionGraph build_graph(std::span<const GraphEdge> edges,
                             std::span<const std::string> extra_users = {});

enum class EmbeddingMode { average, last };

EmbeddingMode parse_embedding_mode(const std::string& s);
std::string to_string(EmbeddingMode mode);

struct EmbeddingTable {
  std::size_t num_users = 0;
  std::size_t num_items = 0;
  std::size_t dim = 0;
  std::size_t layers = 0;  // K
  std::vector<RowMatrix> layer_embeddings;  // K + 1 matrices, (users + items) x dim
  RowMatrix averaged_user_embeddings;       // users x dim
  EmbeddingMode mode = EmbeddingMode::average;
  bool include_layer0 = false;
  std::vector<std::string> user_ids;
  std::vector<std::string> item_ids;
  std::unordered_map<std::string, std::uint32_t> user_lookup;

  std::optional<std::uint32_t> user_index(std::string_view user_id) const;
};

// Training-free propagation: layer 0 ~ N(0, 1/d); every later layer is the
// symmetric degree-normalised neighbour sum; isolated nodes carry forward.
EmbeddingTable propagate(const InteractionGraph& graph, std::size_t dim, std::size_t layers,
                         std::uint64_t seed);

// Fills averaged_user_embeddings: mean of layers 1..K (0..K with
// include_layer0), or layer K alone in last mode.
void average_layers(EmbeddingTable& table, EmbeddingMode mode = EmbeddingMode::average,
                    bool include_layer0 = false);

// Graph from the split's edges; every user with a sample is a node, so users
// without training edges are still retrievable.
EmbeddingTable build_table(const DatasetSplit& split, std::size_t dim, std::size_t layers,
                           std::uint64_t seed, EmbeddingMode mode = EmbeddingMode::average,
                           bool include_layer0 = false);

// Zero-norm vectors have similarity 0 with everything.
double cosine(std::span<const double> u, std::span<const double> v);

struct Neighbor {
  std::string user_id;
  std::uint32_t index = 0;
  double similarity = 0.0;
};

struct RetrievalResult {
  std::string query_user;
  std::vector<Neighbor> neighbors;
};

// Exact scan; neighbours ordered by similarity descending, then by dense
// user index ascending.
RetrievalResult retrieve_topk(const EmbeddingTable& table, std::string_view query_user,
                              std::size_t k);

struct RetrievalBench {
  double mean_latency_seconds = 0.0;
  std::optional<double> speedup;  // baseline / measured, when a baseline is given
};

double speedup_vs_baseline(double baseline_latency, double measured_latency);

RetrievalBench retrieval_speed_bench(const EmbeddingTable& table,
                                     std::span<const std::string> queries, std::size_t k,
                                     std::size_t repetitions,
                                     std::optional<double> baseline_latency = std::nullopt);

// JSON file {"baseline_latency_seconds": x}.
double load_baseline_latency(const std::filesystem::path& path);

inline constexpr std::uint32_t kTableVersion = 1;

void save_table(const EmbeddingTable& table, const std::filesystem::path& path);
EmbeddingTable load_table(const std::filesystem::path& path);

}  // namespace exitrec
