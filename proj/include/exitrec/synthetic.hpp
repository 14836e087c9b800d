#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "exitrec/dataset.hpp"

namespace exitrec {

// clustered: users belong to clusters; each cluster prefers its own item pool
// and has a per-item like/dislike taste, so similar users' labels carry
// information about the query's label.
//
// multihop: small taste groups are defined by a few niche items the members
// share; most of every user's interactions go to a large community pool that
// is unrelated to the taste group. Taste-group similarity is visible in the
// direct (user-item-user) structure, while longer walks are dominated by the
// unrelated communities.
enum class SyntheticKind { clustered, multihop };

SyntheticKind parse_synthetic_kind(const std::string& s);
std::string to_string(SyntheticKind kind);

struct SyntheticConfig {
  SyntheticKind kind = SyntheticKind::clustered;
  std::size_t users = 2000;
  std::size_t items = 500;
  std::size_t per_user = 20;  // interactions per user
  std::size_t clusters = 20;  // clusters (clustered) or communities (multihop)
  double pool_prob = 0.8;     // chance an interaction comes from the user's pool (0.6 for multihop)
  double group_bias = 0.15;   // like-rate shift per group
  double item_bias = 0.3;     // like-rate shift per (group, item)
  std::size_t group_size = 20;  // multihop: users per taste group
  std::size_t niche_items = 2;  // multihop: niche items per taste group
  std::uint64_t seed = 0;
};

// Defaults for a kind: multihop keeps more interactions outside the community
// pool, otherwise the communities swamp the niche items.
SyntheticConfig default_synthetic_config(SyntheticKind kind);

struct SyntheticDataset {
  std::string name;
  std::vector<InteractionRecord> records;
  std::unordered_map<std::string, int> groups;  // user -> planted group
};

// Ratings: 4-5 for a like, 1-3 otherwise; binarize with threshold 3, gt.
SyntheticDataset generate_synthetic(const SyntheticConfig& config);

inline constexpr const char* kSyntheticInteractions = "interactions.csv";
inline constexpr const char* kSyntheticGroups = "groups.json";

void write_synthetic(const SyntheticDataset& data, const std::filesystem::path& dir);
std::unordered_map<std::string, int> load_groups(const std::filesystem::path& path);

}  // namespace exitrec
