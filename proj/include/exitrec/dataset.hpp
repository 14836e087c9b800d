#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace exitrec {

struct InteractionRecord {
  std::string user_id;
  std::string item_id;
  double rating = 0.0;
  std::int64_t timestamp = 0;
  std::string item_title;
  int label = -1;  // -1 until binarize()
};

enum class InputFormat { csv, jsonl };

struct IngestResult {
  std::vector<InteractionRecord> records;
  std::size_t rows = 0;  // data rows seen, header excluded
  std::size_t malformed = 0;
  std::size_t duplicates = 0;
  std::size_t distinct_users = 0;
  std::size_t distinct_items = 0;
};

// Fraction of malformed rows above which ingestion fails.
inline constexpr double kMaxMalformedFraction = 0.10;

IngestResult ingest(const std::filesystem::path& path, InputFormat format);
IngestResult ingest(std::istream& in, InputFormat format);

// Writes the canonical CSV layout (header included) that ingest() reads back.
void write_csv(std::ostream& out, std::span<const InteractionRecord> records);
void write_jsonl(std::ostream& out, std::span<const InteractionRecord> records);

// Placeholder title used for items with no metadata.
std::string fallback_title(const std::string& item_id);

enum class Boundary { geq, gt };

std::vector<InteractionRecord> binarize(std::span<const InteractionRecord> records,
                                        double threshold, Boundary mode);

struct HistoryEntry {
  std::string item_id;
  std::string item_title;
  int binary_label = 0;
  std::int64_t timestamp = 0;
};

struct ItemRef {
  std::string item_id;
  std::string item_title;
};

struct CtrSample {
  std::uint64_t sample_id = 0;
  std::string user_id;
  std::vector<HistoryEntry> history;  // chronological, oldest first
  ItemRef target_item;
  int label = 0;
  std::int64_t timestamp = 0;  // of the target interaction
};

enum class TargetMode {
  every_interaction,  // each interaction after the first min_history is a target
  one_per_user,       // one seeded random eligible target per user
};

struct SampleOptions {
  std::size_t h_max = 15;
  std::size_t min_history = 3;
  TargetMode mode = TargetMode::every_interaction;
  std::uint64_t seed = 0;
};

// Records must be binarized.
std::vector<CtrSample> build_samples(std::span<const InteractionRecord> records,
                                     const SampleOptions& options);

struct SplitRatio {
  double train = 8.0;
  double validation = 1.0;
  double test = 1.0;

  static SplitRatio parse(const std::string& text);  // "8:1:1"
};

struct GraphEdge {
  std::string user_id;
  std::string item_id;
  int binary_label = 0;
};

struct DatasetSplit {
  std::vector<CtrSample> train;
  std::vector<CtrSample> validation;
  std::vector<CtrSample> test;
  std::vector<GraphEdge> graph_edges;
};

// Exact bucket sizes for n samples: largest-remainder rounding, every bucket
// non-empty once n >= 3.
std::array<std::size_t, 3> split_sizes(std::size_t n, const SplitRatio& ratio);

DatasetSplit split(std::span<const CtrSample> samples, const SplitRatio& ratio,
                   std::uint64_t seed);

void to_json(nlohmann::json& j, const CtrSample& s);
void from_json(const nlohmann::json& j, CtrSample& s);
void to_json(nlohmann::json& j, const GraphEdge& e);
void from_json(const nlohmann::json& j, GraphEdge& e);

inline constexpr const char* kSplitManifest = "split.json";

void save_split(const DatasetSplit& split, const std::filesystem::path& dir);
DatasetSplit load_split(const std::filesystem::path& dir);

}  // namespace exitrec
