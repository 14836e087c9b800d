#include "exitrec/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "exitrec/errors.hpp"
#include "exitrec/rng.hpp"

namespace exitrec {

namespace {

using json = nlohmann::json;

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

bool parse_double(std::string_view s, double& out) {
  s = trim(s);
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size() && std::isfinite(out);
}

bool parse_int64(std::string_view s, std::int64_t& out) {
  s = trim(s);
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

// Reads one CSV record (RFC 4180 quoting, quoted fields may span lines).
// Returns false at end of input.
bool read_csv_record(std::istream& in, std::vector<std::string>& fields) {
  fields.clear();
  std::string line;
  if (!std::getline(in, line)) return false;
  std::string field;
  bool quoted = false;
  for (;;) {
    for (std::size_t i = 0; i < line.size(); ++i) {
      const char c = line[i];
      if (quoted) {
        if (c == '"') {
          if (i + 1 < line.size() && line[i + 1] == '"') {
            field.push_back('"');
            ++i;
          } else {
            quoted = false;
          }
        } else {
          field.push_back(c);
        }
      } else if (c == '"') {
        quoted = true;
      } else if (c == ',') {
        fields.push_back(std::move(field));
        field.clear();
      } else if (c != '\r') {
        field.push_back(c);
      }
    }
    if (!quoted) break;
    field.push_back('\n');
    if (!std::getline(in, line)) break;  // unterminated quote: keep what we have
  }
  fields.push_back(std::move(field));
  return true;
}

void write_csv_field(std::ostream& out, const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) {
    out << s;
    return;
  }
  out << '"';
  for (char c : s) {
    if (c == '"') out << '"';
    out << c;
  }
  out << '"';
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

class RecordSink {
 public:
  explicit RecordSink(IngestResult& result) : result_(result) {}

  void add(InteractionRecord r) {
    if (r.item_title.empty()) r.item_title = fallback_title(r.item_id);
    std::string key = r.user_id;
    key.push_back('\x1f');
    key += r.item_id;
    key.push_back('\x1f');
    key += std::to_string(r.timestamp);
    if (!seen_.insert(std::move(key)).second) {
      ++result_.duplicates;
      return;
    }
    users_.insert(r.user_id);
    items_.insert(r.item_id);
    result_.records.push_back(std::move(r));
  }

  void finish() {
    result_.distinct_users = users_.size();
    result_.distinct_items = items_.size();
    if (result_.rows > 0 &&
        static_cast<double>(result_.malformed) >
            kMaxMalformedFraction * static_cast<double>(result_.rows)) {
      throw DataError(std::to_string(result_.malformed) + " of " +
                      std::to_string(result_.rows) +
                      " rows are malformed (more than 10%)");
    }
  }

 private:
  IngestResult& result_;
  std::unordered_set<std::string> seen_;
  std::unordered_set<std::string> users_;
  std::unordered_set<std::string> items_;
};

void ingest_csv(std::istream& in, IngestResult& result) {
  std::vector<std::string> fields;
  if (!read_csv_record(in, fields)) throw DataError("CSV input is empty; a header row is required");

  int col_user = -1, col_item = -1, col_rating = -1, col_ts = -1, col_title = -1;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    const auto name = trim(fields[i]);
    const int idx = static_cast<int>(i);
    if (name == "user_id") col_user = idx;
    else if (name == "item_id") col_item = idx;
    else if (name == "rating") col_rating = idx;
    else if (name == "timestamp") col_ts = idx;
    else if (name == "title") col_title = idx;
  }
  if (col_user < 0 || col_item < 0 || col_rating < 0 || col_ts < 0) {
    throw DataError("CSV header must name user_id, item_id, rating and timestamp columns");
  }
  const auto needed = static_cast<std::size_t>(
      std::max({col_user, col_item, col_rating, col_ts}) + 1);

  RecordSink sink(result);
  while (read_csv_record(in, fields)) {
    if (fields.size() == 1 && trim(fields[0]).empty()) continue;  // blank line
    ++result.rows;
    InteractionRecord r;
    bool ok = fields.size() >= needed;
    if (ok) {
      r.user_id = std::string(trim(fields[col_user]));
      r.item_id = std::string(trim(fields[col_item]));
      ok = !r.user_id.empty() && !r.item_id.empty() &&
           parse_double(fields[col_rating], r.rating) &&
           parse_int64(fields[col_ts], r.timestamp);
      if (col_title >= 0 && static_cast<std::size_t>(col_title) < fields.size()) {
        r.item_title = fields[col_title];
      }
    }
    if (!ok) {
      ++result.malformed;
      continue;
    }
    sink.add(std::move(r));
  }
  sink.finish();
}

std::string json_scalar_to_string(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<std::int64_t>());
  if (v.is_number_unsigned()) return std::to_string(v.get<std::uint64_t>());
  return {};
}

void ingest_jsonl(std::istream& in, IngestResult& result) {
  RecordSink sink(result);
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    ++result.rows;
    InteractionRecord r;
    bool ok = false;
    try {
      const json j = json::parse(line);
      if (j.is_object() && j.contains("user_id") && j.contains("item_id") &&
          j.contains("rating") && j.contains("timestamp")) {
        r.user_id = json_scalar_to_string(j.at("user_id"));
        r.item_id = json_scalar_to_string(j.at("item_id"));
        const auto& rating = j.at("rating");
        const auto& ts = j.at("timestamp");
        bool rating_ok = false;
        if (rating.is_number()) {
          r.rating = rating.get<double>();
          rating_ok = std::isfinite(r.rating);
        } else if (rating.is_string()) {
          rating_ok = parse_double(rating.get<std::string>(), r.rating);
        }
        bool ts_ok = false;
        if (ts.is_number_integer()) {
          r.timestamp = ts.get<std::int64_t>();
          ts_ok = true;
        } else if (ts.is_string()) {
          ts_ok = parse_int64(ts.get<std::string>(), r.timestamp);
        }
        if (j.contains("title") && j.at("title").is_string()) {
          r.item_title = j.at("title").get<std::string>();
        }
        ok = rating_ok && ts_ok && !r.user_id.empty() && !r.item_id.empty();
      }
    } catch (const json::exception&) {
      ok = false;
    }
    if (!ok) {
      ++result.malformed;
      continue;
    }
    sink.add(std::move(r));
  }
  sink.finish();
}

}  // namespace

std::string fallback_title(const std::string& item_id) { return "item_" + item_id; }

IngestResult ingest(std::istream& in, InputFormat format) {
  IngestResult result;
  if (format == InputFormat::csv) {
    ingest_csv(in, result);
  } else {
    ingest_jsonl(in, result);
  }
  return result;
}

IngestResult ingest(const std::filesystem::path& path, InputFormat format) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return ingest(in, format);
}

void write_csv(std::ostream& out, std::span<const InteractionRecord> records) {
  out << "user_id,item_id,rating,timestamp,title\n";
  for (const auto& r : records) {
    write_csv_field(out, r.user_id);
    out << ',';
    write_csv_field(out, r.item_id);
    out << ',' << format_double(r.rating) << ',' << r.timestamp << ',';
    write_csv_field(out, r.item_title);
    out << '\n';
  }
}

void write_jsonl(std::ostream& out, std::span<const InteractionRecord> records) {
  for (const auto& r : records) {
    json j = {{"user_id", r.user_id},
              {"item_id", r.item_id},
              {"rating", r.rating},
              {"timestamp", r.timestamp},
              {"title", r.item_title}};
    out << j.dump() << '\n';
  }
}

std::vector<InteractionRecord> binarize(std::span<const InteractionRecord> records,
                                        double threshold, Boundary mode) {
  if (!std::isfinite(threshold)) throw ConfigError("binarization threshold must be finite");
  std::vector<InteractionRecord> out(records.begin(), records.end());
  for (auto& r : out) {
    const bool positive = mode == Boundary::geq ? r.rating >= threshold : r.rating > threshold;
    r.label = positive ? 1 : 0;
  }
  return out;
}

std::vector<CtrSample> build_samples(std::span<const InteractionRecord> records,
                                     const SampleOptions& options) {
  if (options.h_max < 1) throw ConfigError("h_max must be at least 1");

  std::vector<std::string> user_order;
  std::unordered_map<std::string, std::vector<std::size_t>> by_user;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].label != 0 && records[i].label != 1) {
      throw ConfigError("build_samples requires binarized records");
    }
    auto [it, inserted] = by_user.try_emplace(records[i].user_id);
    if (inserted) user_order.push_back(records[i].user_id);
    it->second.push_back(i);
  }

  Rng rng(options.seed);
  std::vector<CtrSample> samples;
  std::uint64_t next_id = 0;
  for (const auto& user : user_order) {
    auto& idx = by_user[user];
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return records[a].timestamp < records[b].timestamp;
    });
    if (idx.size() < options.min_history + 1) continue;

    auto emit = [&](std::size_t t) {
      CtrSample s;
      s.sample_id = next_id++;
      s.user_id = user;
      const std::size_t first = t > options.h_max ? t - options.h_max : 0;
      for (std::size_t h = first; h < t; ++h) {
        const auto& r = records[idx[h]];
        s.history.push_back({r.item_id, r.item_title, r.label, r.timestamp});
      }
      const auto& target = records[idx[t]];
      s.target_item = {target.item_id, target.item_title};
      s.label = target.label;
      s.timestamp = target.timestamp;
      samples.push_back(std::move(s));
    };

    if (options.mode == TargetMode::every_interaction) {
      for (std::size_t t = options.min_history; t < idx.size(); ++t) emit(t);
    } else {
      const std::size_t eligible = idx.size() - options.min_history;
      emit(options.min_history + rng.index(eligible));
    }
  }
  return samples;
}

SplitRatio SplitRatio::parse(const std::string& text) {
  SplitRatio r;
  double parts[3];
  std::size_t start = 0;
  for (int k = 0; k < 3; ++k) {
    const auto end = k < 2 ? text.find(':', start) : text.size();
    if (end == std::string::npos) throw ConfigError("ratio must look like 8:1:1, got " + text);
    if (!parse_double(std::string_view(text).substr(start, end - start), parts[k]) ||
        parts[k] <= 0) {
      throw ConfigError("ratio components must be positive numbers, got " + text);
    }
    start = end + 1;
  }
  r.train = parts[0];
  r.validation = parts[1];
  r.test = parts[2];
  return r;
}

std::array<std::size_t, 3> split_sizes(std::size_t n, const SplitRatio& ratio) {
  const double w[3] = {ratio.train, ratio.validation, ratio.test};
  for (double x : w) {
    if (!(x > 0) || !std::isfinite(x)) throw ConfigError("ratio components must be positive");
  }
  const double total = w[0] + w[1] + w[2];
  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> frac{};
  std::size_t assigned = 0;
  for (int k = 0; k < 3; ++k) {
    const double exact = static_cast<double>(n) * w[k] / total;
    sizes[k] = static_cast<std::size_t>(std::floor(exact));
    frac[k] = exact - std::floor(exact);
    assigned += sizes[k];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return frac[a] > frac[b]; });
  for (std::size_t left = n - assigned, k = 0; left > 0; --left, ++k) ++sizes[order[k % 3]];

  if (n >= 3) {
    for (int k = 0; k < 3; ++k) {
      while (sizes[k] == 0) {
        auto largest = std::max_element(sizes.begin(), sizes.end());
        --*largest;
        ++sizes[k];
      }
    }
  }
  return sizes;
}

DatasetSplit split(std::span<const CtrSample> samples, const SplitRatio& ratio,
                   std::uint64_t seed) {
  if (samples.size() < 3) {
    throw DataError("need at least 3 samples to split, got " + std::to_string(samples.size()));
  }
  const auto sizes = split_sizes(samples.size(), ratio);

  // Relative chronological position of each sample within its user, so that
  // a user's latest samples land in the later buckets.
  std::unordered_map<std::string, std::vector<std::size_t>> by_user;
  for (std::size_t i = 0; i < samples.size(); ++i) by_user[samples[i].user_id].push_back(i);
  std::vector<double> position(samples.size());
  for (auto& [user, idx] : by_user) {
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return samples[a].timestamp < samples[b].timestamp;
    });
    for (std::size_t r = 0; r < idx.size(); ++r) {
      position[idx[r]] = (static_cast<double>(r) + 0.5) / static_cast<double>(idx.size());
    }
  }

  Rng rng(seed);
  std::vector<std::uint64_t> tiebreak(samples.size());
  for (auto& t : tiebreak) t = rng.next();

  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (position[a] != position[b]) return position[a] < position[b];
    if (tiebreak[a] != tiebreak[b]) return tiebreak[a] < tiebreak[b];
    return a < b;
  });

  std::vector<int> bucket(samples.size());
  for (std::size_t r = 0; r < order.size(); ++r) {
    bucket[order[r]] = r < sizes[0] ? 0 : (r < sizes[0] + sizes[1] ? 1 : 2);
  }

  DatasetSplit out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto& dst = bucket[i] == 0 ? out.train : (bucket[i] == 1 ? out.validation : out.test);
    dst.push_back(samples[i]);
  }

  auto key = [](const std::string& u, const std::string& i) {
    std::string k = u;
    k.push_back('\x1f');
    k += i;
    return k;
  };
  std::unordered_set<std::string> held_out;
  for (const auto* part : {&out.validation, &out.test}) {
    for (const auto& s : *part) held_out.insert(key(s.user_id, s.target_item.item_id));
  }
  std::unordered_set<std::string> seen;
  auto add_edge = [&](const std::string& user, const std::string& item, int label) {
    auto k = key(user, item);
    if (held_out.contains(k) || !seen.insert(std::move(k)).second) return;
    out.graph_edges.push_back({user, item, label});
  };
  for (const auto& s : out.train) {
    for (const auto& h : s.history) add_edge(s.user_id, h.item_id, h.binary_label);
    add_edge(s.user_id, s.target_item.item_id, s.label);
  }
  return out;
}

void to_json(json& j, const CtrSample& s) {
  json history = json::array();
  for (const auto& h : s.history) {
    history.push_back({{"item_id", h.item_id},
                       {"item_title", h.item_title},
                       {"binary_label", h.binary_label},
                       {"timestamp", h.timestamp}});
  }
  j = {{"sample_id", s.sample_id},
       {"user_id", s.user_id},
       {"history", std::move(history)},
       {"target_item", {{"item_id", s.target_item.item_id},
                        {"item_title", s.target_item.item_title}}},
       {"label", s.label},
       {"timestamp", s.timestamp}};
}

void from_json(const json& j, CtrSample& s) {
  s.sample_id = j.value("sample_id", std::uint64_t{0});
  s.user_id = j.at("user_id").get<std::string>();
  s.history.clear();
  for (const auto& h : j.at("history")) {
    s.history.push_back({h.at("item_id").get<std::string>(), h.at("item_title").get<std::string>(),
                         h.at("binary_label").get<int>(), h.value("timestamp", std::int64_t{0})});
  }
  const auto& t = j.at("target_item");
  s.target_item = {t.at("item_id").get<std::string>(), t.at("item_title").get<std::string>()};
  s.label = j.at("label").get<int>();
  s.timestamp = j.value("timestamp", std::int64_t{0});
}

void to_json(json& j, const GraphEdge& e) {
  j = {{"user_id", e.user_id}, {"item_id", e.item_id}, {"binary_label", e.binary_label}};
}

void from_json(const json& j, GraphEdge& e) {
  e.user_id = j.at("user_id").get<std::string>();
  e.item_id = j.at("item_id").get<std::string>();
  e.binary_label = j.at("binary_label").get<int>();
}

void save_split(const DatasetSplit& split, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const json j = {{"train", split.train},
                  {"validation", split.validation},
                  {"test", split.test},
                  {"graph_edges", split.graph_edges}};
  std::ofstream out(dir / kSplitManifest);
  if (!out) throw DataError("cannot write " + (dir / kSplitManifest).string());
  out << j.dump() << '\n';
}

DatasetSplit load_split(const std::filesystem::path& dir) {
  const auto path = dir / kSplitManifest;
  std::ifstream in(path);
  if (!in) throw DataError("cannot open split manifest " + path.string());
  try {
    const json j = json::parse(in);
    DatasetSplit s;
    s.train = j.at("train").get<std::vector<CtrSample>>();
    s.validation = j.at("validation").get<std::vector<CtrSample>>();
    s.test = j.at("test").get<std::vector<CtrSample>>();
    s.graph_edges = j.at("graph_edges").get<std::vector<GraphEdge>>();
    return s;
  } catch (const json::exception& e) {
    throw DataError("malformed split manifest " + path.string() + ": " + e.what());
  }
}

}  // namespace exitrec
