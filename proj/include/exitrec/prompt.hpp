#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "exitrec/dataset.hpp"

namespace exitrec {

// Placeholders: example slot {user} {history} {target_title} {label_word};
// query slot {history} {target_title}. History entries render as
// "<title> <liked|disliked>", most recent history_cap entries only.
struct PromptTemplate {
  std::string instruction = "Predict whether the user will click on the given item.";
  std::string example_slot_format =
      "Similar user {user} history : {history} . Rated {target_title} : {label_word} .";
  std::string query_slot_format =
      "Query user history : {history} . Will the user click {target_title} ? Answer :";
  std::string liked_word = "liked";
  std::string disliked_word = "disliked";
  std::size_t history_cap = 15;

  // Throws ConfigError on unknown or unbalanced placeholders.
  void validate() const;

  // Plain text file with "[instruction]", "[example]" and "[query]" sections.
  static PromptTemplate load(const std::filesystem::path& path);
};

struct RenderedPrompt {
  std::string instruction;
  std::vector<std::string> examples;  // in retrieval (similarity) order
  std::string query;

  std::string text() const;
};

std::string label_word(int label);

RenderedPrompt assemble(const PromptTemplate& tmpl, std::span<const CtrSample> retrieved,
                        const CtrSample& query);

// Lowercased word tokens: runs of [a-z0-9_] (and non-ASCII bytes), every other
// printable character on its own, plus the atomic literals <pad> <unk> <bos>.
std::vector<std::string> split_words(std::string_view text);

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kBos = 2;
  static constexpr int kYes = 3;
  static constexpr int kNo = 4;
  static constexpr int kNumSpecials = 5;

  Vocabulary();

  std::size_t size() const { return tokens_.size(); }
  int id(std::string_view token) const;  // kUnk when absent
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);
  std::string to_json_string() const;
  static Vocabulary from_json_string(const std::string& text);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  friend Vocabulary build_vocab(std::span<const std::string>, std::size_t);
  void push(const std::string& token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> lookup_;
};

// Frequency-ranked (ties lexicographic), truncated to max_size entries
// including the specials.
Vocabulary build_vocab(std::span<const std::string> corpus, std::size_t max_size);

inline constexpr std::size_t kDefaultContextLimit = 512;

// [BOS] followed by the word ids; no length limit.
std::vector<int> tokenize(const Vocabulary& vocab, std::string_view text);

// Section-aware tokenization. When over the limit, tokens are removed from the
// front of the example section; instruction and query are never cut.
std::vector<int> tokenize(const Vocabulary& vocab, const RenderedPrompt& prompt,
                          std::size_t context_limit);

// Inverse of tokenize on id sequences; a leading BOS is dropped.
std::string detokenize(const Vocabulary& vocab, std::span<const int> ids);

struct PromptBundle {
  std::string text;
  std::vector<int> tokens;
  int yes_id = Vocabulary::kYes;
  int no_id = Vocabulary::kNo;
};

PromptBundle make_bundle(const Vocabulary& vocab, const RenderedPrompt& prompt,
                         std::size_t context_limit);

}  // namespace exitrec
