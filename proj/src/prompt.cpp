#include "exitrec/prompt.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "exitrec/errors.hpp"

namespace exitrec {

namespace {

constexpr std::array<const char*, Vocabulary::kNumSpecials> kSpecialTokens = {
    "<pad>", "<unk>", "<bos>", "yes", "no"};
constexpr std::array<const char*, 3> kAtomicLiterals = {"<pad>", "<unk>", "<bos>"};

bool is_word_byte(unsigned char c) {
  return std::isalnum(c) || c == '_' || c >= 0x80;
}

// Substituted values must not introduce template syntax.
std::string sanitize(const std::string& value) {
  std::string out = value;
  for (auto& c : out) {
    if (c == '{') c = '(';
    if (c == '}') c = ')';
  }
  return out;
}

std::string render(const std::string& format,
                   const std::vector<std::pair<std::string, std::string>>& bindings) {
  std::string out;
  out.reserve(format.size() + 64);
  for (std::size_t i = 0; i < format.size();) {
    if (format[i] == '{') {
      const auto close = format.find('}', i);
      if (close == std::string::npos) throw ConfigError("unbalanced '{' in template: " + format);
      const std::string name = format.substr(i + 1, close - i - 1);
      const auto it = std::find_if(bindings.begin(), bindings.end(),
                                   [&](const auto& b) { return b.first == name; });
      if (it == bindings.end()) throw ConfigError("unknown placeholder {" + name + "} in template");
      out += it->second;
      i = close + 1;
    } else {
      out.push_back(format[i++]);
    }
  }
  return out;
}

std::string render_history(const PromptTemplate& tmpl, const std::vector<HistoryEntry>& history) {
  const std::size_t first =
      history.size() > tmpl.history_cap ? history.size() - tmpl.history_cap : 0;
  std::string out;
  for (std::size_t i = first; i < history.size(); ++i) {
    if (!out.empty()) out.push_back(' ');
    out += sanitize(history[i].item_title);
    out.push_back(' ');
    out += history[i].binary_label == 1 ? tmpl.liked_word : tmpl.disliked_word;
  }
  return out;
}

void check_placeholders(const std::string& format, std::initializer_list<const char*> allowed) {
  std::vector<std::pair<std::string, std::string>> bindings;
  for (const char* name : allowed) bindings.emplace_back(name, "");
  render(format, bindings);
}

void append_ids(const Vocabulary& vocab, std::string_view text, std::vector<int>& out) {
  for (const auto& w : split_words(text)) out.push_back(vocab.id(w));
}

}  // namespace

void PromptTemplate::validate() const {
  check_placeholders(instruction, {});
  check_placeholders(example_slot_format, {"user", "history", "target_title", "label_word"});
  check_placeholders(query_slot_format, {"history", "target_title"});
  if (query_slot_format.find("{target_title}") == std::string::npos) {
    throw ConfigError("query slot must contain {target_title}");
  }
  if (history_cap < 1) throw ConfigError("history cap must be at least 1");
}

PromptTemplate PromptTemplate::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open template file " + path.string());
  PromptTemplate t;
  std::string* section = nullptr;
  std::string instruction, example, query;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line == "[instruction]") section = &instruction;
    else if (line == "[example]") section = &example;
    else if (line == "[query]") section = &query;
    else if (section && !line.empty()) {
      if (!section->empty()) section->push_back(' ');
      *section += line;
    }
  }
  if (!instruction.empty()) t.instruction = instruction;
  if (!example.empty()) t.example_slot_format = example;
  if (!query.empty()) t.query_slot_format = query;
  t.validate();
  return t;
}

std::string RenderedPrompt::text() const {
  std::string out = instruction;
  for (const auto& e : examples) {
    out.push_back('\n');
    out += e;
  }
  out.push_back('\n');
  out += query;
  return out;
}

std::string label_word(int label) { return label == 1 ? "yes" : "no"; }

RenderedPrompt assemble(const PromptTemplate& tmpl, std::span<const CtrSample> retrieved,
                        const CtrSample& query) {
  RenderedPrompt p;
  p.instruction = render(tmpl.instruction, {});
  for (const auto& ex : retrieved) {
    p.examples.push_back(render(tmpl.example_slot_format,
                                {{"user", sanitize(ex.user_id)},
                                 {"history", render_history(tmpl, ex.history)},
                                 {"target_title", sanitize(ex.target_item.item_title)},
                                 {"label_word", label_word(ex.label)}}));
  }
  p.query = render(tmpl.query_slot_format,
                   {{"history", render_history(tmpl, query.history)},
                    {"target_title", sanitize(query.target_item.item_title)}});
  return p;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (std::isspace(c)) {
      ++i;
      continue;
    }
    if (c == '<') {
      bool matched = false;
      for (const char* lit : kAtomicLiterals) {
        const std::string_view l(lit);
        if (text.substr(i, l.size()) == l) {
          words.emplace_back(l);
          i += l.size();
          matched = true;
          break;
        }
      }
      if (matched) continue;
    }
    if (is_word_byte(c)) {
      std::string w;
      while (i < text.size() && is_word_byte(static_cast<unsigned char>(text[i]))) {
        const auto b = static_cast<unsigned char>(text[i++]);
        w.push_back(b < 0x80 ? static_cast<char>(std::tolower(b)) : static_cast<char>(b));
      }
      words.push_back(std::move(w));
    } else {
      words.emplace_back(1, static_cast<char>(c));
      ++i;
    }
  }
  return words;
}

Vocabulary::Vocabulary() {
  for (const char* s : kSpecialTokens) push(s);
}

void Vocabulary::push(const std::string& token) {
  lookup_.emplace(token, static_cast<int>(tokens_.size()));
  tokens_.push_back(token);
}

int Vocabulary::id(std::string_view token) const {
  const auto it = lookup_.find(std::string(token));
  return it == lookup_.end() ? kUnk : it->second;
}

std::string Vocabulary::to_json_string() const {
  nlohmann::json j = {{"tokens", tokens_},
                      {"specials", {{"PAD", kPad}, {"UNK", kUnk}, {"BOS", kBos},
                                    {"YES", kYes}, {"NO", kNo}}}};
  return j.dump();
}

Vocabulary Vocabulary::from_json_string(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    const auto tokens = j.at("tokens").get<std::vector<std::string>>();
    if (tokens.size() < kNumSpecials) throw DataError("vocabulary is missing special tokens");
    for (int s = 0; s < kNumSpecials; ++s) {
      if (tokens[static_cast<std::size_t>(s)] != kSpecialTokens[static_cast<std::size_t>(s)]) {
        throw DataError("vocabulary special token layout does not match");
      }
    }
    Vocabulary v;
    for (std::size_t i = kNumSpecials; i < tokens.size(); ++i) {
      if (v.lookup_.contains(tokens[i])) throw DataError("duplicate vocabulary token: " + tokens[i]);
      v.push(tokens[i]);
    }
    return v;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed vocabulary JSON: ") + e.what());
  }
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << to_json_string() << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open vocabulary " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_string(ss.str());
}

Vocabulary build_vocab(std::span<const std::string> corpus, std::size_t max_size) {
  if (corpus.empty()) throw ConfigError("vocabulary corpus is empty");
  if (max_size < 16) throw ConfigError("vocabulary max_size must be at least 16");

  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& text : corpus) {
    for (auto& w : split_words(text)) ++counts[std::move(w)];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked;
  ranked.reserve(counts.size());
  for (auto& [w, c] : counts) {
    const bool special = std::find_if(kSpecialTokens.begin(), kSpecialTokens.end(),
                                      [&](const char* s) { return w == s; }) != kSpecialTokens.end();
    if (!special) ranked.emplace_back(w, c);
  }
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocabulary v;
  for (const auto& [w, c] : ranked) {
    if (v.size() >= max_size) break;
    v.push(w);
  }
  return v;
}

std::vector<int> tokenize(const Vocabulary& vocab, std::string_view text) {
  std::vector<int> ids{Vocabulary::kBos};
  append_ids(vocab, text, ids);
  return ids;
}

std::vector<int> tokenize(const Vocabulary& vocab, const RenderedPrompt& prompt,
                          std::size_t context_limit) {
  std::vector<int> head{Vocabulary::kBos};
  append_ids(vocab, prompt.instruction, head);
  std::vector<int> examples;
  for (const auto& e : prompt.examples) append_ids(vocab, e, examples);
  std::vector<int> query;
  append_ids(vocab, prompt.query, query);

  const std::size_t fixed = head.size() + query.size();
  if (fixed > context_limit) {
    throw ContextOverflow("instruction and query need " + std::to_string(fixed) +
                          " tokens, context limit is " + std::to_string(context_limit));
  }
  const std::size_t room = context_limit - fixed;
  const std::size_t drop = examples.size() > room ? examples.size() - room : 0;

  std::vector<int> ids = std::move(head);
  ids.insert(ids.end(), examples.begin() + static_cast<std::ptrdiff_t>(drop), examples.end());
  ids.insert(ids.end(), query.begin(), query.end());
  return ids;
}

std::string detokenize(const Vocabulary& vocab, std::span<const int> ids) {
  std::string out;
  std::size_t start = (!ids.empty() && ids.front() == Vocabulary::kBos) ? 1 : 0;
  for (std::size_t i = start; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab.size()) {
      throw ConfigError("token id " + std::to_string(ids[i]) + " is outside the vocabulary");
    }
    if (!out.empty()) out.push_back(' ');
    out += vocab.token(ids[i]);
  }
  return out;
}

PromptBundle make_bundle(const Vocabulary& vocab, const RenderedPrompt& prompt,
                         std::size_t context_limit) {
  PromptBundle b;
  b.text = prompt.text();
  b.tokens = tokenize(vocab, prompt, context_limit);
  return b;
}

}  // namespace exitrec
