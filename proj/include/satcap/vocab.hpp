#pragma once

#include <algorithm>
#include <cctype>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "satcap/errors.hpp"

namespace satcap {

// Lowercase + whitespace split. Shared by the decoder and every metric.
inline std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char ch : text) {
    if (std::isspace(ch)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(ch)));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty()) out += ' ';
    out += t;
  }
  return out;
}

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kStart = 1;
  static constexpr int kEnd = 2;
  static constexpr int kUnk = 3;
  static constexpr std::size_t kReserved = 4;

  Vocabulary() : tokens_{"<pad>", "<start>", "<end>", "<unk>"} { reindex(); }

  // Ordered by descending frequency, ties lexicographic.
  static Vocabulary build(const std::vector<std::string>& captions, std::size_t min_count = 1) {
    if (captions.empty()) throw EmptyInputError("build_vocab: empty caption corpus");
    std::map<std::string, std::size_t> counts;
    for (const auto& c : captions)
      for (auto& t : tokenize(c)) ++counts[t];
    std::vector<std::pair<std::string, std::size_t>> ranked;
    for (auto& [t, n] : counts) {
      if (n >= min_count && !is_reserved_text(t)) ranked.emplace_back(t, n);
    }
    if (ranked.empty()) throw EmptyInputError("build_vocab: corpus has no tokens");
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocabulary v;
    for (auto& [t, n] : ranked) v.tokens_.push_back(t);
    v.reindex();
    return v;
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  int id(const std::string& token) const {
    const auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }
  bool contains(const std::string& token) const { return index_.count(token) > 0; }

  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw ContractError("vocabulary: id " + std::to_string(id) + " out of range");
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  // Caption words only; no <start>/<end>.
  std::vector<int> encode(const std::string& caption) const {
    std::vector<int> ids;
    for (const auto& t : tokenize(caption)) ids.push_back(id(t));
    return ids;
  }

  // Stops at <end>; drops <pad> and <start>.
  std::string decode(const std::vector<int>& ids) const {
    std::vector<std::string> words;
    for (int i : ids) {
      if (i == kEnd) break;
      if (i == kPad || i == kStart) continue;
      words.push_back(token(i));
    }
    return join_tokens(words);
  }

  // One token per line, reserved tokens first.
  void write(std::ostream& os) const {
    for (const auto& t : tokens_) os << t << '\n';
  }
  std::string serialize() const {
    std::ostringstream os;
    write(os);
    return os.str();
  }

  static Vocabulary parse(std::istream& is) {
    Vocabulary v;
    v.tokens_.clear();
    std::string line;
    while (std::getline(is, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      v.tokens_.push_back(line);
    }
    const Vocabulary fresh;
    if (v.tokens_.size() < kReserved || !std::equal(fresh.tokens_.begin(), fresh.tokens_.end(), v.tokens_.begin())) {
      throw LoadError("vocabulary: missing reserved tokens <pad> <start> <end> <unk> at the top");
    }
    v.reindex();
    if (v.index_.size() != v.tokens_.size()) throw LoadError("vocabulary: duplicate token");
    return v;
  }
  static Vocabulary parse(const std::string& text) {
    std::istringstream is(text);
    return parse(is);
  }

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  static bool is_reserved_text(const std::string& t) {
    return t == "<pad>" || t == "<start>" || t == "<end>" || t == "<unk>";
  }
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], static_cast<int>(i));
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace satcap
