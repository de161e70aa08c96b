#pragma once

#include <cctype>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "diffx/errors.hpp"

namespace diffx {

/// Lowercasing whitespace tokenizer with greedy longest-match word pieces
/// ("##" continuation pieces) over a fixed vocabulary. Punctuation marks are
/// tokens of their own. Ids 0 and 1 are [PAD] and [UNK].
class Tokenizer {
 public:
  static constexpr int64_t kPad = 0;
  static constexpr int64_t kUnk = 1;

  explicit Tokenizer(const std::vector<std::string>& words) {
    add("[PAD]");
    add("[UNK]");
    for (const auto& w : words) add(lower(w));
    for (char c = 'a'; c <= 'z'; ++c) {
      add(std::string(1, c));
      add("##" + std::string(1, c));
    }
    for (char c = '0'; c <= '9'; ++c) {
      add(std::string(1, c));
      add("##" + std::string(1, c));
    }
    for (const char* p : {",", ".", ":", ";", "-", "'"}) add(p);
  }

  int64_t vocab_size() const { return static_cast<int64_t>(itos_.size()); }
  const std::string& token(int64_t id) const { return itos_.at(static_cast<size_t>(id)); }
  bool contains(std::string_view w) const { return stoi_.count(std::string(w)) > 0; }

  std::vector<int64_t> encode(std::string_view text) const {
    std::vector<int64_t> ids;
    for (const auto& word : split(text)) {
      auto it = stoi_.find(word);
      if (it != stoi_.end()) {
        ids.push_back(it->second);
        continue;
      }
      std::vector<int64_t> pieces;
      size_t start = 0;
      bool ok = true;
      while (start < word.size()) {
        size_t end = word.size();
        int64_t found = -1;
        for (; end > start; --end) {
          std::string piece = (start ? "##" : "") + word.substr(start, end - start);
          auto p = stoi_.find(piece);
          if (p != stoi_.end()) {
            found = p->second;
            break;
          }
        }
        if (found < 0) {
          ok = false;
          break;
        }
        pieces.push_back(found);
        start = end;
      }
      if (ok)
        ids.insert(ids.end(), pieces.begin(), pieces.end());
      else
        ids.push_back(kUnk);
    }
    return ids;
  }

  std::string decode(const std::vector<int64_t>& ids) const {
    std::string out;
    for (int64_t id : ids) {
      const std::string& t = token(id);
      if (t.rfind("##", 0) == 0) {
        out += t.substr(2);
      } else {
        if (!out.empty()) out += ' ';
        out += t;
      }
    }
    return out;
  }

 private:
  static std::string lower(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
  }

  static std::vector<std::string> split(std::string_view text) {
    std::vector<std::string> words;
    std::string cur;
    auto flush = [&] {
      if (!cur.empty()) words.push_back(lower(cur));
      cur.clear();
    };
    for (char c : text) {
      const auto u = static_cast<unsigned char>(c);
      if (std::isspace(u)) {
        flush();
      } else if (std::ispunct(u)) {
        flush();
        words.emplace_back(1, c);
      } else {
        cur += c;
      }
    }
    flush();
    return words;
  }

  void add(const std::string& w) {
    if (stoi_.count(w)) return;
    stoi_.emplace(w, static_cast<int64_t>(itos_.size()));
    itos_.push_back(w);
  }

  std::map<std::string, int64_t> stoi_;
  std::vector<std::string> itos_;
};

}  // namespace diffx
