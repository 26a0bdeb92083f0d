#pragma once

#include <map>
#include <string>
#include <vector>

namespace s4m {

// Word-level vocabulary. IDs 0..3 are reserved for specials; corpus words get
// 4.. in descending-frequency order (ties lexicographic), so construction is a
// pure function of (corpus, min_freq).
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  static Vocab build(const std::vector<std::string>& corpus, int min_freq);

  int size() const { return static_cast<int>(id_to_token_.size()); }
  bool contains(const std::string& token) const { return token_to_id_.count(token) > 0; }

  // UNK for out-of-vocabulary words.
  int id(const std::string& token) const;
  const std::string& token(int id) const;

  std::vector<int> encode(const std::string& text, int max_len) const;
  std::string decode(const std::vector<int>& ids) const;

  void save(const std::string& path) const;
  static Vocab load(const std::string& path);

  std::string to_json() const;
  static Vocab from_json(const std::string& json_text);

  // Report normalization: lowercase, periods split off as their own token,
  // '-' kept inside words, all other punctuation dropped.
  static std::vector<std::string> normalize(const std::string& text);

 private:
  Vocab();
  void add(const std::string& token);

  std::map<std::string, int> token_to_id_;
  std::vector<std::string> id_to_token_;
};

}  // namespace s4m
