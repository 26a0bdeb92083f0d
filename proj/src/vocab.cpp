#include "s4m/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "s4m/common.hpp"

namespace s4m {

namespace {
const char* kSpecialNames[4] = {"<pad>", "<bos>", "<eos>", "<unk>"};
}

Vocab::Vocab() {
  for (int i = 0; i < 4; ++i) {
    id_to_token_.emplace_back(kSpecialNames[i]);
    token_to_id_[kSpecialNames[i]] = i;
  }
}

void Vocab::add(const std::string& token) {
  if (token_to_id_.count(token)) return;
  token_to_id_[token] = static_cast<int>(id_to_token_.size());
  id_to_token_.push_back(token);
}

std::vector<std::string> Vocab::normalize(const std::string& text) {
  std::string buf;
  buf.reserve(text.size() + 8);
  for (char raw : text) {
    unsigned char c = static_cast<unsigned char>(raw);
    if (std::isalnum(c) || c == '-') {
      buf.push_back(static_cast<char>(std::tolower(c)));
    } else if (c == '.') {
      buf += " . ";
    } else {
      buf.push_back(' ');
    }
  }
  std::vector<std::string> words;
  std::istringstream in(buf);
  std::string w;
  while (in >> w) words.push_back(w);
  return words;
}

Vocab Vocab::build(const std::vector<std::string>& corpus, int min_freq) {
  check(!corpus.empty(), "empty corpus");
  check(min_freq >= 1, "min_freq must be >= 1");
  std::map<std::string, int64_t> freq;
  for (const auto& report : corpus) {
    for (const auto& w : normalize(report)) ++freq[w];
  }
  std::vector<std::pair<std::string, int64_t>> kept;
  for (const auto& [w, n] : freq) {
    if (n >= min_freq) kept.emplace_back(w, n);
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocab v;
  for (const auto& [w, n] : kept) v.add(w);
  return v;
}

int Vocab::id(const std::string& token) const {
  auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(int tid) const {
  if (tid < 0 || tid >= size()) fail("unknown token id " + std::to_string(tid));
  return id_to_token_[static_cast<size_t>(tid)];
}

std::vector<int> Vocab::encode(const std::string& text, int max_len) const {
  check(max_len >= 2, "max_len must be >= 2");
  std::vector<int> ids;
  ids.push_back(kBos);
  for (const auto& w : normalize(text)) {
    if (static_cast<int>(ids.size()) >= max_len - 1) break;
    ids.push_back(id(w));
  }
  ids.push_back(kEos);
  return ids;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int tid : ids) {
    const std::string& t = token(tid);  // validates the id
    if (tid < 4) continue;
    if (!out.empty()) out.push_back(' ');
    out += t;
  }
  return out;
}

std::string Vocab::to_json() const {
  nlohmann::json j;
  j["specials"] = {{"PAD", kPad}, {"BOS", kBos}, {"EOS", kEos}, {"UNK", kUnk}};
  std::vector<std::string> words(id_to_token_.begin() + 4, id_to_token_.end());
  j["tokens"] = words;
  return j.dump(1);
}

Vocab Vocab::from_json(const std::string& json_text) {
  nlohmann::json j = nlohmann::json::parse(json_text);
  Vocab v;
  for (const auto& t : j.at("tokens")) v.add(t.get<std::string>());
  return v;
}

void Vocab::save(const std::string& path) const {
  std::ofstream out(path);
  check(out.good(), "cannot open vocab file for writing: " + path);
  out << to_json() << "\n";
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), "cannot open vocab file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

}  // namespace s4m
