#include "s4m/knowledge.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace s4m {

const std::vector<RegionTag>& all_regions() {
  static const std::vector<RegionTag> regions = {RegionTag::chest, RegionTag::abdomen, RegionTag::knee,
                                                 RegionTag::hip,   RegionTag::wrist,   RegionTag::shoulder};
  return regions;
}

const std::string& region_name(RegionTag tag) {
  static const std::vector<std::string> names = {"chest", "abdomen", "knee", "hip", "wrist", "shoulder"};
  return names[static_cast<size_t>(tag)];
}

std::string region_paper_tag(RegionTag tag) { return region_name(tag) + " X-ray"; }

std::optional<RegionTag> try_parse_region(const std::string& name) {
  for (RegionTag tag : all_regions()) {
    if (name == region_name(tag) || name == region_paper_tag(tag)) return tag;
  }
  return std::nullopt;
}

RegionTag parse_region(const std::string& name) {
  auto tag = try_parse_region(name);
  if (!tag) fail("unknown region tag: \"" + name + "\"");
  return *tag;
}

// ---------------------------------------------------------------------------
// TopicEmbedder

TopicEmbedder::TopicEmbedder(int dim, uint64_t seed) : dim_(dim), seed_(seed) {
  check(dim >= 1, "topic embedding dim must be >= 1");
}

TopicEmbedder TopicEmbedder::from_file(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), "cannot open topic embedding file: " + path);
  nlohmann::json j;
  in >> j;
  int dim = j.at("dim").get<int>();
  TopicEmbedder e(dim, 0);
  for (auto& [topic, vec] : j.at("vectors").items()) {
    auto v = vec.get<std::vector<double>>();
    check(static_cast<int>(v.size()) == dim,
          "topic embedding file: vector for \"" + topic + "\" has wrong dim");
    e.external_[topic] = std::move(v);
  }
  return e;
}

MatD TopicEmbedder::row(const std::string& topic) const {
  MatD r(1, dim_);
  if (!external_.empty()) {
    auto it = external_.find(topic);
    if (it == external_.end()) fail("topic embedding file has no vector for \"" + topic + "\"");
    for (int c = 0; c < dim_; ++c) r(0, c) = it->second[static_cast<size_t>(c)];
    return r;
  }
  // Multi-word topics are hashed as single units. Scale matches the usual
  // uniform embedding init, variance ~ 1/dim.
  uint64_t base = splitmix64(fnv1a(topic) ^ splitmix64(seed_));
  double scale = std::sqrt(3.0 / dim_);
  for (int c = 0; c < dim_; ++c) {
    uint64_t bits = splitmix64(base + static_cast<uint64_t>(c) + 1);
    double u = static_cast<double>(bits >> 11) * (1.0 / 9007199254740992.0);  // [0,1)
    r(0, c) = (2.0 * u - 1.0) * scale;
  }
  return r;
}

MatD TopicEmbedder::embed(const TopicSet& topics) const {
  check(!topics.empty(), "empty topic set");
  MatD m(static_cast<Eigen::Index>(topics.size()), dim_);
  for (size_t i = 0; i < topics.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = row(topics[i]);
  return m;
}

TopicEmbeddings embed_topics(const TopicSet& topics, const TopicEmbedder& embedder) {
  return TopicEmbeddings{topics, embedder.embed(topics)};
}

// ---------------------------------------------------------------------------
// KnowledgeBase

KnowledgeBase KnowledgeBase::from_json(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    fail(std::string("malformed knowledge file: ") + e.what());
  }
  KnowledgeBase kb;
  kb.general_ = j.at("general").get<TopicSet>();
  for (auto& [name, topics] : j.at("regions").items()) {
    parse_region(name);  // validates the key
    kb.regions_[name] = topics.get<TopicSet>();
  }
  kb.validate();
  return kb;
}

KnowledgeBase KnowledgeBase::load(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), "cannot open knowledge file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

void KnowledgeBase::validate() const {
  std::set<std::string> general(general_.begin(), general_.end());
  check(general.size() == general_.size(), "knowledge file: duplicate topics in general set");
  check(regions_.size() == static_cast<size_t>(kNumRegions), "knowledge file: expected exactly 6 regions");

  std::set<std::string> covered;
  for (const auto& [name, topics] : regions_) {
    std::set<std::string> seen;
    std::string violators;
    for (const auto& t : topics) {
      check(seen.insert(t).second, "knowledge file: duplicate topic \"" + t + "\" in region " + name);
      if (!general.count(t)) violators += (violators.empty() ? "" : ", ") + t;
      covered.insert(t);
    }
    if (!violators.empty()) {
      fail("knowledge file: region " + name + " has topics outside the general set: " + violators);
    }
  }
  if (covered.size() != general.size()) {
    std::string extras;
    for (const auto& t : general_) {
      if (!covered.count(t)) extras += (extras.empty() ? "" : ", ") + t;
    }
    fail("knowledge file: general set has topics in no region subset: " + extras);
  }
}

const TopicSet& KnowledgeBase::region_subset(RegionTag tag) const {
  return regions_.at(region_name(tag));
}

TopicSet KnowledgeBase::select_topics(const std::string& tag_name, bool fallback_full_knowledge) const {
  auto tag = try_parse_region(tag_name);
  if (tag) return region_subset(*tag);
  if (fallback_full_knowledge) return general_;
  fail("unknown region tag: \"" + tag_name + "\"");
}

void KnowledgeBase::compute_embeddings(const TopicEmbedder& embedder) {
  embeddings_.clear();
  MatD m = embedder.embed(general_);
  for (size_t i = 0; i < general_.size(); ++i) {
    auto r = m.row(static_cast<Eigen::Index>(i));
    embeddings_[general_[i]] = std::vector<double>(r.data(), r.data() + r.cols());
  }
}

}  // namespace s4m
