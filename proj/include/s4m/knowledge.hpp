#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "s4m/common.hpp"

namespace s4m {

// The six body-part condition tags. Order here is canonical everywhere
// (reports, datasets, eval tables).
enum class RegionTag { chest, abdomen, knee, hip, wrist, shoulder };

constexpr int kNumRegions = 6;

const std::vector<RegionTag>& all_regions();
const std::string& region_name(RegionTag tag);
// The paper-style tag string, e.g. "chest X-ray".
std::string region_paper_tag(RegionTag tag);
RegionTag parse_region(const std::string& name);  // throws "unknown region tag"
std::optional<RegionTag> try_parse_region(const std::string& name);

using TopicSet = std::vector<std::string>;

// Frozen per-topic embedding table. Rows are a pure function of the topic
// string and the seed, so permuting the topic list permutes rows and nothing
// else. Optionally backed by an externally precomputed embedding file.
class TopicEmbedder {
 public:
  TopicEmbedder(int dim, uint64_t seed);
  static TopicEmbedder from_file(const std::string& path);

  int dim() const { return dim_; }
  uint64_t seed() const { return seed_; }

  MatD embed(const TopicSet& topics) const;  // k x dim

 private:
  MatD row(const std::string& topic) const;

  int dim_;
  uint64_t seed_;
  std::map<std::string, std::vector<double>> external_;  // empty unless file-backed
};

struct TopicEmbeddings {
  TopicSet topics;
  MatD matrix;  // topics.size() x d_k
};

// General set S and per-region subsets G, loaded from the bundled JSON file.
class KnowledgeBase {
 public:
  static KnowledgeBase load(const std::string& path);
  static KnowledgeBase from_json(const std::string& json_text);

  const TopicSet& general_set() const { return general_; }
  const TopicSet& region_subset(RegionTag tag) const;

  // Indicator selection: exact subset lookup keyed on the condition tag.
  // fallback_full_knowledge substitutes the full general set for an unknown
  // tag string instead of erroring.
  TopicSet select_topics(RegionTag tag) const { return region_subset(tag); }
  TopicSet select_topics(const std::string& tag_name, bool fallback_full_knowledge = false) const;

  // Fills the per-topic embedding cache for the whole general set.
  void compute_embeddings(const TopicEmbedder& embedder);
  const std::map<std::string, std::vector<double>>& embeddings() const { return embeddings_; }

 private:
  void validate() const;

  TopicSet general_;
  std::map<std::string, TopicSet> regions_;  // key: region name
  std::map<std::string, std::vector<double>> embeddings_;
};

TopicEmbeddings embed_topics(const TopicSet& topics, const TopicEmbedder& embedder);

}  // namespace s4m
