#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "s4m/image.hpp"
#include "s4m/knowledge.hpp"

namespace s4m {

// One (two views, report, tag) training unit. Findings are the synthetic
// label topics (probing only); empty for unlabeled real data.
struct Example {
  std::string id;
  std::array<Image, 2> views;
  std::string report;
  RegionTag tag = RegionTag::chest;
  std::vector<std::string> findings;
};

struct Dataset {
  std::vector<Example> train, val, test;
  std::vector<std::string> label_names;  // global finding label space, sorted

  const std::vector<Example>& split(const std::string& name) const;
  std::vector<float> label_vector(const Example& e) const;  // size label_names
};

struct SynthSpec {
  std::map<std::string, int> counts;  // region name -> example count (all six by default)
  int findings_per_region = 6;        // eligible topics per region, drawn from that region's subset
  int max_findings_per_example = 3;
  int image_size = 256;
  double bg_amplitude = 8.0;    // region-pattern strength, grey levels
  double noise_sigma = 5.0;     // per-pixel noise, grey levels
  double glyph_intensity = 70;  // finding glyph brightness above background
  double train_frac = 0.70, val_frac = 0.15;
  int min_report_tokens = 30, max_report_tokens = 55;

  static SynthSpec defaults(int per_region = 100);
  static SynthSpec load(const std::string& path);
  std::string to_json() const;
};

// The per-region topics eligible as renderable findings; a prefix of this
// list of length findings_per_region is used. Every entry is a member of the
// region's knowledge subset.
const std::vector<std::string>& eligible_findings(RegionTag tag);

Dataset synthesize_dataset(const SynthSpec& spec, uint64_t seed, const KnowledgeBase& kb);

// Writes images/ PNGs plus manifest.jsonl (and the spec snapshot) under dir.
void export_dataset(const Dataset& ds, const std::string& dir);

struct ManifestOptions {
  bool filter_length = false;  // keep only reports with 30..60 word tokens
  int resize_to = 256;         // target square size before cropping; 0 keeps native
};

Dataset load_manifest(const std::string& path, const ManifestOptions& opts = {});

// Random 224 crop plus horizontal flip in training mode, deterministic center
// crop otherwise.
Image augment(const Image& im, Rng& rng, bool training);

constexpr int kInputSize = 224;

// Deterministic shuffled batch order for one epoch.
std::vector<std::vector<int>> epoch_batches(int n, int batch_size, Rng& rng, bool drop_singletons);

uint64_t dataset_fingerprint(const Dataset& ds);

}  // namespace s4m
