#pragma once

#include <map>
#include <string>
#include <vector>

#include "s4m/common.hpp"

namespace s4m {

// Corpus-level BLEU-n in [0,1]: modified n-gram precision with brevity
// penalty, no smoothing. Tokenization is the project normalization.
double bleu(const std::vector<std::string>& cands, const std::vector<std::vector<std::string>>& refs,
            int n);

// Plain CIDEr: TF-IDF n-gram vectors for n=1..4, cosine against each
// reference averaged, mean over n, corpus mean, x10. IDF is computed over the
// reference corpus (df clamped to 1 for n-grams outside it).
double cider(const std::vector<std::string>& cands, const std::vector<std::vector<std::string>>& refs);

// LCS F-measure with beta^2 = 1.2; max over references.
double rouge_l(const std::string& cand, const std::vector<std::string>& refs);
double rouge_l_corpus(const std::vector<std::string>& cands,
                      const std::vector<std::vector<std::string>>& refs);

// Rank-based AUC with average ranks for ties. Requires both classes present.
double auc(const std::vector<double>& scores, const std::vector<int>& labels);

struct RegionScores {
  double b1 = 0, b2 = 0, b3 = 0, b4 = 0, rouge = 0, cider = 0;
  int count = 0;
};

struct EvalReport {
  std::map<std::string, RegionScores> regions;  // canonical region order in render
  RegionScores average;                         // unweighted mean over present regions
  std::vector<std::string> missing_regions;
  std::string checkpoint;
  std::string dataset_hash;

  std::string to_json() const;
  std::string render_table() const;
};

EvalReport evaluate_regions(
    const std::map<std::string, std::pair<std::vector<std::string>, std::vector<std::vector<std::string>>>>&
        per_region);

struct ProbeResult {
  std::vector<std::string> labels;
  std::vector<double> auc_per_label;  // aligned with labels
  double mean_auc = 0;
  std::vector<std::string> skipped;  // single-class labels

  std::string render_table() const;
};

// Logistic head on frozen features: full-batch Adam on (Xtr, Ytr), AUC on
// (Xte, Yte). Labels with a single class in either split are skipped.
ProbeResult linear_probe(const MatD& x_train, const MatD& y_train, const MatD& x_test,
                         const MatD& y_test, const std::vector<std::string>& label_names,
                         int epochs = 200);

}  // namespace s4m
