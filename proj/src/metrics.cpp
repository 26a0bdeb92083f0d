#include "s4m/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "s4m/knowledge.hpp"
#include "s4m/vocab.hpp"

namespace s4m {

namespace {

using Tokens = std::vector<std::string>;

Tokens tok(const std::string& s) { return Vocab::normalize(s); }

std::map<std::string, int> ngram_counts(const Tokens& words, int n) {
  std::map<std::string, int> counts;
  if (static_cast<int>(words.size()) < n) return counts;
  for (size_t i = 0; i + static_cast<size_t>(n) <= words.size(); ++i) {
    std::string key = words[i];
    for (int k = 1; k < n; ++k) key += '\x1f' + words[i + static_cast<size_t>(k)];
    ++counts[key];
  }
  return counts;
}

}  // namespace

double bleu(const std::vector<std::string>& cands, const std::vector<std::vector<std::string>>& refs,
            int n) {
  check(!cands.empty(), "bleu: empty candidate set");
  check(cands.size() == refs.size(), "bleu: candidate/reference count mismatch");
  check(n >= 1, "bleu: n must be >= 1");

  std::vector<int64_t> clipped(static_cast<size_t>(n), 0), total(static_cast<size_t>(n), 0);
  int64_t cand_len = 0, ref_len = 0;
  for (size_t i = 0; i < cands.size(); ++i) {
    check(!refs[i].empty(), "bleu: example without references");
    const Tokens c = tok(cands[i]);
    std::vector<Tokens> rs;
    for (const auto& r : refs[i]) rs.push_back(tok(r));

    cand_len += static_cast<int64_t>(c.size());
    // Closest reference length; ties go to the shorter reference.
    int64_t best = static_cast<int64_t>(rs[0].size());
    for (const auto& r : rs) {
      const auto len = static_cast<int64_t>(r.size());
      const auto d_new = std::llabs(len - static_cast<int64_t>(c.size()));
      const auto d_old = std::llabs(best - static_cast<int64_t>(c.size()));
      if (d_new < d_old || (d_new == d_old && len < best)) best = len;
    }
    ref_len += best;

    for (int k = 1; k <= n; ++k) {
      auto cc = ngram_counts(c, k);
      std::map<std::string, int> max_ref;
      for (const auto& r : rs) {
        for (const auto& [g, cnt] : ngram_counts(r, k)) {
          max_ref[g] = std::max(max_ref[g], cnt);
        }
      }
      for (const auto& [g, cnt] : cc) {
        total[static_cast<size_t>(k - 1)] += cnt;
        auto it = max_ref.find(g);
        if (it != max_ref.end()) clipped[static_cast<size_t>(k - 1)] += std::min(cnt, it->second);
      }
    }
  }

  double log_prec = 0.0;
  for (int k = 0; k < n; ++k) {
    if (total[static_cast<size_t>(k)] == 0 || clipped[static_cast<size_t>(k)] == 0) return 0.0;
    log_prec += std::log(static_cast<double>(clipped[static_cast<size_t>(k)]) /
                         static_cast<double>(total[static_cast<size_t>(k)])) /
                n;
  }
  if (cand_len == 0) return 0.0;
  const double bp =
      cand_len >= ref_len ? 1.0 : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(cand_len));
  return bp * std::exp(log_prec);
}

double cider(const std::vector<std::string>& cands, const std::vector<std::vector<std::string>>& refs) {
  check(!cands.empty(), "cider: empty corpus");
  check(cands.size() == refs.size(), "cider: candidate/reference count mismatch");
  const int max_n = 4;
  const auto n_docs = static_cast<double>(refs.size());

  // Document frequency per n-gram: number of examples whose reference set
  // contains it.
  std::vector<std::map<std::string, double>> df(static_cast<size_t>(max_n));
  for (const auto& ref_set : refs) {
    check(!ref_set.empty(), "cider: example without references");
    for (int n = 1; n <= max_n; ++n) {
      std::set<std::string> seen;
      for (const auto& r : ref_set) {
        for (const auto& [g, cnt] : ngram_counts(tok(r), n)) seen.insert(g);
      }
      for (const auto& g : seen) df[static_cast<size_t>(n - 1)][g] += 1.0;
    }
  }
  auto idf = [&](int n, const std::string& g) {
    const auto& m = df[static_cast<size_t>(n - 1)];
    auto it = m.find(g);
    const double f = it == m.end() ? 1.0 : std::max(1.0, it->second);
    return std::log(n_docs / f);
  };

  auto tfidf = [&](const Tokens& words, int n) {
    std::map<std::string, double> v;
    for (const auto& [g, cnt] : ngram_counts(words, n)) v[g] = cnt * idf(n, g);
    return v;
  };
  auto cosine = [](const std::map<std::string, double>& a, const std::map<std::string, double>& b) {
    double dot = 0, na = 0, nb = 0;
    for (const auto& [g, w] : a) {
      na += w * w;
      auto it = b.find(g);
      if (it != b.end()) dot += w * it->second;
    }
    for (const auto& [g, w] : b) nb += w * w;
    if (na == 0 || nb == 0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
  };

  double corpus = 0.0;
  for (size_t i = 0; i < cands.size(); ++i) {
    const Tokens c = tok(cands[i]);
    double per_example = 0.0;
    for (int n = 1; n <= max_n; ++n) {
      auto cv = tfidf(c, n);
      double sim = 0.0;
      for (const auto& r : refs[i]) sim += cosine(cv, tfidf(tok(r), n));
      per_example += sim / static_cast<double>(refs[i].size());
    }
    corpus += per_example / max_n;
  }
  return 10.0 * corpus / static_cast<double>(cands.size());
}

namespace {

size_t lcs_len(const Tokens& a, const Tokens& b) {
  std::vector<size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (size_t i = 1; i <= a.size(); ++i) {
    for (size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace

double rouge_l(const std::string& cand, const std::vector<std::string>& refs) {
  check(!refs.empty(), "rouge_l: no references");
  const Tokens c = tok(cand);
  const double beta2 = 1.2;
  double best = 0.0;
  for (const auto& ref : refs) {
    const Tokens r = tok(ref);
    if (c.empty() || r.empty()) continue;
    const auto l = static_cast<double>(lcs_len(c, r));
    const double prec = l / static_cast<double>(c.size());
    const double rec = l / static_cast<double>(r.size());
    if (prec + rec == 0.0) continue;
    const double f = (1.0 + beta2) * prec * rec / (rec + beta2 * prec);
    best = std::max(best, f);
  }
  return best;
}

double rouge_l_corpus(const std::vector<std::string>& cands,
                      const std::vector<std::vector<std::string>>& refs) {
  check(!cands.empty(), "rouge_l: empty corpus");
  check(cands.size() == refs.size(), "rouge_l: candidate/reference count mismatch");
  double s = 0.0;
  for (size_t i = 0; i < cands.size(); ++i) s += rouge_l(cands[i], refs[i]);
  return s / static_cast<double>(cands.size());
}

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  check(scores.size() == labels.size(), "auc: size mismatch");
  int64_t n_pos = 0, n_neg = 0;
  for (int y : labels) (y != 0 ? n_pos : n_neg) += 1;
  check(n_pos > 0 && n_neg > 0, "auc: needs both classes");

  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });

  double rank_sum_pos = 0.0;
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg_rank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (size_t k = i; k <= j; ++k) {
      if (labels[order[k]] != 0) rank_sum_pos += avg_rank;
    }
    i = j + 1;
  }
  return (rank_sum_pos - static_cast<double>(n_pos) * (static_cast<double>(n_pos) + 1.0) / 2.0) /
         (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

// ---------------------------------------------------------------------------
// EvalReport

EvalReport evaluate_regions(
    const std::map<std::string, std::pair<std::vector<std::string>, std::vector<std::vector<std::string>>>>&
        per_region) {
  EvalReport rep;
  int present = 0;
  for (RegionTag tag : all_regions()) {
    const std::string name = region_name(tag);
    auto it = per_region.find(name);
    if (it == per_region.end() || it->second.first.empty()) {
      rep.missing_regions.push_back(name);
      continue;
    }
    const auto& [cands, refs] = it->second;
    RegionScores s;
    s.b1 = bleu(cands, refs, 1);
    s.b2 = bleu(cands, refs, 2);
    s.b3 = bleu(cands, refs, 3);
    s.b4 = bleu(cands, refs, 4);
    s.rouge = rouge_l_corpus(cands, refs);
    s.cider = cider(cands, refs);
    s.count = static_cast<int>(cands.size());
    rep.regions[name] = s;
    rep.average.b1 += s.b1;
    rep.average.b2 += s.b2;
    rep.average.b3 += s.b3;
    rep.average.b4 += s.b4;
    rep.average.rouge += s.rouge;
    rep.average.cider += s.cider;
    rep.average.count += s.count;
    ++present;
  }
  check(present > 0, "evaluate: no region has hypotheses");
  rep.average.b1 /= present;
  rep.average.b2 /= present;
  rep.average.b3 /= present;
  rep.average.b4 /= present;
  rep.average.rouge /= present;
  rep.average.cider /= present;
  return rep;
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  auto scores_json = [](const RegionScores& s) {
    return nlohmann::json{{"BLEU-1", s.b1}, {"BLEU-2", s.b2}, {"BLEU-3", s.b3},  {"BLEU-4", s.b4},
                          {"ROUGE-L", s.rouge}, {"CIDEr", s.cider}, {"count", s.count}};
  };
  for (const auto& [name, s] : regions) j["regions"][name] = scores_json(s);
  j["average"] = scores_json(average);
  j["missing_regions"] = missing_regions;
  if (!checkpoint.empty()) j["checkpoint"] = checkpoint;
  if (!dataset_hash.empty()) j["dataset_hash"] = dataset_hash;
  return j.dump(1);
}

std::string EvalReport::render_table() const {
  std::ostringstream out;
  char line[160];
  std::snprintf(line, sizeof(line), "%-10s %7s %7s %7s %7s %7s %7s %6s\n", "region", "B1", "B2", "B3",
                "B4", "ROUGE-L", "CIDEr", "n");
  out << line;
  auto row = [&](const std::string& name, const RegionScores& s) {
    std::snprintf(line, sizeof(line), "%-10s %7.3f %7.3f %7.3f %7.3f %7.3f %7.3f %6d\n", name.c_str(),
                  s.b1, s.b2, s.b3, s.b4, s.rouge, s.cider, s.count);
    out << line;
  };
  for (RegionTag tag : all_regions()) {
    const std::string name = region_name(tag);
    auto it = regions.find(name);
    if (it == regions.end()) {
      std::snprintf(line, sizeof(line), "%-10s %7s %7s %7s %7s %7s %7s %6s\n", name.c_str(), "-", "-",
                    "-", "-", "-", "-", "-");
      out << line;
    } else {
      row(name, it->second);
    }
  }
  row("Ave", average);
  return out.str();
}

// ---------------------------------------------------------------------------
// Linear probe

ProbeResult linear_probe(const MatD& x_train, const MatD& y_train, const MatD& x_test,
                         const MatD& y_test, const std::vector<std::string>& label_names,
                         int epochs) {
  check(x_train.rows() == y_train.rows() && x_test.rows() == y_test.rows(), "probe: row mismatch");
  check(y_train.cols() == y_test.cols() &&
            y_train.cols() == static_cast<Eigen::Index>(label_names.size()),
        "probe: label mismatch");
  const Eigen::Index d = x_train.cols(), n_labels = y_train.cols();

  ProbeResult res;
  std::vector<Eigen::Index> active;
  for (Eigen::Index l = 0; l < n_labels; ++l) {
    const bool tr_both = y_train.col(l).minCoeff() < 0.5 && y_train.col(l).maxCoeff() > 0.5;
    const bool te_both = y_test.col(l).minCoeff() < 0.5 && y_test.col(l).maxCoeff() > 0.5;
    if (tr_both && te_both) {
      active.push_back(l);
    } else {
      res.skipped.push_back(label_names[static_cast<size_t>(l)]);
    }
  }
  check(!active.empty(), "probe: every label is single-class");

  // Logistic regression head, full-batch Adam.
  MatD w = MatD::Zero(d, static_cast<Eigen::Index>(active.size()));
  MatD b = MatD::Zero(1, static_cast<Eigen::Index>(active.size()));
  MatD y(y_train.rows(), static_cast<Eigen::Index>(active.size()));
  for (size_t k = 0; k < active.size(); ++k) y.col(static_cast<Eigen::Index>(k)) = y_train.col(active[k]);

  MatD mw = MatD::Zero(w.rows(), w.cols()), vw = mw, mb = MatD::Zero(1, b.cols()), vb = mb;
  const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double inv_n = 1.0 / static_cast<double>(x_train.rows());
  for (int step = 1; step <= epochs; ++step) {
    MatD z = (x_train * w).rowwise() + b.row(0);
    MatD p = (1.0 / (1.0 + (-z.array()).exp())).matrix();
    MatD diff = (p - y) * inv_n;
    MatD gw = x_train.transpose() * diff;
    MatD gb = diff.colwise().sum();
    const double c1 = 1.0 - std::pow(b1, step), c2 = 1.0 - std::pow(b2, step);
    mw = b1 * mw + (1 - b1) * gw;
    vw = b2 * vw + (1 - b2) * gw.cwiseProduct(gw);
    w -= lr * (mw / c1).cwiseQuotient(((vw / c2).cwiseSqrt().array() + eps).matrix());
    mb = b1 * mb + (1 - b1) * gb;
    vb = b2 * vb + (1 - b2) * gb.cwiseProduct(gb);
    b -= lr * (mb / c1).cwiseQuotient(((vb / c2).cwiseSqrt().array() + eps).matrix());
  }

  MatD z_test = (x_test * w).rowwise() + b.row(0);
  double total = 0.0;
  for (size_t k = 0; k < active.size(); ++k) {
    std::vector<double> scores(static_cast<size_t>(x_test.rows()));
    std::vector<int> labels(static_cast<size_t>(x_test.rows()));
    for (Eigen::Index r = 0; r < x_test.rows(); ++r) {
      scores[static_cast<size_t>(r)] = z_test(r, static_cast<Eigen::Index>(k));
      labels[static_cast<size_t>(r)] = y_test(r, active[k]) > 0.5 ? 1 : 0;
    }
    const double a = auc(scores, labels);
    res.labels.push_back(label_names[static_cast<size_t>(active[k])]);
    res.auc_per_label.push_back(a);
    total += a;
  }
  res.mean_auc = total / static_cast<double>(active.size());
  return res;
}

std::string ProbeResult::render_table() const {
  std::ostringstream out;
  char line[96];
  std::snprintf(line, sizeof(line), "%-20s %8s\n", "label", "AUC");
  out << line;
  for (size_t i = 0; i < labels.size(); ++i) {
    std::snprintf(line, sizeof(line), "%-20s %8.4f\n", labels[i].c_str(), auc_per_label[i]);
    out << line;
  }
  std::snprintf(line, sizeof(line), "%-20s %8.4f\n", "mean", mean_auc);
  out << line;
  for (const auto& s : skipped) out << "skipped (single class): " << s << "\n";
  return out.str();
}

}  // namespace s4m
