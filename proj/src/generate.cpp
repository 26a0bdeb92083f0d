#include "s4m/generate.hpp"

#include <cmath>

#include "s4m/vocab.hpp"

namespace s4m {

namespace {

// Lowest-id argmax so decoding is platform-stable under float ties.
int argmax_lowest(const Eigen::VectorXd& v) {
  int best = 0;
  for (int i = 1; i < v.size(); ++i) {
    if (v(i) > v(best)) best = i;
  }
  return best;
}

Eigen::VectorXd log_softmax(const Eigen::VectorXd& logits) {
  const double mx = logits.maxCoeff();
  const double lz = std::log((logits.array() - mx).exp().sum()) + mx;
  return logits.array() - lz;
}

}  // namespace

std::vector<int> greedy_decode(const StepLogits& step, int eos, int max_len) {
  std::vector<int> seq = {Vocab::kBos};
  while (static_cast<int>(seq.size()) < max_len) {
    if (static_cast<int>(seq.size()) == max_len - 1) {
      seq.push_back(eos);
      break;
    }
    const int next = argmax_lowest(step(seq));
    seq.push_back(next);
    if (next == eos) break;
  }
  return seq;
}

std::vector<int> beam_decode(const StepLogits& step, int eos, int max_len, int beam_size, double alpha) {
  check(beam_size >= 1, "beam_size must be >= 1");
  struct Hyp {
    std::vector<int> seq;
    double logp = 0.0;
    double score(double a) const {
      return logp / length_penalty(static_cast<int>(seq.size()) - 1, a);
    }
  };

  std::vector<Hyp> live = {{{Vocab::kBos}, 0.0}};
  std::vector<Hyp> done;
  while (!live.empty()) {
    std::vector<Hyp> candidates;
    for (size_t hi = 0; hi < live.size(); ++hi) {
      const Hyp& h = live[hi];
      if (static_cast<int>(h.seq.size()) == max_len - 1) {
        // Forced EOS at the cap still pays its log-probability.
        Eigen::VectorXd lp = log_softmax(step(h.seq));
        Hyp fin = h;
        fin.seq.push_back(eos);
        fin.logp += lp(eos);
        done.push_back(std::move(fin));
        continue;
      }
      Eigen::VectorXd lp = log_softmax(step(h.seq));
      for (int tok = 0; tok < lp.size(); ++tok) {
        Hyp c = h;
        c.seq.push_back(tok);
        c.logp += lp(tok);
        candidates.push_back(std::move(c));
      }
    }
    // Rank by cumulative log-prob; ties resolve toward the lower last token.
    std::sort(candidates.begin(), candidates.end(), [](const Hyp& a, const Hyp& b) {
      if (a.logp != b.logp) return a.logp > b.logp;
      return a.seq.back() < b.seq.back();
    });
    live.clear();
    for (const Hyp& c : candidates) {
      if (static_cast<int>(live.size()) >= beam_size) break;
      if (c.seq.back() == eos) {
        done.push_back(c);
      } else {
        live.push_back(c);
      }
    }
    // Live hypotheses terminate at EOS or the length cap, so the loop is
    // bounded; completed hypotheses compete at the end by normalized score.
  }
  check(!done.empty(), "beam search produced no hypotheses");
  const Hyp* best = &done[0];
  for (const Hyp& d : done) {
    if (d.score(alpha) > best->score(alpha)) best = &d;
  }
  return best->seq;
}

}  // namespace s4m
