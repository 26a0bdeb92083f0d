#pragma once

#include <algorithm>
#include <functional>
#include <vector>

#include "s4m/dataset.hpp"
#include "s4m/model.hpp"

namespace s4m {

// Next-token logits for a BOS-prefixed sequence. Decoding is written against
// this so search can be exercised on hand-built toy models.
using StepLogits = std::function<Eigen::VectorXd(const std::vector<int>& prefix)>;

// GNMT-style length penalty; T counts generated tokens (everything after BOS).
inline double length_penalty(int t, double alpha) {
  return std::pow((5.0 + static_cast<double>(t)) / 6.0, alpha);
}

// Argmax decoding, ties to the lowest token id. The output always begins with
// BOS and ends with EOS; at max_len the EOS is forced.
std::vector<int> greedy_decode(const StepLogits& step, int eos, int max_len);

std::vector<int> beam_decode(const StepLogits& step, int eos, int max_len, int beam_size, double alpha);

// Precomputes the fused rows for (views, tag) once; each call then runs the
// decoder over the prefix. Safe for concurrent use across examples since the
// model is read-only here.
template <class S>
StepLogits make_step_fn(const S4MModelT<S>& model, const typename S4MModelT<S>::M& view1,
                        const typename S4MModelT<S>::M& view2, const std::string& tag,
                        bool fallback_full_knowledge = false) {
  using M = typename S4MModelT<S>::M;
  GradStoreT<S> grads(&model.params());
  TapeT<S> t(&model.params(), &grads, /*grad_enabled=*/false);
  int img = model.encode_image(t, view1, view2);
  int fused = img;
  if (model.config().has_agg()) {
    fused = model.aggregate(
        t, img, model.topics_node(t, tag, model.config().ablation == "radka_star", fallback_full_knowledge));
  }
  M fused_rows = t.val(fused);
  return [&model, fused_rows = std::move(fused_rows)](const std::vector<int>& prefix) {
    GradStoreT<S> g(&model.params());
    TapeT<S> tape(&model.params(), &g, /*grad_enabled=*/false);
    int fused_node = tape.input(fused_rows);
    int logits = model.decoder_forward(tape, fused_node, prefix);
    return Eigen::VectorXd(tape.val(logits).row(tape.val(logits).rows() - 1).transpose().template cast<double>());
  };
}

template <class S>
std::vector<int> generate_ids(const S4MModelT<S>& model, const typename S4MModelT<S>::M& view1,
                              const typename S4MModelT<S>::M& view2, const std::string& tag,
                              int beam_size = 1, double alpha = 0.6,
                              bool fallback_full_knowledge = false) {
  StepLogits step = make_step_fn(model, view1, view2, tag, fallback_full_knowledge);
  const int max_len = model.config().max_len;
  if (beam_size <= 1) return greedy_decode(step, Vocab::kEos, max_len);
  return beam_decode(step, Vocab::kEos, max_len, beam_size, alpha);
}

template <class S>
std::string generate_report(const S4MModelT<S>& model, const Vocab& vocab, const Example& example,
                            int beam_size = 1, double alpha = 0.6,
                            bool fallback_full_knowledge = false) {
  Rng rng(0);  // eval mode: center crop, rng unused
  typename S4MModelT<S>::M v1 =
      image_to_matrix(augment(example.views[0], rng, false)).template cast<S>();
  typename S4MModelT<S>::M v2 =
      image_to_matrix(augment(example.views[1], rng, false)).template cast<S>();
  auto ids = generate_ids(model, v1, v2, region_name(example.tag), beam_size, alpha,
                          fallback_full_knowledge);
  return vocab.decode(ids);
}

}  // namespace s4m
