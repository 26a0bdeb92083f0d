#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "s4m/knowledge.hpp"
#include "s4m/layers.hpp"
#include "s4m/vocab.hpp"

namespace s4m {

struct ModelConfig {
  int d = 128;
  int heads = 8;
  int decoder_layers = 3;
  int agg_layers = 3;  // knowledge aggregation depth
  int d_ff = 512;
  double dropout = 0.0;
  int vocab_size = 0;
  int max_len = 60;
  double lambda = 1.0;
  double tau_init = 0.07;
  int d_s = 128;  // shared image/report space
  int d_k = 128;  // topic embedding dim; adapter inserted iff d_k != d
  int h_layers = 1;
  int image_size = 224;
  int in_channels = 1;
  std::vector<int> encoder_channels = {16, 32, 64, 96, 128};
  std::string pool = "mean";     // mean | max | cls
  std::string ablation = "s4m";  // base | radka_star | radka | s4m
  uint64_t embedder_seed = 17;
  int k_max = 256;

  int stages() const { return static_cast<int>(encoder_channels.size()); }
  int stride() const { return 1 << stages(); }
  int grid() const { return image_size / stride(); }
  int tokens_per_view() const { return grid() * grid(); }
  int image_tokens() const { return 2 * tokens_per_view(); }  // p

  bool has_agg() const { return ablation != "base"; }
  bool has_ipg() const { return ablation == "s4m"; }

  void validate() const {
    check(d >= 1 && heads >= 1 && d % heads == 0, "model config: d must be divisible by heads");
    check(!encoder_channels.empty() && encoder_channels.back() == d,
          "model config: encoder_channels must end at d");
    check(image_size % stride() == 0 && grid() >= 1, "model config: image_size not divisible by encoder stride");
    check(vocab_size >= 5, "model config: vocab_size not set");
    check(max_len >= 2, "model config: max_len must be >= 2");
    check(lambda >= 0.0, "model config: lambda must be >= 0");
    check(pool == "mean" || pool == "max" || pool == "cls", "model config: pool must be mean|max|cls");
    check(ablation == "base" || ablation == "radka_star" || ablation == "radka" || ablation == "s4m",
          "model config: ablation must be one of base|radka_star|radka|s4m");
    check(decoder_layers >= 1 && agg_layers >= 1 && h_layers >= 1, "model config: layer counts must be >= 1");
  }

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

inline nlohmann::json ModelConfig::to_json() const {
  nlohmann::json j;
  j["d"] = d;
  j["heads"] = heads;
  j["decoder_layers"] = decoder_layers;
  j["agg_layers"] = agg_layers;
  j["d_ff"] = d_ff;
  j["dropout"] = dropout;
  j["vocab_size"] = vocab_size;
  j["max_len"] = max_len;
  j["lambda"] = lambda;
  j["tau_init"] = tau_init;
  j["d_s"] = d_s;
  j["d_k"] = d_k;
  j["h_layers"] = h_layers;
  j["image_size"] = image_size;
  j["in_channels"] = in_channels;
  j["encoder_channels"] = encoder_channels;
  j["pool"] = pool;
  j["ablation"] = ablation;
  j["embedder_seed"] = embedder_seed;
  j["k_max"] = k_max;
  return j;
}

inline ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d = j.at("d").get<int>();
  c.heads = j.at("heads").get<int>();
  c.decoder_layers = j.at("decoder_layers").get<int>();
  c.agg_layers = j.at("agg_layers").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_len = j.at("max_len").get<int>();
  c.lambda = j.at("lambda").get<double>();
  c.tau_init = j.at("tau_init").get<double>();
  c.d_s = j.at("d_s").get<int>();
  c.d_k = j.at("d_k").get<int>();
  c.h_layers = j.at("h_layers").get<int>();
  c.image_size = j.at("image_size").get<int>();
  c.in_channels = j.at("in_channels").get<int>();
  c.encoder_channels = j.at("encoder_channels").get<std::vector<int>>();
  c.pool = j.at("pool").get<std::string>();
  c.ablation = j.at("ablation").get<std::string>();
  c.embedder_seed = j.at("embedder_seed").get<uint64_t>();
  c.k_max = j.at("k_max").get<int>();
  return c;
}

// Per-example training-graph outputs; node ids live in the example's tape.
struct ExampleNodes {
  int nll_sum = -1;    // 1x1, sum of token NLLs
  int token_count = 0;
  int img_vec = -1;    // 1x d_s, unit norm (only when IPG active)
  int txt_vec = -1;
};

// Dropout and augmentation context for one forward pass.
struct ForwardCtx {
  bool training = false;
  Rng* rng = nullptr;
};

template <class S>
class S4MModelT {
 public:
  using M = typename TapeT<S>::M;

  S4MModelT(const ModelConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng = Rng::child(init_seed, "model-init");
    build_params(rng);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStoreT<S>& params() { return params_; }
  const ParamStoreT<S>& params() const { return params_; }
  bool ipg_stripped() const { return ipg_stripped_; }
  void mark_ipg_stripped() { ipg_stripped_ = true; }

  // Frozen topic embeddings, rows following `topics` order (the canonical
  // general set). Region subsets index into these rows.
  void set_topics(const KnowledgeBase& kb, const TopicEmbedder& embedder) {
    TopicSet topics = kb.general_set();
    MatD emb = embedder.embed(topics);
    std::map<std::string, TopicSet> regions;
    for (RegionTag r : all_regions()) regions[region_name(r)] = kb.region_subset(r);
    set_topics_raw(topics, regions, emb);
  }

  void set_topics_raw(const TopicSet& topics, const std::map<std::string, TopicSet>& regions,
                      const MatD& embeddings) {
    check(static_cast<int>(topics.size()) <= cfg_.k_max, "topic set exceeds k_max");
    check(embeddings.rows() == static_cast<Eigen::Index>(topics.size()) && embeddings.cols() == cfg_.d_k,
          "topic embedding matrix does not match (topics, d_k)");
    topics_ = topics;
    regions_ = regions;
    topic_matrix_ = embeddings.template cast<S>();
    region_rows_.clear();
    std::map<std::string, int> row_of;
    for (size_t i = 0; i < topics.size(); ++i) row_of[topics[i]] = static_cast<int>(i);
    for (const auto& [name, subset] : regions) {
      std::vector<int>& rows = region_rows_[name];
      for (const auto& t : subset) {
        auto it = row_of.find(t);
        check(it != row_of.end(), "region topic \"" + t + "\" missing from general set");
        rows.push_back(it->second);
      }
    }
  }

  bool has_topics() const { return topic_matrix_.size() != 0; }
  const TopicSet& topics() const { return topics_; }
  const std::map<std::string, TopicSet>& topic_regions() const { return regions_; }
  const M& topic_matrix() const { return topic_matrix_; }

  // ---- forward pieces ----

  // Two views -> p x d image tokens (learned grid position embedding added,
  // shared across views).
  int encode_image(TapeT<S>& t, const M& view1, const M& view2, const ForwardCtx& ctx = {}) const {
    std::vector<int> view_tokens;
    for (const M* v : {&view1, &view2}) {
      check(v->rows() == static_cast<Eigen::Index>(cfg_.image_size) * cfg_.image_size &&
                v->cols() == cfg_.in_channels,
            "encode_image: view has wrong spatial size");
      int x = t.input(*v);
      for (const auto& stage : conv_) {
        x = t.relu(t.conv2d(x, t.param(stage.w), t.param(stage.b), stage.geom));
      }
      x = t.add(x, t.param(enc_pos_));
      x = maybe_dropout(t, x, ctx);
      view_tokens.push_back(x);
    }
    return t.concat_rows(view_tokens);
  }

  // Topic rows for a tag (or the full general set), projected to d when
  // d_k != d. Constant leaf: topic embeddings stay frozen.
  int topics_node(TapeT<S>& t, const std::string& tag_name, bool full_set,
                  bool fallback_full_knowledge = false) const {
    check(has_topics(), "model has no topic embeddings loaded");
    M rows;
    if (full_set) {
      rows = topic_matrix_;
    } else {
      auto tag = try_parse_region(tag_name);
      if (!tag) {
        if (!fallback_full_knowledge) fail("unknown region tag: \"" + tag_name + "\"");
        rows = topic_matrix_;
      } else {
        const auto& idx = region_rows_.at(region_name(*tag));
        rows.resize(static_cast<Eigen::Index>(idx.size()), topic_matrix_.cols());
        for (size_t i = 0; i < idx.size(); ++i) {
          rows.row(static_cast<Eigen::Index>(i)) = topic_matrix_.row(idx[i]);
        }
      }
    }
    int node = t.input(std::move(rows));
    if (cfg_.d_k != cfg_.d) node = topic_adapter_.forward(t, node);
    return node;
  }

  // Co-attention aggregation over [image tokens; topic rows].
  int aggregate(TapeT<S>& t, int img, int topics) const {
    check(cfg_.has_agg(), "aggregate called on a base-ablation model");
    check(t.val(topics).rows() >= 1, "aggregate: empty topic set");
    check(t.val(topics).cols() == cfg_.d, "aggregate: topic rows not projected to d");
    int x = t.concat_rows({img, topics});
    for (const auto& layer : agg_) x = layer.forward(t, x);
    return x;
  }

  // Causal decoder over the prefix with cross-attention into fused rows.
  // Returns per-position next-token logits, prefix.size() x V.
  int decoder_forward(TapeT<S>& t, int fused, const std::vector<int>& prefix,
                      const ForwardCtx& ctx = {}) const {
    check(!prefix.empty() && prefix.front() == Vocab::kBos, "decoder_forward: prefix must begin with BOS");
    check(static_cast<int>(prefix.size()) <= cfg_.max_len, "decoder_forward: prefix longer than max_len");
    const int T = static_cast<int>(prefix.size());
    int x = t.add(t.gather_rows(t.param(dec_embed_), prefix), t.slice_rows(t.param(dec_pos_), 0, T));
    x = maybe_dropout(t, x, ctx);
    M mask = causal_mask<S>(T);
    for (const auto& layer : dec_) x = layer.forward(t, x, fused, mask);
    return dec_out_.forward(t, x);
  }

  // sigma(Phi(theta_phi, x)): pooled image tokens, projected and normalized.
  int pool_image(TapeT<S>& t, int img) const {
    check(cfg_.has_ipg(), "pool_image: model has no IPG branch");
    int pooled;
    if (cfg_.pool == "mean") {
      pooled = t.mean_rows(img);
    } else if (cfg_.pool == "max") {
      pooled = t.max_rows(img);
    } else {
      pooled = t.slice_rows(img, 0, 1);
    }
    return t.l2_normalize_rows(ipg_img_proj_.forward(t, pooled));
  }

  // h(y): report embedding from the trainable text encoder.
  int embed_report(TapeT<S>& t, const std::vector<int>& ids, const ForwardCtx& ctx = {}) const {
    check(cfg_.has_ipg(), "embed_report: model has no IPG branch");
    check(!ids.empty(), "embed_report: empty sequence");
    check(static_cast<int>(ids.size()) <= cfg_.max_len, "embed_report: sequence longer than max_len");
    const int T = static_cast<int>(ids.size());
    int x = t.add(t.gather_rows(t.param(h_embed_), ids), t.slice_rows(t.param(h_pos_), 0, T));
    x = maybe_dropout(t, x, ctx);
    for (const auto& layer : h_) x = layer.forward(t, x);
    return t.l2_normalize_rows(ipg_txt_proj_.forward(t, t.slice_rows(x, 0, 1)));
  }

  // Symmetric InfoNCE over in-batch pairs with the learnable temperature.
  int contrastive_loss(TapeT<S>& t, int img_mat, int txt_mat) const {
    check(cfg_.has_ipg(), "contrastive_loss: model has no IPG branch");
    const int b = static_cast<int>(t.val(img_mat).rows());
    check(b >= 2, "contrastive loss needs negatives");
    int inv_tau = t.exp_scalar(t.scale(t.param(ipg_log_tau_), S(-1)));
    int logits = t.mul_scalar_node(t.matmul(img_mat, t.transpose(txt_mat)), inv_tau);
    std::vector<int> diag(static_cast<size_t>(b));
    for (int i = 0; i < b; ++i) diag[static_cast<size_t>(i)] = i;
    int a = t.cross_entropy_rows(logits, diag);
    int bwd = t.cross_entropy_rows(t.transpose(logits), diag);
    return t.scale(t.add(a, bwd), S(0.5) / static_cast<S>(b));
  }

  // Full training graph for one example. seq is the BOS...EOS target; the
  // decoder consumes seq[0..T-2] and predicts seq[1..T-1].
  ExampleNodes example_forward(TapeT<S>& t, const M& view1, const M& view2, const std::string& tag,
                               const std::vector<int>& seq, const ForwardCtx& ctx = {}) const {
    check(seq.size() >= 2, "example_forward: sequence must contain BOS and EOS");
    ExampleNodes out;
    int img = encode_image(t, view1, view2, ctx);
    int fused = img;
    if (cfg_.has_agg()) {
      fused = aggregate(t, img, topics_node(t, tag, cfg_.ablation == "radka_star"));
    }
    std::vector<int> prefix(seq.begin(), seq.end() - 1);
    std::vector<int> targets(seq.begin() + 1, seq.end());
    int logits = decoder_forward(t, fused, prefix, ctx);
    out.nll_sum = t.cross_entropy_rows(logits, targets);
    out.token_count = static_cast<int>(targets.size());
    if (cfg_.has_ipg()) {
      out.img_vec = pool_image(t, img);
      out.txt_vec = embed_report(t, seq, ctx);
    }
    return out;
  }

  int log_tau_param() const { return ipg_log_tau_; }

  // Parameter names, in registration order.
  std::vector<std::string> param_names() const {
    std::vector<std::string> names;
    for (int i = 0; i < params_.count(); ++i) names.push_back(params_.name(i));
    return names;
  }

 private:
  struct ConvStage {
    int w = -1, b = -1;
    ConvGeom geom;
  };

  int maybe_dropout(TapeT<S>& t, int x, const ForwardCtx& ctx) const {
    if (!ctx.training || cfg_.dropout <= 0.0 || ctx.rng == nullptr) return x;
    M mask(t.val(x).rows(), t.val(x).cols());
    const S keep = static_cast<S>(1.0 - cfg_.dropout);
    for (Eigen::Index i = 0; i < mask.size(); ++i) {
      mask.data()[i] = ctx.rng->coin(cfg_.dropout) ? S(0) : S(1) / keep;
    }
    return t.mul_const(x, std::move(mask));
  }

  void build_params(Rng& rng) {
    // Image encoder: stride-2 3x3 conv stages down to a grid of d-dim tokens.
    int size = cfg_.image_size;
    int in_c = cfg_.in_channels;
    for (size_t s = 0; s < cfg_.encoder_channels.size(); ++s) {
      const int out_c = cfg_.encoder_channels[s];
      ConvStage st;
      st.geom = ConvGeom{size, size, in_c, out_c, 3, 2, 1};
      const int fan_in = 9 * in_c;
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      M w(9 * in_c, out_c), b(1, out_c);
      for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<S>(rng.uniform(-bound, bound));
      for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = static_cast<S>(rng.uniform(-bound, bound));
      st.w = params_.add("enc.conv" + std::to_string(s) + ".w", std::move(w), ParamGroup::image_encoder);
      st.b = params_.add("enc.conv" + std::to_string(s) + ".b", std::move(b), ParamGroup::image_encoder);
      conv_.push_back(st);
      size /= 2;
      in_c = out_c;
    }
    enc_pos_ = add_embedding(params_, "enc.pos", cfg_.tokens_per_view(), cfg_.d,
                             ParamGroup::image_encoder, rng);

    if (cfg_.d_k != cfg_.d) {
      topic_adapter_ = LinearP<S>::create(params_, "topic.adapter", cfg_.d_k, cfg_.d, ParamGroup::rest, rng);
    }

    if (cfg_.has_agg()) {
      for (int l = 0; l < cfg_.agg_layers; ++l) {
        agg_.push_back(AggLayerP<S>::create(params_, "agg." + std::to_string(l), cfg_.d, cfg_.heads, rng));
      }
    }

    dec_embed_ = add_embedding(params_, "dec.embed", cfg_.vocab_size, cfg_.d, ParamGroup::rest, rng);
    dec_pos_ = add_embedding(params_, "dec.pos", cfg_.max_len, cfg_.d, ParamGroup::rest, rng);
    for (int l = 0; l < cfg_.decoder_layers; ++l) {
      dec_.push_back(DecoderLayerP<S>::create(params_, "dec." + std::to_string(l), cfg_.d, cfg_.heads,
                                              cfg_.d_ff, rng));
    }
    dec_out_ = LinearP<S>::create(params_, "dec.out", cfg_.d, cfg_.vocab_size, ParamGroup::rest, rng);

    if (cfg_.has_ipg()) {
      ipg_img_proj_ = LinearP<S>::create(params_, "ipg.img_proj", cfg_.d, cfg_.d_s, ParamGroup::rest, rng);
      h_embed_ = add_embedding(params_, "ipg.h.embed", cfg_.vocab_size, cfg_.d, ParamGroup::text_encoder, rng);
      h_pos_ = add_embedding(params_, "ipg.h.pos", cfg_.max_len, cfg_.d, ParamGroup::text_encoder, rng);
      for (int l = 0; l < cfg_.h_layers; ++l) {
        h_.push_back(EncoderLayerP<S>::create(params_, "ipg.h." + std::to_string(l), cfg_.d, cfg_.heads,
                                              cfg_.d_ff, ParamGroup::text_encoder, rng));
      }
      ipg_txt_proj_ = LinearP<S>::create(params_, "ipg.txt_proj", cfg_.d, cfg_.d_s, ParamGroup::rest, rng);
      M lt(1, 1);
      lt(0, 0) = static_cast<S>(std::log(cfg_.tau_init));
      ipg_log_tau_ = params_.add("ipg.log_tau", std::move(lt), ParamGroup::rest);
    }
  }

  ModelConfig cfg_;
  ParamStoreT<S> params_;
  bool ipg_stripped_ = false;

  std::vector<ConvStage> conv_;
  int enc_pos_ = -1;
  LinearP<S> topic_adapter_;
  std::vector<AggLayerP<S>> agg_;
  int dec_embed_ = -1, dec_pos_ = -1;
  std::vector<DecoderLayerP<S>> dec_;
  LinearP<S> dec_out_;
  LinearP<S> ipg_img_proj_, ipg_txt_proj_;
  int h_embed_ = -1, h_pos_ = -1;
  std::vector<EncoderLayerP<S>> h_;
  int ipg_log_tau_ = -1;

  TopicSet topics_;
  std::map<std::string, TopicSet> regions_;
  std::map<std::string, std::vector<int>> region_rows_;
  M topic_matrix_;
};

using S4MModel = S4MModelT<float>;

// ---------------------------------------------------------------------------
// Reference-form losses on plain matrices (also the public op contracts).

// Mean next-token NLL over non-PAD positions. logits[i] is T_i x V; targets
// rows align with logits rows; pad_id marks excluded positions.
inline double generation_loss_eval(const std::vector<MatD>& logits,
                                   const std::vector<std::vector<int>>& targets,
                                   int pad_id = Vocab::kPad) {
  check(logits.size() == targets.size(), "generation_loss: shape mismatch");
  double total = 0.0;
  int64_t count = 0;
  for (size_t i = 0; i < logits.size(); ++i) {
    const MatD& l = logits[i];
    check(l.rows() == static_cast<Eigen::Index>(targets[i].size()), "generation_loss: shape mismatch");
    for (Eigen::Index r = 0; r < l.rows(); ++r) {
      const int tgt = targets[i][static_cast<size_t>(r)];
      if (tgt == pad_id) continue;
      double mx = l.row(r).maxCoeff();
      double z = (l.row(r).array() - mx).exp().sum();
      total -= l(r, tgt) - mx - std::log(z);
      ++count;
    }
  }
  check(count > 0, "generation_loss: all positions are PAD");
  return total / static_cast<double>(count);
}

// Symmetric InfoNCE with a fixed temperature; rows must be unit norm.
inline double contrastive_loss_eval(const MatD& img, const MatD& txt, double tau) {
  check(img.rows() == txt.rows() && img.cols() == txt.cols(), "contrastive_loss: shape mismatch");
  check(img.rows() >= 2, "contrastive loss needs negatives");
  const MatD logits = (img * txt.transpose()) / tau;
  auto ce_diag = [](const MatD& m) {
    double s = 0.0;
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      double mx = m.row(r).maxCoeff();
      double z = (m.row(r).array() - mx).exp().sum();
      s -= m(r, r) - mx - std::log(z);
    }
    return s / static_cast<double>(m.rows());
  };
  return 0.5 * (ce_diag(logits) + ce_diag(MatD(logits.transpose())));
}

// Cosine alignment between pooled image features and the report embedding.
template <class S>
double alignment_score(const S4MModelT<S>& model, const typename S4MModelT<S>::M& view1,
                       const typename S4MModelT<S>::M& view2, const std::vector<int>& report_ids) {
  if (!model.config().has_ipg() || model.ipg_stripped()) fail("checkpoint has no alignment heads");
  GradStoreT<S> grads(&model.params());
  TapeT<S> t(&model.params(), &grads, /*grad_enabled=*/false);
  int img = model.encode_image(t, view1, view2);
  int a = model.pool_image(t, img);
  int b = model.embed_report(t, report_ids);
  return static_cast<double>(t.val(a).row(0).dot(t.val(b).row(0)));
}

}  // namespace s4m
