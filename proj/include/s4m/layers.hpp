#pragma once

#include <string>
#include <vector>

#include "s4m/graph.hpp"

namespace s4m {

// Parameter-id bundles for the standard blocks. Construction registers
// parameters in a fixed order, so (seed, config) determines initialization.

template <class S>
struct LinearP {
  int w = -1, b = -1;

  static LinearP create(ParamStoreT<S>& ps, const std::string& name, int d_in, int d_out,
                        ParamGroup g, Rng& rng) {
    using M = typename ParamStoreT<S>::M;
    double bound = 1.0 / std::sqrt(static_cast<double>(d_in));
    M w(d_in, d_out), b(1, d_out);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<S>(rng.uniform(-bound, bound));
    for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = static_cast<S>(rng.uniform(-bound, bound));
    LinearP p;
    p.w = ps.add(name + ".w", std::move(w), g);
    p.b = ps.add(name + ".b", std::move(b), g);
    return p;
  }

  int forward(TapeT<S>& t, int x) const { return t.add_rowvec(t.matmul(x, t.param(w)), t.param(b)); }
};

template <class S>
struct LayerNormP {
  int gamma = -1, beta = -1;

  static LayerNormP create(ParamStoreT<S>& ps, const std::string& name, int d, ParamGroup g) {
    using M = typename ParamStoreT<S>::M;
    LayerNormP p;
    p.gamma = ps.add(name + ".gamma", M::Ones(1, d), g);
    p.beta = ps.add(name + ".beta", M::Zero(1, d), g);
    return p;
  }

  int forward(TapeT<S>& t, int x) const { return t.layer_norm_rows(x, t.param(gamma), t.param(beta)); }
};

template <class S>
struct AttentionP {
  LinearP<S> q, k, v, o;
  int heads = 1;

  static AttentionP create(ParamStoreT<S>& ps, const std::string& name, int d, int heads,
                           ParamGroup g, Rng& rng) {
    AttentionP p;
    p.q = LinearP<S>::create(ps, name + ".q", d, d, g, rng);
    p.k = LinearP<S>::create(ps, name + ".k", d, d, g, rng);
    p.v = LinearP<S>::create(ps, name + ".v", d, d, g, rng);
    p.o = LinearP<S>::create(ps, name + ".o", d, d, g, rng);
    p.heads = heads;
    return p;
  }

  // Scaled dot-product attention; x_q attends over x_kv. add_mask, when
  // given, is added to the pre-softmax scores (rows = queries).
  int forward(TapeT<S>& t, int x_q, int x_kv,
              const typename TapeT<S>::M* add_mask = nullptr) const {
    const int d = static_cast<int>(t.val(q.w).cols());
    const int dh = d / heads;
    int qp = q.forward(t, x_q);
    int kp = k.forward(t, x_kv);
    int vp = v.forward(t, x_kv);
    std::vector<int> head_outs;
    head_outs.reserve(static_cast<size_t>(heads));
    const S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
    for (int h = 0; h < heads; ++h) {
      int qh = t.slice_cols(qp, static_cast<Eigen::Index>(h) * dh, dh);
      int kh = t.slice_cols(kp, static_cast<Eigen::Index>(h) * dh, dh);
      int vh = t.slice_cols(vp, static_cast<Eigen::Index>(h) * dh, dh);
      int scores = t.scale(t.matmul(qh, t.transpose(kh)), inv_sqrt);
      if (add_mask != nullptr) scores = t.add_const(scores, *add_mask);
      head_outs.push_back(t.matmul(t.softmax_rows(scores), vh));
    }
    return o.forward(t, t.concat_cols(head_outs));
  }
};

template <class S>
struct FeedForwardP {
  LinearP<S> up, down;

  static FeedForwardP create(ParamStoreT<S>& ps, const std::string& name, int d, int d_ff,
                             ParamGroup g, Rng& rng) {
    FeedForwardP p;
    p.up = LinearP<S>::create(ps, name + ".up", d, d_ff, g, rng);
    p.down = LinearP<S>::create(ps, name + ".down", d_ff, d, g, rng);
    return p;
  }

  int forward(TapeT<S>& t, int x) const { return down.forward(t, t.relu(up.forward(t, x))); }
};

// One co-attention layer of the knowledge aggregator: LN(x + MHA(x)).
template <class S>
struct AggLayerP {
  AttentionP<S> mha;
  LayerNormP<S> ln;

  static AggLayerP create(ParamStoreT<S>& ps, const std::string& name, int d, int heads, Rng& rng) {
    AggLayerP p;
    p.mha = AttentionP<S>::create(ps, name + ".mha", d, heads, ParamGroup::rest, rng);
    p.ln = LayerNormP<S>::create(ps, name + ".ln", d, ParamGroup::rest);
    return p;
  }

  int forward(TapeT<S>& t, int x) const { return ln.forward(t, t.add(x, mha.forward(t, x, x))); }
};

// Post-LN transformer encoder layer (used by the report embedder h).
template <class S>
struct EncoderLayerP {
  AttentionP<S> self;
  FeedForwardP<S> ffn;
  LayerNormP<S> ln1, ln2;

  static EncoderLayerP create(ParamStoreT<S>& ps, const std::string& name, int d, int heads, int d_ff,
                              ParamGroup g, Rng& rng) {
    EncoderLayerP p;
    p.self = AttentionP<S>::create(ps, name + ".self", d, heads, g, rng);
    p.ffn = FeedForwardP<S>::create(ps, name + ".ffn", d, d_ff, g, rng);
    p.ln1 = LayerNormP<S>::create(ps, name + ".ln1", d, g);
    p.ln2 = LayerNormP<S>::create(ps, name + ".ln2", d, g);
    return p;
  }

  int forward(TapeT<S>& t, int x) const {
    x = ln1.forward(t, t.add(x, self.forward(t, x, x)));
    return ln2.forward(t, t.add(x, ffn.forward(t, x)));
  }
};

// Post-LN transformer decoder layer: causal self-attention, cross-attention
// over the fused rows, feed-forward.
template <class S>
struct DecoderLayerP {
  AttentionP<S> self, cross;
  FeedForwardP<S> ffn;
  LayerNormP<S> ln1, ln2, ln3;

  static DecoderLayerP create(ParamStoreT<S>& ps, const std::string& name, int d, int heads, int d_ff,
                              Rng& rng) {
    DecoderLayerP p;
    p.self = AttentionP<S>::create(ps, name + ".self", d, heads, ParamGroup::rest, rng);
    p.cross = AttentionP<S>::create(ps, name + ".cross", d, heads, ParamGroup::rest, rng);
    p.ffn = FeedForwardP<S>::create(ps, name + ".ffn", d, d_ff, ParamGroup::rest, rng);
    p.ln1 = LayerNormP<S>::create(ps, name + ".ln1", d, ParamGroup::rest);
    p.ln2 = LayerNormP<S>::create(ps, name + ".ln2", d, ParamGroup::rest);
    p.ln3 = LayerNormP<S>::create(ps, name + ".ln3", d, ParamGroup::rest);
    return p;
  }

  int forward(TapeT<S>& t, int x, int fused, const typename TapeT<S>::M& causal_mask) const {
    x = ln1.forward(t, t.add(x, self.forward(t, x, x, &causal_mask)));
    x = ln2.forward(t, t.add(x, cross.forward(t, x, fused)));
    return ln3.forward(t, t.add(x, ffn.forward(t, x)));
  }
};

// Embedding table init, N(0, 0.02).
template <class S>
inline int add_embedding(ParamStoreT<S>& ps, const std::string& name, int rows, int cols,
                         ParamGroup g, Rng& rng) {
  using M = typename ParamStoreT<S>::M;
  M e(rows, cols);
  for (Eigen::Index i = 0; i < e.size(); ++i) e.data()[i] = static_cast<S>(rng.normal(0.0, 0.02));
  return ps.add(name, std::move(e), g);
}

template <class S>
inline typename TapeT<S>::M causal_mask(int n) {
  using M = typename TapeT<S>::M;
  M m = M::Zero(n, n);
  for (int r = 0; r < n; ++r) {
    for (int c = r + 1; c < n; ++c) m(r, c) = static_cast<S>(-1e9);
  }
  return m;
}

}  // namespace s4m
