#pragma once

// Reverse-mode autodiff over Eigen matrices. A Tape is a define-by-run arena
// of nodes; parameters live outside the tape in a ParamStore so several tapes
// (one per batch example, built on worker threads) can share one parameter
// set and accumulate gradients into per-thread GradStores.

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "s4m/common.hpp"

namespace s4m {

enum class ParamGroup {
  image_encoder,  // lr_encoders
  text_encoder,   // lr_encoders (the report embedder h)
  rest            // lr_rest
};

template <class S>
class ParamStoreT {
 public:
  using M = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  int add(const std::string& name, M value, ParamGroup group) {
    check(!index_.count(name), "duplicate parameter name: " + name);
    index_[name] = static_cast<int>(values_.size());
    values_.push_back(std::move(value));
    names_.push_back(name);
    groups_.push_back(group);
    return static_cast<int>(values_.size()) - 1;
  }

  int count() const { return static_cast<int>(values_.size()); }
  const M& value(int pid) const { return values_[static_cast<size_t>(pid)]; }
  M& value(int pid) { return values_[static_cast<size_t>(pid)]; }
  const std::string& name(int pid) const { return names_[static_cast<size_t>(pid)]; }
  ParamGroup group(int pid) const { return groups_[static_cast<size_t>(pid)]; }
  int find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
  }
  int64_t scalar_count() const {
    int64_t n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
  }

 private:
  std::vector<M> values_;
  std::vector<std::string> names_;
  std::vector<ParamGroup> groups_;
  std::map<std::string, int> index_;
};

template <class S>
class GradStoreT {
 public:
  using M = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  explicit GradStoreT(const ParamStoreT<S>* params) : params_(params) {
    grads_.resize(static_cast<size_t>(params->count()));
  }

  template <class Expr>
  void accumulate(int pid, const Expr& g) {
    M& slot = grads_[static_cast<size_t>(pid)];
    if (slot.size() == 0) {
      slot = g;
    } else {
      slot += g;
    }
  }

  bool has(int pid) const { return grads_[static_cast<size_t>(pid)].size() != 0; }

  const M& grad(int pid) const {
    static const M empty;
    return has(pid) ? grads_[static_cast<size_t>(pid)] : empty;
  }

  // Dense view: zeros for untouched parameters.
  M dense(int pid) const {
    if (has(pid)) return grads_[static_cast<size_t>(pid)];
    const M& v = params_->value(pid);
    return M::Zero(v.rows(), v.cols());
  }

  void merge(const GradStoreT& other) {
    for (size_t i = 0; i < grads_.size(); ++i) {
      if (other.grads_[i].size() == 0) continue;
      if (grads_[i].size() == 0) {
        grads_[i] = other.grads_[i];
      } else {
        grads_[i] += other.grads_[i];
      }
    }
  }

  void clear() {
    for (auto& g : grads_) g.resize(0, 0);
  }

 private:
  const ParamStoreT<S>* params_;
  std::vector<M> grads_;
};

// Geometry of one conv application; spatial layout is row-major (y * W + x).
struct ConvGeom {
  int in_h, in_w, in_c;
  int out_c;
  int kernel, stride, pad;
  int out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
  int out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
};

template <class S>
class TapeT {
 public:
  using M = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  TapeT(const ParamStoreT<S>* params, GradStoreT<S>* grads, bool grad_enabled = true)
      : params_(params), grads_(grads), grad_enabled_(grad_enabled) {
    nodes_.reserve(512);
  }

  bool grad_enabled() const { return grad_enabled_; }

  const M& val(int i) const {
    const Node& n = nodes_[static_cast<size_t>(i)];
    return n.param >= 0 ? params_->value(n.param) : n.val;
  }

  const M& grad(int i) const { return nodes_[static_cast<size_t>(i)].grad; }

  // ---- leaves ----

  int input(M v) { return push(std::move(v)); }

  int param(int pid) {
    Node n;
    n.param = pid;
    nodes_.push_back(std::move(n));
    return last();
  }

  // ---- elementwise / linear algebra ----

  int matmul(int a, int b) {
    int out = push(val(a) * val(b));
    if (grad_enabled_) {
      set_back(out, [this, a, b, out] {
        add_grad(a, grad_at(out) * val(b).transpose());
        add_grad(b, val(a).transpose() * grad_at(out));
      });
    }
    return out;
  }

  int add(int a, int b) {
    int out = push(val(a) + val(b));
    if (grad_enabled_) {
      set_back(out, [this, a, b, out] {
        add_grad(a, grad_at(out));
        add_grad(b, grad_at(out));
      });
    }
    return out;
  }

  int scale(int a, S c) {
    int out = push(val(a) * c);
    if (grad_enabled_) {
      set_back(out, [this, a, c, out] { add_grad(a, grad_at(out) * c); });
    }
    return out;
  }

  int hadamard(int a, int b) {
    int out = push(val(a).cwiseProduct(val(b)));
    if (grad_enabled_) {
      set_back(out, [this, a, b, out] {
        add_grad(a, grad_at(out).cwiseProduct(val(b)));
        add_grad(b, grad_at(out).cwiseProduct(val(a)));
      });
    }
    return out;
  }

  // Elementwise product with a constant matrix (dropout masks).
  int mul_const(int a, M m) {
    int out = push(val(a).cwiseProduct(m));
    if (grad_enabled_) {
      set_back(out, [this, a, out, m = std::move(m)] { add_grad(a, grad_at(out).cwiseProduct(m)); });
    }
    return out;
  }

  // Constant additive term (attention masks).
  int add_const(int a, const M& m) {
    int out = push(val(a) + m);
    if (grad_enabled_) {
      set_back(out, [this, a, out] { add_grad(a, grad_at(out)); });
    }
    return out;
  }

  // x (n x d) + row vector b (1 x d), broadcast over rows.
  int add_rowvec(int a, int b) {
    M v = val(a);
    v.rowwise() += val(b).row(0);
    int out = push(std::move(v));
    if (grad_enabled_) {
      set_back(out, [this, a, b, out] {
        add_grad(a, grad_at(out));
        add_grad(b, grad_at(out).colwise().sum());
      });
    }
    return out;
  }

  int relu(int a) {
    int out = push(val(a).cwiseMax(S(0)));
    if (grad_enabled_) {
      set_back(out, [this, a, out] {
        M mask = (val(out).array() > S(0)).template cast<S>();
        add_grad(a, grad_at(out).cwiseProduct(mask));
      });
    }
    return out;
  }

  int transpose(int a) {
    int out = push(val(a).transpose());
    if (grad_enabled_) {
      set_back(out, [this, a, out] { add_grad(a, grad_at(out).transpose()); });
    }
    return out;
  }

  // ---- shape ops ----

  int concat_rows(const std::vector<int>& parts) {
    Eigen::Index rows = 0, cols = val(parts[0]).cols();
    for (int p : parts) rows += val(p).rows();
    M v(rows, cols);
    Eigen::Index r = 0;
    for (int p : parts) {
      v.middleRows(r, val(p).rows()) = val(p);
      r += val(p).rows();
    }
    int out = push(std::move(v));
    if (grad_enabled_) {
      set_back(out, [this, parts, out] {
        Eigen::Index r2 = 0;
        for (int p : parts) {
          add_grad(p, grad_at(out).middleRows(r2, val(p).rows()));
          r2 += val(p).rows();
        }
      });
    }
    return out;
  }

  int concat_cols(const std::vector<int>& parts) {
    Eigen::Index cols = 0, rows = val(parts[0]).rows();
    for (int p : parts) cols += val(p).cols();
    M v(rows, cols);
    Eigen::Index c = 0;
    for (int p : parts) {
      v.middleCols(c, val(p).cols()) = val(p);
      c += val(p).cols();
    }
    int out = push(std::move(v));
    if (grad_enabled_) {
      set_back(out, [this, parts, out] {
        Eigen::Index c2 = 0;
        for (int p : parts) {
          add_grad(p, grad_at(out).middleCols(c2, val(p).cols()));
          c2 += val(p).cols();
        }
      });
    }
    return out;
  }

  int slice_rows(int a, Eigen::Index r0, Eigen::Index n) {
    int out = push(val(a).middleRows(r0, n));
    if (grad_enabled_) {
      set_back(out, [this, a, r0, n, out] {
        M g = M::Zero(val(a).rows(), val(a).cols());
        g.middleRows(r0, n) = grad_at(out);
        add_grad(a, g);
      });
    }
    return out;
  }

  int slice_cols(int a, Eigen::Index c0, Eigen::Index n) {
    int out = push(val(a).middleCols(c0, n));
    if (grad_enabled_) {
      set_back(out, [this, a, c0, n, out] {
        M g = M::Zero(val(a).rows(), val(a).cols());
        g.middleCols(c0, n) = grad_at(out);
        add_grad(a, g);
      });
    }
    return out;
  }

  // ---- reductions / normalizations ----

  int mean_rows(int a) {
    int out = push(val(a).colwise().mean());
    if (grad_enabled_) {
      set_back(out, [this, a, out] {
        S inv = S(1) / static_cast<S>(val(a).rows());
        add_grad(a, (M::Ones(val(a).rows(), 1) * grad_at(out)) * inv);
      });
    }
    return out;
  }

  int max_rows(int a) {
    const M& x = val(a);
    M v(1, x.cols());
    std::vector<Eigen::Index> argmax(static_cast<size_t>(x.cols()));
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      Eigen::Index r;
      v(0, c) = x.col(c).maxCoeff(&r);
      argmax[static_cast<size_t>(c)] = r;
    }
    int out = push(std::move(v));
    if (grad_enabled_) {
      set_back(out, [this, a, out, argmax = std::move(argmax)] {
        M g = M::Zero(val(a).rows(), val(a).cols());
        for (Eigen::Index c = 0; c < g.cols(); ++c) g(argmax[static_cast<size_t>(c)], c) = grad_at(out)(0, c);
        add_grad(a, g);
      });
    }
    return out;
  }

  int softmax_rows(int a) {
    const M& x = val(a);
    M y(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      auto row = x.row(r);
      S mx = row.maxCoeff();
      Eigen::Array<S, 1, Eigen::Dynamic> e = (row.array() - mx).exp();
      y.row(r) = e / e.sum();
    }
    int out = push(std::move(y));
    if (grad_enabled_) {
      set_back(out, [this, a, out] {
        const M& yv = val(out);
        const M& g = grad_at(out);
        M dx(yv.rows(), yv.cols());
        for (Eigen::Index r = 0; r < yv.rows(); ++r) {
          S dot = g.row(r).dot(yv.row(r));
          dx.row(r) = yv.row(r).array() * (g.row(r).array() - dot);
        }
        add_grad(a, dx);
      });
    }
    return out;
  }

  int layer_norm_rows(int x, int gamma, int beta, S eps = S(1e-5)) {
    const M& xv = val(x);
    M xhat(xv.rows(), xv.cols());
    Eigen::Array<S, Eigen::Dynamic, 1> inv_std(xv.rows());
    for (Eigen::Index r = 0; r < xv.rows(); ++r) {
      S mu = xv.row(r).mean();
      auto centered = xv.row(r).array() - mu;
      S var = centered.square().mean();
      S is = S(1) / std::sqrt(var + eps);
      inv_std(r) = is;
      xhat.row(r) = (centered * is).matrix();
    }
    M y = xhat;
    y.array().rowwise() *= val(gamma).row(0).array();
    y.rowwise() += val(beta).row(0);
    int out = push(std::move(y));
    if (grad_enabled_) {
      set_back(out, [this, x, gamma, beta, out, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
        const M& g = grad_at(out);
        add_grad(gamma, g.cwiseProduct(xhat).colwise().sum());
        add_grad(beta, g.colwise().sum());
        M dxhat = g;
        dxhat.array().rowwise() *= val(gamma).row(0).array();
        M dx(dxhat.rows(), dxhat.cols());
        for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
          S m1 = dxhat.row(r).mean();
          S m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
          dx.row(r) = ((dxhat.row(r).array() - m1 - xhat.row(r).array() * m2) * inv_std(r)).matrix();
        }
        add_grad(x, dx);
      });
    }
    return out;
  }

  // Row-wise L2 normalization, y_r = x_r / max(||x_r||, eps).
  int l2_normalize_rows(int a, S eps = S(1e-12)) {
    const M& x = val(a);
    M y(x.rows(), x.cols());
    Eigen::Array<S, Eigen::Dynamic, 1> inv_norm(x.rows());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      S nrm = x.row(r).norm();
      S in = S(1) / std::max(nrm, eps);
      inv_norm(r) = in;
      y.row(r) = x.row(r) * in;
    }
    int out = push(std::move(y));
    if (grad_enabled_) {
      set_back(out, [this, a, out, inv_norm = std::move(inv_norm)] {
        const M& yv = val(out);
        const M& g = grad_at(out);
        M dx(yv.rows(), yv.cols());
        for (Eigen::Index r = 0; r < yv.rows(); ++r) {
          S dot = g.row(r).dot(yv.row(r));
          dx.row(r) = (g.row(r) - yv.row(r) * dot) * inv_norm(r);
        }
        add_grad(a, dx);
      });
    }
    return out;
  }

  // ---- embeddings ----

  int gather_rows(int table, const std::vector<int>& ids) {
    const M& e = val(table);
    M v(static_cast<Eigen::Index>(ids.size()), e.cols());
    for (size_t i = 0; i < ids.size(); ++i) v.row(static_cast<Eigen::Index>(i)) = e.row(ids[i]);
    int out = push(std::move(v));
    if (grad_enabled_) {
      set_back(out, [this, table, ids, out] {
        M g = M::Zero(val(table).rows(), val(table).cols());
        for (size_t i = 0; i < ids.size(); ++i) g.row(ids[i]) += grad_at(out).row(static_cast<Eigen::Index>(i));
        add_grad(table, g);
      });
    }
    return out;
  }

  // ---- scalars (1x1 nodes) ----

  int exp_scalar(int a) {
    int out = push((M(1, 1) << std::exp(val(a)(0, 0))).finished());
    if (grad_enabled_) {
      set_back(out, [this, a, out] { add_grad(a, grad_at(out) * val(out)(0, 0)); });
    }
    return out;
  }

  // A * s, s a 1x1 node.
  int mul_scalar_node(int a, int s) {
    int out = push(val(a) * val(s)(0, 0));
    if (grad_enabled_) {
      set_back(out, [this, a, s, out] {
        add_grad(a, grad_at(out) * val(s)(0, 0));
        M ds(1, 1);
        ds(0, 0) = grad_at(out).cwiseProduct(val(a)).sum();
        add_grad(s, ds);
      });
    }
    return out;
  }

  // ---- composite losses ----

  // Sum over rows of -log softmax(logits_r)[target_r]. Returns a 1x1 node.
  int cross_entropy_rows(int logits, const std::vector<int>& targets) {
    const M& x = val(logits);
    check(static_cast<size_t>(x.rows()) == targets.size(), "cross_entropy_rows: row/target mismatch");
    M probs(x.rows(), x.cols());
    S total = S(0);
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      S mx = x.row(r).maxCoeff();
      Eigen::Array<S, 1, Eigen::Dynamic> e = (x.row(r).array() - mx).exp();
      S z = e.sum();
      probs.row(r) = (e / z).matrix();
      total -= (x(r, targets[static_cast<size_t>(r)]) - mx - std::log(z));
    }
    int out = push((M(1, 1) << total).finished());
    if (grad_enabled_) {
      set_back(out, [this, logits, targets, out, probs = std::move(probs)] {
        S g = grad_at(out)(0, 0);
        M d = probs * g;
        for (Eigen::Index r = 0; r < d.rows(); ++r) d(r, targets[static_cast<size_t>(r)]) -= g;
        add_grad(logits, d);
      });
    }
    return out;
  }

  // 2-D convolution via im2col. x is (in_h*in_w) x in_c, w is
  // (kernel*kernel*in_c) x out_c with rows ordered (ky, kx, c), b is 1 x out_c.
  int conv2d(int x, int w, int b, const ConvGeom& geom) {
    const M& xv = val(x);
    check(xv.rows() == static_cast<Eigen::Index>(geom.in_h) * geom.in_w && xv.cols() == geom.in_c,
          "conv2d: input does not match geometry");
    const int oh = geom.out_h(), ow = geom.out_w(), k = geom.kernel;
    const int patch = k * k;
    M cols(static_cast<Eigen::Index>(oh) * ow, static_cast<Eigen::Index>(patch) * geom.in_c);
    std::vector<int32_t> src(static_cast<size_t>(oh) * ow * patch);
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const Eigen::Index orow = static_cast<Eigen::Index>(oy) * ow + ox;
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * geom.stride + ky - geom.pad;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * geom.stride + kx - geom.pad;
            const int kk = ky * k + kx;
            const size_t si = static_cast<size_t>(orow) * patch + static_cast<size_t>(kk);
            if (iy < 0 || iy >= geom.in_h || ix < 0 || ix >= geom.in_w) {
              src[si] = -1;
              cols.row(orow).segment(static_cast<Eigen::Index>(kk) * geom.in_c, geom.in_c).setZero();
            } else {
              const int32_t irow = static_cast<int32_t>(iy) * geom.in_w + ix;
              src[si] = irow;
              cols.row(orow).segment(static_cast<Eigen::Index>(kk) * geom.in_c, geom.in_c) = xv.row(irow);
            }
          }
        }
      }
    }
    M v = cols * val(w);
    v.rowwise() += val(b).row(0);
    int out = push(std::move(v));
    if (grad_enabled_) {
      set_back(out, [this, x, w, b, geom, out, cols = std::move(cols), src = std::move(src)] {
        const M& g = grad_at(out);
        add_grad(w, cols.transpose() * g);
        add_grad(b, g.colwise().sum());
        M dcols = g * val(w).transpose();
        M dx = M::Zero(val(x).rows(), val(x).cols());
        const int patch = geom.kernel * geom.kernel;
        for (Eigen::Index orow = 0; orow < dcols.rows(); ++orow) {
          for (int kk = 0; kk < patch; ++kk) {
            int32_t irow = src[static_cast<size_t>(orow) * patch + static_cast<size_t>(kk)];
            if (irow < 0) continue;
            dx.row(irow) += dcols.row(orow).segment(static_cast<Eigen::Index>(kk) * geom.in_c, geom.in_c);
          }
        }
        add_grad(x, dx);
      });
    }
    return out;
  }

  // ---- backward ----

  void backward(int root) {
    check(val(root).size() == 1, "backward: root must be a scalar node");
    backward_seeded({{root, (M(1, 1) << S(1)).finished()}});
  }

  void backward_seeded(const std::vector<std::pair<int, M>>& seeds) {
    check(grad_enabled_, "backward on a no-grad tape");
    for (const auto& [idx, g] : seeds) add_grad(idx, g);
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.back && n.grad.size() != 0) n.back();
    }
  }

 private:
  struct Node {
    M val;
    M grad;
    int param = -1;
    std::function<void()> back;
  };

  int last() const { return static_cast<int>(nodes_.size()) - 1; }

  int push(M v) {
    Node n;
    n.val = std::move(v);
    nodes_.push_back(std::move(n));
    return last();
  }

  void set_back(int i, std::function<void()> f) { nodes_[static_cast<size_t>(i)].back = std::move(f); }

  const M& grad_at(int i) const { return nodes_[static_cast<size_t>(i)].grad; }

  template <class Expr>
  void add_grad(int i, const Expr& g) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.param >= 0) {
      grads_->accumulate(n.param, g);
      return;
    }
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  const ParamStoreT<S>* params_;
  GradStoreT<S>* grads_;
  bool grad_enabled_;
  std::vector<Node> nodes_;
};

using ParamStore = ParamStoreT<float>;
using GradStore = GradStoreT<float>;
using Tape = TapeT<float>;

}  // namespace s4m
