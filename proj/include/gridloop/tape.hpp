#pragma once

#include <cmath>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#if defined(__GLIBC__) || defined(__linux__)
#include <malloc.h>
#define GRIDLOOP_HAVE_MALLOPT 1
#endif

#include "gridloop/common.hpp"

namespace gridloop {

// Tape arenas are ~100KB-10MB vectors that live for one example. Past the
// default mmap threshold glibc serves them as fresh mappings, which costs a
// page-fault storm per example; keeping them on the heap lets freed arenas
// come back warm. Done once, at first tape construction.
inline void tune_allocator_for_tapes() {
#ifdef GRIDLOOP_HAVE_MALLOPT
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 26);
    mallopt(M_TRIM_THRESHOLD, 1 << 26);
    return true;
  }();
  (void)done;
#endif
}

template <class S>
struct ParamTensor {
  std::string name;
  int rows = 0, cols = 0;
  bool decay = true;  // participates in decoupled weight decay
  std::vector<S> w;

  size_t size() const { return w.size(); }
  S* row(int r) { return w.data() + static_cast<size_t>(r) * cols; }
  const S* row(int r) const { return w.data() + static_cast<size_t>(r) * cols; }
};

template <class S>
struct ParamSet {
  std::vector<ParamTensor<S>> t;

  int add(std::string name, int rows, int cols, bool decay) {
    ParamTensor<S> p;
    p.name = std::move(name);
    p.rows = rows;
    p.cols = cols;
    p.decay = decay;
    p.w.assign(static_cast<size_t>(rows) * cols, S(0));
    t.push_back(std::move(p));
    return static_cast<int>(t.size()) - 1;
  }
  size_t scalar_count() const {
    size_t n = 0;
    for (const auto& p : t) n += p.size();
    return n;
  }
};

template <class S>
struct GradSet {
  std::vector<std::vector<S>> g;

  void init(const ParamSet<S>& ps) {
    g.resize(ps.t.size());
    for (size_t i = 0; i < ps.t.size(); ++i) g[i].assign(ps.t[i].size(), S(0));
  }
  void zero() {
    for (auto& v : g) std::fill(v.begin(), v.end(), S(0));
  }
  void add_scaled(const GradSet& o, S a) {
    for (size_t i = 0; i < g.size(); ++i)
      for (size_t j = 0; j < g[i].size(); ++j) g[i][j] += a * o.g[i][j];
  }
  S max_abs() const {
    S m = 0;
    for (const auto& v : g)
      for (S x : v) m = std::max(m, std::abs(x));
    return m;
  }
};

// Reverse-mode tape over small row vectors. Ops record a tagged node; values
// are computed eagerly into one arena, gradients mirror it 1:1, so backward
// is a single reverse sweep (construction order is already topological).
// Parameter gradients accumulate into the GradSet passed to backward().
template <class S>
class Tape {
 public:
  explicit Tape(const ParamSet<S>& params) : ps_(&params) {
    tune_allocator_for_tapes();
  }

  std::span<const S> val(int id) const {
    const Node& n = nodes_[id];
    return {vals_.data() + n.vofs, static_cast<size_t>(n.r) * n.c};
  }
  S scalar(int id) const { return vals_[nodes_[id].vofs]; }
  std::span<const S> grad_of(int id) const {
    const Node& n = nodes_[id];
    return {grads_.data() + n.vofs, static_cast<size_t>(n.r) * n.c};
  }
  int rows(int id) const { return nodes_[id].r; }
  int cols(int id) const { return nodes_[id].c; }
  size_t node_count() const { return nodes_.size(); }

  int constant(std::span<const S> v, int rows, int cols) {
    int id = alloc(Op::kConst, rows, cols);
    std::copy(v.begin(), v.end(), vals_.begin() + nodes_[id].vofs);
    return id;
  }

  // alias of a contiguous slice of another node; shares value and gradient
  int view(int src, int elem_off, int len) {
    Node n;
    n.op = Op::kView;
    n.r = 1;
    n.c = len;
    n.vofs = nodes_[src].vofs + elem_off;
    nodes_.push_back(n);
    return static_cast<int>(nodes_.size()) - 1;
  }

  int embed(int emb_p, int token, int pos_p, int pos) {
    const auto& E = ps_->t[emb_p];
    const auto& P = ps_->t[pos_p];
    if (token < 0 || token >= E.rows) throw ShapeError("token id outside embedding");
    if (pos < 0 || pos >= P.rows) throw ShapeError("position id outside table");
    int id = alloc(Op::kEmbed, 1, E.cols);
    Node& n = nodes_[id];
    n.p0 = emb_p;
    n.p1 = pos_p;
    n.i0 = token;
    n.i1 = pos;
    S* y = out(id);
    const S* e = E.row(token);
    const S* p = P.row(pos);
    for (int j = 0; j < E.cols; ++j) y[j] = e[j] + p[j];
    return id;
  }

  // input = sum_j mix[j] * E[row_off + j] + P[pos]; mix lives on the tape
  int embed_mix(int emb_p, int mix, int row_off, int pos_p, int pos) {
    const auto& E = ps_->t[emb_p];
    const auto& P = ps_->t[pos_p];
    int len = nodes_[mix].c;
    if (row_off + len > E.rows) throw ShapeError("mixture range outside embedding");
    int id = alloc(Op::kEmbedMix, 1, E.cols);
    Node& n = nodes_[id];
    n.a = mix;
    n.p0 = emb_p;
    n.p1 = pos_p;
    n.i0 = row_off;
    n.i1 = pos;
    S* y = out(id);
    const S* p = P.row(pos);
    std::copy(p, p + E.cols, y);
    const S* m = vals_.data() + nodes_[mix].vofs;
    for (int j = 0; j < len; ++j) {
      if (m[j] == S(0)) continue;
      const S* e = E.row(row_off + j);
      for (int d = 0; d < E.cols; ++d) y[d] += m[j] * e[d];
    }
    return id;
  }

  // same but the mixture is a plain vector (no gradient into it)
  int embed_mix_const(int emb_p, std::span<const S> mix, int row_off, int pos_p,
                      int pos, bool check_norm = true) {
    const auto& E = ps_->t[emb_p];
    if (check_norm) {
      S s = 0;
      for (S x : mix) s += x;
      if (std::abs(s - S(1)) > S(1e-6)) throw NotNormalized("mixture does not sum to 1");
    }
    int len = static_cast<int>(mix.size());
    if (row_off + len > E.rows) throw ShapeError("mixture range outside embedding");
    int id = alloc(Op::kEmbedMixConst, 1, E.cols, len);
    Node& n = nodes_[id];
    n.p0 = emb_p;
    n.p1 = pos_p;
    n.i0 = row_off;
    n.i1 = pos;
    n.i2 = len;
    std::copy(mix.begin(), mix.end(), aux_.begin() + n.aux);
    S* y = out(id);
    const S* p = ps_->t[pos_p].row(pos);
    std::copy(p, p + E.cols, y);
    for (int j = 0; j < len; ++j) {
      if (mix[j] == S(0)) continue;
      const S* e = E.row(row_off + j);
      for (int d = 0; d < E.cols; ++d) y[d] += mix[j] * e[d];
    }
    return id;
  }

  // y = x @ W (+ b); x is 1 x n, W is n x m
  int linear(int w_p, int b_p, int x) {
    const auto& W = ps_->t[w_p];
    if (nodes_[x].c != W.rows) throw ShapeError("linear dims");
    int id = alloc(Op::kLinear, 1, W.cols);
    Node& n = nodes_[id];
    n.a = x;
    n.p0 = w_p;
    n.p1 = b_p;
    S* y = out(id);
    if (b_p >= 0) {
      const S* b = ps_->t[b_p].w.data();
      std::copy(b, b + W.cols, y);
    } else {
      std::fill(y, y + W.cols, S(0));
    }
    const S* xv = vals_.data() + nodes_[x].vofs;
    for (int r = 0; r < W.rows; ++r) {
      S xr = xv[r];
      if (xr == S(0)) continue;
      const S* wr = W.row(r);
      for (int c = 0; c < W.cols; ++c) y[c] += xr * wr[c];
    }
    return id;
  }

  int layer_norm(int g_p, int b_p, int x) {
    int c = nodes_[x].c;
    int id = alloc(Op::kLayerNorm, 1, c, 2);
    Node& n = nodes_[id];
    n.a = x;
    n.p0 = g_p;
    n.p1 = b_p;
    const S* xv = vals_.data() + nodes_[x].vofs;
    S mean = 0;
    for (int j = 0; j < c; ++j) mean += xv[j];
    mean /= static_cast<S>(c);
    S var = 0;
    for (int j = 0; j < c; ++j) var += (xv[j] - mean) * (xv[j] - mean);
    var /= static_cast<S>(c);
    S rstd = S(1) / std::sqrt(var + S(1e-5));
    aux_[n.aux] = mean;
    aux_[n.aux + 1] = rstd;
    S* y = out(id);
    const S* gam = ps_->t[g_p].w.data();
    const S* bet = ps_->t[b_p].w.data();
    for (int j = 0; j < c; ++j) y[j] = (xv[j] - mean) * rstd * gam[j] + bet[j];
    return id;
  }

  int gelu(int x) {
    int c = nodes_[x].c;
    int id = alloc(Op::kGelu, 1, c, c);
    Node& n = nodes_[id];
    n.a = x;
    const S* xv = vals_.data() + nodes_[x].vofs;
    S* y = out(id);
    constexpr S kC = S(0.7978845608028654);  // sqrt(2/pi)
    for (int j = 0; j < c; ++j) {
      S t = std::tanh(kC * (xv[j] + S(0.044715) * xv[j] * xv[j] * xv[j]));
      aux_[n.aux + j] = t;
      y[j] = S(0.5) * xv[j] * (S(1) + t);
    }
    return id;
  }

  int add(int a, int b) {
    if (nodes_[a].c != nodes_[b].c || nodes_[a].r != nodes_[b].r)
      throw ShapeError("add dims");
    int id = alloc(Op::kAdd, nodes_[a].r, nodes_[a].c);
    Node& n = nodes_[id];
    n.a = a;
    n.b = b;
    const S* av = vals_.data() + nodes_[a].vofs;
    const S* bv = vals_.data() + nodes_[b].vofs;
    S* y = out(id);
    size_t sz = static_cast<size_t>(n.r) * n.c;
    for (size_t j = 0; j < sz; ++j) y[j] = av[j] + bv[j];
    return id;
  }

  // multi-head attention of one query row over cached key/value rows
  int attention(int q, const std::vector<int>& keys, const std::vector<int>& vals,
                int heads) {
    int d = nodes_[q].c;
    int m = static_cast<int>(keys.size());
    int dh = d / heads;
    int id = alloc(Op::kAttention, 1, d, static_cast<size_t>(heads) * m);
    Node& n = nodes_[id];
    n.a = q;
    n.i0 = heads;
    n.i1 = m;
    n.ilist = static_cast<int>(idx_.size());
    idx_.insert(idx_.end(), keys.begin(), keys.end());
    idx_.insert(idx_.end(), vals.begin(), vals.end());
    const S scale = S(1) / std::sqrt(static_cast<S>(dh));
    const S* qv = vals_.data() + nodes_[q].vofs;
    S* y = out(id);
    std::fill(y, y + d, S(0));
    S* probs = aux_.data() + n.aux;
    scores_.resize(m);
    for (int h = 0; h < heads; ++h) {
      int off = h * dh;
      S mx = -std::numeric_limits<S>::infinity();
      for (int j = 0; j < m; ++j) {
        const S* kv = vals_.data() + nodes_[idx_[n.ilist + j]].vofs + off;
        S s = dot(qv + off, kv, dh) * scale;
        scores_[j] = s;
        if (s > mx) mx = s;
      }
      S z = 0;
      S* p = probs + static_cast<size_t>(h) * m;
      for (int j = 0; j < m; ++j) {
        p[j] = std::exp(scores_[j] - mx);
        z += p[j];
      }
      for (int j = 0; j < m; ++j) p[j] /= z;
      for (int j = 0; j < m; ++j) {
        const S* vv = vals_.data() + nodes_[idx_[n.ilist + m + j]].vofs + off;
        S pj = p[j];
        for (int t = 0; t < dh; ++t) y[off + t] += pj * vv[t];
      }
    }
    return id;
  }

  // h (1 x D) @ E^T -> 1 x V, output projection tied to the embedding
  int logits_tied(int emb_p, int h) {
    const auto& E = ps_->t[emb_p];
    if (nodes_[h].c != E.cols) throw ShapeError("logits dims");
    int id = alloc(Op::kLogitsTied, 1, E.rows);
    Node& n = nodes_[id];
    n.a = h;
    n.p0 = emb_p;
    const S* hv = vals_.data() + nodes_[h].vofs;
    S* y = out(id);
    for (int v = 0; v < E.rows; ++v) y[v] = dot(hv, E.row(v), E.cols);
    return id;
  }

  // -log softmax(logits)[target]
  int ce_row(int logits, int target) {
    int v = nodes_[logits].c;
    if (target < 0 || target >= v) throw ShapeError("ce target outside vocab");
    int id = alloc(Op::kCeRow, 1, 1, v);
    Node& n = nodes_[id];
    n.a = logits;
    n.i0 = target;
    const S* z = vals_.data() + nodes_[logits].vofs;
    S* p = aux_.data() + n.aux;
    S lse = softmax_into(z, p, v);
    vals_[n.vofs] = lse - z[target];
    return id;
  }

  int mean_scalars(const std::vector<int>& xs) {
    if (xs.empty()) throw EmptyMask("mean over zero scalars");
    int id = alloc(Op::kMeanScalars, 1, 1);
    Node& n = nodes_[id];
    n.ilist = static_cast<int>(idx_.size());
    n.i0 = static_cast<int>(xs.size());
    idx_.insert(idx_.end(), xs.begin(), xs.end());
    S s = 0;
    for (int x : xs) s += vals_[nodes_[x].vofs];
    vals_[n.vofs] = s / static_cast<S>(xs.size());
    return id;
  }

  // sum_i w_i * x_i + c over scalar nodes
  int affine(const std::vector<int>& xs, const std::vector<S>& w, S c) {
    int id = alloc(Op::kAffine, 1, 1, w.size());
    Node& n = nodes_[id];
    n.ilist = static_cast<int>(idx_.size());
    n.i0 = static_cast<int>(xs.size());
    idx_.insert(idx_.end(), xs.begin(), xs.end());
    std::copy(w.begin(), w.end(), aux_.begin() + n.aux);
    S s = c;
    for (size_t i = 0; i < xs.size(); ++i) s += w[i] * vals_[nodes_[xs[i]].vofs];
    vals_[n.vofs] = s;
    return id;
  }

  // softmax((z[lo..lo+len) + noise) / tau) — differentiable in the logits
  int gumbel_softmax(int logits, int lo, int len, std::span<const S> noise, S tau) {
    if (tau <= S(0)) throw std::invalid_argument("tau must be positive");
    int id = alloc(Op::kGumbelSoftmax, 1, len, len);
    Node& n = nodes_[id];
    n.a = logits;
    n.i0 = lo;
    n.s0 = tau;
    const S* z = vals_.data() + nodes_[logits].vofs + lo;
    scores_.resize(len);
    for (int j = 0; j < len; ++j) scores_[j] = (z[j] + noise[j]) / tau;
    S* y = out(id);
    softmax_into(scores_.data(), y, len);
    std::copy(y, y + len, aux_.begin() + n.aux);
    return id;
  }

  // forward: one-hot at argmax(soft); backward: identity into soft
  int hard_onehot_st(int soft) {
    int len = nodes_[soft].c;
    int id = alloc(Op::kHardOneHotSt, 1, len);
    Node& n = nodes_[id];
    n.a = soft;
    const S* sv = vals_.data() + nodes_[soft].vofs;
    int best = 0;
    for (int j = 1; j < len; ++j)
      if (sv[j] > sv[best]) best = j;
    n.i0 = best;
    S* y = out(id);
    std::fill(y, y + len, S(0));
    y[best] = S(1);
    return id;
  }

  // log softmax over z[lo..lo+len) * inv_temp, evaluated at pick
  int log_softmax_pick(int logits, int lo, int len, int pick, S inv_temp = S(1)) {
    int id = alloc(Op::kLogSoftmaxPick, 1, 1, len);
    Node& n = nodes_[id];
    n.a = logits;
    n.i0 = lo;
    n.i1 = len;
    n.i2 = pick;
    n.s0 = inv_temp;
    const S* z = vals_.data() + nodes_[logits].vofs + lo;
    scores_.resize(len);
    for (int j = 0; j < len; ++j) scores_[j] = z[j] * inv_temp;
    S* p = aux_.data() + n.aux;
    S lse = softmax_into(scores_.data(), p, len);
    vals_[n.vofs] = scores_[pick] - lse;
    return id;
  }

  // exact KL( softmax(z[lo..lo+len) * inv_temp) || ref ) for a fixed reference
  int kl_to_ref(int logits, int lo, int len, std::span<const S> ref_probs,
                S inv_temp = S(1)) {
    int id = alloc(Op::kKlToRef, 1, 1, 2 * static_cast<size_t>(len));
    Node& n = nodes_[id];
    n.a = logits;
    n.i0 = lo;
    n.i1 = len;
    n.s0 = inv_temp;
    const S* z = vals_.data() + nodes_[logits].vofs + lo;
    scores_.resize(len);
    for (int j = 0; j < len; ++j) scores_[j] = z[j] * inv_temp;
    S* p = aux_.data() + n.aux;
    S* lpr = aux_.data() + n.aux + len;
    S lse = softmax_into(scores_.data(), p, len);
    S kl = 0;
    for (int j = 0; j < len; ++j) {
      S lref = std::log(std::max(ref_probs[j], S(1e-30)));
      lpr[j] = lref;
      S lp = scores_[j] - lse;
      kl += p[j] * (lp - lref);
    }
    vals_[n.vofs] = kl;
    return id;
  }

  int exp_of(int x) {
    int id = alloc(Op::kExp, 1, 1);
    nodes_[id].a = x;
    vals_[nodes_[id].vofs] = std::exp(vals_[nodes_[x].vofs]);
    return id;
  }
  int mul_const(int x, S c) {
    int id = alloc(Op::kMulConst, 1, 1);
    nodes_[id].a = x;
    nodes_[id].s0 = c;
    vals_[nodes_[id].vofs] = c * vals_[nodes_[x].vofs];
    return id;
  }
  int add_const(int x, S c) {
    int id = alloc(Op::kAddConst, 1, 1);
    nodes_[id].a = x;
    vals_[nodes_[id].vofs] = c + vals_[nodes_[x].vofs];
    return id;
  }
  // min(a, b); ties take a's gradient
  int min2(int a, int b) {
    int id = alloc(Op::kMin2, 1, 1);
    Node& n = nodes_[id];
    n.a = a;
    n.b = b;
    S av = vals_[nodes_[a].vofs], bv = vals_[nodes_[b].vofs];
    n.i0 = av <= bv ? 0 : 1;
    vals_[n.vofs] = std::min(av, bv);
    return id;
  }
  // clamp to [lo, hi]; zero gradient outside the open interval
  int clip(int x, S lo, S hi) {
    int id = alloc(Op::kClip, 1, 1);
    Node& n = nodes_[id];
    n.a = x;
    S xv = vals_[nodes_[x].vofs];
    n.i0 = (xv > lo && xv < hi) ? 1 : 0;
    vals_[n.vofs] = std::min(std::max(xv, lo), hi);
    return id;
  }
  int mul(int a, int b) {
    int id = alloc(Op::kMulScalar, 1, 1);
    Node& n = nodes_[id];
    n.a = a;
    n.b = b;
    vals_[n.vofs] = vals_[nodes_[a].vofs] * vals_[nodes_[b].vofs];
    return id;
  }

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape once in reverse.
  // Parameter gradients accumulate into sink.
  void backward(int loss, GradSet<S>& sink) {
    if (nodes_[loss].r != 1 || nodes_[loss].c != 1)
      throw ShapeError("backward from non-scalar");
    grads_.assign(vals_.size(), S(0));
    grads_[nodes_[loss].vofs] = S(1);
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i)
      backward_node(i, sink);
  }

 private:
  enum class Op : uint8_t {
    kConst, kView, kEmbed, kEmbedMix, kEmbedMixConst, kLinear, kLayerNorm,
    kGelu, kAdd, kAttention, kLogitsTied, kCeRow, kMeanScalars, kAffine,
    kGumbelSoftmax, kHardOneHotSt, kLogSoftmaxPick, kKlToRef, kExp, kMulConst,
    kAddConst, kMin2, kClip, kMulScalar,
  };

  struct Node {
    Op op = Op::kConst;
    int r = 0, c = 0;
    size_t vofs = 0;
    size_t aux = 0;
    int a = -1, b = -1;
    int p0 = -1, p1 = -1;
    int i0 = 0, i1 = 0, i2 = 0;
    int ilist = -1;
    S s0 = 0, s1 = 0;
  };

  int alloc(Op op, int r, int c, size_t aux_len = 0) {
    Node n;
    n.op = op;
    n.r = r;
    n.c = c;
    n.vofs = vals_.size();
    vals_.resize(vals_.size() + static_cast<size_t>(r) * c);
    n.aux = aux_.size();
    if (aux_len > 0) aux_.resize(aux_.size() + aux_len);
    nodes_.push_back(n);
    return static_cast<int>(nodes_.size()) - 1;
  }

  S* out(int id) { return vals_.data() + nodes_[id].vofs; }

  static S dot(const S* a, const S* b, int n) {
    S s0 = 0, s1 = 0, s2 = 0, s3 = 0;
    int i = 0;
    for (; i + 4 <= n; i += 4) {
      s0 += a[i] * b[i];
      s1 += a[i + 1] * b[i + 1];
      s2 += a[i + 2] * b[i + 2];
      s3 += a[i + 3] * b[i + 3];
    }
    S s = (s0 + s1) + (s2 + s3);
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
  }

  // writes softmax(z) into p, returns logsumexp(z)
  static S softmax_into(const S* z, S* p, int n) {
    S mx = z[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, z[j]);
    S sum = 0;
    for (int j = 0; j < n; ++j) {
      p[j] = std::exp(z[j] - mx);
      sum += p[j];
    }
    for (int j = 0; j < n; ++j) p[j] /= sum;
    return mx + std::log(sum);
  }

  void backward_node(int i, GradSet<S>& sink) {
    const Node& n = nodes_[i];
    const S* g = grads_.data() + n.vofs;
    switch (n.op) {
      case Op::kConst:
      case Op::kView:
        return;
      case Op::kEmbed: {
        S* eg = sink.g[n.p0].data() + static_cast<size_t>(n.i0) * n.c;
        S* pg = sink.g[n.p1].data() + static_cast<size_t>(n.i1) * n.c;
        for (int j = 0; j < n.c; ++j) {
          eg[j] += g[j];
          pg[j] += g[j];
        }
        return;
      }
      case Op::kEmbedMix: {
        const auto& E = ps_->t[n.p0];
        const Node& mixn = nodes_[n.a];
        const S* m = vals_.data() + mixn.vofs;
        S* mg = grads_.data() + mixn.vofs;
        S* pg = sink.g[n.p1].data() + static_cast<size_t>(n.i1) * n.c;
        for (int j = 0; j < n.c; ++j) pg[j] += g[j];
        for (int j = 0; j < mixn.c; ++j) {
          const S* e = E.row(n.i0 + j);
          mg[j] += dot(e, g, n.c);
          if (m[j] != S(0)) {
            S* eg = sink.g[n.p0].data() + static_cast<size_t>(n.i0 + j) * n.c;
            for (int d = 0; d < n.c; ++d) eg[d] += m[j] * g[d];
          }
        }
        return;
      }
      case Op::kEmbedMixConst: {
        const S* m = aux_.data() + n.aux;
        S* pg = sink.g[n.p1].data() + static_cast<size_t>(n.i1) * n.c;
        for (int j = 0; j < n.c; ++j) pg[j] += g[j];
        for (int j = 0; j < n.i2; ++j) {
          if (m[j] == S(0)) continue;
          S* eg = sink.g[n.p0].data() + static_cast<size_t>(n.i0 + j) * n.c;
          for (int d = 0; d < n.c; ++d) eg[d] += m[j] * g[d];
        }
        return;
      }
      case Op::kLinear: {
        const auto& W = ps_->t[n.p0];
        const Node& xn = nodes_[n.a];
        const S* xv = vals_.data() + xn.vofs;
        S* xg = grads_.data() + xn.vofs;
        auto& wg = sink.g[n.p0];
        for (int r = 0; r < W.rows; ++r) {
          const S* wr = W.row(r);
          S* wgr = wg.data() + static_cast<size_t>(r) * W.cols;
          S xr = xv[r];
          xg[r] += dot(wr, g, W.cols);
          for (int c = 0; c < W.cols; ++c) wgr[c] += xr * g[c];
        }
        if (n.p1 >= 0) {
          auto& bg = sink.g[n.p1];
          for (int c = 0; c < W.cols; ++c) bg[c] += g[c];
        }
        return;
      }
      case Op::kLayerNorm: {
        const Node& xn = nodes_[n.a];
        const S* xv = vals_.data() + xn.vofs;
        S* xg = grads_.data() + xn.vofs;
        const S* gam = ps_->t[n.p0].w.data();
        S mean = aux_[n.aux], rstd = aux_[n.aux + 1];
        int c = n.c;
        S sum_gy = 0, sum_gyx = 0;
        for (int j = 0; j < c; ++j) {
          S xh = (xv[j] - mean) * rstd;
          S gy = g[j] * gam[j];
          sum_gy += gy;
          sum_gyx += gy * xh;
        }
        sum_gy /= static_cast<S>(c);
        sum_gyx /= static_cast<S>(c);
        auto& gg = sink.g[n.p0];
        auto& bg = sink.g[n.p1];
        for (int j = 0; j < c; ++j) {
          S xh = (xv[j] - mean) * rstd;
          S gy = g[j] * gam[j];
          xg[j] += rstd * (gy - sum_gy - xh * sum_gyx);
          gg[j] += g[j] * xh;
          bg[j] += g[j];
        }
        return;
      }
      case Op::kGelu: {
        const Node& xn = nodes_[n.a];
        const S* xv = vals_.data() + xn.vofs;
        S* xg = grads_.data() + xn.vofs;
        constexpr S kC = S(0.7978845608028654);
        for (int j = 0; j < n.c; ++j) {
          S t = aux_[n.aux + j];
          S x = xv[j];
          S d = S(0.5) * (S(1) + t) +
                S(0.5) * x * (S(1) - t * t) * kC * (S(1) + S(3) * S(0.044715) * x * x);
          xg[j] += g[j] * d;
        }
        return;
      }
      case Op::kAdd: {
        S* ag = grads_.data() + nodes_[n.a].vofs;
        S* bg = grads_.data() + nodes_[n.b].vofs;
        size_t sz = static_cast<size_t>(n.r) * n.c;
        for (size_t j = 0; j < sz; ++j) {
          ag[j] += g[j];
          bg[j] += g[j];
        }
        return;
      }
      case Op::kAttention: {
        int heads = n.i0, m = n.i1;
        int d = n.c, dh = d / heads;
        const S scale = S(1) / std::sqrt(static_cast<S>(dh));
        const S* qv = vals_.data() + nodes_[n.a].vofs;
        S* qg = grads_.data() + nodes_[n.a].vofs;
        const S* probs = aux_.data() + n.aux;
        scores_.resize(m);
        for (int h = 0; h < heads; ++h) {
          int off = h * dh;
          const S* p = probs + static_cast<size_t>(h) * m;
          S psum = 0;
          for (int j = 0; j < m; ++j) {
            const Node& vn = nodes_[idx_[n.ilist + m + j]];
            const S* vv = vals_.data() + vn.vofs + off;
            S* vg = grads_.data() + vn.vofs + off;
            S dp = dot(g + off, vv, dh);
            scores_[j] = dp;
            psum += p[j] * dp;
            for (int t = 0; t < dh; ++t) vg[t] += p[j] * g[off + t];
          }
          for (int j = 0; j < m; ++j) {
            S ds = p[j] * (scores_[j] - psum) * scale;
            if (ds == S(0)) continue;
            const Node& kn = nodes_[idx_[n.ilist + j]];
            const S* kv = vals_.data() + kn.vofs + off;
            S* kg = grads_.data() + kn.vofs + off;
            for (int t = 0; t < dh; ++t) {
              qg[off + t] += ds * kv[t];
              kg[t] += ds * qv[off + t];
            }
          }
        }
        return;
      }
      case Op::kLogitsTied: {
        const auto& E = ps_->t[n.p0];
        const Node& hn = nodes_[n.a];
        const S* hv = vals_.data() + hn.vofs;
        S* hg = grads_.data() + hn.vofs;
        auto& eg = sink.g[n.p0];
        for (int v = 0; v < E.rows; ++v) {
          S gv = g[v];
          if (gv == S(0)) continue;
          const S* er = E.row(v);
          S* egr = eg.data() + static_cast<size_t>(v) * E.cols;
          for (int j = 0; j < E.cols; ++j) {
            hg[j] += gv * er[j];
            egr[j] += gv * hv[j];
          }
        }
        return;
      }
      case Op::kCeRow: {
        const Node& zn = nodes_[n.a];
        S* zg = grads_.data() + zn.vofs;
        const S* p = aux_.data() + n.aux;
        S gs = g[0];
        for (int j = 0; j < zn.c; ++j) zg[j] += gs * p[j];
        zg[n.i0] -= gs;
        return;
      }
      case Op::kMeanScalars: {
        S gs = g[0] / static_cast<S>(n.i0);
        for (int j = 0; j < n.i0; ++j)
          grads_[nodes_[idx_[n.ilist + j]].vofs] += gs;
        return;
      }
      case Op::kAffine: {
        const S* w = aux_.data() + n.aux;
        for (int j = 0; j < n.i0; ++j)
          grads_[nodes_[idx_[n.ilist + j]].vofs] += g[0] * w[j];
        return;
      }
      case Op::kGumbelSoftmax: {
        const Node& zn = nodes_[n.a];
        S* zg = grads_.data() + zn.vofs + n.i0;
        const S* p = aux_.data() + n.aux;
        S dotpg = 0;
        for (int j = 0; j < n.c; ++j) dotpg += p[j] * g[j];
        for (int j = 0; j < n.c; ++j)
          zg[j] += p[j] * (g[j] - dotpg) / n.s0;
        return;
      }
      case Op::kHardOneHotSt: {
        S* sg = grads_.data() + nodes_[n.a].vofs;
        for (int j = 0; j < n.c; ++j) sg[j] += g[j];
        return;
      }
      case Op::kLogSoftmaxPick: {
        const Node& zn = nodes_[n.a];
        S* zg = grads_.data() + zn.vofs + n.i0;
        const S* p = aux_.data() + n.aux;
        S gs = g[0] * n.s0;
        for (int j = 0; j < n.i1; ++j) zg[j] -= gs * p[j];
        zg[n.i2] += gs;
        return;
      }
      case Op::kKlToRef: {
        const Node& zn = nodes_[n.a];
        S* zg = grads_.data() + zn.vofs + n.i0;
        const S* p = aux_.data() + n.aux;
        const S* lref = aux_.data() + n.aux + n.i1;
        S kl = vals_[n.vofs];
        S gs = g[0] * n.s0;
        // d kl / d score_j = p_j * (log p_j - log ref_j - kl)
        for (int j = 0; j < n.i1; ++j) {
          S lp = std::log(std::max(p[j], std::numeric_limits<S>::min()));
          zg[j] += gs * p[j] * (lp - lref[j] - kl);
        }
        return;
      }
      case Op::kExp:
        grads_[nodes_[n.a].vofs] += g[0] * vals_[n.vofs];
        return;
      case Op::kMulConst:
        grads_[nodes_[n.a].vofs] += g[0] * n.s0;
        return;
      case Op::kAddConst:
        grads_[nodes_[n.a].vofs] += g[0];
        return;
      case Op::kMin2:
        grads_[nodes_[n.i0 == 0 ? n.a : n.b].vofs] += g[0];
        return;
      case Op::kClip:
        if (n.i0) grads_[nodes_[n.a].vofs] += g[0];
        return;
      case Op::kMulScalar:
        grads_[nodes_[n.a].vofs] += g[0] * vals_[nodes_[n.b].vofs];
        grads_[nodes_[n.b].vofs] += g[0] * vals_[nodes_[n.a].vofs];
        return;
    }
  }

  const ParamSet<S>* ps_;
  std::vector<Node> nodes_;
  std::vector<S> vals_;
  std::vector<S> grads_;
  std::vector<S> aux_;
  std::vector<int> idx_;
  std::vector<S> scores_;  // scratch
};

}  // namespace gridloop
