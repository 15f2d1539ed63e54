#pragma once

#include <algorithm>
#include <span>
#include <vector>

#include "gridloop/tape.hpp"

namespace gridloop {

struct ModelConfig {
  int vocab = 0;
  int dim = 64;
  int layers = 2;
  int heads = 4;
  int t_max = 0;
  int mlp_mult = 4;
  double init_std = 0.02;
};

// Decoder-only pre-norm transformer; output projection weight-tied to the
// token embedding; learned absolute position embeddings.
template <class S>
struct Model {
  ModelConfig cfg;
  ParamSet<S> params;

  int tok_emb = -1, pos_emb = -1, lnf_g = -1, lnf_b = -1;
  struct Block {
    int ln1_g, ln1_b, qkv_w, qkv_b, out_w, out_b;
    int ln2_g, ln2_b, fc_w, fc_b, proj_w, proj_b;
  };
  std::vector<Block> blocks;

  static Model init(const ModelConfig& cfg, uint64_t seed) {
    if (cfg.dim % cfg.heads != 0) throw ShapeError("dim not divisible by heads");
    if (cfg.vocab <= 0 || cfg.t_max <= 0) throw ShapeError("bad model config");
    Model m;
    m.cfg = cfg;
    auto& ps = m.params;
    int d = cfg.dim, f = cfg.mlp_mult * cfg.dim;
    m.tok_emb = ps.add("tok_emb", cfg.vocab, d, true);
    m.pos_emb = ps.add("pos_emb", cfg.t_max, d, true);
    for (int l = 0; l < cfg.layers; ++l) {
      std::string p = "l" + std::to_string(l) + ".";
      Block b;
      b.ln1_g = ps.add(p + "ln1.g", 1, d, false);
      b.ln1_b = ps.add(p + "ln1.b", 1, d, false);
      b.qkv_w = ps.add(p + "qkv.w", d, 3 * d, true);
      b.qkv_b = ps.add(p + "qkv.b", 1, 3 * d, false);
      b.out_w = ps.add(p + "out.w", d, d, true);
      b.out_b = ps.add(p + "out.b", 1, d, false);
      b.ln2_g = ps.add(p + "ln2.g", 1, d, false);
      b.ln2_b = ps.add(p + "ln2.b", 1, d, false);
      b.fc_w = ps.add(p + "fc.w", d, f, true);
      b.fc_b = ps.add(p + "fc.b", 1, f, false);
      b.proj_w = ps.add(p + "proj.w", f, d, true);
      b.proj_b = ps.add(p + "proj.b", 1, d, false);
      m.blocks.push_back(b);
    }
    m.lnf_g = ps.add("lnf.g", 1, d, false);
    m.lnf_b = ps.add("lnf.b", 1, d, false);

    Rng rng(Rng::derive(seed, 0x10d31));
    for (auto& t : ps.t) {
      bool is_ln_or_bias = t.name.ends_with(".g") || t.name.ends_with(".b");
      if (t.name.ends_with("ln1.g") || t.name.ends_with("ln2.g") ||
          t.name.ends_with("lnf.g")) {
        std::fill(t.w.begin(), t.w.end(), S(1));
      } else if (is_ln_or_bias) {
        std::fill(t.w.begin(), t.w.end(), S(0));
      } else {
        for (auto& x : t.w) x = static_cast<S>(rng.normal(0.0, cfg.init_std));
      }
    }
    return m;
  }

  size_t param_count() const { return params.scalar_count(); }
};

template <class S>
double param_l2_distance(const Model<S>& a, const Model<S>& b) {
  double d2 = 0, n2 = 0;
  for (size_t i = 0; i < a.params.t.size(); ++i)
    for (size_t j = 0; j < a.params.t[i].w.size(); ++j) {
      double d = static_cast<double>(a.params.t[i].w[j]) - b.params.t[i].w[j];
      d2 += d * d;
      n2 += static_cast<double>(b.params.t[i].w[j]) * b.params.t[i].w[j];
    }
  return std::sqrt(d2) / std::max(1e-12, std::sqrt(n2));
}

// One causal stream: positions appended in order, each attending to every
// earlier position in this stream plus itself. Holds per-layer key/value
// node lists, so it doubles as the in-call decode cache.
template <class S>
class SeqRun {
 public:
  SeqRun(Tape<S>& tape, const Model<S>& m)
      : tape_(&tape), m_(&m), kcache_(m.cfg.layers), vcache_(m.cfg.layers) {}

  int append_token(int token, int pos) {
    int x = tape_->embed(m_->tok_emb, token, m_->pos_emb, pos);
    return finish(x);
  }
  int append_mix(int mix_node, int row_off, int pos) {
    int x = tape_->embed_mix(m_->tok_emb, mix_node, row_off, m_->pos_emb, pos);
    return finish(x);
  }
  int append_mix_const(std::span<const S> mix, int row_off, int pos,
                       bool check_norm = true) {
    int x = tape_->embed_mix_const(m_->tok_emb, mix, row_off, m_->pos_emb, pos,
                                   check_norm);
    return finish(x);
  }

  int length() const { return n_; }
  int logits_node(int i) const { return logits_[i]; }
  int last_logits() const { return logits_.back(); }

  // snapshot sharing the same tape and cached keys/values; used to ground
  // several queries against one image prefix
  SeqRun fork() const { return *this; }

 private:
  int finish(int x) {
    Tape<S>& t = *tape_;
    int d = m_->cfg.dim;
    for (int l = 0; l < m_->cfg.layers; ++l) {
      const auto& b = m_->blocks[l];
      int h = t.layer_norm(b.ln1_g, b.ln1_b, x);
      int qkv = t.linear(b.qkv_w, b.qkv_b, h);
      int q = t.view(qkv, 0, d);
      kcache_[l].push_back(t.view(qkv, d, d));
      vcache_[l].push_back(t.view(qkv, 2 * d, d));
      int a = t.attention(q, kcache_[l], vcache_[l], m_->cfg.heads);
      x = t.add(x, t.linear(b.out_w, b.out_b, a));
      int h2 = t.layer_norm(b.ln2_g, b.ln2_b, x);
      int mlp = t.linear(b.proj_w, b.proj_b, t.gelu(t.linear(b.fc_w, b.fc_b, h2)));
      x = t.add(x, mlp);
    }
    int hf = t.layer_norm(m_->lnf_g, m_->lnf_b, x);
    int lg = t.logits_tied(m_->tok_emb, hf);
    logits_.push_back(lg);
    ++n_;
    return lg;
  }

  Tape<S>* tape_;
  const Model<S>* m_;
  std::vector<std::vector<int>> kcache_, vcache_;
  std::vector<int> logits_;
  int n_ = 0;
};

// ---------------------------------------------------------------------------
// Masked forward with exact dependence semantics: the logits of row t are a
// function of precisely the tokens t may attend to. Rows are grouped into
// causal streams whose member set matches each row's visible set; a row whose
// base set matches no open stream gets a fresh stream with its context
// re-encoded causally. For the [G1, IMG, G2] task mask this yields two
// streams: [G1, IMG] and [IMG, G2].

template <class S>
struct ForwardOut {
  std::vector<int> logits;  // one logits node per row
};

template <class S, class AppendFn>
ForwardOut<S> forward_streams(Tape<S>& tape, const Model<S>& m, int t_total,
                              const std::vector<uint8_t>& attn,
                              AppendFn&& append) {
  if (attn.size() != static_cast<size_t>(t_total) * t_total)
    throw ShapeError("attention mask is not T x T");
  struct Stream {
    std::vector<int> members;
    SeqRun<S> run;
  };
  std::vector<Stream> streams;
  ForwardOut<S> out;
  out.logits.resize(t_total, -1);
  std::vector<int> visible;
  for (int t = 0; t < t_total; ++t) {
    visible.clear();
    for (int q = 0; q < t_total; ++q) {
      if (!attn[static_cast<size_t>(t) * t_total + q]) continue;
      if (q > t) throw ShapeError("mask allows attention to a future position");
      if (q != t) visible.push_back(q);
    }
    if (!attn[static_cast<size_t>(t) * t_total + t])
      throw ShapeError("mask diagonal must be true");
    Stream* st = nullptr;
    for (auto& s : streams)
      if (s.members == visible) { st = &s; break; }
    if (st == nullptr) {
      streams.push_back(Stream{{}, SeqRun<S>(tape, m)});
      st = &streams.back();
      for (int q : visible) {
        append(st->run, q);
        st->members.push_back(q);
      }
    }
    out.logits[t] = append(st->run, t);
    st->members.push_back(t);
  }
  return out;
}

template <class S>
ForwardOut<S> forward_masked(Tape<S>& tape, const Model<S>& m,
                             std::span<const int> tokens,
                             const std::vector<uint8_t>& attn,
                             std::span<const int> positions = {}) {
  int t_total = static_cast<int>(tokens.size());
  auto pos_of = [&](int t) { return positions.empty() ? t : positions[t]; };
  return forward_streams(tape, m, t_total, attn, [&](SeqRun<S>& run, int t) {
    return run.append_token(tokens[t], pos_of(t));
  });
}

// forward over per-position probability mixtures (rows of size vocab)
template <class S>
ForwardOut<S> forward_soft(Tape<S>& tape, const Model<S>& m,
                           const std::vector<std::vector<S>>& mixtures,
                           const std::vector<uint8_t>& attn,
                           std::span<const int> positions = {}) {
  int t_total = static_cast<int>(mixtures.size());
  auto pos_of = [&](int t) { return positions.empty() ? t : positions[t]; };
  return forward_streams(tape, m, t_total, attn, [&](SeqRun<S>& run, int t) {
    if (static_cast<int>(mixtures[t].size()) != m.cfg.vocab)
      throw ShapeError("mixture width != vocab");
    return run.append_mix_const(mixtures[t], 0, pos_of(t));
  });
}

// plain T x V value matrix, for probing
template <class S>
std::vector<S> logits_matrix(const Tape<S>& tape, const ForwardOut<S>& f, int vocab) {
  std::vector<S> out(f.logits.size() * static_cast<size_t>(vocab));
  for (size_t t = 0; t < f.logits.size(); ++t) {
    auto row = tape.val(f.logits[t]);
    std::copy(row.begin(), row.end(), out.begin() + t * vocab);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Next-token cross entropy: target positions are scored by the logits of the
// preceding position. Returns the scalar node (mean over targets).

template <class S>
int ce_loss(Tape<S>& tape, const std::vector<int>& logits_nodes,
            std::span<const int> tokens, std::span<const uint8_t> target_mask) {
  std::vector<int> terms;
  for (size_t p = 0; p < tokens.size(); ++p) {
    if (!target_mask[p]) continue;
    if (p == 0) throw ShapeError("position 0 cannot be a next-token target");
    terms.push_back(tape.ce_row(logits_nodes[p - 1], tokens[p]));
  }
  if (terms.empty()) throw EmptyMask("loss mask selects no position");
  return tape.mean_scalars(terms);
}

// ---------------------------------------------------------------------------
// Sampling

struct StepSample {
  int index = 0;       // offset within the restricted range
  double logprob = 0;  // log prob under softmax(z / temperature) on that range
};

template <class S>
StepSample pick_greedy(const Tape<S>& tape, int logits_node, int lo, int len) {
  auto z = tape.val(logits_node);
  int best = 0;
  for (int j = 1; j < len; ++j)
    if (z[lo + j] > z[lo + best]) best = j;
  double mx = z[lo + best];
  double sum = 0;
  for (int j = 0; j < len; ++j) sum += std::exp(static_cast<double>(z[lo + j]) - mx);
  return {best, -std::log(sum)};
}

template <class S>
StepSample pick_categorical(const Tape<S>& tape, int logits_node, int lo, int len,
                            double temperature, Rng& rng) {
  if (temperature < 1e-6) {
    StepSample s = pick_greedy(tape, logits_node, lo, len);
    return s;
  }
  auto z = tape.val(logits_node);
  double mx = -std::numeric_limits<double>::infinity();
  for (int j = 0; j < len; ++j)
    mx = std::max(mx, static_cast<double>(z[lo + j]) / temperature);
  std::vector<double> p(len);
  double sum = 0;
  for (int j = 0; j < len; ++j) {
    p[j] = std::exp(static_cast<double>(z[lo + j]) / temperature - mx);
    sum += p[j];
  }
  double u = rng.uniform() * sum;
  double acc = 0;
  int pick = len - 1;
  for (int j = 0; j < len; ++j) {
    acc += p[j];
    if (u < acc) { pick = j; break; }
  }
  return {pick, std::log(p[pick] / sum)};
}

// ---------------------------------------------------------------------------
// Central-difference gradient check over every parameter coordinate.

struct GradcheckReport {
  double max_rel_err = 0;
  double worst_analytic = 0, worst_numeric = 0;
  std::string worst_param;
  size_t checked = 0;
};

template <class S, class F>
GradcheckReport gradcheck(ParamSet<S>& ps, const GradSet<S>& analytic, F&& value_fn,
                          double h_base = 1e-4, double denom_floor = 1e-2) {
  GradcheckReport rep;
  for (size_t k = 0; k < ps.t.size(); ++k) {
    for (size_t j = 0; j < ps.t[k].w.size(); ++j) {
      S saved = ps.t[k].w[j];
      double h = h_base * std::max(1.0, std::abs(static_cast<double>(saved)));
      ps.t[k].w[j] = saved + static_cast<S>(h);
      double up = value_fn();
      ps.t[k].w[j] = saved - static_cast<S>(h);
      double dn = value_fn();
      ps.t[k].w[j] = saved;
      double fd = (up - dn) / (2 * h);
      double an = analytic.g[k][j];
      // the denominator floor keeps finite-difference truncation noise on
      // near-zero-gradient coordinates from reading as relative error
      double rel =
          std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), denom_floor});
      ++rep.checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_analytic = an;
        rep.worst_numeric = fd;
        rep.worst_param = ps.t[k].name + "[" + std::to_string(j) + "]";
      }
    }
  }
  return rep;
}

}  // namespace gridloop
