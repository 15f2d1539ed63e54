#pragma once

#include "gridloop/pretrain.hpp"

namespace gridloop {

struct AnnealSchedule {
  double tau0 = 1.0;
  double alpha = 0.9995;
  double tau_min = 0.1;

  void validate() const {
    if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("alpha in (0,1)");
    if (!(tau_min > 0.0 && tau_min <= tau0))
      throw std::invalid_argument("0 < tau_min <= tau0");
  }
};

// tau(k) = max(tau_min, tau0 * alpha^k)
inline double anneal(long k, const AnnealSchedule& s) {
  if (k < 0) throw std::invalid_argument("step index must be >= 0");
  return std::max(s.tau_min, s.tau0 * std::pow(s.alpha, static_cast<double>(k)));
}

struct DjoConfig {
  int steps = 6000;
  int batch = 32;
  double lr = 5e-5;
  double lambda = 1.0;
  AnnealSchedule schedule;
  bool aux_i2l = false;     // optional standalone I2L term, off by default
  int bptt_truncate = 0;    // 0 = backprop through every decode step
  int eval_interval = 250;
  int eval_layouts = 128;
  uint64_t holdout_seed = 0xb00c;

  void validate() const {
    if (!(lambda > 0.0)) throw std::invalid_argument("lambda must be > 0");
    schedule.validate();
  }
};

// Sampled relaxed one-hot with the straight-through contract: `hard` is the
// exact one-hot of argmax(soft), and consumers that backpropagate through the
// sample see the soft path's Jacobian.
struct GumbelStSample {
  std::vector<double> soft;
  std::vector<double> hard;
  int hard_index = 0;
};

inline GumbelStSample gumbel_st_sample(std::span<const double> logits, double tau,
                                       Rng& rng) {
  if (tau <= 0.0) throw std::invalid_argument("tau must be positive");
  GumbelStSample out;
  size_t n = logits.size();
  out.soft.resize(n);
  double mx = -std::numeric_limits<double>::infinity();
  for (size_t j = 0; j < n; ++j) {
    out.soft[j] = (logits[j] + rng.gumbel()) / tau;
    mx = std::max(mx, out.soft[j]);
  }
  double sum = 0;
  for (auto& x : out.soft) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (auto& x : out.soft) x /= sum;
  out.hard_index = 0;
  for (size_t j = 1; j < n; ++j)
    if (out.soft[j] > out.soft[out.hard_index]) out.hard_index = static_cast<int>(j);
  out.hard.assign(n, 0.0);
  out.hard[out.hard_index] = 1.0;
  return out;
}

template <class S>
struct LoopLossOut {
  int node = -1;
  double value = 0;
  std::vector<int> sampled_tokens;  // absolute image-token ids
};

// Training consumes the hard straight-through sample; the hard forward is
// piecewise constant in theta, so finite-difference checks run the soft
// relaxation instead (same graph, same backward rules, smooth forward).
enum class LoopMode { kStraightThrough, kSoftRelaxed };

// L-I-L loop loss: autoregressively decodes H*W image positions with
// Gumbel-Softmax straight-through sampling at temperature tau, feeds the
// samples back as inputs and into a [IMG, G2] grounding pass, and scores the
// reconstruction of the layout tokens. Differentiable in the parameters
// through both passes; deterministic given the rng state. target_layout, when
// given, scores the reconstruction of a different layout than the one that
// conditioned generation (alignment diagnostics).
template <class S>
LoopLossOut<S> loop_loss(Tape<S>& tape, const Model<S>& m, const Vocab& v,
                         const Layout& layout, double tau, Rng& noise_rng,
                         int bptt_truncate = 0,
                         LoopMode mode = LoopMode::kStraightThrough,
                         const Layout* target_layout = nullptr) {
  auto g1 = encode_layout(layout, v);
  int hw = v.img_len();
  // noise drawn up front so consumption order never depends on graph shape
  std::vector<std::vector<S>> noise(hw, std::vector<S>(v.v_img));
  for (auto& row : noise)
    for (auto& x : row) x = static_cast<S>(noise_rng.gumbel());

  SeqRun<S> gen(tape, m);
  for (size_t i = 0; i < g1.size(); ++i) gen.append_token(g1[i], static_cast<int>(i));

  LoopLossOut<S> out;
  std::vector<int> hard_nodes(hw);
  for (int t = 0; t < hw; ++t) {
    int soft = tape.gumbel_softmax(gen.last_logits(), v.img_lo, v.v_img, noise[t],
                                   static_cast<S>(tau));
    int hard = mode == LoopMode::kStraightThrough ? tape.hard_onehot_st(soft) : soft;
    hard_nodes[t] = hard;
    auto sv = tape.val(soft);
    int pick = 0;
    for (int j = 1; j < v.v_img; ++j)
      if (sv[j] > sv[pick]) pick = j;
    out.sampled_tokens.push_back(v.img_lo + pick);
    if (t + 1 < hw) {
      bool detach = bptt_truncate > 0 && ((t + 1) % bptt_truncate == 0);
      if (detach) {
        std::vector<S> frozen(tape.val(hard).begin(), tape.val(hard).end());
        gen.append_mix_const(frozen, v.img_lo, v.img_pos_base() + t, false);
      } else {
        gen.append_mix(hard, v.img_lo, v.img_pos_base() + t);
      }
    }
  }

  // grounding pass over the sampled image: [IMG_soft, G2]
  std::vector<int> g2 = target_layout ? encode_layout(*target_layout, v) : g1;
  SeqRun<S> gnd(tape, m);
  for (int t = 0; t < hw; ++t)
    gnd.append_mix(hard_nodes[t], v.img_lo, v.img_pos_base() + t);
  std::vector<int> terms;
  gnd.append_token(g2[0], v.g2_pos_base());  // BOS prompt
  for (size_t i = 1; i < g2.size(); ++i) {
    terms.push_back(tape.ce_row(gnd.last_logits(), g2[i]));
    if (i + 1 < g2.size())
      gnd.append_token(g2[i], v.g2_pos_base() + static_cast<int>(i));
  }
  out.node = tape.mean_scalars(terms);
  out.value = tape.scalar(out.node);
  return out;
}

template <class S>
struct DjoLossOut {
  int node = -1;
  double j = 0, l2i = 0, loop = 0;
};

// J_joint = l2i_weight * L_L2I + lambda * L_loop (+ optional auxiliary I2L).
// l2i_weight exists so ablations can drop the supervised term; configs
// validate lambda > 0.
template <class S>
DjoLossOut<S> djo_loss_example(Tape<S>& tape, const Model<S>& m, const Vocab& v,
                               const Layout& layout, const GridImage& true_image,
                               double tau, Rng& noise_rng, double lambda,
                               double l2i_weight = 1.0, bool aux_i2l = false,
                               int bptt_truncate = 0,
                               LoopMode mode = LoopMode::kStraightThrough) {
  auto g1 = encode_layout(layout, v);
  auto img = encode_image(true_image, v);

  // teacher-forced L2I on the real image
  SeqRun<S> l2i(tape, m);
  for (size_t i = 0; i < g1.size(); ++i) l2i.append_token(g1[i], static_cast<int>(i));
  std::vector<int> l2i_terms;
  for (size_t t = 0; t < img.size(); ++t) {
    l2i_terms.push_back(tape.ce_row(l2i.last_logits(), img[t]));
    if (t + 1 < img.size())
      l2i.append_token(img[t], v.img_pos_base() + static_cast<int>(t));
  }
  int l2i_node = tape.mean_scalars(l2i_terms);

  auto loop = loop_loss(tape, m, v, layout, tau, noise_rng, bptt_truncate, mode);

  std::vector<int> parts = {l2i_node, loop.node};
  std::vector<S> weights = {static_cast<S>(l2i_weight), static_cast<S>(lambda)};
  if (aux_i2l) {
    SeqRun<S> i2l(tape, m);
    for (size_t t = 0; t < img.size(); ++t)
      i2l.append_token(img[t], v.img_pos_base() + static_cast<int>(t));
    std::vector<int> terms;
    i2l.append_token(g1[0], v.g2_pos_base());
    for (size_t i = 1; i < g1.size(); ++i) {
      terms.push_back(tape.ce_row(i2l.last_logits(), g1[i]));
      if (i + 1 < g1.size())
        i2l.append_token(g1[i], v.g2_pos_base() + static_cast<int>(i));
    }
    parts.push_back(tape.mean_scalars(terms));
    weights.push_back(S(1));
  }
  DjoLossOut<S> out;
  out.node = tape.affine(parts, weights, S(0));
  out.l2i = tape.scalar(l2i_node);
  out.loop = loop.value;
  out.j = tape.scalar(out.node);
  return out;
}

struct Stage2Stats {
  double j = 0, l2i = 0, loop = 0, tau = 0;
};

template <class S>
Stage2Stats djo_step(const RunContext& ctx, Model<S>& m, AdamW<S>& opt,
                     const std::vector<std::pair<Layout, GridImage>>& batch,
                     long k, const DjoConfig& cfg, Rng& noise_master,
                     std::vector<GradSet<S>>& grad_pool, GradSet<S>& total,
                     double l2i_weight = 1.0) {
  int b = static_cast<int>(batch.size());
  if (static_cast<int>(grad_pool.size()) < b) {
    grad_pool.resize(b);
    for (auto& g : grad_pool) g.init(m.params);
  }
  double tau = anneal(k, cfg.schedule);
  std::vector<uint64_t> seeds(b);
  for (auto& s : seeds) s = noise_master.u64();
  std::vector<DjoLossOut<S>> outs(b);
  parallel_for(b, ctx.threads, [&](int i) {
    grad_pool[i].zero();
    Rng noise(seeds[i]);
    Tape<S> tape(m.params);
    outs[i] = djo_loss_example(tape, m, ctx.vocab, batch[i].first, batch[i].second,
                               tau, noise, cfg.lambda, l2i_weight, cfg.aux_i2l,
                               cfg.bptt_truncate);
    tape.backward(outs[i].node, grad_pool[i]);
  });
  Stage2Stats st;
  st.tau = tau;
  total.zero();
  for (int i = 0; i < b; ++i) {
    total.add_scaled(grad_pool[i], S(1) / static_cast<S>(b));
    st.j += outs[i].j / b;
    st.l2i += outs[i].l2i / b;
    st.loop += outs[i].loop / b;
  }
  if (!std::isfinite(st.j)) throw DivergenceError("stage 2 objective is not finite");
  opt.step(m.params, total);
  return st;
}

template <class S>
void run_stage2(const RunContext& ctx, Model<S>& m, AdamW<S>& opt,
                const DjoConfig& cfg, Rng& data_rng, long start_step = 0,
                MetricsWriter* metrics = nullptr, const StageCallbacks& hooks = {},
                double l2i_weight = 1.0) {
  cfg.validate();
  opt.lr = cfg.lr;
  std::vector<GradSet<S>> pool;
  GradSet<S> total;
  total.init(m.params);
  std::vector<Layout> holdout;
  for (long step = start_step + 1; step <= cfg.steps; ++step) {
    std::vector<std::pair<Layout, GridImage>> batch;
    batch.reserve(cfg.batch);
    for (int i = 0; i < cfg.batch; ++i) batch.push_back(draw_example(data_rng, ctx.world));
    auto st = djo_step(ctx, m, opt, batch, step - 1, cfg, data_rng, pool, total,
                       l2i_weight);
    if (metrics != nullptr) {
      ordered_json row;
      row["step"] = step;
      row["J"] = st.j;
      row["L_L2I"] = st.l2i;
      row["L_loop"] = st.loop;
      row["tau"] = st.tau;
      bool eval_now = cfg.eval_interval > 0 && step % cfg.eval_interval == 0;
      if (eval_now) {
        if (holdout.empty())
          holdout = make_holdout(ctx.world, cfg.holdout_seed, cfg.eval_layouts);
        double ciou = 0;
        std::vector<double> per(holdout.size());
        parallel_for(static_cast<int>(holdout.size()), ctx.threads, [&](int i) {
          per[i] = cycle_stats(m, ctx.vocab, ctx.world, holdout[i]).mean_iou;
        });
        for (double x : per) ciou += x;
        row["cycle_iou_holdout"] = ciou / holdout.size();
      }
      metrics->write(row);
    }
    if (hooks.after_step) hooks.after_step(step);
  }
}

}  // namespace gridloop
