#pragma once

#include <chrono>

#include "gridloop/eval.hpp"
#include "gridloop/optim.hpp"

namespace gridloop {

struct RunContext {
  WorldConfig world;
  Vocab vocab;
  int threads = 1;

  static RunContext make(const WorldConfig& w, int threads = 1) {
    return RunContext{w, Vocab::build(w), threads};
  }
};

struct Stage1Config {
  int steps = 20000;
  int batch = 32;
  double lr = 5e-5;
  int eval_interval = 500;
  int eval_layouts = 128;
  uint64_t holdout_seed = 0xb00c;
};

template <class S>
struct Stage1LossOut {
  int node = -1;
  double total = 0, l_img = 0, l_gnd = 0;
};

// Eq-style summed next-token objective: CE over image targets plus CE over
// grounding targets, equal weights, both components reported.
template <class S>
Stage1LossOut<S> stage1_loss(Tape<S>& tape, const Model<S>& m,
                             const PackedSequence& p) {
  auto out = forward_masked(tape, m, p.tokens, p.attn, p.positions);
  std::vector<uint8_t> img_mask(p.tokens.size(), 0), gnd_mask(p.tokens.size(), 0);
  for (size_t t = 0; t < p.tokens.size(); ++t) {
    if (!p.target_mask[t]) continue;
    (p.segment[t] == Segment::kImg ? img_mask : gnd_mask)[t] = 1;
  }
  int l_img = ce_loss(tape, out.logits, p.tokens, img_mask);
  int l_gnd = ce_loss(tape, out.logits, p.tokens, gnd_mask);
  Stage1LossOut<S> r;
  r.node = tape.affine({l_img, l_gnd}, {S(1), S(1)}, S(0));
  r.l_img = tape.scalar(l_img);
  r.l_gnd = tape.scalar(l_gnd);
  r.total = tape.scalar(r.node);
  return r;
}

template <class S>
struct BatchStats {
  double loss = 0, l_img = 0, l_gnd = 0;
};

// One optimizer step over a batch of packed sequences. Per-example gradients
// are computed independently (possibly in parallel) and reduced in example
// order, so results do not depend on the thread count.
template <class S>
BatchStats<S> stage1_step(const RunContext& ctx, Model<S>& m, AdamW<S>& opt,
                          const std::vector<PackedSequence>& batch,
                          std::vector<GradSet<S>>& grad_pool, GradSet<S>& total) {
  int b = static_cast<int>(batch.size());
  if (static_cast<int>(grad_pool.size()) < b) {
    grad_pool.resize(b);
    for (auto& g : grad_pool) g.init(m.params);
  }
  std::vector<Stage1LossOut<S>> outs(b);
  parallel_for(b, ctx.threads, [&](int i) {
    grad_pool[i].zero();
    Tape<S> tape(m.params);
    auto lo = stage1_loss(tape, m, batch[i]);
    tape.backward(lo.node, grad_pool[i]);
    outs[i] = lo;
  });
  BatchStats<S> st;
  total.zero();
  for (int i = 0; i < b; ++i) {
    total.add_scaled(grad_pool[i], S(1) / static_cast<S>(b));
    st.loss += outs[i].total / b;
    st.l_img += outs[i].l_img / b;
    st.l_gnd += outs[i].l_gnd / b;
  }
  if (!std::isfinite(st.loss)) throw DivergenceError("stage 1 loss is not finite");
  opt.step(m.params, total);
  return st;
}

inline std::pair<Layout, GridImage> draw_example(Rng& rng, const WorldConfig& w) {
  Layout l = sample_layout(rng, w);
  return {l, render(l, w)};
}

struct StageCallbacks {
  // called after every optimizer step with the 1-based global step index
  std::function<void(long)> after_step;
};

template <class S>
void run_stage1(const RunContext& ctx, Model<S>& m, AdamW<S>& opt,
                const Stage1Config& cfg, Rng& data_rng, long start_step = 0,
                MetricsWriter* metrics = nullptr,
                const StageCallbacks& hooks = {}) {
  opt.lr = cfg.lr;
  std::vector<GradSet<S>> pool;
  GradSet<S> total;
  total.init(m.params);
  std::vector<Layout> holdout;
  auto t0 = std::chrono::steady_clock::now();
  long window_examples = 0;
  for (long step = start_step + 1; step <= cfg.steps; ++step) {
    std::vector<PackedSequence> batch;
    batch.reserve(cfg.batch);
    for (int i = 0; i < cfg.batch; ++i) {
      auto [lay, img] = draw_example(data_rng, ctx.world);
      batch.push_back(pack_pretrain(lay, img, ctx.vocab));
    }
    auto st = stage1_step(ctx, m, opt, batch, pool, total);
    window_examples += cfg.batch;

    bool eval_now = cfg.eval_interval > 0 && step % cfg.eval_interval == 0;
    if (metrics != nullptr) {
      auto now = std::chrono::steady_clock::now();
      double secs = std::chrono::duration<double>(now - t0).count();
      ordered_json row;
      row["step"] = step;
      row["L_img"] = st.l_img;
      row["L_gnd"] = st.l_gnd;
      row["examples_per_sec"] = secs > 0 ? window_examples / secs : 0.0;
      if (eval_now) {
        if (holdout.empty())
          holdout = make_holdout(ctx.world, cfg.holdout_seed, cfg.eval_layouts);
        auto ga = grounding_accuracy(m, ctx.vocab, ctx.world, holdout, ctx.threads);
        row["acc50_holdout"] = ga.at(0.50);
      }
      metrics->write(row);
      if (eval_now) {
        t0 = std::chrono::steady_clock::now();
        window_examples = 0;
      }
    }
    if (hooks.after_step) hooks.after_step(step);
  }
}

}  // namespace gridloop
