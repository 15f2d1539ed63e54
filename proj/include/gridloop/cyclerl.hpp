#pragma once

#include "gridloop/djo.hpp"

namespace gridloop {

enum class RewardKind { kOneMinusIou, kL1Normalized };

struct RewardSpec {
  RewardKind kind = RewardKind::kOneMinusIou;
};

struct GrpoConfig {
  int steps = 2000;
  int batch = 4;           // layout groups per update
  int group = 8;           // rollouts per layout (G)
  double lr = 5e-5;
  double clip_eps = 0.2;
  double kl_beta = 0.02;
  double temperature = 1.0;
  int inner_epochs = 1;    // surrogate updates per rollout batch
  // no decay during RL: a zero-advantage group must leave parameters
  // untouched, and decay would fight the KL anchor
  double weight_decay = 0.0;
  RewardSpec reward;
  int eval_interval = 100;
  int eval_layouts = 64;
  uint64_t holdout_seed = 0xb00c;

  void validate() const {
    if (group < 2) throw std::invalid_argument("group size must be >= 2");
    if (!(clip_eps > 0.0 && clip_eps < 1.0))
      throw std::invalid_argument("clip_eps in (0,1)");
    if (kl_beta < 0.0) throw std::invalid_argument("kl_beta must be >= 0");
    if (temperature <= 0.0) throw std::invalid_argument("temperature must be > 0");
  }
};

// Stage 3 consumes layouts only; sources yield Layout values and nothing else.
struct LayoutSource {
  std::string name;
  std::function<Layout(Rng&)> draw;
};

inline LayoutSource heldout_source(std::vector<Layout> layouts) {
  auto shared = std::make_shared<std::vector<Layout>>(std::move(layouts));
  return {"heldout", [shared](Rng& rng) {
            return (*shared)[rng.uniform_int(static_cast<int>(shared->size()))];
          }};
}

inline LayoutSource random_source(const WorldConfig& world) {
  return {"random", [world](Rng& rng) { return sample_layout(rng, world); }};
}

// Deterministic procedural layouts: evenly spaced same-size boxes in rows or
// columns with cycling colors. Every pattern is oracle-verified at build time.
inline LayoutSource scripted_source(const WorldConfig& world) {
  auto layouts = std::make_shared<std::vector<Layout>>();
  int side = world.min_box_side;
  for (int k = 2; k <= std::min(world.k_max, 3); ++k) {
    for (int gap = 1; gap <= 2; ++gap) {
      for (int vertical = 0; vertical < 2; ++vertical) {
        Layout l;
        bool fits = true;
        for (int i = 0; i < k; ++i) {
          int off = i * (side + gap);
          Box b = vertical ? Box{1, 1 + off, 1 + side, 1 + off + side}
                           : Box{1 + off, 1, 1 + off + side, 1 + side};
          if (b.x1 > world.w || b.y1 > world.h) {
            fits = false;
            break;
          }
          l.items.push_back({{i % world.colors, Qualifier::kNone}, b});
        }
        if (!fits) continue;
        try {
          GridImage img = render(l, world);
          bool ok = true;
          for (const auto& it : l.items)
            if (ground_oracle(img, it.expr) != it.box) ok = false;
          if (ok) layouts->push_back(l);
        } catch (const std::exception&) {
        }
      }
    }
  }
  if (layouts->empty()) throw std::invalid_argument("no scripted layout fits this world");
  return {"scripted", [layouts](Rng& rng) {
            return (*layouts)[rng.uniform_int(static_cast<int>(layouts->size()))];
          }};
}

// A^i = r^i - mean(r); mean-centering only, no variance normalization.
inline std::vector<double> grpo_advantages(std::span<const double> rewards) {
  if (rewards.size() < 2) throw std::invalid_argument("need a group of >= 2");
  double mean = 0;
  for (double r : rewards) mean += r;
  mean /= static_cast<double>(rewards.size());
  std::vector<double> a(rewards.begin(), rewards.end());
  for (auto& x : a) x -= mean;
  return a;
}

struct CycleRewardOut {
  double reward = 0;                // -(1/K) sum d(pred, gt), in [-1, 0]
  std::vector<double> box_ious;     // per item; unparseable items score 0
  int parse_failures = 0;
};

inline double box_discrepancy(const std::optional<Box>& pred, const Box& gt,
                              const RewardSpec& spec, int w, int h) {
  if (!pred) return 1.0;
  if (spec.kind == RewardKind::kOneMinusIou) return 1.0 - iou(*pred, gt);
  double d = std::abs(pred->x0 - gt.x0) / static_cast<double>(w) +
             std::abs(pred->x1 - gt.x1) / static_cast<double>(w) +
             std::abs(pred->y0 - gt.y0) / static_cast<double>(h) +
             std::abs(pred->y1 - gt.y1) / static_cast<double>(h);
  return std::min(1.0, d / 4.0);
}

// Model-in-the-loop reward: greedy-grounds every expression of the query
// layout on the rolled-out image tokens; malformed decodes are absorbed as
// maximal discrepancy, never an error.
template <class S>
CycleRewardOut cycle_reward(const Model<S>& m, const Vocab& v, const WorldConfig& world,
                            const Layout& layout, std::span<const int> rollout_tokens,
                            const RewardSpec& spec = {}) {
  if (rollout_tokens.size() != static_cast<size_t>(v.img_len()))
    throw WrongLength("rollout must have exactly H*W image tokens");
  std::vector<Expression> exprs;
  for (const auto& it : layout.items) exprs.push_back(it.expr);
  auto grounded = ground_expressions(m, v, rollout_tokens, exprs);
  CycleRewardOut out;
  double dsum = 0;
  for (size_t k = 0; k < exprs.size(); ++k) {
    const auto& gt = layout.items[k].box;
    dsum += box_discrepancy(grounded[k].box, gt, spec, world.w, world.h);
    out.box_ious.push_back(grounded[k].box ? iou(*grounded[k].box, gt) : 0.0);
    if (!grounded[k].box) ++out.parse_failures;
  }
  out.reward = -dsum / static_cast<double>(exprs.size());
  return out;
}

struct Rollout {
  std::vector<int> tokens;               // H*W absolute image-token ids
  std::vector<double> logp_old;          // per token, under the sampling policy
  std::vector<std::vector<float>> ref_probs;  // per step, pi_ref over the image range
  double reward = 0;
  double advantage = 0;
  std::vector<double> box_ious;
  int parse_failures = 0;
};

struct GrpoGroup {
  Layout query;
  std::vector<Rollout> rollouts;
};

template <class S>
struct SurrogateOut {
  int node = -1;        // J to be maximized
  double value = 0;
  double mean_kl = 0;
  double clip_fraction = 0;  // tokens with ratio outside [1-eps, 1+eps]
  long ratio_clamps = 0;     // RatioOverflow guard activations
};

// Clipped importance-ratio surrogate with exact per-state KL to the frozen
// reference. Per-token ratios; the rollout's advantage is shared across its
// tokens; everything is averaged over tokens and rollouts.
template <class S>
SurrogateOut<S> grpo_surrogate(Tape<S>& tape, const Model<S>& m, const Vocab& v,
                               const GrpoGroup& group, const GrpoConfig& cfg) {
  SurrogateOut<S> out;
  auto g1 = encode_layout(group.query, v);
  S inv_temp = static_cast<S>(1.0 / cfg.temperature);
  std::vector<int> objs;
  long tokens_total = 0, clipped = 0;
  double kl_sum = 0;
  for (const auto& ro : group.rollouts) {
    SeqRun<S> run(tape, m);
    for (size_t i = 0; i < g1.size(); ++i)
      run.append_token(g1[i], static_cast<int>(i));
    std::vector<int> terms, kls;
    S adv = static_cast<S>(ro.advantage);
    for (size_t t = 0; t < ro.tokens.size(); ++t) {
      int lg = run.last_logits();
      int lp = tape.log_softmax_pick(lg, v.img_lo, v.v_img,
                                     ro.tokens[t] - v.img_lo, inv_temp);
      int ratio = tape.exp_of(tape.add_const(lp, static_cast<S>(-ro.logp_old[t])));
      double rv = tape.scalar(ratio);
      if (rv <= 1e-4 || rv >= 1e4) ++out.ratio_clamps;
      int rc = tape.clip(ratio, S(1e-4), S(1e4));
      if (std::abs(tape.scalar(rc) - 1.0) > cfg.clip_eps) ++clipped;
      int unclipped = tape.mul_const(rc, adv);
      int clipped_term = tape.mul_const(
          tape.clip(rc, static_cast<S>(1.0 - cfg.clip_eps),
                    static_cast<S>(1.0 + cfg.clip_eps)),
          adv);
      terms.push_back(tape.min2(unclipped, clipped_term));
      std::vector<S> ref(ro.ref_probs[t].begin(), ro.ref_probs[t].end());
      kls.push_back(tape.kl_to_ref(lg, v.img_lo, v.v_img, ref, inv_temp));
      kl_sum += tape.scalar(kls.back());
      ++tokens_total;
      if (t + 1 < ro.tokens.size())
        run.append_token(ro.tokens[t], v.img_pos_base() + static_cast<int>(t));
    }
    int obj = tape.affine({tape.mean_scalars(terms), tape.mean_scalars(kls)},
                          {S(1), static_cast<S>(-cfg.kl_beta)}, S(0));
    objs.push_back(obj);
  }
  out.node = tape.mean_scalars(objs);
  out.value = tape.scalar(out.node);
  out.mean_kl = kl_sum / std::max(1l, tokens_total);
  out.clip_fraction = tokens_total > 0 ? static_cast<double>(clipped) / tokens_total : 0;
  return out;
}

// Samples G rollouts for one query under the frozen sampling policy and
// scores them with the model-in-the-loop cycle reward.
template <class S>
GrpoGroup sample_group(const Model<S>& pi_old, const Vocab& v, const WorldConfig& world,
                       const Layout& query, const GrpoConfig& cfg, uint64_t seed) {
  GrpoGroup group;
  group.query = query;
  group.rollouts.resize(cfg.group);
  for (int g = 0; g < cfg.group; ++g) {
    Rng rng(Rng::derive(seed, g));
    auto gen = generate_image(pi_old, v, query, cfg.temperature, &rng);
    Rollout ro;
    ro.tokens = gen.tokens;
    ro.logp_old = gen.logprobs;
    auto rew = cycle_reward(pi_old, v, world, query, ro.tokens, cfg.reward);
    ro.reward = rew.reward;
    ro.box_ious = rew.box_ious;
    ro.parse_failures = rew.parse_failures;
    group.rollouts[g] = std::move(ro);
  }
  std::vector<double> rewards;
  for (const auto& ro : group.rollouts) rewards.push_back(ro.reward);
  auto adv = grpo_advantages(rewards);
  for (int g = 0; g < cfg.group; ++g) group.rollouts[g].advantage = adv[g];
  return group;
}

// pi_ref probabilities over the image range at every state visited by a
// rollout, under the policy temperature.
template <class S>
void fill_ref_probs(const Model<S>& ref, const Vocab& v, GrpoGroup& group,
                    double temperature) {
  auto g1 = encode_layout(group.query, v);
  for (auto& ro : group.rollouts) {
    Tape<S> tape(ref.params);
    SeqRun<S> run(tape, ref);
    for (size_t i = 0; i < g1.size(); ++i)
      run.append_token(g1[i], static_cast<int>(i));
    ro.ref_probs.assign(ro.tokens.size(), std::vector<float>(v.v_img));
    for (size_t t = 0; t < ro.tokens.size(); ++t) {
      auto z = tape.val(run.last_logits());
      double mx = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < v.v_img; ++j)
        mx = std::max(mx, static_cast<double>(z[v.img_lo + j]) / temperature);
      double sum = 0;
      std::vector<double> p(v.v_img);
      for (int j = 0; j < v.v_img; ++j) {
        p[j] = std::exp(static_cast<double>(z[v.img_lo + j]) / temperature - mx);
        sum += p[j];
      }
      for (int j = 0; j < v.v_img; ++j)
        ro.ref_probs[t][j] = static_cast<float>(p[j] / sum);
      if (t + 1 < ro.tokens.size())
        run.append_token(ro.tokens[t], v.img_pos_base() + static_cast<int>(t));
    }
  }
}

// Deterministic greedy-loop reward over a fixed layout set.
template <class S>
double mean_greedy_reward(const Model<S>& m, const Vocab& v, const WorldConfig& world,
                          std::span<const Layout> layouts, const RewardSpec& spec,
                          int threads = 1) {
  std::vector<double> r(layouts.size());
  parallel_for(static_cast<int>(layouts.size()), threads, [&](int i) {
    auto gen = generate_image(m, v, layouts[i]);
    r[i] = cycle_reward(m, v, world, layouts[i], gen.tokens, spec).reward;
  });
  double s = 0;
  for (double x : r) s += x;
  return layouts.empty() ? 0.0 : s / layouts.size();
}

struct Stage3Stats {
  double mean_reward = 0, mean_cycle_iou = 0, kl_to_ref = 0;
  double clip_fraction = 0, parse_failure_rate = 0;
  long ratio_clamps = 0;
};

template <class S>
Stage3Stats grpo_step(const RunContext& ctx, Model<S>& m, AdamW<S>& opt,
                      const Model<S>& pi_ref, const GrpoConfig& cfg,
                      const LayoutSource& source, Rng& rng,
                      std::vector<GradSet<S>>& grad_pool, GradSet<S>& total) {
  // snapshot of the current policy for rollouts and rewards
  Model<S> pi_old = m;
  std::vector<Layout> queries;
  std::vector<uint64_t> seeds;
  for (int b = 0; b < cfg.batch; ++b) {
    queries.push_back(source.draw(rng));
    seeds.push_back(rng.u64());
  }
  std::vector<GrpoGroup> groups(cfg.batch);
  parallel_for(cfg.batch, ctx.threads, [&](int b) {
    groups[b] = sample_group(pi_old, ctx.vocab, ctx.world, queries[b], cfg, seeds[b]);
    fill_ref_probs(pi_ref, ctx.vocab, groups[b], cfg.temperature);
  });

  Stage3Stats st;
  long boxes = 0, fails = 0;
  for (const auto& gr : groups)
    for (const auto& ro : gr.rollouts) {
      st.mean_reward += ro.reward;
      for (double x : ro.box_ious) {
        st.mean_cycle_iou += x;
        ++boxes;
      }
      fails += ro.parse_failures;
    }
  st.mean_reward /= cfg.batch * cfg.group;
  st.mean_cycle_iou /= std::max(1l, boxes);
  st.parse_failure_rate = boxes > 0 ? static_cast<double>(fails) / boxes : 0;

  if (static_cast<int>(grad_pool.size()) < cfg.batch) {
    grad_pool.resize(cfg.batch);
    for (auto& g : grad_pool) g.init(m.params);
  }
  for (int epoch = 0; epoch < cfg.inner_epochs; ++epoch) {
    std::vector<SurrogateOut<S>> outs(cfg.batch);
    parallel_for(cfg.batch, ctx.threads, [&](int b) {
      grad_pool[b].zero();
      Tape<S> tape(m.params);
      outs[b] = grpo_surrogate(tape, m, ctx.vocab, groups[b], cfg);
      // maximize J: descend on -J
      int neg = tape.mul_const(outs[b].node, S(-1));
      tape.backward(neg, grad_pool[b]);
    });
    total.zero();
    double j_mean = 0;
    for (int b = 0; b < cfg.batch; ++b) {
      total.add_scaled(grad_pool[b], S(1) / static_cast<S>(cfg.batch));
      j_mean += outs[b].value / cfg.batch;
      if (epoch == 0) {
        st.kl_to_ref += outs[b].mean_kl / cfg.batch;
        st.clip_fraction += outs[b].clip_fraction / cfg.batch;
        st.ratio_clamps += outs[b].ratio_clamps;
      }
    }
    if (!std::isfinite(j_mean)) throw DivergenceError("stage 3 objective is not finite");
    opt.step(m.params, total);
  }
  return st;
}

// pi_ref is the policy frozen at stage entry; resumed runs must pass the
// original stage-entry parameters, not the resume point.
template <class S>
void run_stage3(const RunContext& ctx, Model<S>& m, AdamW<S>& opt,
                const GrpoConfig& cfg, const LayoutSource& source, Rng& rng,
                const Model<S>& pi_ref, long start_step = 0,
                MetricsWriter* metrics = nullptr, const StageCallbacks& hooks = {}) {
  cfg.validate();
  opt.lr = cfg.lr;
  opt.weight_decay = cfg.weight_decay;
  std::vector<GradSet<S>> pool;
  GradSet<S> total;
  total.init(m.params);
  for (long step = start_step + 1; step <= cfg.steps; ++step) {
    auto st = grpo_step(ctx, m, opt, pi_ref, cfg, source, rng, pool, total);
    if (metrics != nullptr) {
      ordered_json row;
      row["step"] = step;
      row["mean_reward"] = st.mean_reward;
      row["mean_cycle_iou"] = st.mean_cycle_iou;
      row["kl_to_ref"] = st.kl_to_ref;
      row["clip_fraction"] = st.clip_fraction;
      row["parse_failure_rate"] = st.parse_failure_rate;
      row["ratio_clamps"] = st.ratio_clamps;
      metrics->write(row);
    }
    if (hooks.after_step) hooks.after_step(step);
  }
}

}  // namespace gridloop
