#include "gridloop/experiments.hpp"

#include <chrono>

namespace gridloop {

namespace {

Stage1Config s1_config(const ExperimentScales& sc) {
  Stage1Config c;
  c.batch = sc.s1_batch;
  c.lr = sc.s1_lr;
  c.eval_interval = 0;
  return c;
}

DjoConfig s2_config(const ExperimentScales& sc) {
  DjoConfig c;
  c.batch = sc.s2_batch;
  c.lr = sc.s2_lr;
  c.lambda = sc.lambda;
  c.schedule = sc.schedule;
  c.eval_interval = 0;
  return c;
}

GrpoConfig s3_config(const ExperimentScales& sc) {
  GrpoConfig c;
  c.batch = sc.s3_batch;
  c.group = sc.s3_group;
  c.lr = sc.s3_lr;
  c.clip_eps = sc.clip_eps;
  c.kl_beta = sc.kl_beta;
  c.temperature = sc.temperature;
  c.inner_epochs = sc.s3_inner_epochs;
  c.eval_interval = 0;
  return c;
}

EvalReport eval_model(const ExperimentScales& sc, const Model<float>& m) {
  Vocab v = Vocab::build(sc.world);
  return evaluate(m, v, sc.world, sc.eval_n, sc.eval_seed, sc.threads);
}

}  // namespace

SnapshotRun train_stage1_snapshots(const ExperimentScales& sc, uint64_t seed,
                                   std::span<const int> budgets) {
  RunContext ctx = RunContext::make(sc.world, sc.threads);
  auto model = Model<float>::init(sc.model_config(), seed);
  AdamW<float> opt;
  opt.init(model.params);
  Stage1Config cfg = s1_config(sc);
  Rng data(Rng::derive(seed, 0x51));
  SnapshotRun out;
  long done = 0;
  for (int b : budgets) {
    cfg.steps = b;
    run_stage1(ctx, model, opt, cfg, data, done);
    done = b;
    out.snapshots.push_back(model);
  }
  out.final_model = model;
  return out;
}

Model<float> train_stage2_from(const ExperimentScales& sc, uint64_t seed,
                               const Model<float>& warm, int steps,
                               double l2i_weight) {
  RunContext ctx = RunContext::make(sc.world, sc.threads);
  Model<float> model = warm;
  AdamW<float> opt;
  opt.init(model.params);
  DjoConfig cfg = s2_config(sc);
  cfg.steps = steps;
  Rng data(Rng::derive(seed, 0x52));
  run_stage2(ctx, model, opt, cfg, data, 0, nullptr, {}, l2i_weight);
  return model;
}

Model<float> train_stage3_from(const ExperimentScales& sc, uint64_t seed,
                               const Model<float>& warm, int steps,
                               const LayoutSource& source, double kl_beta_override) {
  RunContext ctx = RunContext::make(sc.world, sc.threads);
  Model<float> model = warm;
  AdamW<float> opt;
  opt.init(model.params);
  GrpoConfig cfg = s3_config(sc);
  cfg.steps = steps;
  if (kl_beta_override >= 0) cfg.kl_beta = kl_beta_override;
  Rng rng(Rng::derive(seed, 0x53));
  run_stage3(ctx, model, opt, cfg, source, rng, warm, 0, nullptr, {});
  return model;
}

StageLadder run_stage_ladder(const ExperimentScales& sc, uint64_t seed) {
  auto t0 = std::chrono::steady_clock::now();
  StageLadder out;
  auto s1 = train_stage1_snapshots(sc, seed, std::vector<int>{sc.s1_steps});
  out.model_s1 = s1.final_model;
  out.s1 = eval_model(sc, out.model_s1);

  out.model_s12 = train_stage2_from(sc, seed, out.model_s1, sc.s2_steps);
  out.s12 = eval_model(sc, out.model_s12);

  LayoutSource held = heldout_source(make_holdout(sc.world, sc.eval_seed + 1, 128));
  auto s13 = train_stage3_from(sc, seed, out.model_s1, sc.s3_steps, held);
  out.s13 = eval_model(sc, s13);

  auto s123 = train_stage3_from(sc, seed, out.model_s12, sc.s3_steps, held);
  out.s123 = eval_model(sc, s123);
  out.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

namespace {

// snapshots where held-out AP first crosses each threshold, in order
SnapshotRun train_stage1_ap_bands(const ExperimentScales& sc, uint64_t seed,
                                  std::vector<int>* budgets_out) {
  RunContext ctx = RunContext::make(sc.world, sc.threads);
  Vocab v = Vocab::build(sc.world);
  auto model = Model<float>::init(sc.model_config(), seed);
  AdamW<float> opt;
  opt.init(model.params);
  Stage1Config cfg = s1_config(sc);
  Rng data(Rng::derive(seed, 0x51));
  SnapshotRun out;
  size_t next = 0;
  long done = 0;
  while (next < sc.sweep_ap_bands.size() && done < sc.sweep_max_s1) {
    cfg.steps = done + sc.sweep_probe_interval;
    run_stage1(ctx, model, opt, cfg, data, done);
    done = cfg.steps;
    double ap = evaluate(model, v, sc.world, sc.sweep_probe_n, sc.eval_seed + 7,
                         sc.threads)
                    .ap;
    while (next < sc.sweep_ap_bands.size() && ap >= sc.sweep_ap_bands[next]) {
      out.snapshots.push_back(model);
      budgets_out->push_back(static_cast<int>(done));
      ++next;
    }
  }
  while (next < sc.sweep_ap_bands.size()) {  // cap reached: freeze the final model
    out.snapshots.push_back(model);
    budgets_out->push_back(static_cast<int>(done));
    ++next;
  }
  out.final_model = model;
  return out;
}

}  // namespace

TransitionSweeps run_transition_sweeps(const ExperimentScales& sc, uint64_t seed) {
  std::vector<int> budgets;
  SnapshotRun run;
  if (!sc.sweep_ap_bands.empty()) {
    run = train_stage1_ap_bands(sc, seed, &budgets);
  } else {
    budgets = sc.s1_sweep;
    run = train_stage1_snapshots(sc, seed, budgets);
  }
  LayoutSource held = heldout_source(make_holdout(sc.world, sc.eval_seed + 1, 128));
  ExperimentScales sc3 = sc;
  if (sc.sweep_s3_temperature > 0) sc3.temperature = sc.sweep_s3_temperature;
  TransitionSweeps out;
  for (size_t i = 0; i < run.snapshots.size(); ++i) {
    TransitionPoint left;
    left.budget = budgets[i];
    left.entry_ap = eval_model(sc, run.snapshots[i]).ap;
    auto s12 = train_stage2_from(sc, seed + 1000 + i, run.snapshots[i],
                                 sc.sweep_s2_budget);
    TransitionPoint right;
    right.budget = budgets[i];
    right.entry_ap = eval_model(sc, s12).ap;
    left.gain_ap = right.entry_ap - left.entry_ap;
    auto s123 =
        train_stage3_from(sc3, seed + 2000 + i, s12, sc.sweep_s3_budget, held);
    right.gain_ap = eval_model(sc, s123).ap - right.entry_ap;
    out.into_stage2.push_back(left);
    out.into_stage3.push_back(right);
  }
  return out;
}

std::vector<SourceAblation> run_source_ablation_from(const ExperimentScales& sc,
                                                     uint64_t seed,
                                                     const Model<float>& warm_s12) {
  std::vector<LayoutSource> sources = {
      heldout_source(make_holdout(sc.world, sc.eval_seed + 1, 128)),
      random_source(sc.world), scripted_source(sc.world)};
  std::vector<SourceAblation> out;
  for (const auto& src : sources) {
    auto m3 = train_stage3_from(sc, seed + 77, warm_s12, sc.s3_steps, src);
    out.push_back({src.name, eval_model(sc, m3)});
  }
  return out;
}

std::vector<SourceAblation> run_source_ablation(const ExperimentScales& sc,
                                                uint64_t seed) {
  auto s1 = train_stage1_snapshots(sc, seed, std::vector<int>{sc.s1_steps});
  auto s12 = train_stage2_from(sc, seed, s1.final_model, sc.s2_steps);
  return run_source_ablation_from(sc, seed, s12);
}

ShortcutResult run_shortcut_ablation_from(const ExperimentScales& sc, uint64_t seed,
                                          const Model<float>& warm_s1) {
  Vocab v = Vocab::build(sc.world);

  auto loop_on_holdout = [&](const Model<float>& m) {
    auto holdout = make_holdout(sc.world, sc.eval_seed + 2, 24);
    Rng noise(sc.eval_seed + 3);
    double s = 0;
    for (const auto& lay : holdout) {
      Tape<float> tape(m.params);
      s += loop_loss(tape, m, v, lay, sc.schedule.tau_min, noise).value;
    }
    return s / holdout.size();
  };

  ShortcutResult out;
  out.loop_start = loop_on_holdout(warm_s1);
  auto loop_only = train_stage2_from(sc, seed, warm_s1, sc.s2_steps,
                                     /*l2i_weight=*/0.0);
  out.loop_end = loop_on_holdout(loop_only);
  out.cell_acc_loop_only = eval_model(sc, loop_only).cell_accuracy;
  auto joint = train_stage2_from(sc, seed, warm_s1, sc.s2_steps, 1.0);
  out.cell_acc_joint = eval_model(sc, joint).cell_accuracy;
  return out;
}

ShortcutResult run_shortcut_ablation(const ExperimentScales& sc, uint64_t seed) {
  auto s1 = train_stage1_snapshots(sc, seed, std::vector<int>{sc.s1_steps});
  return run_shortcut_ablation_from(sc, seed, s1.final_model);
}

AnchorResult run_anchor_demo_from(const ExperimentScales& sc, uint64_t seed,
                                  double beta, const Model<float>& warm_s12) {
  Vocab v = Vocab::build(sc.world);
  auto holdout = make_holdout(sc.world, sc.eval_seed + 1, 48);
  LayoutSource held = heldout_source(holdout);

  AnchorResult out;
  out.reward_entry =
      mean_greedy_reward(warm_s12, v, sc.world, holdout, RewardSpec{}, sc.threads);
  auto anchored = train_stage3_from(sc, seed + 5, warm_s12, sc.s3_steps, held, beta);
  out.reward_exit =
      mean_greedy_reward(anchored, v, sc.world, holdout, RewardSpec{}, sc.threads);
  out.param_distance = param_l2_distance(anchored, warm_s12);
  return out;
}

AnchorResult run_anchor_demo(const ExperimentScales& sc, uint64_t seed, double beta) {
  auto s1 = train_stage1_snapshots(sc, seed, std::vector<int>{sc.s1_steps});
  auto s12 = train_stage2_from(sc, seed, s1.final_model, sc.s2_steps);
  return run_anchor_demo_from(sc, seed, beta, s12);
}

}  // namespace gridloop
