#pragma once

#include "gridloop/runner.hpp"

namespace gridloop {

// Bundle of world/model/budget knobs for the trend experiments. The ablation
// command reads these from a plan file; the acceptance suite pins its own.
struct ExperimentScales {
  WorldConfig world;
  int dim = 32, layers = 2, heads = 4;
  int s1_steps = 1500, s1_batch = 16;
  double s1_lr = 1e-3;
  int s2_steps = 400, s2_batch = 8;
  double s2_lr = 5e-4;
  double lambda = 1.0;
  AnnealSchedule schedule{1.0, 0.99, 0.1};
  int s3_steps = 150, s3_batch = 4, s3_group = 8;
  double s3_lr = 5e-4, clip_eps = 0.2, kl_beta = 0.02, temperature = 1.0;
  int s3_inner_epochs = 1;
  int eval_n = 96;
  uint64_t eval_seed = 0xe7a1;
  int threads = 1;
  std::vector<int> s1_sweep = {60, 180, 500, 1500};  // stage-1 budget sweep
  int sweep_s2_budget = 400;  // fixed stage-2 budget after each s1 snapshot
  int sweep_s3_budget = 150;  // fixed stage-3 budget after each s2 exit
  double sweep_s3_temperature = 0;  // sweep RL rollout temp; 0 = use `temperature`
  // when non-empty, sweep snapshots are taken where held-out AP first crosses
  // these thresholds instead of at fixed budgets (removes seed-to-seed drift
  // in entry quality)
  std::vector<double> sweep_ap_bands;
  int sweep_probe_interval = 100;  // stage-1 steps between AP probes
  int sweep_probe_n = 48;         // layouts per AP probe
  int sweep_max_s1 = 4000;        // stage-1 step cap while chasing thresholds

  ModelConfig model_config() const {
    Vocab v = Vocab::build(world);
    ModelConfig c;
    c.vocab = v.total;
    c.dim = dim;
    c.layers = layers;
    c.heads = heads;
    c.t_max = v.t_max();
    return c;
  }
};

// stage-1 training with parameter snapshots at the requested budgets
struct SnapshotRun {
  std::vector<Model<float>> snapshots;  // one per budget, ascending
  Model<float> final_model;
};
SnapshotRun train_stage1_snapshots(const ExperimentScales& sc, uint64_t seed,
                                   std::span<const int> budgets);

Model<float> train_stage2_from(const ExperimentScales& sc, uint64_t seed,
                               const Model<float>& warm, int steps,
                               double l2i_weight = 1.0);
Model<float> train_stage3_from(const ExperimentScales& sc, uint64_t seed,
                               const Model<float>& warm, int steps,
                               const LayoutSource& source, double kl_beta_override = -1);

// Table-4 analogue: the four stage configurations evaluated on one split.
struct StageLadder {
  EvalReport s1, s12, s13, s123;
  Model<float> model_s1, model_s12;
  double seconds = 0;
};
StageLadder run_stage_ladder(const ExperimentScales& sc, uint64_t seed);

// Fig-6 analogue: entry metric vs stage gain across upstream-budget sweeps.
// One chain per stage-1 budget: snapshot -> fixed stage-2 -> fixed stage-3,
// yielding the stage-2 transition points (left) and, at the stage-2 exits,
// the stage-3 transition points (right).
struct TransitionPoint {
  int budget = 0;      // stage-1 budget that produced this chain
  double entry_ap = 0;
  double gain_ap = 0;  // AP after the following stage minus entry AP
};
struct TransitionSweeps {
  std::vector<TransitionPoint> into_stage2;
  std::vector<TransitionPoint> into_stage3;
};
TransitionSweeps run_transition_sweeps(const ExperimentScales& sc, uint64_t seed);

// Table-5 analogue: stage-3 layout-source robustness. The *_from variant
// starts from a caller-provided stage-2 model instead of training one.
struct SourceAblation {
  std::string source;
  EvalReport report;
};
std::vector<SourceAblation> run_source_ablation(const ExperimentScales& sc,
                                                uint64_t seed);
std::vector<SourceAblation> run_source_ablation_from(const ExperimentScales& sc,
                                                     uint64_t seed,
                                                     const Model<float>& warm_s12);

// Shortcut demonstration: loop-only training against the full objective.
struct ShortcutResult {
  double loop_start = 0, loop_end = 0;       // loop loss, loop-only arm
  double cell_acc_loop_only = 0;             // held-out fidelity after loop-only
  double cell_acc_joint = 0;                 // after the regularized objective
};
ShortcutResult run_shortcut_ablation(const ExperimentScales& sc, uint64_t seed);
ShortcutResult run_shortcut_ablation_from(const ExperimentScales& sc, uint64_t seed,
                                          const Model<float>& warm_s1);

// KL-anchor demonstration: a large beta pins the policy to the reference.
struct AnchorResult {
  double param_distance = 0;  // relative L2 from the reference
  double reward_entry = 0, reward_exit = 0;
};
AnchorResult run_anchor_demo(const ExperimentScales& sc, uint64_t seed, double beta);
AnchorResult run_anchor_demo_from(const ExperimentScales& sc, uint64_t seed,
                                  double beta, const Model<float>& warm_s12);

}  // namespace gridloop
