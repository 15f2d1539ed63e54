#pragma once

#include "gridloop/checkpoint.hpp"
#include "gridloop/cyclerl.hpp"
#include "gridloop/eval.hpp"

namespace gridloop {

// One run = one JSON config; command-line flags override fields and the
// merged result is written back into the run directory.
struct RunConfig {
  uint64_t seed = 1;
  int threads = 0;  // 0 = all hardware threads, 1 = concurrency disabled
  std::string out_dir = "runs/run";
  WorldConfig world;  // 16x16, 6 colors, k_max 5 by default
  int model_dim = 64;
  int model_layers = 2;
  int model_heads = 4;
  int model_mlp_mult = 4;
  double model_init_std = 0.02;
  Stage1Config stage1;
  DjoConfig stage2;
  GrpoConfig stage3;
  std::string stage3_source = "heldout";  // heldout | random | scripted
  int ckpt_interval1 = 2000, ckpt_interval2 = 1000, ckpt_interval3 = 500;
  int eval_n = 256;

  static RunConfig from_json(const ordered_json& j);
  ordered_json to_json() const;

  ModelConfig model_config() const {
    Vocab v = Vocab::build(world);
    ModelConfig c;
    c.vocab = v.total;
    c.dim = model_dim;
    c.layers = model_layers;
    c.heads = model_heads;
    c.t_max = v.t_max();
    c.mlp_mult = model_mlp_mult;
    c.init_std = model_init_std;
    return c;
  }
  uint64_t stage_data_seed(int stage) const { return Rng::derive(seed, 0x5700 + stage); }
  uint64_t holdout_seed() const { return Rng::derive(seed, 0xeba1); }
};

// resolves out_dir against the GRIDLOOP_OUT environment root, if set
std::string resolve_out_dir(const std::string& out_dir);

struct TrainOutcome {
  std::string checkpoint_base;  // final checkpoint path base
  long final_step = 0;
};

// Runs one stage, writing checkpoints, train state and JSONL metrics under
// the run directory. Stages 2 and 3 require warm_base; resume continues from
// the newest checkpoint of that stage in the run directory.
TrainOutcome cmd_train(const RunConfig& cfg, int stage, const std::string& warm_base,
                       bool resume);

// n JSONL records (header line first) of sampled layouts with their renders
void cmd_dataset(const RunConfig& cfg, int n, const std::string& out_path);

EvalReport cmd_eval(const std::string& checkpoint_base, int n, uint64_t seed,
                    int threads, const std::string& report_path);

struct GradcheckSuiteResult {
  std::string name;
  double max_rel_err = 0;
  double limit = 0;
  size_t checked = 0;
  bool pass() const { return max_rel_err < limit; }
};
// All finite-difference suites at 64-bit on micro models.
std::vector<GradcheckSuiteResult> run_gradcheck_suites();

}  // namespace gridloop
