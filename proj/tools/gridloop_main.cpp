#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "gridloop/experiments.hpp"

using namespace gridloop;
namespace fs = std::filesystem;

namespace {

RunConfig load_run_config(const std::string& path) {
  if (path.empty()) return RunConfig{};
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("cannot open config " + path);
  ordered_json j;
  is >> j;
  return RunConfig::from_json(j);
}

ExperimentScales scales_from_json(const ordered_json& j) {
  ExperimentScales sc;
  auto geti = [&](const char* k, int d) { return j.contains(k) ? j.at(k).get<int>() : d; };
  auto getd = [&](const char* k, double d) {
    return j.contains(k) ? j.at(k).get<double>() : d;
  };
  if (j.contains("world")) {
    const auto& w = j.at("world");
    sc.world.h = w.value("H", sc.world.h);
    sc.world.w = w.value("W", sc.world.w);
    sc.world.colors = w.value("colors", sc.world.colors);
    sc.world.k_max = w.value("k_max", sc.world.k_max);
    sc.world.min_box_side = w.value("min_box_side", sc.world.min_box_side);
  }
  sc.dim = geti("dim", sc.dim);
  sc.layers = geti("layers", sc.layers);
  sc.heads = geti("heads", sc.heads);
  sc.s1_steps = geti("s1_steps", sc.s1_steps);
  sc.s1_batch = geti("s1_batch", sc.s1_batch);
  sc.s1_lr = getd("s1_lr", sc.s1_lr);
  sc.s2_steps = geti("s2_steps", sc.s2_steps);
  sc.s2_batch = geti("s2_batch", sc.s2_batch);
  sc.s2_lr = getd("s2_lr", sc.s2_lr);
  sc.lambda = getd("lambda", sc.lambda);
  sc.schedule.tau0 = getd("tau0", sc.schedule.tau0);
  sc.schedule.alpha = getd("alpha", sc.schedule.alpha);
  sc.schedule.tau_min = getd("tau_min", sc.schedule.tau_min);
  sc.s3_steps = geti("s3_steps", sc.s3_steps);
  sc.s3_batch = geti("s3_batch", sc.s3_batch);
  sc.s3_group = geti("s3_group", sc.s3_group);
  sc.s3_lr = getd("s3_lr", sc.s3_lr);
  sc.clip_eps = getd("clip_eps", sc.clip_eps);
  sc.kl_beta = getd("kl_beta", sc.kl_beta);
  sc.eval_n = geti("eval_n", sc.eval_n);
  if (j.contains("s1_sweep")) sc.s1_sweep = j.at("s1_sweep").get<std::vector<int>>();
  sc.sweep_s2_budget = geti("sweep_s2_budget", sc.s2_steps);
  sc.sweep_s3_budget = geti("sweep_s3_budget", sc.s3_steps);
  return sc;
}

void print_report_line(const std::string& name, const EvalReport& r) {
  std::printf("%-14s AP=%.4f AP50=%.4f AP75=%.4f Acc50=%.4f mAcc=%.4f cycleIoU=%.4f cellAcc=%.4f\n",
              name.c_str(), r.ap, r.ap50, r.ap75, r.acc50, r.macc, r.cycle_iou,
              r.cell_accuracy);
}

int run_ablate(const std::string& plan_path, const std::string& out_dir, int threads) {
  ordered_json plan;
  {
    std::ifstream is(plan_path);
    if (!is) throw std::invalid_argument("cannot open plan " + plan_path);
    is >> plan;
  }
  ExperimentScales sc = scales_from_json(plan.value("scales", ordered_json::object()));
  sc.threads = resolve_threads(threads);
  std::vector<uint64_t> seeds = plan.contains("seeds")
                                    ? plan.at("seeds").get<std::vector<uint64_t>>()
                                    : std::vector<uint64_t>{1};
  std::vector<std::string> parts =
      plan.contains("run") ? plan.at("run").get<std::vector<std::string>>()
                           : std::vector<std::string>{"ladder"};

  ordered_json report;
  report["scales"] = plan.value("scales", ordered_json::object());
  report["seeds"] = seeds;
  for (const auto& part : parts) {
    for (uint64_t seed : seeds) {
      std::string key = part + "_seed" + std::to_string(seed);
      if (part == "ladder") {
        auto lad = run_stage_ladder(sc, seed);
        std::printf("-- stage ladder, seed %llu (%.0fs)\n",
                    static_cast<unsigned long long>(seed), lad.seconds);
        print_report_line("stage1", lad.s1);
        print_report_line("stage1+2", lad.s12);
        print_report_line("stage1+3", lad.s13);
        print_report_line("stage1+2+3", lad.s123);
        report[key] = {{"s1", lad.s1.to_json()}, {"s12", lad.s12.to_json()},
                       {"s13", lad.s13.to_json()}, {"s123", lad.s123.to_json()},
                       {"seconds", lad.seconds}};
      } else if (part == "sweeps") {
        auto sweeps = run_transition_sweeps(sc, seed);
        std::printf("-- transition sweeps, seed %llu\n",
                    static_cast<unsigned long long>(seed));
        ordered_json obj;
        for (auto [tag, pts] : {std::pair{"into_stage2", &sweeps.into_stage2},
                                std::pair{"into_stage3", &sweeps.into_stage3}}) {
          ordered_json arr = ordered_json::array();
          for (const auto& p : *pts) {
            std::printf("%s budget=%5d entryAP=%.4f gainAP=%+.4f\n", tag, p.budget,
                        p.entry_ap, p.gain_ap);
            arr.push_back({{"budget", p.budget}, {"entry_ap", p.entry_ap},
                           {"gain_ap", p.gain_ap}});
          }
          obj[tag] = arr;
        }
        report[key] = obj;
      } else if (part == "sources") {
        auto rows = run_source_ablation(sc, seed);
        std::printf("-- stage-3 layout sources, seed %llu\n",
                    static_cast<unsigned long long>(seed));
        ordered_json arr = ordered_json::array();
        for (const auto& row : rows) {
          print_report_line(row.source, row.report);
          arr.push_back({{"source", row.source}, {"report", row.report.to_json()}});
        }
        report[key] = arr;
      } else if (part == "shortcut") {
        auto sh = run_shortcut_ablation(sc, seed);
        std::printf("-- shortcut ablation, seed %llu: loop %.4f -> %.4f, "
                    "cellAcc loop-only %.4f vs joint %.4f\n",
                    static_cast<unsigned long long>(seed), sh.loop_start, sh.loop_end,
                    sh.cell_acc_loop_only, sh.cell_acc_joint);
        report[key] = {{"loop_start", sh.loop_start}, {"loop_end", sh.loop_end},
                       {"cell_acc_loop_only", sh.cell_acc_loop_only},
                       {"cell_acc_joint", sh.cell_acc_joint}};
      } else if (part == "anchor") {
        auto an = run_anchor_demo(sc, seed, 10.0);
        std::printf("-- anchor beta=10, seed %llu: param dist %.5f, reward %.4f -> %.4f\n",
                    static_cast<unsigned long long>(seed), an.param_distance,
                    an.reward_entry, an.reward_exit);
        report[key] = {{"param_distance", an.param_distance},
                       {"reward_entry", an.reward_entry},
                       {"reward_exit", an.reward_exit}};
      } else {
        throw std::invalid_argument("unknown plan part " + part);
      }
    }
  }
  std::string dir = resolve_out_dir(out_dir);
  fs::create_directories(dir);
  std::ofstream os(fs::path(dir) / "ablation_report.json");
  os << report.dump(2) << "\n";
  std::printf("report written to %s\n",
              (fs::path(dir) / "ablation_report.json").string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gridloop: three-stage layout<->image training on a synthetic grid world"};
  app.require_subcommand(1);

  std::string config_path, out_dir, warm, ckpt, report_path, plan_path, dataset_out;
  int stage = 1, n = 256, threads = -1000;
  long seed = LONG_MIN;
  bool resume = false;
  uint64_t eval_seed = 0;

  auto* c_dataset = app.add_subcommand("dataset", "write sampled layout+image records");
  c_dataset->add_option("--config", config_path, "run config JSON");
  c_dataset->add_option("--n", n, "number of records")->required();
  c_dataset->add_option("--out", dataset_out, "output JSONL path")->required();
  c_dataset->add_option("--seed", seed, "override config seed");

  auto* c_train = app.add_subcommand("train", "run one training stage");
  c_train->add_option("--stage", stage, "1, 2 or 3")->required();
  c_train->add_option("--config", config_path, "run config JSON");
  c_train->add_option("--warm", warm, "warm checkpoint base (stages 2 and 3)");
  c_train->add_flag("--resume", resume, "resume from the newest checkpoint");
  c_train->add_option("--out", out_dir, "override out_dir");
  c_train->add_option("--seed", seed, "override config seed");
  c_train->add_option("--threads", threads, "override threads (1 disables concurrency)");

  auto* c_eval = app.add_subcommand("eval", "evaluate a checkpoint");
  c_eval->add_option("--ckpt", ckpt, "checkpoint base path")->required();
  c_eval->add_option("--n", n, "held-out layouts");
  c_eval->add_option("--seed", eval_seed, "eval split seed");
  c_eval->add_option("--report", report_path, "write report JSON here");
  c_eval->add_option("--threads", threads, "threads");

  auto* c_gradcheck = app.add_subcommand("gradcheck", "finite-difference suites");

  auto* c_ablate = app.add_subcommand("ablate", "run an experiment plan");
  c_ablate->add_option("--plan", plan_path, "plan JSON")->required();
  c_ablate->add_option("--out", out_dir, "report directory")->required();
  c_ablate->add_option("--threads", threads, "threads");

  CLI11_PARSE(app, argc, argv);

  try {
    if (c_dataset->parsed()) {
      RunConfig cfg = load_run_config(config_path);
      if (seed != LONG_MIN) cfg.seed = static_cast<uint64_t>(seed);
      cmd_dataset(cfg, n, dataset_out);
      return 0;
    }
    if (c_train->parsed()) {
      RunConfig cfg = load_run_config(config_path);
      if (seed != LONG_MIN) cfg.seed = static_cast<uint64_t>(seed);
      if (!out_dir.empty()) cfg.out_dir = out_dir;
      if (threads != -1000) cfg.threads = threads;
      auto out = cmd_train(cfg, stage, warm, resume);
      std::printf("stage %d done at step %ld; checkpoint %s\n", stage, out.final_step,
                  out.checkpoint_base.c_str());
      return 0;
    }
    if (c_eval->parsed()) {
      auto rep = cmd_eval(ckpt, n, eval_seed, threads == -1000 ? 0 : threads,
                          report_path);
      std::printf("%s", rep.table().c_str());
      return 0;
    }
    if (c_gradcheck->parsed()) {
      auto suites = run_gradcheck_suites();
      bool ok = true;
      for (const auto& s : suites) {
        std::printf("%-18s max_rel_err=%.3e limit=%.0e coords=%zu  %s\n",
                    s.name.c_str(), s.max_rel_err, s.limit, s.checked,
                    s.pass() ? "pass" : "FAIL");
        ok = ok && s.pass();
      }
      return ok ? 0 : 1;
    }
    if (c_ablate->parsed())
      return run_ablate(plan_path, out_dir, threads == -1000 ? 0 : threads);
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "divergence: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
