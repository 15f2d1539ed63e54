#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "gridloop/experiments.hpp"

using namespace gridloop;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is.good());
  return std::string(std::istreambuf_iterator<char>(is), {});
}

// metrics minus wall-clock throughput: every run-semantics field must
// reproduce bit-exactly; elapsed-time rates cannot
std::string drop_timing(const std::string& jsonl) {
  std::istringstream is(jsonl);
  std::string line, out;
  while (std::getline(is, line)) {
    auto row = nlohmann::ordered_json::parse(line);
    row.erase("examples_per_sec");
    out += row.dump() + "\n";
  }
  return out;
}

RunConfig micro_run_config(const std::string& dir) {
  RunConfig cfg;
  cfg.seed = 11;
  cfg.threads = 2;
  cfg.out_dir = dir;
  cfg.world.h = 4;
  cfg.world.w = 4;
  cfg.world.colors = 3;
  cfg.world.k_max = 2;
  cfg.world.min_box_side = 1;
  cfg.model_dim = 16;
  cfg.model_layers = 1;
  cfg.model_heads = 2;
  cfg.stage1.steps = 8;
  cfg.stage1.batch = 4;
  cfg.stage1.lr = 1e-3;
  cfg.stage1.eval_interval = 4;
  cfg.stage1.eval_layouts = 4;
  cfg.ckpt_interval1 = 0;
  cfg.stage2.steps = 3;
  cfg.stage2.batch = 2;
  cfg.stage2.lr = 1e-3;
  cfg.stage2.eval_interval = 0;
  cfg.ckpt_interval2 = 0;
  cfg.stage3.steps = 2;
  cfg.stage3.batch = 2;
  cfg.stage3.group = 2;
  cfg.stage3.lr = 1e-3;
  cfg.stage3.eval_interval = 0;
  cfg.ckpt_interval3 = 0;
  cfg.eval_n = 8;
  return cfg;
}

struct TmpDir {
  fs::path path;
  explicit TmpDir(const std::string& name) : path(fs::path("cli_test_tmp") / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TmpDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

}  // namespace

TEST_CASE("dataset files: header-only at n=0, byte-identical reruns, valid records") {
  TmpDir tmp("dataset");
  RunConfig cfg = micro_run_config(tmp.str());
  std::string a = tmp.str() + "/a.jsonl";
  std::string b = tmp.str() + "/b.jsonl";
  cmd_dataset(cfg, 0, a);
  {
    std::ifstream is(a);
    std::string line;
    int lines = 0;
    while (std::getline(is, line)) ++lines;
    CHECK(lines == 1);
  }
  cmd_dataset(cfg, 25, a);
  cmd_dataset(cfg, 25, b);
  CHECK(slurp(a) == slurp(b));

  std::ifstream is(a);
  std::string line;
  std::getline(is, line);
  auto header = nlohmann::json::parse(line);
  CHECK(header.at("type") == "gridloop_dataset");
  CHECK(header.at("n") == 25);
  int records = 0;
  while (std::getline(is, line)) {
    WorldRecord rec = world_record_from_json(line);
    CHECK_NOTHROW(validate_layout(rec.layout, cfg.world));
    REQUIRE(rec.image.has_value());
    CHECK(*rec.image == render(rec.layout, cfg.world));
    ++records;
  }
  CHECK(records == 25);
}

TEST_CASE("run config json round-trips through parse and dump") {
  RunConfig cfg = micro_run_config("somewhere");
  cfg.stage3_source = "random";
  cfg.stage2.lambda = 2.5;
  auto j = cfg.to_json();
  RunConfig back = RunConfig::from_json(j);
  CHECK(back.to_json().dump() == j.dump());
}

TEST_CASE("stage pipeline trains end to end through the command layer") {
  TmpDir tmp("pipeline");
  RunConfig cfg = micro_run_config(tmp.str());

  CHECK_THROWS_AS(cmd_train(cfg, 2, "", false), MissingWarmStart);

  auto s1 = cmd_train(cfg, 1, "", false);
  CHECK(fs::exists(s1.checkpoint_base + ".json"));
  CHECK(fs::exists(s1.checkpoint_base + ".bin"));
  CHECK(fs::exists(fs::path(tmp.str()) / "config.json"));
  CHECK(fs::exists(fs::path(tmp.str()) / "metrics_stage1.jsonl"));

  auto s2 = cmd_train(cfg, 2, s1.checkpoint_base, false);
  auto s3 = cmd_train(cfg, 3, s2.checkpoint_base, false);
  CHECK(fs::exists(s3.checkpoint_base + ".bin"));

  // metrics schema
  {
    std::ifstream is(fs::path(tmp.str()) / "metrics_stage1.jsonl");
    std::string line;
    std::getline(is, line);
    auto row = nlohmann::json::parse(line);
    for (const char* k : {"step", "L_img", "L_gnd", "examples_per_sec"})
      CHECK(row.contains(k));
  }
  {
    std::ifstream is(fs::path(tmp.str()) / "metrics_stage3.jsonl");
    std::string line;
    std::getline(is, line);
    auto row = nlohmann::json::parse(line);
    for (const char* k : {"step", "mean_reward", "mean_cycle_iou", "kl_to_ref",
                          "clip_fraction", "parse_failure_rate"})
      CHECK(row.contains(k));
  }

  auto rep = cmd_eval(s3.checkpoint_base, 8, 5, 2, tmp.str() + "/report.json");
  CHECK(fs::exists(tmp.str() + "/report.json"));
  auto rep2 = cmd_eval(s3.checkpoint_base, 8, 5, 2, "");
  CHECK(rep.to_json().dump() == rep2.to_json().dump());
}

TEST_CASE("interrupted stage-1 resumes bit-exactly") {
  TmpDir tmp_full("resume_full");
  TmpDir tmp_split("resume_split");

  RunConfig full = micro_run_config(tmp_full.str());
  full.stage1.steps = 10;
  full.ckpt_interval1 = 0;
  auto full_out = cmd_train(full, 1, "", false);

  RunConfig split = micro_run_config(tmp_split.str());
  split.stage1.steps = 6;
  split.ckpt_interval1 = 0;
  cmd_train(split, 1, "", false);
  split.stage1.steps = 10;
  auto split_out = cmd_train(split, 1, "", true);

  CHECK(slurp(full_out.checkpoint_base + ".bin") ==
        slurp(split_out.checkpoint_base + ".bin"));
  // metrics rows match line for line, wall-clock rates aside
  auto full_lines = slurp((fs::path(tmp_full.str()) / "metrics_stage1.jsonl").string());
  auto split_lines = slurp((fs::path(tmp_split.str()) / "metrics_stage1.jsonl").string());
  CHECK(drop_timing(full_lines) == drop_timing(split_lines));
}

TEST_CASE("checkpoints are write-once") {
  TmpDir tmp("write_once");
  RunConfig cfg = micro_run_config(tmp.str());
  cfg.stage1.steps = 2;
  auto out = cmd_train(cfg, 1, "", false);
  auto before = slurp(out.checkpoint_base + ".bin");
  // a second identical run must not clobber the existing checkpoint
  auto out2 = cmd_train(cfg, 1, "", false);
  CHECK(out2.checkpoint_base == out.checkpoint_base);
  CHECK(slurp(out.checkpoint_base + ".bin") == before);
}

TEST_CASE("gradcheck suites pass and the harness detects corrupted gradients") {
  auto suites = run_gradcheck_suites();
  REQUIRE(suites.size() == 3);
  for (const auto& s : suites) {
    INFO(s.name, " err ", s.max_rel_err, " over ", s.checked, " coords");
    CHECK(s.pass());
  }

  // mutation check: a wrong backward rule must be caught
  ModelConfig c;
  c.vocab = 7;
  c.dim = 4;
  c.layers = 1;
  c.heads = 1;
  c.t_max = 4;
  c.init_std = 0.3;
  auto m = Model<double>::init(c, 2);
  std::vector<int> tokens = {1, 2, 3};
  std::vector<uint8_t> mask = {1, 0, 0, 1, 1, 0, 1, 1, 1};
  std::vector<uint8_t> targets = {0, 1, 1};
  auto value = [&] {
    Tape<double> tape(m.params);
    auto out = forward_masked(tape, m, tokens, mask);
    return tape.scalar(ce_loss(tape, out.logits, tokens, targets));
  };
  GradSet<double> g;
  g.init(m.params);
  {
    Tape<double> tape(m.params);
    auto out = forward_masked(tape, m, tokens, mask);
    tape.backward(ce_loss(tape, out.logits, tokens, targets), g);
  }
  // corrupt one coordinate's analytic gradient
  g.g[0][3] += 0.5;
  auto rep = gradcheck(m.params, g, value);
  CHECK(rep.max_rel_err > 1e-2);
}

TEST_CASE("GRIDLOOP_OUT prefixes relative output paths") {
  setenv("GRIDLOOP_OUT", "/tmp/gridloop_root", 1);
  CHECK(resolve_out_dir("runs/x") == "/tmp/gridloop_root/runs/x");
  CHECK(resolve_out_dir("/abs/path") == "/abs/path");
  unsetenv("GRIDLOOP_OUT");
  CHECK(resolve_out_dir("runs/x") == "runs/x");
}
