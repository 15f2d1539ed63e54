#include "gridloop/runner.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>

namespace gridloop {

namespace fs = std::filesystem;

namespace {

template <class T>
T get_or(const ordered_json& j, const std::string& key, T fallback) {
  if (j.contains(key)) return j.at(key).get<T>();
  return fallback;
}

std::string stage_prefix(int stage) { return "s" + std::to_string(stage) + "_"; }

std::string step_suffix(long step) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06ld", step);
  return buf;
}

// newest checkpoint of a stage in the run directory, or empty
std::pair<std::string, long> find_latest(const std::string& dir, int stage) {
  std::string best;
  long best_step = -1;
  std::string want = stage_prefix(stage) + "ckpt_";
  if (!fs::exists(dir)) return {best, best_step};
  for (const auto& e : fs::directory_iterator(dir)) {
    std::string name = e.path().filename().string();
    if (!name.starts_with(want) || !name.ends_with(".json")) continue;
    long step = std::strtol(name.c_str() + want.size(), nullptr, 10);
    if (step > best_step) {
      best_step = step;
      best = (fs::path(dir) / name.substr(0, name.size() - 5)).string();
    }
  }
  return {best, best_step};
}

}  // namespace

RunConfig RunConfig::from_json(const ordered_json& j) {
  RunConfig c;
  c.seed = get_or<uint64_t>(j, "seed", c.seed);
  c.threads = get_or<int>(j, "threads", c.threads);
  c.out_dir = get_or<std::string>(j, "out_dir", c.out_dir);
  if (j.contains("world")) {
    const auto& w = j.at("world");
    c.world.h = get_or<int>(w, "H", c.world.h);
    c.world.w = get_or<int>(w, "W", c.world.w);
    c.world.colors = get_or<int>(w, "colors", c.world.colors);
    c.world.k_max = get_or<int>(w, "k_max", c.world.k_max);
    c.world.min_box_side = get_or<int>(w, "min_box_side", c.world.min_box_side);
    c.world.v_img = get_or<int>(w, "v_img", c.world.v_img);
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    c.model_dim = get_or<int>(m, "dim", c.model_dim);
    c.model_layers = get_or<int>(m, "layers", c.model_layers);
    c.model_heads = get_or<int>(m, "heads", c.model_heads);
    c.model_mlp_mult = get_or<int>(m, "mlp_mult", c.model_mlp_mult);
    c.model_init_std = get_or<double>(m, "init_std", c.model_init_std);
  }
  if (j.contains("stage1")) {
    const auto& s = j.at("stage1");
    c.stage1.steps = get_or<int>(s, "steps", c.stage1.steps);
    c.stage1.batch = get_or<int>(s, "batch", c.stage1.batch);
    c.stage1.lr = get_or<double>(s, "lr", c.stage1.lr);
    c.stage1.eval_interval = get_or<int>(s, "eval_interval", c.stage1.eval_interval);
    c.stage1.eval_layouts = get_or<int>(s, "eval_layouts", c.stage1.eval_layouts);
    c.ckpt_interval1 = get_or<int>(s, "ckpt_interval", c.ckpt_interval1);
  }
  if (j.contains("stage2")) {
    const auto& s = j.at("stage2");
    c.stage2.steps = get_or<int>(s, "steps", c.stage2.steps);
    c.stage2.batch = get_or<int>(s, "batch", c.stage2.batch);
    c.stage2.lr = get_or<double>(s, "lr", c.stage2.lr);
    c.stage2.lambda = get_or<double>(s, "lambda", c.stage2.lambda);
    c.stage2.schedule.tau0 = get_or<double>(s, "tau0", c.stage2.schedule.tau0);
    c.stage2.schedule.alpha = get_or<double>(s, "alpha", c.stage2.schedule.alpha);
    c.stage2.schedule.tau_min = get_or<double>(s, "tau_min", c.stage2.schedule.tau_min);
    c.stage2.aux_i2l = get_or<bool>(s, "aux_i2l", c.stage2.aux_i2l);
    c.stage2.bptt_truncate = get_or<int>(s, "bptt_truncate", c.stage2.bptt_truncate);
    c.stage2.eval_interval = get_or<int>(s, "eval_interval", c.stage2.eval_interval);
    c.stage2.eval_layouts = get_or<int>(s, "eval_layouts", c.stage2.eval_layouts);
    c.ckpt_interval2 = get_or<int>(s, "ckpt_interval", c.ckpt_interval2);
  }
  if (j.contains("stage3")) {
    const auto& s = j.at("stage3");
    c.stage3.steps = get_or<int>(s, "steps", c.stage3.steps);
    c.stage3.batch = get_or<int>(s, "batch", c.stage3.batch);
    c.stage3.group = get_or<int>(s, "group", c.stage3.group);
    c.stage3.lr = get_or<double>(s, "lr", c.stage3.lr);
    c.stage3.clip_eps = get_or<double>(s, "clip_eps", c.stage3.clip_eps);
    c.stage3.kl_beta = get_or<double>(s, "kl_beta", c.stage3.kl_beta);
    c.stage3.temperature = get_or<double>(s, "temperature", c.stage3.temperature);
    c.stage3.inner_epochs = get_or<int>(s, "inner_epochs", c.stage3.inner_epochs);
    std::string rk = get_or<std::string>(s, "reward", "one_minus_iou");
    if (rk == "one_minus_iou") c.stage3.reward.kind = RewardKind::kOneMinusIou;
    else if (rk == "l1_normalized") c.stage3.reward.kind = RewardKind::kL1Normalized;
    else throw std::invalid_argument("unknown reward kind " + rk);
    c.stage3_source = get_or<std::string>(s, "layout_source", c.stage3_source);
    c.stage3.eval_interval = get_or<int>(s, "eval_interval", c.stage3.eval_interval);
    c.stage3.eval_layouts = get_or<int>(s, "eval_layouts", c.stage3.eval_layouts);
    c.ckpt_interval3 = get_or<int>(s, "ckpt_interval", c.ckpt_interval3);
  }
  if (j.contains("eval")) c.eval_n = get_or<int>(j.at("eval"), "n", c.eval_n);
  c.stage1.holdout_seed = c.holdout_seed();
  c.stage2.holdout_seed = c.holdout_seed();
  c.stage3.holdout_seed = c.holdout_seed();
  return c;
}

ordered_json RunConfig::to_json() const {
  ordered_json j;
  j["seed"] = seed;
  j["threads"] = threads;
  j["out_dir"] = out_dir;
  j["world"] = {{"H", world.h}, {"W", world.w}, {"colors", world.colors},
                {"k_max", world.k_max}, {"min_box_side", world.min_box_side},
                {"v_img", world.v_img}};
  j["model"] = {{"dim", model_dim}, {"layers", model_layers}, {"heads", model_heads},
                {"mlp_mult", model_mlp_mult}, {"init_std", model_init_std}};
  j["stage1"] = {{"steps", stage1.steps}, {"batch", stage1.batch}, {"lr", stage1.lr},
                 {"eval_interval", stage1.eval_interval},
                 {"eval_layouts", stage1.eval_layouts},
                 {"ckpt_interval", ckpt_interval1}};
  j["stage2"] = {{"steps", stage2.steps}, {"batch", stage2.batch}, {"lr", stage2.lr},
                 {"lambda", stage2.lambda}, {"tau0", stage2.schedule.tau0},
                 {"alpha", stage2.schedule.alpha},
                 {"tau_min", stage2.schedule.tau_min}, {"aux_i2l", stage2.aux_i2l},
                 {"bptt_truncate", stage2.bptt_truncate},
                 {"eval_interval", stage2.eval_interval},
                 {"eval_layouts", stage2.eval_layouts},
                 {"ckpt_interval", ckpt_interval2}};
  j["stage3"] = {{"steps", stage3.steps}, {"batch", stage3.batch},
                 {"group", stage3.group}, {"lr", stage3.lr},
                 {"clip_eps", stage3.clip_eps}, {"kl_beta", stage3.kl_beta},
                 {"temperature", stage3.temperature},
                 {"inner_epochs", stage3.inner_epochs},
                 {"reward", stage3.reward.kind == RewardKind::kOneMinusIou
                                ? "one_minus_iou"
                                : "l1_normalized"},
                 {"layout_source", stage3_source},
                 {"eval_interval", stage3.eval_interval},
                 {"eval_layouts", stage3.eval_layouts},
                 {"ckpt_interval", ckpt_interval3}};
  j["eval"] = {{"n", eval_n}};
  return j;
}

std::string resolve_out_dir(const std::string& out_dir) {
  const char* root = std::getenv("GRIDLOOP_OUT");
  if (root == nullptr || out_dir.empty() || fs::path(out_dir).is_absolute())
    return out_dir;
  return (fs::path(root) / out_dir).string();
}

TrainOutcome cmd_train(const RunConfig& cfg_in, int stage, const std::string& warm_base,
                       bool resume) {
  RunConfig cfg = cfg_in;
  std::string dir = resolve_out_dir(cfg.out_dir);
  fs::create_directories(dir);
  {
    std::ofstream os(fs::path(dir) / "config.json");
    os << cfg.to_json().dump(2) << "\n";
  }
  RunContext ctx = RunContext::make(cfg.world, resolve_threads(cfg.threads));

  Model<float> model{};
  AdamW<float> opt;
  Rng data_rng(cfg.stage_data_seed(stage));
  long start_step = 0;
  std::optional<Model<float>> pi_ref;

  if (stage != 1 || resume) {
    // warm start / resume need an existing checkpoint
    if (stage != 1 && warm_base.empty())
      throw MissingWarmStart("stage " + std::to_string(stage) +
                             " requires --warm <checkpoint>");
  }
  if (stage != 1) {
    auto warm = load_checkpoint(warm_base);
    if (warm.vocab.total != ctx.vocab.total)
      throw BadCheckpoint("warm checkpoint world does not match config");
    model = warm.model;
    if (stage == 3) pi_ref = warm.model;
  } else {
    model = Model<float>::init(cfg.model_config(), cfg.seed);
  }
  opt.init(model.params);

  if (resume) {
    auto [base, step] = find_latest(dir, stage);
    if (base.empty()) throw BadCheckpoint("no checkpoint to resume in " + dir);
    auto loaded = load_checkpoint(base);
    model = loaded.model;
    TrainState ts;
    std::string state_base = base;
    auto pos = state_base.rfind("ckpt_");
    state_base.replace(pos, 5, "state_");
    load_train_state(state_base, opt, ts);
    data_rng.load_state(ts.data_rng);
    start_step = ts.step;
  }

  int ckpt_interval = stage == 1   ? cfg.ckpt_interval1
                      : stage == 2 ? cfg.ckpt_interval2
                                   : cfg.ckpt_interval3;
  std::string metrics_path =
      (fs::path(dir) / ("metrics_stage" + std::to_string(stage) + ".jsonl")).string();
  MetricsWriter metrics(metrics_path, resume);

  std::string final_base;
  auto save_all = [&](long step) {
    std::string base =
        (fs::path(dir) / (stage_prefix(stage) + "ckpt_" + step_suffix(step))).string();
    if (fs::exists(base + ".json")) return base;  // checkpoints are write-once
    save_checkpoint(base, model, cfg.world);
    TrainState ts;
    ts.step = step;
    ts.data_rng = data_rng.save_state();
    ts.aux_rng = "";
    std::string sbase =
        (fs::path(dir) / (stage_prefix(stage) + "state_" + step_suffix(step))).string();
    save_train_state(sbase, opt, ts);
    return base;
  };
  StageCallbacks hooks;
  hooks.after_step = [&](long step) {
    if (ckpt_interval > 0 && step % ckpt_interval == 0) save_all(step);
  };

  long total_steps = 0;
  if (stage == 1) {
    total_steps = cfg.stage1.steps;
    run_stage1(ctx, model, opt, cfg.stage1, data_rng, start_step, &metrics, hooks);
  } else if (stage == 2) {
    total_steps = cfg.stage2.steps;
    run_stage2(ctx, model, opt, cfg.stage2, data_rng, start_step, &metrics, hooks);
  } else if (stage == 3) {
    total_steps = cfg.stage3.steps;
    LayoutSource source =
        cfg.stage3_source == "random"    ? random_source(cfg.world)
        : cfg.stage3_source == "scripted" ? scripted_source(cfg.world)
                                          : heldout_source(make_holdout(
                                                cfg.world, cfg.holdout_seed(), 256));
    run_stage3(ctx, model, opt, cfg.stage3, source, data_rng, *pi_ref, start_step,
               &metrics, hooks);
  } else {
    throw std::invalid_argument("stage must be 1, 2 or 3");
  }
  metrics.flush();
  TrainOutcome out;
  out.final_step = total_steps;
  out.checkpoint_base = save_all(total_steps);
  return out;
}

void cmd_dataset(const RunConfig& cfg, int n, const std::string& out_path) {
  std::string path = resolve_out_dir(out_path);
  if (auto dir = fs::path(path).parent_path(); !dir.empty()) fs::create_directories(dir);
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  ordered_json header;
  header["type"] = "gridloop_dataset";
  header["H"] = cfg.world.h;
  header["W"] = cfg.world.w;
  header["colors"] = cfg.world.colors;
  header["k_max"] = cfg.world.k_max;
  header["min_box_side"] = cfg.world.min_box_side;
  header["n"] = n;
  header["seed"] = cfg.seed;
  os << header.dump() << "\n";
  Rng rng(Rng::derive(cfg.seed, 0xda7a));
  for (int i = 0; i < n; ++i) {
    Layout l = sample_layout(rng, cfg.world);
    GridImage img = render(l, cfg.world);
    os << to_json(l, cfg.world, &img) << "\n";
  }
}

EvalReport cmd_eval(const std::string& checkpoint_base, int n, uint64_t seed,
                    int threads, const std::string& report_path) {
  auto loaded = load_checkpoint(checkpoint_base);
  EvalReport rep = evaluate(loaded.model, loaded.vocab, loaded.world, n, seed,
                            resolve_threads(threads));
  if (!report_path.empty()) {
    std::string path = resolve_out_dir(report_path);
    if (auto dir = fs::path(path).parent_path(); !dir.empty())
      fs::create_directories(dir);
    std::ofstream os(path);
    os << rep.to_json().dump(2) << "\n";
  }
  return rep;
}

std::vector<GradcheckSuiteResult> run_gradcheck_suites() {
  std::vector<GradcheckSuiteResult> out;

  {  // Eq. 1: summed next-token CE over a packed micro sequence (V=11)
    ModelConfig c;
    c.vocab = 11;
    c.dim = 8;
    c.layers = 1;
    c.heads = 2;
    c.t_max = 16;
    c.init_std = 0.3;
    auto m = Model<double>::init(c, 123);
    const int t_total = 14;
    Rng rng(7);
    PackedSequence p;
    for (int t = 0; t < t_total; ++t) {
      p.tokens.push_back(rng.uniform_int(c.vocab));
      p.segment.push_back(t < 4 ? Segment::kG1 : (t < 10 ? Segment::kImg : Segment::kG2));
      p.positions.push_back(t);
      p.target_mask.push_back(t >= 4 && t != 10);
    }
    MaskSpec spec;
    p.attn.assign(t_total * t_total, 0);
    for (int t = 0; t < t_total; ++t)
      for (int q = 0; q <= t; ++q)
        if (spec.allowed[static_cast<int>(p.segment[t])][static_cast<int>(p.segment[q])])
          p.attn[t * t_total + q] = 1;

    auto value = [&] {
      Tape<double> tape(m.params);
      return stage1_loss(tape, m, p).total;
    };
    GradSet<double> g;
    g.init(m.params);
    {
      Tape<double> tape(m.params);
      auto lo = stage1_loss(tape, m, p);
      tape.backward(lo.node, g);
    }
    auto rep = gradcheck(m.params, g, value);
    out.push_back({"eq1_pretrain_ce", rep.max_rel_err, 1e-4, rep.checked});
  }

  {  // Eq. 2: J_joint with frozen gumbel noise, soft relaxation, 2x2 world
    WorldConfig w;
    w.h = 2;
    w.w = 2;
    w.colors = 2;
    w.k_max = 2;
    w.min_box_side = 1;
    Vocab v = Vocab::build(w);
    ModelConfig c;
    c.vocab = v.total;
    c.dim = 8;
    c.layers = 1;
    c.heads = 2;
    c.t_max = v.t_max();
    c.init_std = 0.25;
    auto m = Model<double>::init(c, 31);
    Layout l;
    l.items.push_back({{0, Qualifier::kNone}, {0, 0, 1, 1}});
    l.items.push_back({{1, Qualifier::kNone}, {1, 1, 2, 2}});
    GridImage img = render(l, w);
    const uint64_t noise_seed = 404;
    auto value = [&] {
      Rng noise(noise_seed);
      Tape<double> tape(m.params);
      return djo_loss_example(tape, m, v, l, img, 0.8, noise, 1.0, 1.0, false, 0,
                              LoopMode::kSoftRelaxed)
          .j;
    };
    GradSet<double> g;
    g.init(m.params);
    {
      Rng noise(noise_seed);
      Tape<double> tape(m.params);
      auto lo = djo_loss_example(tape, m, v, l, img, 0.8, noise, 1.0, 1.0, false, 0,
                                 LoopMode::kSoftRelaxed);
      tape.backward(lo.node, g);
    }
    auto rep = gradcheck(m.params, g, value, 1e-5);
    out.push_back({"eq2_joint_loop", rep.max_rel_err, 1e-3, rep.checked});
  }

  {  // GRPO clipped surrogate with KL anchor, frozen rollouts
    WorldConfig w;
    w.h = 4;
    w.w = 4;
    w.colors = 3;
    w.k_max = 2;
    w.min_box_side = 1;
    Vocab v = Vocab::build(w);
    ModelConfig c;
    c.vocab = v.total;
    c.dim = 8;
    c.layers = 1;
    c.heads = 2;
    c.t_max = v.t_max();
    c.init_std = 0.2;
    auto m = Model<double>::init(c, 41);
    GrpoConfig cfg;
    cfg.group = 3;
    cfg.kl_beta = 0.05;
    Rng rng(17);
    Layout q = sample_layout(rng, w);
    auto group = sample_group(m, v, w, q, cfg, rng.u64());
    fill_ref_probs(m, v, group, cfg.temperature);
    std::vector<double> rewards;
    for (size_t g = 0; g < group.rollouts.size(); ++g) {
      group.rollouts[g].reward = -0.25 * static_cast<double>(g);
      rewards.push_back(group.rollouts[g].reward);
    }
    auto adv = grpo_advantages(rewards);
    for (size_t g = 0; g < adv.size(); ++g) group.rollouts[g].advantage = adv[g];
    Rng pert(19);
    for (auto& t : m.params.t)
      for (auto& x : t.w) x += 0.01 * pert.normal(0, 1);

    auto value = [&] {
      Tape<double> tape(m.params);
      return grpo_surrogate(tape, m, v, group, cfg).value;
    };
    GradSet<double> g;
    g.init(m.params);
    {
      Tape<double> tape(m.params);
      auto so = grpo_surrogate(tape, m, v, group, cfg);
      tape.backward(so.node, g);
    }
    auto rep = gradcheck(m.params, g, value, 1e-5);
    out.push_back({"grpo_surrogate", rep.max_rel_err, 1e-4, rep.checked});
  }
  return out;
}

}  // namespace gridloop
