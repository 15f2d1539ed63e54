#pragma once

#include "gridloop/infer.hpp"
#include "gridloop/metrics.hpp"

namespace gridloop {

// One image's detections and ground truth, for pooled AP computation.
struct ApInstance {
  std::vector<Detection> detections;
  std::vector<std::pair<int, Box>> ground_truth;  // (color, box)
};

// COCO-style AP at one IoU threshold: detections pooled per class across
// instances, matched greedily by descending score (best-IoU unmatched GT),
// precision-recall integrated at 101 recall points, averaged over classes
// that have ground truth.
double average_precision(const std::vector<ApInstance>& data, double iou_threshold);

// mean over thresholds 0.50:0.05:0.95
double ap_averaged(const std::vector<ApInstance>& data);

inline std::vector<Detection> detect_oracle(const GridImage& image) {
  return detect_components(image);
}

struct EvalReport {
  double ap = 0, ap50 = 0, ap75 = 0;
  double acc50 = 0, acc75 = 0, acc90 = 0, macc = 0;
  double cycle_iou = 0;
  double cell_accuracy = 0;
  double parse_failure_rate = 0;
  int samples = 0;
  uint64_t seed = 0;

  ordered_json to_json() const;
  static EvalReport from_json(const ordered_json& j);
  std::string table() const;  // fixed-order human-readable block
};

inline const std::vector<double>& acc_threshold_grid() {
  static const std::vector<double> grid = {0.50, 0.55, 0.60, 0.65, 0.70,
                                           0.75, 0.80, 0.85, 0.90, 0.95};
  return grid;
}

struct GroundingAccuracy {
  std::vector<double> acc;  // per threshold in acc_threshold_grid()
  double macc = 0;
  double at(double thr) const;
};

// Acc@t = fraction of per-query IoUs >= t; mAcc = mean over the grid.
GroundingAccuracy accuracy_from_ious(std::span<const double> ious);

// Greedy-decodes one box per (image, expression) query; IoU >= t scores a
// hit, an unparseable decode scores zero.
template <class S>
GroundingAccuracy grounding_accuracy(const Model<S>& m, const Vocab& v,
                                     const WorldConfig& world,
                                     std::span<const Layout> layouts,
                                     int threads = 1) {
  std::vector<std::vector<double>> ious(layouts.size());
  parallel_for(static_cast<int>(layouts.size()), threads, [&](int i) {
    const Layout& lay = layouts[i];
    GridImage img = render(lay, world);
    auto img_tokens = encode_image(img, v);
    std::vector<Expression> exprs;
    for (const auto& it : lay.items) exprs.push_back(it.expr);
    auto results = ground_expressions(m, v, img_tokens, exprs);
    for (size_t k = 0; k < exprs.size(); ++k)
      ious[i].push_back(results[k].box ? iou(*results[k].box, lay.items[k].box) : 0.0);
  });
  std::vector<double> flat;
  for (const auto& row : ious) flat.insert(flat.end(), row.begin(), row.end());
  return accuracy_from_ious(flat);
}

// Full protocol over n held-out layouts: greedy generation scored by the
// component detector (AP family), grounding accuracy on oracle renders, and
// the L-I-L cycle metrics. Deterministic for a fixed seed.
template <class S>
EvalReport evaluate(const Model<S>& m, const Vocab& v, const WorldConfig& world,
                    int n_samples, uint64_t seed, int threads = 1) {
  std::vector<Layout> layouts = make_holdout(world, seed, n_samples);
  std::vector<ApInstance> ap_data(layouts.size());
  std::vector<CycleStats> cycles(layouts.size());
  parallel_for(static_cast<int>(layouts.size()), threads, [&](int i) {
    const Layout& lay = layouts[i];
    auto gen = generate_image(m, v, lay);
    GridImage img = decode_image(gen.tokens, v);
    ApInstance inst;
    inst.detections = detect_oracle(img);
    for (const auto& it : lay.items)
      inst.ground_truth.emplace_back(it.expr.color, it.box);
    ap_data[i] = std::move(inst);
    cycles[i] = cycle_stats(m, v, world, lay);
  });

  EvalReport rep;
  rep.samples = n_samples;
  rep.seed = seed;
  rep.ap = ap_averaged(ap_data);
  rep.ap50 = average_precision(ap_data, 0.50);
  rep.ap75 = average_precision(ap_data, 0.75);
  auto ga = grounding_accuracy(m, v, world, layouts, threads);
  rep.acc50 = ga.at(0.50);
  rep.acc75 = ga.at(0.75);
  rep.acc90 = ga.at(0.90);
  rep.macc = ga.macc;
  double ciou = 0, cacc = 0, fails = 0;
  for (const auto& c : cycles) {
    ciou += c.mean_iou;
    cacc += c.cell_accuracy;
    fails += c.parse_ok ? 0 : 1;
  }
  rep.cycle_iou = ciou / n_samples;
  rep.cell_accuracy = cacc / n_samples;
  rep.parse_failure_rate = fails / n_samples;
  return rep;
}

}  // namespace gridloop
