#include "gridloop/eval.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

namespace gridloop {

namespace {

struct ScoredDet {
  double score;
  int instance;
  int det_index;
};

// AP for one class at one threshold; returns nullopt if the class has no GT.
std::optional<double> class_ap(const std::vector<ApInstance>& data, int color,
                               double thr) {
  int total_gt = 0;
  for (const auto& inst : data)
    for (const auto& g : inst.ground_truth)
      if (g.first == color) ++total_gt;
  if (total_gt == 0) return std::nullopt;

  std::vector<ScoredDet> dets;
  for (int i = 0; i < static_cast<int>(data.size()); ++i)
    for (int d = 0; d < static_cast<int>(data[i].detections.size()); ++d)
      if (data[i].detections[d].color == color)
        dets.push_back({data[i].detections[d].score, i, d});
  std::stable_sort(dets.begin(), dets.end(),
                   [](const ScoredDet& a, const ScoredDet& b) { return a.score > b.score; });

  std::vector<std::vector<char>> used(data.size());
  for (size_t i = 0; i < data.size(); ++i)
    used[i].assign(data[i].ground_truth.size(), 0);

  std::vector<double> precision, recall;
  int tp = 0, fp = 0;
  for (const auto& sd : dets) {
    const auto& inst = data[sd.instance];
    const Box& db = inst.detections[sd.det_index].box;
    int best = -1;
    double best_iou = thr;
    for (int g = 0; g < static_cast<int>(inst.ground_truth.size()); ++g) {
      if (inst.ground_truth[g].first != color || used[sd.instance][g]) continue;
      double ov = iou(db, inst.ground_truth[g].second);
      if (ov >= best_iou) {
        best_iou = ov;
        best = g;
      }
    }
    if (best >= 0) {
      used[sd.instance][best] = 1;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / (tp + fp));
    recall.push_back(static_cast<double>(tp) / total_gt);
  }

  // precision envelope over 101 recall points
  double ap = 0;
  for (int r = 0; r <= 100; ++r) {
    double want = r / 100.0;
    double best_p = 0;
    for (size_t k = 0; k < precision.size(); ++k)
      if (recall[k] >= want) best_p = std::max(best_p, precision[k]);
    ap += best_p;
  }
  return ap / 101.0;
}

}  // namespace

double average_precision(const std::vector<ApInstance>& data, double iou_threshold) {
  int max_color = -1;
  for (const auto& inst : data) {
    for (const auto& g : inst.ground_truth) max_color = std::max(max_color, g.first);
    for (const auto& d : inst.detections) max_color = std::max(max_color, d.color);
  }
  double sum = 0;
  int classes = 0;
  for (int c = 0; c <= max_color; ++c) {
    auto ap = class_ap(data, c, iou_threshold);
    if (ap) {
      sum += *ap;
      ++classes;
    }
  }
  return classes == 0 ? 0.0 : sum / classes;
}

double ap_averaged(const std::vector<ApInstance>& data) {
  double sum = 0;
  int n = 0;
  for (double thr = 0.50; thr < 0.951; thr += 0.05) {
    sum += average_precision(data, thr);
    ++n;
  }
  return sum / n;
}

GroundingAccuracy accuracy_from_ious(std::span<const double> ious) {
  const auto& grid = acc_threshold_grid();
  GroundingAccuracy out;
  out.acc.assign(grid.size(), 0.0);
  for (double ov : ious)
    for (size_t g = 0; g < grid.size(); ++g)
      if (ov >= grid[g]) out.acc[g] += 1.0;
  if (!ious.empty())
    for (auto& a : out.acc) a /= static_cast<double>(ious.size());
  for (double a : out.acc) out.macc += a;
  out.macc /= static_cast<double>(grid.size());
  return out;
}

double GroundingAccuracy::at(double thr) const {
  const auto& grid = acc_threshold_grid();
  for (size_t i = 0; i < grid.size(); ++i)
    if (std::abs(grid[i] - thr) < 1e-9) return acc[i];
  throw std::invalid_argument("threshold not in grid");
}

ordered_json EvalReport::to_json() const {
  ordered_json j;
  j["AP"] = ap;
  j["AP50"] = ap50;
  j["AP75"] = ap75;
  j["Acc50"] = acc50;
  j["Acc75"] = acc75;
  j["Acc90"] = acc90;
  j["mAcc"] = macc;
  j["cycle_iou"] = cycle_iou;
  j["cell_accuracy"] = cell_accuracy;
  j["parse_failure_rate"] = parse_failure_rate;
  j["samples"] = samples;
  j["seed"] = seed;
  return j;
}

EvalReport EvalReport::from_json(const ordered_json& j) {
  EvalReport r;
  r.ap = j.at("AP").get<double>();
  r.ap50 = j.at("AP50").get<double>();
  r.ap75 = j.at("AP75").get<double>();
  r.acc50 = j.at("Acc50").get<double>();
  r.acc75 = j.at("Acc75").get<double>();
  r.acc90 = j.at("Acc90").get<double>();
  r.macc = j.at("mAcc").get<double>();
  r.cycle_iou = j.at("cycle_iou").get<double>();
  r.cell_accuracy = j.at("cell_accuracy").get<double>();
  r.parse_failure_rate = j.at("parse_failure_rate").get<double>();
  r.samples = j.at("samples").get<int>();
  r.seed = j.at("seed").get<uint64_t>();
  return r;
}

std::string EvalReport::table() const {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  os << "metric              value\n"
     << "AP                  " << ap << "\n"
     << "AP50                " << ap50 << "\n"
     << "AP75                " << ap75 << "\n"
     << "Acc@0.50            " << acc50 << "\n"
     << "Acc@0.75            " << acc75 << "\n"
     << "Acc@0.90            " << acc90 << "\n"
     << "mAcc                " << macc << "\n"
     << "cycle IoU           " << cycle_iou << "\n"
     << "cell accuracy       " << cell_accuracy << "\n"
     << "parse failure rate  " << parse_failure_rate << "\n"
     << "samples             " << samples << "\n";
  return os.str();
}

}  // namespace gridloop
