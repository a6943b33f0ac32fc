#include "ehdk/boxes.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>

namespace ehdk {

bool Box::valid() const {
  return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) &&
         std::isfinite(y2) && x1 <= x2 && y1 <= y2;
}

double iou(const Box& a, const Box& b) {
  double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  double inter = iw > 0 && ih > 0 ? iw * ih : 0.0;
  double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

double giou(const Box& a, const Box& b) {
  double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  double inter = iw > 0 && ih > 0 ? iw * ih : 0.0;
  double uni = a.area() + b.area() - inter;
  double cw = std::max(a.x2, b.x2) - std::min(a.x1, b.x1);
  double ch = std::max(a.y2, b.y2) - std::min(a.y1, b.y1);
  double hull = cw * ch;
  double iou_term = uni > 0.0 ? inter / uni : 0.0;
  double penalty = hull > 0.0 ? (hull - uni) / hull : 0.0;
  return iou_term - penalty;
}

double giou_loss(const Box& a, const Box& b) { return 1.0 - giou(a, b); }

double giou_with_grad(const Box& a, const Box& b, double grad_a[4]) {
  double ix1 = std::max(a.x1, b.x1), ix2 = std::min(a.x2, b.x2);
  double iy1 = std::max(a.y1, b.y1), iy2 = std::min(a.y2, b.y2);
  double iw = ix2 - ix1, ih = iy2 - iy1;
  bool overlap = iw > 0 && ih > 0;
  double inter = overlap ? iw * ih : 0.0;
  double area_a = a.area();
  double uni = area_a + b.area() - inter;
  double cw = std::max(a.x2, b.x2) - std::min(a.x1, b.x1);
  double ch = std::max(a.y2, b.y2) - std::min(a.y1, b.y1);
  double hull = cw * ch;

  // d(inter)/d(a coords): active only when the coordinate is the binding one
  double dI[4] = {0, 0, 0, 0};
  if (overlap) {
    dI[0] = a.x1 >= b.x1 ? -ih : 0.0;
    dI[1] = a.y1 >= b.y1 ? -iw : 0.0;
    dI[2] = a.x2 <= b.x2 ? ih : 0.0;
    dI[3] = a.y2 <= b.y2 ? iw : 0.0;
  }
  double dA[4] = {-(a.y2 - a.y1), -(a.x2 - a.x1), a.y2 - a.y1, a.x2 - a.x1};
  double dU[4], dC[4];
  for (int i = 0; i < 4; ++i) dU[i] = dA[i] - dI[i];
  dC[0] = a.x1 <= b.x1 ? -ch : 0.0;
  dC[1] = a.y1 <= b.y1 ? -cw : 0.0;
  dC[2] = a.x2 >= b.x2 ? ch : 0.0;
  dC[3] = a.y2 >= b.y2 ? cw : 0.0;

  double iou_term = uni > 0.0 ? inter / uni : 0.0;
  double penalty = hull > 0.0 ? (hull - uni) / hull : 0.0;
  for (int i = 0; i < 4; ++i) {
    double g = 0.0;
    if (uni > 0.0) g += (dI[i] * uni - inter * dU[i]) / (uni * uni);
    // penalty = 1 - U/C, d = -(dU*C - U*dC)/C^2
    if (hull > 0.0) g -= -(dU[i] * hull - uni * dC[i]) / (hull * hull);
    grad_a[i] = g;
  }
  return iou_term - penalty;
}

// ---------------------------------------------------------------------------
// Soft-NMS
// ---------------------------------------------------------------------------

namespace {

std::vector<Detection> soft_nms_group(std::vector<Detection> pool,
                                      const SoftNmsConfig& cfg) {
  struct Entry {
    Detection det;
    std::size_t input_index;
    bool alive;
  };
  std::vector<Entry> entries;
  entries.reserve(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (pool[i].score >= cfg.score_floor) {
      entries.push_back({pool[i], i, true});
    }
  }
  std::vector<Detection> out;
  out.reserve(entries.size());
  for (;;) {
    int best = -1;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (!entries[i].alive) continue;
      if (best < 0 || entries[i].det.score > entries[best].det.score ||
          (entries[i].det.score == entries[best].det.score &&
           entries[i].input_index < entries[best].input_index)) {
        best = int(i);
      }
    }
    if (best < 0) break;
    entries[best].alive = false;
    out.push_back(entries[best].det);
    for (Entry& e : entries) {
      if (!e.alive) continue;
      double ov = iou(e.det.box, entries[best].det.box);
      if (ov >= cfg.theta) {
        double factor = cfg.hard ? 0.0 : (1.0 - ov) * (1.0 - ov);
        e.det.score *= factor;
        if (e.det.score < cfg.score_floor) e.alive = false;
      }
    }
  }
  return out;
}

}  // namespace

std::vector<Detection> soft_nms(const std::vector<Detection>& dets,
                                const SoftNmsConfig& cfg) {
  if (!(cfg.theta > 0.0 && cfg.theta < 1.0)) {
    throw ConfigError("soft_nms: theta must lie in (0,1)");
  }
  if (!(cfg.score_floor >= 0.0 && cfg.score_floor < 1.0)) {
    throw ConfigError("soft_nms: score_floor must lie in [0,1)");
  }
  if (!cfg.per_class) return soft_nms_group(dets, cfg);

  int max_class = -1;
  for (const Detection& d : dets) max_class = std::max(max_class, d.class_id);
  std::vector<Detection> out;
  for (int c = 0; c <= max_class; ++c) {
    std::vector<Detection> pool;
    for (const Detection& d : dets) {
      if (d.class_id == c) pool.push_back(d);
    }
    std::vector<Detection> kept = soft_nms_group(std::move(pool), cfg);
    out.insert(out.end(), kept.begin(), kept.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// target assignment
// ---------------------------------------------------------------------------

TargetGrids assign_targets(int image_h, int image_w,
                           const std::vector<GtBox>& gts,
                           const std::vector<int>& strides) {
  TargetGrids grids;
  for (int s : strides) {
    TargetScale scale;
    scale.stride = s;
    scale.grid_h = image_h / s;
    scale.grid_w = image_w / s;
    scale.cells.resize(std::size_t(scale.grid_h) * scale.grid_w);
    grids.scales.push_back(std::move(scale));
  }
  for (std::size_t gi = 0; gi < gts.size(); ++gi) {
    const GtBox& gt = gts[gi];
    if (!gt.box.valid() || gt.box.x1 < 0 || gt.box.y1 < 0 ||
        gt.box.x2 > image_w || gt.box.y2 > image_h) {
      throw ValidationError("assign_targets: ground truth " +
                            std::to_string(gi) + " outside image bounds");
    }
    double size = std::sqrt(gt.box.area());
    int best = 0;
    double best_d = std::abs(double(strides[0]) - size);
    for (std::size_t si = 1; si < strides.size(); ++si) {
      double d = std::abs(double(strides[si]) - size);
      if (d < best_d) {  // ties keep the smaller stride seen first
        best_d = d;
        best = int(si);
      }
    }
    TargetScale& scale = grids.scales[best];
    double cx = 0.5 * (gt.box.x1 + gt.box.x2);
    double cy = 0.5 * (gt.box.y1 + gt.box.y2);
    int col = std::min(scale.grid_w - 1, int(cx / scale.stride));
    int row = std::min(scale.grid_h - 1, int(cy / scale.stride));
    CellTarget& cell = scale.at(row, col);
    double area = gt.box.area();
    if (cell.positive && cell.area >= area) continue;  // larger box wins
    if (!cell.positive) ++grids.num_positive;
    cell.positive = true;
    cell.class_id = gt.class_id;
    cell.box = gt.box;
    cell.area = area;
  }
  return grids;
}

// ---------------------------------------------------------------------------
// mAP evaluation
// ---------------------------------------------------------------------------

std::vector<double> coco_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.50 + 0.05 * i);
  return t;
}

namespace {

struct FlatDet {
  int image = 0;
  Box box;
  double score = 0.0;
};

// Canonical content-based order: permutations of the input never change it.
bool canonical_less(const FlatDet& a, const FlatDet& b) {
  return std::tie(b.score, a.box.x1, a.box.y1, a.box.x2, a.box.y2, a.image) <
         std::tie(a.score, b.box.x1, b.box.y1, b.box.x2, b.box.y2, b.image);
}

struct MatchedList {
  std::vector<double> scores;   // canonical order
  std::vector<char> is_tp;
  std::size_t num_gt = 0;
};

MatchedList match_class(const std::vector<std::vector<Detection>>& dets,
                        const std::vector<std::vector<GtBox>>& gts,
                        int class_id, double threshold) {
  MatchedList ml;
  std::vector<FlatDet> flat;
  for (std::size_t img = 0; img < dets.size(); ++img) {
    for (const Detection& d : dets[img]) {
      if (d.class_id == class_id) flat.push_back({int(img), d.box, d.score});
    }
  }
  std::sort(flat.begin(), flat.end(), canonical_less);

  std::vector<std::vector<const GtBox*>> class_gts(gts.size());
  for (std::size_t img = 0; img < gts.size(); ++img) {
    for (const GtBox& g : gts[img]) {
      if (g.class_id == class_id) class_gts[img].push_back(&g);
    }
    ml.num_gt += class_gts[img].size();
  }
  std::vector<std::vector<char>> used(gts.size());
  for (std::size_t img = 0; img < gts.size(); ++img) {
    used[img].assign(class_gts[img].size(), 0);
  }

  ml.scores.reserve(flat.size());
  ml.is_tp.reserve(flat.size());
  for (const FlatDet& d : flat) {
    int best = -1;
    double best_iou = 0.0;
    const auto& pool = class_gts[d.image];
    for (std::size_t k = 0; k < pool.size(); ++k) {
      if (used[d.image][k]) continue;
      double ov = iou(d.box, pool[k]->box);
      if (ov > best_iou) {  // ties keep the lowest ground-truth index
        best_iou = ov;
        best = int(k);
      }
    }
    bool tp = best >= 0 && best_iou >= threshold;
    if (tp) used[d.image][best] = 1;
    ml.scores.push_back(d.score);
    ml.is_tp.push_back(tp ? 1 : 0);
  }
  return ml;
}

// All-point interpolated AP with PR points taken at distinct score values.
double average_precision(const MatchedList& ml) {
  if (ml.num_gt == 0) return 0.0;
  std::vector<double> recall, precision;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < ml.scores.size(); ++i) {
    if (ml.is_tp[i]) {
      ++tp;
    } else {
      ++fp;
    }
    bool last_of_score =
        i + 1 == ml.scores.size() || ml.scores[i + 1] != ml.scores[i];
    if (last_of_score) {
      recall.push_back(double(tp) / double(ml.num_gt));
      precision.push_back(double(tp) / double(tp + fp));
    }
  }
  // precision envelope, integrated over recall
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    double env = 0.0;
    for (std::size_t j = i; j < precision.size(); ++j) {
      env = std::max(env, precision[j]);
    }
    ap += (recall[i] - prev_recall) * env;
    prev_recall = recall[i];
  }
  return ap;
}

}  // namespace

MapMetrics evaluate_map(const std::vector<std::vector<Detection>>& dets_per_image,
                        const std::vector<std::vector<GtBox>>& gts_per_image,
                        const std::vector<double>& thresholds, int num_classes) {
  if (dets_per_image.size() != gts_per_image.size()) {
    throw ArgumentError("evaluate_map: prediction/ground-truth image counts differ");
  }
  MapMetrics m;

  std::vector<bool> has_gt(num_classes, false), has_pred(num_classes, false);
  for (const auto& v : gts_per_image) {
    for (const GtBox& g : v) {
      if (g.class_id >= 0 && g.class_id < num_classes) has_gt[g.class_id] = true;
    }
  }
  for (const auto& v : dets_per_image) {
    for (const Detection& d : v) {
      if (d.class_id >= 0 && d.class_id < num_classes) has_pred[d.class_id] = true;
    }
  }

  double map_sum_over_thresholds = 0.0;
  for (double t : thresholds) {
    double ap_sum = 0.0;
    int active = 0;
    for (int c = 0; c < num_classes; ++c) {
      if (!has_gt[c] && !has_pred[c]) continue;
      ++active;
      MatchedList ml = match_class(dets_per_image, gts_per_image, c, t);
      double ap = has_gt[c] ? average_precision(ml) : 0.0;
      ap_sum += ap;
      if (t == thresholds.front()) {
        m.per_class_ap50.push_back({c, ap, !has_gt[c] && has_pred[c]});
      }
    }
    double map_t = active > 0 ? ap_sum / active : 0.0;
    map_sum_over_thresholds += map_t;
    if (t == thresholds.front()) m.map50 = map_t;
  }
  m.map5095 =
      thresholds.empty() ? 0.0 : map_sum_over_thresholds / double(thresholds.size());

  // precision / recall / F1 at the F1-maximizing score threshold, IoU = first
  // threshold (0.5 on the standard ladder), pooled over classes
  std::vector<std::pair<double, char>> marks;  // (score, is_tp)
  std::size_t total_gt = 0;
  double iou_thr = thresholds.empty() ? 0.5 : thresholds.front();
  for (int c = 0; c < num_classes; ++c) {
    if (!has_gt[c] && !has_pred[c]) continue;
    MatchedList ml = match_class(dets_per_image, gts_per_image, c, iou_thr);
    total_gt += ml.num_gt;
    for (std::size_t i = 0; i < ml.scores.size(); ++i) {
      marks.push_back({ml.scores[i], ml.is_tp[i]});
    }
  }
  std::sort(marks.begin(), marks.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });
  std::size_t tp = 0, fp = 0;
  double best_f1 = 0.0, best_p = 0.0, best_r = 0.0, best_thr = 1.0;
  for (std::size_t i = 0; i < marks.size(); ++i) {
    if (marks[i].second) {
      ++tp;
    } else {
      ++fp;
    }
    bool last_of_score = i + 1 == marks.size() || marks[i + 1].first != marks[i].first;
    if (!last_of_score) continue;
    double p = tp + fp > 0 ? double(tp) / double(tp + fp) : 0.0;
    double r = total_gt > 0 ? double(tp) / double(total_gt) : 0.0;
    double f1 = p + r > 0 ? 2.0 * p * r / (p + r) : 0.0;
    if (f1 > best_f1) {
      best_f1 = f1;
      best_p = p;
      best_r = r;
      best_thr = marks[i].first;
    }
  }
  m.precision = best_p;
  m.recall = best_r;
  m.f1 = best_f1;
  m.f1_threshold = best_thr;
  return m;
}

}  // namespace ehdk
