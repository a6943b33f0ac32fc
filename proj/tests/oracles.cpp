#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

namespace oracle {

using ehdk::Box;
using ehdk::Detection;
using ehdk::GtBox;
using ehdk::Tensor;

Tensor conv2d_naive(const Tensor& x, const ehdk::ConvParams& p) {
  int n = x.n(), in_h = x.h(), in_w = x.w();
  int oc_total = p.out_channels();
  int icg = p.weight.c();
  int ocg = oc_total / p.groups;
  int oh = (in_h + 2 * p.padding - p.kh()) / p.stride + 1;
  int ow = (in_w + 2 * p.padding - p.kw()) / p.stride + 1;
  Tensor out(n, oc_total, oh, ow);
  for (int in = 0; in < n; ++in) {
    for (int oc = 0; oc < oc_total; ++oc) {
      int g = oc / ocg;
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          double acc = p.bias.defined() ? p.bias.at(0, oc, 0, 0) : 0.0;
          for (int icl = 0; icl < icg; ++icl) {
            for (int ky = 0; ky < p.kh(); ++ky) {
              for (int kx = 0; kx < p.kw(); ++kx) {
                int iy = oy * p.stride - p.padding + ky;
                int ix = ox * p.stride - p.padding + kx;
                if (iy < 0 || iy >= in_h || ix < 0 || ix >= in_w) continue;
                acc += p.weight.at(oc, icl, ky, kx) *
                       x.at(in, g * icg + icl, iy, ix);
              }
            }
          }
          out.at(in, oc, oy, ox) = acc;
        }
      }
    }
  }
  return out;
}

std::vector<Detection> soft_nms_reference(const std::vector<Detection>& dets,
                                          const ehdk::SoftNmsConfig& cfg) {
  // split per class when configured, then run the textbook loop per pool
  auto run_pool = [&](std::vector<std::pair<Detection, std::size_t>> pool) {
    std::vector<Detection> picked;
    // discard anything already under the floor
    std::vector<std::pair<Detection, std::size_t>> alive;
    for (auto& e : pool) {
      if (e.first.score >= cfg.score_floor) alive.push_back(e);
    }
    while (!alive.empty()) {
      std::size_t best = 0;
      for (std::size_t i = 1; i < alive.size(); ++i) {
        if (alive[i].first.score > alive[best].first.score ||
            (alive[i].first.score == alive[best].first.score &&
             alive[i].second < alive[best].second)) {
          best = i;
        }
      }
      Detection chosen = alive[best].first;
      picked.push_back(chosen);
      alive.erase(alive.begin() + best);
      std::vector<std::pair<Detection, std::size_t>> next;
      for (auto& e : alive) {
        double ov = ehdk::iou(e.first.box, chosen.box);
        if (ov >= cfg.theta) {
          double f = cfg.hard ? 0.0 : (1.0 - ov) * (1.0 - ov);
          e.first.score *= f;
        }
        if (e.first.score >= cfg.score_floor) next.push_back(e);
      }
      alive = next;
    }
    return picked;
  };

  if (!cfg.per_class) {
    std::vector<std::pair<Detection, std::size_t>> pool;
    for (std::size_t i = 0; i < dets.size(); ++i) pool.push_back({dets[i], i});
    return run_pool(pool);
  }
  int max_class = -1;
  for (const Detection& d : dets) max_class = std::max(max_class, d.class_id);
  std::vector<Detection> out;
  for (int c = 0; c <= max_class; ++c) {
    std::vector<std::pair<Detection, std::size_t>> pool;
    for (std::size_t i = 0; i < dets.size(); ++i) {
      if (dets[i].class_id == c) pool.push_back({dets[i], i});
    }
    auto kept = run_pool(pool);
    out.insert(out.end(), kept.begin(), kept.end());
  }
  return out;
}

namespace {

struct RefDet {
  int image;
  Box box;
  double score;
};

double class_ap(const std::vector<std::vector<Detection>>& dets,
                const std::vector<std::vector<GtBox>>& gts, int cls,
                double thr) {
  std::vector<RefDet> flat;
  std::size_t num_gt = 0;
  for (std::size_t img = 0; img < dets.size(); ++img) {
    for (const Detection& d : dets[img]) {
      if (d.class_id == cls) flat.push_back({int(img), d.box, d.score});
    }
  }
  for (std::size_t img = 0; img < gts.size(); ++img) {
    for (const GtBox& g : gts[img]) {
      if (g.class_id == cls) ++num_gt;
    }
  }
  if (num_gt == 0) return 0.0;
  std::sort(flat.begin(), flat.end(), [](const RefDet& a, const RefDet& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.box.x1 != b.box.x1) return a.box.x1 < b.box.x1;
    if (a.box.y1 != b.box.y1) return a.box.y1 < b.box.y1;
    if (a.box.x2 != b.box.x2) return a.box.x2 < b.box.x2;
    if (a.box.y2 != b.box.y2) return a.box.y2 < b.box.y2;
    return a.image < b.image;
  });
  std::map<int, std::vector<GtBox>> gt_of_image;
  for (std::size_t img = 0; img < gts.size(); ++img) {
    for (const GtBox& g : gts[img]) {
      if (g.class_id == cls) gt_of_image[int(img)].push_back(g);
    }
  }
  std::map<int, std::vector<bool>> taken;
  for (auto& [img, v] : gt_of_image) taken[img].assign(v.size(), false);

  std::vector<double> mono_scores, recalls, precisions;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < flat.size(); ++i) {
    const RefDet& d = flat[i];
    int match = -1;
    double best = 0.0;
    auto it = gt_of_image.find(d.image);
    if (it != gt_of_image.end()) {
      for (std::size_t k = 0; k < it->second.size(); ++k) {
        if (taken[d.image][k]) continue;
        double ov = ehdk::iou(d.box, it->second[k].box);
        if (ov > best) {
          best = ov;
          match = int(k);
        }
      }
    }
    if (match >= 0 && best >= thr) {
      taken[d.image][match] = true;
      ++tp;
    } else {
      ++fp;
    }
    bool boundary = i + 1 == flat.size() || flat[i + 1].score != d.score;
    if (boundary) {
      recalls.push_back(double(tp) / double(num_gt));
      precisions.push_back(double(tp) / double(tp + fp));
    }
  }
  double ap = 0.0, prev = 0.0;
  for (std::size_t i = 0; i < recalls.size(); ++i) {
    double env = 0.0;
    for (std::size_t j = i; j < precisions.size(); ++j) env = std::max(env, precisions[j]);
    ap += (recalls[i] - prev) * env;
    prev = recalls[i];
  }
  return ap;
}

}  // namespace

RefMetrics evaluate_map_reference(
    const std::vector<std::vector<Detection>>& dets,
    const std::vector<std::vector<GtBox>>& gts,
    const std::vector<double>& thresholds, int num_classes) {
  std::set<int> active;
  for (const auto& v : gts) {
    for (const GtBox& g : v) active.insert(g.class_id);
  }
  for (const auto& v : dets) {
    for (const Detection& d : v) active.insert(d.class_id);
  }
  active.erase(active.lower_bound(num_classes), active.end());
  RefMetrics rm;
  if (active.empty() || thresholds.empty()) return rm;
  double total = 0.0;
  for (double t : thresholds) {
    double s = 0.0;
    for (int c : active) s += class_ap(dets, gts, c, t);
    double m = s / double(active.size());
    if (t == thresholds.front()) rm.map50 = m;
    total += m;
  }
  rm.map5095 = total / double(thresholds.size());
  return rm;
}

}  // namespace oracle
