#pragma once

#include <vector>

#include "ehdk/common.hpp"

namespace ehdk {

struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  bool valid() const;
};

struct Detection {
  Box box;
  int class_id = 0;
  double score = 0.0;
};

struct GtBox {
  Box box;
  int class_id = 0;
};

double iou(const Box& a, const Box& b);
double giou(const Box& a, const Box& b);
double giou_loss(const Box& a, const Box& b);

// giou plus its derivative with respect to a's four coordinates
// (x1, y1, x2, y2), subgradients at ties. b is treated as constant.
double giou_with_grad(const Box& a, const Box& b, double grad_a[4]);

struct SoftNmsConfig {
  double theta = 0.5;        // IoU overlap threshold
  double score_floor = 1e-3; // boxes below this score are dropped
  bool per_class = true;
  bool hard = false;         // replaces the decay factor by 0 (classical NMS)
};

// Iterative rescoring: repeatedly select the highest-scoring remaining box
// (ties: earlier input index); every other box with IoU >= theta against it
// is rescaled by (1 - IoU)^2 (or zeroed in hard mode). Selected boxes are
// emitted in selection order; geometry is never modified.
std::vector<Detection> soft_nms(const std::vector<Detection>& dets,
                                const SoftNmsConfig& cfg);

// --- training-target assignment --------------------------------------------

struct CellTarget {
  bool positive = false;
  int class_id = -1;
  Box box;            // ground-truth box, pixel units
  double area = 0.0;  // used for collision resolution
};

struct TargetScale {
  int stride = 0;
  int grid_h = 0;
  int grid_w = 0;
  std::vector<CellTarget> cells;  // row-major grid

  CellTarget& at(int row, int col) { return cells[row * grid_w + col]; }
  const CellTarget& at(int row, int col) const {
    return cells[row * grid_w + col];
  }
};

struct TargetGrids {
  std::vector<TargetScale> scales;
  int num_positive = 0;
};

// Assigns each ground truth to the center cell of the scale whose stride is
// nearest to sqrt(w*h) (ties toward the smaller stride). Collisions keep the
// larger-area box. GTs outside the image raise ValidationError naming the
// offending index.
TargetGrids assign_targets(int image_h, int image_w,
                           const std::vector<GtBox>& gts,
                           const std::vector<int>& strides);

// --- detection evaluation ---------------------------------------------------

struct ClassAP {
  int class_id = 0;
  double ap = 0.0;
  bool no_gt = false;  // predictions exist but the class has no ground truth
};

struct MapMetrics {
  double map50 = 0.0;
  double map5095 = 0.0;
  double precision = 0.0;  // at the F1-optimal score threshold, IoU 0.5
  double recall = 0.0;
  double f1 = 0.0;
  double f1_threshold = 0.0;
  std::vector<ClassAP> per_class_ap50;
};

// Greedy score-ordered matching per class per IoU threshold, all-point
// interpolated AP, mAP averaged over classes that have ground truth or
// predictions. Detections are canonically ordered by (score desc, box
// coordinates, class), so results are invariant to input permutations.
MapMetrics evaluate_map(const std::vector<std::vector<Detection>>& dets_per_image,
                        const std::vector<std::vector<GtBox>>& gts_per_image,
                        const std::vector<double>& thresholds, int num_classes);

// The 0.50:0.05:0.95 ladder used for mAP@0.5:0.95.
std::vector<double> coco_thresholds();

}  // namespace ehdk
