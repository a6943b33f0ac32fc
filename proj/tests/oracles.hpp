#pragma once

// Independent reference implementations used as test oracles. Everything here
// is deliberately written as plainly as possible and stays off the library's
// implementation paths.

#include <vector>

#include "ehdk/boxes.hpp"
#include "ehdk/ops.hpp"

namespace oracle {

// Naive seven-loop convolution; per-element accumulation order (ic, ky, kx).
ehdk::Tensor conv2d_naive(const ehdk::Tensor& x, const ehdk::ConvParams& p);

// Soft-NMS run to fixpoint with quadratic rescans.
std::vector<ehdk::Detection> soft_nms_reference(
    const std::vector<ehdk::Detection>& dets, const ehdk::SoftNmsConfig& cfg);

// Exhaustive AP/mAP reference.
struct RefMetrics {
  double map50 = 0.0;
  double map5095 = 0.0;
};
RefMetrics evaluate_map_reference(
    const std::vector<std::vector<ehdk::Detection>>& dets,
    const std::vector<std::vector<ehdk::GtBox>>& gts,
    const std::vector<double>& thresholds, int num_classes);

}  // namespace oracle
