#pragma once

// Scalar box overlap measures shared by the detector, the losses and the
// point-detection metrics.

#include <tsipr/core.hpp>

#include <algorithm>

namespace tsipr {

inline double iou(const DetBox& a, const DetBox& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

inline double giou(const DetBox& a, const DetBox& b) {
  if (!(a.x1 < a.x2 && a.y1 < a.y2) || !(b.x1 < b.x2 && b.y1 < b.y2))
    fail(ErrorKind::DegenerateBox, "giou requires boxes with positive area");
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  const double hull = (std::max(a.x2, b.x2) - std::min(a.x1, b.x1)) * (std::max(a.y2, b.y2) - std::min(a.y1, b.y1));
  return inter / uni - (hull - uni) / hull;
}

inline double giou_loss(const DetBox& a, const DetBox& b) { return 1.0 - giou(a, b); }

}  // namespace tsipr
