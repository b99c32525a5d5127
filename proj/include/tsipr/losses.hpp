#pragma once

// Training objectives for both streams. Tensor losses are written in plain
// torch ops so autograd supplies the gradients; the scalar GIoU below is the
// reference used by box-level code and tests.

#include <tsipr/boxes.hpp>
#include <tsipr/core.hpp>

#include <torch/torch.h>

#include <algorithm>
#include <sstream>

namespace tsipr {

struct FocalParams {
  double alpha = 2.0;
  double beta = 4.0;

  void validate() const {
    if (!(alpha > 0.0) || !(beta > 0.0)) fail(ErrorKind::InvalidArgument, "focal alpha and beta must be > 0");
  }
};

inline constexpr double kProbEps = 1e-6;

namespace detail {
inline void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) {
    std::ostringstream oss;
    oss << what << ": " << a.sizes() << " vs " << b.sizes();
    fail(ErrorKind::ShapeMismatch, oss.str());
  }
}
}  // namespace detail

/// Penalty-reduced focal loss over a Gaussian target. Cells where the target
/// equals exactly 1 are positives; N is their count.
inline torch::Tensor focal_heatmap_loss(const torch::Tensor& pred, const torch::Tensor& target,
                                        const FocalParams& params = {}) {
  params.validate();
  detail::require_same_shape(pred, target, "focal loss");
  const auto pos = target.eq(1.0);
  const auto n = pos.sum().item<int64_t>();
  if (n == 0) fail(ErrorKind::NoPositiveCells, "focal loss target has no cell equal to 1");

  const auto p = pred.clamp(kProbEps, 1.0 - kProbEps);
  const auto pos_f = pos.to(pred.scalar_type());
  const auto pos_term = torch::pow(1.0 - p, params.alpha) * torch::log(p) * pos_f;
  const auto neg_term =
      torch::pow(1.0 - target, params.beta) * torch::pow(p, params.alpha) * torch::log(1.0 - p) * (1.0 - pos_f);
  return -(pos_term.sum() + neg_term.sum()) / static_cast<double>(n);
}

/// Mean absolute offset error over positive cells (both channels averaged).
/// pred/target: [B, 2, h, w]; pos_mask: [B, 1, h, w] or [B, h, w].
inline torch::Tensor offset_l1_loss(const torch::Tensor& pred, const torch::Tensor& target,
                                    const torch::Tensor& pos_mask) {
  detail::require_same_shape(pred, target, "offset loss");
  auto mask = pos_mask.to(pred.scalar_type());
  if (mask.dim() == pred.dim() - 1) mask = mask.unsqueeze(1);
  if (mask.size(0) != pred.size(0) || mask.size(-1) != pred.size(-1) || mask.size(-2) != pred.size(-2))
    fail(ErrorKind::ShapeMismatch, "offset loss: mask does not align with predictions");
  const auto n = mask.sum().item<double>();
  if (n <= 0.0) fail(ErrorKind::NoPositiveCells, "offset loss has no positive cells");
  const auto expanded = mask.expand_as(pred);
  return ((pred - target).abs() * expanded).sum() / (n * static_cast<double>(pred.size(1)));
}

struct HeatmapPrediction {
  torch::Tensor heatmap;  // [B, 1, h, w], sigmoid-activated
  torch::Tensor offsets;  // [B, 2, h, w]
};

struct HeatmapTargets {
  torch::Tensor heatmap;   // [B, 1, h, w]
  torch::Tensor offsets;   // [B, 2, h, w]
  torch::Tensor pos_mask;  // [B, 1, h, w]
};

inline torch::Tensor mspenet_loss(const HeatmapPrediction& pred, const HeatmapTargets& target,
                                  const FocalParams& params = {}) {
  return focal_heatmap_loss(pred.heatmap, target.heatmap, params) +
         offset_l1_loss(pred.offsets, target.offsets, target.pos_mask);
}

// --- boxes -----------------------------------------------------------------

/// Row-wise GIoU of [N, 4] boxes in (x1, y1, x2, y2) layout.
inline torch::Tensor giou_tensor(const torch::Tensor& a, const torch::Tensor& b) {
  detail::require_same_shape(a, b, "giou");
  const auto ax1 = a.select(-1, 0), ay1 = a.select(-1, 1), ax2 = a.select(-1, 2), ay2 = a.select(-1, 3);
  const auto bx1 = b.select(-1, 0), by1 = b.select(-1, 1), bx2 = b.select(-1, 2), by2 = b.select(-1, 3);
  const auto area_a = (ax2 - ax1).clamp_min(0) * (ay2 - ay1).clamp_min(0);
  const auto area_b = (bx2 - bx1).clamp_min(0) * (by2 - by1).clamp_min(0);
  const auto iw = (torch::min(ax2, bx2) - torch::max(ax1, bx1)).clamp_min(0);
  const auto ih = (torch::min(ay2, by2) - torch::max(ay1, by1)).clamp_min(0);
  const auto inter = iw * ih;
  const auto uni = area_a + area_b - inter;
  const auto hull = (torch::max(ax2, bx2) - torch::min(ax1, bx1)) * (torch::max(ay2, by2) - torch::min(ay1, by1));
  constexpr double eps = 1e-9;
  return inter / (uni + eps) - (hull - uni) / (hull + eps);
}

/// Per-cell targets for the region detector head ([B, h, w] grids).
struct IrdTargets {
  torch::Tensor pos;    // bool [B, h, w]
  torch::Tensor boxes;  // [B, h, w, 4], meaningful at positive cells
};

struct IrdLossParts {
  torch::Tensor cls;
  torch::Tensor loc;
  torch::Tensor conf;
  torch::Tensor total() const { return cls + loc + conf; }
};

/// Classification cross-entropy and GIoU loss on positive cells, confidence
/// cross-entropy on every cell, summed without weights.
inline IrdLossParts ird_loss_parts(const torch::Tensor& cls_logits, const torch::Tensor& boxes,
                                   const torch::Tensor& conf_logits, const IrdTargets& targets) {
  detail::require_same_shape(cls_logits, conf_logits, "ird cls/conf");
  detail::require_same_shape(boxes, targets.boxes, "ird boxes");
  if (targets.pos.sizes() != cls_logits.sizes()) fail(ErrorKind::ShapeMismatch, "ird positive mask shape");

  const auto pos = targets.pos.to(torch::kBool);
  const auto pos_f = pos.to(conf_logits.scalar_type());
  IrdLossParts parts;
  const auto n = pos.sum().item<int64_t>();
  // Summed over cells and normalised by the positive count; a plain mean
  // would give the lone positive cell a weight of 1/(h*w).
  parts.conf = torch::binary_cross_entropy_with_logits(conf_logits, pos_f, {}, {}, torch::Reduction::Sum) /
               static_cast<double>(std::max<int64_t>(1, n));
  if (n == 0) {
    parts.cls = cls_logits.sum() * 0.0;
    parts.loc = boxes.sum() * 0.0;
    return parts;
  }
  const auto cls_pos = cls_logits.masked_select(pos);
  parts.cls = torch::binary_cross_entropy_with_logits(cls_pos, torch::ones_like(cls_pos));
  const auto pos4 = pos.unsqueeze(-1).expand_as(boxes);
  const auto pb = boxes.masked_select(pos4).view({-1, 4});
  const auto tb = targets.boxes.masked_select(pos4).view({-1, 4});
  parts.loc = (1.0 - giou_tensor(pb, tb)).mean();
  return parts;
}

inline torch::Tensor ird_loss(const torch::Tensor& cls_logits, const torch::Tensor& boxes,
                              const torch::Tensor& conf_logits, const IrdTargets& targets) {
  return ird_loss_parts(cls_logits, boxes, conf_logits, targets).total();
}

}  // namespace tsipr
