#pragma once

// Point-detection metrics. Predicted and true points are turned into squares
// of the implant diameter and matched by IoU; precision/recall are swept over
// score thresholds and AP is the area under the precision envelope.

#include <tsipr/core.hpp>
#include <tsipr/boxes.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

namespace tsipr {

struct EvalConfig {
  double iou_threshold = 0.75;
  double implant_diameter_px = 25.0;
  std::vector<double> score_sweep{0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};

  void validate() const {
    if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) fail(ErrorKind::Config, "iou_threshold must lie in (0,1]");
    if (!(implant_diameter_px > 0.0)) fail(ErrorKind::Config, "implant_diameter_px must be > 0");
    for (double t : score_sweep)
      if (!(t > 0.0 && t <= 1.0)) fail(ErrorKind::Config, "score sweep thresholds must lie in (0,1]");
    if (!std::is_sorted(score_sweep.begin(), score_sweep.end()))
      fail(ErrorKind::Config, "score sweep must be ascending");
  }
};

inline DetBox point_to_box(Point2 p, double diameter_px) {
  if (!(diameter_px > 0.0) || !std::isfinite(diameter_px))
    fail(ErrorKind::InvalidArgument, "point_to_box needs a positive diameter");
  const double r = diameter_px / 2.0;
  return {p.x - r, p.y - r, p.x + r, p.y + r, 1.0, 1.0};
}

struct Match {
  std::size_t pred = 0;
  std::size_t gt = 0;
  double iou = 0.0;
  double distance_px = 0.0;
};

struct MatchResult {
  int tp = 0;
  int fp = 0;
  int fn = 0;
  std::vector<Match> matches;
  /// Indexed like the input predictions.
  std::vector<bool> pred_is_tp;
};

/// Greedy one-to-one matching in descending score order; each prediction
/// takes the unmatched ground truth with the highest IoU at or above the
/// threshold. Equal scores keep their input order.
inline MatchResult match_predictions(std::span<const ScoredPoint> preds, std::span<const Point2> gts,
                                     const EvalConfig& cfg) {
  cfg.validate();
  std::vector<std::size_t> order(preds.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return preds[a].score > preds[b].score; });

  std::vector<DetBox> gt_boxes;
  gt_boxes.reserve(gts.size());
  for (const auto& g : gts) gt_boxes.push_back(point_to_box(g, cfg.implant_diameter_px));

  MatchResult out;
  out.pred_is_tp.assign(preds.size(), false);
  std::vector<bool> taken(gts.size(), false);
  for (std::size_t idx : order) {
    const auto pbox = point_to_box({preds[idx].x, preds[idx].y}, cfg.implant_diameter_px);
    double best_iou = -1.0;
    std::size_t best = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g]) continue;
      const double v = iou(pbox, gt_boxes[g]);
      if (v >= cfg.iou_threshold && v > best_iou) {
        best_iou = v;
        best = g;
      }
    }
    if (best == gts.size()) {
      ++out.fp;
      continue;
    }
    taken[best] = true;
    out.pred_is_tp[idx] = true;
    ++out.tp;
    out.matches.push_back({idx, best, best_iou, std::hypot(preds[idx].x - gts[best].x, preds[idx].y - gts[best].y)});
  }
  out.fn = static_cast<int>(gts.size()) - out.tp;
  return out;
}

struct ImageDetections {
  std::vector<ScoredPoint> preds;
  std::vector<Point2> gts;
};

struct PRPoint {
  double threshold = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  int tp = 0;
  int fp = 0;
};

struct PRResult {
  /// One point per distinct score, highest threshold first.
  std::vector<PRPoint> curve;
  /// Points at the configured sweep thresholds.
  std::vector<PRPoint> sweep;
  double ap = 0.0;
  double best_f1 = 0.0;
  int total_gt = 0;
  std::vector<Match> matches;  // pred indices refer to the flattened prediction list
};

inline double f1_score(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

/// All-points interpolated AP over a recall-ordered curve.
inline double envelope_ap(std::vector<double> recall, std::vector<double> precision) {
  recall.insert(recall.begin(), 0.0);
  precision.insert(precision.begin(), precision.empty() ? 0.0 : precision.front());
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0;
  for (std::size_t i = 1; i < recall.size(); ++i) ap += (recall[i] - recall[i - 1]) * precision[i];
  return ap;
}

inline PRResult pr_curve_and_ap(std::span<const ImageDetections> images, const EvalConfig& cfg) {
  cfg.validate();
  struct Scored {
    double score;
    bool tp;
  };
  std::vector<Scored> all;
  PRResult out;
  std::size_t flat_offset = 0;
  for (const auto& img : images) {
    out.total_gt += static_cast<int>(img.gts.size());
    const auto m = match_predictions(img.preds, img.gts, cfg);
    for (std::size_t i = 0; i < img.preds.size(); ++i) all.push_back({img.preds[i].score, m.pred_is_tp[i]});
    for (auto mm : m.matches) {
      mm.pred += flat_offset;
      out.matches.push_back(mm);
    }
    flat_offset += img.preds.size();
  }
  if (out.total_gt == 0) fail(ErrorKind::InvalidArgument, "AP needs at least one ground-truth point");

  std::stable_sort(all.begin(), all.end(), [](const Scored& a, const Scored& b) { return a.score > b.score; });
  std::vector<double> rec, prec;
  int tp = 0, fp = 0;
  for (std::size_t i = 0; i < all.size();) {
    const double s = all[i].score;
    for (; i < all.size() && all[i].score == s; ++i) (all[i].tp ? tp : fp) += 1;
    PRPoint pt;
    pt.threshold = s;
    pt.tp = tp;
    pt.fp = fp;
    pt.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    pt.recall = static_cast<double>(tp) / static_cast<double>(out.total_gt);
    pt.f1 = f1_score(pt.precision, pt.recall);
    out.best_f1 = std::max(out.best_f1, pt.f1);
    out.curve.push_back(pt);
    rec.push_back(pt.recall);
    prec.push_back(pt.precision);
  }
  out.ap = envelope_ap(rec, prec);

  for (double t : cfg.score_sweep) {
    PRPoint pt;
    pt.threshold = t;
    for (const auto& s : all) {
      if (s.score < t) break;
      (s.tp ? pt.tp : pt.fp) += 1;
    }
    pt.precision = pt.tp + pt.fp > 0 ? static_cast<double>(pt.tp) / (pt.tp + pt.fp) : 1.0;
    pt.recall = static_cast<double>(pt.tp) / out.total_gt;
    pt.f1 = pt.tp > 0 ? f1_score(pt.precision, pt.recall) : 0.0;
    out.sweep.push_back(pt);
  }
  return out;
}

inline double mean_radial_error(std::span<const Match> matches) {
  if (matches.empty()) fail(ErrorKind::InvalidArgument, "mean radial error needs at least one match");
  double sum = 0.0;
  for (const auto& m : matches) sum += m.distance_px;
  return sum / static_cast<double>(matches.size());
}

inline void write_pr_csv(const std::string& path, const PRResult& pr) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Io, "cannot write " + path);
  out << "threshold,precision,recall,f1,tp,fp\n";
  out.precision(10);
  for (const auto& p : pr.curve)
    out << p.threshold << ',' << p.precision << ',' << p.recall << ',' << p.f1 << ',' << p.tp << ',' << p.fp << '\n';
}

/// Minimal standalone SVG plot of one or more PR curves.
inline void write_pr_svg(const std::string& path, const std::vector<std::pair<std::string, const PRResult*>>& curves) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Io, "cannot write " + path);
  const double size = 400.0, pad = 40.0;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size + 2 * pad << "\" height=\"" << size + 2 * pad
      << "\">\n";
  out << "<rect x=\"" << pad << "\" y=\"" << pad << "\" width=\"" << size << "\" height=\"" << size
      << "\" fill=\"none\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << pad << "\" y1=\"" << pad + size << "\" x2=\"" << pad + size << "\" y2=\"" << pad
      << "\" stroke=\"gray\" stroke-dasharray=\"4\"/>\n";
  out << "<text x=\"" << pad + size / 2 << "\" y=\"" << size + 2 * pad - 8 << "\">recall</text>\n";
  out << "<text x=\"4\" y=\"" << pad - 10 << "\">precision</text>\n";
  const char* colors[] = {"#d62728", "#1f77b4", "#2ca02c", "#9467bd"};
  std::size_t k = 0;
  for (const auto& [label, pr] : curves) {
    const char* color = colors[k % 4];
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (const auto& p : pr->curve) out << pad + p.recall * size << ',' << pad + (1.0 - p.precision) * size << ' ';
    out << "\"/>\n";
    out << "<text x=\"" << pad + 10 << "\" y=\"" << pad + 20 + 16 * k << "\" fill=\"" << color << "\">" << label
        << " AP=" << pr->ap << " F1=" << pr->best_f1 << "</text>\n";
    ++k;
  }
  out << "</svg>\n";
}

}  // namespace tsipr
