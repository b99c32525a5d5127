#pragma once

// Two-stream inference: the region detector's top box becomes a mask that is
// multiplied into the regression heatmap before peak extraction; the top
// peak of every crown slice then feeds a 3D line fit that is intersected with
// the root slices.

#include <tsipr/core.hpp>
#include <tsipr/heatmap_codec.hpp>
#include <tsipr/ird.hpp>
#include <tsipr/mspenet.hpp>

#include <Eigen/Dense>
#include <json.hpp>
#include <torch/torch.h>

#include <chrono>
#include <optional>
#include <string>
#include <vector>

namespace tsipr {

// --- tensor bridge -------------------------------------------------------------

inline torch::Tensor image_to_tensor(const Image& img) {
  return torch::from_blob(const_cast<float*>(img.data()),
                          {1, static_cast<int64_t>(img.height()), static_cast<int64_t>(img.width())}, torch::kFloat32)
      .clone();
}

/// Antialiased bilinear resize of a [C, H, W] tensor to side x side.
inline torch::Tensor resize_square(const torch::Tensor& chw, int side) {
  namespace F = torch::nn::functional;
  if (chw.size(-1) == side && chw.size(-2) == side) return chw;
  return F::interpolate(chw.unsqueeze(0), F::InterpolateFuncOptions()
                                              .size(std::vector<int64_t>{side, side})
                                              .mode(torch::kBilinear)
                                              .align_corners(false)
                                              .antialias(true))
      .squeeze(0);
}

inline Grid<float> tensor_to_grid(const torch::Tensor& hw) {
  const auto t = hw.detach().to(torch::kFloat32).contiguous();
  if (t.dim() != 2) fail(ErrorKind::ShapeMismatch, "expected a 2D tensor");
  const auto h = static_cast<std::size_t>(t.size(0)), w = static_cast<std::size_t>(t.size(1));
  const auto* p = t.data_ptr<float>();
  return Grid<float>(h, w, std::vector<float>(p, p + h * w));
}

// --- space transformation ---------------------------------------------------------

struct Point3 {
  double x = 0.0, y = 0.0, z = 0.0;
};

struct ImplantLine {
  Point3 p0;
  Point3 d;  // unit length, d.z > 0

  Point3 at_z(double z) const {
    if (std::abs(d.z) < 1e-12) fail(ErrorKind::InvalidArgument, "implant line does not traverse slices (d_z = 0)");
    const double t = (z - p0.z) / d.z;
    return {p0.x + d.x * t, p0.y + d.y * t, z};
  }
};

/// Total-least-squares 3D line: centroid plus principal direction of the
/// centred point cloud, oriented crown -> root (d.z > 0).
inline ImplantLine fit_implant_line(std::span<const Point3> points, int min_points = 3) {
  if (static_cast<int>(points.size()) < min_points || points.size() < 2)
    fail(ErrorKind::TooFewPoints, "line fit needs at least " + std::to_string(min_points) + " points, got " +
                                      std::to_string(points.size()));
  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  for (const auto& p : points) centroid += Eigen::Vector3d(p.x, p.y, p.z);
  centroid /= static_cast<double>(points.size());
  Eigen::Matrix3d scatter = Eigen::Matrix3d::Zero();
  for (const auto& p : points) {
    const Eigen::Vector3d v = Eigen::Vector3d(p.x, p.y, p.z) - centroid;
    scatter += v * v.transpose();
  }
  if (scatter.trace() <= 1e-18) fail(ErrorKind::RankDeficient, "all line-fit points coincide");
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> solver(scatter);
  Eigen::Vector3d dir = solver.eigenvectors().col(2).normalized();
  if (std::abs(dir.z()) < 1e-12)
    fail(ErrorKind::RankDeficient, "fitted line lies within one slice; it never crosses the root slices");
  if (dir.z() < 0) dir = -dir;
  return {{centroid.x(), centroid.y(), centroid.z()}, {dir.x(), dir.y(), dir.z()}};
}

struct RootPrediction {
  std::vector<Point3> positions;
  ImplantLine line;
  std::vector<int> crown_slices;
};

inline RootPrediction project_to_root(const ImplantLine& line, std::span<const int> root_zs) {
  if (std::abs(line.d.z) < 1e-12) fail(ErrorKind::InvalidArgument, "implant line has d_z = 0");
  RootPrediction out;
  out.line = line;
  for (int z : root_zs) out.positions.push_back(line.at_z(static_cast<double>(z)));
  return out;
}

// --- fusion ------------------------------------------------------------------

struct FusedPeaks {
  std::vector<ScoredPoint> unfused;
  std::vector<ScoredPoint> fused;
};

inline FusedPeaks fuse_and_decode(const GaussianHeatmap& heatmap, const OffsetMap& offsets, const RoIMask& mask,
                                  const CodecConfig& codec) {
  return {decode_peaks(heatmap, offsets, codec), decode_masked_peaks(heatmap, mask, &offsets, codec)};
}

/// Where the region box for a slice comes from.
struct RegionSource {
  IRDNet* net = nullptr;
  const DetectionsByImage* external = nullptr;
  double conf_threshold = 0.05;
};

struct SliceInference {
  std::vector<ScoredPoint> unfused;  // original-image pixels
  std::vector<ScoredPoint> fused;
  std::optional<DetBox> box;         // original-image pixels
};

/// Top region box for one slice in original-image pixels, or nothing.
inline std::optional<DetBox> region_box(const Image& image, const std::string& image_id, const RegionSource& ird) {
  const double orig = static_cast<double>(image.width());
  if (ird.external) {
    auto it = ird.external->find(image_id);
    if (it == ird.external->end()) return std::nullopt;
    return select_top_box(it->second, ird.conf_threshold);
  }
  if (!ird.net) return std::nullopt;
  auto& net = *ird.net;
  const int side = net->config().input_size;
  const auto boxes = detector_forward(net, resize_square(image_to_tensor(image), side));
  auto top = select_top_box(boxes, ird.conf_threshold);
  if (!top) return std::nullopt;
  const double s = orig / side;
  top->x1 = std::clamp(top->x1 * s, 0.0, orig);
  top->x2 = std::clamp(top->x2 * s, 0.0, orig);
  top->y1 = std::clamp(top->y1 * s, 0.0, static_cast<double>(image.height()));
  top->y2 = std::clamp(top->y2 * s, 0.0, static_cast<double>(image.height()));
  if (!(top->x1 < top->x2 && top->y1 < top->y2)) return std::nullopt;
  return top;
}

struct HeatmapOutput {
  GaussianHeatmap heatmap;
  OffsetMap offsets;
};

inline HeatmapOutput run_mspenet(MSPENet& net, const Image& image) {
  torch::NoGradGuard guard;
  const int side = net->config().input_size;
  const auto pred = net->forward(resize_square(image_to_tensor(image), side));
  HeatmapOutput out;
  out.heatmap = tensor_to_grid(pred.heatmap[0][0]);
  out.offsets.dx = tensor_to_grid(pred.offsets[0][0]);
  out.offsets.dy = tensor_to_grid(pred.offsets[0][1]);
  return out;
}

inline SliceInference tsipr_infer_slice(const Image& image, const std::string& image_id, MSPENet& net,
                                        const RegionSource& ird, const CodecConfig& codec) {
  if (image.height() != image.width()) fail(ErrorKind::ShapeMismatch, "slices must be square");
  const auto hm = run_mspenet(net, image);
  const double orig = static_cast<double>(image.width());
  const int side = net->config().input_size;
  SliceInference out;
  out.box = region_box(image, image_id, ird);
  const auto mask = box_to_roi_mask(out.box, {hm.heatmap.height(), hm.heatmap.width()},
                                    (static_cast<double>(side) / orig) / codec.g);
  auto peaks = fuse_and_decode(hm.heatmap, hm.offsets, mask, codec);
  const double back = orig / side;
  for (auto* list : {&peaks.unfused, &peaks.fused})
    for (auto& p : *list) {
      p.x *= back;
      p.y *= back;
    }
  out.unfused = std::move(peaks.unfused);
  out.fused = std::move(peaks.fused);
  return out;
}

struct InferenceConfig {
  CodecConfig codec;
  bool use_fusion = true;
  int min_points = 3;
};

struct CrownSliceResult {
  int z = 0;
  std::vector<ScoredPoint> unfused;
  std::vector<ScoredPoint> fused;
  std::optional<DetBox> box;
};

struct PatientPrediction {
  std::string patient_id;
  std::vector<CrownSliceResult> crown;
  std::optional<RootPrediction> root;
  std::string failure;
  double elapsed_ms = 0.0;

  const std::vector<ScoredPoint>& peaks(const CrownSliceResult& s, bool fused) const {
    return fused ? s.fused : s.unfused;
  }
};

inline std::string slice_image_id(const std::string& patient_id, int z) {
  return patient_id + "/slice_" + std::to_string(z);
}

inline PatientPrediction tsipr_infer_patient(const CrownSliceStack& stack, MSPENet& net, const RegionSource& ird,
                                             const InferenceConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  validate_stack(stack);
  PatientPrediction out;
  out.patient_id = stack.patient_id;
  std::vector<Point3> points;
  for (int z : stack.crown_z) {
    const Image* img = stack.slice_at(z);
    if (!img) fail(ErrorKind::InvalidArgument, "crown slice " + std::to_string(z) + " missing from stack");
    auto res = tsipr_infer_slice(*img, slice_image_id(stack.patient_id, z), net, ird, cfg.codec);
    CrownSliceResult slice{z, std::move(res.unfused), std::move(res.fused), res.box};
    const auto& used = cfg.use_fusion ? slice.fused : slice.unfused;
    if (!used.empty()) points.push_back({used.front().x, used.front().y, static_cast<double>(z)});
    out.crown.push_back(std::move(slice));
  }
  try {
    auto line = fit_implant_line(points, cfg.min_points);
    auto root = project_to_root(line, stack.root_z);
    for (const auto& p : points) root.crown_slices.push_back(static_cast<int>(p.z));
    out.root = std::move(root);
  } catch (const Error& e) {
    out.failure = e.what();
  }
  out.elapsed_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return out;
}

// --- prediction files ------------------------------------------------------------

inline nlohmann::json to_json(const PatientPrediction& p) {
  using nlohmann::json;
  auto peaks_json = [](const std::vector<ScoredPoint>& v) {
    json a = json::array();
    for (const auto& s : v) a.push_back({s.x, s.y, s.score});
    return a;
  };
  json crown = json::array();
  for (const auto& s : p.crown) {
    json e{{"z", s.z}, {"fused", peaks_json(s.fused)}, {"unfused", peaks_json(s.unfused)}};
    if (s.box) e["box"] = {s.box->x1, s.box->y1, s.box->x2, s.box->y2, s.box->confidence};
    else e["box"] = nullptr;
    crown.push_back(e);
  }
  json j{{"patient_id", p.patient_id}, {"crown", crown}, {"elapsed_ms", p.elapsed_ms}};
  if (p.root) {
    const auto& l = p.root->line;
    j["line"] = {{"p0", {l.p0.x, l.p0.y, l.p0.z}}, {"d", {l.d.x, l.d.y, l.d.z}}};
    json root = json::array();
    for (const auto& q : p.root->positions) root.push_back({{"x", q.x}, {"y", q.y}, {"z", q.z}});
    j["root"] = root;
    j["crown_slices_used"] = p.root->crown_slices;
  } else {
    j["line"] = nullptr;
    j["root"] = json::array();
  }
  if (!p.failure.empty()) j["failure"] = p.failure;
  return j;
}

inline PatientPrediction prediction_from_json(const nlohmann::json& j) {
  PatientPrediction p;
  p.patient_id = j.at("patient_id").get<std::string>();
  p.elapsed_ms = j.value("elapsed_ms", 0.0);
  auto peaks = [](const nlohmann::json& a) {
    std::vector<ScoredPoint> v;
    for (const auto& e : a) v.push_back({e.at(0).get<double>(), e.at(1).get<double>(), e.at(2).get<double>()});
    return v;
  };
  for (const auto& e : j.at("crown")) {
    CrownSliceResult s;
    s.z = e.at("z").get<int>();
    s.fused = peaks(e.at("fused"));
    s.unfused = peaks(e.at("unfused"));
    if (e.contains("box") && !e["box"].is_null()) {
      const auto& b = e["box"];
      s.box = DetBox{b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>(),
                     b.at(4).get<double>(), 1.0};
    }
    p.crown.push_back(std::move(s));
  }
  if (j.contains("line") && !j["line"].is_null()) {
    RootPrediction r;
    const auto& l = j["line"];
    r.line.p0 = {l["p0"][0].get<double>(), l["p0"][1].get<double>(), l["p0"][2].get<double>()};
    r.line.d = {l["d"][0].get<double>(), l["d"][1].get<double>(), l["d"][2].get<double>()};
    for (const auto& q : j.at("root"))
      r.positions.push_back({q.at("x").get<double>(), q.at("y").get<double>(), q.at("z").get<double>()});
    r.crown_slices = j.value("crown_slices_used", std::vector<int>{});
    p.root = std::move(r);
  }
  p.failure = j.value("failure", std::string{});
  return p;
}

}  // namespace tsipr
