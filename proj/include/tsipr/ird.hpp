#pragma once

// Implant region detector stream. Labels are 128 px squares grown around the
// point annotations; the detector is a compact anchor-free network over a /8
// grid; only its single most confident box reaches the fusion step.

#include <tsipr/core.hpp>
#include <tsipr/losses.hpp>

#include <json.hpp>
#include <torch/torch.h>

#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

namespace tsipr {

struct IRDConfig {
  int input_size = 640;
  double conf_threshold = 0.05;
  int width = 16;
  int depth = 1;
  int extended_side = 128;
  /// Box size prior in detector-input pixels; the size head regresses log-ratios to it.
  double box_prior = 128.0 * 640.0 / 776.0;
  double min_extent = 1.0;

  static constexpr int kStride = 8;

  void validate() const {
    if (input_size <= 0 || input_size % 32 != 0) fail(ErrorKind::Config, "ird input_size must be divisible by 32");
    if (width < 1 || depth < 0) fail(ErrorKind::Config, "ird width/depth out of range");
    if (!(conf_threshold >= 0.0 && conf_threshold <= 1.0)) fail(ErrorKind::Config, "ird conf_threshold not in [0,1]");
    if (extended_side < 1 || !(box_prior > 0.0)) fail(ErrorKind::Config, "ird box sizes must be positive");
  }
};

struct ExtendedBoxLabel {
  DetBox box;
  ImplantAnnotation source_annotation;
};

inline ExtendedBoxLabel make_extended_box(const ImplantAnnotation& ann, ImageSize image_size, int side = 128) {
  if (!in_bounds(ann, image_size)) fail(ErrorKind::OutOfBounds, "annotation outside image for extended box");
  const double half = side / 2.0;
  DetBox box;
  box.x1 = std::max(0.0, ann.x - half);
  box.y1 = std::max(0.0, ann.y - half);
  box.x2 = std::min(static_cast<double>(image_size.width), ann.x + half);
  box.y2 = std::min(static_cast<double>(image_size.height), ann.y + half);
  box.confidence = 1.0;
  box.class_score = 1.0;
  return {box, ann};
}

/// Best box by confidence; ties go to the lexicographically smallest (x1, y1).
inline std::optional<DetBox> select_top_box(std::span<const DetBox> boxes, double conf_threshold = 0.0) {
  std::optional<DetBox> best;
  for (const auto& b : boxes) {
    if (!best || b.confidence > best->confidence ||
        (b.confidence == best->confidence && std::tie(b.x1, b.y1) < std::tie(best->x1, best->y1)))
      best = b;
  }
  if (best && best->confidence < conf_threshold) return std::nullopt;
  return best;
}

/// Rasterize a box (original-image pixels) onto the heatmap grid. `scale`
/// maps original pixels to heatmap cells; every cell the box touches is set.
/// No box means no refinement: the mask is all ones.
inline RoIMask box_to_roi_mask(const std::optional<DetBox>& box, ImageSize heatmap_shape, double scale) {
  if (heatmap_shape.height == 0 || heatmap_shape.width == 0) fail(ErrorKind::ShapeMismatch, "empty heatmap shape");
  if (!(scale > 0.0) || !std::isfinite(scale)) fail(ErrorKind::InvalidArgument, "mask scale must be positive");
  if (!box) return full_mask(heatmap_shape.height, heatmap_shape.width);

  RoIMask mask(heatmap_shape.height, heatmap_shape.width, 0);
  auto span_of = [scale](double lo, double hi, std::size_t n) -> std::pair<std::ptrdiff_t, std::ptrdiff_t> {
    auto first = static_cast<std::ptrdiff_t>(std::floor(lo * scale));
    auto last = static_cast<std::ptrdiff_t>(std::ceil(hi * scale)) - 1;
    first = std::max<std::ptrdiff_t>(first, 0);
    last = std::min<std::ptrdiff_t>(last, static_cast<std::ptrdiff_t>(n) - 1);
    return {first, last};
  };
  const auto [c0, c1] = span_of(box->x1, box->x2, heatmap_shape.width);
  const auto [r0, r1] = span_of(box->y1, box->y2, heatmap_shape.height);
  for (auto r = r0; r <= r1; ++r)
    for (auto c = c0; c <= c1; ++c) mask(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = 1;
  return mask;
}

// --- detector ----------------------------------------------------------------

struct ConvBnActImpl : torch::nn::Module {
  ConvBnActImpl(int in, int out, int k, int stride) {
    conv_ = register_module("conv", torch::nn::Conv2d(
                                        torch::nn::Conv2dOptions(in, out, k).stride(stride).padding(k / 2).bias(false)));
    bn_ = register_module("bn", torch::nn::BatchNorm2d(out));
  }
  torch::Tensor forward(const torch::Tensor& x) { return torch::silu(bn_->forward(conv_->forward(x))); }

 private:
  torch::nn::Conv2d conv_{nullptr};
  torch::nn::BatchNorm2d bn_{nullptr};
};
TORCH_MODULE(ConvBnAct);

struct ResidualBlockImpl : torch::nn::Module {
  explicit ResidualBlockImpl(int channels) {
    a_ = register_module("a", ConvBnAct(channels, channels, 3, 1));
    b_ = register_module("b", ConvBnAct(channels, channels, 3, 1));
  }
  torch::Tensor forward(const torch::Tensor& x) { return x + b_->forward(a_->forward(x)); }

 private:
  ConvBnAct a_{nullptr}, b_{nullptr};
};
TORCH_MODULE(ResidualBlock);

/// Raw per-cell head output, channels: tx, ty, tw, th, class logit, confidence logit.
struct IRDRawOutput {
  torch::Tensor raw;  // [B, 6, h, w]
};

struct IRDNetImpl : torch::nn::Module {
  explicit IRDNetImpl(IRDConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const int w = cfg_.width;
    auto stage = [&](int in, int out) {
      torch::nn::Sequential s(ConvBnAct(in, out, 3, 2));
      for (int i = 0; i < cfg_.depth; ++i) s->push_back(ResidualBlock(out));
      return s;
    };
    stem_ = register_module("stem", stage(1, w));            // /2
    s2_ = register_module("s2", stage(w, 2 * w));            // /4
    s3_ = register_module("s3", stage(2 * w, 4 * w));        // /8
    s4_ = register_module("s4", stage(4 * w, 8 * w));        // /16
    s5_ = register_module("s5", stage(8 * w, 8 * w));        // /32
    lat5_ = register_module("lat5", ConvBnAct(8 * w, 4 * w, 1, 1));
    lat4_ = register_module("lat4", ConvBnAct(8 * w, 4 * w, 1, 1));
    lat3_ = register_module("lat3", ConvBnAct(4 * w, 4 * w, 1, 1));
    smooth4_ = register_module("smooth4", ConvBnAct(4 * w, 4 * w, 3, 1));
    smooth3_ = register_module("smooth3", ConvBnAct(4 * w, 4 * w, 3, 1));
    head_ = register_module("head", torch::nn::Sequential(ConvBnAct(4 * w, 4 * w, 3, 1),
                                                          torch::nn::Conv2d(torch::nn::Conv2dOptions(4 * w, 6, 1))));
    auto last = head_->ptr<torch::nn::Conv2dImpl>(1);
    torch::NoGradGuard guard;
    last->bias.zero_();
    last->bias[5].fill_(-4.0);
  }

  torch::Tensor forward(const torch::Tensor& image) {
    auto x = image.dim() == 3 ? image.unsqueeze(0) : image;
    if (x.size(-1) % 32 != 0 || x.size(-2) % 32 != 0)
      fail(ErrorKind::ShapeMismatch, "ird input must be divisible by 32");
    const auto c3 = s3_->forward(s2_->forward(stem_->forward(x)));
    const auto c4 = s4_->forward(c3);
    const auto c5 = s5_->forward(c4);
    namespace F = torch::nn::functional;
    const auto up = F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest);
    auto p4 = smooth4_->forward(lat4_->forward(c4) + F::interpolate(lat5_->forward(c5), up));
    auto p3 = smooth3_->forward(lat3_->forward(c3) + F::interpolate(p4, up));
    return head_->forward(p3);
  }

  const IRDConfig& config() const { return cfg_; }

 private:
  IRDConfig cfg_;
  torch::nn::Sequential stem_{nullptr}, s2_{nullptr}, s3_{nullptr}, s4_{nullptr}, s5_{nullptr};
  ConvBnAct lat5_{nullptr}, lat4_{nullptr}, lat3_{nullptr}, smooth4_{nullptr}, smooth3_{nullptr};
  torch::nn::Sequential head_{nullptr};
};
TORCH_MODULE(IRDNet);

struct DecodedHead {
  torch::Tensor boxes;        // [B, h, w, 4] in input pixels
  torch::Tensor cls_logits;   // [B, h, w]
  torch::Tensor conf_logits;  // [B, h, w]
};

/// Differentiable decode of the raw head: centre = (cell + sigmoid(t)) * stride,
/// size = prior * exp(t).
inline DecodedHead decode_head(const torch::Tensor& raw, const IRDConfig& cfg) {
  const auto b = raw.size(0), h = raw.size(2), w = raw.size(3);
  const auto opts = raw.options();
  const auto gy = torch::arange(h, opts).view({1, h, 1}).expand({b, h, w});
  const auto gx = torch::arange(w, opts).view({1, 1, w}).expand({b, h, w});
  const double stride = IRDConfig::kStride;
  const auto cx = (gx + torch::sigmoid(raw.select(1, 0))) * stride;
  const auto cy = (gy + torch::sigmoid(raw.select(1, 1))) * stride;
  const auto bw = cfg.box_prior * torch::exp(raw.select(1, 2).clamp_max(8.0));
  const auto bh = cfg.box_prior * torch::exp(raw.select(1, 3).clamp_max(8.0));
  auto boxes = torch::stack({cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2}, -1);
  return {boxes, raw.select(1, 4), raw.select(1, 5)};
}

/// Turn one image's head output into boxes in input pixels. Boxes whose
/// regressed extent is below cfg.min_extent are dropped.
inline std::vector<DetBox> head_to_boxes(const torch::Tensor& raw_single, const IRDConfig& cfg) {
  torch::NoGradGuard guard;
  const auto raw = raw_single.dim() == 3 ? raw_single.unsqueeze(0) : raw_single;
  const auto dec = decode_head(raw.to(torch::kFloat64), cfg);
  const auto boxes = dec.boxes[0].contiguous();
  const auto cls = torch::sigmoid(dec.cls_logits[0]).contiguous();
  const auto conf = torch::sigmoid(dec.conf_logits[0]).contiguous();
  const auto h = boxes.size(0), w = boxes.size(1);
  const auto* bp = boxes.data_ptr<double>();
  const auto* cp = cls.data_ptr<double>();
  const auto* fp = conf.data_ptr<double>();
  std::vector<DetBox> out;
  out.reserve(static_cast<std::size_t>(h * w));
  for (int64_t i = 0; i < h * w; ++i) {
    DetBox box{bp[4 * i], bp[4 * i + 1], bp[4 * i + 2], bp[4 * i + 3], clamp01(fp[i]), clamp01(cp[i])};
    if (!std::isfinite(box.x1) || !std::isfinite(box.y1) || !std::isfinite(box.x2) || !std::isfinite(box.y2)) continue;
    if (box.width() < cfg.min_extent || box.height() < cfg.min_extent) continue;
    out.push_back(box);
  }
  return out;
}

/// Run the detector on one image tensor ([1, H, W], already at input size).
inline std::vector<DetBox> detector_forward(IRDNet& net, const torch::Tensor& image) {
  torch::NoGradGuard guard;
  return head_to_boxes(net->forward(image)[0], net->config());
}

struct CellTargets {
  torch::Tensor pos;    // bool [h, w]
  torch::Tensor boxes;  // float [h, w, 4]
  int collisions = 0;
};

/// The cell containing each label's box centre becomes positive. When two
/// labels land in the same cell the first one (in raster order of centres)
/// keeps it and the collision is counted.
inline CellTargets assign_targets(std::span<const ExtendedBoxLabel> labels, ImageSize image_size, int grid_h,
                                  int grid_w, int stride = IRDConfig::kStride) {
  CellTargets t;
  t.pos = torch::zeros({grid_h, grid_w}, torch::kBool);
  t.boxes = torch::zeros({grid_h, grid_w, 4}, torch::kFloat32);
  struct Item {
    std::size_t raster;
    std::size_t r, c;
    DetBox box;
  };
  std::vector<Item> items;
  for (const auto& label : labels) {
    const auto& b = label.box;
    if (b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > static_cast<double>(image_size.width) ||
        b.y2 > static_cast<double>(image_size.height) || !(b.x1 < b.x2 && b.y1 < b.y2))
      fail(ErrorKind::OutOfBounds, "extended box label outside the image");
    const double cx = (b.x1 + b.x2) / 2.0, cy = (b.y1 + b.y2) / 2.0;
    const auto c = std::min<std::size_t>(static_cast<std::size_t>(cx / stride), static_cast<std::size_t>(grid_w - 1));
    const auto r = std::min<std::size_t>(static_cast<std::size_t>(cy / stride), static_cast<std::size_t>(grid_h - 1));
    items.push_back({r * static_cast<std::size_t>(grid_w) + c, r, c, b});
  }
  std::stable_sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.raster < b.raster; });
  auto pos = t.pos.accessor<bool, 2>();
  auto boxes = t.boxes.accessor<float, 3>();
  for (const auto& it : items) {
    if (pos[it.r][it.c]) {
      ++t.collisions;
      continue;
    }
    pos[it.r][it.c] = true;
    boxes[it.r][it.c][0] = static_cast<float>(it.box.x1);
    boxes[it.r][it.c][1] = static_cast<float>(it.box.y1);
    boxes[it.r][it.c][2] = static_cast<float>(it.box.x2);
    boxes[it.r][it.c][3] = static_cast<float>(it.box.y2);
  }
  return t;
}

// --- external detections ---------------------------------------------------

using DetectionsByImage = std::map<std::string, std::vector<DetBox>>;

inline DetectionsByImage ingest_external_detections(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open detections file " + path);
  DetectionsByImage out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto bad = [&](const std::string& why) -> void {
      fail(ErrorKind::MalformedRecord, path + ":" + std::to_string(line_no) + ": " + why);
    };
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      bad(std::string("invalid JSON (") + e.what() + ")");
    }
    if (!rec.is_object() || !rec.contains("image_id") || !rec["image_id"].is_string()) bad("missing string image_id");
    if (!rec.contains("boxes") || !rec["boxes"].is_array()) bad("missing boxes array");
    auto& list = out[rec["image_id"].get<std::string>()];
    for (const auto& entry : rec["boxes"]) {
      if (!entry.is_array() || entry.size() != 5) bad("box must be [x1, y1, x2, y2, conf]");
      for (const auto& v : entry)
        if (!v.is_number()) bad("box entries must be numbers");
      DetBox box{entry[0].get<double>(), entry[1].get<double>(), entry[2].get<double>(),
                 entry[3].get<double>(), entry[4].get<double>(), 1.0};
      if (!box.valid()) bad("invalid box (need x1<x2, y1<y2, conf in [0,1])");
      list.push_back(box);
    }
  }
  return out;
}

inline void write_external_detections(const std::string& path, const DetectionsByImage& detections) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Io, "cannot write detections file " + path);
  for (const auto& [id, boxes] : detections) {
    nlohmann::json rec;
    rec["image_id"] = id;
    rec["boxes"] = nlohmann::json::array();
    for (const auto& b : boxes) rec["boxes"].push_back({b.x1, b.y1, b.x2, b.y2, b.confidence});
    out << rec.dump() << '\n';
  }
}

}  // namespace tsipr
