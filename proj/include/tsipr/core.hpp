#pragma once

// Shared data model: images, annotations, boxes, masks and the error type
// every other module reports through. Nothing in here learns anything.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace tsipr {

enum class ErrorKind {
  DimensionMismatch,
  NonMonotoneZ,
  NonPositiveScale,
  OutOfBounds,
  ShapeMismatch,
  InvalidArgument,
  NoPositiveCells,
  DegenerateBox,
  NonFinite,
  TooFewPoints,
  RankDeficient,
  MalformedRecord,
  Io,
  Config,
  CheckpointMismatch,
  MissingPath,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::DimensionMismatch: return "dimension-mismatch";
    case ErrorKind::NonMonotoneZ: return "non-monotone-z";
    case ErrorKind::NonPositiveScale: return "non-positive-scale";
    case ErrorKind::OutOfBounds: return "out-of-bounds";
    case ErrorKind::ShapeMismatch: return "shape-mismatch";
    case ErrorKind::InvalidArgument: return "invalid-argument";
    case ErrorKind::NoPositiveCells: return "no-positive-cells";
    case ErrorKind::DegenerateBox: return "degenerate-box";
    case ErrorKind::NonFinite: return "non-finite";
    case ErrorKind::TooFewPoints: return "too-few-points";
    case ErrorKind::RankDeficient: return "rank-deficient";
    case ErrorKind::MalformedRecord: return "malformed-record";
    case ErrorKind::Io: return "io";
    case ErrorKind::Config: return "config";
    case ErrorKind::CheckpointMismatch: return "checkpoint-mismatch";
    case ErrorKind::MissingPath: return "missing-path";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

/// Dense row-major 2D grid. Indexing is (row, col) == (y, x).
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(std::size_t height, std::size_t width, T fill = T{})
      : height_(height), width_(width), data_(height * width, fill) {}
  Grid(std::size_t height, std::size_t width, std::vector<T> data)
      : height_(height), width_(width), data_(std::move(data)) {
    if (data_.size() != height_ * width_) fail(ErrorKind::ShapeMismatch, "grid data size does not match shape");
  }

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::pair<std::size_t, std::size_t> shape() const noexcept { return {height_, width_}; }

  T& operator()(std::size_t row, std::size_t col) { return data_[row * width_ + col]; }
  const T& operator()(std::size_t row, std::size_t col) const { return data_[row * width_ + col]; }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }

  bool same_shape(const Grid& other) const noexcept {
    return height_ == other.height_ && width_ == other.width_;
  }

  friend bool operator==(const Grid&, const Grid&) = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<T> data_;
};

/// Grayscale slice, intensities normalized to [0,1].
using Image = Grid<float>;
/// Single-channel score map at 1/g of the input resolution, values in [0,1].
using GaussianHeatmap = Grid<float>;

struct Point2 {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point2&, const Point2&) = default;
};

struct ScoredPoint {
  double x = 0.0;
  double y = 0.0;
  double score = 0.0;
  friend bool operator==(const ScoredPoint&, const ScoredPoint&) = default;
};

/// Sub-cell residuals (dx, dy) in output-cell units.
struct OffsetMap {
  Grid<float> dx;
  Grid<float> dy;

  OffsetMap() = default;
  OffsetMap(std::size_t height, std::size_t width) : dx(height, width), dy(height, width) {}
};

struct ImageSize {
  std::size_t height = 0;
  std::size_t width = 0;
  friend bool operator==(const ImageSize&, const ImageSize&) = default;
};

/// Ground-truth implant point in pixel coordinates (x = column, y = row, origin top-left).
struct ImplantAnnotation {
  double x = 0.0;
  double y = 0.0;
  int z = 0;
  friend bool operator==(const ImplantAnnotation&, const ImplantAnnotation&) = default;
};

inline bool in_bounds(const ImplantAnnotation& ann, ImageSize size) {
  return ann.x >= 0.0 && ann.y >= 0.0 && ann.x < static_cast<double>(size.width) &&
         ann.y < static_cast<double>(size.height);
}

struct DetBox {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;
  double confidence = 1.0;
  double class_score = 1.0;

  double width() const noexcept { return x2 - x1; }
  double height() const noexcept { return y2 - y1; }
  double area() const noexcept { return std::max(0.0, width()) * std::max(0.0, height()); }
  bool valid() const noexcept {
    return x1 < x2 && y1 < y2 && confidence >= 0.0 && confidence <= 1.0 && class_score >= 0.0 &&
           class_score <= 1.0;
  }
  friend bool operator==(const DetBox&, const DetBox&) = default;
};

/// Binary mask at heatmap resolution marking the most probable implant region.
using RoIMask = Grid<std::uint8_t>;

inline RoIMask full_mask(std::size_t height, std::size_t width) { return RoIMask(height, width, 1); }

/// Ordered slices of one patient, crown first. crown_z / root_z name the
/// slices the two-stream predictor runs on and the ones it projects to.
struct CrownSliceStack {
  std::vector<Image> slices;
  std::vector<int> z_indices;
  double mm_per_px = 0.2;
  std::string patient_id;
  std::vector<int> crown_z;
  std::vector<int> root_z;

  ImageSize image_size() const {
    if (slices.empty()) return {};
    return {slices.front().height(), slices.front().width()};
  }

  /// Slice at z index, or nullptr.
  const Image* slice_at(int z) const {
    auto it = std::find(z_indices.begin(), z_indices.end(), z);
    if (it == z_indices.end()) return nullptr;
    return &slices[static_cast<std::size_t>(it - z_indices.begin())];
  }

  friend bool operator==(const CrownSliceStack&, const CrownSliceStack&) = default;
};

inline const CrownSliceStack& validate_stack(const CrownSliceStack& stack) {
  if (stack.slices.size() != stack.z_indices.size())
    fail(ErrorKind::DimensionMismatch, "slice count " + std::to_string(stack.slices.size()) +
                                           " != z index count " + std::to_string(stack.z_indices.size()));
  if (!(stack.mm_per_px > 0.0) || !std::isfinite(stack.mm_per_px))
    fail(ErrorKind::NonPositiveScale, "mm_per_px must be positive, got " + std::to_string(stack.mm_per_px));
  for (std::size_t i = 1; i < stack.slices.size(); ++i) {
    if (!stack.slices[i].same_shape(stack.slices.front()))
      fail(ErrorKind::DimensionMismatch, "slice " + std::to_string(i) + " has shape " +
                                             std::to_string(stack.slices[i].height()) + "x" +
                                             std::to_string(stack.slices[i].width()) + ", expected " +
                                             std::to_string(stack.slices.front().height()) + "x" +
                                             std::to_string(stack.slices.front().width()));
  }
  for (std::size_t i = 1; i < stack.z_indices.size(); ++i) {
    if (stack.z_indices[i] <= stack.z_indices[i - 1])
      fail(ErrorKind::NonMonotoneZ, "z indices must be strictly increasing at position " + std::to_string(i));
  }
  return stack;
}

inline double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

}  // namespace tsipr
