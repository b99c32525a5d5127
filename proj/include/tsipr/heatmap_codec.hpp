#pragma once

// Gaussian target encoding for point annotations and peak decoding of
// predicted heatmaps. Cell (c, r) of a heatmap covers pixels
// [c*g, (c+1)*g) x [r*g, (r+1)*g) of the input image.

#include <tsipr/core.hpp>

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

namespace tsipr {

struct CodecConfig {
  int g = 4;
  double sigma = 2.0;
  double peak_threshold = 0.1;
  int max_peaks = 10;

  void validate() const {
    if (g < 1) fail(ErrorKind::InvalidArgument, "codec g must be >= 1");
    if (!(sigma > 0.0)) fail(ErrorKind::InvalidArgument, "codec sigma must be > 0");
    if (!(peak_threshold >= 0.0 && peak_threshold <= 1.0))
      fail(ErrorKind::InvalidArgument, "peak_threshold must lie in [0,1]");
    if (max_peaks < 1) fail(ErrorKind::InvalidArgument, "max_peaks must be >= 1");
  }
};

struct TargetBundle {
  GaussianHeatmap heatmap;
  OffsetMap offsets;
  Grid<std::uint8_t> pos_mask;
  /// Annotations dropped because another one already claimed their cell.
  int collisions = 0;
};

inline ImageSize heatmap_size(ImageSize image, int g) {
  auto up = [g](std::size_t n) { return (n + static_cast<std::size_t>(g) - 1) / static_cast<std::size_t>(g); };
  return {up(image.height), up(image.width)};
}

inline TargetBundle encode_targets(std::span<const ImplantAnnotation> annotations, ImageSize image_size,
                                   const CodecConfig& cfg) {
  cfg.validate();
  const ImageSize hs = heatmap_size(image_size, cfg.g);
  TargetBundle out;
  out.heatmap = GaussianHeatmap(hs.height, hs.width, 0.0f);
  out.offsets = OffsetMap(hs.height, hs.width);
  out.pos_mask = Grid<std::uint8_t>(hs.height, hs.width, 0);

  const double two_sigma_sq = 2.0 * cfg.sigma * cfg.sigma;
  for (const auto& ann : annotations) {
    if (!in_bounds(ann, image_size))
      fail(ErrorKind::OutOfBounds, "annotation (" + std::to_string(ann.x) + ", " + std::to_string(ann.y) +
                                       ") outside " + std::to_string(image_size.width) + "x" +
                                       std::to_string(image_size.height));
    const double sx = ann.x / cfg.g;
    const double sy = ann.y / cfg.g;
    const auto cx = static_cast<std::size_t>(std::floor(sx));
    const auto cy = static_cast<std::size_t>(std::floor(sy));

    for (std::size_t r = 0; r < hs.height; ++r) {
      const double dy = static_cast<double>(r) - static_cast<double>(cy);
      for (std::size_t c = 0; c < hs.width; ++c) {
        const double dx = static_cast<double>(c) - static_cast<double>(cx);
        const auto v = static_cast<float>(std::exp(-(dx * dx + dy * dy) / two_sigma_sq));
        float& cell = out.heatmap(r, c);
        cell = std::max(cell, v);
      }
    }

    if (out.pos_mask(cy, cx)) {
      ++out.collisions;
      continue;
    }
    out.pos_mask(cy, cx) = 1;
    out.offsets.dx(cy, cx) = static_cast<float>(sx - static_cast<double>(cx));
    out.offsets.dy(cy, cx) = static_cast<float>(sy - static_cast<double>(cy));
  }
  return out;
}

namespace codec_detail {

struct Candidate {
  float score;
  std::size_t r;
  std::size_t c;
};

/// >= every 3x3 neighbour and strictly > those earlier in raster order.
inline bool is_local_peak(const GaussianHeatmap& heatmap, std::ptrdiff_t r, std::ptrdiff_t c) {
  const auto h = static_cast<std::ptrdiff_t>(heatmap.height());
  const auto w = static_cast<std::ptrdiff_t>(heatmap.width());
  const float v = heatmap(r, c);
  for (std::ptrdiff_t dr = -1; dr <= 1; ++dr)
    for (std::ptrdiff_t dc = -1; dc <= 1; ++dc) {
      if (dr == 0 && dc == 0) continue;
      const auto rr = r + dr, cc = c + dc;
      if (rr < 0 || cc < 0 || rr >= h || cc >= w) continue;
      const float n = heatmap(rr, cc);
      const bool before = dr < 0 || (dr == 0 && dc < 0);
      if (n > v || (before && n == v)) return false;
    }
  return true;
}

inline std::vector<Candidate> peak_cells(const GaussianHeatmap& heatmap, const CodecConfig& cfg,
                                         const GaussianHeatmap* also_peak_in = nullptr) {
  std::vector<Candidate> out;
  const auto h = static_cast<std::ptrdiff_t>(heatmap.height());
  const auto w = static_cast<std::ptrdiff_t>(heatmap.width());
  for (std::ptrdiff_t r = 0; r < h; ++r)
    for (std::ptrdiff_t c = 0; c < w; ++c) {
      const float v = heatmap(r, c);
      if (!(v > cfg.peak_threshold) || !is_local_peak(heatmap, r, c)) continue;
      if (also_peak_in && !is_local_peak(*also_peak_in, r, c)) continue;
      out.push_back({v, static_cast<std::size_t>(r), static_cast<std::size_t>(c)});
    }
  // Raster order already breaks ties.
  std::stable_sort(out.begin(), out.end(), [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
  if (out.size() > static_cast<std::size_t>(cfg.max_peaks)) out.resize(static_cast<std::size_t>(cfg.max_peaks));
  return out;
}

inline std::vector<ScoredPoint> to_points(const std::vector<Candidate>& cells, const OffsetMap* offsets,
                                          const CodecConfig& cfg) {
  std::vector<ScoredPoint> out;
  out.reserve(cells.size());
  for (const auto& cand : cells) {
    const double ox = offsets ? static_cast<double>(offsets->dx(cand.r, cand.c)) : 0.5;
    const double oy = offsets ? static_cast<double>(offsets->dy(cand.r, cand.c)) : 0.5;
    out.push_back({(static_cast<double>(cand.c) + ox) * cfg.g, (static_cast<double>(cand.r) + oy) * cfg.g,
                   static_cast<double>(cand.score)});
  }
  return out;
}

inline void check_offsets(const GaussianHeatmap& heatmap, const OffsetMap* offsets) {
  if (offsets && (!offsets->dx.same_shape(heatmap) || !offsets->dy.same_shape(heatmap)))
    fail(ErrorKind::ShapeMismatch, "offset map shape differs from heatmap");
}

}  // namespace codec_detail

/// Local maxima over a 3x3 neighbourhood. A cell survives when it is >= every
/// neighbour and strictly > the neighbours that precede it in raster order, so
/// a plateau yields exactly its first cell. Without offsets, points land on
/// cell centres.
inline std::vector<ScoredPoint> decode_peaks(const GaussianHeatmap& heatmap, const OffsetMap* offsets,
                                             const CodecConfig& cfg) {
  cfg.validate();
  codec_detail::check_offsets(heatmap, offsets);
  return codec_detail::to_points(codec_detail::peak_cells(heatmap, cfg), offsets, cfg);
}

inline std::vector<ScoredPoint> decode_peaks(const GaussianHeatmap& heatmap, const OffsetMap& offsets,
                                             const CodecConfig& cfg) {
  return decode_peaks(heatmap, &offsets, cfg);
}

inline GaussianHeatmap apply_roi_mask(const GaussianHeatmap& heatmap, const RoIMask& mask) {
  if (heatmap.height() != mask.height() || heatmap.width() != mask.width())
    fail(ErrorKind::ShapeMismatch, "mask " + std::to_string(mask.height()) + "x" + std::to_string(mask.width()) +
                                       " vs heatmap " + std::to_string(heatmap.height()) + "x" +
                                       std::to_string(heatmap.width()));
  GaussianHeatmap out = heatmap;
  auto values = out.values();
  auto m = mask.values();
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = m[i] ? values[i] : 0.0f;
  return out;
}

/// Peaks of the masked heatmap. Zeroing cells can turn a cell on the mask
/// border into a new local maximum; those are dropped, so the result is
/// always a subset of the peaks of `heatmap` itself.
inline std::vector<ScoredPoint> decode_masked_peaks(const GaussianHeatmap& heatmap, const RoIMask& mask,
                                                    const OffsetMap* offsets, const CodecConfig& cfg) {
  cfg.validate();
  codec_detail::check_offsets(heatmap, offsets);
  const auto masked = apply_roi_mask(heatmap, mask);
  return codec_detail::to_points(codec_detail::peak_cells(masked, cfg, &heatmap), offsets, cfg);
}

}  // namespace tsipr
