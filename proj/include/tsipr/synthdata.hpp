#pragma once

// Parametric tooth-crown phantoms. Teeth are smooth ellipses placed along a
// half-elliptic arch; one tooth is missing (the implant site) and optionally
// one inter-tooth gap is widened to act as a sparse-teeth decoy. Teeth shrink
// slice by slice toward the root, so every gap widens with depth. The whole
// arch drifts along the tilted implant axis, which keeps the ground truth
// visually determined in every slice.

#include <tsipr/core.hpp>

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

namespace tsipr {

struct PhantomParams {
  int n_teeth = 12;
  double spacing_mm = 11.0;
  int missing_index = 5;
  /// Left tooth of the widened pair, or -1 for no decoy.
  int decoy_index = -1;
  double decoy_gap_scale = 1.0;
  double shrink_rate = 0.03;
  double implant_axis_tilt = 5.0;
  double tilt_direction = 0.0;
  double noise_level = 0.02;
  std::uint64_t seed = 0;
  int image_size = 776;
  double mm_per_px = 0.2;
  double slice_spacing_px = 5.0;

  friend bool operator==(const PhantomParams&, const PhantomParams&) = default;
};

/// Implant axis in (x px, y px, z slice) coordinates: point(z) = origin + z * per_slice.
struct ImplantAxis {
  double x0 = 0.0;
  double y0 = 0.0;
  double dx_per_slice = 0.0;
  double dy_per_slice = 0.0;

  Point2 at(double z) const { return {x0 + dx_per_slice * z, y0 + dy_per_slice * z}; }
};

struct PhantomPatient {
  CrownSliceStack stack;
  std::vector<ImplantAnnotation> annotations;  // one per slice, crown and root
  ImplantAxis axis;
  PhantomParams params;
};

namespace synth_detail {

/// Arch centre line: x = cx + rx cos t, y = cy - ry sin t, t in [0, pi].
struct Arch {
  double cx = 388.0, cy = 560.0, rx = 250.0, ry = 330.0;
  std::vector<double> cumulative;  // arc length at t_k = pi k / (n-1)
  static constexpr int kSamples = 4097;

  explicit Arch(double scale = 1.0) : cx(388.0 * scale), cy(560.0 * scale), rx(250.0 * scale), ry(330.0 * scale) {
    cumulative.resize(kSamples, 0.0);
    for (int k = 1; k < kSamples; ++k) {
      const auto a = point(param(k - 1)), b = point(param(k));
      cumulative[k] = cumulative[k - 1] + std::hypot(b.x - a.x, b.y - a.y);
    }
  }
  static double param(int k) { return std::numbers::pi * k / (kSamples - 1); }
  double length() const { return cumulative.back(); }
  Point2 point(double t) const { return {cx + rx * std::cos(t), cy - ry * std::sin(t)}; }
  Point2 tangent(double t) const {
    const double tx = -rx * std::sin(t), ty = -ry * std::cos(t);
    const double n = std::hypot(tx, ty);
    return {tx / n, ty / n};
  }
  double t_at(double s) const {
    s = std::clamp(s, 0.0, length());
    auto it = std::lower_bound(cumulative.begin(), cumulative.end(), s);
    const auto k = static_cast<int>(std::max<std::ptrdiff_t>(1, it - cumulative.begin()));
    const double seg = cumulative[k] - cumulative[k - 1];
    const double f = seg > 0.0 ? (s - cumulative[k - 1]) / seg : 0.0;
    return param(k - 1) + f * (param(k) - param(k - 1));
  }
};

inline double smoothstep_edge(double signed_dist, double width) {
  return 1.0 / (1.0 + std::exp(-signed_dist / width));
}

inline constexpr double kToothHalfWidth = 0.38;  // along the arch, fraction of spacing
inline constexpr double kToothHalfDepth = 0.48;  // across the arch
inline constexpr double kMinSizeFactor = 0.3;

}  // namespace synth_detail

/// Tooth geometry of one phantom, before rendering.
struct PhantomLayout {
  double spacing_px = 0.0;
  std::vector<double> slot_arc;  // arc position of every tooth slot (including the missing one)
  double arc_length = 0.0;
  ImplantAxis axis;

  double size_factor(const PhantomParams& p, int z) const {
    return std::max(synth_detail::kMinSizeFactor, 1.0 - p.shrink_rate * z);
  }
  double half_width(const PhantomParams& p, int z) const {
    return synth_detail::kToothHalfWidth * spacing_px * size_factor(p, z);
  }
  double half_depth(const PhantomParams& p, int z) const {
    return synth_detail::kToothHalfDepth * spacing_px * size_factor(p, z);
  }
  /// Arch drift of slice z, shared by every structure in the slice.
  Point2 shift(int z) const { return {axis.dx_per_slice * z, axis.dy_per_slice * z}; }
};

inline void validate_params(const PhantomParams& p) {
  auto bad = [](const std::string& w) { fail(ErrorKind::InvalidArgument, "phantom parameter out of range: " + w); };
  if (p.n_teeth < 3) bad("n_teeth < 3");
  if (p.missing_index < 1 || p.missing_index > p.n_teeth - 2) bad("missing_index must have a neighbour on each side");
  if (!(p.spacing_mm > 0.0)) bad("spacing_mm");
  if (p.decoy_index >= 0) {
    if (p.decoy_index + 1 >= p.n_teeth) bad("decoy_index");
    if (std::abs(p.decoy_index - p.missing_index) < 2 || std::abs(p.decoy_index + 1 - p.missing_index) < 2)
      bad("decoy gap must not touch the missing tooth");
    if (!(p.decoy_gap_scale >= 1.0)) bad("decoy_gap_scale < 1");
  }
  if (!(p.shrink_rate >= 0.0 && p.shrink_rate < 0.5)) bad("shrink_rate");
  if (!(std::abs(p.implant_axis_tilt) < 45.0)) bad("implant_axis_tilt");
  if (!(p.noise_level >= 0.0)) bad("noise_level");
  if (p.image_size < 64) bad("image_size");
  if (!(p.mm_per_px > 0.0) || !(p.slice_spacing_px > 0.0)) bad("scales");
}

inline PhantomLayout phantom_layout(const PhantomParams& p) {
  validate_params(p);
  const synth_detail::Arch arch(p.image_size / 776.0);
  PhantomLayout layout;
  layout.spacing_px = p.spacing_mm / p.mm_per_px;
  layout.arc_length = arch.length();
  const double a0 = synth_detail::kToothHalfWidth * layout.spacing_px;

  std::vector<double> pos(static_cast<std::size_t>(p.n_teeth), 0.0);
  for (int i = 1; i < p.n_teeth; ++i) {
    double step = layout.spacing_px;
    if (i - 1 == p.decoy_index) step = 2.0 * a0 + p.decoy_gap_scale * layout.spacing_px;
    pos[i] = pos[i - 1] + step;
  }
  const double span = pos.back();
  const double margin = 0.5 * layout.spacing_px;
  if (span + 2.0 * margin > layout.arc_length)
    fail(ErrorKind::InvalidArgument, "phantom parameter out of range: teeth do not fit on the arch");
  const double start = (layout.arc_length - span) / 2.0;
  for (auto& v : pos) v += start;
  layout.slot_arc = pos;

  const auto site = arch.point(arch.t_at(pos[static_cast<std::size_t>(p.missing_index)]));
  const double drift = std::tan(p.implant_axis_tilt * std::numbers::pi / 180.0) * p.slice_spacing_px;
  const double phi = p.tilt_direction * std::numbers::pi / 180.0;
  layout.axis = {site.x, site.y, drift * std::cos(phi), drift * std::sin(phi)};
  return layout;
}

/// Noise-free intensity of slice z at continuous image position (x, y).
class PhantomRenderer {
 public:
  explicit PhantomRenderer(const PhantomParams& p) : p_(p), layout_(phantom_layout(p)), arch_(p.image_size / 776.0) {}

  const PhantomLayout& layout() const { return layout_; }

  Image render_clean(int z) const {
    const auto n = static_cast<std::size_t>(p_.image_size);
    Image img(n, n, 0.0f);
    const auto sh = layout_.shift(z);
    const double a = layout_.half_width(p_, z), b = layout_.half_depth(p_, z);

    // Alveolar ridge: band between two concentric ellipses around the arch.
    const double band = 1.25 * b;
    for (std::size_t r = 0; r < n; ++r) {
      const double y = static_cast<double>(r) + 0.5 - sh.y;
      for (std::size_t c = 0; c < n; ++c) {
        const double x = static_cast<double>(c) + 0.5 - sh.x;
        const double ux = (x - arch_.cx), uy = (y - arch_.cy);
        const double outer = 1.0 - std::hypot(ux / (arch_.rx + band), uy / (arch_.ry + band));
        const double inner = std::hypot(ux / (arch_.rx - band), uy / (arch_.ry - band)) - 1.0;
        const double lower = (arch_.cy + 40.0 - y);
        const double v = 0.05 + 0.25 * synth_detail::smoothstep_edge(outer * arch_.rx, 2.0) *
                                    synth_detail::smoothstep_edge(inner * arch_.rx, 2.0) *
                                    synth_detail::smoothstep_edge(lower, 6.0);
        img(r, c) = static_cast<float>(v);
      }
    }

    for (int i = 0; i < p_.n_teeth; ++i) {
      if (i == p_.missing_index) continue;
      const double t = arch_.t_at(layout_.slot_arc[static_cast<std::size_t>(i)]);
      const auto centre = arch_.point(t);
      const auto tan = arch_.tangent(t);
      const double cx = centre.x + sh.x, cy = centre.y + sh.y;
      const double reach = std::max(a, b) + 6.0;
      const auto r0 = static_cast<std::size_t>(std::clamp(cy - reach, 0.0, static_cast<double>(n)));
      const auto r1 = static_cast<std::size_t>(std::clamp(cy + reach, 0.0, static_cast<double>(n)));
      const auto c0 = static_cast<std::size_t>(std::clamp(cx - reach, 0.0, static_cast<double>(n)));
      const auto c1 = static_cast<std::size_t>(std::clamp(cx + reach, 0.0, static_cast<double>(n)));
      for (std::size_t r = r0; r < r1; ++r) {
        const double dy = static_cast<double>(r) + 0.5 - cy;
        for (std::size_t c = c0; c < c1; ++c) {
          const double dx = static_cast<double>(c) + 0.5 - cx;
          const double u = dx * tan.x + dy * tan.y;    // along the arch
          const double v = -dx * tan.y + dy * tan.x;   // across the arch
          const double rho = std::hypot(u / a, v / b);
          const double edge = synth_detail::smoothstep_edge((1.0 - rho) * std::min(a, b), 1.0);
          const double pulp = synth_detail::smoothstep_edge((0.35 - rho) * std::min(a, b), 1.0);
          const double tooth = 0.85 - 0.3 * pulp;
          float& px = img(r, c);
          px = static_cast<float>(px * (1.0 - edge) + tooth * edge);
        }
      }
    }
    return img;
  }

  /// Rendered slice with seeded Gaussian noise, quantized to 16-bit levels.
  Image render(int z) const {
    Image img = render_clean(z);
    std::mt19937_64 rng(p_.seed * 1000003ULL + static_cast<std::uint64_t>(z) * 7919ULL + 17ULL);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (auto& v : img.values()) {
      double x = v + (p_.noise_level > 0.0 ? p_.noise_level * noise(rng) : 0.0);
      x = std::clamp(x, 0.0, 1.0);
      v = static_cast<float>(std::round(x * 65535.0) / 65535.0);
    }
    return img;
  }

  /// Arc-length position on the (unshifted) arch.
  Point2 arch_point(double s) const { return arch_.point(arch_.t_at(s)); }

 private:
  PhantomParams p_;
  PhantomLayout layout_;
  synth_detail::Arch arch_;
};

inline PhantomPatient generate_patient(const PhantomParams& params, int n_crown, int n_root) {
  if (n_crown < 1 || n_root < 0) fail(ErrorKind::InvalidArgument, "phantom parameter out of range: slice counts");
  PhantomRenderer renderer(params);
  PhantomPatient out;
  out.params = params;
  out.axis = renderer.layout().axis;
  out.stack.mm_per_px = params.mm_per_px;
  out.stack.patient_id = "p" + std::to_string(params.seed);
  for (int z = 0; z < n_crown + n_root; ++z) {
    out.stack.slices.push_back(renderer.render(z));
    out.stack.z_indices.push_back(z);
    (z < n_crown ? out.stack.crown_z : out.stack.root_z).push_back(z);
    const auto gt = out.axis.at(z);
    out.annotations.push_back({gt.x, gt.y, z});
  }
  return out;
}

enum class PhantomKind { Easy, Decoy, Mixed };

inline PhantomKind parse_phantom_kind(const std::string& s) {
  if (s == "easy") return PhantomKind::Easy;
  if (s == "decoy") return PhantomKind::Decoy;
  if (s == "mixed") return PhantomKind::Mixed;
  fail(ErrorKind::Config, "unknown phantom kind '" + s + "' (easy|decoy|mixed)");
}

inline const char* to_string(PhantomKind k) {
  switch (k) {
    case PhantomKind::Easy: return "easy";
    case PhantomKind::Decoy: return "decoy";
    case PhantomKind::Mixed: return "mixed";
  }
  return "?";
}

/// Draw a valid parameter set. Spacing follows the clinical 9.71-14.72 mm
/// range; the tooth count is the largest that fits the arch (at most 12).
inline PhantomParams sample_params(std::uint64_t seed, PhantomKind kind, double noise_level = 0.02,
                                   int image_size = 776) {
  std::mt19937_64 rng(seed ^ 0x9E3779B97F4A7C15ULL);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  PhantomParams p;
  p.seed = seed;
  p.image_size = image_size;
  // Field of view is fixed; smaller renders get coarser pixels.
  p.mm_per_px = 0.2 * 776.0 / image_size;
  p.slice_spacing_px = 5.0 * image_size / 776.0;
  p.noise_level = noise_level;
  p.spacing_mm = 9.71 + (14.72 - 9.71) * unit(rng);
  p.shrink_rate = 0.02 + 0.03 * unit(rng);
  p.implant_axis_tilt = 8.0 * unit(rng);
  p.tilt_direction = 360.0 * unit(rng);
  const bool decoy = kind == PhantomKind::Decoy || (kind == PhantomKind::Mixed && unit(rng) < 0.5);
  p.decoy_gap_scale = decoy ? 1.0 + 0.15 * unit(rng) : 1.0;

  const double arc = synth_detail::Arch(image_size / 776.0).length();
  const double s = p.spacing_mm / p.mm_per_px;
  const double extra = decoy ? 2.0 * synth_detail::kToothHalfWidth * s + p.decoy_gap_scale * s - s : 0.0;
  int n = 12;
  while (n > 6 && (n - 1) * s + extra + s > arc) --n;
  p.n_teeth = n;
  p.missing_index = 1 + static_cast<int>(unit(rng) * (n - 2));
  p.missing_index = std::clamp(p.missing_index, 1, n - 2);
  p.decoy_index = -1;
  if (decoy) {
    std::vector<int> options;
    for (int k = 0; k + 1 < n; ++k)
      if (std::abs(k - p.missing_index) >= 2 && std::abs(k + 1 - p.missing_index) >= 2) options.push_back(k);
    if (!options.empty()) {
      p.decoy_index = options[static_cast<std::size_t>(unit(rng) * static_cast<double>(options.size())) %
                              options.size()];
    } else {
      p.decoy_gap_scale = 1.0;
    }
  }
  return p;
}

// --- augmentation -----------------------------------------------------------

struct AugmentParams {
  bool flip = false;
  double scale = 1.0;
  /// Translation of the crop window in output pixels.
  double shift_x = 0.0;
  double shift_y = 0.0;
  double contrast = 1.0;
  double brightness = 0.0;

  bool geometric_identity() const { return !flip && scale == 1.0 && shift_x == 0.0 && shift_y == 0.0; }
};

/// Forward map of a point: scale about the image centre, shift, then flip.
inline Point2 augment_point(Point2 p, ImageSize size, const AugmentParams& a) {
  const double w = static_cast<double>(size.width), h = static_cast<double>(size.height);
  double x = a.scale * (p.x - w / 2.0) + w / 2.0 - a.shift_x;
  double y = a.scale * (p.y - h / 2.0) + h / 2.0 - a.shift_y;
  if (a.flip) x = w - x;
  return {x, y};
}

inline Image augment_image(const Image& image, const AugmentParams& a) {
  const double w = static_cast<double>(image.width()), h = static_cast<double>(image.height());
  Image out(image.height(), image.width(), 0.0f);
  const auto sample = [&](double x, double y) -> double {
    const double fx = x - 0.5, fy = y - 0.5;
    const auto x0 = static_cast<std::ptrdiff_t>(std::floor(fx)), y0 = static_cast<std::ptrdiff_t>(std::floor(fy));
    const double tx = fx - static_cast<double>(x0), ty = fy - static_cast<double>(y0);
    double acc = 0.0;
    for (int dy = 0; dy <= 1; ++dy)
      for (int dx = 0; dx <= 1; ++dx) {
        const auto xx = x0 + dx, yy = y0 + dy;
        if (xx < 0 || yy < 0 || xx >= static_cast<std::ptrdiff_t>(image.width()) ||
            yy >= static_cast<std::ptrdiff_t>(image.height()))
          continue;
        acc += (dx ? tx : 1.0 - tx) * (dy ? ty : 1.0 - ty) *
               image(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
      }
    return acc;
  };
  for (std::size_t r = 0; r < image.height(); ++r) {
    for (std::size_t c = 0; c < image.width(); ++c) {
      double xo = static_cast<double>(c) + 0.5;
      const double yo = static_cast<double>(r) + 0.5;
      if (a.flip) xo = w - xo;
      const double xi = (xo + a.shift_x - w / 2.0) / a.scale + w / 2.0;
      const double yi = (yo + a.shift_y - h / 2.0) / a.scale + h / 2.0;
      const double v = a.geometric_identity() ? image(r, c) : sample(xi, yi);
      out(r, c) = static_cast<float>(std::clamp(a.contrast * v + a.brightness, 0.0, 1.0));
    }
  }
  return out;
}

struct AugmentRanges {
  bool flip = true;
  double scale_min = 0.85;
  double scale_max = 1.15;
  double max_shift_frac = 0.1;
  double contrast_jitter = 0.15;
  double brightness_jitter = 0.05;
  int max_retries = 10;
};

/// Sample geometric + photometric parameters that keep the annotation inside
/// the image; after max_retries failures the geometry falls back to identity.
inline AugmentParams sample_augment(std::mt19937_64& rng, ImageSize size, Point2 annotation,
                                    const AugmentRanges& ranges = {}) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  AugmentParams a;
  a.contrast = 1.0 + ranges.contrast_jitter * (2.0 * unit(rng) - 1.0);
  a.brightness = ranges.brightness_jitter * (2.0 * unit(rng) - 1.0);
  for (int attempt = 0; attempt < ranges.max_retries; ++attempt) {
    AugmentParams g = a;
    g.flip = ranges.flip && unit(rng) < 0.5;
    g.scale = ranges.scale_min + (ranges.scale_max - ranges.scale_min) * unit(rng);
    g.shift_x = ranges.max_shift_frac * static_cast<double>(size.width) * (2.0 * unit(rng) - 1.0);
    g.shift_y = ranges.max_shift_frac * static_cast<double>(size.height) * (2.0 * unit(rng) - 1.0);
    const auto q = augment_point(annotation, size, g);
    if (q.x >= 0.0 && q.y >= 0.0 && q.x < static_cast<double>(size.width) && q.y < static_cast<double>(size.height))
      return g;
  }
  return a;
}

inline std::pair<Image, ImplantAnnotation> augment(const Image& image, const ImplantAnnotation& ann,
                                                   const AugmentParams& a) {
  const ImageSize size{image.height(), image.width()};
  const auto q = augment_point({ann.x, ann.y}, size, a);
  return {augment_image(image, a), {q.x, q.y, ann.z}};
}

}  // namespace tsipr
