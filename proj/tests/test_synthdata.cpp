#include <tsipr/io.hpp>
#include <tsipr/synthdata.hpp>

#include <gtest/gtest.h>

#include <random>

#include <unistd.h>

using namespace tsipr;

namespace {

PhantomParams small_params(std::uint64_t seed = 1) {
  auto p = sample_params(seed, PhantomKind::Easy, 0.02, 256);
  return p;
}

double bilinear(const Image& img, double x, double y) {
  const double fx = x - 0.5, fy = y - 0.5;
  const auto x0 = static_cast<std::size_t>(std::floor(fx)), y0 = static_cast<std::size_t>(std::floor(fy));
  const double tx = fx - std::floor(fx), ty = fy - std::floor(fy);
  return (1 - tx) * (1 - ty) * img(y0, x0) + tx * (1 - ty) * img(y0, x0 + 1) + (1 - tx) * ty * img(y0 + 1, x0) +
         tx * ty * img(y0 + 1, x0 + 1);
}

}  // namespace

TEST(Phantom, SameSeedIsBitIdentical) {
  const auto p = small_params(42);
  const auto a = generate_patient(p, 3, 2);
  const auto b = generate_patient(p, 3, 2);
  EXPECT_EQ(a.stack, b.stack);
  EXPECT_EQ(a.annotations, b.annotations);
  const auto c = generate_patient(small_params(43), 3, 2);
  EXPECT_NE(a.stack.slices[0], c.stack.slices[0]);
}

TEST(Phantom, ForegroundShrinksWithDepth) {
  auto p = small_params(3);
  p.shrink_rate = 0.04;
  p.noise_level = 0.0;
  const PhantomRenderer r(p);
  double prev = 1e300;
  for (int z = 0; z < 6; ++z) {
    const auto img = r.render_clean(z);
    double area = 0;
    for (float v : img.values()) area += v > 0.6f;
    EXPECT_LT(area, prev);
    prev = area;
  }
}

TEST(Phantom, GroundTruthIsCollinearAlongAxis) {
  const auto patient = generate_patient(sample_params(5, PhantomKind::Easy, 0.02, 256), 4, 3);
  ASSERT_EQ(patient.annotations.size(), 7u);
  for (const auto& a : patient.annotations) {
    const auto q = patient.axis.at(a.z);
    EXPECT_DOUBLE_EQ(a.x, q.x);
    EXPECT_DOUBLE_EQ(a.y, q.y);
  }
  const auto& a0 = patient.annotations.front();
  const auto& a1 = patient.annotations.back();
  for (const auto& a : patient.annotations) {
    const double t = static_cast<double>(a.z - a0.z) / (a1.z - a0.z);
    EXPECT_NEAR(a.x, a0.x + t * (a1.x - a0.x), 1e-9);
    EXPECT_NEAR(a.y, a0.y + t * (a1.y - a0.y), 1e-9);
  }
  EXPECT_EQ(patient.stack.crown_z, (std::vector<int>{0, 1, 2, 3}));
  EXPECT_EQ(patient.stack.root_z, (std::vector<int>{4, 5, 6}));
}

TEST(Phantom, ImplantSiteIsToothFree) {
  auto p = sample_params(8, PhantomKind::Easy);
  p.noise_level = 0;
  const PhantomRenderer r(p);
  const auto img = r.render_clean(0);
  const auto site = r.layout().axis.at(0);
  EXPECT_LT(img(static_cast<std::size_t>(site.y), static_cast<std::size_t>(site.x)), 0.5f);
}

TEST(Phantom, DecoyGapWidthMeasuredFromImage) {
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    auto p = sample_params(seed, PhantomKind::Decoy);
    ASSERT_GE(p.decoy_index, 0);
    p.noise_level = 0;
    const PhantomRenderer r(p);
    const auto img = r.render_clean(0);
    const auto& slots = r.layout().slot_arc;
    const double s0 = slots[static_cast<std::size_t>(p.decoy_index)];
    const double s1 = slots[static_cast<std::size_t>(p.decoy_index + 1)];
    // Walk the arch centre line between the two tooth centres and find where
    // the intensity leaves / re-enters the tooth (half level between tooth rim and ridge).
    // The pulp is darker, so start past it.
    const double level = 0.5 * (0.85 + 0.30);
    const double skip = 0.5 * r.layout().half_width(p, 0);
    double left = -1, right = -1;
    for (double s = s0 + skip; s <= s1 - skip; s += 0.01) {
      const auto q = r.arch_point(s);
      const bool in_tooth = bilinear(img, q.x, q.y) > level;
      if (left < 0 && !in_tooth) left = s;
      if (left >= 0 && !in_tooth) right = s;
    }
    const double measured = right - left;
    const double expected = p.decoy_gap_scale * r.layout().spacing_px;
    EXPECT_NEAR(measured, expected, 1.0) << "seed " << seed;
    EXPECT_GE(measured, expected - 1.0);
  }
}

TEST(Phantom, ParameterValidation) {
  auto p = small_params();
  p.missing_index = p.n_teeth;
  EXPECT_THROW(generate_patient(p, 1, 0), Error);
  p = small_params();
  p.decoy_index = p.missing_index;
  EXPECT_THROW(generate_patient(p, 1, 0), Error);
  p = small_params();
  EXPECT_THROW(generate_patient(p, 0, 0), Error);
}

TEST(Phantom, SampledParamsRespectClinicalSpacing) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto p = sample_params(s, PhantomKind::Mixed);
    EXPECT_GE(p.spacing_mm, 9.71);
    EXPECT_LE(p.spacing_mm, 14.72);
    EXPECT_NO_THROW(validate_params(p));
    EXPECT_NO_THROW(phantom_layout(p));
  }
}

TEST(Augment, FlipAndIdentity) {
  AugmentParams a;
  a.flip = true;
  const auto q = augment_point({100, 37}, {512, 512}, a);
  EXPECT_DOUBLE_EQ(q.x, 412.0);
  EXPECT_DOUBLE_EQ(q.y, 37.0);
  const auto img = generate_patient(small_params(), 1, 0).stack.slices[0];
  const auto [out, ann] = augment(img, {10.5, 20.25, 0}, AugmentParams{});
  EXPECT_EQ(out, img);
  EXPECT_EQ(ann, (ImplantAnnotation{10.5, 20.25, 0}));
}

TEST(Augment, RandomGeometryKeepsAnnotationInBounds) {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(0, 511.99);
  AugmentRanges ranges;
  ranges.max_shift_frac = 0.4;
  for (int i = 0; i < 1000; ++i) {
    const Point2 p{u(rng), u(rng)};
    const auto a = sample_augment(rng, {512, 512}, p, ranges);
    const auto q = augment_point(p, {512, 512}, a);
    ASSERT_TRUE(q.x >= 0 && q.y >= 0 && q.x < 512 && q.y < 512);
  }
}

TEST(Augment, FiducialFollowsAnnotation) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(60, 196);
  for (int i = 0; i < 50; ++i) {
    // Smooth blob centred on the annotation; after warping, its intensity
    // centroid must land on the warped annotation.
    const Point2 p{u(rng), u(rng)};
    Image img(256, 256, 0.0f);
    for (std::size_t r = 0; r < 256; ++r)
      for (std::size_t c = 0; c < 256; ++c) {
        const double dx = c + 0.5 - p.x, dy = r + 0.5 - p.y;
        img(r, c) = static_cast<float>(std::exp(-(dx * dx + dy * dy) / (2 * 4.0 * 4.0)));
      }
    auto a = sample_augment(rng, {256, 256}, p, {});
    a.contrast = 1.0;
    a.brightness = 0.0;
    const auto [out, ann] = augment(img, {p.x, p.y, 0}, a);
    double sw = 0, sx = 0, sy = 0;
    for (std::size_t r = 0; r < 256; ++r)
      for (std::size_t c = 0; c < 256; ++c) {
        const double w = out(r, c);
        sw += w;
        sx += w * (c + 0.5);
        sy += w * (r + 0.5);
      }
    EXPECT_NEAR(sx / sw, ann.x, 0.5);
    EXPECT_NEAR(sy / sw, ann.y, 0.5);
  }
}

TEST(Augment, PhotometricLeavesCoordinates) {
  AugmentParams a;
  a.contrast = 1.2;
  a.brightness = 0.05;
  const auto q = augment_point({33, 44}, {128, 128}, a);
  EXPECT_EQ(q, (Point2{33, 44}));
}

class DatasetIo : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("tsipr_io_" + std::to_string(::getpid()));
    fs::remove_all(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

TEST_F(DatasetIo, PatientRoundtrip) {
  const auto patient = generate_patient(small_params(21), 2, 1);
  write_patient(dir_ / "p", patient.stack, patient.annotations);
  const auto rec = read_patient(dir_ / "p");
  EXPECT_EQ(rec.stack.z_indices, patient.stack.z_indices);
  EXPECT_EQ(rec.stack.patient_id, patient.stack.patient_id);
  EXPECT_EQ(rec.stack.crown_z, patient.stack.crown_z);
  EXPECT_EQ(rec.stack.root_z, patient.stack.root_z);
  EXPECT_DOUBLE_EQ(rec.stack.mm_per_px, patient.stack.mm_per_px);
  // Slices are rendered on the 16-bit grid, so the PNG roundtrip is exact.
  for (std::size_t i = 0; i < rec.stack.slices.size(); ++i) {
    const auto& a = rec.stack.slices[i];
    const auto& b = patient.stack.slices[i];
    ASSERT_TRUE(a.same_shape(b));
    for (std::size_t k = 0; k < a.size(); ++k) ASSERT_NEAR(a.values()[k], b.values()[k], 1e-7);
  }
  ASSERT_EQ(rec.annotations.size(), patient.annotations.size());
  for (std::size_t i = 0; i < rec.annotations.size(); ++i) {
    EXPECT_NEAR(rec.annotations[i].x, patient.annotations[i].x, 1e-9 * std::abs(patient.annotations[i].x));
    EXPECT_NEAR(rec.annotations[i].y, patient.annotations[i].y, 1e-9 * std::abs(patient.annotations[i].y));
    EXPECT_EQ(rec.annotations[i].z, patient.annotations[i].z);
  }
}

TEST_F(DatasetIo, ManifestCountsAndSplits) {
  std::vector<DatasetEntry> entries;
  for (int i = 0; i < 5; ++i)
    entries.push_back({sample_params(100 + i, PhantomKind::Easy, 0.02, 128), i < 3 ? "train" : "test", PhantomKind::Easy});
  entries.push_back({sample_params(200, PhantomKind::Decoy, 0.02, 128), "decoy", PhantomKind::Decoy});
  const auto m = render_dataset(entries, dir_, 2, 1);
  EXPECT_EQ(m.patients.size(), entries.size());
  const auto back = read_manifest(dir_);
  EXPECT_EQ(back.patients.size(), entries.size());
  EXPECT_EQ(back.split("train").size(), 3u);
  EXPECT_EQ(back.split("test").size(), 2u);
  EXPECT_EQ(back.split("decoy").size(), 1u);
  EXPECT_EQ(back.split("decoy")[0].kind, PhantomKind::Decoy);
  for (std::size_t i = 0; i < entries.size(); ++i) EXPECT_EQ(back.patients[i].params, entries[i].params);
  const auto rec = read_patient(dir_ / back.patients[0].dir);
  EXPECT_EQ(rec.stack, generate_patient(entries[0].params, 2, 1).stack);
}

TEST_F(DatasetIo, MalformedAnnotationReportsLine) {
  fs::create_directories(dir_);
  write_text(dir_ / "a.jsonl", "{\"x\":1,\"y\":2,\"z\":0}\n{\"x\":1,\n");
  try {
    read_annotations(dir_ / "a.jsonl");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::MalformedRecord);
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos);
  }
  EXPECT_THROW(read_patient(dir_ / "missing"), Error);
}
