#include <tsipr/losses.hpp>

#include <gtest/gtest.h>

#include <functional>

using namespace tsipr;

namespace {

auto f64() { return torch::TensorOptions().dtype(torch::kFloat64); }

// Central differences against autograd for a scalar function of one tensor.
double max_grad_error(const std::function<torch::Tensor(const torch::Tensor&)>& f, torch::Tensor x,
                      double h = 1e-6) {
  x = x.detach().clone().set_requires_grad(true);
  const auto y = f(x);
  y.backward();
  const auto analytic = x.grad().clone();
  auto flat = x.detach().clone().view(-1);
  double worst = 0.0;
  for (int64_t i = 0; i < flat.numel(); ++i) {
    const double orig = flat[i].item<double>();
    flat[i] = orig + h;
    const double up = f(flat.view(x.sizes())).item<double>();
    flat[i] = orig - h;
    const double down = f(flat.view(x.sizes())).item<double>();
    flat[i] = orig;
    const double numeric = (up - down) / (2 * h);
    const double a = analytic.view(-1)[i].item<double>();
    worst = std::max(worst, std::abs(numeric - a) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

}  // namespace

TEST(Focal, HandCases) {
  auto pred = torch::full({1, 1, 1, 1}, 0.5, f64());
  auto tgt = torch::ones({1, 1, 1, 1}, f64());
  EXPECT_NEAR(focal_heatmap_loss(pred, tgt).item<double>(), 0.17328679513998632, 1e-12);

  pred = torch::tensor({0.5, 0.25}, f64()).view({1, 1, 1, 2});
  tgt = torch::tensor({1.0, 0.5}, f64()).view({1, 1, 1, 2});
  EXPECT_NEAR(focal_heatmap_loss(pred, tgt).item<double>(), 0.1744105532355011, 1e-12);
}

TEST(Focal, PerfectPredictionIsNearZero) {
  auto tgt = torch::zeros({2, 1, 8, 8}, f64());
  tgt.index_put_({0, 0, 3, 4}, 1.0);
  tgt.index_put_({1, 0, 6, 1}, 1.0);
  const auto pred = torch::where(tgt.eq(1.0), torch::full_like(tgt, 1 - 1e-6), torch::full_like(tgt, 1e-6));
  EXPECT_LT(focal_heatmap_loss(pred, tgt).item<double>(), 1e-4);
}

TEST(Focal, RejectsTargetWithoutPositives) {
  try {
    focal_heatmap_loss(torch::full({1, 1, 4, 4}, 0.3), torch::full({1, 1, 4, 4}, 0.99));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NoPositiveCells);
  }
  EXPECT_THROW(focal_heatmap_loss(torch::zeros({1, 1, 4, 4}), torch::zeros({1, 1, 4, 5})), Error);
}

TEST(Focal, DecreasesAsPositiveCellRises) {
  auto tgt = torch::zeros({1, 1, 5, 5}, f64());
  tgt.index_put_({0, 0, 2, 2}, 1.0);
  double prev = 1e300;
  for (double v : {0.05, 0.2, 0.4, 0.6, 0.8, 0.95, 0.999}) {
    auto pred = torch::full({1, 1, 5, 5}, 0.1, f64());
    pred.index_put_({0, 0, 2, 2}, v);
    const double l = focal_heatmap_loss(pred, tgt).item<double>();
    EXPECT_LT(l, prev);
    prev = l;
  }
}

TEST(Focal, GradientMatchesFiniteDifferences) {
  torch::manual_seed(1);
  auto tgt = torch::rand({1, 1, 4, 4}, f64()) * 0.9;
  tgt.index_put_({0, 0, 1, 2}, 1.0);
  const auto x = torch::rand({1, 1, 4, 4}, f64()) * 0.8 + 0.1;
  EXPECT_LT(max_grad_error([&](const torch::Tensor& p) { return focal_heatmap_loss(p, tgt); }, x), 1e-3);
}

TEST(OffsetL1, Example) {
  auto pred = torch::zeros({1, 2, 4, 4}, f64());
  auto tgt = torch::zeros({1, 2, 4, 4}, f64());
  auto mask = torch::zeros({1, 1, 4, 4}, f64());
  mask.index_put_({0, 0, 1, 1}, 1.0);
  tgt.index_put_({0, 0, 1, 1}, 0.5);
  pred.index_put_({0, 0, 1, 1}, 0.25);
  tgt.index_put_({0, 1, 1, 1}, 0.25);
  pred.index_put_({0, 1, 1, 1}, 0.5);
  EXPECT_NEAR(offset_l1_loss(pred, tgt, mask).item<double>(), 0.25, 1e-12);

  // Background cells do not contribute.
  pred.index_put_({0, 0, 3, 3}, 7.0);
  pred.index_put_({0, 1, 0, 2}, -3.0);
  EXPECT_NEAR(offset_l1_loss(pred, tgt, mask).item<double>(), 0.25, 1e-12);
  EXPECT_NEAR(offset_l1_loss(pred, tgt, mask.squeeze(1)).item<double>(), 0.25, 1e-12);
  EXPECT_THROW(offset_l1_loss(pred, tgt, torch::zeros({1, 1, 4, 4})), Error);
}

TEST(OffsetL1, GradientMatchesFiniteDifferences) {
  torch::manual_seed(2);
  const auto tgt = torch::rand({2, 2, 3, 3}, f64());
  const auto mask = (torch::rand({2, 1, 3, 3}, f64()) > 0.5).to(torch::kFloat64);
  // Keep predictions away from the kinks of |x|.
  const auto x = tgt + 0.2 * torch::sign(torch::randn({2, 2, 3, 3}, f64())) + 0.05 * torch::rand({2, 2, 3, 3}, f64());
  EXPECT_LT(max_grad_error([&](const torch::Tensor& p) { return offset_l1_loss(p, tgt, mask); }, x), 1e-3);
}

TEST(MspenetLoss, IsSumOfParts) {
  torch::manual_seed(3);
  HeatmapTargets t{torch::rand({2, 1, 6, 6}, f64()) * 0.9, torch::rand({2, 2, 6, 6}, f64()),
                   torch::zeros({2, 1, 6, 6}, f64())};
  t.heatmap.index_put_({0, 0, 1, 1}, 1.0);
  t.heatmap.index_put_({1, 0, 4, 2}, 1.0);
  t.pos_mask.index_put_({0, 0, 1, 1}, 1.0);
  t.pos_mask.index_put_({1, 0, 4, 2}, 1.0);
  const HeatmapPrediction p{torch::rand({2, 1, 6, 6}, f64()) * 0.9 + 0.05, torch::rand({2, 2, 6, 6}, f64())};
  const double whole = mspenet_loss(p, t).item<double>();
  const double parts = focal_heatmap_loss(p.heatmap, t.heatmap).item<double>() +
                       offset_l1_loss(p.offsets, t.offsets, t.pos_mask).item<double>();
  EXPECT_NEAR(whole, parts, 1e-12);
}

TEST(GiouTensor, MatchesScalarReference) {
  torch::manual_seed(4);
  const auto lo = torch::rand({50, 2}, f64()) * 20;
  const auto a = torch::cat({lo, lo + torch::rand({50, 2}, f64()) * 10 + 0.1}, 1);
  const auto lo2 = torch::rand({50, 2}, f64()) * 20;
  const auto b = torch::cat({lo2, lo2 + torch::rand({50, 2}, f64()) * 10 + 0.1}, 1);
  const auto g = giou_tensor(a, b);
  for (int64_t i = 0; i < 50; ++i) {
    const DetBox da{a[i][0].item<double>(), a[i][1].item<double>(), a[i][2].item<double>(), a[i][3].item<double>()};
    const DetBox db{b[i][0].item<double>(), b[i][1].item<double>(), b[i][2].item<double>(), b[i][3].item<double>()};
    EXPECT_NEAR(g[i].item<double>(), giou(da, db), 1e-9);
  }
  const auto hand = giou_tensor(torch::tensor({{0.0, 0.0, 2.0, 2.0}}, f64()), torch::tensor({{1.0, 1.0, 3.0, 3.0}}, f64()));
  EXPECT_NEAR(hand.item<double>(), 1.0 / 7.0 - 2.0 / 9.0, 1e-9);
}

TEST(GiouTensor, GradientMatchesFiniteDifferences) {
  const auto tgt = torch::tensor({{1.0, 1.0, 3.0, 3.5}, {10.0, 0.0, 12.0, 2.0}}, f64());
  const auto x = torch::tensor({{0.2, 0.5, 2.3, 2.9}, {4.0, 1.0, 6.5, 4.0}}, f64());
  EXPECT_LT(max_grad_error([&](const torch::Tensor& b) { return (1.0 - giou_tensor(b, tgt)).sum(); }, x), 1e-3);
}

namespace {
struct IrdFixture {
  torch::Tensor cls, boxes, conf;
  IrdTargets t;
};

IrdFixture ird_fixture() {
  torch::manual_seed(5);
  IrdFixture f;
  f.cls = torch::randn({2, 4, 4}, f64());
  f.conf = torch::randn({2, 4, 4}, f64());
  const auto lo = torch::rand({2, 4, 4, 2}, f64()) * 50;
  f.boxes = torch::cat({lo, lo + 20 + torch::rand({2, 4, 4, 2}, f64()) * 10}, -1);
  f.t.pos = torch::zeros({2, 4, 4}, torch::kBool);
  f.t.pos.index_put_({0, 1, 2}, true);
  f.t.pos.index_put_({1, 3, 0}, true);
  f.t.boxes = f.boxes + torch::randn({2, 4, 4, 4}, f64()) * 3;
  return f;
}
}  // namespace

TEST(IrdLoss, TotalIsUnweightedSum) {
  const auto f = ird_fixture();
  const auto parts = ird_loss_parts(f.cls, f.boxes, f.conf, f.t);
  const double sum = parts.cls.item<double>() + parts.loc.item<double>() + parts.conf.item<double>();
  EXPECT_NEAR(ird_loss(f.cls, f.boxes, f.conf, f.t).item<double>(), sum, 1e-12);
  EXPECT_GT(parts.loc.item<double>(), 0.0);
}

TEST(IrdLoss, ConfidenceIsNormalisedByPositives) {
  IrdTargets t;
  t.pos = torch::zeros({1, 3, 3}, torch::kBool);
  const auto zeros = torch::zeros({1, 3, 3}, f64());
  const auto boxes = torch::tensor({0.0, 0.0, 1.0, 1.0}, f64()).expand({1, 3, 3, 4}).contiguous();
  t.boxes = boxes;
  // No positives: summed over all nine cells.
  EXPECT_NEAR(ird_loss_parts(zeros, boxes, zeros, t).conf.item<double>(), 9 * std::log(2.0), 1e-12);
  t.pos.index_put_({0, 0, 0}, true);
  t.pos.index_put_({0, 2, 1}, true);
  EXPECT_NEAR(ird_loss_parts(zeros, boxes, zeros, t).conf.item<double>(), 4.5 * std::log(2.0), 1e-12);
}

TEST(IrdLoss, PerfectPredictionIsNearZero) {
  auto f = ird_fixture();
  const auto pos = f.t.pos.to(torch::kFloat64);
  const auto cls = torch::full_like(f.cls, 20.0);
  const auto conf = (pos * 2 - 1) * 20.0;
  EXPECT_LT(ird_loss(cls, f.t.boxes, conf, f.t).item<double>(), 1e-3);
}

TEST(IrdLoss, NoPositivesStillTrainsConfidence) {
  auto f = ird_fixture();
  f.t.pos.zero_();
  const auto parts = ird_loss_parts(f.cls, f.boxes, f.conf, f.t);
  EXPECT_DOUBLE_EQ(parts.cls.item<double>(), 0.0);
  EXPECT_DOUBLE_EQ(parts.loc.item<double>(), 0.0);
  EXPECT_GT(parts.conf.item<double>(), 0.0);
}

TEST(IrdLoss, GradientMatchesFiniteDifferences) {
  const auto f = ird_fixture();
  EXPECT_LT(max_grad_error([&](const torch::Tensor& c) { return ird_loss(c, f.boxes, f.conf, f.t); }, f.cls), 1e-3);
  EXPECT_LT(max_grad_error([&](const torch::Tensor& c) { return ird_loss(f.cls, f.boxes, c, f.t); }, f.conf), 1e-3);
  EXPECT_LT(max_grad_error([&](const torch::Tensor& b) { return ird_loss(f.cls, b, f.conf, f.t); }, f.boxes), 1e-3);
}

TEST(IrdLoss, ShapeChecks) {
  const auto f = ird_fixture();
  EXPECT_THROW(ird_loss(f.cls, f.boxes, f.conf.slice(1, 0, 3), f.t), Error);
  IrdTargets bad = f.t;
  bad.pos = bad.pos.slice(2, 0, 3);
  EXPECT_THROW(ird_loss(f.cls, f.boxes, f.conf, bad), Error);
}
