#pragma once

// Split-level plumbing shared by the command line tool and the test suites:
// dataset specifications, batch inference over a split, and metric reports.

#include <tsipr/config.hpp>
#include <tsipr/evaluation.hpp>
#include <tsipr/io.hpp>
#include <tsipr/pipeline.hpp>
#include <tsipr/train.hpp>

#include <fstream>
#include <optional>

namespace tsipr {

inline std::vector<std::pair<std::string, PhantomKind>> split_kinds(const RunConfig& c) {
  return {{"train", parse_phantom_kind(c.data.train_kind)},
       {"val", parse_phantom_kind(c.data.train_kind)},
       {"test_easy", PhantomKind::Easy},
       {"test_decoy", PhantomKind::Decoy}};
}

/// Phantom seeds are derived from the run seed, the split and the index, so
/// patient ids never collide across splits.
inline std::vector<DatasetEntry> dataset_entries(const RunConfig& c) {
  const int counts[] = {c.data.n_train, c.data.n_val, c.data.n_test_easy, c.data.n_test_decoy};
  std::vector<DatasetEntry> out;
  std::uint64_t split_index = 0;
  for (const auto& [name, kind] : split_kinds(c)) {
    const int n = counts[split_index];
    for (int i = 0; i < n; ++i) {
      const std::uint64_t seed = c.seed * 1'000'000ULL + (split_index + 1) * 100'000ULL + static_cast<std::uint64_t>(i);
      out.push_back({sample_params(seed, kind, c.data.noise_level, c.data.image_size), name, kind});
    }
    ++split_index;
  }
  return out;
}

struct Models {
  MSPENet mspenet{nullptr};
  IRDNet ird{nullptr};
  std::optional<DetectionsByImage> external;

  RegionSource region(double conf_threshold) {
    RegionSource r;
    r.conf_threshold = conf_threshold;
    if (external) r.external = &*external;
    else if (!ird.is_empty()) r.net = &ird;
    return r;
  }
};

inline std::vector<PatientPrediction> infer_split(const fs::path& root, const std::string& split, Models& models,
                                                  const InferenceConfig& cfg, double conf_threshold) {
  if (models.mspenet.is_empty()) fail(ErrorKind::InvalidArgument, "inference needs a regression model");
  models.mspenet->eval();
  if (!models.ird.is_empty()) models.ird->eval();
  const auto manifest = read_manifest(root);
  std::vector<PatientPrediction> out;
  auto region = models.region(conf_threshold);
  for (const auto& p : manifest.split(split)) {
    const auto rec = read_patient(root / p.dir);
    out.push_back(tsipr_infer_patient(rec.stack, models.mspenet, region, cfg));
  }
  return out;
}

/// Oracle predictions: every crown annotation becomes a peak with score 1.
inline std::vector<PatientPrediction> ground_truth_predictions(const fs::path& root, const std::string& split,
                                                               int min_points) {
  const auto manifest = read_manifest(root);
  std::vector<PatientPrediction> out;
  for (const auto& p : manifest.split(split)) {
    const auto rec = read_patient(root / p.dir);
    PatientPrediction pred;
    pred.patient_id = rec.stack.patient_id;
    std::vector<Point3> pts;
    for (int z : rec.stack.crown_z) {
      CrownSliceResult s;
      s.z = z;
      if (const auto* a = rec.annotation_at(z)) {
        s.fused.push_back({a->x, a->y, 1.0});
        pts.push_back({a->x, a->y, static_cast<double>(z)});
      }
      s.unfused = s.fused;
      pred.crown.push_back(std::move(s));
    }
    try {
      auto root_pred = project_to_root(fit_implant_line(pts, min_points), rec.stack.root_z);
      for (const auto& q : pts) root_pred.crown_slices.push_back(static_cast<int>(q.z));
      pred.root = std::move(root_pred);
    } catch (const Error& e) {
      pred.failure = e.what();
    }
    out.push_back(std::move(pred));
  }
  return out;
}

inline void write_predictions(const std::string& path, const std::vector<PatientPrediction>& preds) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Io, "cannot write " + path);
  for (const auto& p : preds) out << to_json(p).dump() << '\n';
}

inline std::vector<PatientPrediction> read_predictions(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::MissingPath, "cannot open predictions " + path);
  std::vector<PatientPrediction> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(prediction_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      fail(ErrorKind::MalformedRecord, path + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

struct StreamMetrics {
  PRResult pr;
  double mre_px = 0.0;
  double mre_mm = 0.0;
  int matched = 0;
};

struct EvalReport {
  std::string split;
  int patients = 0;
  int failures = 0;
  StreamMetrics fused;
  StreamMetrics unfused;
  double root_mean_error_px = 0.0;
  double root_within_5px = 0.0;  // fraction of patients with every root slice within 5 px
  int root_slices = 0;
};

inline StreamMetrics stream_metrics(std::span<const ImageDetections> images, const EvalConfig& cfg, double mm_per_px) {
  StreamMetrics m;
  m.pr = pr_curve_and_ap(images, cfg);
  m.matched = static_cast<int>(m.pr.matches.size());
  if (!m.pr.matches.empty()) {
    m.mre_px = mean_radial_error(m.pr.matches);
    m.mre_mm = m.mre_px * mm_per_px;
  } else {
    m.mre_px = m.mre_mm = std::numeric_limits<double>::quiet_NaN();
  }
  return m;
}

inline EvalReport evaluate_predictions(const fs::path& root, const std::string& split,
                                       const std::vector<PatientPrediction>& preds, const EvalConfig& cfg) {
  const auto manifest = read_manifest(root);
  std::map<std::string, const PatientPrediction*> by_id;
  for (const auto& p : preds) by_id[p.patient_id] = &p;
  EvalReport r;
  r.split = split;
  std::vector<ImageDetections> fused, unfused;
  double root_err_sum = 0.0;
  int within = 0;
  double mm_per_px = 0.2;
  for (const auto& mp : manifest.split(split)) {
    const auto rec = read_patient(root / mp.dir);
    mm_per_px = rec.stack.mm_per_px;
    ++r.patients;
    const auto it = by_id.find(rec.stack.patient_id);
    const PatientPrediction* pred = it == by_id.end() ? nullptr : it->second;
    for (int z : rec.stack.crown_z) {
      ImageDetections f, u;
      if (const auto* a = rec.annotation_at(z)) {
        f.gts.push_back({a->x, a->y});
        u.gts.push_back({a->x, a->y});
      }
      if (pred)
        for (const auto& s : pred->crown)
          if (s.z == z) {
            f.preds = s.fused;
            u.preds = s.unfused;
          }
      fused.push_back(std::move(f));
      unfused.push_back(std::move(u));
    }
    if (!pred || !pred->root) {
      ++r.failures;
      continue;
    }
    bool all_within = true;
    for (const auto& q : pred->root->positions) {
      const auto* a = rec.annotation_at(static_cast<int>(std::lround(q.z)));
      if (!a) continue;
      const double e = std::hypot(q.x - a->x, q.y - a->y);
      root_err_sum += e;
      ++r.root_slices;
      all_within = all_within && e < 5.0;
    }
    within += all_within ? 1 : 0;
  }
  if (r.patients == 0) fail(ErrorKind::MissingPath, "split '" + split + "' has no patients");
  r.fused = stream_metrics(fused, cfg, mm_per_px);
  r.unfused = stream_metrics(unfused, cfg, mm_per_px);
  r.root_mean_error_px = r.root_slices ? root_err_sum / r.root_slices : std::numeric_limits<double>::quiet_NaN();
  r.root_within_5px = static_cast<double>(within) / r.patients;
  return r;
}

inline json to_json(const StreamMetrics& m) {
  const auto& pr = m.pr;
  json sweep = json::array();
  for (const auto& p : pr.sweep)
    sweep.push_back({{"threshold", p.threshold}, {"precision", p.precision}, {"recall", p.recall}, {"f1", p.f1}});
  const auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  return json{{"ap", pr.ap},           {"best_f1", pr.best_f1}, {"mre_px", num(m.mre_px)}, {"mre_mm", num(m.mre_mm)},
              {"matched", m.matched},  {"total_gt", pr.total_gt}, {"sweep", sweep}};
}

inline json to_json(const EvalReport& r) {
  const auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  return json{{"split", r.split},
              {"patients", r.patients},
              {"failures", r.failures},
              {"fused", to_json(r.fused)},
              {"unfused", to_json(r.unfused)},
              {"root_mean_error_px", num(r.root_mean_error_px)},
              {"root_within_5px", r.root_within_5px},
              {"root_slices", r.root_slices}};
}

}  // namespace tsipr
