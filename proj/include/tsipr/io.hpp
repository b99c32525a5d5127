#pragma once

// Dataset-on-disk layout:
//
//   <root>/manifest.json
//   <root>/<split>/<patient_id>/slice_<z>.png       16-bit grayscale
//   <root>/<split>/<patient_id>/annotations.jsonl   {"x":..,"y":..,"z":..} per line
//   <root>/<split>/<patient_id>/meta.json           mm_per_px, patient_id, crown_z, root_z

#include <tsipr/core.hpp>
#include <tsipr/synthdata.hpp>

#include <json.hpp>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <filesystem>
#include <fstream>
#include <regex>
#include <string>
#include <vector>

namespace tsipr {

namespace fs = std::filesystem;
using nlohmann::json;

inline void write_png16(const fs::path& path, const Image& img) {
  cv::Mat mat(static_cast<int>(img.height()), static_cast<int>(img.width()), CV_16UC1);
  for (std::size_t r = 0; r < img.height(); ++r) {
    auto* row = mat.ptr<std::uint16_t>(static_cast<int>(r));
    for (std::size_t c = 0; c < img.width(); ++c)
      row[c] = static_cast<std::uint16_t>(std::lround(std::clamp(static_cast<double>(img(r, c)), 0.0, 1.0) * 65535.0));
  }
  if (!cv::imwrite(path.string(), mat, {cv::IMWRITE_PNG_COMPRESSION, 3}))
    fail(ErrorKind::Io, "failed to write " + path.string());
}

/// 8- or 16-bit grayscale PNG normalized to [0,1].
inline Image read_png(const fs::path& path) {
  cv::Mat mat = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (mat.empty()) fail(ErrorKind::Io, "failed to read image " + path.string());
  if (mat.channels() != 1) fail(ErrorKind::Io, "expected a grayscale image: " + path.string());
  Image img(static_cast<std::size_t>(mat.rows), static_cast<std::size_t>(mat.cols));
  const double scale = mat.depth() == CV_16U ? 65535.0 : mat.depth() == CV_8U ? 255.0 : 0.0;
  if (scale == 0.0) fail(ErrorKind::Io, "unsupported bit depth in " + path.string());
  for (int r = 0; r < mat.rows; ++r)
    for (int c = 0; c < mat.cols; ++c) {
      const double v = mat.depth() == CV_16U ? mat.at<std::uint16_t>(r, c) : mat.at<std::uint8_t>(r, c);
      img(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = static_cast<float>(v / scale);
    }
  return img;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
  out << text;
}

inline json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::MissingPath, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorKind::MalformedRecord, path.string() + ": " + e.what());
  }
}

struct PatientRecord {
  CrownSliceStack stack;
  std::vector<ImplantAnnotation> annotations;

  const ImplantAnnotation* annotation_at(int z) const {
    for (const auto& a : annotations)
      if (a.z == z) return &a;
    return nullptr;
  }
};

inline void write_patient(const fs::path& dir, const CrownSliceStack& stack,
                          const std::vector<ImplantAnnotation>& annotations) {
  validate_stack(stack);
  fs::create_directories(dir);
  for (std::size_t i = 0; i < stack.slices.size(); ++i)
    write_png16(dir / ("slice_" + std::to_string(stack.z_indices[i]) + ".png"), stack.slices[i]);
  std::ofstream ann(dir / "annotations.jsonl");
  if (!ann) fail(ErrorKind::Io, "cannot write annotations in " + dir.string());
  for (const auto& a : annotations) ann << json{{"x", a.x}, {"y", a.y}, {"z", a.z}}.dump() << '\n';
  json meta{{"mm_per_px", stack.mm_per_px},
            {"patient_id", stack.patient_id},
            {"crown_z", stack.crown_z},
            {"root_z", stack.root_z}};
  write_text(dir / "meta.json", meta.dump(2) + "\n");
}

inline std::vector<ImplantAnnotation> read_annotations(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::MissingPath, "cannot open " + path.string());
  std::vector<ImplantAnnotation> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = json::parse(line);
      out.push_back({j.at("x").get<double>(), j.at("y").get<double>(), j.at("z").get<int>()});
    } catch (const json::exception& e) {
      fail(ErrorKind::MalformedRecord, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

inline PatientRecord read_patient(const fs::path& dir) {
  if (!fs::is_directory(dir)) fail(ErrorKind::MissingPath, "patient directory not found: " + dir.string());
  PatientRecord rec;
  const auto meta = read_json(dir / "meta.json");
  rec.stack.mm_per_px = meta.at("mm_per_px").get<double>();
  rec.stack.patient_id = meta.at("patient_id").get<std::string>();
  rec.stack.crown_z = meta.value("crown_z", std::vector<int>{});
  rec.stack.root_z = meta.value("root_z", std::vector<int>{});

  static const std::regex slice_re(R"(slice_(-?\d+)\.png)");
  std::vector<std::pair<int, fs::path>> slices;
  for (const auto& entry : fs::directory_iterator(dir)) {
    std::smatch m;
    const auto name = entry.path().filename().string();
    if (std::regex_match(name, m, slice_re)) slices.emplace_back(std::stoi(m[1].str()), entry.path());
  }
  std::sort(slices.begin(), slices.end());
  for (const auto& [z, path] : slices) {
    rec.stack.z_indices.push_back(z);
    rec.stack.slices.push_back(read_png(path));
  }
  validate_stack(rec.stack);
  rec.annotations = read_annotations(dir / "annotations.jsonl");
  const auto size = rec.stack.image_size();
  for (const auto& a : rec.annotations)
    if (!in_bounds(a, size)) fail(ErrorKind::OutOfBounds, "annotation outside image in " + dir.string());
  return rec;
}

// --- manifest ------------------------------------------------------------------

inline json params_to_json(const PhantomParams& p) {
  return json{{"n_teeth", p.n_teeth},
              {"spacing_mm", p.spacing_mm},
              {"missing_index", p.missing_index},
              {"decoy_index", p.decoy_index},
              {"decoy_gap_scale", p.decoy_gap_scale},
              {"shrink_rate", p.shrink_rate},
              {"implant_axis_tilt", p.implant_axis_tilt},
              {"tilt_direction", p.tilt_direction},
              {"noise_level", p.noise_level},
              {"seed", p.seed},
              {"image_size", p.image_size},
              {"mm_per_px", p.mm_per_px},
              {"slice_spacing_px", p.slice_spacing_px}};
}

inline PhantomParams params_from_json(const json& j) {
  PhantomParams p;
  p.n_teeth = j.at("n_teeth").get<int>();
  p.spacing_mm = j.at("spacing_mm").get<double>();
  p.missing_index = j.at("missing_index").get<int>();
  p.decoy_index = j.at("decoy_index").get<int>();
  p.decoy_gap_scale = j.at("decoy_gap_scale").get<double>();
  p.shrink_rate = j.at("shrink_rate").get<double>();
  p.implant_axis_tilt = j.at("implant_axis_tilt").get<double>();
  p.tilt_direction = j.at("tilt_direction").get<double>();
  p.noise_level = j.at("noise_level").get<double>();
  p.seed = j.at("seed").get<std::uint64_t>();
  p.image_size = j.at("image_size").get<int>();
  p.mm_per_px = j.at("mm_per_px").get<double>();
  p.slice_spacing_px = j.at("slice_spacing_px").get<double>();
  return p;
}

struct DatasetEntry {
  PhantomParams params;
  std::string split;
  PhantomKind kind = PhantomKind::Easy;
};

struct ManifestPatient {
  std::string id;
  std::string split;
  PhantomKind kind = PhantomKind::Easy;
  fs::path dir;  // relative to the dataset root
  PhantomParams params;
  ImplantAxis axis;
};

struct Manifest {
  std::vector<ManifestPatient> patients;
  int n_crown = 0;
  int n_root = 0;

  std::vector<ManifestPatient> split(const std::string& name) const {
    std::vector<ManifestPatient> out;
    for (const auto& p : patients)
      if (p.split == name) out.push_back(p);
    return out;
  }
};

inline Manifest read_manifest(const fs::path& root) {
  const auto j = read_json(root / "manifest.json");
  Manifest m;
  m.n_crown = j.at("n_crown").get<int>();
  m.n_root = j.at("n_root").get<int>();
  for (const auto& e : j.at("patients")) {
    ManifestPatient p;
    p.id = e.at("id").get<std::string>();
    p.split = e.at("split").get<std::string>();
    p.kind = parse_phantom_kind(e.at("kind").get<std::string>());
    p.dir = e.at("dir").get<std::string>();
    p.params = params_from_json(e.at("params"));
    const auto& a = e.at("axis");
    p.axis = {a.at("x0").get<double>(), a.at("y0").get<double>(), a.at("dx_per_slice").get<double>(),
              a.at("dy_per_slice").get<double>()};
    m.patients.push_back(std::move(p));
  }
  return m;
}

/// Render every entry to disk and write the manifest. Returns the manifest.
inline Manifest render_dataset(const std::vector<DatasetEntry>& entries, const fs::path& out_dir, int n_crown,
                               int n_root) {
  fs::create_directories(out_dir);
  json patients = json::array();
  Manifest manifest;
  manifest.n_crown = n_crown;
  manifest.n_root = n_root;
  for (const auto& e : entries) {
    const auto patient = generate_patient(e.params, n_crown, n_root);
    const fs::path rel = fs::path(e.split) / patient.stack.patient_id;
    write_patient(out_dir / rel, patient.stack, patient.annotations);
    const auto& ax = patient.axis;
    patients.push_back(json{{"id", patient.stack.patient_id},
                            {"split", e.split},
                            {"kind", to_string(e.kind)},
                            {"dir", rel.generic_string()},
                            {"params", params_to_json(e.params)},
                            {"axis",
                             {{"x0", ax.x0}, {"y0", ax.y0}, {"dx_per_slice", ax.dx_per_slice},
                              {"dy_per_slice", ax.dy_per_slice}}}});
    manifest.patients.push_back({patient.stack.patient_id, e.split, e.kind, rel, e.params, ax});
  }
  json splits = json::object();
  for (const auto& p : manifest.patients) splits[p.split] = splits.value(p.split, 0) + 1;
  const json doc{{"n_crown", n_crown}, {"n_root", n_root}, {"splits", splits}, {"patients", patients}};
  write_text(out_dir / "manifest.json", doc.dump(2) + "\n");
  return manifest;
}

}  // namespace tsipr
