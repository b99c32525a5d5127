#pragma once

// Run configuration. A config file is a JSON document whose keys overlay a
// named profile; any key not present in the profile schema is rejected.

#include <tsipr/core.hpp>
#include <tsipr/evaluation.hpp>
#include <tsipr/heatmap_codec.hpp>
#include <tsipr/ird.hpp>
#include <tsipr/mspenet.hpp>

#include <json.hpp>

#include <string>
#include <vector>

namespace tsipr {

struct PathsConfig {
  std::string dataset = "data";
  std::string output = "runs";
  std::string mspenet_checkpoint;
  std::string ird_checkpoint;
  std::string predictions;
  std::string external_detections;
};

struct DataConfig {
  int n_train = 64;
  int n_val = 8;
  int n_test_easy = 32;
  int n_test_decoy = 50;
  int n_crown = 4;
  int n_root = 3;
  std::string train_kind = "mixed";
  double noise_level = 0.02;
  int image_size = 776;
};

struct OptimConfig {
  std::string optimizer = "adam";  // adam | sgd
  double lr = 5e-4;
  double momentum = 0.9;
  double weight_decay = 0.0;
  int batch_size = 8;
  int epochs = 140;
  std::vector<int> milestones{60, 100};
  double lr_factor = 0.1;
  bool augment = true;

  void validate(const std::string& name) const {
    if (optimizer != "adam" && optimizer != "sgd") fail(ErrorKind::Config, name + ".optimizer must be adam or sgd");
    if (epochs <= 0) fail(ErrorKind::Config, name + ".epochs must be > 0");
    if (!(lr > 0.0)) fail(ErrorKind::Config, name + ".lr must be > 0");
    if (batch_size <= 0) fail(ErrorKind::Config, name + ".batch_size must be > 0");
    for (int m : milestones)
      if (m <= 0 || m >= epochs) fail(ErrorKind::Config, name + ".milestones must lie strictly inside (0, epochs)");
  }

  double lr_at(int epoch) const {
    double v = lr;
    for (int m : milestones)
      if (epoch >= m) v *= lr_factor;
    return v;
  }
};

struct InferConfig {
  std::string source = "model";  // model | ground_truth
  std::string split = "test_easy";
  bool use_fusion = true;
  int min_points = 3;
};

struct RunConfig {
  std::string profile = "desk";
  PathsConfig paths;
  DataConfig data;
  MSPENetConfig mspenet;
  IRDConfig ird;
  CodecConfig codec;
  EvalConfig eval;
  OptimConfig train_mspenet;
  OptimConfig train_ird;
  InferConfig infer;
  std::uint64_t seed = 0;
  bool strict_deterministic = false;
  int threads = 1;

  void validate() const {
    mspenet.validate();
    ird.validate();
    codec.validate();
    eval.validate();
    train_mspenet.validate("train_mspenet");
    train_ird.validate("train_ird");
    if (infer.source != "model" && infer.source != "ground_truth")
      fail(ErrorKind::Config, "infer.source must be model or ground_truth");
    if (infer.min_points < 2) fail(ErrorKind::Config, "infer.min_points must be >= 2");
    if (data.n_crown < 1 || data.n_root < 0) fail(ErrorKind::Config, "data slice counts out of range");
    if (data.n_train < 0 || data.n_val < 0 || data.n_test_easy < 0 || data.n_test_decoy < 0)
      fail(ErrorKind::Config, "data split sizes must be >= 0");
    if (threads < 1) fail(ErrorKind::Config, "threads must be >= 1");
    parse_phantom_kind_name(data.train_kind);
  }

 private:
  static void parse_phantom_kind_name(const std::string& k) {
    if (k != "easy" && k != "decoy" && k != "mixed") fail(ErrorKind::Config, "data.train_kind must be easy|decoy|mixed");
  }
};

// --- JSON mapping ----------------------------------------------------------------

using nlohmann::json;

inline json to_json(const RunConfig& c) {
  const auto& m = c.mspenet;
  std::vector<std::string> patterns;
  for (const auto& p : m.glfib_branches) patterns.push_back(to_string(p));
  auto optim = [](const OptimConfig& o) {
    return json{{"optimizer", o.optimizer},   {"lr", o.lr},         {"momentum", o.momentum},
                {"weight_decay", o.weight_decay}, {"batch_size", o.batch_size}, {"epochs", o.epochs},
                {"milestones", o.milestones}, {"lr_factor", o.lr_factor}, {"augment", o.augment}};
  };
  return json{
      {"profile", c.profile},
      {"seed", c.seed},
      {"strict_deterministic", c.strict_deterministic},
      {"threads", c.threads},
      {"paths",
       {{"dataset", c.paths.dataset},
        {"output", c.paths.output},
        {"mspenet_checkpoint", c.paths.mspenet_checkpoint},
        {"ird_checkpoint", c.paths.ird_checkpoint},
        {"predictions", c.paths.predictions},
        {"external_detections", c.paths.external_detections}}},
      {"data",
       {{"n_train", c.data.n_train},
        {"n_val", c.data.n_val},
        {"n_test_easy", c.data.n_test_easy},
        {"n_test_decoy", c.data.n_test_decoy},
        {"n_crown", c.data.n_crown},
        {"n_root", c.data.n_root},
        {"train_kind", c.data.train_kind},
        {"noise_level", c.data.noise_level},
        {"image_size", c.data.image_size}}},
      {"mspenet",
       {{"patch_sizes", m.patch_sizes},
        {"embed_stride", m.embed_stride},
        {"base_channels", m.base_channels},
        {"glfib_branches", patterns},
        {"attention_heads", m.attention_heads},
        {"input_size", m.input_size},
        {"decoder_channels", m.decoder_channels},
        {"head_channels", m.head_channels},
        {"mlp_ratio", m.mlp_ratio},
        {"factorized_attention", m.factorized_attention},
        {"positional_encoding", m.positional_encoding}}},
      {"ird",
       {{"input_size", c.ird.input_size},
        {"conf_threshold", c.ird.conf_threshold},
        {"width", c.ird.width},
        {"depth", c.ird.depth},
        {"extended_side", c.ird.extended_side},
        {"box_prior", c.ird.box_prior},
        {"min_extent", c.ird.min_extent}}},
      {"codec",
       {{"g", c.codec.g},
        {"sigma", c.codec.sigma},
        {"peak_threshold", c.codec.peak_threshold},
        {"max_peaks", c.codec.max_peaks}}},
      {"eval",
       {{"iou_threshold", c.eval.iou_threshold},
        {"implant_diameter_px", c.eval.implant_diameter_px},
        {"score_sweep", c.eval.score_sweep}}},
      {"train_mspenet", optim(c.train_mspenet)},
      {"train_ird", optim(c.train_ird)},
      {"infer",
       {{"source", c.infer.source},
        {"split", c.infer.split},
        {"use_fusion", c.infer.use_fusion},
        {"min_points", c.infer.min_points}}}};
}

inline RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  try {
    c.profile = j.at("profile").get<std::string>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.strict_deterministic = j.at("strict_deterministic").get<bool>();
    c.threads = j.at("threads").get<int>();
    const auto& p = j.at("paths");
    c.paths = {p.at("dataset").get<std::string>(),         p.at("output").get<std::string>(),
               p.at("mspenet_checkpoint").get<std::string>(), p.at("ird_checkpoint").get<std::string>(),
               p.at("predictions").get<std::string>(),      p.at("external_detections").get<std::string>()};
    const auto& d = j.at("data");
    c.data = {d.at("n_train").get<int>(),    d.at("n_val").get<int>(),    d.at("n_test_easy").get<int>(),
              d.at("n_test_decoy").get<int>(), d.at("n_crown").get<int>(), d.at("n_root").get<int>(),
              d.at("train_kind").get<std::string>(), d.at("noise_level").get<double>(),
              d.at("image_size").get<int>()};
    const auto& m = j.at("mspenet");
    c.mspenet.patch_sizes = m.at("patch_sizes").get<std::vector<int>>();
    c.mspenet.embed_stride = m.at("embed_stride").get<int>();
    c.mspenet.base_channels = m.at("base_channels").get<int>();
    const auto patterns = m.at("glfib_branches").get<std::vector<std::string>>();
    if (patterns.size() != c.mspenet.glfib_branches.size())
      fail(ErrorKind::Config, "mspenet.glfib_branches needs exactly " +
                                  std::to_string(c.mspenet.glfib_branches.size()) + " patterns");
    for (std::size_t i = 0; i < patterns.size(); ++i) c.mspenet.glfib_branches[i] = parse_branch_pattern(patterns[i]);
    c.mspenet.attention_heads = m.at("attention_heads").get<int>();
    c.mspenet.input_size = m.at("input_size").get<int>();
    c.mspenet.decoder_channels = m.at("decoder_channels").get<int>();
    c.mspenet.head_channels = m.at("head_channels").get<int>();
    c.mspenet.mlp_ratio = m.at("mlp_ratio").get<int>();
    c.mspenet.factorized_attention = m.at("factorized_attention").get<bool>();
    c.mspenet.positional_encoding = m.at("positional_encoding").get<bool>();
    const auto& r = j.at("ird");
    c.ird.input_size = r.at("input_size").get<int>();
    c.ird.conf_threshold = r.at("conf_threshold").get<double>();
    c.ird.width = r.at("width").get<int>();
    c.ird.depth = r.at("depth").get<int>();
    c.ird.extended_side = r.at("extended_side").get<int>();
    c.ird.box_prior = r.at("box_prior").get<double>();
    c.ird.min_extent = r.at("min_extent").get<double>();
    const auto& k = j.at("codec");
    c.codec = {k.at("g").get<int>(), k.at("sigma").get<double>(), k.at("peak_threshold").get<double>(),
               k.at("max_peaks").get<int>()};
    const auto& e = j.at("eval");
    c.eval = {e.at("iou_threshold").get<double>(), e.at("implant_diameter_px").get<double>(),
              e.at("score_sweep").get<std::vector<double>>()};
    auto optim = [](const json& o) {
      OptimConfig v;
      v.optimizer = o.at("optimizer").get<std::string>();
      v.lr = o.at("lr").get<double>();
      v.momentum = o.at("momentum").get<double>();
      v.weight_decay = o.at("weight_decay").get<double>();
      v.batch_size = o.at("batch_size").get<int>();
      v.epochs = o.at("epochs").get<int>();
      v.milestones = o.at("milestones").get<std::vector<int>>();
      v.lr_factor = o.at("lr_factor").get<double>();
      v.augment = o.at("augment").get<bool>();
      return v;
    };
    c.train_mspenet = optim(j.at("train_mspenet"));
    c.train_ird = optim(j.at("train_ird"));
    const auto& i = j.at("infer");
    c.infer = {i.at("source").get<std::string>(), i.at("split").get<std::string>(), i.at("use_fusion").get<bool>(),
               i.at("min_points").get<int>()};
  } catch (const json::exception& ex) {
    fail(ErrorKind::Config, std::string("config: ") + ex.what());
  }
  c.validate();
  return c;
}

/// Defaults for a named profile. "paper" follows the published schedule;
/// "desk" is sized for a CPU-only machine.
inline RunConfig profile_defaults(const std::string& name) {
  RunConfig c;
  c.profile = name;
  if (name == "paper") {
    c.mspenet = MSPENetConfig{};
    c.ird = IRDConfig{};
    c.train_mspenet = {"adam", 5e-4, 0.9, 0.0, 8, 140, {60, 100}, 0.1, true};
    c.train_ird = {"sgd", 0.01, 0.9, 5e-4, 16, 30, {}, 0.1, true};
    c.data.n_train = 300;
    c.data.n_crown = 8;
    return c;
  }
  if (name != "desk") fail(ErrorKind::Config, "unknown profile '" + name + "' (desk|paper)");
  c.mspenet.input_size = 320;
  c.mspenet.base_channels = 16;
  c.mspenet.decoder_channels = 32;
  c.mspenet.head_channels = 32;
  c.ird.input_size = 320;
  c.ird.width = 16;
  c.ird.box_prior = 128.0 * 320.0 / 776.0;
  c.train_mspenet = {"adam", 2e-3, 0.9, 0.0, 8, 40, {28, 35}, 0.1, true};
  c.train_ird = {"adam", 1e-3, 0.9, 0.0, 8, 60, {45, 55}, 0.1, true};
  return c;
}

namespace config_detail {
inline void reject_unknown(const json& user, const json& schema, const std::string& where) {
  if (!user.is_object()) return;
  for (auto it = user.begin(); it != user.end(); ++it) {
    const auto path = where.empty() ? it.key() : where + "." + it.key();
    if (!schema.contains(it.key())) fail(ErrorKind::Config, "unknown config key '" + path + "'");
    if (schema[it.key()].is_object()) {
      if (!it.value().is_object()) fail(ErrorKind::Config, "config key '" + path + "' must be an object");
      reject_unknown(it.value(), schema[it.key()], path);
    }
  }
}
}  // namespace config_detail

/// Overlay `user` on the defaults of `profile` (or of user["profile"] when
/// `profile` is empty), rejecting unknown keys.
inline RunConfig resolve_config(const json& user, std::string profile = {}) {
  if (!user.is_null() && !user.is_object()) fail(ErrorKind::Config, "config must be a JSON object");
  if (profile.empty()) profile = user.is_object() ? user.value("profile", std::string("desk")) : "desk";
  json merged = to_json(profile_defaults(profile));
  config_detail::reject_unknown(user, merged, "");
  if (user.is_object()) merged.merge_patch(user);
  merged["profile"] = profile;
  return run_config_from_json(merged);
}

}  // namespace tsipr
