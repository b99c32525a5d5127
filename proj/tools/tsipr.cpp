#include <tsipr/experiment.hpp>

#include <CLI11.hpp>

#include <chrono>
#include <ctime>
#include <iomanip>
#include <iostream>
#include <sstream>

#ifndef TSIPR_GIT_DESCRIBE
#define TSIPR_GIT_DESCRIBE "unknown"
#endif

using namespace tsipr;

namespace {

struct Options {
  std::string config_path;
  std::string profile;
  std::optional<std::uint64_t> seed;
  std::string run_dir;
  std::vector<std::string> sets;
  std::string axis;
};

json parse_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception&) {
    return json(text);
  }
}

RunConfig load_config(const Options& o) {
  json user = json::object();
  if (!o.config_path.empty()) user = read_json(o.config_path);
  if (!user.is_object()) fail(ErrorKind::Config, o.config_path + ": top level must be an object");
  for (const auto& s : o.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) fail(ErrorKind::Config, "--set expects key.path=value, got '" + s + "'");
    json* node = &user;
    std::stringstream path(s.substr(0, eq));
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(path, part, '.')) parts.push_back(part);
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
      if (!node->contains(parts[i])) (*node)[parts[i]] = json::object();
      node = &(*node)[parts[i]];
    }
    (*node)[parts.back()] = parse_value(s.substr(eq + 1));
  }
  if (o.seed) user["seed"] = *o.seed;
  return resolve_config(user, o.profile);
}

std::string timestamp() {
  const auto now = std::chrono::system_clock::now();
  const auto t = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y%m%d-%H%M%S") << '-' << std::setw(3) << std::setfill('0') << ms;
  return s.str();
}

/// Owns a run directory: writes the frozen config up front and the run
/// record (seed, version, timing) when the command finishes.
class Run {
 public:
  Run(const std::string& command, const RunConfig& cfg, const std::string& explicit_dir)
      : command_(command), cfg_(cfg), start_(std::chrono::steady_clock::now()) {
    dir_ = explicit_dir.empty() ? fs::path(cfg.paths.output) / (command + "-" + timestamp()) : fs::path(explicit_dir);
    fs::create_directories(dir_);
    write_text(dir_ / "config.json", to_json(cfg).dump(2) + "\n");
  }

  const fs::path& dir() const { return dir_; }
  json& record() { return record_; }

  void finish() {
    record_["command"] = command_;
    record_["seed"] = cfg_.seed;
    record_["git_describe"] = TSIPR_GIT_DESCRIBE;
    record_["wall_clock_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    write_text(dir_ / "run.json", record_.dump(2) + "\n");
    std::cout << "run directory: " << dir_.string() << "\n";
  }

 private:
  std::string command_;
  RunConfig cfg_;
  fs::path dir_;
  json record_ = json::object();
  std::chrono::steady_clock::time_point start_;
};

void require_dataset(const RunConfig& c) {
  if (!fs::exists(fs::path(c.paths.dataset) / "manifest.json"))
    fail(ErrorKind::MissingPath, "dataset not found at '" + c.paths.dataset + "' (run gen-data first)");
}

EpochCallback print_epoch(const std::string& what) {
  return [what](const EpochLog& e) {
    std::cout << what << " epoch " << e.epoch << " loss " << e.loss << " lr " << e.lr << " (" << std::fixed
              << std::setprecision(1) << e.seconds << " s)" << std::defaultfloat << std::setprecision(6) << std::endl;
  };
}

void cmd_gen_data(const RunConfig& c, Run& run) {
  const auto entries = dataset_entries(c);
  const auto manifest = render_dataset(entries, c.paths.dataset, c.data.n_crown, c.data.n_root);
  write_text(fs::path(c.paths.dataset) / "gen_config.json", to_json(c).dump(2) + "\n");
  run.record()["dataset"] = fs::absolute(c.paths.dataset).string();
  run.record()["patients"] = manifest.patients.size();
  std::cout << "wrote " << manifest.patients.size() << " patients to " << c.paths.dataset << "\n";
}

std::vector<EpochLog> fit_mspenet(const RunConfig& c, MSPENet& net) {
  const auto samples = load_samples(c.paths.dataset, "train", c.mspenet.input_size);
  std::cout << "training mspenet on " << samples.size() << " crown slices, " << parameter_count(*net)
            << " parameters\n";
  return train_mspenet(net, samples, c.train_mspenet, c.codec, c.seed, print_epoch("mspenet"));
}

void cmd_train_mspenet(const RunConfig& c, Run& run) {
  require_dataset(c);
  MSPENet net(c.mspenet);
  const auto log = fit_mspenet(c, net);
  write_loss_csv((run.dir() / "losses.csv").string(), log);
  const auto ckpt = (run.dir() / "mspenet.pt").string();
  save_checkpoint(*net, mspenet_echo(c), ckpt);
  run.record()["checkpoint"] = fs::absolute(ckpt).string();
  run.record()["first_epoch_loss"] = log.front().loss;
  run.record()["final_epoch_loss"] = log.back().loss;
}

void cmd_train_ird(const RunConfig& c, Run& run) {
  require_dataset(c);
  const auto samples = load_samples(c.paths.dataset, "train", c.ird.input_size);
  IRDNet net(c.ird);
  std::cout << "training ird on " << samples.size() << " crown slices, " << parameter_count(*net) << " parameters\n";
  const auto log = train_ird(net, samples, c.train_ird, c.data.image_size, c.seed, print_epoch("ird"));
  write_loss_csv((run.dir() / "losses.csv").string(), log);
  const auto ckpt = (run.dir() / "ird.pt").string();
  save_checkpoint(*net, ird_echo(c), ckpt);
  run.record()["checkpoint"] = fs::absolute(ckpt).string();
  run.record()["first_epoch_loss"] = log.front().loss;
  run.record()["final_epoch_loss"] = log.back().loss;
}

Models load_models(const RunConfig& c, bool need_region) {
  if (c.paths.mspenet_checkpoint.empty()) fail(ErrorKind::MissingPath, "paths.mspenet_checkpoint is not set");
  Models m;
  m.mspenet = load_mspenet(c, c.paths.mspenet_checkpoint);
  if (!c.paths.external_detections.empty()) {
    m.external = ingest_external_detections(c.paths.external_detections);
  } else if (!c.paths.ird_checkpoint.empty()) {
    m.ird = load_ird(c, c.paths.ird_checkpoint);
  } else if (need_region) {
    fail(ErrorKind::MissingPath, "fusion needs paths.ird_checkpoint or paths.external_detections");
  }
  return m;
}

InferenceConfig inference_config(const RunConfig& c) { return {c.codec, c.infer.use_fusion, c.infer.min_points}; }

void cmd_infer(const RunConfig& c, Run& run) {
  require_dataset(c);
  std::vector<PatientPrediction> preds;
  if (c.infer.source == "ground_truth") {
    preds = ground_truth_predictions(c.paths.dataset, c.infer.split, c.infer.min_points);
  } else {
    auto models = load_models(c, false);
    preds = infer_split(c.paths.dataset, c.infer.split, models, inference_config(c), c.ird.conf_threshold);
  }
  const auto out = (run.dir() / "predictions.jsonl").string();
  write_predictions(out, preds);
  int failures = 0;
  for (const auto& p : preds) failures += p.failure.empty() ? 0 : 1;
  run.record()["predictions"] = fs::absolute(out).string();
  run.record()["patients"] = preds.size();
  run.record()["failures"] = failures;
  std::cout << "wrote predictions for " << preds.size() << " patients (" << failures << " line-fit failures)\n";
}

void cmd_eval(const RunConfig& c, Run& run) {
  require_dataset(c);
  if (c.paths.predictions.empty()) fail(ErrorKind::MissingPath, "paths.predictions is not set");
  const auto preds = read_predictions(c.paths.predictions);
  const auto report = evaluate_predictions(c.paths.dataset, c.infer.split, preds, c.eval);
  auto j = to_json(report);
  j["primary"] = c.infer.use_fusion ? "fused" : "unfused";
  write_text(run.dir() / "metrics.json", j.dump(2) + "\n");
  const auto& primary = c.infer.use_fusion ? report.fused : report.unfused;
  write_pr_csv((run.dir() / "pr_curve.csv").string(), primary.pr);
  write_pr_svg((run.dir() / "pr_curve.svg").string(),
               {{"fused", &report.fused.pr}, {"unfused", &report.unfused.pr}});
  std::cout << "AP=" << primary.pr.ap << " F1=" << primary.pr.best_f1 << " MRE=" << primary.mre_px
            << " px  root<5px=" << report.root_within_5px << "\n";
}

struct AblationRow {
  std::string variant;
  long long params = 0;
  double ap = 0.0, f1 = 0.0, mre = 0.0, loss = 0.0, seconds = 0.0;
};

AblationRow train_and_score(const RunConfig& c, const std::string& variant) {
  configure_torch(c.seed, c.threads, c.strict_deterministic);
  const auto start = std::chrono::steady_clock::now();
  MSPENet net(c.mspenet);
  const auto log = fit_mspenet(c, net);
  Models models;
  models.mspenet = net;
  auto icfg = inference_config(c);
  icfg.use_fusion = false;
  const auto preds = infer_split(c.paths.dataset, c.infer.split, models, icfg, c.ird.conf_threshold);
  const auto report = evaluate_predictions(c.paths.dataset, c.infer.split, preds, c.eval);
  return {variant,
          parameter_count(*net),
          report.unfused.pr.ap,
          report.unfused.pr.best_f1,
          report.unfused.mre_px,
          log.back().loss,
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()};
}

void cmd_ablate(const RunConfig& c, Run& run, const std::string& axis) {
  require_dataset(c);
  std::vector<AblationRow> rows;
  if (axis == "patch_sizes") {
    const std::vector<std::vector<int>> variants{{5, 8, 10}, {8}, {5}, {10}, {6, 8, 10}};
    for (const auto& v : variants) {
      auto cv = c;
      cv.mspenet.patch_sizes = v;
      std::string name;
      for (int k : v) name += (name.empty() ? "" : "+") + std::to_string(k);
      rows.push_back(train_and_score(cv, name));
    }
  } else if (axis == "glfib_pattern") {
    for (const char* p : {"TTTT", "CTTT", "CCTT", "CCCT", "CCCC"}) {
      auto cv = c;
      cv.mspenet.glfib_branches.fill(parse_branch_pattern(p));
      rows.push_back(train_and_score(cv, p));
    }
  } else if (axis == "fusion_on_off") {
    auto models = load_models(c, true);
    auto icfg = inference_config(c);
    const auto preds = infer_split(c.paths.dataset, c.infer.split, models, icfg, c.ird.conf_threshold);
    write_predictions((run.dir() / "predictions.jsonl").string(), preds);
    const auto report = evaluate_predictions(c.paths.dataset, c.infer.split, preds, c.eval);
    rows.push_back({"fusion_off", 0, report.unfused.pr.ap, report.unfused.pr.best_f1, report.unfused.mre_px, 0, 0});
    rows.push_back({"fusion_on", 0, report.fused.pr.ap, report.fused.pr.best_f1, report.fused.mre_px, 0, 0});
    write_pr_svg((run.dir() / "pr_curve.svg").string(),
                 {{"with region mask", &report.fused.pr}, {"without region mask", &report.unfused.pr}});
  } else {
    fail(ErrorKind::Config, "unknown ablation axis '" + axis + "' (patch_sizes|glfib_pattern|fusion_on_off)");
  }
  std::ofstream out(run.dir() / "ablation.csv");
  if (!out) fail(ErrorKind::Io, "cannot write ablation.csv");
  out.precision(10);
  out << "axis,variant,params,ap,best_f1,mre_px,final_loss,seconds\n";
  for (const auto& r : rows) {
    out << axis << ',' << r.variant << ',' << r.params << ',' << r.ap << ',' << r.f1 << ',' << r.mre << ',' << r.loss
        << ',' << r.seconds << '\n';
    std::cout << std::left << std::setw(14) << r.variant << " AP=" << r.ap << " F1=" << r.f1 << " MRE=" << r.mre
              << "\n";
  }
  run.record()["axis"] = axis;
}

int exit_code(ErrorKind k) { return 10 + static_cast<int>(k); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stream implant position regression on crown slices"};
  app.require_subcommand(1);
  Options opts;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opts.config_path, "JSON config file overlaying the profile")->check(CLI::ExistingFile);
    sub->add_option("--seed", opts.seed, "override the config seed");
    sub->add_option("--profile", opts.profile, "desk | paper (default: config value or desk)")
        ->check(CLI::IsMember({"desk", "paper"}));
    sub->add_option("--run-dir", opts.run_dir, "write outputs here instead of a timestamped directory");
    sub->add_option("--set", opts.sets, "override a config key, e.g. train_mspenet.epochs=2");
  };
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, help] : std::vector<std::pair<std::string, std::string>>{
           {"gen-data", "render the synthetic phantom dataset"},
           {"train-mspenet", "train the heatmap regression network"},
           {"train-ird", "train the implant region detector"},
           {"infer", "predict implant positions for a split"},
           {"eval", "score a predictions file"},
           {"ablate", "run an ablation sweep"}}) {
    subs[name] = app.add_subcommand(name, help);
    add_common(subs[name]);
  }
  subs["ablate"]
      ->add_option("--axis", opts.axis, "patch_sizes | glfib_pattern | fusion_on_off")
      ->required()
      ->check(CLI::IsMember({"patch_sizes", "glfib_pattern", "fusion_on_off"}));

  CLI11_PARSE(app, argc, argv);

  try {
    const auto cfg = load_config(opts);
    configure_torch(cfg.seed, cfg.threads, cfg.strict_deterministic);
    const std::string command = app.get_subcommands().front()->get_name();
    Run run(command, cfg, opts.run_dir);
    if (command == "gen-data") cmd_gen_data(cfg, run);
    else if (command == "train-mspenet") cmd_train_mspenet(cfg, run);
    else if (command == "train-ird") cmd_train_ird(cfg, run);
    else if (command == "infer") cmd_infer(cfg, run);
    else if (command == "eval") cmd_eval(cfg, run);
    else cmd_ablate(cfg, run, opts.axis);
    run.finish();
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.kind()) << "]: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
