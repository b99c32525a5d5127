#pragma once

#include <tsipr/config.hpp>
#include <tsipr/io.hpp>
#include <tsipr/losses.hpp>
#include <tsipr/pipeline.hpp>
#include <tsipr/synthdata.hpp>

#include <torch/torch.h>

#include <chrono>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>

namespace tsipr {

// --- determinism -------------------------------------------------------------

inline void configure_torch(std::uint64_t seed, int threads, bool strict) {
  torch::set_num_threads(threads);
  torch::manual_seed(seed);
  at::globalContext().setDeterministicAlgorithms(strict, false);
}

// --- samples -----------------------------------------------------------------

struct TrainSample {
  Image image;  // already resized to the network input side
  ImplantAnnotation ann;
  std::string image_id;
};

inline Image resize_image(const Image& image, int side) {
  if (static_cast<int>(image.width()) == side && static_cast<int>(image.height()) == side) return image;
  return tensor_to_grid(resize_square(image_to_tensor(image), side)[0]);
}

/// Crown slices of every patient in `split`, resized to `side`.
inline std::vector<TrainSample> load_samples(const fs::path& root, const std::string& split, int side) {
  const auto manifest = read_manifest(root);
  std::vector<TrainSample> out;
  for (const auto& p : manifest.split(split)) {
    const auto rec = read_patient(root / p.dir);
    const double orig = static_cast<double>(rec.stack.image_size().width);
    const double s = side / orig;
    for (int z : rec.stack.crown_z) {
      const auto* ann = rec.annotation_at(z);
      if (!ann) continue;
      out.push_back({resize_image(*rec.stack.slice_at(z), side), {ann->x * s, ann->y * s, z},
                     slice_image_id(rec.stack.patient_id, z)});
    }
  }
  if (out.empty()) fail(ErrorKind::MissingPath, "no annotated crown slices in split '" + split + "' under " + root.string());
  return out;
}

// --- checkpoints ----------------------------------------------------------------

inline void save_checkpoint(torch::nn::Module& module, const json& config_echo, const std::string& path) {
  torch::serialize::OutputArchive archive;
  module.save(archive);
  archive.write("config_echo", c10::IValue(config_echo.dump()));
  archive.save_to(path);
}

inline json checkpoint_config(const std::string& path) {
  if (!fs::exists(path)) fail(ErrorKind::MissingPath, "checkpoint not found: " + path);
  torch::serialize::InputArchive archive;
  archive.load_from(path);
  c10::IValue v;
  if (!archive.try_read("config_echo", v)) fail(ErrorKind::CheckpointMismatch, "checkpoint has no config echo: " + path);
  return json::parse(v.toStringRef());
}

/// Load weights into `module`; the stored architecture section must equal
/// `expected` or the load is refused.
inline void load_checkpoint(torch::nn::Module& module, const json& expected, const std::string& path) {
  const auto stored = checkpoint_config(path);
  if (stored != expected)
    fail(ErrorKind::CheckpointMismatch, "checkpoint " + path + " was trained with " + stored.dump() +
                                            " but the config asks for " + expected.dump());
  torch::serialize::InputArchive archive;
  archive.load_from(path);
  // Module::load replaces tensors wholesale, so a wrong shape would slip through.
  std::map<std::string, std::vector<int64_t>> shapes;
  for (const auto& t : module.named_parameters()) shapes[t.key()] = t.value().sizes().vec();
  for (const auto& t : module.named_buffers()) shapes[t.key()] = t.value().sizes().vec();
  try {
    module.load(archive);
  } catch (const c10::Error& e) {
    fail(ErrorKind::CheckpointMismatch, "checkpoint " + path + ": " + e.what_without_backtrace());
  }
  const auto check = [&](const auto& items) {
    for (const auto& t : items)
      if (shapes.at(t.key()) != t.value().sizes().vec())
        fail(ErrorKind::CheckpointMismatch, "checkpoint " + path + ": tensor '" + t.key() + "' has a different shape");
  };
  check(module.named_parameters());
  check(module.named_buffers());
}

inline json mspenet_echo(const RunConfig& c) { return to_json(c).at("mspenet"); }
inline json ird_echo(const RunConfig& c) { return to_json(c).at("ird"); }

inline MSPENet load_mspenet(const RunConfig& c, const std::string& path) {
  MSPENet net(c.mspenet);
  load_checkpoint(*net, mspenet_echo(c), path);
  net->eval();
  return net;
}

inline IRDNet load_ird(const RunConfig& c, const std::string& path) {
  IRDNet net(c.ird);
  load_checkpoint(*net, ird_echo(c), path);
  net->eval();
  return net;
}

// --- training loops --------------------------------------------------------------

struct EpochLog {
  int epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
};

inline void write_loss_csv(const std::string& path, const std::vector<EpochLog>& log) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Io, "cannot write " + path);
  out.precision(10);
  out << "epoch,loss,lr,seconds\n";
  for (const auto& e : log) out << e.epoch << ',' << e.loss << ',' << e.lr << ',' << e.seconds << '\n';
}

using EpochCallback = std::function<void(const EpochLog&)>;

namespace train_detail {

inline std::unique_ptr<torch::optim::Optimizer> make_optimizer(torch::nn::Module& module, const OptimConfig& o) {
  if (o.optimizer == "adam")
    return std::make_unique<torch::optim::Adam>(module.parameters(),
                                                torch::optim::AdamOptions(o.lr).weight_decay(o.weight_decay));
  return std::make_unique<torch::optim::SGD>(
      module.parameters(), torch::optim::SGDOptions(o.lr).momentum(o.momentum).weight_decay(o.weight_decay));
}

inline void set_lr(torch::optim::Optimizer& opt, double lr) {
  for (auto& group : opt.param_groups()) group.options().set_lr(lr);
}

inline torch::Tensor stack_images(const std::vector<Image>& images) {
  std::vector<torch::Tensor> ts;
  ts.reserve(images.size());
  for (const auto& im : images) ts.push_back(image_to_tensor(im));
  return torch::stack(ts);  // [B, 1, H, W]
}

template <class Step>
std::vector<EpochLog> run_epochs(torch::nn::Module& module, std::size_t n_samples, const OptimConfig& o,
                                 std::uint64_t seed, const EpochCallback& on_epoch, Step&& step) {
  o.validate("train");
  auto opt = make_optimizer(module, o);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(n_samples);
  std::iota(order.begin(), order.end(), 0);
  std::vector<EpochLog> log;
  module.train();
  for (int epoch = 0; epoch < o.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const double lr = o.lr_at(epoch);
    set_lr(*opt, lr);
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    std::size_t seen = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(o.batch_size)) {
      const auto e = std::min(order.size(), b + static_cast<std::size_t>(o.batch_size));
      // A trailing batch of one would break batch-norm statistics.
      if (e - b < 2 && order.size() > 1) continue;
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(b),
                                   order.begin() + static_cast<std::ptrdiff_t>(e));
      opt->zero_grad();
      const auto loss = step(idx, rng);
      if (!std::isfinite(loss.template item<double>())) fail(ErrorKind::NonFinite, "training loss became non-finite");
      loss.backward();
      opt->step();
      total += loss.template item<double>() * static_cast<double>(idx.size());
      seen += idx.size();
    }
    EpochLog entry{epoch + 1, seen ? total / static_cast<double>(seen) : 0.0, lr,
                   std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()};
    log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }
  module.eval();
  return log;
}

}  // namespace train_detail

/// Geometric and photometric augmentation for the regression stream.
inline std::pair<Image, ImplantAnnotation> augment_for_mspenet(const TrainSample& s, std::mt19937_64& rng) {
  const ImageSize size{s.image.height(), s.image.width()};
  AugmentRanges ranges;
  ranges.scale_min = 0.9;
  ranges.scale_max = 1.1;
  ranges.max_shift_frac = 0.06;
  const auto a = sample_augment(rng, size, {s.ann.x, s.ann.y}, ranges);
  return augment(s.image, s.ann, a);
}

/// The region stream sees wider scale and shift jitter than the regression
/// stream; with flip and photometric jitter alone it memorises the training arches.
inline std::pair<Image, ImplantAnnotation> augment_for_ird(const TrainSample& s, std::mt19937_64& rng) {
  const ImageSize size{s.image.height(), s.image.width()};
  return augment(s.image, s.ann, sample_augment(rng, size, {s.ann.x, s.ann.y}));
}

inline std::vector<EpochLog> train_mspenet(MSPENet& net, const std::vector<TrainSample>& samples, const OptimConfig& o,
                                           const CodecConfig& codec, std::uint64_t seed,
                                           const EpochCallback& on_epoch = {}) {
  const int side = net->config().input_size;
  for (const auto& s : samples)
    if (static_cast<int>(s.image.width()) != side || static_cast<int>(s.image.height()) != side)
      fail(ErrorKind::ShapeMismatch, "training samples must be resized to the mspenet input size");
  return train_detail::run_epochs(*net, samples.size(), o, seed, on_epoch,
                                  [&](const std::vector<std::size_t>& idx, std::mt19937_64& rng) {
    std::vector<Image> images;
    std::vector<torch::Tensor> hm, off, pos;
    for (auto i : idx) {
      auto [img, ann] = o.augment ? augment_for_mspenet(samples[i], rng)
                                  : std::make_pair(samples[i].image, samples[i].ann);
      const ImplantAnnotation one[] = {ann};
      const auto t = encode_targets(one, {img.height(), img.width()}, codec);
      hm.push_back(image_to_tensor(t.heatmap));
      off.push_back(torch::stack({image_to_tensor(t.offsets.dx)[0], image_to_tensor(t.offsets.dy)[0]}));
      Grid<float> mask(t.pos_mask.height(), t.pos_mask.width());
      for (std::size_t k = 0; k < mask.values().size(); ++k) mask.values()[k] = t.pos_mask.values()[k];
      pos.push_back(image_to_tensor(mask));
      images.push_back(std::move(img));
    }
    const auto pred = net->forward(train_detail::stack_images(images));
    return mspenet_loss(pred, {torch::stack(hm), torch::stack(off), torch::stack(pos)});
  });
}

/// Extended-box label for a sample already resized to the detector input.
inline ExtendedBoxLabel ird_label(const ImplantAnnotation& ann, int side, const IRDConfig& cfg, int original_size) {
  const int box_side = std::max(1, static_cast<int>(std::lround(cfg.extended_side * static_cast<double>(side) /
                                                                 static_cast<double>(original_size))));
  return make_extended_box(ann, {static_cast<std::size_t>(side), static_cast<std::size_t>(side)}, box_side);
}

inline std::vector<EpochLog> train_ird(IRDNet& net, const std::vector<TrainSample>& samples, const OptimConfig& o,
                                       int original_size, std::uint64_t seed, const EpochCallback& on_epoch = {}) {
  const auto& cfg = net->config();
  const int side = cfg.input_size;
  const int grid = side / IRDConfig::kStride;
  return train_detail::run_epochs(*net, samples.size(), o, seed, on_epoch,
                                  [&](const std::vector<std::size_t>& idx, std::mt19937_64& rng) {
    std::vector<Image> images;
    std::vector<torch::Tensor> pos, boxes;
    for (auto i : idx) {
      auto [img, ann] = o.augment ? augment_for_ird(samples[i], rng)
                                  : std::make_pair(samples[i].image, samples[i].ann);
      const ExtendedBoxLabel labels[] = {ird_label(ann, side, cfg, original_size)};
      const auto t = assign_targets(labels, {img.height(), img.width()}, grid, grid);
      pos.push_back(t.pos);
      boxes.push_back(t.boxes);
      images.push_back(std::move(img));
    }
    const auto dec = decode_head(net->forward(train_detail::stack_images(images)), cfg);
    return ird_loss(dec.cls_logits, dec.boxes, dec.conf_logits, {torch::stack(pos), torch::stack(boxes)});
  });
}

}  // namespace tsipr
