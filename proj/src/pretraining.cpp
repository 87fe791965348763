#include "rsfm/pretraining.hpp"

#include <omp.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cstring>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "rsfm/checkpoint.hpp"

namespace rsfm::train {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw TrainConfigError(what);
  };
  require(epochs > 0, "epochs must be positive");
  require(batch_size > 0, "batch_size must be positive");
  require(base_lr >= 0 && min_lr >= 0, "learning rates must be non-negative");
  require(warmup_steps >= 0, "warmup_steps must be non-negative");
  require(mask_ratio > 0 && mask_ratio < 1, "mask_ratio must lie in (0, 1)");
  require(pimask_keep >= 0 && pimask_keep < 1, "pimask_keep must lie in [0, 1)");
  require(mask_window > 0, "mask_window must be positive");
  require(checkpoint_every > 0, "checkpoint_every must be positive");
  require(early_stop_patience > 0, "early_stop_patience must be positive");
  require(early_stop_min_delta >= 0, "early_stop_min_delta must be non-negative");
  require(adamw.beta1 >= 0 && adamw.beta1 < 1 && adamw.beta2 >= 0 && adamw.beta2 < 1, "adamw betas must lie in [0, 1)");
  require(threads >= 0, "threads must be non-negative");
  try {
    freq::validate(frequency);
  } catch (const freq::FrequencyError& e) {
    throw TrainConfigError(e.what());
  }
}

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.epochs = 50;
  c.batch_size = 8;
  c.base_lr = 0.064;
  c.warmup_steps = 100;
  return c;
}

json to_json(const TrainConfig& c) {
  const auto& a = c.augmentation;
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"base_lr", c.base_lr},
          {"min_lr", c.min_lr},
          {"warmup_steps", c.warmup_steps},
          {"adamw", {{"beta1", c.adamw.beta1}, {"beta2", c.adamw.beta2}, {"eps", c.adamw.eps}, {"weight_decay", c.adamw.weight_decay}}},
          {"seed", c.seed},
          {"mask_ratio", c.mask_ratio},
          {"pimask_keep", c.pimask_keep},
          {"mask_window", c.mask_window},
          {"frequency_enabled", c.frequency_enabled},
          {"frequency", {{"cutoff_fraction", c.frequency.cutoff_fraction}, {"selection_prob", c.frequency.selection_prob}}},
          {"augment", c.augment},
          {"augmentation",
           {{"flip_probability", a.flip_probability},
            {"rotate", a.rotate},
            {"crop_fraction", a.crop_fraction},
            {"gain_jitter", a.gain_jitter},
            {"offset_jitter", a.offset_jitter},
            {"blur_probability", a.blur_probability},
            {"max_blur_sigma", a.max_blur_sigma},
            {"max_noise_sigma", a.max_noise_sigma}}},
          {"loss_include_pimask", c.loss.include_pimask},
          {"checkpoint_every", c.checkpoint_every},
          {"early_stop_patience", c.early_stop_patience},
          {"early_stop_min_delta", c.early_stop_min_delta},
          {"threads", c.threads},
          {"debug_checks", c.debug_checks}};
}

namespace {

void reject_unknown(const json& j, const json& known, const std::string& prefix) {
  if (!j.is_object()) throw TrainConfigError("train config" + (prefix.empty() ? "" : " '" + prefix + "'") + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!known.contains(it.key())) throw TrainConfigError("unknown train config key '" + key + "'");
    if (known.at(it.key()).is_object()) reject_unknown(it.value(), known.at(it.key()), key);
  }
}

template <typename V>
void read(const json& j, const char* key, V& dst) {
  if (j.contains(key)) dst = j.at(key).get<V>();
}

}  // namespace

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  reject_unknown(j, to_json(c), "");
  try {
    read(j, "epochs", c.epochs);
    read(j, "batch_size", c.batch_size);
    read(j, "base_lr", c.base_lr);
    read(j, "min_lr", c.min_lr);
    read(j, "warmup_steps", c.warmup_steps);
    if (j.contains("adamw")) {
      const auto& a = j.at("adamw");
      read(a, "beta1", c.adamw.beta1);
      read(a, "beta2", c.adamw.beta2);
      read(a, "eps", c.adamw.eps);
      read(a, "weight_decay", c.adamw.weight_decay);
    }
    read(j, "seed", c.seed);
    read(j, "mask_ratio", c.mask_ratio);
    read(j, "pimask_keep", c.pimask_keep);
    read(j, "mask_window", c.mask_window);
    read(j, "frequency_enabled", c.frequency_enabled);
    if (j.contains("frequency")) {
      read(j.at("frequency"), "cutoff_fraction", c.frequency.cutoff_fraction);
      read(j.at("frequency"), "selection_prob", c.frequency.selection_prob);
    }
    read(j, "augment", c.augment);
    if (j.contains("augmentation")) {
      const auto& a = j.at("augmentation");
      read(a, "flip_probability", c.augmentation.flip_probability);
      read(a, "rotate", c.augmentation.rotate);
      read(a, "crop_fraction", c.augmentation.crop_fraction);
      read(a, "gain_jitter", c.augmentation.gain_jitter);
      read(a, "offset_jitter", c.augmentation.offset_jitter);
      read(a, "blur_probability", c.augmentation.blur_probability);
      read(a, "max_blur_sigma", c.augmentation.max_blur_sigma);
      read(a, "max_noise_sigma", c.augmentation.max_noise_sigma);
    }
    read(j, "loss_include_pimask", c.loss.include_pimask);
    read(j, "checkpoint_every", c.checkpoint_every);
    read(j, "early_stop_patience", c.early_stop_patience);
    read(j, "early_stop_min_delta", c.early_stop_min_delta);
    read(j, "threads", c.threads);
    read(j, "debug_checks", c.debug_checks);
  } catch (const json::exception& e) {
    throw TrainConfigError(std::string("bad train config: ") + e.what());
  }
  return c;
}

SeedPlan::SeedPlan(std::uint64_t seed)
    : init(derive_seed(seed, "init")),
      order(derive_seed(seed, "order")),
      augment(derive_seed(seed, "augment")),
      mask(derive_seed(seed, "mask")),
      pimask(derive_seed(seed, "pimask")),
      frequency(derive_seed(seed, "frequency")),
      val_mask(derive_seed(seed, "val-mask")),
      val_pimask(derive_seed(seed, "val-pimask")) {}

json SeedPlan::to_json() const {
  return {{"init", init},         {"order", order},   {"augment", augment},   {"mask", mask},
          {"pimask", pimask},     {"frequency", frequency}, {"val_mask", val_mask}, {"val_pimask", val_pimask}};
}

masking::PatchGrid grid_for(const model::ModelConfig& mc, const TrainConfig& tc) {
  return masking::build_patch_grid({mc.frames, mc.channels, mc.height, mc.width}, mc.patch_size, mc.spectral_group,
                                   {mc.frames, tc.mask_window, tc.mask_window});
}

json to_json(const data::NormalizationStats& s) {
  std::vector<bool> valid(s.valid.begin(), s.valid.end());
  return {{"mean", s.mean}, {"stddev", s.stddev}, {"valid", valid}};
}

data::NormalizationStats normalization_from_json(const json& j) {
  data::NormalizationStats s;
  s.mean = j.at("mean").get<std::vector<double>>();
  s.stddev = j.at("stddev").get<std::vector<double>>();
  for (bool b : j.at("valid").get<std::vector<bool>>()) s.valid.push_back(b ? 1 : 0);
  return s;
}

// ---------------------------------------------------------------------------
// Batches

PreparedBatch prepare_batch(std::span<const data::SceneSample> samples, const masking::PatchGrid& grid,
                            const TrainConfig& cfg, std::span<const std::uint64_t> mask_seeds,
                            std::span<const std::uint64_t> pimask_seeds, std::span<const std::uint64_t> filter_seeds) {
  const Index B = static_cast<Index>(samples.size());
  if (mask_seeds.size() != samples.size() || pimask_seeds.size() != samples.size() ||
      (!filter_seeds.empty() && filter_seeds.size() != samples.size())) {
    throw TrainConfigError("prepare_batch: one seed per sample required");
  }
  PreparedBatch b;
  b.grid = grid;
  const Shape px = grid.pixel_shape(), ps = grid.patch_shape();
  const Index pixel_n = numel(px), patch_n = numel(ps), flags_n = grid.num_patches();
  b.target = Tensor<float>(Shape{B, px[0], px[1], px[2], px[3]});
  b.patches = Tensor<float>(Shape{B, ps[0], ps[1], ps[2], ps[3], ps[4]});
  b.masked.resize(static_cast<std::size_t>(B * flags_n));
  b.plans.resize(static_cast<std::size_t>(B));
  for (Index i = 0; i < B; ++i) {
    const auto& s = samples[static_cast<std::size_t>(i)];
    if (s.values.shape() != px) {
      throw data::DataError(data::DataErrorKind::shape_mismatch, "sample " + s.sample_id + " has shape " +
                                                                     shape_str(s.values.shape()) + ", model expects " +
                                                                     shape_str(px));
    }
    const auto k = static_cast<std::size_t>(i);
    masking::MaskPlan plan = masking::sample_window_mask(grid, cfg.mask_ratio, mask_seeds[k]);
    if (cfg.pimask_keep > 0) plan = masking::apply_pimask(plan, cfg.pimask_keep, pimask_seeds[k]);
    Tensor<float> visible = masking::apply_mask_pixels(s.values, grid, plan);
    if (!filter_seeds.empty()) {
      visible = freq::apply_frequency_augmentation(visible, grid, cfg.frequency, filter_seeds[k]);
      visible = masking::apply_mask_pixels(visible, grid, plan);
    }
    const Tensor<float> patches = masking::patchify(visible, grid);
    std::copy(patches.data(), patches.data() + patch_n, b.patches.data() + i * patch_n);
    std::copy(s.values.data(), s.values.data() + pixel_n, b.target.data() + i * pixel_n);
    const auto flags = plan.patch_mask(grid);
    std::copy(flags.data(), flags.data() + flags_n, b.masked.begin() + i * flags_n);
    b.ids.push_back(s.sample_id);
    b.band_valid.push_back(s.band_valid);
    b.plans[k] = std::move(plan);
  }
  return b;
}

std::vector<Index> epoch_order(const SeedPlan& seeds, int epoch, Index count) {
  std::vector<Index> order(static_cast<std::size_t>(count));
  std::iota(order.begin(), order.end(), Index{0});
  Rng rng(derive_seed(seeds.order, epoch));
  rng.shuffle(order.begin(), order.end());
  return order;
}

PreparedBatch training_batch(std::span<const data::SceneSample> raw, const data::NormalizationStats& stats,
                             const masking::PatchGrid& grid, const TrainConfig& cfg, int epoch, Index batch_index) {
  const SeedPlan seeds(cfg.seed);
  const Index n = static_cast<Index>(raw.size());
  const auto order = epoch_order(seeds, epoch, n);
  const Index first = batch_index * cfg.batch_size, last = std::min(n, first + cfg.batch_size);
  if (first >= n) throw TrainConfigError("training_batch: batch " + std::to_string(batch_index) + " is out of range");
  std::vector<data::SceneSample> samples(static_cast<std::size_t>(last - first));
  std::vector<std::uint64_t> mask_seeds, pimask_seeds, filter_seeds;
#pragma omp parallel for schedule(static)
  for (Index k = first; k < last; ++k) {
    const Index idx = order[static_cast<std::size_t>(k)];
    const auto& s = raw[static_cast<std::size_t>(idx)];
    data::SceneSample a = s;
    if (cfg.augment) {
      Rng rng(derive_seed(seeds.augment, epoch, idx));
      a = data::augment(s, data::sample_augmentation(rng, s.height(), s.width(), s.channels(), cfg.augmentation));
    }
    samples[static_cast<std::size_t>(k - first)] = data::normalize(a, stats);
  }
  for (Index k = first; k < last; ++k) {
    const Index idx = order[static_cast<std::size_t>(k)];
    mask_seeds.push_back(derive_seed(seeds.mask, epoch, idx));
    pimask_seeds.push_back(derive_seed(seeds.pimask, epoch, idx));
    if (cfg.frequency_enabled) filter_seeds.push_back(derive_seed(seeds.frequency, epoch, idx));
  }
  return prepare_batch(samples, grid, cfg, mask_seeds, pimask_seeds, filter_seeds);
}

PreparedBatch validation_batch(std::span<const data::SceneSample> normalized, Index first, Index count,
                               const masking::PatchGrid& grid, const TrainConfig& cfg) {
  const SeedPlan seeds(cfg.seed);
  std::vector<std::uint64_t> mask_seeds, pimask_seeds;
  for (Index i = first; i < first + count; ++i) {
    mask_seeds.push_back(derive_seed(seeds.val_mask, i));
    pimask_seeds.push_back(derive_seed(seeds.val_pimask, i));
  }
  return prepare_batch(normalized.subspan(static_cast<std::size_t>(first), static_cast<std::size_t>(count)), grid, cfg,
                       mask_seeds, pimask_seeds, {});
}

// ---------------------------------------------------------------------------
// Steps

namespace {

std::string describe(const PreparedBatch& b, const loss::LossReport& r) {
  std::string ids;
  for (const auto& id : b.ids) ids += (ids.empty() ? "" : ",") + id;
  return "non-finite loss on samples [" + ids + "]: total " + std::to_string(r.total) + ", spectral " +
         std::to_string(r.spectral_term) + ", spatial " + std::to_string(r.spatial_term);
}

Var<float> forward_loss(const model::Model<float>& model, const PreparedBatch& b, const TrainConfig& cfg,
                        loss::LossReport& report, Var<float>* recon_out) {
  Var<float> recon = model.reconstruct(Var<float>(b.patches), b.masked);
  Var<float> l = loss::total_loss(b.target, recon, std::span<const masking::MaskPlan>(b.plans),
                                  std::span<const std::vector<std::uint8_t>>(b.band_valid), b.grid, &report, cfg.loss);
  if (!std::isfinite(report.total)) throw NumericError(describe(b, report));
  if (recon_out) *recon_out = recon;
  return l;
}

}  // namespace

StepResult evaluate_batch(const model::Model<float>& model, const PreparedBatch& batch, const TrainConfig& cfg) {
  NoGradGuard guard;
  StepResult r;
  forward_loss(model, batch, cfg, r.report, &r.reconstruction);
  return r;
}

optim::AdamW<float> make_optimizer(model::Model<float>& model, const TrainConfig& cfg) {
  return optim::AdamW<float>(model.params().all(), cfg.adamw);
}

loss::LossReport pretrain_step(model::Model<float>& model, optim::AdamW<float>& optimizer, const PreparedBatch& batch,
                               const TrainConfig& cfg, double lr) {
  loss::LossReport report;
  std::uint64_t before = 0;
  auto fingerprint = [&] {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (Index i = 0; i < batch.target.size(); ++i) {
      std::uint32_t bits;
      std::memcpy(&bits, &batch.target[i], sizeof bits);
      h = (h ^ bits) * 0x100000001b3ULL;
    }
    return h;
  };
  if (cfg.debug_checks) before = fingerprint();
  {
    Var<float> l = forward_loss(model, batch, cfg, report, nullptr);
    l.backward();
  }
  if (cfg.debug_checks && fingerprint() != before) throw NumericError("loss target was modified during the step");
  for (const auto& p : optimizer.params()) {
    if (!p.var.has_grad()) continue;
    const auto& g = p.var.grad();
    for (Index i = 0; i < g.size(); ++i) {
      if (!std::isfinite(g[i])) throw NumericError("non-finite gradient in " + p.name + "; " + describe(batch, report));
    }
  }
  optimizer.step(lr);
  optimizer.zero_grad();
  return report;
}

// ---------------------------------------------------------------------------
// Run

namespace {

json log_record(long step, int epoch, const char* split, const loss::LossReport& r, double lr) {
  return {{"step", step},  {"epoch", epoch},          {"split", split}, {"total", r.total},
          {"spectral", r.spectral_term}, {"spatial", r.spatial_term}, {"lr", lr},       {"m", r.m}};
}

bool plateaued(const std::vector<double>& v, int patience, double delta) {
  if (static_cast<int>(v.size()) <= patience) return false;
  const auto split = v.end() - patience;
  const double before = *std::min_element(v.begin(), split);
  const double recent = *std::min_element(split, v.end());
  return recent > before * (1.0 - delta);
}

std::uint64_t plans_hash(const std::vector<masking::MaskPlan>& plans, std::uint64_t h) {
  for (const auto& p : plans) {
    for (auto v : p.window_mask) h = (h ^ v) * 0x100000001b3ULL;
    for (auto v : p.pimask_keep) h = (h ^ (v + 2u)) * 0x100000001b3ULL;
  }
  return h;
}

std::vector<std::string> read_lines(const fs::path& p) {
  std::vector<std::string> out;
  std::ifstream is(p);
  for (std::string line; std::getline(is, line);) out.push_back(line);
  return out;
}

void check_dims(std::span<const data::SceneSample> samples, const model::ModelConfig& mc, const char* what) {
  for (const auto& s : samples) {
    if (s.values.shape() != Shape{mc.frames, mc.channels, mc.height, mc.width}) {
      throw data::DataError(data::DataErrorKind::shape_mismatch,
                            std::string(what) + " sample " + s.sample_id + " has shape " + shape_str(s.values.shape()) +
                                " but the model expects [" + std::to_string(mc.frames) + ", " +
                                std::to_string(mc.channels) + ", " + std::to_string(mc.height) + ", " +
                                std::to_string(mc.width) + "]");
    }
  }
}

}  // namespace

RunResult run_pretraining(const model::ModelConfig& model_cfg, const TrainConfig& cfg,
                          std::span<const data::SceneSample> train, std::span<const data::SceneSample> val,
                          const fs::path& out_dir, const RunOptions& opts) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.validate();
  model_cfg.validate();
  if (cfg.threads > 0) omp_set_num_threads(cfg.threads);
  if (train.empty() || val.empty()) {
    throw data::DataError(data::DataErrorKind::invalid_argument, "pretraining needs non-empty train and val splits");
  }
  check_dims(train, model_cfg, "train");
  check_dims(val, model_cfg, "val");

  const Index n = static_cast<Index>(train.size());
  const Index steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const long total_steps = static_cast<long>(steps_per_epoch) * cfg.epochs;
  if (cfg.warmup_steps > total_steps) {
    throw TrainConfigError("warmup_steps (" + std::to_string(cfg.warmup_steps) + ") exceeds total steps (" +
                           std::to_string(total_steps) + ")");
  }
  const masking::PatchGrid grid = grid_for(model_cfg, cfg);
  const SeedPlan seeds(cfg.seed);
  const auto stats = data::compute_normalization_stats(train);
  std::vector<data::SceneSample> val_norm;
  for (const auto& s : val) val_norm.push_back(data::normalize(s, stats));

  std::uint64_t split_hash = 0xcbf29ce484222325ULL;
  for (auto part : {train, val}) {
    for (const auto& s : part) split_hash = (split_hash ^ data::sample_checksum(s)) * 0x100000001b3ULL;
    split_hash = (split_hash ^ 0xff) * 0x100000001b3ULL;
  }

  json manifest = {{"version", 1},
                   {"code_version", "rsfm 0.1.0"},
                   {"train_config", to_json(cfg)},
                   {"model_config", model::to_json(model_cfg)},
                   {"patch_order", ckpt::patch_order_contract(model_cfg)},
                   {"data", {{"train_count", n}, {"val_count", val.size()}, {"split_hash", split_hash}}},
                   {"normalization", to_json(stats)},
                   {"seeds", seeds.to_json()},
                   {"steps_per_epoch", steps_per_epoch},
                   {"total_steps", total_steps},
                   {"metric_log", "metrics.jsonl"}};

  fs::create_directories(out_dir / "checkpoints");
  const fs::path manifest_path = out_dir / "run_manifest.json";
  const fs::path log_path = out_dir / "metrics.jsonl";
  const fs::path last_dir = out_dir / "checkpoints" / "last", best_dir = out_dir / "checkpoints" / "best";

  model::Model<float> model(model_cfg, seeds.init);
  auto optimizer = make_optimizer(model, cfg);
  RunResult result;
  int start_epoch = 0;
  long step = 0;
  std::vector<double> val_history;
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  std::size_t log_lines = 0;

  if (opts.resume) {
    std::ifstream is(manifest_path);
    if (!is) throw ckpt::CheckpointError(ckpt::CheckpointErrorKind::io, "no run manifest to resume in " + out_dir.string());
    const json prior = json::parse(is);
    json a = prior, b = manifest;
    auto diff = ckpt::json_diff(a, b);
    if (!diff.empty()) {
      std::string msg = "cannot resume: run differs from " + manifest_path.string();
      for (const auto& d : diff) msg += "\n  " + d;
      throw ckpt::CheckpointError(ckpt::CheckpointErrorKind::incompatible, msg);
    }
    ckpt::load_model(last_dir, model);
    ckpt::load_optimizer(last_dir, optimizer);
    const json st = ckpt::read_manifest(last_dir).at("meta").at("train_state");
    start_epoch = st.at("epochs_completed").get<int>();
    step = st.at("step").get<long>();
    val_history = st.at("val_history").get<std::vector<double>>();
    best_val = st.at("best_val").is_null() ? best_val : st.at("best_val").get<double>();
    best_epoch = st.at("best_epoch").get<int>();
    log_lines = st.at("log_lines").get<std::size_t>();
    auto lines = read_lines(log_path);
    if (lines.size() < log_lines) throw ckpt::CheckpointError(ckpt::CheckpointErrorKind::format, "metric log is shorter than the checkpoint records");
    lines.resize(log_lines);
    std::ofstream os(log_path, std::ios::trunc);
    for (const auto& l : lines) {
      os << l << '\n';
      const json rec = json::parse(l);
      if (rec.at("split") == "train") result.train_losses.push_back(rec.at("total").get<double>());
    }
    if (st.at("stopped_early").get<bool>()) start_epoch = cfg.epochs;
  } else {
    std::ofstream(manifest_path, std::ios::trunc) << manifest.dump(2) << '\n';
    std::ofstream(log_path, std::ios::trunc);
  }

  std::ofstream log(log_path, std::ios::app);
  const int stop = std::min(cfg.epochs, opts.stop_after_epochs.value_or(cfg.epochs));
  bool stopped_early = false;
  for (int epoch = start_epoch; epoch < stop; ++epoch) {
    const auto te = std::chrono::steady_clock::now();
    double epoch_loss = 0;
    for (Index bi = 0; bi < steps_per_epoch; ++bi) {
      const PreparedBatch batch = training_batch(train, stats, grid, cfg, epoch, bi);
      const double lr = optim::warmup_cosine_lr(step, total_steps, cfg.warmup_steps, cfg.peak_lr(), cfg.min_lr);
      const loss::LossReport rep = pretrain_step(model, optimizer, batch, cfg, lr);
      log << log_record(step, epoch, "train", rep, lr).dump() << '\n';
      ++log_lines;
      result.train_losses.push_back(rep.total);
      epoch_loss += rep.total;
      ++step;
    }

    double weighted = 0, spectral = 0, spatial = 0;
    Index m = 0;
    std::uint64_t mask_hash = 0xcbf29ce484222325ULL;
    for (Index first = 0; first < static_cast<Index>(val_norm.size()); first += cfg.batch_size) {
      const Index count = std::min<Index>(cfg.batch_size, static_cast<Index>(val_norm.size()) - first);
      const PreparedBatch batch = validation_batch(val_norm, first, count, grid, cfg);
      mask_hash = plans_hash(batch.plans, mask_hash);
      const auto r = evaluate_batch(model, batch, cfg).report;
      weighted += r.total * static_cast<double>(r.m);
      spectral += r.spectral_term * static_cast<double>(r.m);
      spatial += r.spatial_term * static_cast<double>(r.m);
      m += r.m;
    }
    loss::LossReport vrep;
    vrep.m = m;
    if (m > 0) {
      vrep.total = weighted / static_cast<double>(m);
      vrep.spectral_term = spectral / static_cast<double>(m);
      vrep.spatial_term = spatial / static_cast<double>(m);
    }
    json vrec = log_record(step, epoch, "val", vrep, 0.0);
    vrec["mask_hash"] = mask_hash;
    log << vrec.dump() << '\n';
    log.flush();
    ++log_lines;
    val_history.push_back(vrep.total);
    if (vrep.total < best_val) {
      best_val = vrep.total;
      best_epoch = epoch;
      ckpt::save_model(best_dir, model, {{"epoch", epoch}, {"val_total", vrep.total}, {"normalization", to_json(stats)}});
    }
    stopped_early = plateaued(val_history, cfg.early_stop_patience, cfg.early_stop_min_delta);
    if ((epoch + 1) % cfg.checkpoint_every == 0 || epoch + 1 == stop || stopped_early) {
      json state = {{"epochs_completed", epoch + 1}, {"step", step},           {"val_history", val_history},
                    {"best_val", best_val},          {"best_epoch", best_epoch}, {"log_lines", log_lines},
                    {"stopped_early", stopped_early}};
      ckpt::save_model(last_dir, model, {{"train_state", state}, {"normalization", to_json(stats)}}, &optimizer);
    }
    result.epochs_completed = epoch + 1;
    if (!opts.quiet) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - te).count();
      spdlog::info("epoch {:3d}  train {:.4f}  val {:.4f}  lr {:.2e}  {:.1f}s", epoch + 1,
                   epoch_loss / static_cast<double>(steps_per_epoch), vrep.total,
                   optim::warmup_cosine_lr(step - 1, total_steps, cfg.warmup_steps, cfg.peak_lr(), cfg.min_lr), secs);
    }
    if (stopped_early) {
      if (!opts.quiet) spdlog::info("validation loss plateaued; stopping after epoch {}", epoch + 1);
      break;
    }
  }
  if (result.epochs_completed == 0) result.epochs_completed = start_epoch;
  result.manifest = manifest;
  result.steps = step;
  result.stopped_early = stopped_early;
  result.best_val = best_val;
  result.best_epoch = best_epoch;
  result.val_losses = val_history;
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

// ---------------------------------------------------------------------------
// Verification

json GradCheckReport::to_json() const {
  json w = json::array();
  for (const auto& e : worst) {
    w.push_back({{"name", e.name}, {"index", e.index}, {"analytic", e.analytic}, {"numeric", e.numeric}, {"rel_error", e.rel_error}});
  }
  return {{"checked", checked}, {"max_rel_error", max_rel_error}, {"worst", w}};
}

GradCheckReport finite_difference_check(std::vector<model::Param<double>>& params,
                                        const std::function<double()>& objective, Index samples, std::uint64_t seed,
                                        double h, double floor) {
  Rng rng(seed);
  std::vector<std::pair<std::size_t, Index>> picks;
  const Index per = (samples + static_cast<Index>(params.size()) - 1) / static_cast<Index>(params.size());
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Index size = params[k].var.size();
    const auto chosen = rng.choose(size, std::min(per, size));
    for (auto i : chosen) picks.emplace_back(k, i);
  }
  GradCheckReport rep;
  std::vector<GradCheckEntry> all;
  for (const auto& [k, i] : picks) {
    auto& var = params[k].var;
    auto& v = var.value_mut();
    const double orig = v[i];
    auto at = [&](double delta) {
      v[i] = orig + delta;
      return objective();
    };
    const double f1 = at(h), f_1 = at(-h), f2 = at(2 * h), f_2 = at(-2 * h);
    v[i] = orig;
    GradCheckEntry e;
    e.name = params[k].name;
    e.index = i;
    e.numeric = (8 * (f1 - f_1) - (f2 - f_2)) / (12 * h);
    e.analytic = var.has_grad() ? var.grad()[i] : 0.0;
    e.rel_error = std::abs(e.numeric - e.analytic) / std::max({std::abs(e.numeric), std::abs(e.analytic), floor});
    rep.max_rel_error = std::max(rep.max_rel_error, e.rel_error);
    all.push_back(e);
  }
  rep.checked = static_cast<Index>(all.size());
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.rel_error > b.rel_error; });
  all.resize(std::min<std::size_t>(all.size(), 10));
  rep.worst = std::move(all);
  return rep;
}

namespace {

struct DoubleHarness {
  model::Model<double> model;
  Tensor<double> target;
  Var<double> patches;
  std::vector<std::uint8_t> masked;
  Tensor<std::uint8_t> lmask;
  std::vector<Index> c;

  DoubleHarness(const model::ModelConfig& cfg, std::uint64_t seed) : model(cfg, derive_seed(seed, "gc-init")) {
    data::GeneratorConfig g;
    g.height = cfg.height;
    g.width = cfg.width;
    g.frames = cfg.frames;
    g.channels = cfg.channels >= 6 ? 4 : cfg.channels;
    data::SceneSample s = data::generate_synthetic_scene(derive_seed(seed, "gc-scene"), g, "gradcheck");
    if (cfg.channels == 6) s = data::pad_spectral_channels(s);
    const data::SceneSample one[] = {s};
    s = data::normalize(s, data::compute_normalization_stats(one));

    TrainConfig tc;
    tc.seed = seed;
    tc.mask_window = std::min<Index>(8, cfg.grid_h() / 2);
    const auto grid = grid_for(cfg, tc);
    const data::SceneSample batch_in[] = {s};
    const std::uint64_t ms[] = {derive_seed(seed, "gc-mask")}, ps[] = {derive_seed(seed, "gc-pimask")},
                        fs_[] = {derive_seed(seed, "gc-freq")};
    const PreparedBatch b = prepare_batch(batch_in, grid, tc, ms, ps, fs_);
    target = b.target.cast<double>();
    patches = Var<double>(b.patches.cast<double>());
    masked = b.masked;
    lmask = loss::loss_mask(std::span<const masking::MaskPlan>(b.plans),
                            std::span<const std::vector<std::uint8_t>>(b.band_valid), grid);
    c = loss::valid_counts(std::span<const std::vector<std::uint8_t>>(b.band_valid));
  }

  Var<double> loss() const {
    return loss::total_loss(target, model.reconstruct(patches, masked), lmask, std::span<const Index>(c));
  }
  double objective() const {
    NoGradGuard g;
    return loss().value()[0];
  }
};

}  // namespace

GradCheckReport gradient_check(const model::ModelConfig& cfg, std::uint64_t seed, Index samples, double h) {
  DoubleHarness hs(cfg, seed);
  hs.model.params().zero_grad();
  hs.loss().backward();
  return finite_difference_check(hs.model.params().all(), [&] { return hs.objective(); }, samples,
                                 derive_seed(seed, "gc-pick"), h);
}

double mask_token_gradient_norm(const model::ModelConfig& cfg, std::uint64_t seed) {
  DoubleHarness hs(cfg, seed);
  hs.model.params().zero_grad();
  hs.loss().backward();
  const auto& tok = hs.model.params().get("mask_token");
  if (!tok.has_grad()) return 0.0;
  double s = 0;
  for (Index i = 0; i < tok.size(); ++i) s += tok.grad()[i] * tok.grad()[i];
  return std::sqrt(s);
}

GradCheckReport linear_toy_gradient_check(std::uint64_t seed) {
  Rng rng(seed);
  auto normal = [&](Shape s) {
    Tensor<double> t(std::move(s));
    for (Index i = 0; i < t.size(); ++i) t[i] = rng.normal();
    return t;
  };
  model::ParamStore<double> store;
  store.add("toy.weight", normal({3, 5}), true);
  store.add("toy.bias", normal({3}), false);
  const Var<double> x(normal({8, 5})), y(normal({8, 3}));
  auto loss = [&] {
    Var<double> d = ag::sub(ag::linear(x, store.get("toy.weight"), store.get("toy.bias")), y);
    return ag::sum(ag::mul(d, d));
  };
  loss().backward();
  return finite_difference_check(store.all(), [&] {
    NoGradGuard g;
    return loss().value()[0];
  }, 30, derive_seed(seed, "toy-pick"), 1e-3, 1e-6);
}

std::vector<double> overfit_sample(model::Model<float>& model, const data::SceneSample& sample, const TrainConfig& cfg,
                                   int steps, double lr) {
  const auto grid = grid_for(model.config(), cfg);
  const SeedPlan seeds(cfg.seed);
  const data::SceneSample in[] = {sample};
  const std::uint64_t ms[] = {derive_seed(seeds.mask, 0)}, ps[] = {derive_seed(seeds.pimask, 0)};
  const PreparedBatch batch = prepare_batch(in, grid, cfg, ms, ps, {});
  auto optimizer = make_optimizer(model, cfg);
  std::vector<double> losses;
  for (int s = 0; s < steps; ++s) losses.push_back(pretrain_step(model, optimizer, batch, cfg, lr).total);
  losses.push_back(evaluate_batch(model, batch, cfg).report.total);
  return losses;
}

}  // namespace rsfm::train
