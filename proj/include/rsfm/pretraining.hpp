#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "rsfm/data.hpp"
#include "rsfm/frequency.hpp"
#include "rsfm/loss.hpp"
#include "rsfm/masking.hpp"
#include "rsfm/model.hpp"
#include "rsfm/optim.hpp"

namespace rsfm::train {

// Non-finite loss or gradients.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TrainConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct TrainConfig {
  int epochs = 50;
  Index batch_size = 8;
  double base_lr = 1.5e-4;  // peak lr = base_lr * batch_size / 256
  double min_lr = 0.0;
  long warmup_steps = 100;
  optim::AdamWConfig adamw;
  std::uint64_t seed = 0;
  double mask_ratio = 0.75;
  double pimask_keep = 0.25;
  Index mask_window = 8;  // patches per side; the temporal extent is always T
  bool frequency_enabled = true;
  freq::FrequencyFilterSpec frequency;
  bool augment = true;
  data::AugmentationConfig augmentation;
  loss::LossOptions loss;
  int checkpoint_every = 1;  // epochs
  int early_stop_patience = 10;
  double early_stop_min_delta = 0.005;
  int threads = 0;  // 0 keeps the OpenMP default
  bool debug_checks = false;

  double peak_lr() const { return base_lr * static_cast<double>(batch_size) / 256.0; }
  void validate() const;
  // Desk-scale run on 64x64 synthetic tiles.
  static TrainConfig desk();
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

// Base seeds of every random stream, all derived from TrainConfig::seed.
struct SeedPlan {
  std::uint64_t init, order, augment, mask, pimask, frequency, val_mask, val_pimask;
  explicit SeedPlan(std::uint64_t seed);
  nlohmann::json to_json() const;
};

masking::PatchGrid grid_for(const model::ModelConfig& mc, const TrainConfig& tc);

// One model input batch.
struct PreparedBatch {
  masking::PatchGrid grid;
  std::vector<std::string> ids;
  Tensor<float> target;                         // [B, T, C, H, W], clean
  Tensor<float> patches;                        // [B, T, G, nh, nw, P], masked and filtered
  std::vector<std::uint8_t> masked;             // one flag per patch
  std::vector<masking::MaskPlan> plans;
  std::vector<std::vector<std::uint8_t>> band_valid;
  Index size() const { return static_cast<Index>(ids.size()); }
};

// Masks, filters and patchifies already normalized samples. mask_seeds and
// filter_seeds hold one entry per sample; an empty filter_seeds disables
// frequency augmentation.
PreparedBatch prepare_batch(std::span<const data::SceneSample> samples, const masking::PatchGrid& grid,
                            const TrainConfig& cfg, std::span<const std::uint64_t> mask_seeds,
                            std::span<const std::uint64_t> pimask_seeds, std::span<const std::uint64_t> filter_seeds);

// Sample order of an epoch.
std::vector<Index> epoch_order(const SeedPlan& seeds, int epoch, Index count);

// Builds batch `batch_index` of `epoch` exactly as training sees it:
// augmentation, normalization, masking and filtering.
PreparedBatch training_batch(std::span<const data::SceneSample> raw, const data::NormalizationStats& stats,
                             const masking::PatchGrid& grid, const TrainConfig& cfg, int epoch, Index batch_index);

// Fixed masks for validation: keyed by sample position, never by epoch.
PreparedBatch validation_batch(std::span<const data::SceneSample> normalized, Index first, Index count,
                               const masking::PatchGrid& grid, const TrainConfig& cfg);

struct StepResult {
  loss::LossReport report;
  Var<float> reconstruction;
};

// Forward pass and loss; no parameter update.
StepResult evaluate_batch(const model::Model<float>& model, const PreparedBatch& batch, const TrainConfig& cfg);

// Forward, loss, backward and one optimizer update at learning rate `lr`.
loss::LossReport pretrain_step(model::Model<float>& model, optim::AdamW<float>& optimizer, const PreparedBatch& batch,
                               const TrainConfig& cfg, double lr);

optim::AdamW<float> make_optimizer(model::Model<float>& model, const TrainConfig& cfg);

struct RunResult {
  nlohmann::json manifest;
  int epochs_completed = 0;
  long steps = 0;
  bool stopped_early = false;
  double best_val = 0.0;
  int best_epoch = -1;
  std::vector<double> train_losses;  // per step, this invocation and earlier ones
  std::vector<double> val_losses;    // per epoch
  double seconds = 0.0;
};

struct RunOptions {
  bool resume = false;
  // Stop after this many epochs in total (the schedule still spans cfg.epochs).
  std::optional<int> stop_after_epochs;
  bool quiet = false;
};

// Trains on `train` and validates on `val` (both raw, un-normalized).
// Writes run_manifest.json, metrics.jsonl, checkpoints/last and checkpoints/best under out_dir.
RunResult run_pretraining(const model::ModelConfig& model_cfg, const TrainConfig& cfg,
                          std::span<const data::SceneSample> train, std::span<const data::SceneSample> val,
                          const std::filesystem::path& out_dir, const RunOptions& opts = {});

nlohmann::json to_json(const data::NormalizationStats& stats);
data::NormalizationStats normalization_from_json(const nlohmann::json& j);

// Finite-difference verification.
struct GradCheckEntry {
  std::string name;
  Index index = 0;
  double analytic = 0.0, numeric = 0.0, rel_error = 0.0;
};

struct GradCheckReport {
  Index checked = 0;
  double max_rel_error = 0.0;
  std::vector<GradCheckEntry> worst;  // descending error, at most 10
  nlohmann::json to_json() const;
};

// Five-point central differences with step `h` on `samples` parameter elements spread
// over every tensor. Relative error uses max(|a|, |n|, floor) as denominator.
GradCheckReport finite_difference_check(std::vector<model::Param<double>>& params,
                                        const std::function<double()>& objective, Index samples, std::uint64_t seed,
                                        double h = 1e-3, double floor = 1e-6);

// Total loss of the hybrid model on a padded synthetic sample with masking
// and frequency augmentation, in 64-bit arithmetic.
GradCheckReport gradient_check(const model::ModelConfig& cfg, std::uint64_t seed, Index samples = 240,
                               double h = 1e-3);
// Same harness around a single linear layer.
GradCheckReport linear_toy_gradient_check(std::uint64_t seed);

// Gradient of the total loss with respect to the mask token in the hybrid model.
double mask_token_gradient_norm(const model::ModelConfig& cfg, std::uint64_t seed);

// Repeated updates on one normalized sample with a fixed mask; returns the
// total loss before every step and after the last one.
std::vector<double> overfit_sample(model::Model<float>& model, const data::SceneSample& sample, const TrainConfig& cfg,
                                   int steps, double lr);

}  // namespace rsfm::train
