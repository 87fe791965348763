#pragma once

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "rsfm/data.hpp"
#include "rsfm/model.hpp"
#include "rsfm/optim.hpp"

namespace rsfm::downstream {

class DownstreamError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Task { segmentation, classification, change };
enum class TemporalReduce { mean, last };

const char* task_name(Task t);
Task task_from_name(const std::string& s);

struct HeadConfig {
  Task task = Task::segmentation;
  Index num_classes = 2;
  Index hidden = 256;
  bool encoder_frozen = true;
  TemporalReduce temporal_reduce = TemporalReduce::mean;
  bool class_weighting = false;  // inverse-frequency weights in the loss

  void validate() const;
};

nlohmann::json to_json(const HeadConfig& cfg);
HeadConfig head_config_from_json(const nlohmann::json& j);

// [B, T, G, h, w, D] stage tokens -> [B, h, w, G*D].
template <typename T>
Var<T> reduce_stage(const Var<T>& tokens, TemporalReduce reduce);

// Lightweight task head on top of the encoder's stage features.
//   segmentation: logits [B, K, H, W]
//   classification: logits [B, K]
//   change: logits [B, 2, H, W] from two feature sets
template <typename T>
class Head {
 public:
  Head(const HeadConfig& cfg, const model::ModelConfig& encoder, std::uint64_t seed);

  const HeadConfig& config() const { return cfg_; }
  const model::ModelConfig& encoder_config() const { return enc_; }
  model::ParamStore<T>& params() { return params_; }
  const model::ParamStore<T>& params() const { return params_; }

  Var<T> forward(const model::StageFeatures<T>& features) const;
  Var<T> forward(const model::StageFeatures<T>& before, const model::StageFeatures<T>& after) const;

  // Forward on features already passed through reduce_stage.
  Var<T> forward_reduced(const std::vector<Var<T>>& stages) const;

  // Learned linear layers in depth order; per-stage projections count once.
  std::vector<std::string> linear_layers() const;

 private:
  Var<T> dense_head(const std::vector<Var<T>>& projected) const;
  const Var<T>& p(const std::string& name) const { return params_.get(name); }

  HeadConfig cfg_;
  model::ModelConfig enc_;
  model::ParamStore<T> params_;
};

// ---------------------------------------------------------------------------
// Metrics

struct ClassMetrics {
  std::string name;
  Index support = 0;    // ground-truth count
  Index predicted = 0;  // predicted count
  double precision = 0, recall = 0, f1 = 0, iou = 0;
  std::optional<double> ap;  // when scores are given and the class has positives
};

struct MetricReport {
  Task task = Task::classification;
  std::vector<ClassMetrics> classes;
  std::vector<std::vector<Index>> confusion;  // [true][predicted]
  Index count = 0;                            // scored items
  double top1 = 0, miou = 0, macro_f1 = 0;
  std::optional<double> map;

  nlohmann::json to_json() const;
  std::string table() const;
};

// 2PR/(P+R), 0 when P+R = 0. Inputs and output in percent or fractions alike.
double f1_score(double precision, double recall);

// Labels < 0 are ignored. scores, when non-empty, hold K values per item.
// Class means run over classes that occur in labels or predictions.
MetricReport compute_metrics(const std::vector<std::int32_t>& predictions, const std::vector<std::int32_t>& labels,
                             Index num_classes, const std::vector<float>& scores = {},
                             const std::vector<std::string>& class_names = {}, Task task = Task::classification);

// Average precision of one class from scores ranked high to low (ties by index).
double average_precision(const std::vector<float>& scores, const std::vector<std::uint8_t>& positive);

// ---------------------------------------------------------------------------
// Data and fine-tuning

struct TaskSample {
  data::SceneSample image;                 // or the "before" image of a change pair
  std::optional<data::SceneSample> after;  // change detection only
  std::int32_t label = -1;                 // classification
  Tensor<std::int32_t> mask;               // [H, W] for segmentation and change
};

// Repeats a single-frame sample to `frames` identical frames.
data::SceneSample repeat_frames(const data::SceneSample& sample, Index frames);

// Land-cover segmentation tiles straight from the scene generator.
std::vector<TaskSample> synthetic_segmentation(std::uint64_t seed, const data::GeneratorConfig& cfg, Index count);
// Balanced scene classification: tile i favours class i mod K; the label is
// the majority class of its land-cover map.
std::vector<TaskSample> synthetic_classification(std::uint64_t seed, const data::GeneratorConfig& cfg, Index count,
                                                 Index num_classes = data::kNumLandClasses);
// Before/after pairs; the after image has rectangles re-rendered with a
// different land class. mask is 1 where the land class changed.
std::vector<TaskSample> synthetic_change(std::uint64_t seed, const data::GeneratorConfig& cfg, Index count);

struct FinetuneConfig {
  HeadConfig head;
  int steps = 300;
  Index batch_size = 8;
  double lr = 1e-3;
  double encoder_lr_scale = 0.1;  // encoder lr relative to the head when unfrozen
  long warmup_steps = 10;
  optim::AdamWConfig adamw;
  double train_fraction = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
  // A linear probe needs a larger step than the dense heads.
  static FinetuneConfig for_task(Task task, Index num_classes);
};

nlohmann::json to_json(const FinetuneConfig& cfg);
FinetuneConfig finetune_config_from_json(const nlohmann::json& j);

struct Predictions {
  std::vector<std::int32_t> predicted, labels;
  std::vector<float> scores;  // K per item
};

struct FinetuneResult {
  MetricReport train_report, test_report;
  std::vector<double> losses;
  std::uint64_t encoder_hash_before = 0, encoder_hash_after = 0;
  Index train_count = 0;
};

// Subset of `count` indices used by a train fraction; seeded, nested across
// fractions (the 10% subset is contained in the 20% subset).
std::vector<Index> fraction_subset(Index count, double fraction, std::uint64_t seed);

// Trains `head` (and the encoder unless frozen) on `train`, evaluates on `test`.
// Inputs are raw; they are normalized with `stats`.
FinetuneResult finetune(model::Model<float>& encoder, Head<float>& head, const FinetuneConfig& cfg,
                        const std::vector<TaskSample>& train, const std::vector<TaskSample>& test,
                        const data::NormalizationStats& stats);

Predictions predict(const model::Model<float>& encoder, const Head<float>& head, const std::vector<TaskSample>& samples,
                    const data::NormalizationStats& stats, Index batch_size = 8);

MetricReport evaluate(const model::Model<float>& encoder, const Head<float>& head, const std::vector<TaskSample>& samples,
                      const data::NormalizationStats& stats, Index batch_size = 8);

std::vector<std::string> class_names(Task task, Index num_classes);

// Head checkpoints reuse the parameter checkpoint layout.
void save_head(const std::filesystem::path& dir, const Head<float>& head, nlohmann::json meta = {});
void load_head(const std::filesystem::path& dir, Head<float>& head);
HeadConfig read_head_config(const std::filesystem::path& dir);

}  // namespace rsfm::downstream
