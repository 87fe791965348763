#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rsfm/rng.hpp"
#include "rsfm/tensor.hpp"

namespace rsfm::data {

enum class DataErrorKind {
  invalid_argument,
  shape_mismatch,
  truncated,
  unknown_version,
  io,
  zero_variance,
};

class DataError : public std::runtime_error {
 public:
  DataError(DataErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  DataErrorKind kind() const { return kind_; }

 private:
  DataErrorKind kind_;
};

// Land-cover classes of the synthetic generator, in reporting order.
enum class LandClass : std::int32_t { water = 0, hard_surface, grass, reed, woods, thicket };
inline constexpr int kNumLandClasses = 6;
const char* land_class_name(int cls);

// One georeferenced tile observed at T timestamps.
struct SceneSample {
  std::string sample_id;
  Tensor<float> values;                   // [T, C, H, W], reflectance-like in [0, 1]
  std::vector<std::uint8_t> band_valid;   // [C]
  std::vector<std::int32_t> timestamps;   // [T] day of year, strictly increasing
  std::optional<Tensor<std::int32_t>> label_mask;  // [H, W] class ids
  int num_classes = 0;                    // meaningful when label_mask is set

  Index frames() const { return values.dim(0); }
  Index channels() const { return values.dim(1); }
  Index height() const { return values.dim(2); }
  Index width() const { return values.dim(3); }
  Index valid_channel_count() const;

  // Throws DataError when any documented invariant is violated.
  void validate() const;
};

struct GeneratorConfig {
  Index height = 64;
  Index width = 64;
  Index channels = 6;  // 6 (full sensor) or 4 (blue, green, red, NIR)
  Index frames = 6;
  Index size_multiple = 1;  // H and W must be divisible by this
  int num_regions = 6;      // Voronoi sites per scene
  double noise_sigma = 0.01;
  double seasonal_amplitude = 0.3;  // relative amplitude for vegetated classes
  double seasonal_peak_doy = 171.0;
  std::array<double, kNumLandClasses> class_proportions{0.31, 0.05, 0.54, 0.04, 0.04, 0.02};
};

// Mean reflectance of `cls` in band `band` (6-band indexing) at a given day
// of year, before sensor noise. This is the generator's closed form.
// Sensor band (6-band indexing) observed by channel c of a `channels`-band sample.
int band_of_channel(Index channels, Index c);
double class_reflectance(const GeneratorConfig& cfg, int cls, int band, double day_of_year);
double seasonal_factor(const GeneratorConfig& cfg, int cls, double day_of_year);

SceneSample generate_synthetic_scene(std::uint64_t seed, const GeneratorConfig& cfg, std::string sample_id = "");

// Generates `count` scenes in parallel; scene i is keyed by (seed, i) only.
std::vector<SceneSample> generate_corpus(std::uint64_t seed, const GeneratorConfig& cfg, Index count,
                                         const std::string& prefix = "scene");

// 4-band sample -> 6 channels, the two new channels zero and invalid.
SceneSample pad_spectral_channels(const SceneSample& sample);

// Top-left offsets along one axis of every tile that fits inside `extent`.
std::vector<Index> tile_offsets(Index extent, Index tile_size, Index stride);
// All tiles on the stride lattice that fit inside the scene.
std::vector<SceneSample> tile_scene(const SceneSample& scene, Index tile_size, Index stride);
std::string tile_id(const std::string& parent, Index y, Index x);
// Parent id of a tile id (identity for non-tile ids).
std::string parent_id(const std::string& id);

struct DatasetSplit {
  std::vector<std::string> train_ids, val_ids, test_ids;
  std::array<double, 3> ratios{0.7, 0.2, 0.1};
};

DatasetSplit split_dataset(std::vector<std::string> scene_ids, std::array<double, 3> ratios, std::uint64_t seed);
// Routes tile ids to the split of their parent scene.
DatasetSplit assign_tiles(const DatasetSplit& scene_split, const std::vector<std::string>& tile_ids);

struct CropRect {
  Index y = 0, x = 0, height = 0, width = 0;  // height == 0 means no crop
};

// One parameter set shared by every frame of a sample.
struct AugmentationParams {
  CropRect crop;
  bool flip_horizontal = false;
  bool flip_vertical = false;
  int quarter_turns = 0;  // counter-clockwise rotation by 90 degree steps
  std::vector<double> gain;    // per channel, empty = 1
  std::vector<double> offset;  // per channel, empty = 0
  double blur_sigma = 0.0;
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;

  bool is_identity() const;
};

struct AugmentationConfig {
  bool enabled = true;
  double flip_probability = 0.5;
  bool rotate = true;
  double crop_fraction = 1.0;  // < 1 draws a random crop of this relative size
  double gain_jitter = 0.1;
  double offset_jitter = 0.02;
  double blur_probability = 0.2;
  double max_blur_sigma = 1.0;
  double max_noise_sigma = 0.01;
};

AugmentationParams sample_augmentation(Rng& rng, Index height, Index width, Index channels,
                                       const AugmentationConfig& cfg);
SceneSample augment(const SceneSample& sample, const AugmentationParams& params);

struct NormalizationStats {
  std::vector<double> mean;
  std::vector<double> stddev;
  std::vector<std::uint8_t> valid;
};

NormalizationStats compute_normalization_stats(std::span<const SceneSample> samples);
SceneSample normalize(const SceneSample& sample, const NormalizationStats& stats);
SceneSample denormalize(const SceneSample& sample, const NormalizationStats& stats);

// Sample files: <dir>/<id>.json manifest, <id>.f32 payload, <id>.labels.i32.
inline constexpr int kSampleFormatVersion = 1;
std::filesystem::path write_sample(const std::filesystem::path& dir, const SceneSample& sample);
SceneSample read_sample(const std::filesystem::path& manifest_path);

// Dataset directory: sample files plus splits.json.
void write_split_manifest(const std::filesystem::path& dir, const DatasetSplit& split, std::uint64_t seed);
DatasetSplit read_split_manifest(const std::filesystem::path& dir);
std::vector<SceneSample> load_samples(const std::filesystem::path& dir, const std::vector<std::string>& ids);

// FNV-1a over shape, payload and labels; used to fingerprint datasets.
std::uint64_t sample_checksum(const SceneSample& sample);

}  // namespace rsfm::data
