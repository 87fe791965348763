#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "rsfm/data.hpp"

namespace rsfm::data {

namespace {

// Band order: deep blue, blue, green, red, red edge, NIR.
constexpr std::array<std::array<double, 6>, kNumLandClasses> kSignatures{{
    {0.09, 0.08, 0.07, 0.05, 0.04, 0.03},  // water
    {0.20, 0.22, 0.24, 0.26, 0.28, 0.30},  // hard surface
    {0.04, 0.05, 0.11, 0.06, 0.26, 0.46},  // grass
    {0.06, 0.07, 0.13, 0.10, 0.22, 0.34},  // reed
    {0.03, 0.04, 0.07, 0.04, 0.19, 0.40},  // woods
    {0.05, 0.06, 0.09, 0.08, 0.17, 0.28},  // thicket
}};
constexpr std::array<int, 4> kFourBandSubset{1, 2, 3, 5};

bool is_vegetated(int cls) { return cls >= static_cast<int>(LandClass::grass); }

DataError invalid(const std::string& what) { return DataError(DataErrorKind::invalid_argument, what); }

}  // namespace

const char* land_class_name(int cls) {
  static constexpr std::array<const char*, kNumLandClasses> names{"water", "hard_surface", "grass",
                                                                  "reed",  "woods",        "thicket"};
  if (cls < 0 || cls >= kNumLandClasses) return "unknown";
  return names[static_cast<std::size_t>(cls)];
}

Index SceneSample::valid_channel_count() const {
  return std::count_if(band_valid.begin(), band_valid.end(), [](std::uint8_t v) { return v != 0; });
}

void SceneSample::validate() const {
  if (values.rank() != 4) throw DataError(DataErrorKind::shape_mismatch, "values must be [T,C,H,W]");
  if (static_cast<Index>(band_valid.size()) != channels()) {
    throw DataError(DataErrorKind::shape_mismatch, "band_valid length does not match channel count");
  }
  if (static_cast<Index>(timestamps.size()) != frames()) {
    throw DataError(DataErrorKind::shape_mismatch, "timestamp count does not match frame count");
  }
  for (std::size_t t = 1; t < timestamps.size(); ++t) {
    if (timestamps[t] <= timestamps[t - 1]) throw invalid("timestamps must be strictly increasing");
  }
  const Index plane = height() * width();
  for (Index t = 0; t < frames(); ++t) {
    for (Index c = 0; c < channels(); ++c) {
      const float* p = values.data() + (t * channels() + c) * plane;
      for (Index i = 0; i < plane; ++i) {
        if (!std::isfinite(p[i])) throw invalid("non-finite value in sample " + sample_id);
        if (!band_valid[static_cast<std::size_t>(c)] && p[i] != 0.0f) {
          throw invalid("padded channel " + std::to_string(c) + " is not zero in sample " + sample_id);
        }
      }
    }
  }
  if (label_mask) {
    if (label_mask->shape() != Shape{height(), width()}) {
      throw DataError(DataErrorKind::shape_mismatch, "label mask shape does not match values");
    }
    for (Index i = 0; i < label_mask->size(); ++i) {
      const auto v = (*label_mask)[i];
      if (v < 0 || v >= num_classes) throw invalid("label id out of range in sample " + sample_id);
    }
  }
}

double seasonal_factor(const GeneratorConfig& cfg, int cls, double doy) {
  if (!is_vegetated(cls)) return 1.0;
  // Peak at seasonal_peak_doy: sin argument is pi/2 there.
  const double phase = 2.0 * std::numbers::pi * (doy - cfg.seasonal_peak_doy) / 365.0 + std::numbers::pi / 2.0;
  return 1.0 + cfg.seasonal_amplitude * std::sin(phase);
}

int band_of_channel(Index channels, Index c) {
  if (channels == 6 && c >= 0 && c < 6) return static_cast<int>(c);
  if (channels == 4 && c >= 0 && c < 4) return kFourBandSubset[static_cast<std::size_t>(c)];
  throw DataError(DataErrorKind::invalid_argument, "no band for channel " + std::to_string(c) + " of " + std::to_string(channels));
}

double class_reflectance(const GeneratorConfig& cfg, int cls, int band, double doy) {
  return kSignatures[static_cast<std::size_t>(cls)][static_cast<std::size_t>(band)] * seasonal_factor(cfg, cls, doy);
}

SceneSample generate_synthetic_scene(std::uint64_t seed, const GeneratorConfig& cfg, std::string sample_id) {
  if (cfg.height <= 0 || cfg.width <= 0 || cfg.frames <= 0) throw invalid("generator dims must be positive");
  if (cfg.channels != 6 && cfg.channels != 4) throw invalid("generator supports 6 or 4 channels");
  if (cfg.size_multiple <= 0 || cfg.height % cfg.size_multiple || cfg.width % cfg.size_multiple) {
    throw invalid("scene size must be divisible by " + std::to_string(cfg.size_multiple));
  }
  if (cfg.num_regions <= 0) throw invalid("num_regions must be positive");
  if (cfg.noise_sigma < 0) throw invalid("noise_sigma must be non-negative");

  Rng rng(derive_seed(seed, "scene"));
  const Index T = cfg.frames, C = cfg.channels, H = cfg.height, W = cfg.width;

  struct Site {
    double y, x;
    int cls;
  };
  std::vector<Site> sites;
  std::vector<double> cum(cfg.class_proportions.begin(), cfg.class_proportions.end());
  for (std::size_t k = 1; k < cum.size(); ++k) cum[k] += cum[k - 1];
  for (int r = 0; r < cfg.num_regions; ++r) {
    const double u = rng.uniform() * cum.back();
    int cls = static_cast<int>(std::upper_bound(cum.begin(), cum.end(), u) - cum.begin());
    cls = std::min(cls, kNumLandClasses - 1);
    sites.push_back({rng.uniform(0.0, static_cast<double>(H)), rng.uniform(0.0, static_cast<double>(W)), cls});
  }

  Tensor<std::int32_t> labels(Shape{H, W});
  for (Index y = 0; y < H; ++y) {
    for (Index x = 0; x < W; ++x) {
      double best = 1e300;
      int cls = 0;
      for (const auto& s : sites) {
        const double dy = static_cast<double>(y) + 0.5 - s.y, dx = static_cast<double>(x) + 0.5 - s.x;
        const double d = dy * dy + dx * dx;
        if (d < best) {
          best = d;
          cls = s.cls;
        }
      }
      labels.at(y, x) = cls;
    }
  }

  std::vector<std::int32_t> stamps(static_cast<std::size_t>(T));
  const double spacing = 365.0 / static_cast<double>(T);
  for (Index t = 0; t < T; ++t) {
    const double jitter = rng.uniform(0.0, spacing * 0.4);
    stamps[static_cast<std::size_t>(t)] = 1 + static_cast<std::int32_t>(std::floor(spacing * static_cast<double>(t) + jitter));
  }

  SceneSample out;
  out.sample_id = sample_id.empty() ? "scene_" + std::to_string(seed) : std::move(sample_id);
  out.values = Tensor<float>(Shape{T, C, H, W});
  out.band_valid.assign(static_cast<std::size_t>(C), 1);
  out.timestamps = stamps;
  out.num_classes = kNumLandClasses;

  for (Index t = 0; t < T; ++t) {
    const double doy = stamps[static_cast<std::size_t>(t)];
    for (Index c = 0; c < C; ++c) {
      const int band = band_of_channel(C, c);
      std::array<double, kNumLandClasses> level{};
      for (int k = 0; k < kNumLandClasses; ++k) level[static_cast<std::size_t>(k)] = class_reflectance(cfg, k, band, doy);
      float* plane = out.values.data() + (t * C + c) * H * W;
      for (Index i = 0; i < H * W; ++i) {
        const double v = level[static_cast<std::size_t>(labels[i])] + rng.normal(0.0, cfg.noise_sigma);
        plane[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  out.label_mask = std::move(labels);
  return out;
}

std::vector<SceneSample> generate_corpus(std::uint64_t seed, const GeneratorConfig& cfg, Index count,
                                         const std::string& prefix) {
  std::vector<SceneSample> out(static_cast<std::size_t>(count));
  char buf[32];
#pragma omp parallel for schedule(dynamic) private(buf)
  for (Index i = 0; i < count; ++i) {
    std::snprintf(buf, sizeof buf, "_%05lld", static_cast<long long>(i));
    out[static_cast<std::size_t>(i)] = generate_synthetic_scene(derive_seed(seed, "corpus", i), cfg, prefix + buf);
  }
  return out;
}

SceneSample pad_spectral_channels(const SceneSample& sample) {
  const Index C = sample.channels();
  if (C == 6) {
    spdlog::warn("pad_spectral_channels: sample {} already has 6 channels, returned unchanged", sample.sample_id);
    return sample;
  }
  if (C != 4) throw invalid("pad_spectral_channels expects 4 or 6 channels, got " + std::to_string(C));
  if (sample.valid_channel_count() != 4) throw invalid("pad_spectral_channels expects 4 valid bands");
  const Index T = sample.frames(), plane = sample.height() * sample.width();
  SceneSample out = sample;
  out.values = Tensor<float>(Shape{T, 6, sample.height(), sample.width()});
  for (Index t = 0; t < T; ++t) {
    std::copy_n(sample.values.data() + t * 4 * plane, 4 * plane, out.values.data() + t * 6 * plane);
  }
  out.band_valid = {1, 1, 1, 1, 0, 0};
  return out;
}

std::string tile_id(const std::string& parent, Index y, Index x) {
  return parent + "@y" + std::to_string(y) + "x" + std::to_string(x);
}

std::string parent_id(const std::string& id) {
  const auto at = id.find('@');
  return at == std::string::npos ? id : id.substr(0, at);
}

std::vector<Index> tile_offsets(Index extent, Index tile, Index stride) {
  if (tile <= 0 || stride < 1) throw invalid("tile size and stride must be positive");
  if (tile > extent) throw invalid("tile larger than scene");
  std::vector<Index> out;
  for (Index o = 0; o + tile <= extent; o += stride) out.push_back(o);
  return out;
}

std::vector<SceneSample> tile_scene(const SceneSample& scene, Index tile, Index stride) {
  const Index T = scene.frames(), C = scene.channels(), H = scene.height(), W = scene.width();
  const auto ys = tile_offsets(H, tile, stride);
  const auto xs = tile_offsets(W, tile, stride);
  std::vector<SceneSample> tiles;
  for (Index oy : ys) {
    for (Index ox : xs) {
      SceneSample t;
      t.sample_id = tile_id(scene.sample_id, oy, ox);
      t.band_valid = scene.band_valid;
      t.timestamps = scene.timestamps;
      t.num_classes = scene.num_classes;
      t.values = Tensor<float>(Shape{T, C, tile, tile});
      for (Index f = 0; f < T; ++f)
        for (Index c = 0; c < C; ++c)
          for (Index y = 0; y < tile; ++y) {
            const float* src = scene.values.data() + ((f * C + c) * H + oy + y) * W + ox;
            std::copy_n(src, tile, t.values.data() + ((f * C + c) * tile + y) * tile);
          }
      if (scene.label_mask) {
        Tensor<std::int32_t> lm(Shape{tile, tile});
        for (Index y = 0; y < tile; ++y) {
          std::copy_n(scene.label_mask->data() + (oy + y) * W + ox, tile, lm.data() + y * tile);
        }
        t.label_mask = std::move(lm);
      }
      tiles.push_back(std::move(t));
    }
  }
  return tiles;
}

DatasetSplit split_dataset(std::vector<std::string> ids, std::array<double, 3> ratios, std::uint64_t seed) {
  if (ids.empty()) throw invalid("split_dataset: empty id list");
  for (double r : ratios) {
    if (r < 0) throw invalid("split_dataset: negative ratio");
  }
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) throw invalid("split_dataset: ratios must sum to 1");
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw invalid("split_dataset: duplicate ids");
  Rng rng(derive_seed(seed, "split"));
  rng.shuffle(ids.begin(), ids.end());
  const auto n = static_cast<double>(ids.size());
  // Floor allocation for val/test; the remainder goes to train. The epsilon
  // absorbs binary representation error in products like 0.1 * 30.
  const auto n_val = static_cast<std::size_t>(std::floor(ratios[1] * n + 1e-9));
  const auto n_test = static_cast<std::size_t>(std::floor(ratios[2] * n + 1e-9));
  const std::size_t n_train = ids.size() - n_val - n_test;
  DatasetSplit s;
  s.ratios = ratios;
  s.train_ids.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val_ids.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train),
                   ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test_ids.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), ids.end());
  return s;
}

DatasetSplit assign_tiles(const DatasetSplit& scene_split, const std::vector<std::string>& tile_ids) {
  auto contains = [](const std::vector<std::string>& v, const std::string& s) {
    return std::find(v.begin(), v.end(), s) != v.end();
  };
  DatasetSplit out;
  out.ratios = scene_split.ratios;
  for (const auto& id : tile_ids) {
    const std::string parent = parent_id(id);
    if (contains(scene_split.train_ids, parent)) {
      out.train_ids.push_back(id);
    } else if (contains(scene_split.val_ids, parent)) {
      out.val_ids.push_back(id);
    } else if (contains(scene_split.test_ids, parent)) {
      out.test_ids.push_back(id);
    } else {
      throw invalid("tile " + id + " has no parent scene in the split");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

bool AugmentationParams::is_identity() const {
  auto all_eq = [](const std::vector<double>& v, double x) {
    return std::all_of(v.begin(), v.end(), [x](double e) { return e == x; });
  };
  return crop.height == 0 && !flip_horizontal && !flip_vertical && quarter_turns % 4 == 0 && all_eq(gain, 1.0) &&
         all_eq(offset, 0.0) && blur_sigma == 0.0 && noise_sigma == 0.0;
}

AugmentationParams sample_augmentation(Rng& rng, Index H, Index W, Index C, const AugmentationConfig& cfg) {
  AugmentationParams p;
  if (!cfg.enabled) return p;
  if (cfg.crop_fraction < 1.0) {
    const Index ch = std::max<Index>(1, static_cast<Index>(std::floor(cfg.crop_fraction * static_cast<double>(H))));
    const Index cw = std::max<Index>(1, static_cast<Index>(std::floor(cfg.crop_fraction * static_cast<double>(W))));
    p.crop = {rng.randint(0, H - ch), rng.randint(0, W - cw), ch, cw};
  }
  p.flip_horizontal = rng.bernoulli(cfg.flip_probability);
  p.flip_vertical = rng.bernoulli(cfg.flip_probability);
  // Non-square crops would change the output aspect; only square outputs rotate.
  const Index oh = p.crop.height ? p.crop.height : H, ow = p.crop.height ? p.crop.width : W;
  if (cfg.rotate && oh == ow) p.quarter_turns = static_cast<int>(rng.randint(0, 3));
  p.gain.resize(static_cast<std::size_t>(C));
  p.offset.resize(static_cast<std::size_t>(C));
  for (Index c = 0; c < C; ++c) {
    p.gain[static_cast<std::size_t>(c)] = 1.0 + rng.uniform(-cfg.gain_jitter, cfg.gain_jitter);
    p.offset[static_cast<std::size_t>(c)] = rng.uniform(-cfg.offset_jitter, cfg.offset_jitter);
  }
  if (rng.bernoulli(cfg.blur_probability)) p.blur_sigma = rng.uniform(0.0, cfg.max_blur_sigma);
  p.noise_sigma = rng.uniform(0.0, cfg.max_noise_sigma);
  p.seed = static_cast<std::uint64_t>(rng.randint(0, std::numeric_limits<std::int64_t>::max()));
  return p;
}

namespace {

// Source pixel of output (y, x) under crop -> flips -> rotation.
struct SpatialMap {
  Index in_h, in_w, crop_y, crop_x, crop_h, crop_w, out_h, out_w;
  bool fh, fv;
  int turns;

  std::pair<Index, Index> source(Index y, Index x) const {
    // Undo rotation (counter-clockwise quarter turns).
    Index ry = y, rx = x, h = out_h, w = out_w;
    for (int k = 0; k < turns; ++k) {
      // One CCW turn maps (a, b) of an (h', w') image to (w'-1-b, a) of the
      // (w', h') result; invert that step.
      const Index py = rx, px = h - 1 - ry;
      ry = py;
      rx = px;
      std::swap(h, w);
    }
    if (fv) ry = crop_h - 1 - ry;
    if (fh) rx = crop_w - 1 - rx;
    return {crop_y + ry, crop_x + rx};
  }
};

void gaussian_blur(float* plane, Index H, Index W, double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  if (radius == 0) return;
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double ks = 0;
  for (int i = -radius; i <= radius; ++i) {
    k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    ks += k[static_cast<std::size_t>(i + radius)];
  }
  for (auto& v : k) v /= ks;
  auto reflect = [](Index i, Index n) {
    if (n == 1) return Index{0};
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
    return i;
  };
  std::vector<double> tmp(static_cast<std::size_t>(H * W));
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i) acc += k[static_cast<std::size_t>(i + radius)] * plane[y * W + reflect(x + i, W)];
      tmp[static_cast<std::size_t>(y * W + x)] = acc;
    }
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i) {
        acc += k[static_cast<std::size_t>(i + radius)] * tmp[static_cast<std::size_t>(reflect(y + i, H) * W + x)];
      }
      plane[y * W + x] = static_cast<float>(acc);
    }
}

}  // namespace

SceneSample augment(const SceneSample& sample, const AugmentationParams& params) {
  if (params.is_identity()) return sample;
  const Index T = sample.frames(), C = sample.channels(), H = sample.height(), W = sample.width();
  CropRect crop = params.crop;
  if (crop.height == 0) crop = {0, 0, H, W};
  if (crop.y < 0 || crop.x < 0 || crop.height <= 0 || crop.width <= 0 || crop.y + crop.height > H ||
      crop.x + crop.width > W) {
    throw invalid("crop rectangle out of bounds");
  }
  if (params.blur_sigma < 0 || params.noise_sigma < 0) throw invalid("augmentation sigmas must be non-negative");
  if (!params.gain.empty() && static_cast<Index>(params.gain.size()) != C) throw invalid("gain size mismatch");
  if (!params.offset.empty() && static_cast<Index>(params.offset.size()) != C) throw invalid("offset size mismatch");

  const int turns = ((params.quarter_turns % 4) + 4) % 4;
  const bool swap_hw = turns % 2 == 1;
  SpatialMap map{H,  W,  crop.y, crop.x, crop.height, crop.width, swap_hw ? crop.width : crop.height,
                 swap_hw ? crop.height : crop.width, params.flip_horizontal, params.flip_vertical, turns};
  const Index OH = map.out_h, OW = map.out_w;

  std::vector<Index> src(static_cast<std::size_t>(OH * OW));
  for (Index y = 0; y < OH; ++y)
    for (Index x = 0; x < OW; ++x) {
      auto [sy, sx] = map.source(y, x);
      src[static_cast<std::size_t>(y * OW + x)] = sy * W + sx;
    }

  SceneSample out;
  out.sample_id = sample.sample_id;
  out.band_valid = sample.band_valid;
  out.timestamps = sample.timestamps;
  out.num_classes = sample.num_classes;
  out.values = Tensor<float>(Shape{T, C, OH, OW});
  Rng noise_rng(derive_seed(params.seed, "augment-noise"));
  for (Index t = 0; t < T; ++t) {
    for (Index c = 0; c < C; ++c) {
      const float* in = sample.values.data() + (t * C + c) * H * W;
      float* o = out.values.data() + (t * C + c) * OH * OW;
      for (Index i = 0; i < OH * OW; ++i) o[i] = in[src[static_cast<std::size_t>(i)]];
      if (!sample.band_valid[static_cast<std::size_t>(c)]) continue;
      const double g = params.gain.empty() ? 1.0 : params.gain[static_cast<std::size_t>(c)];
      const double b = params.offset.empty() ? 0.0 : params.offset[static_cast<std::size_t>(c)];
      if (g != 1.0 || b != 0.0) {
        for (Index i = 0; i < OH * OW; ++i) o[i] = static_cast<float>(g * o[i] + b);
      }
      if (params.blur_sigma > 0) gaussian_blur(o, OH, OW, params.blur_sigma);
      if (params.noise_sigma > 0) {
        for (Index i = 0; i < OH * OW; ++i) o[i] = static_cast<float>(o[i] + noise_rng.normal(0.0, params.noise_sigma));
      }
      for (Index i = 0; i < OH * OW; ++i) o[i] = std::clamp(o[i], 0.0f, 1.0f);
    }
  }
  if (sample.label_mask) {
    Tensor<std::int32_t> lm(Shape{OH, OW});
    for (Index i = 0; i < OH * OW; ++i) lm[i] = (*sample.label_mask)[src[static_cast<std::size_t>(i)]];
    out.label_mask = std::move(lm);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization

NormalizationStats compute_normalization_stats(std::span<const SceneSample> samples) {
  if (samples.empty()) throw invalid("normalization stats need at least one sample");
  const Index C = samples[0].channels();
  std::vector<double> sum(static_cast<std::size_t>(C)), sumsq(static_cast<std::size_t>(C));
  std::vector<double> count(static_cast<std::size_t>(C));
  for (const auto& s : samples) {
    if (s.channels() != C) throw DataError(DataErrorKind::shape_mismatch, "channel count differs across samples");
    const Index plane = s.height() * s.width();
    for (Index t = 0; t < s.frames(); ++t)
      for (Index c = 0; c < C; ++c) {
        if (!s.band_valid[static_cast<std::size_t>(c)]) continue;
        const float* p = s.values.data() + (t * C + c) * plane;
        double a = 0, b = 0;
        for (Index i = 0; i < plane; ++i) {
          a += p[i];
          b += static_cast<double>(p[i]) * p[i];
        }
        sum[static_cast<std::size_t>(c)] += a;
        sumsq[static_cast<std::size_t>(c)] += b;
        count[static_cast<std::size_t>(c)] += static_cast<double>(plane);
      }
  }
  NormalizationStats st;
  st.mean.resize(static_cast<std::size_t>(C));
  st.stddev.resize(static_cast<std::size_t>(C));
  st.valid.resize(static_cast<std::size_t>(C));
  for (std::size_t c = 0; c < static_cast<std::size_t>(C); ++c) {
    if (count[c] == 0) {
      st.mean[c] = 0.0;
      st.stddev[c] = 1.0;
      st.valid[c] = 0;
      continue;
    }
    const double m = sum[c] / count[c];
    const double var = std::max(0.0, sumsq[c] / count[c] - m * m);
    if (var <= 1e-18) {
      throw DataError(DataErrorKind::zero_variance, "channel " + std::to_string(c) + " has zero variance");
    }
    st.mean[c] = m;
    st.stddev[c] = std::sqrt(var);
    st.valid[c] = 1;
  }
  return st;
}

namespace {
SceneSample apply_affine(const SceneSample& sample, const NormalizationStats& st, bool forward) {
  if (static_cast<Index>(st.mean.size()) != sample.channels()) {
    throw DataError(DataErrorKind::shape_mismatch, "normalization stats channel count mismatch");
  }
  SceneSample out = sample;
  const Index T = sample.frames(), C = sample.channels(), plane = sample.height() * sample.width();
  for (Index t = 0; t < T; ++t)
    for (Index c = 0; c < C; ++c) {
      if (!sample.band_valid[static_cast<std::size_t>(c)]) continue;
      const double m = st.mean[static_cast<std::size_t>(c)], s = st.stddev[static_cast<std::size_t>(c)];
      float* p = out.values.data() + (t * C + c) * plane;
      for (Index i = 0; i < plane; ++i) p[i] = static_cast<float>(forward ? (p[i] - m) / s : p[i] * s + m);
    }
  return out;
}
}  // namespace

SceneSample normalize(const SceneSample& sample, const NormalizationStats& st) { return apply_affine(sample, st, true); }
SceneSample denormalize(const SceneSample& sample, const NormalizationStats& st) {
  return apply_affine(sample, st, false);
}

}  // namespace rsfm::data
