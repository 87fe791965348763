#include <spdlog/spdlog.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <cstring>
#include <map>
#include <set>
#include <unistd.h>

#include "doctest.h"
#include "json.hpp"
#include "rsfm/data.hpp"

using namespace rsfm;
using namespace rsfm::data;
namespace fs = std::filesystem;

namespace {

GeneratorConfig small_cfg(Index hw = 32, Index channels = 6) {
  GeneratorConfig cfg;
  cfg.height = cfg.width = hw;
  cfg.channels = channels;
  return cfg;
}

bool same_bits(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())) == 0;
}

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("rsfm_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Solves the 3x3 normal equations of y ~ a + b sin(wt) + c cos(wt).
std::array<double, 3> fit_sinusoid(const std::vector<double>& t, const std::vector<double>& y, double w) {
  double A[3][4] = {};
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double f[3] = {1.0, std::sin(w * t[i]), std::cos(w * t[i])};
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) A[r][c] += f[r] * f[c];
      A[r][3] += f[r] * y[i];
    }
  }
  for (int p = 0; p < 3; ++p) {
    for (int r = p + 1; r < 3; ++r) {
      const double k = A[r][p] / A[p][p];
      for (int c = p; c < 4; ++c) A[r][c] -= k * A[p][c];
    }
  }
  std::array<double, 3> x{};
  for (int r = 2; r >= 0; --r) {
    double s = A[r][3];
    for (int c = r + 1; c < 3; ++c) s -= A[r][c] * x[static_cast<std::size_t>(c)];
    x[static_cast<std::size_t>(r)] = s / A[r][r];
  }
  return x;
}

}  // namespace

TEST_CASE("generator is deterministic and valid") {
  auto cfg = small_cfg();
  auto a = generate_synthetic_scene(0, cfg), b = generate_synthetic_scene(0, cfg);
  CHECK(same_bits(a.values, b.values));
  CHECK(*a.label_mask == *b.label_mask);
  CHECK(a.timestamps == b.timestamps);
  a.validate();
  CHECK(a.values.shape() == Shape{6, 6, 32, 32});
  auto c = generate_synthetic_scene(1, cfg);
  CHECK_FALSE(same_bits(a.values, c.values));
}

TEST_CASE("generator rejects bad dims") {
  auto cfg = small_cfg();
  cfg.height = 0;
  CHECK_THROWS_AS(generate_synthetic_scene(0, cfg), DataError);
  cfg = small_cfg(30);
  cfg.size_multiple = 32;
  CHECK_THROWS_AS(generate_synthetic_scene(0, cfg), DataError);
  cfg = small_cfg(32, 5);
  CHECK_THROWS_AS(generate_synthetic_scene(0, cfg), DataError);
}

TEST_CASE("class proportions track the target palette") {
  auto cfg = small_cfg(24);
  std::array<double, kNumLandClasses> counts{};
  double total = 0;
  for (std::uint64_t s = 0; s < 400; ++s) {
    auto sc = generate_synthetic_scene(s, cfg);
    for (Index i = 0; i < sc.label_mask->size(); ++i) counts[static_cast<std::size_t>((*sc.label_mask)[i])] += 1;
    total += static_cast<double>(sc.label_mask->size());
  }
  const std::array<double, kNumLandClasses> target{0.31, 0.05, 0.54, 0.04, 0.04, 0.02};
  for (std::size_t k = 0; k < target.size(); ++k) {
    INFO(land_class_name(static_cast<int>(k)));
    CHECK(std::abs(counts[k] / total - target[k]) < 0.04);
  }
}

TEST_CASE("seasonal modulation is a sinusoid with the configured amplitude") {
  auto cfg = small_cfg(32);
  cfg.frames = 12;
  cfg.class_proportions = {0, 0, 1, 0, 0, 0};  // grass only
  auto sc = generate_synthetic_scene(3, cfg);
  const int band = 5;
  const Index plane = 32 * 32;
  std::vector<double> t, y;
  for (Index f = 0; f < cfg.frames; ++f) {
    double m = 0;
    for (Index i = 0; i < plane; ++i) m += sc.values.at(f, Index{band}, i / 32, i % 32);
    t.push_back(sc.timestamps[static_cast<std::size_t>(f)]);
    y.push_back(m / static_cast<double>(plane));
  }
  const double w = 2.0 * M_PI / 365.0;
  auto [a, b, c] = fit_sinusoid(t, y, w);
  const double amp = std::hypot(b, c) / a;
  CHECK(amp == doctest::Approx(cfg.seasonal_amplitude).epsilon(0.02));
  // Peak day from the fitted phase: b sin + c cos peaks where tan(w t) = b / c.
  double peak = std::atan2(b, c) / w;
  if (peak < 0) peak += 365.0;
  CHECK(std::abs(peak - cfg.seasonal_peak_doy) < 3.0);
  // Non-vegetated classes are flat.
  cfg.class_proportions = {1, 0, 0, 0, 0, 0};
  auto water = generate_synthetic_scene(3, cfg);
  double lo = 1, hi = 0;
  for (Index f = 0; f < cfg.frames; ++f) {
    double m = 0;
    for (Index i = 0; i < plane; ++i) m += water.values.at(f, Index{0}, i / 32, i % 32);
    lo = std::min(lo, m / plane);
    hi = std::max(hi, m / plane);
  }
  CHECK(hi - lo < 2e-3);
}

TEST_CASE("corpus scenes depend only on seed and index") {
  auto cfg = small_cfg(16);
  auto a = generate_corpus(9, cfg, 5);
  auto b = generate_corpus(9, cfg, 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(a[i].sample_id == b[i].sample_id);
    CHECK(same_bits(a[i].values, b[i].values));
  }
}

TEST_CASE("channel padding") {
  spdlog::set_level(spdlog::level::err);
  auto four = generate_synthetic_scene(1, small_cfg(16, 4));
  auto six = pad_spectral_channels(four);
  CHECK(six.channels() == 6);
  CHECK(six.band_valid == std::vector<std::uint8_t>{1, 1, 1, 1, 0, 0});
  for (Index t = 0; t < six.frames(); ++t)
    for (Index c = 0; c < 4; ++c)
      for (Index y = 0; y < 16; ++y)
        for (Index x = 0; x < 16; ++x) REQUIRE(six.values.at(t, c, y, x) == four.values.at(t, c, y, x));
  six.validate();

  auto full = generate_synthetic_scene(1, small_cfg(16, 6));
  auto same = pad_spectral_channels(full);
  CHECK(same_bits(same.values, full.values));
  CHECK(same.band_valid == full.band_valid);

  SceneSample odd = four;
  odd.values = Tensor<float>(Shape{6, 3, 16, 16});
  odd.band_valid = {1, 1, 1};
  CHECK_THROWS_AS(pad_spectral_channels(odd), DataError);

  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    SceneSample s = four;
    for (Index i = 0; i < s.values.size(); ++i) s.values[i] = static_cast<float>(rng.uniform());
    auto p = pad_spectral_channels(s);
    double sum = 0;
    for (Index t = 0; t < p.frames(); ++t)
      for (Index c = 4; c < 6; ++c)
        for (Index y = 0; y < 16; ++y)
          for (Index x = 0; x < 16; ++x) sum += std::abs(p.values.at(t, c, y, x));
    REQUIRE(sum == 0.0);
  }
}

TEST_CASE("tile lattice counts") {
  const auto n = tile_offsets(6000, 512, 256).size();
  CHECK(n * n == 484);
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const Index tile = rng.randint(1, 64), extent = tile + rng.randint(0, 200), stride = rng.randint(1, 80);
    Index brute = 0;
    for (Index o = 0; o < extent; ++o) brute += (o % stride == 0 && o + tile <= extent) ? 1 : 0;
    REQUIRE(static_cast<Index>(tile_offsets(extent, tile, stride).size()) == brute);
  }
  CHECK_THROWS_AS(tile_offsets(100, 101, 1), DataError);
  CHECK_THROWS_AS(tile_offsets(100, 10, 0), DataError);
}

TEST_CASE("tiling") {
  auto cfg = small_cfg(48);
  cfg.frames = 2;
  auto scene = generate_synthetic_scene(4, cfg, "s0");

  auto one = tile_scene(scene, 48, 7);
  REQUIRE(one.size() == 1);
  CHECK(same_bits(one[0].values, scene.values));
  CHECK(*one[0].label_mask == *scene.label_mask);
  CHECK(parent_id(one[0].sample_id) == "s0");

  auto tiles = tile_scene(scene, 16, 16);
  REQUIRE(tiles.size() == 9);
  Tensor<float> back(scene.values.shape(), -1.0f);
  Tensor<std::int32_t> lback(scene.label_mask->shape(), -1);
  for (const auto& t : tiles) {
    const auto at = t.sample_id.find("@y");
    const auto xpos = t.sample_id.find('x', at);
    const Index oy = std::stoll(t.sample_id.substr(at + 2, xpos - at - 2));
    const Index ox = std::stoll(t.sample_id.substr(xpos + 1));
    for (Index f = 0; f < 2; ++f)
      for (Index c = 0; c < 6; ++c)
        for (Index y = 0; y < 16; ++y)
          for (Index x = 0; x < 16; ++x) back.at(f, c, oy + y, ox + x) = t.values.at(f, c, y, x);
    for (Index y = 0; y < 16; ++y)
      for (Index x = 0; x < 16; ++x) lback.at(oy + y, ox + x) = t.label_mask->at(y, x);
  }
  CHECK(same_bits(back, scene.values));
  CHECK(lback == *scene.label_mask);

  CHECK(tile_scene(scene, 16, 8).size() == 25);
  CHECK_THROWS_AS(tile_scene(scene, 64, 16), DataError);
}

TEST_CASE("scene split") {
  auto ids = [](int n) {
    std::vector<std::string> v;
    for (int i = 0; i < n; ++i) v.push_back("scene_" + std::to_string(i));
    return v;
  };
  auto s10 = split_dataset(ids(10), {0.7, 0.2, 0.1}, 0);
  CHECK(s10.train_ids.size() == 7);
  CHECK(s10.val_ids.size() == 2);
  CHECK(s10.test_ids.size() == 1);

  auto big = split_dataset(ids(52222), {0.7, 0.2, 0.1}, 5);
  CHECK(big.train_ids.size() == 36556);
  CHECK(big.val_ids.size() == 10444);
  CHECK(big.test_ids.size() == 5222);

  std::set<std::string> all;
  for (const auto* part : {&big.train_ids, &big.val_ids, &big.test_ids}) all.insert(part->begin(), part->end());
  CHECK(all.size() == 52222);

  auto again = split_dataset(ids(52222), {0.7, 0.2, 0.1}, 5);
  CHECK(again.train_ids == big.train_ids);
  CHECK(again.test_ids == big.test_ids);
  auto other = split_dataset(ids(52222), {0.7, 0.2, 0.1}, 6);
  CHECK(other.train_ids != big.train_ids);

  CHECK_THROWS_AS(split_dataset({}, {0.7, 0.2, 0.1}, 0), DataError);
  CHECK_THROWS_AS(split_dataset(ids(5), {0.7, 0.2, 0.2}, 0), DataError);
  CHECK_NOTHROW(split_dataset(ids(5), {0.7, 0.2, 0.1 + 5e-10}, 0));
}

TEST_CASE("tiles follow their parent scene's split") {
  std::vector<std::string> scenes{"a", "b", "c", "d", "e", "f", "g", "h", "i", "j"};
  auto split = split_dataset(scenes, {0.7, 0.2, 0.1}, 1);
  std::vector<std::string> tiles;
  for (const auto& s : scenes)
    for (Index y = 0; y < 3; ++y) tiles.push_back(tile_id(s, y * 256, 0));
  auto ts = assign_tiles(split, tiles);
  CHECK(ts.train_ids.size() == 21);
  CHECK(ts.val_ids.size() == 6);
  CHECK(ts.test_ids.size() == 3);
  std::map<std::string, int> owner;
  int k = 0;
  for (const auto* part : {&ts.train_ids, &ts.val_ids, &ts.test_ids}) {
    for (const auto& t : *part) {
      auto [it, inserted] = owner.emplace(parent_id(t), k);
      REQUIRE((inserted || it->second == k));
    }
    ++k;
  }
  CHECK_THROWS_AS(assign_tiles(split, {tile_id("zz", 0, 0)}), DataError);
}

TEST_CASE("augmentation identities") {
  auto s = generate_synthetic_scene(5, small_cfg(16));
  AugmentationParams id;
  CHECK(id.is_identity());
  CHECK(same_bits(augment(s, id).values, s.values));

  AugmentationParams fh;
  fh.flip_horizontal = true;
  auto twice = augment(augment(s, fh), fh);
  CHECK(same_bits(twice.values, s.values));
  CHECK(*twice.label_mask == *s.label_mask);

  AugmentationParams rot;
  rot.quarter_turns = 1;
  auto four = s;
  for (int i = 0; i < 4; ++i) four = augment(four, rot);
  CHECK(same_bits(four.values, s.values));

  AugmentationParams bad;
  bad.crop = {10, 10, 8, 8};
  CHECK_THROWS_AS(augment(s, bad), DataError);
  bad.crop = {0, 0, 8, 8};
  bad.blur_sigma = -1;
  CHECK_THROWS_AS(augment(s, bad), DataError);
}

TEST_CASE("one counter-clockwise turn") {
  SceneSample s;
  s.values = Tensor<float>(Shape{1, 1, 2, 3});
  for (Index i = 0; i < 6; ++i) s.values[i] = static_cast<float>(i) / 10.0f;
  s.band_valid = {1};
  s.timestamps = {1};
  AugmentationParams p;
  p.quarter_turns = 1;
  auto r = augment(s, p);
  // [[0 1 2],[3 4 5]] rotated CCW is [[2 5],[1 4],[0 3]].
  REQUIRE(r.values.shape() == Shape{1, 1, 3, 2});
  const float want[] = {0.2f, 0.5f, 0.1f, 0.4f, 0.0f, 0.3f};
  for (Index i = 0; i < 6; ++i) CHECK(r.values[i] == want[i]);
}

TEST_CASE("spatial transform is identical across frames") {
  // Each pixel carries its own linear index, identical in every frame, so
  // any frame-dependent permutation shows up as a cross-frame mismatch.
  const Index T = 6, C = 2, H = 12, W = 12;
  SceneSample s;
  s.values = Tensor<float>(Shape{T, C, H, W});
  for (Index t = 0; t < T; ++t)
    for (Index c = 0; c < C; ++c)
      for (Index i = 0; i < H * W; ++i) s.values.at(t, c, i / W, i % W) = static_cast<float>(i) / static_cast<float>(H * W);
  s.band_valid = {1, 1};
  s.timestamps = {10, 40, 80, 120, 200, 300};
  Rng rng(12);
  AugmentationConfig cfg;
  cfg.crop_fraction = 0.75;
  for (int trial = 0; trial < 50; ++trial) {
    auto p = sample_augmentation(rng, H, W, C, cfg);
    p.gain.clear();
    p.offset.clear();
    p.blur_sigma = 0;
    p.noise_sigma = 0;
    auto out = augment(s, p);
    const Index plane = out.height() * out.width();
    std::set<float> seen;
    for (Index t = 1; t < T; ++t)
      for (Index c = 0; c < C; ++c)
        for (Index i = 0; i < plane; ++i) {
          REQUIRE(out.values[(t * C + c) * plane + i] == out.values[c * plane + i]);
        }
    for (Index i = 0; i < plane; ++i) seen.insert(out.values[i]);
    CHECK(static_cast<Index>(seen.size()) == plane);  // a permutation, no duplicates
  }
}

TEST_CASE("color transforms share parameters across frames and keep padding zero") {
  auto four = generate_synthetic_scene(7, small_cfg(16, 4));
  auto s = pad_spectral_channels(four);
  // Constant-valued sample: every frame identical.
  for (Index t = 1; t < s.frames(); ++t)
    std::copy_n(s.values.data(), 6 * 256, s.values.data() + t * 6 * 256);
  Rng rng(13);
  AugmentationConfig cfg;
  cfg.blur_probability = 1.0;
  cfg.max_noise_sigma = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    auto p = sample_augmentation(rng, 16, 16, 6, cfg);
    p.noise_sigma = 0;
    auto out = augment(s, p);
    out.validate();
    for (Index t = 1; t < out.frames(); ++t)
      for (Index i = 0; i < 6 * 256; ++i) REQUIRE(out.values[t * 6 * 256 + i] == out.values[i]);
    for (Index i = 0; i < out.values.size(); ++i) {
      REQUIRE(out.values[i] >= 0.0f);
      REQUIRE(out.values[i] <= 1.0f);
    }
  }
}

TEST_CASE("normalization") {
  auto cfg = small_cfg(16);
  auto corpus = generate_corpus(3, cfg, 8);
  auto stats = compute_normalization_stats(corpus);
  double worst_mean = 0;
  for (Index c = 0; c < 6; ++c) {
    double sum = 0, n = 0;
    for (const auto& s : corpus) {
      auto ns = normalize(s, stats);
      for (Index t = 0; t < ns.frames(); ++t)
        for (Index y = 0; y < 16; ++y)
          for (Index x = 0; x < 16; ++x) {
            sum += ns.values.at(t, c, y, x);
            n += 1;
          }
    }
    worst_mean = std::max(worst_mean, std::abs(sum / n));
  }
  CHECK(worst_mean <= 1e-3);

  auto back = denormalize(normalize(corpus[0], stats), stats);
  double err = 0;
  for (Index i = 0; i < back.values.size(); ++i) err = std::max(err, static_cast<double>(std::abs(back.values[i] - corpus[0].values[i])));
  CHECK(err <= 1e-6);

  auto padded = pad_spectral_channels(generate_synthetic_scene(1, small_cfg(16, 4)));
  std::vector<SceneSample> one{padded};
  auto pst = compute_normalization_stats(one);
  CHECK(pst.valid == std::vector<std::uint8_t>{1, 1, 1, 1, 0, 0});
  normalize(padded, pst).validate();

  SceneSample flat = corpus[0];
  for (Index t = 0; t < flat.frames(); ++t)
    for (Index y = 0; y < 16; ++y)
      for (Index x = 0; x < 16; ++x) flat.values.at(t, Index{2}, y, x) = 0.25f;
  std::vector<SceneSample> fv{flat};
  try {
    compute_normalization_stats(fv);
    FAIL("expected zero-variance error");
  } catch (const DataError& e) {
    CHECK(e.kind() == DataErrorKind::zero_variance);
    CHECK(std::string(e.what()).find("channel 2") != std::string::npos);
  }
}

TEST_CASE("sample files round-trip") {
  const auto dir = scratch_dir("io");
  auto s = generate_synthetic_scene(2, small_cfg(16), "sample_a");
  auto m = write_sample(dir, s);
  auto r = read_sample(m);
  CHECK(r.sample_id == s.sample_id);
  CHECK(same_bits(r.values, s.values));
  CHECK(*r.label_mask == *s.label_mask);
  CHECK(r.band_valid == s.band_valid);
  CHECK(r.timestamps == s.timestamps);
  CHECK(r.num_classes == s.num_classes);

  Rng rng(21);
  for (int i = 0; i < 100; ++i) {
    GeneratorConfig cfg = small_cfg(8 * (1 + rng.randint(0, 2)), rng.bernoulli(0.5) ? 6 : 4);
    cfg.frames = 1 + rng.randint(0, 5);
    auto x = generate_synthetic_scene(rng.randint(0, 1 << 30), cfg, "r" + std::to_string(i));
    if (x.channels() == 4) x = pad_spectral_channels(x);
    if (rng.bernoulli(0.3)) x.label_mask.reset();
    REQUIRE(sample_checksum(read_sample(write_sample(dir, x))) == sample_checksum(x));
  }

  DatasetSplit split = split_dataset({"sample_a", "r0", "r1"}, {0.7, 0.2, 0.1}, 0);
  write_split_manifest(dir, split, 0);
  auto rs = read_split_manifest(dir);
  CHECK(rs.train_ids == split.train_ids);
  CHECK(rs.val_ids == split.val_ids);
  CHECK(load_samples(dir, rs.train_ids).size() == split.train_ids.size());
  fs::remove_all(dir);
}

TEST_CASE("sample file errors have distinct kinds") {
  const auto dir = scratch_dir("ioerr");
  auto s = generate_synthetic_scene(2, small_cfg(16), "b");
  auto m = write_sample(dir, s);
  auto kind_of = [&](const fs::path& p) {
    try {
      read_sample(p);
    } catch (const DataError& e) {
      return e.kind();
    }
    FAIL("expected a DataError");
    return DataErrorKind::io;
  };
  auto rewrite = [&](auto edit) {
    std::ifstream is(m);
    auto j = nlohmann::json::parse(is);
    is.close();
    edit(j);
    std::ofstream(m) << j.dump();
  };

  rewrite([](nlohmann::json& j) { j["shape"] = {6, 6, 512, 512}; j["band_valid"] = std::vector<bool>(6, true); });
  CHECK(kind_of(m) == DataErrorKind::truncated);
  write_sample(dir, s);
  rewrite([](nlohmann::json& j) { j["version"] = 99; });
  CHECK(kind_of(m) == DataErrorKind::unknown_version);
  write_sample(dir, s);
  rewrite([](nlohmann::json& j) { j["band_valid"] = {true, true}; });
  CHECK(kind_of(m) == DataErrorKind::shape_mismatch);
  write_sample(dir, s);
  fs::resize_file(dir / "b.f32", 100);
  CHECK(kind_of(m) == DataErrorKind::truncated);
  CHECK(kind_of(dir / "missing.json") == DataErrorKind::io);
  fs::remove_all(dir);
}
