#include <bit>
#include <fstream>
#include "json.hpp"

#include "rsfm/data.hpp"

namespace rsfm::data {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "payload I/O assumes a little-endian host");

namespace {

template <typename T>
void write_raw(const fs::path& path, const T* data, Index n) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError(DataErrorKind::io, "cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * static_cast<Index>(sizeof(T))));
  if (!os) throw DataError(DataErrorKind::io, "write failed for " + path.string());
}

template <typename T>
std::vector<T> read_raw(const fs::path& path, Index expected) {
  std::error_code ec;
  const auto bytes = fs::file_size(path, ec);
  if (ec) throw DataError(DataErrorKind::io, "cannot stat " + path.string());
  const auto want = static_cast<std::uintmax_t>(expected) * sizeof(T);
  if (bytes != want) {
    throw DataError(DataErrorKind::truncated, path.string() + ": payload has " + std::to_string(bytes) +
                                                  " bytes, manifest implies " + std::to_string(want));
  }
  std::vector<T> out(static_cast<std::size_t>(expected));
  std::ifstream is(path, std::ios::binary);
  is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(want));
  if (!is) throw DataError(DataErrorKind::io, "read failed for " + path.string());
  return out;
}

json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError(DataErrorKind::io, "cannot open " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw DataError(DataErrorKind::shape_mismatch, path.string() + ": malformed manifest: " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError(DataErrorKind::io, "cannot open " + path.string() + " for writing");
  os << j.dump(2) << '\n';
}

}  // namespace

fs::path write_sample(const fs::path& dir, const SceneSample& s) {
  s.validate();
  fs::create_directories(dir);
  const std::string payload = s.sample_id + ".f32";
  json m;
  m["version"] = kSampleFormatVersion;
  m["sample_id"] = s.sample_id;
  m["shape"] = s.values.shape();
  m["dtype"] = "f32";
  m["byte_order"] = "little";
  m["payload"] = payload;
  std::vector<bool> valid(s.band_valid.begin(), s.band_valid.end());
  m["band_valid"] = valid;
  m["timestamps"] = s.timestamps;
  write_raw(dir / payload, s.values.data(), s.values.size());
  if (s.label_mask) {
    const std::string lp = s.sample_id + ".labels.i32";
    m["label"] = {{"payload", lp}, {"dtype", "i32"}, {"shape", s.label_mask->shape()}, {"num_classes", s.num_classes}};
    write_raw(dir / lp, s.label_mask->data(), s.label_mask->size());
  }
  const fs::path manifest = dir / (s.sample_id + ".json");
  write_json(manifest, m);
  return manifest;
}

SceneSample read_sample(const fs::path& manifest_path) {
  const json m = read_json(manifest_path);
  const fs::path dir = manifest_path.parent_path();
  try {
    if (m.at("version").get<int>() != kSampleFormatVersion) {
      throw DataError(DataErrorKind::unknown_version,
                      manifest_path.string() + ": unknown format version " + m.at("version").dump());
    }
    if (m.at("dtype") != "f32" || m.at("byte_order") != "little") {
      throw DataError(DataErrorKind::shape_mismatch, manifest_path.string() + ": unsupported dtype/byte order");
    }
    SceneSample s;
    s.sample_id = m.at("sample_id").get<std::string>();
    const Shape shape = m.at("shape").get<Shape>();
    if (shape.size() != 4) throw DataError(DataErrorKind::shape_mismatch, "sample shape must have rank 4");
    for (bool b : m.at("band_valid").get<std::vector<bool>>()) s.band_valid.push_back(b ? 1 : 0);
    s.timestamps = m.at("timestamps").get<std::vector<std::int32_t>>();
    if (static_cast<Index>(s.band_valid.size()) != shape[1] || static_cast<Index>(s.timestamps.size()) != shape[0]) {
      throw DataError(DataErrorKind::shape_mismatch, manifest_path.string() + ": band/timestamp lengths disagree with shape");
    }
    s.values = Tensor<float>(shape, read_raw<float>(dir / m.at("payload").get<std::string>(), numel(shape)));
    if (m.contains("label")) {
      const auto& l = m.at("label");
      const Shape ls = l.at("shape").get<Shape>();
      if (ls != Shape{shape[2], shape[3]}) {
        throw DataError(DataErrorKind::shape_mismatch, manifest_path.string() + ": label shape mismatch");
      }
      s.num_classes = l.at("num_classes").get<int>();
      s.label_mask = Tensor<std::int32_t>(ls, read_raw<std::int32_t>(dir / l.at("payload").get<std::string>(), numel(ls)));
    }
    return s;
  } catch (const json::exception& e) {
    throw DataError(DataErrorKind::shape_mismatch, manifest_path.string() + ": " + e.what());
  }
}

void write_split_manifest(const fs::path& dir, const DatasetSplit& split, std::uint64_t seed) {
  fs::create_directories(dir);
  json j;
  j["version"] = 1;
  j["seed"] = seed;
  j["ratios"] = split.ratios;
  j["train"] = split.train_ids;
  j["val"] = split.val_ids;
  j["test"] = split.test_ids;
  write_json(dir / "splits.json", j);
}

DatasetSplit read_split_manifest(const fs::path& dir) {
  const json j = read_json(dir / "splits.json");
  try {
    DatasetSplit s;
    s.ratios = j.at("ratios").get<std::array<double, 3>>();
    s.train_ids = j.at("train").get<std::vector<std::string>>();
    s.val_ids = j.at("val").get<std::vector<std::string>>();
    s.test_ids = j.at("test").get<std::vector<std::string>>();
    return s;
  } catch (const json::exception& e) {
    throw DataError(DataErrorKind::shape_mismatch, "splits.json: " + std::string(e.what()));
  }
}

std::vector<SceneSample> load_samples(const fs::path& dir, const std::vector<std::string>& ids) {
  std::vector<SceneSample> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(read_sample(dir / (id + ".json")));
  return out;
}

std::uint64_t sample_checksum(const SceneSample& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  mix(s.values.shape().data(), s.values.shape().size() * sizeof(Index));
  mix(s.values.data(), static_cast<std::size_t>(s.values.size()) * sizeof(float));
  mix(s.band_valid.data(), s.band_valid.size());
  mix(s.timestamps.data(), s.timestamps.size() * sizeof(std::int32_t));
  if (s.label_mask) mix(s.label_mask->data(), static_cast<std::size_t>(s.label_mask->size()) * sizeof(std::int32_t));
  return h;
}

}  // namespace rsfm::data
