#include "rsfm/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <map>

namespace rsfm::ckpt {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

CheckpointError io_error(const std::string& what) { return CheckpointError(CheckpointErrorKind::io, what); }

void write_floats(std::ofstream& os, const Tensor<float>& t) {
  os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
}

std::vector<float> read_floats(const fs::path& path) {
  std::error_code ec;
  const auto bytes = fs::file_size(path, ec);
  if (ec) throw io_error("cannot stat " + path.string());
  if (bytes % sizeof(float)) throw CheckpointError(CheckpointErrorKind::format, path.string() + ": ragged payload");
  std::vector<float> out(bytes / sizeof(float));
  std::ifstream is(path, std::ios::binary);
  is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(bytes));
  if (!is) throw io_error("read failed for " + path.string());
  return out;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw io_error("cannot open " + path.string());
  os << j.dump(2) << '\n';
  if (!os) throw io_error("write failed for " + path.string());
}

struct Entry {
  Shape shape;
  Index offset = 0;
};

std::map<std::string, Entry> table(const json& entries) {
  std::map<std::string, Entry> out;
  for (const auto& e : entries) out[e.at("name").get<std::string>()] = {e.at("shape").get<Shape>(), e.at("offset").get<Index>()};
  return out;
}

}  // namespace

json patch_order_contract(const model::ModelConfig& c) {
  return {{"patch_size", c.patch_size},
          {"spectral_group", c.spectral_group},
          {"patch_layout", "band,row,col"},
          {"group_layout", "consecutive bands"},
          {"token_layout", "B,T,G,h,w,D"}};
}

std::vector<std::string> json_diff(const json& a, const json& b, const std::string& prefix) {
  std::vector<std::string> out;
  if (a.is_object() && b.is_object()) {
    for (auto it = a.begin(); it != a.end(); ++it) {
      const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
      if (!b.contains(it.key())) {
        out.push_back(key + ": checkpoint " + it.value().dump() + ", requested <missing>");
      } else {
        auto sub = json_diff(it.value(), b.at(it.key()), key);
        out.insert(out.end(), sub.begin(), sub.end());
      }
    }
    for (auto it = b.begin(); it != b.end(); ++it) {
      if (!a.contains(it.key())) {
        out.push_back((prefix.empty() ? it.key() : prefix + "." + it.key()) + ": checkpoint <missing>, requested " +
                      it.value().dump());
      }
    }
  } else if (a != b) {
    out.push_back(prefix + ": checkpoint " + a.dump() + ", requested " + b.dump());
  }
  return out;
}

void save_params(const fs::path& dir, const std::vector<model::Param<float>>& params, const json& meta,
                 const optim::AdamW<float>* optimizer) {
  const fs::path tmp = dir.string() + ".tmp";
  std::error_code ec;
  fs::remove_all(tmp, ec);
  fs::create_directories(tmp, ec);
  if (ec) throw io_error("cannot create " + tmp.string() + ": " + ec.message());

  json m;
  m["version"] = kCheckpointVersion;
  m["dtype"] = "f32";
  m["byte_order"] = "little";
  m["meta"] = meta;
  json entries = json::array();
  {
    std::ofstream os(tmp / "params.f32", std::ios::binary | std::ios::trunc);
    if (!os) throw io_error("cannot open " + (tmp / "params.f32").string());
    Index offset = 0;
    for (const auto& p : params) {
      entries.push_back({{"name", p.name}, {"shape", p.var.shape()}, {"offset", offset}});
      write_floats(os, p.var.value());
      offset += p.var.size();
    }
    if (!os) throw io_error("write failed for params.f32");
  }
  m["params"] = entries;
  if (optimizer) {
    const auto& opt = *optimizer;
    json names = json::array();
    std::ofstream os(tmp / "optimizer.f32", std::ios::binary | std::ios::trunc);
    for (const auto& p : opt.params()) names.push_back(p.name);
    for (const auto& t : opt.first_moments()) write_floats(os, t);
    for (const auto& t : opt.second_moments()) write_floats(os, t);
    if (!os) throw io_error("write failed for optimizer.f32");
    const auto& c = opt.config();
    m["optimizer"] = {{"kind", "adamw"},
                      {"steps", opt.steps()},
                      {"params", names},
                      {"beta1", c.beta1},
                      {"beta2", c.beta2},
                      {"eps", c.eps},
                      {"weight_decay", c.weight_decay}};
  }
  write_json(tmp / "manifest.json", m);

  const fs::path old = dir.string() + ".old";
  fs::remove_all(old, ec);
  if (fs::exists(dir)) fs::rename(dir, old, ec);
  if (ec) throw io_error("cannot move aside " + dir.string() + ": " + ec.message());
  fs::rename(tmp, dir, ec);
  if (ec) throw io_error("cannot rename " + tmp.string() + ": " + ec.message());
  fs::remove_all(old, ec);
}

json read_manifest(const fs::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw io_error("no checkpoint manifest in " + dir.string());
  json m;
  try {
    m = json::parse(is);
  } catch (const json::exception& e) {
    throw CheckpointError(CheckpointErrorKind::format, dir.string() + ": malformed manifest: " + e.what());
  }
  if (!m.contains("version") || m["version"] != kCheckpointVersion) {
    throw CheckpointError(CheckpointErrorKind::unknown_version,
                          dir.string() + ": unknown checkpoint version " + (m.contains("version") ? m["version"].dump() : "<none>"));
  }
  return m;
}

void load_params(const fs::path& dir, std::vector<model::Param<float>>& params) {
  const json m = read_manifest(dir);
  const auto entries = table(m.at("params"));
  const auto data = read_floats(dir / "params.f32");
  std::vector<std::string> problems;
  for (const auto& p : params) {
    auto it = entries.find(p.name);
    if (it == entries.end()) {
      problems.push_back(p.name + ": missing from checkpoint");
    } else if (it->second.shape != p.var.shape()) {
      problems.push_back(p.name + ": checkpoint " + shape_str(it->second.shape) + ", requested " + shape_str(p.var.shape()));
    } else if (it->second.offset + p.var.size() > static_cast<Index>(data.size())) {
      throw CheckpointError(CheckpointErrorKind::format, dir.string() + ": payload too short for " + p.name);
    }
  }
  if (!problems.empty()) {
    std::string msg = dir.string() + ": incompatible parameters";
    for (const auto& s : problems) msg += "\n  " + s;
    throw CheckpointError(CheckpointErrorKind::incompatible, msg);
  }
  for (auto& p : params) {
    const Entry& e = entries.at(p.name);
    auto& v = p.var.value_mut();
    std::copy(data.begin() + e.offset, data.begin() + e.offset + v.size(), v.data());
  }
}

void load_optimizer(const fs::path& dir, optim::AdamW<float>& opt) {
  const json m = read_manifest(dir);
  if (!m.contains("optimizer")) throw CheckpointError(CheckpointErrorKind::incompatible, dir.string() + ": no optimizer state");
  const auto& o = m.at("optimizer");
  std::vector<std::string> names;
  for (const auto& p : opt.params()) names.push_back(p.name);
  if (o.at("params").get<std::vector<std::string>>() != names) {
    throw CheckpointError(CheckpointErrorKind::incompatible, dir.string() + ": optimizer parameter list differs");
  }
  const auto data = read_floats(dir / "optimizer.f32");
  Index total = 0;
  for (const auto& t : opt.first_moments()) total += t.size();
  if (static_cast<Index>(data.size()) != 2 * total) {
    throw CheckpointError(CheckpointErrorKind::format, dir.string() + ": optimizer payload size mismatch");
  }
  Index off = 0;
  for (auto* moments : {&opt.first_moments(), &opt.second_moments()}) {
    for (auto& t : *moments) {
      std::copy(data.begin() + off, data.begin() + off + t.size(), t.data());
      off += t.size();
    }
  }
  opt.set_steps(o.at("steps").get<long>());
}

void save_model(const fs::path& dir, const model::Model<float>& model, json meta, const optim::AdamW<float>* opt) {
  meta["model_config"] = model::to_json(model.config());
  meta["patch_order"] = patch_order_contract(model.config());
  save_params(dir, model.params().all(), meta, opt);
}

model::ModelConfig read_model_config(const fs::path& dir) {
  const json m = read_manifest(dir);
  try {
    return model::model_config_from_json(m.at("meta").at("model_config"));
  } catch (const json::exception& e) {
    throw CheckpointError(CheckpointErrorKind::format, dir.string() + ": no model config: " + e.what());
  } catch (const model::ConfigError& e) {
    throw CheckpointError(CheckpointErrorKind::format, dir.string() + ": " + e.what());
  }
}

void load_model(const fs::path& dir, model::Model<float>& model) {
  const json m = read_manifest(dir);
  const json& meta = m.at("meta");
  std::vector<std::string> diff;
  if (meta.contains("model_config")) diff = json_diff(meta.at("model_config"), model::to_json(model.config()), "model");
  if (meta.contains("patch_order")) {
    auto d = json_diff(meta.at("patch_order"), patch_order_contract(model.config()), "patch_order");
    diff.insert(diff.end(), d.begin(), d.end());
  }
  if (!diff.empty()) {
    std::string msg = dir.string() + ": checkpoint does not match the requested model";
    for (const auto& s : diff) msg += "\n  " + s;
    throw CheckpointError(CheckpointErrorKind::incompatible, msg);
  }
  load_params(dir, model.params().all());
}

std::uint64_t params_hash(const std::vector<model::Param<float>>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& p : params) {
    mix(p.name.data(), p.name.size());
    mix(p.var.shape().data(), p.var.shape().size() * sizeof(Index));
    mix(p.var.value().data(), static_cast<std::size_t>(p.var.size()) * sizeof(float));
  }
  return h;
}

}  // namespace rsfm::ckpt
