#include "cli.hpp"

#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>

#include "rsfm/checkpoint.hpp"
#include "rsfm/data.hpp"
#include "rsfm/downstream.hpp"
#include "rsfm/masking.hpp"
#include "rsfm/model.hpp"
#include "rsfm/pretraining.hpp"
#include "rsfm/runtime.hpp"

namespace rsfm::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kCodeVersion = "rsfm 0.1.0";

const char* type_of(const json& j) {
  if (j.is_boolean()) return "boolean";
  if (j.is_number()) return "number";
  if (j.is_string()) return "string";
  if (j.is_array()) return "array";
  if (j.is_object()) return "object";
  return "null";
}

bool same_kind(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) return !(a.is_number_integer() && b.is_number_float());
  return std::string(type_of(a)) == type_of(b);
}

json generator_json(const data::GeneratorConfig& g) {
  return {{"scene_size", g.height},
          {"frames", g.frames},
          {"num_regions", g.num_regions},
          {"noise_sigma", g.noise_sigma},
          {"seasonal_amplitude", g.seasonal_amplitude},
          {"seasonal_peak_doy", g.seasonal_peak_doy},
          {"class_proportions", g.class_proportions}};
}

data::GeneratorConfig generator_from(const json& j) {
  data::GeneratorConfig g;
  g.height = g.width = j.at("scene_size").get<Index>();
  g.frames = j.at("frames").get<Index>();
  g.num_regions = j.at("num_regions").get<int>();
  g.noise_sigma = j.at("noise_sigma").get<double>();
  g.seasonal_amplitude = j.at("seasonal_amplitude").get<double>();
  g.seasonal_peak_doy = j.at("seasonal_peak_doy").get<double>();
  g.class_proportions = j.at("class_proportions").get<std::array<double, data::kNumLandClasses>>();
  return g;
}

json without(json j, std::initializer_list<const char*> keys) {
  for (const char* k : keys) j.erase(k);
  return j;
}

struct Resolved {
  json config;
  std::uint64_t seed = 0;
  model::ModelConfig model;
  train::TrainConfig train;
};

Resolved resolve(const json& cfg) {
  Resolved r;
  r.config = cfg;
  r.seed = cfg.at("seed").get<std::uint64_t>();
  r.model = model::model_config_from_json(cfg.at("model"));
  r.model.validate();
  json t = cfg.at("train");
  t["seed"] = r.seed;
  r.train = train::train_config_from_json(t);
  r.train.validate();
  return r;
}

void write_json_file(const fs::path& p, const json& j) {
  std::ofstream os(p, std::ios::trunc);
  if (!os) throw data::DataError(data::DataErrorKind::io, "cannot write " + p.string());
  os << j.dump(2) << '\n';
}

// Written before any work so that every output directory describes its run.
void write_manifest(const fs::path& out, const std::string& command, const Resolved& r,
                    const std::vector<std::string>& overrides, const json& extra = json::object()) {
  fs::create_directories(out);
  json m = {{"command", command},
            {"code_version", kCodeVersion},
            {"seed", r.seed},
            {"overrides", overrides},
            {"config", r.config}};
  for (auto it = extra.begin(); it != extra.end(); ++it) m[it.key()] = it.value();
  write_json_file(out / "command_manifest.json", m);
  write_json_file(out / "config.json", r.config);
}

data::DatasetSplit load_split(const fs::path& dir) {
  if (!fs::exists(dir / "splits.json")) {
    throw data::DataError(data::DataErrorKind::io, "no dataset at " + dir.string() + " (run synth-data first)");
  }
  return data::read_split_manifest(dir);
}

// ---------------------------------------------------------------------------

int cmd_synth_data(const Resolved& r, const fs::path& out) {
  const json& d = r.config.at("data");
  data::GeneratorConfig g = generator_from(d.at("generator"));
  const Index scenes = d.at("scenes").get<Index>();
  const Index tile = d.at("tile_size").get<Index>(), stride = d.at("stride").get<Index>();
  const int four_band_every = d.at("four_band_every").get<int>();
  const auto ratios = d.at("ratios").get<std::array<double, 3>>();
  if (scenes <= 0) throw CliConfigError("data.scenes must be positive");
  if (tile <= 0 || stride <= 0 || tile > g.height) throw CliConfigError("data.tile_size/stride must be positive and fit the scene");
  if (four_band_every < 0) throw CliConfigError("data.four_band_every must be >= 0");

  const std::uint64_t base = derive_seed(r.seed, "synth-data");
  std::vector<data::SceneSample> all(static_cast<std::size_t>(scenes));
#pragma omp parallel for schedule(dynamic)
  for (Index i = 0; i < scenes; ++i) {
    data::GeneratorConfig gi = g;
    const bool four = four_band_every > 0 && (i + 1) % four_band_every == 0;
    gi.channels = four ? 4 : 6;
    std::ostringstream id;
    id << "scene_" << std::setw(5) << std::setfill('0') << i;
    auto s = data::generate_synthetic_scene(derive_seed(base, "scene", i), gi, id.str());
    all[static_cast<std::size_t>(i)] = four ? data::pad_spectral_channels(s) : std::move(s);
  }

  std::vector<std::string> scene_ids, tile_ids;
  std::vector<data::SceneSample> tiles;
  for (const auto& s : all) {
    scene_ids.push_back(s.sample_id);
    for (auto& t : data::tile_scene(s, tile, stride)) {
      tile_ids.push_back(t.sample_id);
      tiles.push_back(std::move(t));
    }
  }
  auto split = data::assign_tiles(data::split_dataset(scene_ids, ratios, derive_seed(base, "split")), tile_ids);
  split.ratios = ratios;

  fs::create_directories(out);
  json checksums = json::object();
  for (const auto& t : tiles) {
    data::write_sample(out, t);
    checksums[t.sample_id] = data::sample_checksum(t);
  }
  data::write_split_manifest(out, split, derive_seed(base, "split"));
  write_json_file(out / "dataset.json", {{"scenes", scenes},
                                         {"tiles", tiles.size()},
                                         {"tile_size", tile},
                                         {"stride", stride},
                                         {"counts", {{"train", split.train_ids.size()}, {"val", split.val_ids.size()}, {"test", split.test_ids.size()}}},
                                         {"checksums", checksums}});
  spdlog::info("synth-data: {} scenes, {} tiles (train {}, val {}, test {}) in {}", scenes, tiles.size(),
               split.train_ids.size(), split.val_ids.size(), split.test_ids.size(), out.string());
  return kOk;
}

int cmd_pretrain(const Resolved& r, const fs::path& out, bool resume, int stop_after) {
  const fs::path dir = r.config.at("data").at("dir").get<std::string>();
  const auto split = load_split(dir);
  const auto train = data::load_samples(dir, split.train_ids);
  const auto val = data::load_samples(dir, split.val_ids);
  spdlog::info("pretrain: {} train / {} val samples from {}", train.size(), val.size(), dir.string());
  train::RunOptions opts;
  opts.resume = resume;
  if (stop_after > 0) opts.stop_after_epochs = stop_after;
  const auto res = train::run_pretraining(r.model, r.train, train, val, out, opts);
  spdlog::info("pretrain: {} epochs, {} steps, best val {:.6f} at epoch {}{} ({:.1f} s)", res.epochs_completed, res.steps,
               res.best_val, res.best_epoch, res.stopped_early ? ", stopped early" : "", res.seconds);
  return kOk;
}

// 8-bit RGB panels: input | model input | reconstruction of frame 0.
void write_triplet(const fs::path& path, const std::array<const float*, 3>& panels, Index C, Index H, Index W,
                   const data::NormalizationStats& stats) {
  const std::array<Index, 3> rgb{std::min<Index>(2, C - 1), std::min<Index>(1, C - 1), 0};
  auto raw = [&](const float* img, Index c, Index y, Index x) {
    const auto cs = static_cast<std::size_t>(c);
    return img[(c * H + y) * W + x] * stats.stddev[cs] + stats.mean[cs];
  };
  std::vector<double> ref;
  for (Index c : rgb)
    for (Index i = 0; i < H * W; ++i) ref.push_back(raw(panels[0], c, i / W, i % W));
  std::sort(ref.begin(), ref.end());
  const double lo = ref[ref.size() / 50], hi = std::max(ref[ref.size() - 1 - ref.size() / 50], lo + 1e-6);

  const Index gap = 2, total_w = 3 * W + 2 * gap;
  std::vector<unsigned char> px(static_cast<std::size_t>(total_w * H * 3), 255);
  for (int p = 0; p < 3; ++p)
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x)
        for (int k = 0; k < 3; ++k) {
          const double v = (raw(panels[static_cast<std::size_t>(p)], rgb[static_cast<std::size_t>(k)], y, x) - lo) / (hi - lo);
          px[static_cast<std::size_t>((y * total_w + p * (W + gap) + x) * 3 + k)] =
              static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
        }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw data::DataError(data::DataErrorKind::io, "cannot write " + path.string());
  os << "P6\n" << total_w << ' ' << H << "\n255\n";
  os.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
}

int cmd_reconstruct(const Resolved& r, const fs::path& out) {
  const json& rc = r.config.at("reconstruct");
  const fs::path dir = r.config.at("data").at("dir").get<std::string>();
  const std::string which = rc.at("split").get<std::string>();
  if (which != "train" && which != "val") throw CliConfigError("reconstruct.split must be \"train\" or \"val\"");
  const Index count = rc.at("count").get<Index>();
  if (count <= 0) throw CliConfigError("reconstruct.count must be positive");

  const auto split = load_split(dir);
  const auto train = data::load_samples(dir, split.train_ids);
  if (train.empty()) throw data::DataError(data::DataErrorKind::invalid_argument, "empty training split");
  const auto stats = data::compute_normalization_stats(train);
  const train::SeedPlan seeds(r.seed);
  model::Model<float> model(r.model, seeds.init);
  const std::string ckpt_dir = rc.at("checkpoint").get<std::string>();
  if (!ckpt_dir.empty()) ckpt::load_model(ckpt_dir, model);

  const auto grid = train::grid_for(r.model, r.train);
  train::PreparedBatch batch;
  if (which == "train") {
    batch = train::training_batch(train, stats, grid, r.train, 0, 0);
  } else {
    const auto val = data::load_samples(dir, split.val_ids);
    std::vector<data::SceneSample> norm;
    for (const auto& s : val) norm.push_back(data::normalize(s, stats));
    if (norm.empty()) throw data::DataError(data::DataErrorKind::invalid_argument, "empty validation split");
    batch = train::validation_batch(norm, 0, std::min<Index>(r.train.batch_size, static_cast<Index>(norm.size())), grid,
                                    r.train);
  }
  const auto res = train::evaluate_batch(model, batch, r.train);
  const Index n = std::min(count, batch.size());
  const Index T = grid.frames, C = grid.channels, H = grid.height, W = grid.width;
  const Index per = T * C * H * W, per_patches = grid.num_patches() * grid.patch_dim();
  json images = json::array();
  for (Index b = 0; b < n; ++b) {
    Tensor<float> p({grid.frames, grid.groups, grid.nh, grid.nw, grid.patch_dim()});
    std::copy_n(batch.patches.data() + b * per_patches, per_patches, p.data());
    const Tensor<float> seen = masking::unpatchify(p, grid);
    const std::string name = "recon_" + std::to_string(b) + ".ppm";
    write_triplet(out / name, {batch.target.data() + b * per, seen.data(), res.reconstruction.value().data() + b * per}, C, H,
                  W, stats);
    images.push_back({{"file", name}, {"sample_id", batch.ids[static_cast<std::size_t>(b)]}});
  }
  const auto& rep = res.report;
  write_json_file(out / "loss_report.json", {{"split", which},
                                              {"epoch", 0},
                                              {"batch", 0},
                                              {"checkpoint", ckpt_dir},
                                              {"ids", batch.ids},
                                              {"total", rep.total},
                                              {"spectral_term", rep.spectral_term},
                                              {"spatial_term", rep.spatial_term},
                                              {"m", rep.m},
                                              {"c", rep.c},
                                              {"images", images}});
  std::cout << std::setprecision(10) << "loss total " << rep.total << " spectral " << rep.spectral_term << " spatial "
            << rep.spatial_term << " m " << rep.m << '\n';
  return kOk;
}

int cmd_grad_check(const Resolved& r, const fs::path& out) {
  const json& gc = r.config.at("grad_check");
  const auto mc = model::model_config_from_json(gc.at("model"));
  mc.validate();
  const Index samples = gc.at("samples").get<Index>();
  const double h = gc.at("h").get<double>(), threshold = gc.at("threshold").get<double>();
  if (samples <= 0 || !(h > 0) || !(threshold > 0)) throw CliConfigError("grad_check samples, h and threshold must be positive");
  const auto toy = train::linear_toy_gradient_check(r.seed);
  const auto rep = train::gradient_check(mc, r.seed, samples, h);
  const bool pass = rep.max_rel_error < threshold && toy.max_rel_error < threshold && rep.checked >= std::min<Index>(samples, 200);
  write_json_file(out / "grad_check.json", {{"pass", pass}, {"threshold", threshold}, {"model", rep.to_json()}, {"linear_toy", toy.to_json()}});
  std::cout << (pass ? "PASS" : "FAIL") << " grad-check: " << rep.checked << " parameters, max rel error "
            << std::setprecision(3) << rep.max_rel_error << " (threshold " << threshold << "); linear toy "
            << toy.max_rel_error << '\n';
  for (const auto& e : rep.worst) std::cout << "  " << e.name << '[' << e.index << "] analytic " << e.analytic << " numeric " << e.numeric << " rel " << e.rel_error << '\n';
  return pass ? kOk : kNumericError;
}

// Downstream ------------------------------------------------------------------

data::GeneratorConfig task_generator(const Resolved& r) {
  data::GeneratorConfig g = generator_from(r.config.at("data").at("generator"));
  g.height = r.model.height;
  g.width = r.model.width;
  g.frames = r.model.frames;
  g.channels = r.model.channels;
  return g;
}

std::vector<downstream::TaskSample> task_data(const Resolved& r, downstream::Task task, Index K, const char* tag,
                                              Index count) {
  const auto g = task_generator(r);
  const std::uint64_t s = derive_seed(r.seed, "downstream", tag);
  switch (task) {
    case downstream::Task::segmentation:
      return downstream::synthetic_segmentation(s, g, count);
    case downstream::Task::classification:
      return downstream::synthetic_classification(s, g, count, K);
    case downstream::Task::change:
      return downstream::synthetic_change(s, g, count);
  }
  return {};
}

std::unique_ptr<model::Model<float>> make_encoder(const Resolved& r, const std::string& checkpoint) {
  auto enc = std::make_unique<model::Model<float>>(r.model, derive_seed(r.seed, "encoder-init"));
  if (!checkpoint.empty()) ckpt::load_model(checkpoint, *enc);
  return enc;
}

int cmd_finetune(const Resolved& r, const fs::path& out) {
  const json& f = r.config.at("finetune");
  json fj = without(f, {"encoder_checkpoint", "train_count", "test_count"});
  fj["seed"] = derive_seed(r.seed, "finetune");
  const auto fc = downstream::finetune_config_from_json(fj);
  fc.validate();
  const Index ntrain = f.at("train_count").get<Index>(), ntest = f.at("test_count").get<Index>();
  if (ntrain <= 0 || ntest <= 0) throw CliConfigError("finetune.train_count and test_count must be positive");
  const std::string enc_path = f.at("encoder_checkpoint").get<std::string>();

  auto encoder = make_encoder(r, enc_path);
  auto& enc = *encoder;
  downstream::Head<float> head(fc.head, r.model, derive_seed(r.seed, "head-init"));
  const auto train = task_data(r, fc.head.task, fc.head.num_classes, "train", ntrain);
  const auto test = task_data(r, fc.head.task, fc.head.num_classes, "test", ntest);
  std::vector<data::SceneSample> imgs;
  for (const auto& t : train) imgs.push_back(t.image);
  const auto stats = data::compute_normalization_stats(imgs);

  const auto res = downstream::finetune(enc, head, fc, train, test, stats);
  downstream::save_head(out / "head", head,
                        {{"normalization", train::to_json(stats)},
                         {"encoder_checkpoint", enc_path},
                         {"encoder_hash", res.encoder_hash_after}});
  if (!fc.head.encoder_frozen) ckpt::save_model(out / "encoder", enc);
  write_json_file(out / "metrics.json", {{"task", downstream::task_name(fc.head.task)},
                                         {"train_count", res.train_count},
                                         {"test", res.test_report.to_json()},
                                         {"train", res.train_report.to_json()},
                                         {"losses", res.losses},
                                         {"encoder_hash_before", res.encoder_hash_before},
                                         {"encoder_hash_after", res.encoder_hash_after}});
  std::cout << "test\n" << res.test_report.table();
  return kOk;
}

int cmd_evaluate(const Resolved& r, const fs::path& out) {
  const fs::path run = r.config.at("evaluate").at("run_dir").get<std::string>();
  if (run.empty()) throw CliConfigError("evaluate.run_dir is required");
  const auto hc = downstream::read_head_config(run / "head");
  const json meta = ckpt::read_manifest(run / "head").at("meta");
  const auto stats = train::normalization_from_json(meta.at("normalization"));
  const std::string enc_path = fs::exists(run / "encoder") ? (run / "encoder").string() : meta.at("encoder_checkpoint").get<std::string>();
  auto encoder = make_encoder(r, enc_path);
  const auto& enc = *encoder;
  if (ckpt::params_hash(enc.params().all()) != meta.at("encoder_hash").get<std::uint64_t>()) {
    throw ckpt::CheckpointError(ckpt::CheckpointErrorKind::incompatible,
                                "encoder does not match the one the head was trained with (seed or checkpoint differs)");
  }
  downstream::Head<float> head(hc, r.model, 0);
  downstream::load_head(run / "head", head);
  const Index ntest = r.config.at("finetune").at("test_count").get<Index>();
  if (ntest <= 0) throw CliConfigError("finetune.test_count must be positive");
  const auto test = task_data(r, hc.task, hc.num_classes, "test", ntest);
  const auto rep = downstream::evaluate(enc, head, test, stats);
  write_json_file(out / "metrics.json", {{"task", downstream::task_name(hc.task)}, {"test", rep.to_json()}});
  std::cout << rep.table();
  return kOk;
}

json load_config(const std::string& path, const std::vector<std::string>& overrides, std::optional<std::uint64_t> seed,
                 std::optional<int> threads) {
  json cfg = default_config();
  if (!path.empty()) {
    std::ifstream is(path);
    if (!is) throw data::DataError(data::DataErrorKind::io, "cannot read config " + path);
    json file;
    try {
      file = json::parse(is);
    } catch (const json::parse_error& e) {
      throw CliConfigError(path + ": " + e.what());
    }
    merge_checked(cfg, file);
  }
  for (const auto& o : overrides) apply_override(cfg, o);
  if (seed) cfg["seed"] = *seed;
  if (threads) cfg["threads"] = *threads;
  return cfg;
}

}  // namespace

json default_config() {
  json train = without(train::to_json(train::TrainConfig::desk()), {"seed"});
  auto fc = downstream::FinetuneConfig::for_task(downstream::Task::segmentation, data::kNumLandClasses);
  json finetune = without(downstream::to_json(fc), {"seed"});
  finetune["encoder_checkpoint"] = "";
  finetune["train_count"] = 8;
  finetune["test_count"] = 8;
  data::GeneratorConfig g;
  g.height = g.width = 128;
  return {{"seed", 0},
          {"threads", 0},
          {"model", model::to_json(model::ModelConfig::desk())},
          {"data",
           {{"dir", "data"},
            {"scenes", 20},
            {"tile_size", 64},
            {"stride", 64},
            {"ratios", {0.7, 0.2, 0.1}},
            {"four_band_every", 0},
            {"generator", generator_json(g)}}},
          {"train", train},
          {"finetune", finetune},
          {"evaluate", {{"run_dir", ""}}},
          {"reconstruct", {{"checkpoint", ""}, {"split", "train"}, {"count", 4}}},
          {"grad_check",
           {{"samples", 240}, {"h", 1e-3}, {"threshold", 1e-4}, {"model", model::to_json(model::ModelConfig::tiny())}}}};
}

void merge_checked(json& base, const json& patch, const std::string& path) {
  if (!patch.is_object()) throw CliConfigError((path.empty() ? std::string("config") : path) + ": expected an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw CliConfigError("unknown config key: " + key);
    json& slot = base[it.key()];
    if (slot.is_object()) {
      merge_checked(slot, it.value(), key);
    } else if (!same_kind(slot, it.value())) {
      throw CliConfigError(key + ": expected " + type_of(slot) + ", got " + type_of(it.value()));
    } else if (slot.is_array() && slot.size() != it.value().size()) {
      throw CliConfigError(key + ": expected " + std::to_string(slot.size()) + " elements");
    } else {
      slot = it.value();
    }
  }
}

void apply_override(json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw CliConfigError("override must look like key=value: " + assignment);
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json patch = value;
  std::string rest = key;
  std::vector<std::string> parts;
  for (std::size_t p; (p = rest.find('.')) != std::string::npos; rest = rest.substr(p + 1)) parts.push_back(rest.substr(0, p));
  parts.push_back(rest);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) {
    if (it->empty()) throw CliConfigError("malformed override key: " + key);
    patch = json{{*it, patch}};
  }
  merge_checked(cfg, patch);
}

int run(const std::vector<std::string>& args) {
  CLI::App app{"Masked-image-modeling pretraining and downstream evaluation on synthetic remote-sensing scenes", "rsfm"};
  app.require_subcommand(1);
  std::string config_path, out_dir;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  bool print_config = false, resume = false;
  int stop_after = 0;

  const std::vector<std::pair<std::string, std::string>> commands{
      {"synth-data", "generate a tiled synthetic dataset with scene-level splits"},
      {"pretrain", "masked reconstruction pretraining"},
      {"finetune", "train a task head on a synthetic downstream task"},
      {"evaluate", "score a fine-tuned head on the downstream test set"},
      {"reconstruct", "write input / masked / reconstruction images and the batch loss"},
      {"grad-check", "finite-difference gradient verification of the hybrid model"}};
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("-c,--config", config_path, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("-o,--out", out_dir, name == "synth-data" ? "dataset directory (default data.dir)" : "output directory");
    sub->add_option("--seed", seed, "single seed for every random stream");
    sub->add_option("--threads", threads, "OpenMP threads (0 keeps the default)");
    sub->add_flag("--print-config", print_config, "print the resolved config and exit");
    sub->add_option("overrides", overrides, "key=value config overrides (dotted keys)");
    if (name == "pretrain") {
      sub->add_flag("--resume", resume, "continue from <out>/checkpoints/last");
      sub->add_option("--stop-after", stop_after, "stop after this many epochs in total");
    }
  }

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    const json cfg = load_config(config_path, overrides, seed, threads);
    if (print_config) {
      std::cout << cfg.dump(2) << '\n';
      return kOk;
    }
    const Resolved r = resolve(cfg);
    set_threads(cfg.at("threads").get<int>());
    fs::path out = out_dir;
    if (out.empty()) out = command == "synth-data" ? fs::path(cfg.at("data").at("dir").get<std::string>()) : fs::path("runs") / command;
    write_manifest(out, command, r, overrides);
    if (command == "synth-data") return cmd_synth_data(r, out);
    if (command == "pretrain") return cmd_pretrain(r, out, resume, stop_after);
    if (command == "finetune") return cmd_finetune(r, out);
    if (command == "evaluate") return cmd_evaluate(r, out);
    if (command == "reconstruct") return cmd_reconstruct(r, out);
    return cmd_grad_check(r, out);
  } catch (const ckpt::CheckpointError& e) {
    spdlog::error("checkpoint: {}", e.what());
    return kCheckpointError;
  } catch (const data::DataError& e) {
    spdlog::error("data: {}", e.what());
    return kDataError;
  } catch (const fs::filesystem_error& e) {
    spdlog::error("data: {}", e.what());
    return kDataError;
  } catch (const train::NumericError& e) {
    spdlog::error("numeric: {}", e.what());
    return kNumericError;
  } catch (const std::invalid_argument& e) {
    spdlog::error("config: {}", e.what());
    return kConfigError;
  } catch (const json::exception& e) {
    spdlog::error("config: {}", e.what());
    return kConfigError;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kFailure;
  }
}

}  // namespace rsfm::cli
