#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "rsfm/checkpoint.hpp"
#include "rsfm/pretraining.hpp"
#include "test_support.hpp"

using namespace rsfm;
using namespace rsfm::train;
using model::ModelConfig;
using nlohmann::json;
using rsfm::testing::TempDir;

namespace {

std::vector<data::SceneSample> corpus(std::uint64_t seed, Index count, const ModelConfig& mc, const char* prefix) {
  data::GeneratorConfig g;
  g.height = mc.height;
  g.width = mc.width;
  g.frames = mc.frames;
  g.channels = mc.channels;
  return data::generate_corpus(seed, g, count, prefix);
}

std::vector<data::SceneSample> normalized(const std::vector<data::SceneSample>& raw) {
  const auto stats = data::compute_normalization_stats(raw);
  std::vector<data::SceneSample> out;
  for (const auto& s : raw) out.push_back(data::normalize(s, stats));
  return out;
}

TrainConfig tiny_train() {
  TrainConfig c;
  c.epochs = 3;
  c.batch_size = 4;
  c.base_lr = 0.064;
  c.warmup_steps = 2;
  c.mask_window = 4;
  c.seed = 11;
  return c;
}

std::vector<float> snapshot(const model::Model<float>& m) {
  std::vector<float> v;
  for (const auto& p : m.params().all()) v.insert(v.end(), p.var.value().data(), p.var.value().data() + p.var.size());
  return v;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::vector<json> records(const std::filesystem::path& p) {
  std::vector<json> out;
  std::ifstream is(p);
  for (std::string line; std::getline(is, line);) out.push_back(json::parse(line));
  return out;
}

}  // namespace

TEST_CASE("train config validation and JSON") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.peak_lr() == doctest::Approx(1.5e-4 * 8 / 256));
  CHECK(TrainConfig::desk().peak_lr() == doctest::Approx(2e-3));

  TrainConfig bad = c;
  bad.epochs = 0;
  CHECK_THROWS_AS(bad.validate(), TrainConfigError);
  bad = c;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), TrainConfigError);
  bad = c;
  bad.mask_ratio = 1.0;
  CHECK_THROWS_AS(bad.validate(), TrainConfigError);

  c.seed = 77;
  c.frequency.cutoff_fraction = 0.3;
  c.augmentation.rotate = false;
  const TrainConfig back = train_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));

  CHECK_THROWS_AS(train_config_from_json(json{{"epochz", 3}}), TrainConfigError);
  CHECK_THROWS_AS(train_config_from_json(json{{"adamw", {{"beta3", 0.5}}}}), TrainConfigError);
  CHECK_THROWS_AS(train_config_from_json(json{{"epochs", "many"}}), TrainConfigError);
}

TEST_CASE("warmup then cosine schedule") {
  const long total = 100, warm = 10;
  const double peak = 1e-3, floor = 1e-5;
  for (long s = 0; s < total; ++s) {
    double want;
    if (s < warm) {
      want = peak * static_cast<double>(s + 1) / warm;
    } else {
      const double prog = static_cast<double>(s - warm) / static_cast<double>(total - warm);
      want = floor + 0.5 * (peak - floor) * (1 + std::cos(M_PI * prog));
    }
    CHECK(optim::warmup_cosine_lr(s, total, warm, peak, floor) == doctest::Approx(want).epsilon(1e-12));
  }
  for (long s = warm + 1; s < total; ++s) {
    CHECK(optim::warmup_cosine_lr(s, total, warm, peak) <= optim::warmup_cosine_lr(s - 1, total, warm, peak));
  }
}

TEST_CASE("AdamW against a scalar reference") {
  model::ParamStore<float> store;
  Rng rng(3);
  Tensor<float> w({5}), b({5});
  for (Index i = 0; i < 5; ++i) {
    w[i] = static_cast<float>(rng.normal());
    b[i] = static_cast<float>(rng.normal());
  }
  store.add("w", w, true);
  store.add("b", b, false);
  optim::AdamWConfig cfg;
  optim::AdamW<float> opt(store.all(), cfg);

  std::vector<double> rw(w.storage().begin(), w.storage().end()), rb(b.storage().begin(), b.storage().end());
  std::vector<double> mw(5), vw(5), mb(5), vb(5);
  const double lr = 0.01;
  for (int step = 1; step <= 4; ++step) {
    std::vector<double> gw(5), gb(5);
    Var<float> pw = store.get("w"), pb = store.get("b");
    for (Index i = 0; i < 5; ++i) {
      gw[static_cast<std::size_t>(i)] = rng.normal();
      gb[static_cast<std::size_t>(i)] = rng.normal();
      pw.grad_mut()[i] = static_cast<float>(gw[static_cast<std::size_t>(i)]);
      pb.grad_mut()[i] = static_cast<float>(gb[static_cast<std::size_t>(i)]);
    }
    opt.step(lr);
    opt.zero_grad();
    auto ref = [&](std::vector<double>& p, std::vector<double>& m, std::vector<double>& v, const std::vector<double>& g,
                   bool decay) {
      for (std::size_t i = 0; i < 5; ++i) {
        m[i] = cfg.beta1 * m[i] + (1 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1 - cfg.beta2) * g[i] * g[i];
        const double mh = m[i] / (1 - std::pow(cfg.beta1, step)), vh = v[i] / (1 - std::pow(cfg.beta2, step));
        if (decay) p[i] -= lr * cfg.weight_decay * p[i];
        p[i] -= lr * mh / (std::sqrt(vh) + cfg.eps);
      }
    };
    ref(rw, mw, vw, gw, true);
    ref(rb, mb, vb, gb, false);
  }
  for (Index i = 0; i < 5; ++i) {
    CHECK(store.get("w").value()[i] == doctest::Approx(rw[static_cast<std::size_t>(i)]).epsilon(1e-5));
    CHECK(store.get("b").value()[i] == doctest::Approx(rb[static_cast<std::size_t>(i)]).epsilon(1e-5));
  }
  CHECK(opt.steps() == 4);
}

TEST_CASE("batches are seeded and keep the target clean") {
  const ModelConfig mc = ModelConfig::tiny();
  TrainConfig tc = tiny_train();
  const auto raw = corpus(5, 8, mc, "b");
  const auto stats = data::compute_normalization_stats(raw);
  const auto grid = grid_for(mc, tc);

  const PreparedBatch a = training_batch(raw, stats, grid, tc, 0, 1), b = training_batch(raw, stats, grid, tc, 0, 1);
  CHECK(a.ids == b.ids);
  CHECK(a.patches.storage() == b.patches.storage());
  CHECK(a.masked == b.masked);
  CHECK(a.size() == 4);
  const PreparedBatch other = training_batch(raw, stats, grid, tc, 1, 1);
  CHECK(other.masked != a.masked);

  // With augmentation off the target is exactly the normalized stored sample.
  tc.augment = false;
  const PreparedBatch c = training_batch(raw, stats, grid, tc, 0, 0);
  const auto order = epoch_order(SeedPlan(tc.seed), 0, 8);
  const Index px = numel(grid.pixel_shape());
  for (Index i = 0; i < c.size(); ++i) {
    const auto& src = raw[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
    CHECK(c.ids[static_cast<std::size_t>(i)] == src.sample_id);
    const auto n = data::normalize(src, stats);
    CHECK(std::equal(n.values.data(), n.values.data() + px, c.target.data() + i * px));
  }

  // Masked patches carry no content into the encoder.
  const Index P = grid.patch_dim(), per = grid.num_patches();
  for (Index i = 0; i < c.size() * per; ++i) {
    if (!c.masked[static_cast<std::size_t>(i)]) continue;
    for (Index k = 0; k < P; ++k) REQUIRE(c.patches[i * P + k] == 0.0f);
  }

  CHECK_THROWS_AS(training_batch(raw, stats, grid, tc, 0, 2), TrainConfigError);
}

TEST_CASE("validation masks do not depend on the epoch") {
  const ModelConfig mc = ModelConfig::tiny();
  const TrainConfig tc = tiny_train();
  const auto val = normalized(corpus(6, 6, mc, "v"));
  const auto grid = grid_for(mc, tc);
  const PreparedBatch a = validation_batch(val, 0, 6, grid, tc);
  const PreparedBatch b = validation_batch(val, 2, 4, grid, tc);
  for (Index i = 0; i < 4; ++i) {
    CHECK(a.plans[static_cast<std::size_t>(i + 2)].window_mask == b.plans[static_cast<std::size_t>(i)].window_mask);
    CHECK(a.plans[static_cast<std::size_t>(i + 2)].pimask_keep == b.plans[static_cast<std::size_t>(i)].pimask_keep);
  }
}

TEST_CASE("one step of training") {
  const ModelConfig mc = ModelConfig::tiny();
  const TrainConfig tc = tiny_train();
  const auto raw = corpus(7, 4, mc, "s");
  const auto stats = data::compute_normalization_stats(raw);
  const PreparedBatch batch = training_batch(raw, stats, grid_for(mc, tc), tc, 0, 0);

  SUBCASE("zero learning rate leaves parameters untouched") {
    model::Model<float> m(mc, 1);
    auto opt = make_optimizer(m, tc);
    const auto before = snapshot(m);
    const auto rep = pretrain_step(m, opt, batch, tc, 0.0);
    CHECK(std::isfinite(rep.total));
    CHECK(snapshot(m) == before);
  }

  SUBCASE("untrained loss is finite and of variance scale") {
    model::Model<float> m(mc, 1);
    auto opt = make_optimizer(m, tc);
    const auto rep = pretrain_step(m, opt, batch, tc, 1e-3);
    CHECK(std::isfinite(rep.total));
    CHECK(rep.spectral_term > 0.1);
    CHECK(rep.spectral_term < 10.0);
    CHECK(rep.m > 0);
    CHECK(snapshot(m) != snapshot(model::Model<float>(mc, 1)));
  }

  SUBCASE("non-finite loss names the samples") {
    model::Model<float> m(mc, 1);
    auto opt = make_optimizer(m, tc);
    Var<float> tok = m.params().get("mask_token");
    tok.value_mut()[0] = std::numeric_limits<float>::quiet_NaN();
    try {
      pretrain_step(m, opt, batch, tc, 1e-3);
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find(batch.ids[0]) != std::string::npos);
      CHECK(std::string(e.what()).find("spectral") != std::string::npos);
    }
  }

  SUBCASE("debug checks accept an untouched target") {
    TrainConfig dbg = tc;
    dbg.debug_checks = true;
    model::Model<float> m(mc, 1);
    auto opt = make_optimizer(m, dbg);
    CHECK_NOTHROW(pretrain_step(m, opt, batch, dbg, 1e-3));
  }
}

TEST_CASE("single-sample overfit") {
  const ModelConfig mc = ModelConfig::tiny();
  TrainConfig tc = tiny_train();
  tc.adamw.weight_decay = 0.0;
  const auto s = normalized(corpus(8, 1, mc, "o"));
  model::Model<float> m(mc, 2);
  const auto losses = overfit_sample(m, s[0], tc, 500, 2e-3);
  REQUIRE(losses.size() == 501);
  MESSAGE("overfit: " << losses.front() << " -> " << losses.back());
  CHECK(losses.back() < 0.05 * losses.front());
}

TEST_CASE("gradient checks") {
  const auto toy = linear_toy_gradient_check(1);
  CHECK(toy.checked == 18);
  CHECK(toy.max_rel_error < 1e-8);

  const auto rep = gradient_check(ModelConfig::tiny(), 3, 240);
  CHECK(rep.checked >= 200);
  if (!rep.worst.empty()) MESSAGE("worst " << rep.worst[0].name << " " << rep.max_rel_error);
  CHECK(rep.max_rel_error < 1e-4);
  CHECK(rep.to_json().at("worst").size() <= 10);

  CHECK(mask_token_gradient_norm(ModelConfig::tiny(), 4) > 0.0);
}

TEST_CASE("checkpoints") {
  TempDir tmp("ckpt");
  const ModelConfig mc = ModelConfig::tiny();
  const TrainConfig tc = tiny_train();
  model::Model<float> m(mc, 5);
  auto opt = make_optimizer(m, tc);
  const auto raw = corpus(9, 4, mc, "c");
  pretrain_step(m, opt, training_batch(raw, data::compute_normalization_stats(raw), grid_for(mc, tc), tc, 0, 0), tc,
                1e-3);
  const auto dir = tmp.path / "a";
  ckpt::save_model(dir, m, {{"note", "x"}}, &opt);
  CHECK(std::filesystem::exists(dir / "manifest.json"));
  CHECK(!std::filesystem::exists(tmp.path / "a.tmp"));

  SUBCASE("round trip") {
    model::Model<float> back(mc, 99);
    auto opt2 = make_optimizer(back, tc);
    ckpt::load_model(dir, back);
    ckpt::load_optimizer(dir, opt2);
    CHECK(ckpt::params_hash(back.params().all()) == ckpt::params_hash(m.params().all()));
    CHECK(opt2.steps() == opt.steps());
    for (std::size_t k = 0; k < opt.first_moments().size(); ++k) {
      REQUIRE(opt2.first_moments()[k].storage() == opt.first_moments()[k].storage());
      REQUIRE(opt2.second_moments()[k].storage() == opt.second_moments()[k].storage());
    }
    CHECK(ckpt::read_manifest(dir).at("meta").at("note") == "x");
    CHECK(ckpt::read_model_config(dir) == mc);

    ckpt::save_model(dir, back);  // overwrite in place
    CHECK(ckpt::params_hash(back.params().all()) == ckpt::params_hash(m.params().all()));
  }

  SUBCASE("incompatible config gives a field-level diff") {
    ModelConfig other = mc;
    other.embed_dim = 16;
    model::Model<float> wrong(other, 1);
    try {
      ckpt::load_model(dir, wrong);
      FAIL("expected CheckpointError");
    } catch (const ckpt::CheckpointError& e) {
      CHECK(e.kind() == ckpt::CheckpointErrorKind::incompatible);
      CHECK(std::string(e.what()).find("embed_dim: checkpoint 8, requested 16") != std::string::npos);
    }
  }

  SUBCASE("unknown version and damaged payload") {
    json man = json::parse(slurp(dir / "manifest.json"));
    man["version"] = 99;
    std::ofstream(dir / "manifest.json") << man.dump();
    try {
      ckpt::read_manifest(dir);
      FAIL("expected CheckpointError");
    } catch (const ckpt::CheckpointError& e) {
      CHECK(e.kind() == ckpt::CheckpointErrorKind::unknown_version);
    }
    ckpt::save_model(dir, m);
    std::filesystem::resize_file(dir / "params.f32", 64);
    model::Model<float> back(mc, 1);
    try {
      ckpt::load_model(dir, back);
      FAIL("expected CheckpointError");
    } catch (const ckpt::CheckpointError& e) {
      CHECK(e.kind() == ckpt::CheckpointErrorKind::format);
    }
    CHECK_THROWS_AS(ckpt::read_manifest(tmp.path / "missing"), ckpt::CheckpointError);
  }
}

TEST_CASE("pretraining runs are reproducible and resumable") {
  TempDir tmp("run");
  const ModelConfig mc = ModelConfig::tiny();
  const TrainConfig tc = tiny_train();
  const auto train = corpus(20, 8, mc, "t"), val = corpus(21, 4, mc, "v");
  RunOptions quiet;
  quiet.quiet = true;

  const auto full = run_pretraining(mc, tc, train, val, tmp.path / "full", quiet);
  CHECK(full.epochs_completed == 3);
  CHECK(full.steps == 6);
  CHECK(full.train_losses.size() == 6);
  CHECK(full.val_losses.size() == 3);
  CHECK(std::filesystem::exists(tmp.path / "full" / "checkpoints" / "best" / "manifest.json"));
  CHECK(std::filesystem::exists(tmp.path / "full" / "run_manifest.json"));

  SUBCASE("log format and fixed validation masks") {
    const auto recs = records(tmp.path / "full" / "metrics.jsonl");
    REQUIRE(recs.size() == 9);
    std::vector<std::uint64_t> hashes;
    for (const auto& r : recs) {
      for (const char* k : {"step", "epoch", "split", "total", "spectral", "spatial", "lr", "m"}) CHECK(r.contains(k));
      if (r.at("split") == "val") hashes.push_back(r.at("mask_hash").get<std::uint64_t>());
    }
    REQUIRE(hashes.size() == 3);
    CHECK(hashes[0] == hashes[1]);
    CHECK(hashes[1] == hashes[2]);
    const json man = json::parse(slurp(tmp.path / "full" / "run_manifest.json"));
    CHECK(man.at("train_config") == to_json(tc));
    CHECK(man.at("seeds") == SeedPlan(tc.seed).to_json());
  }

  SUBCASE("identical seeds give identical logs") {
    run_pretraining(mc, tc, train, val, tmp.path / "again", quiet);
    CHECK(slurp(tmp.path / "full" / "metrics.jsonl") == slurp(tmp.path / "again" / "metrics.jsonl"));
  }

  SUBCASE("resume matches the uninterrupted run") {
    RunOptions part = quiet;
    part.stop_after_epochs = 2;
    const auto first = run_pretraining(mc, tc, train, val, tmp.path / "resumed", part);
    CHECK(first.epochs_completed == 2);
    RunOptions rest = quiet;
    rest.resume = true;
    const auto second = run_pretraining(mc, tc, train, val, tmp.path / "resumed", rest);
    CHECK(second.epochs_completed == 3);
    REQUIRE(second.train_losses.size() == full.train_losses.size());
    double worst = 0;
    for (std::size_t i = 0; i < full.train_losses.size(); ++i) {
      worst = std::max(worst, std::abs(second.train_losses[i] - full.train_losses[i]));
    }
    CHECK(worst <= 1e-6);
    CHECK(slurp(tmp.path / "full" / "metrics.jsonl") == slurp(tmp.path / "resumed" / "metrics.jsonl"));
  }

  SUBCASE("resume refuses a changed run") {
    TrainConfig changed = tc;
    changed.mask_ratio = 0.6;
    RunOptions rest = quiet;
    rest.resume = true;
    try {
      run_pretraining(mc, changed, train, val, tmp.path / "full", rest);
      FAIL("expected CheckpointError");
    } catch (const ckpt::CheckpointError& e) {
      CHECK(e.kind() == ckpt::CheckpointErrorKind::incompatible);
      CHECK(std::string(e.what()).find("mask_ratio") != std::string::npos);
    }
  }
}

TEST_CASE("plateaued validation stops early") {
  TempDir tmp("early");
  const ModelConfig mc = ModelConfig::tiny();
  TrainConfig tc = tiny_train();
  tc.epochs = 6;
  tc.base_lr = 0.0;
  tc.early_stop_patience = 2;
  const auto train = corpus(30, 4, mc, "t"), val = corpus(31, 2, mc, "v");
  RunOptions quiet;
  quiet.quiet = true;
  const auto r = run_pretraining(mc, tc, train, val, tmp.path, quiet);
  CHECK(r.stopped_early);
  CHECK(r.epochs_completed == 3);
  CHECK(r.best_epoch == 0);
}

TEST_CASE("run input errors") {
  TempDir tmp("errors");
  const ModelConfig mc = ModelConfig::tiny();
  TrainConfig tc = tiny_train();
  const auto train = corpus(40, 4, mc, "t");
  RunOptions quiet;
  quiet.quiet = true;
  CHECK_THROWS_AS(run_pretraining(mc, tc, train, {}, tmp.path, quiet), data::DataError);
  tc.warmup_steps = 100;
  CHECK_THROWS_AS(run_pretraining(mc, tc, train, train, tmp.path, quiet), TrainConfigError);
  ModelConfig big = mc;
  big.height = big.width = 64;
  CHECK_THROWS_AS(run_pretraining(big, tiny_train(), train, train, tmp.path, quiet), data::DataError);
}
