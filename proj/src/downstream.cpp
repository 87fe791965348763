#include "rsfm/downstream.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "rsfm/checkpoint.hpp"
#include "rsfm/masking.hpp"
#include "rsfm/pretraining.hpp"

namespace rsfm::downstream {

using nlohmann::json;

const char* task_name(Task t) {
  switch (t) {
    case Task::segmentation: return "segmentation";
    case Task::classification: return "classification";
    case Task::change: return "change";
  }
  return "?";
}

Task task_from_name(const std::string& s) {
  for (Task t : {Task::segmentation, Task::classification, Task::change}) {
    if (s == task_name(t)) return t;
  }
  throw DownstreamError("unknown task '" + s + "' (segmentation, classification, change)");
}

void HeadConfig::validate() const {
  if (num_classes < 2) throw DownstreamError("num_classes must be at least 2");
  if (hidden <= 0) throw DownstreamError("hidden width must be positive");
  if (task == Task::change && num_classes != 2) throw DownstreamError("change detection is binary: num_classes must be 2");
}

json to_json(const HeadConfig& c) {
  return {{"task", task_name(c.task)},
          {"num_classes", c.num_classes},
          {"hidden", c.hidden},
          {"encoder_frozen", c.encoder_frozen},
          {"temporal_reduce", c.temporal_reduce == TemporalReduce::mean ? "mean" : "last"},
          {"class_weighting", c.class_weighting}};
}

namespace {

void reject_unknown(const json& j, const json& known, const char* what) {
  if (!j.is_object()) throw DownstreamError(std::string(what) + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.contains(it.key())) throw DownstreamError(std::string("unknown ") + what + " key '" + it.key() + "'");
  }
}

template <typename V>
void read(const json& j, const char* key, V& dst) {
  if (j.contains(key)) dst = j.at(key).get<V>();
}

}  // namespace

HeadConfig head_config_from_json(const json& j) {
  HeadConfig c;
  reject_unknown(j, to_json(c), "head config");
  try {
    if (j.contains("task")) c.task = task_from_name(j.at("task").get<std::string>());
    read(j, "num_classes", c.num_classes);
    read(j, "hidden", c.hidden);
    read(j, "encoder_frozen", c.encoder_frozen);
    if (j.contains("temporal_reduce")) {
      const auto r = j.at("temporal_reduce").get<std::string>();
      if (r != "mean" && r != "last") throw DownstreamError("temporal_reduce must be 'mean' or 'last'");
      c.temporal_reduce = r == "mean" ? TemporalReduce::mean : TemporalReduce::last;
    }
    read(j, "class_weighting", c.class_weighting);
  } catch (const json::exception& e) {
    throw DownstreamError(std::string("bad head config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Heads

template <typename T>
Var<T> reduce_stage(const Var<T>& x, TemporalReduce reduce) {
  if (x.shape().size() != 6) throw DownstreamError("stage tokens must be [B, T, G, h, w, D], got " + shape_str(x.shape()));
  const Index B = x.dim(0), F = x.dim(1), G = x.dim(2), h = x.dim(3), w = x.dim(4), D = x.dim(5);
  Var<T> src = x;
  Index frames = F, frame = 0;
  if (reduce == TemporalReduce::mean && F > 1) {
    src = ag::mean_middle(x, B, F, G * h * w * D, Shape{B, 1, G, h, w, D});
    frames = 1;
  } else if (reduce == TemporalReduce::last) {
    frame = F - 1;
  }
  auto idx = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(B * h * w * G * D));
  std::size_t k = 0;
  for (Index b = 0; b < B; ++b)
    for (Index y = 0; y < h; ++y)
      for (Index q = 0; q < w; ++q)
        for (Index g = 0; g < G; ++g)
          for (Index d = 0; d < D; ++d) (*idx)[k++] = ((((b * frames + frame) * G + g) * h + y) * w + q) * D + d;
  return ag::gather(src, std::shared_ptr<const std::vector<std::int64_t>>(idx), Shape{B, h, w, G * D});
}

namespace {

template <typename T>
Tensor<T> init_weight(Index out, Index in, Rng& rng) {
  Tensor<T> t(Shape{out, in});
  const double sd = 1.0 / std::sqrt(static_cast<double>(in));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.truncated_normal(sd));
  return t;
}

// [B, h, w, K] -> [B, K, h, w]
template <typename T>
Var<T> channels_first(const Var<T>& x) {
  const Index B = x.dim(0), h = x.dim(1), w = x.dim(2), K = x.dim(3);
  auto idx = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(x.size()));
  std::size_t n = 0;
  for (Index b = 0; b < B; ++b)
    for (Index k = 0; k < K; ++k)
      for (Index i = 0; i < h * w; ++i) (*idx)[n++] = (b * h * w + i) * K + k;
  return ag::gather(x, std::shared_ptr<const std::vector<std::int64_t>>(idx), Shape{B, K, h, w});
}

std::string proj_name(int s) { return "head.proj" + std::to_string(s); }

}  // namespace

template <typename T>
Head<T>::Head(const HeadConfig& cfg, const model::ModelConfig& encoder, std::uint64_t seed) : cfg_(cfg), enc_(encoder) {
  cfg_.validate();
  enc_.validate();
  Rng rng(derive_seed(seed, "head-init"));
  auto linear = [&](const std::string& name, Index out, Index in, bool zero) {
    params_.add(name + ".weight", zero ? Tensor<T>(Shape{out, in}) : init_weight<T>(out, in, rng), true);
    params_.add(name + ".bias", Tensor<T>(Shape{out}), false);
  };
  const Index K = cfg_.num_classes, Hd = cfg_.hidden;
  auto width = [&](int s) { return enc_.groups() * enc_.stage_dim(s); };
  if (cfg_.task == Task::classification) {
    linear("head.cls", K, width(model::kStages - 1), true);
    return;
  }
  const Index mult = cfg_.task == Task::change ? 2 : 1;
  for (int s = 0; s < model::kStages; ++s) linear(proj_name(s), Hd, mult * width(s), false);
  linear("head.fuse", Hd, model::kStages * Hd, false);
  linear("head.cls", K, Hd, true);
}

template <typename T>
std::vector<std::string> Head<T>::linear_layers() const {
  std::vector<std::string> out;
  for (const auto& prm : params_.all()) {
    if (prm.var.shape().size() != 2) continue;
    std::string n = prm.name.substr(0, prm.name.rfind('.'));
    while (!n.empty() && std::isdigit(static_cast<unsigned char>(n.back()))) n.pop_back();
    if (std::find(out.begin(), out.end(), n) == out.end()) out.push_back(n);
  }
  return out;
}

template <typename T>
Var<T> Head<T>::dense_head(const std::vector<Var<T>>& projected) const {
  const Index h0 = projected[0].dim(1), w0 = projected[0].dim(2);
  std::vector<Var<T>> up;
  for (std::size_t s = 0; s < projected.size(); ++s) {
    up.push_back(s == 0 ? projected[0] : ag::resize_bilinear(projected[s], h0, w0));
  }
  Var<T> f = ag::gelu(ag::linear(ag::concat_last(up), p("head.fuse.weight"), p("head.fuse.bias")));
  Var<T> logits = ag::linear(f, p("head.cls.weight"), p("head.cls.bias"));
  return channels_first(ag::resize_bilinear(logits, enc_.height, enc_.width));
}

template <typename T>
Var<T> Head<T>::forward_reduced(const std::vector<Var<T>>& stages) const {
  if (static_cast<int>(stages.size()) != model::kStages) {
    throw DownstreamError("head expects " + std::to_string(model::kStages) + " stages, got " +
                          std::to_string(stages.size()));
  }
  const Index mult = cfg_.task == Task::change ? 2 : 1;
  for (int s = 0; s < model::kStages; ++s) {
    const Shape& sh = stages[static_cast<std::size_t>(s)].shape();
    if (sh.size() != 4 || sh[1] != enc_.stage_h(s) || sh[2] != enc_.stage_w(s) ||
        sh[3] != mult * enc_.groups() * enc_.stage_dim(s)) {
      throw DownstreamError("stage " + std::to_string(s + 1) + " features have shape " + shape_str(sh) +
                            ", head expects [B, " + std::to_string(enc_.stage_h(s)) + ", " +
                            std::to_string(enc_.stage_w(s)) + ", " +
                            std::to_string(mult * enc_.groups() * enc_.stage_dim(s)) + "]");
    }
  }
  const Index B = stages[0].dim(0);
  if (cfg_.task == Task::classification) {
    const Var<T>& top = stages.back();
    const Index hw = top.dim(1) * top.dim(2), C = top.dim(3);
    Var<T> pooled = ag::mean_middle(top, B, hw, C, Shape{B, C});
    return ag::linear(pooled, p("head.cls.weight"), p("head.cls.bias"));
  }
  std::vector<Var<T>> projected;
  for (int s = 0; s < model::kStages; ++s) {
    projected.push_back(ag::linear(stages[static_cast<std::size_t>(s)], p(proj_name(s) + ".weight"),
                                   p(proj_name(s) + ".bias")));
  }
  return dense_head(projected);
}

template <typename T>
Var<T> Head<T>::forward(const model::StageFeatures<T>& f) const {
  if (cfg_.task == Task::change) throw DownstreamError("change head needs two feature sets");
  std::vector<Var<T>> r;
  for (const auto& s : f.stages) r.push_back(reduce_stage(s, cfg_.temporal_reduce));
  return forward_reduced(r);
}

template <typename T>
Var<T> Head<T>::forward(const model::StageFeatures<T>& a, const model::StageFeatures<T>& b) const {
  if (cfg_.task != Task::change) throw DownstreamError(std::string(task_name(cfg_.task)) + " head takes one feature set");
  std::vector<Var<T>> agg;
  for (int s = 0; s < model::kStages; ++s) {
    const auto& fa = a.stages[static_cast<std::size_t>(s)];
    const auto& fb = b.stages[static_cast<std::size_t>(s)];
    if (fa.shape() != fb.shape()) {
      throw DownstreamError("stage " + std::to_string(s + 1) + " shapes differ: " + shape_str(fa.shape()) + " vs " +
                            shape_str(fb.shape()));
    }
    const Var<T> ra = reduce_stage(fa, cfg_.temporal_reduce), rb = reduce_stage(fb, cfg_.temporal_reduce);
    agg.push_back(ag::concat_last(std::vector<Var<T>>{ag::abs_diff(ra, rb), ag::mul(ra, rb)}));
  }
  return forward_reduced(agg);
}

template class Head<float>;
template class Head<double>;
template Var<float> reduce_stage(const Var<float>&, TemporalReduce);
template Var<double> reduce_stage(const Var<double>&, TemporalReduce);

// ---------------------------------------------------------------------------
// Metrics

double f1_score(double precision, double recall) {
  return precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
}

double average_precision(const std::vector<float>& scores, const std::vector<std::uint8_t>& positive) {
  if (scores.size() != positive.size()) throw DownstreamError("average_precision: size mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double hits = 0, sum = 0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (!positive[order[r]]) continue;
    hits += 1;
    sum += hits / static_cast<double>(r + 1);
  }
  return hits > 0 ? sum / hits : 0.0;
}

MetricReport compute_metrics(const std::vector<std::int32_t>& pred, const std::vector<std::int32_t>& labels,
                             Index K, const std::vector<float>& scores, const std::vector<std::string>& names,
                             Task task) {
  if (pred.size() != labels.size()) {
    throw DownstreamError("compute_metrics: " + std::to_string(pred.size()) + " predictions for " +
                          std::to_string(labels.size()) + " labels");
  }
  if (K < 2) throw DownstreamError("compute_metrics: need at least 2 classes");
  if (!scores.empty() && scores.size() != pred.size() * static_cast<std::size_t>(K)) {
    throw DownstreamError("compute_metrics: scores must hold num_classes values per item");
  }
  MetricReport r;
  r.task = task;
  r.confusion.assign(static_cast<std::size_t>(K), std::vector<Index>(static_cast<std::size_t>(K), 0));
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (labels[i] < 0) continue;
    if (labels[i] >= K || pred[i] < 0 || pred[i] >= K) throw DownstreamError("compute_metrics: class id out of range");
    ++r.confusion[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(pred[i])];
    ++r.count;
  }
  if (r.count == 0) throw DownstreamError("compute_metrics: no labelled items");

  Index correct = 0, present = 0, ap_classes = 0;
  double iou_sum = 0, f1_sum = 0, ap_sum = 0;
  for (Index k = 0; k < K; ++k) {
    const auto ku = static_cast<std::size_t>(k);
    ClassMetrics c;
    c.name = ku < names.size() ? names[ku] : "class_" + std::to_string(k);
    const Index tp = r.confusion[ku][ku];
    for (Index j = 0; j < K; ++j) {
      c.support += r.confusion[ku][static_cast<std::size_t>(j)];
      c.predicted += r.confusion[static_cast<std::size_t>(j)][ku];
    }
    correct += tp;
    c.precision = c.predicted > 0 ? 100.0 * static_cast<double>(tp) / static_cast<double>(c.predicted) : 0.0;
    c.recall = c.support > 0 ? 100.0 * static_cast<double>(tp) / static_cast<double>(c.support) : 0.0;
    c.f1 = f1_score(c.precision, c.recall);
    const Index uni = c.support + c.predicted - tp;
    c.iou = uni > 0 ? 100.0 * static_cast<double>(tp) / static_cast<double>(uni) : 0.0;
    if (uni > 0) {
      ++present;
      iou_sum += c.iou;
      f1_sum += c.f1;
    }
    if (!scores.empty() && c.support > 0) {
      std::vector<float> s;
      std::vector<std::uint8_t> pos;
      for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0) continue;
        s.push_back(scores[i * static_cast<std::size_t>(K) + ku]);
        pos.push_back(labels[i] == k);
      }
      c.ap = 100.0 * average_precision(s, pos);
      ap_sum += *c.ap;
      ++ap_classes;
    }
    r.classes.push_back(c);
  }
  r.top1 = 100.0 * static_cast<double>(correct) / static_cast<double>(r.count);
  r.miou = iou_sum / static_cast<double>(present);
  r.macro_f1 = f1_sum / static_cast<double>(present);
  if (ap_classes > 0) r.map = ap_sum / static_cast<double>(ap_classes);
  return r;
}

json MetricReport::to_json() const {
  json cls = json::array();
  for (const auto& c : classes) {
    json e = {{"name", c.name},  {"support", c.support}, {"predicted", c.predicted}, {"precision", c.precision},
              {"recall", c.recall}, {"f1", c.f1},       {"iou", c.iou}};
    e["ap"] = c.ap ? json(*c.ap) : json(nullptr);
    cls.push_back(e);
  }
  json j = {{"task", task_name(task)}, {"count", count},       {"top1", top1},         {"miou", miou},
            {"macro_f1", macro_f1},    {"classes", cls},       {"confusion", confusion}};
  j["map"] = map ? json(*map) : json(nullptr);
  return j;
}

std::string MetricReport::table() const {
  std::size_t wname = 5;
  for (const auto& c : classes) wname = std::max(wname, c.name.size());
  std::ostringstream os;
  char buf[256];
  auto row = [&](const std::string& name, const std::string& rest) {
    os << name << std::string(wname + 2 - name.size(), ' ') << rest << '\n';
  };
  std::snprintf(buf, sizeof buf, "%8s %8s %8s %8s %8s %10s", "P", "R", "F1", "IoU", "AP", "support");
  row("class", buf);
  for (const auto& c : classes) {
    char ap[16];
    if (c.ap) std::snprintf(ap, sizeof ap, "%8.1f", *c.ap);
    else std::snprintf(ap, sizeof ap, "%8s", "-");
    std::snprintf(buf, sizeof buf, "%8.1f %8.1f %8.1f %8.1f %s %10lld", c.precision, c.recall, c.f1, c.iou, ap,
                  static_cast<long long>(c.support));
    row(c.name, buf);
  }
  std::snprintf(buf, sizeof buf, "top-1 %.1f  mIoU %.1f  macro-F1 %.1f", top1, miou, macro_f1);
  os << buf;
  if (map) {
    std::snprintf(buf, sizeof buf, "  mAP %.1f", *map);
    os << buf;
  }
  os << "  (n=" << count << ")\n";
  return os.str();
}

std::vector<std::string> class_names(Task task, Index K) {
  std::vector<std::string> out;
  if (task == Task::change) return {"no-change", "change"};
  for (Index k = 0; k < K; ++k) {
    out.push_back(K <= data::kNumLandClasses ? data::land_class_name(static_cast<int>(k)) : "class_" + std::to_string(k));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic tasks

data::SceneSample repeat_frames(const data::SceneSample& s, Index frames) {
  if (s.frames() != 1) throw DownstreamError("repeat_frames expects a single-frame sample, got " + std::to_string(s.frames()));
  if (frames <= 0) throw DownstreamError("repeat_frames: frames must be positive");
  data::SceneSample out = s;
  const Index n = s.values.size();
  out.values = Tensor<float>(Shape{frames, s.channels(), s.height(), s.width()});
  for (Index t = 0; t < frames; ++t) std::copy(s.values.data(), s.values.data() + n, out.values.data() + t * n);
  out.timestamps.clear();
  for (Index t = 0; t < frames; ++t) out.timestamps.push_back(s.timestamps.at(0) + static_cast<std::int32_t>(t));
  return out;
}

namespace {

std::string numbered(const char* prefix, Index i) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%05lld", prefix, static_cast<long long>(i));
  return buf;
}

}  // namespace

std::vector<TaskSample> synthetic_segmentation(std::uint64_t seed, const data::GeneratorConfig& cfg, Index count) {
  std::vector<TaskSample> out(static_cast<std::size_t>(count));
#pragma omp parallel for schedule(dynamic)
  for (Index i = 0; i < count; ++i) {
    auto& t = out[static_cast<std::size_t>(i)];
    t.image = data::generate_synthetic_scene(derive_seed(seed, "seg", i), cfg, numbered("seg", i));
    t.mask = *t.image.label_mask;
  }
  return out;
}

std::vector<TaskSample> synthetic_classification(std::uint64_t seed, const data::GeneratorConfig& cfg, Index count,
                                                 Index K) {
  if (K < 2 || K > data::kNumLandClasses) throw DownstreamError("classification task supports 2..6 classes");
  std::vector<TaskSample> out(static_cast<std::size_t>(count));
#pragma omp parallel for schedule(dynamic)
  for (Index i = 0; i < count; ++i) {
    data::GeneratorConfig g = cfg;
    const Index favoured = i % K;
    for (Index k = 0; k < data::kNumLandClasses; ++k) {
      g.class_proportions[static_cast<std::size_t>(k)] = k >= K ? 0.0 : (k == favoured ? 3.0 : 0.3);
    }
    auto& t = out[static_cast<std::size_t>(i)];
    t.image = data::generate_synthetic_scene(derive_seed(seed, "cls", i), g, numbered("cls", i));
    std::vector<Index> counts(static_cast<std::size_t>(K), 0);
    for (Index p = 0; p < t.image.label_mask->size(); ++p) ++counts[static_cast<std::size_t>((*t.image.label_mask)[p])];
    t.label = static_cast<std::int32_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
  }
  return out;
}

std::vector<TaskSample> synthetic_change(std::uint64_t seed, const data::GeneratorConfig& cfg, Index count) {
  std::vector<TaskSample> out(static_cast<std::size_t>(count));
#pragma omp parallel for schedule(dynamic)
  for (Index i = 0; i < count; ++i) {
    auto& t = out[static_cast<std::size_t>(i)];
    t.image = data::generate_synthetic_scene(derive_seed(seed, "change", i), cfg, numbered("change", i));
    data::SceneSample after = t.image;
    after.sample_id += "_after";
    const Index T = after.frames(), C = after.channels(), H = after.height(), W = after.width();
    Tensor<std::int32_t> labels = *t.image.label_mask;
    t.mask = Tensor<std::int32_t>(Shape{H, W});
    Rng rng(derive_seed(seed, "change-edit", i));
    const Index rects = rng.randint(1, 3);
    for (Index r = 0; r < rects; ++r) {
      const Index rh = rng.randint(std::max<Index>(2, H / 6), std::max<Index>(2, H / 3));
      const Index rw = rng.randint(std::max<Index>(2, W / 6), std::max<Index>(2, W / 3));
      const Index y0 = rng.randint(0, H - rh), x0 = rng.randint(0, W - rw);
      const int old = labels.at(y0 + rh / 2, x0 + rw / 2);
      const int cls = static_cast<int>((old + rng.randint(1, data::kNumLandClasses - 1)) % data::kNumLandClasses);
      for (Index y = y0; y < y0 + rh; ++y)
        for (Index x = x0; x < x0 + rw; ++x) labels.at(y, x) = cls;
    }
    for (Index k = 0; k < H * W; ++k) t.mask[k] = labels[k] != (*t.image.label_mask)[k];
    for (Index tt = 0; tt < T; ++tt) {
      const double doy = after.timestamps[static_cast<std::size_t>(tt)];
      for (Index c = 0; c < C; ++c) {
        const int band = data::band_of_channel(C, c);
        for (Index y = 0; y < H; ++y)
          for (Index x = 0; x < W; ++x) {
            if (!t.mask.at(y, x)) continue;
            const double v = data::class_reflectance(cfg, labels.at(y, x), band, doy) + rng.normal(0.0, cfg.noise_sigma);
            after.values.at(tt, c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
          }
      }
    }
    after.label_mask = labels;
    t.after = std::move(after);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fine-tuning

void FinetuneConfig::validate() const {
  head.validate();
  if (steps <= 0) throw DownstreamError("steps must be positive");
  if (batch_size <= 0) throw DownstreamError("batch_size must be positive");
  if (lr < 0 || encoder_lr_scale < 0) throw DownstreamError("learning rates must be non-negative");
  if (warmup_steps < 0 || warmup_steps > steps) throw DownstreamError("warmup_steps must lie in [0, steps]");
  if (!(train_fraction > 0 && train_fraction <= 1)) throw DownstreamError("train_fraction must lie in (0, 1]");
}

FinetuneConfig FinetuneConfig::for_task(Task task, Index num_classes) {
  FinetuneConfig c;
  c.head.task = task;
  c.head.num_classes = task == Task::change ? 2 : num_classes;
  switch (task) {
    case Task::segmentation:
      c.steps = 300;
      c.lr = 1e-3;
      break;
    case Task::classification:
      c.steps = 200;
      c.lr = 3e-2;
      c.encoder_lr_scale = 0.01;
      break;
    case Task::change:
      c.steps = 500;
      c.lr = 1e-3;
      break;
  }
  return c;
}

json to_json(const FinetuneConfig& c) {
  return {{"head", to_json(c.head)},
          {"steps", c.steps},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"encoder_lr_scale", c.encoder_lr_scale},
          {"warmup_steps", c.warmup_steps},
          {"adamw", {{"beta1", c.adamw.beta1}, {"beta2", c.adamw.beta2}, {"eps", c.adamw.eps}, {"weight_decay", c.adamw.weight_decay}}},
          {"train_fraction", c.train_fraction},
          {"seed", c.seed}};
}

FinetuneConfig finetune_config_from_json(const json& j) {
  FinetuneConfig c;
  reject_unknown(j, to_json(c), "finetune config");
  try {
    if (j.contains("head")) c.head = head_config_from_json(j.at("head"));
    read(j, "steps", c.steps);
    read(j, "batch_size", c.batch_size);
    read(j, "lr", c.lr);
    read(j, "encoder_lr_scale", c.encoder_lr_scale);
    read(j, "warmup_steps", c.warmup_steps);
    if (j.contains("adamw")) {
      const auto& a = j.at("adamw");
      reject_unknown(a, to_json(c).at("adamw"), "adamw");
      read(a, "beta1", c.adamw.beta1);
      read(a, "beta2", c.adamw.beta2);
      read(a, "eps", c.adamw.eps);
      read(a, "weight_decay", c.adamw.weight_decay);
    }
    read(j, "train_fraction", c.train_fraction);
    read(j, "seed", c.seed);
  } catch (const json::exception& e) {
    throw DownstreamError(std::string("bad finetune config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<Index> fraction_subset(Index count, double fraction, std::uint64_t seed) {
  if (!(fraction > 0 && fraction <= 1)) throw DownstreamError("fraction must lie in (0, 1]");
  std::vector<Index> order(static_cast<std::size_t>(count));
  std::iota(order.begin(), order.end(), Index{0});
  Rng rng(derive_seed(seed, "fraction"));
  rng.shuffle(order.begin(), order.end());
  const auto keep = static_cast<std::size_t>(
      std::clamp<Index>(static_cast<Index>(std::llround(fraction * static_cast<double>(count))), std::min<Index>(1, count), count));
  order.resize(keep);
  return order;
}

namespace {

void check_sample(const TaskSample& s, const model::ModelConfig& mc, Task task) {
  const Shape want{mc.frames, mc.channels, mc.height, mc.width};
  auto check = [&](const data::SceneSample& im) {
    if (im.values.shape() != want) {
      throw data::DataError(data::DataErrorKind::shape_mismatch, "sample " + im.sample_id + " has shape " +
                                                                     shape_str(im.values.shape()) + ", encoder expects " +
                                                                     shape_str(want));
    }
  };
  check(s.image);
  if (task == Task::change) {
    if (!s.after) throw data::DataError(data::DataErrorKind::invalid_argument, "sample " + s.image.sample_id + " has no after image");
    check(*s.after);
  }
  if (task == Task::classification) {
    if (s.label < 0) throw data::DataError(data::DataErrorKind::invalid_argument, "sample " + s.image.sample_id + " has no label");
  } else if (s.mask.shape() != Shape{mc.height, mc.width}) {
    throw data::DataError(data::DataErrorKind::shape_mismatch, "sample " + s.image.sample_id + " label mask has shape " +
                                                                   shape_str(s.mask.shape()));
  }
}

// Normalized, patchified encoder input for a list of images.
Var<float> encoder_input(const std::vector<const data::SceneSample*>& images, const model::ModelConfig& mc,
                         const data::NormalizationStats& stats) {
  const auto grid = masking::build_patch_grid({mc.frames, mc.channels, mc.height, mc.width}, mc.patch_size,
                                              mc.spectral_group, {mc.frames, 1, 1});
  const Shape ps = grid.patch_shape();
  const Index n = numel(ps), B = static_cast<Index>(images.size());
  Tensor<float> out(Shape{B, ps[0], ps[1], ps[2], ps[3], ps[4]});
#pragma omp parallel for schedule(static)
  for (Index b = 0; b < B; ++b) {
    const auto norm = data::normalize(*images[static_cast<std::size_t>(b)], stats);
    const Tensor<float> p = masking::patchify(norm.values, grid);
    std::copy(p.data(), p.data() + n, out.data() + b * n);
  }
  return Var<float>(std::move(out));
}

// Reduced (and, for change, aggregated) stage features of a batch.
std::vector<Var<float>> head_inputs(const model::Model<float>& enc, const HeadConfig& hc,
                                    const std::vector<const TaskSample*>& batch, const data::NormalizationStats& stats) {
  std::vector<const data::SceneSample*> a, b;
  for (const auto* s : batch) {
    a.push_back(&s->image);
    if (hc.task == Task::change) b.push_back(&*s->after);
  }
  const auto fa = enc.encode(encoder_input(a, enc.config(), stats), {});
  std::vector<Var<float>> out;
  if (hc.task != Task::change) {
    for (const auto& s : fa.stages) out.push_back(reduce_stage(s, hc.temporal_reduce));
    return out;
  }
  const auto fb = enc.encode(encoder_input(b, enc.config(), stats), {});
  for (int s = 0; s < model::kStages; ++s) {
    const auto ra = reduce_stage(fa.stages[static_cast<std::size_t>(s)], hc.temporal_reduce);
    const auto rb = reduce_stage(fb.stages[static_cast<std::size_t>(s)], hc.temporal_reduce);
    out.push_back(ag::concat_last(std::vector<Var<float>>{ag::abs_diff(ra, rb), ag::mul(ra, rb)}));
  }
  return out;
}

std::vector<std::int32_t> batch_labels(const std::vector<const TaskSample*>& batch, Task task) {
  std::vector<std::int32_t> y;
  for (const auto* s : batch) {
    if (task == Task::classification) {
      y.push_back(s->label);
    } else {
      y.insert(y.end(), s->mask.data(), s->mask.data() + s->mask.size());
    }
  }
  return y;
}

// logits [B, K, ...] -> [B, K, S]
Var<float> flat_logits(const Var<float>& logits) {
  const Index B = logits.dim(0), K = logits.dim(1);
  return ag::reshape(logits, Shape{B, K, logits.size() / (B * K)});
}

// Per-sample rows of cached reduced features.
struct FeatureCache {
  std::vector<std::vector<Tensor<float>>> rows;  // [sample][stage] -> [h, w, C]

  void append(const std::vector<Var<float>>& stages) {
    const Index B = stages[0].dim(0);
    for (Index b = 0; b < B; ++b) {
      std::vector<Tensor<float>> r;
      for (const auto& s : stages) {
        const Index n = s.size() / B;
        Tensor<float> t(Shape{s.dim(1), s.dim(2), s.dim(3)});
        std::copy(s.value().data() + b * n, s.value().data() + (b + 1) * n, t.data());
        r.push_back(std::move(t));
      }
      rows.push_back(std::move(r));
    }
  }

  std::vector<Var<float>> gather(const std::vector<Index>& idx) const {
    std::vector<Var<float>> out;
    const auto B = static_cast<Index>(idx.size());
    for (std::size_t s = 0; s < rows[0].size(); ++s) {
      const Shape& one = rows[0][s].shape();
      const Index n = numel(one);
      Tensor<float> t(Shape{B, one[0], one[1], one[2]});
      for (Index b = 0; b < B; ++b) {
        const auto& src = rows[static_cast<std::size_t>(idx[static_cast<std::size_t>(b)])][s];
        std::copy(src.data(), src.data() + n, t.data() + b * n);
      }
      out.emplace_back(std::move(t));
    }
    return out;
  }
};

std::vector<float> class_weights(const std::vector<const TaskSample*>& samples, const HeadConfig& hc) {
  if (!hc.class_weighting) return {};
  const auto y = batch_labels(samples, hc.task);
  std::vector<double> counts(static_cast<std::size_t>(hc.num_classes), 0.0);
  double total = 0;
  for (auto v : y) {
    if (v < 0) continue;
    counts[static_cast<std::size_t>(v)] += 1;
    total += 1;
  }
  std::vector<float> w;
  for (double c : counts) {
    w.push_back(c > 0 ? static_cast<float>(total / (static_cast<double>(hc.num_classes) * c)) : 1.0f);
  }
  return w;
}

}  // namespace

FinetuneResult finetune(model::Model<float>& encoder, Head<float>& head, const FinetuneConfig& cfg,
                        const std::vector<TaskSample>& train, const std::vector<TaskSample>& test,
                        const data::NormalizationStats& stats) {
  cfg.validate();
  const HeadConfig& hc = head.config();
  if (!(head.encoder_config() == encoder.config())) throw DownstreamError("head was built for a different encoder config");
  if (train.empty()) throw data::DataError(data::DataErrorKind::invalid_argument, "fine-tuning needs training samples");
  for (const auto& s : train) check_sample(s, encoder.config(), hc.task);
  for (const auto& s : test) check_sample(s, encoder.config(), hc.task);

  FinetuneResult res;
  const auto subset = fraction_subset(static_cast<Index>(train.size()), cfg.train_fraction, cfg.seed);
  std::vector<const TaskSample*> pool;
  for (Index i : subset) pool.push_back(&train[static_cast<std::size_t>(i)]);
  res.train_count = static_cast<Index>(pool.size());
  res.encoder_hash_before = ckpt::params_hash(encoder.params().all());
  const auto weights = class_weights(pool, hc);
  const bool frozen = hc.encoder_frozen;

  FeatureCache cache;
  if (frozen) {
    NoGradGuard guard;
    for (std::size_t first = 0; first < pool.size(); first += static_cast<std::size_t>(cfg.batch_size)) {
      const std::vector<const TaskSample*> chunk(
          pool.begin() + static_cast<std::ptrdiff_t>(first),
          pool.begin() + static_cast<std::ptrdiff_t>(std::min(pool.size(), first + static_cast<std::size_t>(cfg.batch_size))));
      cache.append(head_inputs(encoder, hc, chunk, stats));
    }
  }

  optim::AdamW<float> head_opt(head.params().all(), cfg.adamw);
  std::optional<optim::AdamW<float>> enc_opt;
  if (!frozen) enc_opt.emplace(encoder.params().all(), cfg.adamw);

  const Index n = static_cast<Index>(pool.size());
  const Index bs = std::min(cfg.batch_size, n);
  std::vector<Index> order;
  std::size_t cursor = 0;
  int epoch = 0;
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<Index> idx;
    while (static_cast<Index>(idx.size()) < bs) {
      if (cursor == order.size()) {
        order.resize(static_cast<std::size_t>(n));
        std::iota(order.begin(), order.end(), Index{0});
        Rng rng(derive_seed(cfg.seed, "ft-order", epoch++));
        rng.shuffle(order.begin(), order.end());
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    std::vector<const TaskSample*> batch;
    for (Index i : idx) batch.push_back(pool[static_cast<std::size_t>(i)]);
    const double lr = optim::warmup_cosine_lr(step, cfg.steps, cfg.warmup_steps, cfg.lr);

    double loss_value;
    {
      const std::vector<Var<float>> in = frozen ? cache.gather(idx) : head_inputs(encoder, hc, batch, stats);
      Var<float> loss = ag::cross_entropy(flat_logits(head.forward_reduced(in)), batch_labels(batch, hc.task), weights);
      loss_value = loss.value()[0];
      if (!std::isfinite(loss_value)) {
        std::string ids;
        for (const auto* s : batch) ids += (ids.empty() ? "" : ",") + s->image.sample_id;
        throw train::NumericError("non-finite fine-tuning loss on samples [" + ids + "]");
      }
      loss.backward();
    }
    head_opt.step(lr);
    head_opt.zero_grad();
    if (enc_opt) {
      enc_opt->step(lr * cfg.encoder_lr_scale);
      enc_opt->zero_grad();
    }
    res.losses.push_back(loss_value);
  }

  res.encoder_hash_after = ckpt::params_hash(encoder.params().all());
  if (frozen && res.encoder_hash_after != res.encoder_hash_before) {
    throw std::logic_error("frozen encoder parameters changed during fine-tuning");
  }
  std::vector<TaskSample> used;
  for (const auto* s : pool) used.push_back(*s);
  res.train_report = evaluate(encoder, head, used, stats, cfg.batch_size);
  if (!test.empty()) res.test_report = evaluate(encoder, head, test, stats, cfg.batch_size);
  return res;
}

Predictions predict(const model::Model<float>& encoder, const Head<float>& head, const std::vector<TaskSample>& samples,
                    const data::NormalizationStats& stats, Index batch_size) {
  NoGradGuard guard;
  const HeadConfig& hc = head.config();
  const Index K = hc.num_classes;
  Predictions out;
  for (std::size_t first = 0; first < samples.size(); first += static_cast<std::size_t>(batch_size)) {
    std::vector<const TaskSample*> batch;
    for (std::size_t i = first; i < std::min(samples.size(), first + static_cast<std::size_t>(batch_size)); ++i) {
      check_sample(samples[i], encoder.config(), hc.task);
      batch.push_back(&samples[i]);
    }
    const Var<float> logits = flat_logits(head.forward_reduced(head_inputs(encoder, hc, batch, stats)));
    const Index B = logits.dim(0), S = logits.dim(2);
    const float* z = logits.value().data();
    for (Index b = 0; b < B; ++b)
      for (Index s = 0; s < S; ++s) {
        float mx = -std::numeric_limits<float>::infinity();
        Index arg = 0;
        for (Index k = 0; k < K; ++k) {
          const float v = z[(b * K + k) * S + s];
          if (v > mx) {
            mx = v;
            arg = k;
          }
        }
        double sum = 0;
        for (Index k = 0; k < K; ++k) sum += std::exp(static_cast<double>(z[(b * K + k) * S + s] - mx));
        for (Index k = 0; k < K; ++k) {
          out.scores.push_back(static_cast<float>(std::exp(static_cast<double>(z[(b * K + k) * S + s] - mx)) / sum));
        }
        out.predicted.push_back(static_cast<std::int32_t>(arg));
      }
    const auto y = batch_labels(batch, hc.task);
    out.labels.insert(out.labels.end(), y.begin(), y.end());
  }
  return out;
}

MetricReport evaluate(const model::Model<float>& encoder, const Head<float>& head, const std::vector<TaskSample>& samples,
                      const data::NormalizationStats& stats, Index batch_size) {
  if (samples.empty()) throw DownstreamError("evaluate: no samples");
  const auto p = predict(encoder, head, samples, stats, batch_size);
  const HeadConfig& hc = head.config();
  return compute_metrics(p.predicted, p.labels, hc.num_classes, p.scores, class_names(hc.task, hc.num_classes), hc.task);
}

void save_head(const std::filesystem::path& dir, const Head<float>& head, json meta) {
  meta["head_config"] = to_json(head.config());
  meta["encoder_config"] = model::to_json(head.encoder_config());
  ckpt::save_params(dir, head.params().all(), meta);
}

HeadConfig read_head_config(const std::filesystem::path& dir) {
  const json m = ckpt::read_manifest(dir);
  try {
    return head_config_from_json(m.at("meta").at("head_config"));
  } catch (const json::exception& e) {
    throw ckpt::CheckpointError(ckpt::CheckpointErrorKind::format, dir.string() + ": no head config: " + e.what());
  }
}

void load_head(const std::filesystem::path& dir, Head<float>& head) {
  const json m = ckpt::read_manifest(dir);
  json stored, requested = {{"head_config", to_json(head.config())}, {"encoder_config", model::to_json(head.encoder_config())}};
  try {
    stored = {{"head_config", m.at("meta").at("head_config")}, {"encoder_config", m.at("meta").at("encoder_config")}};
  } catch (const json::exception& e) {
    throw ckpt::CheckpointError(ckpt::CheckpointErrorKind::format, dir.string() + ": not a head checkpoint");
  }
  const auto diff = ckpt::json_diff(stored, requested);
  if (!diff.empty()) {
    std::string msg = dir.string() + ": head checkpoint does not match the requested head";
    for (const auto& d : diff) msg += "\n  " + d;
    throw ckpt::CheckpointError(ckpt::CheckpointErrorKind::incompatible, msg);
  }
  ckpt::load_params(dir, head.params().all());
}

}  // namespace rsfm::downstream
